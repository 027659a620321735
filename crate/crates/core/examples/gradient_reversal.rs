//! The race branch under multi-task and adversarial training: identical
//! forward values, opposite-signed race gradient at the backbone.
//!
//! cargo run --example gradient_reversal

use kinfair::autograd::Tape;
use kinfair::tensor::Tensor;

fn backbone_grad(lambda: Option<f64>) -> Vec<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, -0.5, 0.3, 0.8]));
    let w = tape.leaf(Tensor::new(vec![2, 2], vec![0.4, -0.1, 0.2, 0.7]));
    let head = tape.leaf(Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.6]));
    let e = tape.matmul(x, w);
    let r = match lambda {
        Some(l) => tape.grad_reverse(e, l),
        None => e,
    };
    let logits = tape.matmul(r, head);
    let ce = tape.cross_entropy(logits, &[0, 2]);
    println!("  race loss {:.6}", tape.value(ce).data()[0]);
    tape.backward(ce).get(w).unwrap().data().to_vec()
}

fn main() {
    println!("multi-task:");
    let mt = backbone_grad(None);
    println!("  dL_race/dW = {mt:?}");
    for lambda in [0.5, 1.0] {
        println!("adversarial, lambda = {lambda}:");
        let adv = backbone_grad(Some(lambda));
        println!("  dL_race/dW = {adv:?}");
    }
}
