//! Fair contrastive loss on a toy batch: the bias vector from a debias map,
//! the loss with and without it, and its analytic gradients.
//!
//! cargo run --example fair_loss

use kinfair::losses::{self, SimMatrix};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let xs = vec![vec![1.0, 0.2, 0.0], vec![0.1, 1.0, 0.3], vec![0.0, 0.4, 1.0]];
    let ys = vec![vec![0.9, 0.3, 0.1], vec![0.2, 0.8, 0.2], vec![0.3, 0.1, 0.9]];
    let s = SimMatrix::from_embeddings(&xs, &ys, losses::DEFAULT_TAU);

    // A fixed linear debias map M(f) = f W.
    let w = [[0.5, -0.2], [0.1, 0.9], [-0.4, 0.3]];
    let map = |f: &[f64]| -> Vec<f64> { (0..2).map(|c| (0..3).map(|r| f[r] * w[r][c]).sum()).collect() };
    let bias = |fs: &[Vec<f64>]| {
        let mapped: Vec<Vec<f64>> = fs.iter().map(|f| map(f)).collect();
        losses::bias_from_debias(&mapped, |i, j| {
            let mid: Vec<f64> = fs[i].iter().zip(&fs[j]).map(|(a, b)| 0.5 * (a + b)).collect();
            map(&mid)
        })
    };
    let (bx, by) = (bias(&xs), bias(&ys));
    println!("b_x = {:?}", bx.b);
    println!("b_y = {:?}", by.b);

    let zeros = vec![0.0; 3];
    println!("SupCon loss      {:.6}", losses::supcon_loss(&s, Default::default())?);
    println!("fair loss (b=0)  {:.6}", losses::fair_contrastive_loss(&s, &zeros, &zeros)?);
    println!("fair loss        {:.6}", losses::fair_contrastive_loss(&s, &bx.b, &by.b)?);

    let g = losses::loss_grad_wrt_sims(&s, &bx.b, &by.b)?;
    println!("dL/dcos_xy diagonal: {:?}", (0..3).map(|i| g.d_cos_xy.data()[i * 3 + i]).collect::<Vec<_>>());
    println!("dL/db_x: {:?}", g.d_b_x);
    let p = losses::p_ij(&s, &bx.b)?;
    println!("positive probabilities: {:?}", p.positive);
    Ok(())
}
