use std::collections::BTreeMap;

use crate::modelcore::ParamStore;
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
/// `g += wd * p; v = mu * v + g; p -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd { lr, momentum, weight_decay, velocity: BTreeMap::new() }
    }

    /// Applies one update. Parameters without a gradient entry are left alone.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                let d = gv + self.weight_decay * *pv;
                *vv = self.momentum * *vv + d;
                *pv -= self.lr * *vv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_closed_form() {
        // f(p) = 0.5 * a * p^2, gradient a * p.
        let (a, lr, mu, wd) = (3.0, 0.1, 0.9, 0.01);
        let mut params = ParamStore::from([("p".to_string(), Tensor::new(vec![1], vec![2.0]))]);
        let mut opt = Sgd::new(lr, mu, wd);
        let mut v = 0.0;
        let mut p = 2.0;
        for _ in 0..3 {
            let g = a * params["p"].data()[0];
            opt.step(&mut params, &BTreeMap::from([("p".to_string(), Tensor::new(vec![1], vec![g]))]));
            v = mu * v + (a * p + wd * p);
            p -= lr * v;
            assert!((params["p"].data()[0] - p).abs() < 1e-15);
        }
        // First step by hand: 2 - 0.1 * (6 + 0.02).
        let mut one = ParamStore::from([("p".to_string(), Tensor::new(vec![1], vec![2.0]))]);
        Sgd::new(lr, mu, wd).step(&mut one, &BTreeMap::from([("p".to_string(), Tensor::new(vec![1], vec![6.0]))]));
        assert!((one["p"].data()[0] - 1.398).abs() < 1e-15);
    }
}
