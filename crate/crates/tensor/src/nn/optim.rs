use std::collections::HashMap;

use super::param::Module;
use crate::autograd::Gradients;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimKind {
    /// Adam with L2 weight decay added to the gradient.
    Adam { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
    Sgd { momentum: f64, weight_decay: f64 },
}

impl OptimKind {
    pub fn adam(weight_decay: f64) -> Self {
        OptimKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }
}

/// First-order optimiser. State is keyed by parameter name so it survives
/// module clones and checkpoint round trips.
#[derive(Clone, Debug)]
pub struct Optimizer<T: Scalar> {
    pub kind: OptimKind,
    pub step: u64,
    pub state: HashMap<String, Vec<Tensor<T>>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimKind) -> Self {
        Optimizer { kind, step: 0, state: HashMap::new() }
    }

    /// Applies one update with learning rate `lr`. Parameters without a
    /// gradient in `grads` are left untouched.
    pub fn step<M: Module<T> + ?Sized>(&mut self, module: &mut M, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let kind = self.kind;
        let state = &mut self.state;
        module.visit_mut("", &mut |name, p| {
            if !p.trainable {
                return;
            }
            let Some(g) = grads.param(p.id()) else { return };
            assert_eq!(g.shape(), p.value.shape(), "gradient shape for {name}");
            let w = p.value.data_mut();
            let g = g.data();
            match kind {
                OptimKind::Adam { beta1, beta2, eps, weight_decay } => {
                    let s = state
                        .entry(name.to_string())
                        .or_insert_with(|| vec![Tensor::zeros(vec![w.len()]), Tensor::zeros(vec![w.len()])]);
                    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
                    let (c1, c2) = (T::lit(1.0 - beta1.powi(t)), T::lit(1.0 - beta2.powi(t)));
                    let (lr, eps, wd) = (T::lit(lr), T::lit(eps), T::lit(weight_decay));
                    let (m, v) = s.split_at_mut(1);
                    let (m, v) = (m[0].data_mut(), v[0].data_mut());
                    for i in 0..w.len() {
                        let gi = g[i] + wd * w[i];
                        m[i] = b1 * m[i] + (T::one() - b1) * gi;
                        v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        w[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
                OptimKind::Sgd { momentum, weight_decay } => {
                    let (lr, mom, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
                    let s = state.entry(name.to_string()).or_insert_with(|| vec![Tensor::zeros(vec![w.len()])]);
                    let buf = s[0].data_mut();
                    for i in 0..w.len() {
                        let gi = g[i] + wd * w[i];
                        buf[i] = if t == 1 { gi } else { mom * buf[i] + gi };
                        w[i] -= lr * buf[i];
                    }
                }
            }
        });
    }
}
