use std::sync::Mutex;

use crate::autograd::{ParamId, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A named tensor owned by a module. Buffers (e.g. running statistics) are
/// parameters with `trainable == false`.
#[derive(Debug)]
pub struct Param<T: Scalar> {
    id: ParamId,
    pub value: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Clone for Param<T> {
    /// Clones get a fresh identity so optimiser state never aliases.
    fn clone(&self) -> Self {
        Param { id: ParamId::fresh(), value: self.value.clone(), trainable: self.trainable }
    }
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Param { id: ParamId::fresh(), value, trainable: true }
    }

    pub fn buffer(value: Tensor<T>) -> Self {
        Param { id: ParamId::fresh(), value, trainable: false }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    /// Graph node for this parameter under `ctx`.
    pub fn var(&self, ctx: &Ctx<T>) -> Var<T> {
        if ctx.track_grad && self.trainable {
            Var::param(self.id, self.value.clone())
        } else {
            Var::constant(self.value.clone())
        }
    }
}

/// A running-statistic update: `value <- (1 - momentum) * value + momentum * stat`.
#[derive(Clone, Debug)]
pub struct BufferUpdate<T: Scalar> {
    pub id: ParamId,
    pub stat: Tensor<T>,
    pub momentum: f64,
}

/// Forward-pass context: train/eval behaviour, gradient tracking, and the
/// running-statistic updates produced by normalisation layers.
#[derive(Debug)]
pub struct Ctx<T: Scalar> {
    pub train: bool,
    pub track_grad: bool,
    updates: Mutex<Vec<BufferUpdate<T>>>,
}

impl<T: Scalar> Ctx<T> {
    pub fn train() -> Self {
        Ctx { train: true, track_grad: true, updates: Mutex::new(Vec::new()) }
    }

    pub fn eval() -> Self {
        Ctx { train: false, track_grad: false, updates: Mutex::new(Vec::new()) }
    }

    /// Batch statistics without gradient tracking.
    pub fn train_no_grad() -> Self {
        Ctx { train: true, track_grad: false, updates: Mutex::new(Vec::new()) }
    }

    pub fn push_update(&self, id: ParamId, stat: Tensor<T>, momentum: f64) {
        self.updates.lock().expect("ctx poisoned").push(BufferUpdate { id, stat, momentum });
    }

    pub fn take_updates(&self) -> Vec<BufferUpdate<T>> {
        std::mem::take(&mut *self.updates.lock().expect("ctx poisoned"))
    }
}

/// Anything that owns parameters.
pub trait Module<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.value.numel();
            }
        });
        n
    }

    fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push((name.to_string(), p.value.clone())));
        out
    }

    /// Folds buffer updates recorded in `ctx` into the module, in the order
    /// they were recorded.
    fn apply_updates(&mut self, ctx: &Ctx<T>) {
        let updates = ctx.take_updates();
        if updates.is_empty() {
            return;
        }
        let mut map: std::collections::HashMap<ParamId, Vec<BufferUpdate<T>>> = Default::default();
        for u in updates {
            map.entry(u.id).or_default().push(u);
        }
        self.visit_mut("", &mut |_, p| {
            if let Some(list) = map.get(&p.id()) {
                for u in list {
                    let m = T::lit(u.momentum);
                    let keep = T::one() - m;
                    let v = p.value.data_mut();
                    for (v, &s) in v.iter_mut().zip(u.stat.data()) {
                        *v = keep * *v + m * s;
                    }
                }
            }
        });
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Vec<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Option<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        if let Some(m) = self {
            m.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Some(m) = self {
            m.visit_mut(prefix, f);
        }
    }
}
