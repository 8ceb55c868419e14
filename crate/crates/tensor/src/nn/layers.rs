use rand::Rng;

use super::param::{join, Ctx, Module, Param};
use crate::autograd::Var;
use crate::ops::{normalize, normalize_fixed, ConvOpts, NormGroups};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Convolution layer with He (fan-in) initialisation and zero bias.
#[derive(Clone, Debug)]
pub struct Conv<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub opts: ConvOpts,
}

impl<T: Scalar> Conv<T> {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        opts: ConvOpts,
        bias: bool,
    ) -> Self {
        let groups = opts.groups.max(1);
        assert!(cin % groups == 0 && cout % groups == 0, "conv {cin}->{cout} not divisible by {groups} groups");
        let fan_in = (cin / groups) * kernel.iter().product::<usize>();
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = Tensor::randn(vec![cout, cin / groups, kernel[0], kernel[1], kernel[2]], std, rng);
        Conv {
            weight: Param::new(weight),
            bias: bias.then(|| Param::new(Tensor::zeros(vec![cout]))),
            opts,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.dim(1) * self.opts.groups.max(1)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
        let mut w = self.weight.var(ctx);
        if x.shape().len() == 4 {
            let s = w.shape().to_vec();
            assert_eq!(s[2], 1, "rank-4 input needs a kernel with unit depth");
            w = w.reshape(vec![s[0], s[1], s[3], s[4]]);
        }
        let b = self.bias.as_ref().map(|b| b.var(ctx));
        x.conv(&w, b.as_ref(), self.opts)
    }
}

impl<T: Scalar> Module<T> for Conv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Batch,
    Instance,
}

/// Batch or instance normalisation with a learned affine map.
#[derive(Clone, Debug)]
pub struct Norm<T: Scalar> {
    pub kind: NormKind,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Option<Param<T>>,
    pub running_var: Option<Param<T>>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> Norm<T> {
    pub fn new(kind: NormKind, channels: usize) -> Self {
        let batch = kind == NormKind::Batch;
        Norm {
            kind,
            gamma: Param::new(Tensor::ones(vec![channels])),
            beta: Param::new(Tensor::zeros(vec![channels])),
            running_mean: batch.then(|| Param::buffer(Tensor::zeros(vec![channels]))),
            running_var: batch.then(|| Param::buffer(Tensor::ones(vec![channels]))),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
        let gamma = self.gamma.var(ctx);
        let beta = self.beta.var(ctx);
        let eps = T::lit(self.eps);
        match self.kind {
            NormKind::Instance => normalize(x, &gamma, &beta, eps, NormGroups::Instance).0,
            NormKind::Batch => {
                let rm = self.running_mean.as_ref().expect("batch norm running mean");
                let rv = self.running_var.as_ref().expect("batch norm running var");
                if ctx.train {
                    let (y, stats) = normalize(x, &gamma, &beta, eps, NormGroups::Batch);
                    let unbias = if stats.count > 1 {
                        T::lit(stats.count as f64 / (stats.count - 1) as f64)
                    } else {
                        T::one()
                    };
                    let c = stats.mean.len();
                    ctx.push_update(rm.id(), Tensor::from_vec(vec![c], stats.mean.clone()), self.momentum);
                    ctx.push_update(rv.id(), Tensor::from_fn(vec![c], |i| stats.var[i] * unbias), self.momentum);
                    y
                } else {
                    normalize_fixed(x, &gamma, &beta, &rm.value, &rv.value, eps)
                }
            }
        }
    }
}

impl<T: Scalar> Module<T> for Norm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        if let Some(p) = &self.running_mean {
            f(&join(prefix, "running_mean"), p);
        }
        if let Some(p) = &self.running_var {
            f(&join(prefix, "running_var"), p);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        if let Some(p) = &mut self.running_mean {
            f(&join(prefix, "running_mean"), p);
        }
        if let Some(p) = &mut self.running_var {
            f(&join(prefix, "running_var"), p);
        }
    }
}

/// Convolution, normalisation, optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvNorm<T: Scalar> {
    pub conv: Conv<T>,
    pub norm: Norm<T>,
    pub relu: bool,
}

impl<T: Scalar> ConvNorm<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        opts: ConvOpts,
        norm: NormKind,
        relu: bool,
    ) -> Self {
        ConvNorm { conv: Conv::new(rng, cin, cout, kernel, opts, false), norm: Norm::new(norm, cout), relu }
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
        let y = self.norm.forward(ctx, &self.conv.forward(ctx, x));
        if self.relu {
            y.relu()
        } else {
            y
        }
    }
}

impl<T: Scalar> Module<T> for ConvNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}
