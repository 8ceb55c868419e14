//! Building blocks shared by the 2D and 3D networks. A 2D net is the 3D
//! code path with unit kernel depth on rank-4 activations.

use rand::Rng;
use sshs_tensor::nn::{join, Conv, ConvNorm, Ctx, Module, NormKind, Param};
use sshs_tensor::ops::ConvOpts;
use sshs_tensor::{Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Spatial {
    D2,
    D3,
}

impl Spatial {
    pub fn kernel(self, k: usize) -> [usize; 3] {
        match self {
            Spatial::D2 => [1, k, k],
            Spatial::D3 => [k, k, k],
        }
    }
}

pub fn inplane(v: usize) -> [usize; 3] {
    [1, v, v]
}

pub fn opts(kernel: [usize; 3], stride: [usize; 3], dilation: [usize; 3], groups: usize) -> ConvOpts {
    ConvOpts::same(kernel, dilation).with_stride(stride).with_groups(groups)
}

pub fn pointwise<T: Scalar, R: Rng + ?Sized>(rng: &mut R, cin: usize, cout: usize, norm: NormKind, relu: bool) -> ConvNorm<T> {
    ConvNorm::new(rng, cin, cout, [1, 1, 1], ConvOpts::default(), norm, relu)
}

/// Spatial sizes (everything after the channel axis).
pub fn spatial_of(shape: &[usize]) -> Vec<usize> {
    shape[2..].to_vec()
}

/// Squeeze-and-excitation gate.
#[derive(Clone, Debug)]
pub struct SqueezeExcite<T: Scalar> {
    pub fc1: Conv<T>,
    pub fc2: Conv<T>,
}

impl<T: Scalar> SqueezeExcite<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        SqueezeExcite {
            fc1: Conv::new(rng, channels, hidden, [1, 1, 1], ConvOpts::default(), true),
            fc2: Conv::new(rng, hidden, channels, [1, 1, 1], ConvOpts::default(), true),
        }
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
        let s = self.fc1.forward(ctx, &x.global_avg_pool()).relu();
        let s = self.fc2.forward(ctx, &s).sigmoid();
        x.mul(&s)
    }
}

impl<T: Scalar> Module<T> for SqueezeExcite<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockSpec {
    pub cin: usize,
    pub width: usize,
    pub cout: usize,
    pub cardinality: usize,
    pub se_reduction: usize,
    pub stride: usize,
    pub dilation: usize,
    pub spatial: Spatial,
    pub norm: NormKind,
}

/// SE-ResNeXt bottleneck: 1x1 reduce, grouped 3x3, 1x1 expand, SE gate,
/// residual add.
#[derive(Clone, Debug)]
pub struct Bottleneck<T: Scalar> {
    pub conv1: ConvNorm<T>,
    pub conv2: ConvNorm<T>,
    pub conv3: ConvNorm<T>,
    pub se: SqueezeExcite<T>,
    pub shortcut: Option<ConvNorm<T>>,
}

impl<T: Scalar> Bottleneck<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, s: BlockSpec) -> Self {
        let k = s.spatial.kernel(3);
        let conv1 = pointwise(rng, s.cin, s.width, s.norm, true);
        let conv2 = ConvNorm::new(rng, s.width, s.width, k, opts(k, inplane(s.stride), inplane(s.dilation), s.cardinality), s.norm, true);
        let conv3 = pointwise(rng, s.width, s.cout, s.norm, false);
        let se = SqueezeExcite::new(rng, s.cout, s.se_reduction);
        let shortcut = (s.cin != s.cout || s.stride != 1).then(|| {
            ConvNorm::new(rng, s.cin, s.cout, [1, 1, 1], ConvOpts::default().with_stride(inplane(s.stride)), s.norm, false)
        });
        Bottleneck { conv1, conv2, conv3, se, shortcut }
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
        let h = self.conv1.forward(ctx, x);
        let h = self.conv2.forward(ctx, &h);
        let h = self.conv3.forward(ctx, &h);
        let h = self.se.forward(ctx, &h);
        let skip = match &self.shortcut {
            Some(s) => s.forward(ctx, x),
            None => x.clone(),
        };
        h.add(&skip).relu()
    }
}

impl<T: Scalar> Module<T> for Bottleneck<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.conv3.visit(&join(prefix, "conv3"), f);
        self.se.visit(&join(prefix, "se"), f);
        self.shortcut.visit(&join(prefix, "shortcut"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.conv3.visit_mut(&join(prefix, "conv3"), f);
        self.se.visit_mut(&join(prefix, "se"), f);
        self.shortcut.visit_mut(&join(prefix, "shortcut"), f);
    }
}

/// A stage of bottlenecks; only the first block strides.
pub fn make_stage<T: Scalar, R: Rng + ?Sized>(rng: &mut R, first: BlockSpec, blocks: usize) -> Vec<Bottleneck<T>> {
    (0..blocks)
        .map(|i| {
            let spec = if i == 0 { first } else { BlockSpec { cin: first.cout, stride: 1, ..first } };
            Bottleneck::new(rng, spec)
        })
        .collect()
}

pub fn run_stage<T: Scalar>(stage: &[Bottleneck<T>], ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
    stage.iter().fold(x.clone(), |h, b| b.forward(ctx, &h))
}

/// Atrous spatial pyramid pooling: a 1x1 branch, dilated 3x3 branches and an
/// image-pooling branch, concatenated and projected.
#[derive(Clone, Debug)]
pub struct Aspp<T: Scalar> {
    pub branches: Vec<ConvNorm<T>>,
    pub pool: Conv<T>,
    pub project: ConvNorm<T>,
}

impl<T: Scalar> Aspp<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cin: usize, cout: usize, rates: &[usize], spatial: Spatial, norm: NormKind) -> Self {
        let mut branches = vec![pointwise(rng, cin, cout, norm, true)];
        let k = spatial.kernel(3);
        for &r in rates {
            branches.push(ConvNorm::new(rng, cin, cout, k, opts(k, [1; 3], inplane(r), 1), norm, true));
        }
        let pool = Conv::new(rng, cin, cout, [1, 1, 1], ConvOpts::default(), true);
        let project = pointwise(rng, cout * (rates.len() + 2), cout, norm, true);
        Aspp { branches, pool, project }
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
        let mut outs: Vec<Var<T>> = self.branches.iter().map(|b| b.forward(ctx, x)).collect();
        let pooled = self.pool.forward(ctx, &x.global_avg_pool()).relu();
        let mut shape = x.shape().to_vec();
        shape[1] = pooled.shape()[1];
        outs.push(pooled.expand(&shape));
        self.project.forward(ctx, &Var::concat(&outs, 1))
    }
}

impl<T: Scalar> Module<T> for Aspp<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.branches.visit(&join(prefix, "branches"), f);
        self.pool.visit(&join(prefix, "pool"), f);
        self.project.visit(&join(prefix, "project"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.branches.visit_mut(&join(prefix, "branches"), f);
        self.pool.visit_mut(&join(prefix, "pool"), f);
        self.project.visit_mut(&join(prefix, "project"), f);
    }
}

/// Depthwise conv, norm, ReLU, then pointwise conv, norm, ReLU.
#[derive(Clone, Debug)]
pub struct SepConv<T: Scalar> {
    pub depthwise: ConvNorm<T>,
    pub pointwise: ConvNorm<T>,
}

impl<T: Scalar> SepConv<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cin: usize, cout: usize, spatial: Spatial, norm: NormKind) -> Self {
        let k = spatial.kernel(3);
        SepConv {
            depthwise: ConvNorm::new(rng, cin, cin, k, opts(k, [1; 3], [1; 3], cin), norm, true),
            pointwise: pointwise(rng, cin, cout, norm, true),
        }
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
        self.pointwise.forward(ctx, &self.depthwise.forward(ctx, x))
    }
}

impl<T: Scalar> Module<T> for SepConv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.depthwise.visit(&join(prefix, "depthwise"), f);
        self.pointwise.visit(&join(prefix, "pointwise"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.depthwise.visit_mut(&join(prefix, "depthwise"), f);
        self.pointwise.visit_mut(&join(prefix, "pointwise"), f);
    }
}

/// Squared parameter-gradient norm per top-level group (text before the first dot).
pub fn grad_norms_by_group<T: Scalar, M: Module<T>>(m: &M, grads: &sshs_tensor::Gradients<T>) -> Vec<(String, f64)> {
    let mut groups: Vec<(String, f64)> = Vec::new();
    m.visit("", &mut |name, p| {
        if !p.trainable {
            return;
        }
        let g = name.split('.').next().unwrap_or(name).to_string();
        let sq = grads.param(p.id()).map(|t| t.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>()).unwrap_or(0.0);
        match groups.iter_mut().find(|(n, _)| *n == g) {
            Some(e) => e.1 += sq,
            None => groups.push((g, sq)),
        }
    });
    groups.into_iter().map(|(n, s)| (n, s.sqrt())).collect()
}
