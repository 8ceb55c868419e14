//! 3D DeepLabv3+ over full-resolution patches. Every stride and dilation is
//! in-plane only, so the slice axis is preserved end to end.

use rand::Rng;
use sshs_tensor::nn::{join, ConvNorm, Ctx, Module, NormKind, Param};
use sshs_tensor::{Scalar, Var};

use crate::blocks::{inplane, make_stage, opts, pointwise, run_stage, Aspp, BlockSpec, Bottleneck, SepConv, Spatial};
use crate::config::Net3dConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Net3d<T: Scalar> {
    pub stem: ConvNorm<T>,
    pub stages: Vec<Vec<Bottleneck<T>>>,
    pub aspp: Aspp<T>,
    pub low_proj: ConvNorm<T>,
    pub refine1: SepConv<T>,
    pub refine2: SepConv<T>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl<T: Scalar> Net3d<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &Net3dConfig, in_channels: usize, out_channels: usize) -> Self {
        let norm = NormKind::Instance;
        let k3 = Spatial::D3.kernel(3);
        let stem = ConvNorm::new(rng, in_channels, cfg.stem_channels, k3, opts(k3, inplane(2), [1; 3], 1), norm, true);
        let mut cin = cfg.stem_channels;
        let mut stages = Vec::new();
        for i in 0..4 {
            let spec = BlockSpec {
                cin,
                width: cfg.widths[i],
                cout: cfg.out_channels[i],
                cardinality: cfg.cardinality,
                se_reduction: cfg.se_reduction,
                stride: cfg.strides[i],
                dilation: 1,
                spatial: Spatial::D3,
                norm,
            };
            stages.push(make_stage(rng, spec, cfg.blocks[i]));
            cin = cfg.out_channels[i];
        }
        let aspp = Aspp::new(rng, cin, cfg.aspp_channels, &cfg.aspp_rates, Spatial::D3, norm);
        let low_proj = pointwise(rng, cfg.stem_channels, cfg.low_level_channels, norm, true);
        let refine1 = SepConv::new(rng, cfg.aspp_channels + cfg.low_level_channels, out_channels, Spatial::D3, norm);
        let refine2 = SepConv::new(rng, out_channels, out_channels, Spatial::D3, norm);
        Net3d { stem, stages, aspp, low_proj, refine1, refine2, in_channels, out_channels }
    }

    /// `(B, 1 + C1, Z, h, w)` -> `(B, C3, Z, h/4, w/4)`.
    pub fn forward(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        if s.len() != 5 || s[1] != self.in_channels {
            return Err(Error::Shape(format!("3D input must be (B, {}, Z, h, w), got {s:?}", self.in_channels)));
        }
        if s[3] % 16 != 0 || s[4] % 16 != 0 {
            return Err(Error::Shape(format!("3D patch in-plane size {:?} must be a multiple of 16", &s[3..])));
        }
        let low = self.stem.forward(ctx, x).max_pool([1, 3, 3], [1, 2, 2], [0, 1, 1]);
        let deep = self.stages.iter().fold(low.clone(), |h, st| run_stage(st, ctx, &h));
        let a = self.aspp.forward(ctx, &deep);
        let (lh, lw) = (low.shape()[3], low.shape()[4]);
        let fused = Var::concat(&[a.resize_bilinear(lh, lw), self.low_proj.forward(ctx, &low)], 1);
        Ok(self.refine2.forward(ctx, &self.refine1.forward(ctx, &fused)))
    }
}

impl<T: Scalar> Module<T> for Net3d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        self.stages.visit(&join(prefix, "stages"), f);
        self.aspp.visit(&join(prefix, "aspp"), f);
        self.low_proj.visit(&join(prefix, "low_proj"), f);
        self.refine1.visit(&join(prefix, "refine1"), f);
        self.refine2.visit(&join(prefix, "refine2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        self.stages.visit_mut(&join(prefix, "stages"), f);
        self.aspp.visit_mut(&join(prefix, "aspp"), f);
        self.low_proj.visit_mut(&join(prefix, "low_proj"), f);
        self.refine1.visit_mut(&join(prefix, "refine1"), f);
        self.refine2.visit_mut(&join(prefix, "refine2"), f);
    }
}
