//! DeepLabv3+ with an SE-ResNeXt encoder for 2.5D slice triplets.

use rand::Rng;
use sshs_tensor::nn::{join, Conv, ConvNorm, Ctx, Module, NormKind, Param};
use sshs_tensor::ops::ConvOpts;
use sshs_tensor::{Scalar, Tensor, Var};

use crate::blocks::{inplane, make_stage, opts, pointwise, run_stage, Aspp, BlockSpec, Bottleneck, SepConv, Spatial};
use crate::config::Net2dConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Encoder2d<T: Scalar> {
    pub stem: ConvNorm<T>,
    pub stages: Vec<Vec<Bottleneck<T>>>,
}

impl<T: Scalar> Module<T> for Encoder2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        self.stages.visit(&join(prefix, "stages"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        self.stages.visit_mut(&join(prefix, "stages"), f);
    }
}

#[derive(Clone, Debug)]
pub struct Decoder2d<T: Scalar> {
    pub low_proj: ConvNorm<T>,
    pub refine1: SepConv<T>,
    pub refine2: SepConv<T>,
}

impl<T: Scalar> Module<T> for Decoder2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.low_proj.visit(&join(prefix, "low_proj"), f);
        self.refine1.visit(&join(prefix, "refine1"), f);
        self.refine2.visit(&join(prefix, "refine2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.low_proj.visit_mut(&join(prefix, "low_proj"), f);
        self.refine1.visit_mut(&join(prefix, "refine1"), f);
        self.refine2.visit_mut(&join(prefix, "refine2"), f);
    }
}

/// One stage-one peer network.
#[derive(Clone, Debug)]
pub struct Net2d<T: Scalar> {
    pub encoder: Encoder2d<T>,
    pub aspp: Aspp<T>,
    pub decoder: Decoder2d<T>,
    pub head: Conv<T>,
    pub num_classes: usize,
    pub feature_channels: usize,
}

pub struct Output2d<T: Scalar> {
    /// `(B, C1, H, W)`.
    pub logits: Var<T>,
    /// Channel softmax of `logits`.
    pub probs: Var<T>,
    /// Fused low/high-level feature `(B, C2, H/4, W/4)`.
    pub feature: Var<T>,
}

impl<T: Scalar> Net2d<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &Net2dConfig, num_classes: usize, feature_channels: usize) -> Self {
        let norm = NormKind::Batch;
        let k7 = Spatial::D2.kernel(7);
        let stem = ConvNorm::new(rng, 3, cfg.stem_channels, k7, opts(k7, inplane(2), [1; 3], 1), norm, true);
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
                dilation: cfg.dilations[i],
                spatial: Spatial::D2,
                norm,
            };
            stages.push(make_stage(rng, spec, cfg.blocks[i]));
            cin = cfg.out_channels[i];
        }
        let aspp = Aspp::new(rng, cin, cfg.aspp_channels, &cfg.aspp_rates, Spatial::D2, norm);
        let decoder = Decoder2d {
            low_proj: pointwise(rng, cfg.out_channels[0], cfg.low_level_channels, norm, true),
            refine1: SepConv::new(rng, cfg.aspp_channels + cfg.low_level_channels, feature_channels, Spatial::D2, norm),
            refine2: SepConv::new(rng, feature_channels, feature_channels, Spatial::D2, norm),
        };
        let head = Conv::new(rng, feature_channels, num_classes, [1, 1, 1], ConvOpts::default(), true);
        Net2d { encoder: Encoder2d { stem, stages }, aspp, decoder, head, num_classes, feature_channels }
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Output2d<T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("2D input must be (B, 3, H, W), got {s:?}")));
        }
        if s[2] % 4 != 0 || s[3] % 4 != 0 || s[2] < 16 || s[3] < 16 {
            return Err(Error::Shape(format!("2D input spatial size {:?} must be a multiple of 4 and at least 16", &s[2..])));
        }
        let (h, w) = (s[2], s[3]);
        let e = &self.encoder;
        let stem = e.stem.forward(ctx, x).max_pool([1, 3, 3], [1, 2, 2], [0, 1, 1]);
        let low = run_stage(&e.stages[0], ctx, &stem);
        let mut deep = low.clone();
        for stage in &e.stages[1..] {
            deep = run_stage(stage, ctx, &deep);
        }
        let a = self.aspp.forward(ctx, &deep);
        let (lh, lw) = (low.shape()[2], low.shape()[3]);
        let fused = Var::concat(&[a.resize_bilinear(lh, lw), self.decoder.low_proj.forward(ctx, &low)], 1);
        let feature = self.decoder.refine2.forward(ctx, &self.decoder.refine1.forward(ctx, &fused));
        let logits = self.head.forward(ctx, &feature).resize_bilinear(h, w);
        let probs = logits.softmax(1);
        Ok(Output2d { logits, probs, feature })
    }

    /// Copies encoder tensors from `(name, tensor)` pairs named like
    /// `encoder.*`. Other names are ignored; decoder and head keep their
    /// random initialisation.
    pub fn init_encoder_pretrained(&mut self, weights: &[(String, Tensor<T>)]) -> Result<usize> {
        let lookup: std::collections::HashMap<&str, &Tensor<T>> = weights.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut err = None;
        let mut copied = 0;
        self.encoder.visit_mut("encoder", &mut |name, p| {
            if err.is_some() {
                return;
            }
            match lookup.get(name) {
                None => err = Some(Error::Checkpoint(format!("pretrained weights lack encoder tensor {name}"))),
                Some(t) if t.shape() != p.value.shape() => {
                    err = Some(Error::Checkpoint(format!(
                        "pretrained tensor {name} has shape {:?}, encoder expects {:?}",
                        t.shape(),
                        p.value.shape()
                    )))
                }
                Some(t) => {
                    p.value = (*t).clone();
                    copied += 1;
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(copied),
        }
    }
}

impl<T: Scalar> Module<T> for Net2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.aspp.visit(&join(prefix, "aspp"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.aspp.visit_mut(&join(prefix, "aspp"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
