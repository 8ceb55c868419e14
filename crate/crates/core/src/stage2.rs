//! The stage-two network (bridge, 3D path, CTAM, prediction head), cached
//! stage-one outputs and patch-level training.

use rand::Rng;
use sshs_tensor::nn::{join, Ctx, Module, OptimKind, Optimizer, Param};
use sshs_tensor::{Scalar, Tensor, Var};

use crate::backbone2d::Net2d;
use crate::backbone3d::Net3d;
use crate::bridge::{assemble_stage2_input, crop_cdhw, fuse_confidences_g, upsample_features, Bridge, PatchSpec};
use crate::config::ExperimentConfig;
use crate::ctam::{Ctam, PsiHead};
use crate::error::{Error, Result};
use crate::losses::{loss_3d, one_hot, LossReport};
use crate::volume::{make_slice_triplets, LabelMap, Volume};

/// Stage-one outputs for one subject, frozen for stage two.
#[derive(Clone, Debug)]
pub struct Stage1Cache {
    /// `(C1, Z, H, W)` fused coarse probabilities.
    pub coarse: Tensor<f32>,
    /// `(2*C2, Z, H/4, W/4)`: both peers' upsampled features, peer one first.
    pub features: Tensor<f32>,
}

/// Runs both peers over every slice triplet of `v` (evaluation mode) and
/// fuses the results.
pub fn stage1_volume<T: Scalar>(net1: &Net2d<T>, net2: &Net2d<T>, v: &Volume, batch: usize) -> Result<Stage1Cache> {
    let triplets = make_slice_triplets("", v);
    let [h, w] = triplets[0].size;
    let ctx = Ctx::eval();
    let (mut p1, mut p2, mut f1, mut f2) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for chunk in triplets.chunks(batch.max(1)) {
        let data: Vec<T> = chunk.iter().flat_map(|t| t.channels.iter().map(|&x| T::lit(x as f64))).collect();
        let x = Var::constant(Tensor::from_vec(vec![chunk.len(), 3, h, w], data));
        let a = net1.forward(&ctx, &x)?;
        let b = net2.forward(&ctx, &x)?;
        p1.push(a.probs.value().cast::<f32>());
        p2.push(b.probs.value().cast::<f32>());
        f1.push(a.feature.value().cast::<f32>());
        f2.push(b.feature.value().cast::<f32>());
    }
    let cat = |v: &[Tensor<f32>]| Tensor::concat(&v.iter().collect::<Vec<_>>(), 0);
    let coarse = fuse_confidences_g(&cat(&p1), &cat(&p2))?;
    let features = Tensor::concat(&[&upsample_features(&cat(&f1)), &upsample_features(&cat(&f2))], 0);
    if !coarse.all_finite() || !features.all_finite() {
        return Err(Error::NonFinite("stage-one outputs contain non-finite values".into()));
    }
    Ok(Stage1Cache { coarse, features })
}

/// One training or inference patch: `M1 (1+C1, Z, h, w)` and the matching
/// feature crop `(2*C2, Z, h/4, w/4)`.
#[derive(Clone, Debug)]
pub struct Patch {
    pub spec: PatchSpec,
    pub m1: Tensor<f32>,
    pub features: Tensor<f32>,
}

pub fn extract_patch(v: &Volume, cache: &Stage1Cache, spec: PatchSpec) -> Result<Patch> {
    let image = Tensor::from_vec(vec![1, v.dims[0], v.dims[1], v.dims[2]], v.data.clone());
    let img = crop_cdhw(&image, spec.origin, spec.size)?;
    let coarse = crop_cdhw(&cache.coarse, spec.origin, spec.size)?;
    let (fo, fs) = spec.feature_crop();
    Ok(Patch { spec, m1: assemble_stage2_input(&img, &coarse)?, features: crop_cdhw(&cache.features, fo, fs)? })
}

pub fn patch_labels(m: &LabelMap, spec: PatchSpec) -> Vec<usize> {
    let [z0, y0, x0] = spec.origin;
    let [d, h, w] = spec.size;
    let mut out = Vec::with_capacity(d * h * w);
    for z in z0..z0 + d {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                out.push(m.get(z, y, x) as usize);
            }
        }
    }
    out
}

pub struct Stage2Output<T: Scalar> {
    /// `(B, 2*C3, Z, h/4, w/4)` projected 2D-path features.
    pub hybrid: Var<T>,
    /// `(B, C3, Z, h/4, w/4)` reduced 2D-path feature.
    pub intra: Var<T>,
    /// `(B, C3, Z, h/4, w/4)` 3D-path feature.
    pub inter: Var<T>,
    /// `(B, C4, Z, h/4, w/4)`.
    pub m2: Var<T>,
    /// `(B, C1, Z, h, w)`.
    pub logits: Var<T>,
    pub probs: Var<T>,
}

#[derive(Clone, Debug)]
pub struct Stage2Net<T: Scalar> {
    pub bridge: Bridge<T>,
    pub net3d: Net3d<T>,
    pub ctam: Ctam<T>,
    pub psi: PsiHead<T>,
    pub num_classes: usize,
}

impl<T: Scalar> Stage2Net<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &ExperimentConfig) -> Result<Self> {
        if cfg.c4 != 2 * cfg.c3 {
            return Err(Error::Config(format!("C4 = {} must equal 2*C3 = {}", cfg.c4, 2 * cfg.c3)));
        }
        Ok(Stage2Net {
            bridge: Bridge::new(rng, cfg.c2, cfg.c3),
            net3d: Net3d::new(rng, &cfg.net3d, 1 + cfg.num_classes, cfg.c3),
            ctam: Ctam::new(rng, cfg.c3)?,
            psi: PsiHead::new(rng, cfg.c4, cfg.num_classes),
            num_classes: cfg.num_classes,
        })
    }

    pub fn forward(&self, ctx: &Ctx<T>, m1: &Var<T>, features: &Var<T>) -> Result<Stage2Output<T>> {
        let hybrid = self.bridge.fuse_stacked(ctx, features)?;
        let intra = self.bridge.reduce_channels(ctx, &hybrid)?;
        let inter = self.net3d.forward(ctx, m1)?;
        if intra.shape() != inter.shape() {
            return Err(Error::Shape(format!("feature crop {:?} does not match 3D path {:?}", intra.shape(), inter.shape())));
        }
        let m2 = self.ctam.forward(ctx, &intra, &inter)?;
        let logits = self.psi.forward(ctx, &m2);
        let probs = logits.softmax(1);
        Ok(Stage2Output { hybrid, intra, inter, m2, logits, probs })
    }

    /// Batched forward over patches, returning `(C1, Z, h, w)` probabilities per patch.
    pub fn predict(&self, patches: &[Patch]) -> Result<Vec<Tensor<f32>>> {
        let (m1, f) = stack_patches::<T>(patches);
        let out = self.forward(&Ctx::eval(), &Var::constant(m1), &Var::constant(f))?;
        let p = out.probs.value().cast::<f32>();
        if !p.all_finite() {
            let ids: Vec<_> = patches.iter().map(|p| p.spec.origin).collect();
            return Err(Error::NonFinite(format!("non-finite stage-two output for patches at {ids:?}")));
        }
        Ok((0..patches.len()).map(|i| p.narrow(0, i, 1).reshape(p.shape()[1..].to_vec())).collect())
    }
}

fn stack_patches<T: Scalar>(patches: &[Patch]) -> (Tensor<T>, Tensor<T>) {
    let add_batch = |t: &Tensor<f32>| {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        t.cast::<T>().reshape(s)
    };
    let m1: Vec<Tensor<T>> = patches.iter().map(|p| add_batch(&p.m1)).collect();
    let f: Vec<Tensor<T>> = patches.iter().map(|p| add_batch(&p.features)).collect();
    (Tensor::concat(&m1.iter().collect::<Vec<_>>(), 0), Tensor::concat(&f.iter().collect::<Vec<_>>(), 0))
}

impl<T: Scalar> Module<T> for Stage2Net<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.bridge.visit(&join(prefix, "bridge"), f);
        self.net3d.visit(&join(prefix, "net3d"), f);
        self.ctam.visit(&join(prefix, "ctam"), f);
        self.psi.visit(&join(prefix, "psi"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.bridge.visit_mut(&join(prefix, "bridge"), f);
        self.net3d.visit_mut(&join(prefix, "net3d"), f);
        self.ctam.visit_mut(&join(prefix, "ctam"), f);
        self.psi.visit_mut(&join(prefix, "psi"), f);
    }
}

pub struct Stage2Trainer<T: Scalar> {
    pub net: Stage2Net<T>,
    pub opt: Optimizer<T>,
}

impl<T: Scalar> Stage2Trainer<T> {
    pub fn new(net: Stage2Net<T>, optim: OptimKind) -> Self {
        Stage2Trainer { net, opt: Optimizer::new(optim) }
    }

    /// One step of cross-entropy plus Dice over a batch of labelled patches.
    pub fn train_step(&mut self, patches: &[Patch], labels: &[Vec<usize>], lr: f64) -> Result<LossReport> {
        if patches.is_empty() || patches.len() != labels.len() {
            return Err(Error::Validation(format!("{} patches with {} label blocks", patches.len(), labels.len())));
        }
        let (m1, f) = stack_patches::<T>(patches);
        let ctx = Ctx::train();
        let out = self.net.forward(&ctx, &Var::constant(m1), &Var::constant(f))?;
        let flat: Vec<usize> = labels.iter().flatten().copied().collect();
        let target = one_hot(&flat, self.net.num_classes, out.probs.shape())?;
        let (loss, report) = loss_3d(&target, &out.probs)?;
        if !report.total.is_finite() {
            return Err(Error::NonFinite(format!("stage-two loss {report:?}")));
        }
        let grads = loss.backward();
        self.opt.step(&mut self.net, &grads, lr);
        self.net.apply_updates(&ctx);
        Ok(report)
    }
}
