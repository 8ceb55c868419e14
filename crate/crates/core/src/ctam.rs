//! Cross tri-attention: inter-slice, intra-slice and channel attention
//! blocks, the gated cross fusion, and the voxel prediction head.

use rand::Rng;
use sshs_tensor::nn::{join, Conv, Ctx, Module, Param};
use sshs_tensor::ops::ConvOpts;
use sshs_tensor::{Scalar, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    /// Rows are slices: alpha = Z.
    InterSlice,
    /// Rows are in-plane positions: alpha = h*w.
    IntraSlice,
    /// Rows are channels: alpha = C0.
    Channel,
}

impl AttentionMode {
    pub fn default_divisor(self) -> usize {
        match self {
            AttentionMode::Channel => 1,
            _ => 8,
        }
    }

    /// Permutation of `(B, C, Z, S)` that brings the attended axis second.
    fn perm(self) -> [usize; 4] {
        match self {
            AttentionMode::InterSlice => [0, 2, 1, 3],
            AttentionMode::IntraSlice => [0, 3, 1, 2],
            AttentionMode::Channel => [0, 1, 2, 3],
        }
    }

    fn inverse_perm(self) -> [usize; 4] {
        match self {
            AttentionMode::InterSlice => [0, 2, 1, 3],
            AttentionMode::IntraSlice => [0, 2, 3, 1],
            AttentionMode::Channel => [0, 1, 2, 3],
        }
    }

    /// `(alpha, beta)` for a feature with `c` channels, `z` slices and `s`
    /// in-plane positions.
    pub fn alpha_beta(self, c: usize, z: usize, s: usize) -> (usize, usize) {
        match self {
            AttentionMode::InterSlice => (z, c * s),
            AttentionMode::IntraSlice => (s, c * z),
            AttentionMode::Channel => (c, z * s),
        }
    }
}

/// Reshapes `(B, C, Z, H, W)` into `(B, alpha, beta)` rows for `mode`.
pub fn to_rows<T: Scalar>(x: &Var<T>, mode: AttentionMode) -> Var<T> {
    let s = x.shape();
    let (b, c, z, hw) = (s[0], s[1], s[2], s[3] * s[4]);
    let (alpha, beta) = mode.alpha_beta(c, z, hw);
    let x4 = x.reshape(vec![b, c, z, hw]);
    let x4 = if mode == AttentionMode::Channel { x4 } else { x4.permute(&mode.perm()) };
    x4.reshape(vec![b, alpha, beta])
}

/// Inverse of [`to_rows`] back to `shape = (B, C, Z, H, W)`.
pub fn from_rows<T: Scalar>(rows: &Var<T>, mode: AttentionMode, shape: &[usize]) -> Var<T> {
    let (b, c, z, hw) = (shape[0], shape[1], shape[2], shape[3] * shape[4]);
    let permuted = match mode {
        AttentionMode::InterSlice => vec![b, z, c, hw],
        AttentionMode::IntraSlice => vec![b, hw, c, z],
        AttentionMode::Channel => vec![b, c, z, hw],
    };
    let x4 = rows.reshape(permuted);
    let x4 = if mode == AttentionMode::Channel { x4 } else { x4.permute(&mode.inverse_perm()) };
    x4.reshape(shape.to_vec())
}

#[derive(Clone, Debug)]
pub struct AttentionBlock<T: Scalar> {
    pub mode: AttentionMode,
    pub divisor: usize,
    pub q: Conv<T>,
    pub k: Conv<T>,
    pub v: Conv<T>,
}

impl<T: Scalar> AttentionBlock<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, mode: AttentionMode, channels: usize, divisor: usize) -> Result<Self> {
        if divisor == 0 || channels % divisor != 0 {
            return Err(Error::Config(format!("attention channels {channels} not divisible by {divisor}")));
        }
        let cq = channels / divisor;
        let pw = |rng: &mut R, cout, bias| Conv::new(rng, channels, cout, [1, 1, 1], ConvOpts::default(), bias);
        Ok(AttentionBlock { mode, divisor, q: pw(rng, cq, false), k: pw(rng, cq, false), v: pw(rng, channels, true) })
    }

    /// Returns the attended feature and the attention weights `(B, alpha, alpha)`.
    pub fn forward_with_weights(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let s = x.shape().to_vec();
        if s.len() != 5 || s[1] != self.v.in_channels() {
            return Err(Error::Shape(format!("attention input must be (B, {}, Z, h, w), got {s:?}", self.v.in_channels())));
        }
        let q = to_rows(&self.q.forward(ctx, x), self.mode);
        let k = to_rows(&self.k.forward(ctx, x), self.mode);
        let v = to_rows(&self.v.forward(ctx, x), self.mode);
        // A = softmax(k' q'), q' being the transposed rows of q.
        let a = k.bmm(&q, false, true).softmax(2);
        let out = a.bmm(&v, true, false);
        Ok((from_rows(&out, self.mode, &s), a))
    }

    pub fn forward(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(self.forward_with_weights(ctx, x)?.0)
    }
}

impl<T: Scalar> Module<T> for AttentionBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
    }
}

#[derive(Clone, Debug)]
pub struct Ctam<T: Scalar> {
    pub inter: AttentionBlock<T>,
    pub intra: AttentionBlock<T>,
    pub channel: AttentionBlock<T>,
    pub gamma1: Param<T>,
    pub gamma2: Param<T>,
}

pub struct CtamTrace<T: Scalar> {
    pub f1: Var<T>,
    pub f2: Var<T>,
    pub m2: Var<T>,
}

impl<T: Scalar> Ctam<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, c3: usize) -> Result<Self> {
        Ok(Ctam {
            inter: AttentionBlock::new(rng, AttentionMode::InterSlice, c3, 8)?,
            intra: AttentionBlock::new(rng, AttentionMode::IntraSlice, c3, 8)?,
            channel: AttentionBlock::new(rng, AttentionMode::Channel, 2 * c3, 1)?,
            gamma1: Param::new(Tensor::zeros(vec![1])),
            gamma2: Param::new(Tensor::zeros(vec![1])),
        })
    }

    /// Fuses the reduced 2D-path feature (`intra`) with the 3D-path feature
    /// (`inter`), both `(B, C3, Z, h/4, w/4)`.
    pub fn forward_trace(&self, ctx: &Ctx<T>, intra: &Var<T>, inter: &Var<T>) -> Result<CtamTrace<T>> {
        if intra.shape() != inter.shape() {
            return Err(Error::Shape(format!("CTAM inputs differ: {:?} vs {:?}", intra.shape(), inter.shape())));
        }
        let g = |p: &Param<T>| p.var(ctx).reshape(vec![1, 1, 1, 1, 1]);
        let inter_att = self.inter.forward(ctx, inter)?;
        let intra_att = self.intra.forward(ctx, intra)?;
        let f1 = inter_att.mul(&g(&self.gamma1)).add(intra);
        let f2 = intra_att.mul(&g(&self.gamma2)).add(inter);
        let m2 = self.channel.forward(ctx, &Var::concat(&[f1.clone(), f2.clone()], 1))?;
        Ok(CtamTrace { f1, f2, m2 })
    }

    pub fn forward(&self, ctx: &Ctx<T>, intra: &Var<T>, inter: &Var<T>) -> Result<Var<T>> {
        Ok(self.forward_trace(ctx, intra, inter)?.m2)
    }
}

impl<T: Scalar> Module<T> for Ctam<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.inter.visit(&join(prefix, "inter"), f);
        self.intra.visit(&join(prefix, "intra"), f);
        self.channel.visit(&join(prefix, "channel"), f);
        f(&join(prefix, "gamma1"), &self.gamma1);
        f(&join(prefix, "gamma2"), &self.gamma2);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.inter.visit_mut(&join(prefix, "inter"), f);
        self.intra.visit_mut(&join(prefix, "intra"), f);
        self.channel.visit_mut(&join(prefix, "channel"), f);
        f(&join(prefix, "gamma1"), &mut self.gamma1);
        f(&join(prefix, "gamma2"), &mut self.gamma2);
    }
}

/// 1x1x1 classifier followed by x4 in-plane bilinear upsampling.
#[derive(Clone, Debug)]
pub struct PsiHead<T: Scalar> {
    pub conv: Conv<T>,
}

impl<T: Scalar> PsiHead<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, c4: usize, num_classes: usize) -> Self {
        PsiHead { conv: Conv::new(rng, c4, num_classes, [1, 1, 1], ConvOpts::default(), true) }
    }

    pub fn forward(&self, ctx: &Ctx<T>, m2: &Var<T>) -> Var<T> {
        let y = self.conv.forward(ctx, m2);
        let (h, w) = (y.shape()[3], y.shape()[4]);
        y.resize_bilinear(4 * h, 4 * w)
    }
}

impl<T: Scalar> Module<T> for PsiHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
    }
}
