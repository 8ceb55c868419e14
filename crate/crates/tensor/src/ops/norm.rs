//! Batch and instance normalisation with fused backward passes.

use crate::autograd::Var;
use crate::ops::conv::split5;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Statistics group of a normalisation: per channel across the batch, or
/// per (sample, channel).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormGroups {
    Batch,
    Instance,
}

/// Per-group statistics observed during a normalisation forward.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (divided by the group size).
    pub var: Vec<T>,
    pub count: usize,
}

/// Normalises with batch statistics and applies a per-channel affine map.
pub fn normalize<T: Scalar>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    eps: T,
    groups: NormGroups,
) -> (Var<T>, NormStats<T>) {
    let (n, c, s) = split5(x.shape());
    let plane = s[0] * s[1] * s[2];
    assert_eq!(gamma.value().numel(), c, "gamma length");
    assert_eq!(beta.value().numel(), c, "beta length");
    let ng = match groups {
        NormGroups::Batch => c,
        NormGroups::Instance => n * c,
    };
    let count = match groups {
        NormGroups::Batch => n * plane,
        NormGroups::Instance => plane,
    };
    let group_of = move |ni: usize, ci: usize| match groups {
        NormGroups::Batch => ci,
        NormGroups::Instance => ni * c + ci,
    };
    let xd = x.value().data();
    let mut mean = vec![T::zero(); ng];
    let mut var = vec![T::zero(); ng];
    for ni in 0..n {
        for ci in 0..c {
            let seg = &xd[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
            mean[group_of(ni, ci)] += seg.iter().copied().sum::<T>();
        }
    }
    let cnt = T::lit(count as f64);
    for m in &mut mean {
        *m /= cnt;
    }
    for ni in 0..n {
        for ci in 0..c {
            let gidx = group_of(ni, ci);
            let m = mean[gidx];
            let seg = &xd[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
            var[gidx] += seg.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
        }
    }
    for v in &mut var {
        *v /= cnt;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let gd = gamma.value().data();
    let bd = beta.value().data();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let gidx = group_of(ni, ci);
            let (m, is) = (mean[gidx], inv_std[gidx]);
            let r = (ni * c + ci) * plane..(ni * c + ci + 1) * plane;
            for i in r {
                let h = (xd[i] - m) * is;
                xhat[i] = h;
                out[i] = gd[ci] * h + bd[ci];
            }
        }
    }
    let shape = x.shape().to_vec();
    let out = Tensor::from_vec(shape.clone(), out);
    let gamma_v = gamma.value().clone();
    let stats = NormStats { mean, var, count };
    let y = Var::from_op(
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, need| {
            let gdat = g.data();
            let gam = gamma_v.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            // per-group sums of dxhat and dxhat * xhat
            let mut s1 = vec![T::zero(); ng];
            let mut s2 = vec![T::zero(); ng];
            for ni in 0..n {
                for ci in 0..c {
                    let gidx = group_of(ni, ci);
                    let r = (ni * c + ci) * plane..(ni * c + ci + 1) * plane;
                    let (mut a, mut b, mut dg, mut db) = (T::zero(), T::zero(), T::zero(), T::zero());
                    for i in r {
                        let dy = gdat[i];
                        let dxh = dy * gam[ci];
                        a += dxh;
                        b += dxh * xhat[i];
                        dg += dy * xhat[i];
                        db += dy;
                    }
                    s1[gidx] += a;
                    s2[gidx] += b;
                    dgamma[ci] += dg;
                    dbeta[ci] += db;
                }
            }
            let dx = need[0].then(|| {
                let mut dx = vec![T::zero(); gdat.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let gidx = group_of(ni, ci);
                        let k = inv_std[gidx] / cnt;
                        let r = (ni * c + ci) * plane..(ni * c + ci + 1) * plane;
                        for i in r {
                            let dxh = gdat[i] * gam[ci];
                            dx[i] = k * (cnt * dxh - s1[gidx] - xhat[i] * s2[gidx]);
                        }
                    }
                }
                Tensor::from_vec(shape.clone(), dx)
            });
            vec![
                dx,
                need[1].then(|| Tensor::from_vec(vec![c], dgamma)),
                need[2].then(|| Tensor::from_vec(vec![c], dbeta)),
            ]
        }),
    );
    (y, stats)
}

/// Per-channel affine map with fixed statistics (batch norm in evaluation mode).
pub fn normalize_fixed<T: Scalar>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: T,
) -> Var<T> {
    let (n, c, s) = split5(x.shape());
    let plane = s[0] * s[1] * s[2];
    let inv_std: Vec<T> = var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let md = mean.data().to_vec();
    let xd = x.value().data();
    let gd = gamma.value().data();
    let bd = beta.value().data();
    let mut out = vec![T::zero(); xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let sc = gd[ci] * inv_std[ci];
            let sh = bd[ci] - md[ci] * sc;
            for i in (ni * c + ci) * plane..(ni * c + ci + 1) * plane {
                out[i] = xd[i] * sc + sh;
            }
        }
    }
    let shape = x.shape().to_vec();
    let (xv, gv) = (x.value().clone(), gamma.value().clone());
    Var::from_op(
        Tensor::from_vec(shape.clone(), out),
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, need| {
            let gdat = g.data();
            let xd = xv.data();
            let gam = gv.data();
            let mut dx = need[0].then(|| vec![T::zero(); gdat.len()]);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ni in 0..n {
                for ci in 0..c {
                    let sc = gam[ci] * inv_std[ci];
                    for i in (ni * c + ci) * plane..(ni * c + ci + 1) * plane {
                        if let Some(dx) = dx.as_mut() {
                            dx[i] = gdat[i] * sc;
                        }
                        dgamma[ci] += gdat[i] * (xd[i] - md[ci]) * inv_std[ci];
                        dbeta[ci] += gdat[i];
                    }
                }
            }
            vec![
                dx.map(|d| Tensor::from_vec(shape.clone(), d)),
                need[1].then(|| Tensor::from_vec(vec![c], dgamma)),
                need[2].then(|| Tensor::from_vec(vec![c], dbeta)),
            ]
        }),
    )
}
