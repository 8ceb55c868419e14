//! Cross-entropy, soft Dice, the stage losses and the DSC metric.
//!
//! Probability maps are `(N, C, spatial...)`; targets are either one-hot
//! tensors of the same shape or flat class indices of length `N * spatial`.

use sshs_tensor::{Scalar, Tensor, Var};

use crate::error::{Error, Result};

pub const CE_FLOOR: f64 = 1e-12;
pub const DICE_EPS: f64 = 1e-5;

/// `(n, c, mu)` of a probability map.
fn dims(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

/// One-hot encoding of flat class indices into `(N, C, spatial...)`.
pub fn one_hot<T: Scalar>(labels: &[usize], num_classes: usize, shape: &[usize]) -> Result<Tensor<T>> {
    if shape.len() < 3 || shape[1] != num_classes {
        return Err(Error::Shape(format!("one-hot shape {shape:?} must be (N, {num_classes}, ...)")));
    }
    let (n, c, mu) = dims(shape);
    if labels.len() != n * mu {
        return Err(Error::Shape(format!("{} labels for {} pixels", labels.len(), n * mu)));
    }
    let mut t = Tensor::zeros(shape.to_vec());
    let d = t.data_mut();
    for (p, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::Validation(format!("label {l} outside [0, {c})")));
        }
        let (b, i) = (p / mu, p % mu);
        d[(b * c + l) * mu + i] = T::one();
    }
    Ok(t)
}

fn check_pair<T: Scalar>(target: &Tensor<T>, r: &Var<T>) -> Result<()> {
    if target.shape() != r.shape() || r.shape().len() < 3 {
        return Err(Error::Shape(format!("target {:?} vs prediction {:?}", target.shape(), r.shape())));
    }
    if r.shape()[0] == 0 {
        return Err(Error::Validation("empty batch".into()));
    }
    Ok(())
}

/// `-(1/(n*mu)) * sum o* log max(r, 1e-12)`.
pub fn cross_entropy<T: Scalar>(target: &Tensor<T>, r: &Var<T>) -> Result<Var<T>> {
    check_pair(target, r)?;
    let (n, _, mu) = dims(r.shape());
    let norm = T::lit((n * mu) as f64);
    let floor = T::lit(CE_FLOOR);
    let mut acc = 0.0f64;
    for (&o, &p) in target.data().iter().zip(r.value().data()) {
        if o != T::zero() {
            acc -= (o * p.max(floor).ln()).as_f64();
        }
    }
    let value = Tensor::scalar(T::lit(acc) / norm);
    let (o, p) = (target.clone(), r.value().clone());
    Ok(Var::from_op(
        value,
        vec![r.clone()],
        Box::new(move |g, _| {
            let s = g.item() / norm;
            let d = o.zip_map(&p, |o, p| if p > floor { -(o / p) * s } else { T::zero() });
            vec![Some(d)]
        }),
    ))
}

/// Per-(sample, class) Dice `(2I + eps)/(U + eps)`, averaged and negated.
pub fn dice_loss<T: Scalar>(target: &Tensor<T>, r: &Var<T>) -> Result<Var<T>> {
    check_pair(target, r)?;
    let (n, c, mu) = dims(r.shape());
    let eps = DICE_EPS;
    let (o, p) = (target.data(), r.value().data());
    let mut inter = vec![0.0f64; n * c];
    let mut union = vec![0.0f64; n * c];
    for k in 0..n * c {
        for i in k * mu..(k + 1) * mu {
            inter[k] += (o[i] * p[i]).as_f64();
            union[k] += (o[i] + p[i]).as_f64();
        }
    }
    let nc = (n * c) as f64;
    let total: f64 = inter.iter().zip(&union).map(|(i, u)| (2.0 * i + eps) / (u + eps)).sum();
    let value = Tensor::scalar(T::lit(-total / nc));
    let o = target.clone();
    Ok(Var::from_op(
        value,
        vec![r.clone()],
        Box::new(move |g, _| {
            let s = g.item().as_f64();
            let od = o.data();
            let mut d = vec![T::zero(); od.len()];
            for k in 0..n * c {
                let (i2, u) = (2.0 * inter[k] + eps, union[k] + eps);
                for j in k * mu..(k + 1) * mu {
                    d[j] = T::lit(-s / nc * (2.0 * od[j].as_f64() * u - i2) / (u * u));
                }
            }
            vec![Some(Tensor::from_vec(o.shape().to_vec(), d))]
        }),
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_ce: f64,
    pub l_dc: f64,
    pub total: f64,
}

/// Cross-entropy plus Dice over full-resolution patch probabilities.
pub fn loss_3d<T: Scalar>(target: &Tensor<T>, probs: &Var<T>) -> Result<(Var<T>, LossReport)> {
    let ce = cross_entropy(target, probs)?;
    let dc = dice_loss(target, probs)?;
    let total = ce.add(&dc);
    let report = LossReport { l_ce: ce.value().item().as_f64(), l_dc: dc.value().item().as_f64(), total: total.value().item().as_f64() };
    Ok((total, report))
}

/// `sum_m CE(Y*, S^m) + Dice(Y*, S^m)` over the two peers.
pub fn supervised_loss<T: Scalar>(target: &Tensor<T>, s1: &Var<T>, s2: &Var<T>) -> Result<Var<T>> {
    let (a, _) = loss_3d(target, s1)?;
    let (b, _) = loss_3d(target, s2)?;
    Ok(a.add(&b))
}

/// `CE(y1, s2) + CE(y2, s1)`. Pseudo labels are plain indices and carry no graph.
pub fn cps_loss<T: Scalar>(y1: &[usize], s2: &Var<T>, y2: &[usize], s1: &Var<T>) -> Result<Var<T>> {
    if s1.shape() != s2.shape() {
        return Err(Error::Shape(format!("peer maps differ: {:?} vs {:?}", s1.shape(), s2.shape())));
    }
    let c = s1.shape()[1];
    let a = cross_entropy(&one_hot(y1, c, s2.shape())?, s2)?;
    let b = cross_entropy(&one_hot(y2, c, s1.shape())?, s1)?;
    Ok(a.add(&b))
}

/// Binary DSC of `class_id`; `None` when the class is absent from `gt`.
pub fn dsc_metric(pred: &[u8], gt: &[u8], class_id: u8) -> Result<Option<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("prediction has {} voxels, ground truth {}", pred.len(), gt.len())));
    }
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (ia, ib) = (a == class_id, b == class_id);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if g == 0 {
        return Ok(None);
    }
    Ok(Some(2.0 * both as f64 / (p + g) as f64))
}
