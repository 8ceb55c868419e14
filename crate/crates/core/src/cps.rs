//! Stage-one cross pseudo supervision with CutMix on unlabeled slices.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use sshs_tensor::nn::{Ctx, Module, OptimKind, Optimizer};
use sshs_tensor::{Scalar, Tensor, Var};

use crate::backbone2d::Net2d;
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, one_hot, supervised_loss};

/// Argmax class map of a `(N, C, H, W)` probability map, flattened over
/// `(N, H, W)`. Ties go to the lowest class index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabel {
    pub labels: Vec<usize>,
    pub source: usize,
}

pub fn generate_pseudo_labels<T: Scalar>(probs: &Tensor<T>, source: usize) -> PseudoLabel {
    PseudoLabel { labels: probs.argmax_axis(1).1, source }
}

/// One axis-aligned rectangle; pixels inside come from `a`, the rest from `b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutMixSpec {
    pub height: usize,
    pub width: usize,
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl CutMixSpec {
    /// Area ratio drawn from Beta(1, 1); the box is kept fully inside the image.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize) -> Self {
        let ratio: f64 = Beta::new(1.0, 1.0).expect("valid beta").sample(rng);
        let side = ratio.sqrt();
        let mut h = ((height as f64 * side).round() as usize).clamp(1, height);
        let w = ((width as f64 * side).round() as usize).clamp(1, width);
        if h == height && w == width {
            h -= 1;
        }
        let h = h.max(1);
        let y0 = rng.random_range(0..=height - h);
        let x0 = rng.random_range(0..=width - w);
        CutMixSpec { height, width, y0, x0, h, w }
    }

    pub fn full(height: usize, width: usize) -> Self {
        CutMixSpec { height, width, y0: 0, x0: 0, h: height, w: width }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        CutMixSpec { height, width, y0: 0, x0: 0, h: 0, w: 0 }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y0 + self.h).contains(&y) && (self.x0..self.x0 + self.w).contains(&x)
    }

    pub fn area_ratio(&self) -> f64 {
        (self.h * self.w) as f64 / (self.height * self.width) as f64
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.height * self.width).map(|i| self.contains(i / self.width, i % self.width)).collect()
    }
}

/// `M * a + (1 - M) * b` per sample for `(N, C, H, W)` images.
pub fn cutmix_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, specs: &[CutMixSpec]) -> Result<Tensor<T>> {
    if a.shape() != b.shape() || a.rank() != 4 {
        return Err(Error::Shape(format!("cutmix inputs {:?} and {:?}", a.shape(), b.shape())));
    }
    let [n, c, h, w] = [a.dim(0), a.dim(1), a.dim(2), a.dim(3)];
    check_specs(specs, n, h, w)?;
    let mut out = b.clone();
    let (src, dst) = (a.data(), out.data_mut());
    for (s, spec) in specs.iter().enumerate() {
        for ch in 0..c {
            let base = (s * c + ch) * h * w;
            for y in spec.y0..spec.y0 + spec.h {
                let r = base + y * w;
                dst[r + spec.x0..r + spec.x0 + spec.w].copy_from_slice(&src[r + spec.x0..r + spec.x0 + spec.w]);
            }
        }
    }
    Ok(out)
}

/// The same mix applied to flat `(N, H, W)` label maps.
pub fn cutmix_labels(a: &[usize], b: &[usize], specs: &[CutMixSpec]) -> Result<Vec<usize>> {
    if a.len() != b.len() || specs.is_empty() {
        return Err(Error::Shape(format!("cutmix label maps of {} and {} pixels", a.len(), b.len())));
    }
    let hw = specs[0].height * specs[0].width;
    check_specs(specs, a.len() / hw.max(1), specs[0].height, specs[0].width)?;
    let mut out = b.to_vec();
    for (s, spec) in specs.iter().enumerate() {
        for y in spec.y0..spec.y0 + spec.h {
            let r = s * hw + y * spec.width;
            out[r + spec.x0..r + spec.x0 + spec.w].copy_from_slice(&a[r + spec.x0..r + spec.x0 + spec.w]);
        }
    }
    Ok(out)
}

fn check_specs(specs: &[CutMixSpec], n: usize, h: usize, w: usize) -> Result<()> {
    if specs.len() != n || specs.iter().any(|s| s.height != h || s.width != w) {
        return Err(Error::Shape(format!("{} cutmix masks for {n} samples of {h}x{w}", specs.len())));
    }
    Ok(())
}

/// Labeled slices: `(N, 3, H, W)` images and flat `(N, H, W)` class indices.
pub struct LabeledBatch<T: Scalar> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

/// Two unlabeled images per pair, `(N, 3, H, W)` each.
pub struct UnlabeledBatch<T: Scalar> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepReport {
    pub l_s: f64,
    pub l_cps: f64,
    pub l_2d: f64,
}

/// Graph pieces of one step, kept separate so individual terms can be
/// differentiated.
pub struct CpsTerms<T: Scalar> {
    pub l_s: Var<T>,
    /// `CE(y1, s2)`: supervises network 2.
    pub ce_y1_s2: Option<Var<T>>,
    /// `CE(y2, s1)`: supervises network 1.
    pub ce_y2_s1: Option<Var<T>>,
    pub y1: Option<PseudoLabel>,
    pub y2: Option<PseudoLabel>,
}

impl<T: Scalar> CpsTerms<T> {
    pub fn l_cps(&self) -> Option<Var<T>> {
        match (&self.ce_y1_s2, &self.ce_y2_s1) {
            (Some(a), Some(b)) => Some(a.add(b)),
            _ => None,
        }
    }
}

pub struct CpsTrainer<T: Scalar> {
    pub net1: Net2d<T>,
    pub net2: Net2d<T>,
    pub opt1: Optimizer<T>,
    pub opt2: Optimizer<T>,
    pub lambda: f64,
    pub cutmix: bool,
}

impl<T: Scalar> CpsTrainer<T> {
    pub fn new(net1: Net2d<T>, net2: Net2d<T>, optim: OptimKind, lambda: f64, cutmix: bool) -> Self {
        CpsTrainer { net1, net2, opt1: Optimizer::new(optim), opt2: Optimizer::new(optim), lambda, cutmix }
    }

    /// Builds both loss terms. Pseudo labels come from the un-mixed images
    /// and are mixed with the same masks as the images.
    pub fn terms<R: Rng + ?Sized>(
        &self,
        ctx1: &Ctx<T>,
        ctx2: &Ctx<T>,
        labeled: &LabeledBatch<T>,
        unlabeled: Option<&UnlabeledBatch<T>>,
        rng: &mut R,
    ) -> Result<CpsTerms<T>> {
        let x = Var::constant(labeled.images.clone());
        let s1 = self.net1.forward(ctx1, &x)?.probs;
        let s2 = self.net2.forward(ctx2, &x)?.probs;
        let target = one_hot(&labeled.labels, self.net1.num_classes, s1.shape())?;
        let l_s = supervised_loss(&target, &s1, &s2)?;
        let Some(u) = unlabeled.filter(|u| u.a.dim(0) > 0) else {
            return Ok(CpsTerms { l_s, ce_y1_s2: None, ce_y2_s1: None, y1: None, y2: None });
        };
        let (n, h, w) = (u.a.dim(0), u.a.dim(2), u.a.dim(3));
        let specs: Vec<CutMixSpec> = (0..n)
            .map(|_| if self.cutmix { CutMixSpec::sample(rng, h, w) } else { CutMixSpec::full(h, w) })
            .collect();
        let pl = |net: &Net2d<T>, img: &Tensor<T>, source| -> Result<PseudoLabel> {
            let probs = net.forward(&Ctx::train_no_grad(), &Var::constant(img.clone()))?.probs;
            Ok(generate_pseudo_labels(probs.value(), source))
        };
        let y1 = PseudoLabel { labels: cutmix_labels(&pl(&self.net1, &u.a, 1)?.labels, &pl(&self.net1, &u.b, 1)?.labels, &specs)?, source: 1 };
        let y2 = PseudoLabel { labels: cutmix_labels(&pl(&self.net2, &u.a, 2)?.labels, &pl(&self.net2, &u.b, 2)?.labels, &specs)?, source: 2 };
        let mixed = Var::constant(cutmix_pair(&u.a, &u.b, &specs)?);
        let m1 = self.net1.forward(ctx1, &mixed)?.probs;
        let m2 = self.net2.forward(ctx2, &mixed)?.probs;
        let c = self.net1.num_classes;
        let ce_y1_s2 = cross_entropy(&one_hot(&y1.labels, c, m2.shape())?, &m2)?;
        let ce_y2_s1 = cross_entropy(&one_hot(&y2.labels, c, m1.shape())?, &m1)?;
        Ok(CpsTerms { l_s, ce_y1_s2: Some(ce_y1_s2), ce_y2_s1: Some(ce_y2_s1), y1: Some(y1), y2: Some(y2) })
    }

    /// One optimisation step of `L_s + lambda * L_cps` on both networks.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        labeled: &LabeledBatch<T>,
        unlabeled: Option<&UnlabeledBatch<T>>,
        lr: f64,
        rng: &mut R,
    ) -> Result<StepReport> {
        let (ctx1, ctx2) = (Ctx::train(), Ctx::train());
        let terms = self.terms(&ctx1, &ctx2, labeled, unlabeled, rng)?;
        let l_s = terms.l_s.value().item().as_f64();
        let (total, l_cps) = match terms.l_cps() {
            Some(c) => (terms.l_s.add(&c.scale(T::lit(self.lambda))), c.value().item().as_f64()),
            None => (terms.l_s.clone(), 0.0),
        };
        let l_2d = total.value().item().as_f64();
        if !l_2d.is_finite() {
            return Err(Error::NonFinite(format!("stage-one loss L_s={l_s} L_cps={l_cps} L_2d={l_2d}")));
        }
        let grads = total.backward();
        self.opt1.step(&mut self.net1, &grads, lr);
        self.opt2.step(&mut self.net2, &grads, lr);
        self.net1.apply_updates(&ctx1);
        self.net2.apply_updates(&ctx2);
        Ok(StepReport { l_s, l_cps, l_2d })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pseudo_label_rules() {
        let mut p = Tensor::<f32>::zeros(vec![1, 9, 2, 2]);
        for i in 0..4 {
            p.data_mut()[7 * 4 + i] = 1.0;
        }
        assert_eq!(generate_pseudo_labels(&p, 1).labels, vec![7; 4]);
        let u = Tensor::<f32>::full(vec![1, 5, 2, 2], 0.2);
        assert_eq!(generate_pseudo_labels(&u, 1).labels, vec![0; 4]);
        let mut q = Tensor::<f32>::zeros(vec![1, 6, 1, 3]);
        for i in 0..3 {
            q.data_mut()[3 * 3 + i] = 0.6;
            q.data_mut()[5 * 3 + i] = 0.4;
        }
        assert_eq!(generate_pseudo_labels(&q, 2).labels, vec![3; 3]);
    }

    #[test]
    fn cutmix_extremes_and_area() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f32>::full(vec![1, 2, 4, 5], 1.0);
        let b = Tensor::<f32>::full(vec![1, 2, 4, 5], 2.0);
        assert_eq!(cutmix_pair(&a, &b, &[CutMixSpec::full(4, 5)]).unwrap().data(), a.data());
        assert_eq!(cutmix_pair(&a, &b, &[CutMixSpec::empty(4, 5)]).unwrap().data(), b.data());
        for _ in 0..200 {
            let s = CutMixSpec::sample(&mut rng, 4, 5);
            assert!(s.area_ratio() > 0.0 && s.area_ratio() < 1.0, "{s:?}");
        }
        assert!(cutmix_pair(&a, &b, &[]).is_err());
    }

    fn toy(seed: u64) -> (ExperimentConfig, CpsTrainer<f32>) {
        let cfg = ExperimentConfig::phantom();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n1 = Net2d::new(&mut rng, &cfg.net2d, 3, cfg.c2);
        let n2 = Net2d::new(&mut rng, &cfg.net2d, 3, cfg.c2);
        (cfg, CpsTrainer::new(n1, n2, OptimKind::adam(1e-4), 1.0, true))
    }

    fn toy_batch(rng: &mut ChaCha8Rng) -> (LabeledBatch<f32>, UnlabeledBatch<f32>) {
        let (h, w) = (16, 16);
        let mut labels = vec![0usize; 2 * h * w];
        let mut img = Tensor::zeros(vec![2, 3, h, w]);
        for s in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    let l = if y < 4 + 4 * s { 0 } else if x < 8 { 1 } else { 2 };
                    labels[s * h * w + y * w + x] = l;
                    for c in 0..3 {
                        img.data_mut()[((s * 3 + c) * h + y) * w + x] = l as f32;
                    }
                }
            }
        }
        let u = UnlabeledBatch { a: Tensor::randn(vec![1, 3, h, w], 1.0, rng), b: Tensor::randn(vec![1, 3, h, w], 1.0, rng) };
        (LabeledBatch { images: img, labels }, u)
    }

    #[test]
    fn pseudo_label_term_has_no_gradient_into_its_source() {
        let (_, t) = toy(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (l, u) = toy_batch(&mut rng);
        let terms = t.terms(&Ctx::train(), &Ctx::train(), &l, Some(&u), &mut rng).unwrap();
        let g = terms.ce_y1_s2.unwrap().backward();
        let mut any1 = false;
        t.net1.visit("", &mut |_, p| any1 |= g.param(p.id()).is_some());
        let mut any2 = false;
        t.net2.visit("", &mut |_, p| any2 |= g.param(p.id()).is_some());
        assert!(!any1 && any2);
    }

    #[test]
    fn lambda_zero_and_no_unlabeled() {
        let (_, mut t) = toy(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (l, u) = toy_batch(&mut rng);
        t.lambda = 0.0;
        let r = t.train_step(&l, Some(&u), 1e-3, &mut rng).unwrap();
        assert_eq!(r.l_2d, r.l_s);
        t.lambda = 1.0;
        let r = t.train_step(&l, None, 1e-3, &mut rng).unwrap();
        assert_eq!(r.l_cps, 0.0);
        assert_eq!(r.l_2d, r.l_s);
        let r = t.train_step(&l, Some(&u), 1e-3, &mut rng).unwrap();
        assert!((r.l_2d - (r.l_s + r.l_cps)).abs() < 1e-6);
    }

    #[test]
    fn supervised_loss_decreases_on_toy_set() {
        let (_, mut t) = toy(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (l, u) = toy_batch(&mut rng);
        let first = t.train_step(&l, Some(&u), 1e-2, &mut rng).unwrap().l_s;
        let mut last = first;
        for _ in 1..50 {
            last = t.train_step(&l, Some(&u), 1e-2, &mut rng).unwrap().l_s;
        }
        assert!(last < first - 0.1 * first.abs(), "first {first} last {last}");
    }
}
