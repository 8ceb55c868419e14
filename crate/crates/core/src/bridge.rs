//! Turning stage-one outputs into stage-two inputs: peer fusion, volume
//! assembly and aligned patch cropping.

use rand::Rng;
use sshs_tensor::nn::{join, Conv, Ctx, Module, Param};
use sshs_tensor::ops::{resize_bilinear, ConvOpts};
use sshs_tensor::{Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::volume::LabelMap;

/// `(Z, C, h, w)` per-slice stack to `(C, Z, 2h, 2w)`.
fn upsample_stack<T: Scalar>(s: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (s.dim(2), s.dim(3));
    resize_bilinear(s, 2 * h, 2 * w).permute(&[1, 0, 2, 3])
}

/// Coarse segmentation volume `(C1, Z, H, W)` from two per-slice probability
/// stacks `(Z, C1, H/2, W/2)`: upsample, clamp, renormalise, average.
pub fn fuse_confidences_g<T: Scalar>(s1: &Tensor<T>, s2: &Tensor<T>) -> Result<Tensor<T>> {
    if s1.shape() != s2.shape() || s1.rank() != 4 {
        return Err(Error::Shape(format!("peer confidence stacks {:?} vs {:?}", s1.shape(), s2.shape())));
    }
    let half = T::lit(0.5);
    let (a, b) = (upsample_stack(s1), upsample_stack(s2));
    let mut out = a.zip_map(&b, |x, y| (x.max(T::zero()) + y.max(T::zero())) * half);
    let (c, plane) = (out.dim(0), out.numel() / out.dim(0));
    let d = out.data_mut();
    for i in 0..plane {
        let sum = (0..c).fold(T::zero(), |acc, k| acc + d[k * plane + i]);
        if sum > T::zero() {
            for k in 0..c {
                d[k * plane + i] = d[k * plane + i] / sum;
            }
        }
    }
    Ok(out)
}

/// Per-peer feature volume `(C2, Z, H/4, W/4)` from a per-slice stack
/// `(Z, C2, H/8, W/8)`. The learned projection is applied later on crops.
pub fn upsample_features<T: Scalar>(f: &Tensor<T>) -> Tensor<T> {
    upsample_stack(f)
}

/// Learned parts of the bridge: one `C2 -> C3` projection per peer and the
/// `2*C3 -> C3` reduction, all without bias.
#[derive(Clone, Debug)]
pub struct Bridge<T: Scalar> {
    pub proj1: Conv<T>,
    pub proj2: Conv<T>,
    pub reduce: Conv<T>,
}

impl<T: Scalar> Bridge<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, c2: usize, c3: usize) -> Self {
        let pw = |rng: &mut R, cin, cout| Conv::new(rng, cin, cout, [1, 1, 1], ConvOpts::default(), false);
        Bridge { proj1: pw(rng, c2, c3), proj2: pw(rng, c2, c3), reduce: pw(rng, 2 * c3, c3) }
    }

    pub fn c2(&self) -> usize {
        self.proj1.in_channels()
    }

    /// `T`: projects each peer's upsampled feature `(B, C2, Z, h, w)` and
    /// concatenates to `(B, 2*C3, Z, h, w)`, peer one first.
    pub fn fuse_features_t(&self, ctx: &Ctx<T>, f1: &Var<T>, f2: &Var<T>) -> Result<Var<T>> {
        if f1.shape() != f2.shape() || f1.shape().len() != 5 || f1.shape()[1] != self.c2() {
            return Err(Error::Shape(format!("peer features {:?} vs {:?}, expected C2 = {}", f1.shape(), f2.shape(), self.c2())));
        }
        Ok(Var::concat(&[self.proj1.forward(ctx, f1), self.proj2.forward(ctx, f2)], 1))
    }

    /// Same as [`Self::fuse_features_t`] on a stacked `(B, 2*C2, ...)` crop.
    pub fn fuse_stacked(&self, ctx: &Ctx<T>, stacked: &Var<T>) -> Result<Var<T>> {
        let c2 = self.c2();
        if stacked.shape().len() != 5 || stacked.shape()[1] != 2 * c2 {
            return Err(Error::Shape(format!("stacked peer features {:?}, expected {} channels", stacked.shape(), 2 * c2)));
        }
        self.fuse_features_t(ctx, &stacked.narrow(1, 0, c2), &stacked.narrow(1, c2, c2))
    }

    pub fn reduce_channels(&self, ctx: &Ctx<T>, h: &Var<T>) -> Result<Var<T>> {
        if h.shape().len() != 5 || h.shape()[1] != self.reduce.in_channels() {
            return Err(Error::Shape(format!("reduction input {:?}, expected {} channels", h.shape(), self.reduce.in_channels())));
        }
        Ok(self.reduce.forward(ctx, h))
    }
}

impl<T: Scalar> Module<T> for Bridge<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.proj1.visit(&join(prefix, "proj1"), f);
        self.proj2.visit(&join(prefix, "proj2"), f);
        self.reduce.visit(&join(prefix, "reduce"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.proj1.visit_mut(&join(prefix, "proj1"), f);
        self.proj2.visit_mut(&join(prefix, "proj2"), f);
        self.reduce.visit_mut(&join(prefix, "reduce"), f);
    }
}

/// A 3D crop `(z0, y0, x0)` + `(Z, h, w)` in full-resolution voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct PatchSpec {
    pub origin: [usize; 3],
    pub size: [usize; 3],
}

impl PatchSpec {
    /// Origin and size of the matching quarter-resolution feature crop.
    pub fn feature_crop(&self) -> ([usize; 3], [usize; 3]) {
        let [z, y, x] = self.origin;
        let [d, h, w] = self.size;
        ([z, y / 4, x / 4], [d, h / 4, w / 4])
    }

    pub fn fits(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|a| self.origin[a] + self.size[a] <= dims[a])
    }
}

/// Voxel indices of every class, for category-balanced centre sampling.
#[derive(Clone, Debug)]
pub struct ClassIndex {
    pub dims: [usize; 3],
    pub by_class: Vec<Vec<u32>>,
}

impl ClassIndex {
    pub fn new(m: &LabelMap) -> Self {
        let mut by_class = vec![Vec::new(); m.num_classes];
        for (i, &l) in m.data.iter().enumerate() {
            by_class[l as usize].push(i as u32);
        }
        ClassIndex { dims: m.dims, by_class }
    }

    pub fn present(&self) -> Vec<usize> {
        (0..self.by_class.len()).filter(|&c| !self.by_class[c].is_empty()).collect()
    }
}

/// `phi`: a class uniform over the present classes, a voxel uniform within
/// it, the window centred there, clamped inside, then `(y0, x0)` snapped
/// down to multiples of 4. Returns the spec and the chosen class.
pub fn category_balanced_crop<R: Rng + ?Sized>(index: &ClassIndex, size: [usize; 3], rng: &mut R) -> Result<(PatchSpec, usize)> {
    let dims = index.dims;
    if (0..3).any(|a| size[a] > dims[a]) {
        return Err(Error::Shape(format!("patch {size:?} larger than volume {dims:?}")));
    }
    let present = index.present();
    if present.is_empty() {
        return Err(Error::Validation("label map has no voxels".into()));
    }
    let class = present[rng.random_range(0..present.len())];
    let list = &index.by_class[class];
    let v = list[rng.random_range(0..list.len())] as usize;
    let centre = [v / (dims[1] * dims[2]), (v / dims[2]) % dims[1], v % dims[2]];
    let mut origin = [0; 3];
    for a in 0..3 {
        let o = centre[a].saturating_sub(size[a] / 2).min(dims[a] - size[a]);
        origin[a] = if a == 0 { o } else { o / 4 * 4 };
    }
    Ok((PatchSpec { origin, size }, class))
}

/// Crops `(.., D, H, W)` trailing axes of a `(C, D, H, W)` tensor.
pub fn crop_cdhw<T: Scalar>(t: &Tensor<T>, origin: [usize; 3], size: [usize; 3]) -> Result<Tensor<T>> {
    if t.rank() != 4 || (0..3).any(|a| origin[a] + size[a] > t.dim(a + 1)) {
        return Err(Error::Shape(format!("crop {origin:?}+{size:?} outside {:?}", t.shape())));
    }
    let (c, d, h, w) = (t.dim(0), t.dim(1), t.dim(2), t.dim(3));
    let [z0, y0, x0] = origin;
    let [sd, sh, sw] = size;
    let src = t.data();
    let mut out = Vec::with_capacity(c * sd * sh * sw);
    for ch in 0..c {
        for z in z0..z0 + sd {
            for y in y0..y0 + sh {
                let r = ((ch * d + z) * h + y) * w;
                out.extend_from_slice(&src[r + x0..r + x0 + sw]);
            }
        }
    }
    Ok(Tensor::from_vec(vec![c, sd, sh, sw], out))
}

/// `M1`: image patch `(1, Z, h, w)` stacked on the coarse patch `(C1, Z, h, w)`.
pub fn assemble_stage2_input<T: Scalar>(image: &Tensor<T>, coarse: &Tensor<T>) -> Result<Tensor<T>> {
    if image.rank() != 4 || coarse.rank() != 4 || image.dim(0) != 1 || image.shape()[1..] != coarse.shape()[1..] {
        return Err(Error::Shape(format!("image patch {:?} vs coarse patch {:?}", image.shape(), coarse.shape())));
    }
    Ok(Tensor::concat(&[image, coarse], 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use sshs_tensor::gradcheck::{max_rel_error, numeric_grad, sample_indices};

    fn onehot_stack(z: usize, c: usize, h: usize, w: usize, class: usize) -> Tensor<f32> {
        Tensor::from_fn(vec![z, c, h, w], |i| ((i / (h * w)) % c == class) as u8 as f32)
    }

    #[test]
    fn g_shapes_and_mixing() {
        let a = onehot_stack(3, 4, 5, 6, 1);
        let b = onehot_stack(3, 4, 5, 6, 2);
        let g = fuse_confidences_g(&a, &b).unwrap();
        assert_eq!(g.shape(), &[4, 3, 10, 12]);
        let plane = 3 * 10 * 12;
        assert!(g.data()[plane..2 * plane].iter().all(|&v| (v - 0.5).abs() < 1e-6));
        assert!(g.data()[2 * plane..3 * plane].iter().all(|&v| (v - 0.5).abs() < 1e-6));
        let same = fuse_confidences_g(&a, &a).unwrap();
        assert_eq!(same.data(), upsample_stack(&a).data());
        assert!(fuse_confidences_g(&a, &onehot_stack(2, 4, 5, 6, 1)).is_err());
    }

    #[test]
    fn t_zero_and_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let br = Bridge::<f32>::new(&mut rng, 4, 6);
        let ctx = Ctx::eval();
        let z = Var::constant(Tensor::zeros(vec![1, 4, 2, 3, 3]));
        assert!(br.fuse_features_t(&ctx, &z, &z).unwrap().value().data().iter().all(|&v| v == 0.0));
        let f1 = Var::constant(Tensor::randn(vec![1, 4, 2, 3, 3], 1.0, &mut rng));
        let f2 = Var::constant(Tensor::randn(vec![1, 4, 2, 3, 3], 1.0, &mut rng));
        let mut swapped = br.clone();
        std::mem::swap(&mut swapped.proj1, &mut swapped.proj2);
        let a = br.fuse_features_t(&ctx, &f1, &f2).unwrap();
        let b = swapped.fuse_features_t(&ctx, &f2, &f1).unwrap();
        let n = a.value().numel() / 2;
        assert_eq!(&a.value().data()[..n], &b.value().data()[n..]);
        let r = br.reduce_channels(&ctx, &a).unwrap();
        assert_eq!(r.shape(), &[1, 6, 2, 3, 3]);
        assert!(br.reduce_channels(&ctx, &f1).is_err());
    }

    #[test]
    fn reduction_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let br = Bridge::<f64>::new(&mut rng, 2, 3);
        let x = Tensor::<f64>::randn(vec![1, 6, 2, 2, 2], 1.0, &mut rng);
        let r = Tensor::<f64>::randn(vec![1, 3, 2, 2, 2], 1.0, &mut rng);
        let ctx = Ctx::train();
        let out = br.reduce_channels(&ctx, &Var::constant(x.clone())).unwrap();
        let g = out.mul(&Var::constant(r.clone())).sum().backward();
        let analytic = g.param(br.reduce.weight.id()).unwrap().to_vec();
        let w0 = br.reduce.weight.value.clone();
        let f = |w: &Tensor<f64>| {
            let mut b = br.clone();
            b.reduce.weight.value = w.clone();
            b.reduce_channels(&Ctx::eval(), &Var::constant(x.clone())).unwrap().value().mul(&r).sum()
        };
        let idx = sample_indices(w0.numel(), 18);
        let numeric = numeric_grad(f, &w0, &idx, 1e-5);
        let a: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
        assert!(max_rel_error(&a, &numeric, 1e-8) < 1e-4);
    }

    fn labels(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> u8, c: usize) -> LabelMap {
        let mut data = Vec::new();
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        LabelMap { data, dims, spacing: [1.0; 3], num_classes: c }
    }

    #[test]
    fn crop_alignment_and_bounds() {
        let m = labels([12, 64, 80], |_, y, x| ((y > 30) as u8) + ((x > 50) as u8), 3);
        let idx = ClassIndex::new(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let (p, c) = category_balanced_crop(&idx, [12, 32, 32], &mut rng).unwrap();
            assert!(c < 3 && p.fits(m.dims));
            assert_eq!(p.origin[0], 0);
            assert!(p.origin[1] % 4 == 0 && p.origin[2] % 4 == 0);
            let (fo, fs) = p.feature_crop();
            assert_eq!([fo[1] * 4, fo[2] * 4, fs[1] * 4, fs[2] * 4], [p.origin[1], p.origin[2], 32, 32]);
        }
        let bg = labels([12, 64, 80], |_, _, _| 0, 3);
        let bgi = ClassIndex::new(&bg);
        assert_eq!(category_balanced_crop(&bgi, [12, 32, 32], &mut rng).unwrap().1, 0);
        assert!(category_balanced_crop(&bgi, [13, 32, 32], &mut rng).is_err());
        let p = PatchSpec { origin: [0, 100, 52], size: [12, 192, 192] };
        assert_eq!(p.feature_crop().0, [0, 25, 13]);
    }

    #[test]
    fn assemble_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Tensor::<f32>::randn(vec![1, 2, 4, 4], 1.0, &mut rng);
        let coarse = Tensor::<f32>::randn(vec![5, 2, 4, 4], 1.0, &mut rng);
        let m = assemble_stage2_input(&img, &coarse).unwrap();
        assert_eq!(m.shape(), &[6, 2, 4, 4]);
        assert_eq!(&m.data()[..32], img.data());
        assert_eq!(&m.data()[32..], coarse.data());
        assert!(assemble_stage2_input(&img, &Tensor::zeros(vec![5, 2, 4, 3])).is_err());
        let c = crop_cdhw(&coarse, [1, 1, 2], [1, 2, 2]).unwrap();
        assert_eq!(c.data()[0], coarse.get(&[0, 1, 1, 2]));
    }
}
