//! Grouped, strided, dilated 3D convolution via im2col + gemm.
//!
//! Rank-4 inputs `(N, C, H, W)` are treated as `(N, C, 1, H, W)` with a
//! rank-4 kernel `(O, C/g, kh, kw)`, so one kernel serves both 2D and 3D nets.

use crate::autograd::Var;
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

const MAX_COL_ELEMS: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOpts {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
    pub groups: usize,
}

impl Default for ConvOpts {
    fn default() -> Self {
        ConvOpts { stride: [1; 3], padding: [0; 3], dilation: [1; 3], groups: 1 }
    }
}

impl ConvOpts {
    /// "Same" padding for odd kernels at stride 1.
    pub fn same(kernel: [usize; 3], dilation: [usize; 3]) -> Self {
        ConvOpts {
            padding: [
                dilation[0] * (kernel[0] - 1) / 2,
                dilation[1] * (kernel[1] - 1) / 2,
                dilation[2] * (kernel[2] - 1) / 2,
            ],
            dilation,
            ..Default::default()
        }
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// `(N, C, [D, H, W])` of a rank-4 or rank-5 activation.
pub(crate) fn split5(shape: &[usize]) -> (usize, usize, [usize; 3]) {
    match shape.len() {
        4 => (shape[0], shape[1], [1, shape[2], shape[3]]),
        5 => (shape[0], shape[1], [shape[2], shape[3], shape[4]]),
        r => panic!("expected rank 4 or 5 activation, got rank {r} {shape:?}"),
    }
}

pub(crate) fn join5(rank: usize, n: usize, c: usize, s: [usize; 3]) -> Vec<usize> {
    if rank == 4 {
        assert_eq!(s[0], 1);
        vec![n, c, s[1], s[2]]
    } else {
        vec![n, c, s[0], s[1], s[2]]
    }
}

fn kernel5(shape: &[usize]) -> (usize, usize, [usize; 3]) {
    split5(shape)
}

pub fn conv_out_size(input: usize, k: usize, s: usize, p: usize, d: usize) -> usize {
    let eff = d * (k - 1) + 1;
    assert!(input + 2 * p >= eff, "kernel extent {eff} exceeds padded input {}", input + 2 * p);
    (input + 2 * p - eff) / s + 1
}

struct Geom {
    n: usize,
    cin: usize,
    cout: usize,
    groups: usize,
    cin_g: usize,
    cout_g: usize,
    ins: [usize; 3],
    ks: [usize; 3],
    outs: [usize; 3],
    k: usize,
    o: ConvOpts,
}

impl Geom {
    fn new(xs: &[usize], ws: &[usize], o: ConvOpts) -> Self {
        assert_eq!(xs.len(), ws.len(), "input/kernel rank mismatch {xs:?} vs {ws:?}");
        let (n, cin, ins) = split5(xs);
        let (cout, cin_g, ks) = kernel5(ws);
        let groups = o.groups.max(1);
        assert!(cin % groups == 0 && cout % groups == 0, "channels not divisible by groups");
        assert_eq!(cin / groups, cin_g, "kernel expects {} input channels per group, input has {}", cin_g, cin / groups);
        let outs = [
            conv_out_size(ins[0], ks[0], o.stride[0], o.padding[0], o.dilation[0]),
            conv_out_size(ins[1], ks[1], o.stride[1], o.padding[1], o.dilation[1]),
            conv_out_size(ins[2], ks[2], o.stride[2], o.padding[2], o.dilation[2]),
        ];
        Geom {
            n,
            cin,
            cout,
            groups,
            cin_g,
            cout_g: cout / groups,
            ins,
            ks,
            outs,
            k: cin_g * ks[0] * ks[1] * ks[2],
            o,
        }
    }

    fn in_plane(&self) -> usize {
        self.ins[0] * self.ins[1] * self.ins[2]
    }

    fn out_plane(&self) -> usize {
        self.outs[0] * self.outs[1] * self.outs[2]
    }

    fn pointwise(&self) -> bool {
        self.ks == [1, 1, 1] && self.o.stride == [1, 1, 1] && self.o.padding == [0, 0, 0]
    }

    fn z_chunk(&self) -> usize {
        let per_z = self.k * self.outs[1] * self.outs[2];
        (MAX_COL_ELEMS / per_z.max(1)).clamp(1, self.outs[0])
    }
}

/// Valid output range `[lo, hi)` such that `o * stride + off` lies in `[0, len)`.
fn valid_range(out_len: usize, stride: usize, off: isize, len: usize) -> (usize, usize) {
    let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(stride) };
    let last = len as isize - 1 - off;
    let hi = if last < 0 { 0 } else { ((last as usize) / stride + 1).min(out_len) };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], xoff: usize, g: &Geom, z0: usize, z1: usize, cols: &mut [T]) {
    let [id, ih, iw] = g.ins;
    let [kd, kh, kw] = g.ks;
    let [_, oh, ow] = g.outs;
    let [sd, sh, sw] = g.o.stride;
    let [pd, ph, pw] = g.o.padding;
    let [dd, dh, dw] = g.o.dilation;
    let pc = (z1 - z0) * oh * ow;
    let mut row = 0;
    for ci in 0..g.cin_g {
        let cbase = xoff + ci * g.in_plane();
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let dst = &mut cols[row * pc..(row + 1) * pc];
                    let offx = (c * dw) as isize - pw as isize;
                    let (xl, xh) = valid_range(ow, sw, offx, iw);
                    let mut p = 0;
                    for oz in z0..z1 {
                        let iz = (oz * sd + a * dd) as isize - pd as isize;
                        if iz < 0 || iz >= id as isize {
                            dst[p..p + oh * ow].fill(T::zero());
                            p += oh * ow;
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * sh + b * dh) as isize - ph as isize;
                            let row_dst = &mut dst[p..p + ow];
                            p += ow;
                            if iy < 0 || iy >= ih as isize {
                                row_dst.fill(T::zero());
                                continue;
                            }
                            let base = cbase + (iz as usize * ih + iy as usize) * iw;
                            row_dst[..xl].fill(T::zero());
                            row_dst[xh..].fill(T::zero());
                            if xl >= xh {
                                continue;
                            }
                            if sw == 1 {
                                let start = (base as isize + xl as isize + offx) as usize;
                                row_dst[xl..xh].copy_from_slice(&x[start..start + (xh - xl)]);
                            } else {
                                for ox in xl..xh {
                                    row_dst[ox] = x[(base as isize + (ox * sw) as isize + offx) as usize];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], dx: &mut [T], xoff: usize, g: &Geom, z0: usize, z1: usize) {
    let [id, ih, iw] = g.ins;
    let [kd, kh, kw] = g.ks;
    let [_, oh, ow] = g.outs;
    let [sd, sh, sw] = g.o.stride;
    let [pd, ph, pw] = g.o.padding;
    let [dd, dh, dw] = g.o.dilation;
    let pc = (z1 - z0) * oh * ow;
    let mut row = 0;
    for ci in 0..g.cin_g {
        let cbase = xoff + ci * g.in_plane();
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let src = &cols[row * pc..(row + 1) * pc];
                    let offx = (c * dw) as isize - pw as isize;
                    let (xl, xh) = valid_range(ow, sw, offx, iw);
                    let mut p = 0;
                    for oz in z0..z1 {
                        let iz = (oz * sd + a * dd) as isize - pd as isize;
                        if iz < 0 || iz >= id as isize {
                            p += oh * ow;
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * sh + b * dh) as isize - ph as isize;
                            let row_src = &src[p..p + ow];
                            p += ow;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let base = cbase + (iz as usize * ih + iy as usize) * iw;
                            for ox in xl..xh {
                                let ix = (base as isize + (ox * sw) as isize + offx) as usize;
                                dx[ix] += row_src[ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub fn conv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, o: ConvOpts) -> Tensor<T> {
    let g = Geom::new(x.shape(), w.shape(), o);
    let p = g.out_plane();
    let mut out = vec![T::zero(); g.n * g.cout * p];
    let xd = x.data();
    let wd = w.data();
    if g.pointwise() {
        for n in 0..g.n {
            for gi in 0..g.groups {
                let a = MatRef::row_major(gi * g.cout_g * g.k, g.cout_g, g.k);
                let bm = MatRef::with_row_stride((n * g.cin + gi * g.cin_g) * p, g.cin_g, p, p);
                let cm = MatRef::with_row_stride((n * g.cout + gi * g.cout_g) * p, g.cout_g, p, p);
                gemm(T::one(), wd, a, xd, bm, T::zero(), &mut out, cm);
            }
        }
    } else {
        let zc = g.z_chunk();
        let plane = g.outs[1] * g.outs[2];
        let mut cols = vec![T::zero(); g.k * zc * plane];
        for n in 0..g.n {
            for gi in 0..g.groups {
                let xoff = (n * g.cin + gi * g.cin_g) * g.in_plane();
                let mut z0 = 0;
                while z0 < g.outs[0] {
                    let z1 = (z0 + zc).min(g.outs[0]);
                    let pc = (z1 - z0) * plane;
                    im2col(xd, xoff, &g, z0, z1, &mut cols[..g.k * pc]);
                    let a = MatRef::row_major(gi * g.cout_g * g.k, g.cout_g, g.k);
                    let bm = MatRef::row_major(0, g.k, pc);
                    let cm = MatRef::with_row_stride((n * g.cout + gi * g.cout_g) * p + z0 * plane, g.cout_g, pc, p);
                    gemm(T::one(), wd, a, &cols, bm, T::zero(), &mut out, cm);
                    z0 = z1;
                }
            }
        }
    }
    if let Some(b) = b {
        assert_eq!(b.numel(), g.cout, "bias length");
        let bd = b.data();
        for n in 0..g.n {
            for c in 0..g.cout {
                let bv = bd[c];
                for v in &mut out[(n * g.cout + c) * p..(n * g.cout + c + 1) * p] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::from_vec(join5(x.rank(), g.n, g.cout, g.outs), out)
}

/// Gradients of a convolution: `(dx, dw, db)` for the requested flags.
pub fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    o: ConvOpts,
    need: [bool; 3],
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let g = Geom::new(x.shape(), w.shape(), o);
    let p = g.out_plane();
    let plane = g.outs[1] * g.outs[2];
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();
    let mut dx = need[0].then(|| vec![T::zero(); x.numel()]);
    let mut dw = need[1].then(|| vec![T::zero(); w.numel()]);
    let db = need[2].then(|| {
        let mut acc = vec![T::zero(); g.cout];
        for n in 0..g.n {
            for (c, a) in acc.iter_mut().enumerate() {
                *a += dyd[(n * g.cout + c) * p..(n * g.cout + c + 1) * p].iter().copied().sum::<T>();
            }
        }
        Tensor::from_vec(vec![g.cout], acc)
    });
    if need[0] || need[1] {
        if g.pointwise() {
            for n in 0..g.n {
                for gi in 0..g.groups {
                    let dyg = MatRef::with_row_stride((n * g.cout + gi * g.cout_g) * p, g.cout_g, p, p);
                    let xg = MatRef::with_row_stride((n * g.cin + gi * g.cin_g) * p, g.cin_g, p, p);
                    let wg = MatRef::row_major(gi * g.cout_g * g.k, g.cout_g, g.k);
                    if let Some(dw) = dw.as_mut() {
                        gemm(T::one(), dyd, dyg, xd, xg.t(), T::one(), dw, wg);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(T::one(), wd, wg.t(), dyd, dyg, T::zero(), dx, xg);
                    }
                }
            }
        } else {
            let zc = g.z_chunk();
            let mut cols = vec![T::zero(); g.k * zc * plane];
            for n in 0..g.n {
                for gi in 0..g.groups {
                    let xoff = (n * g.cin + gi * g.cin_g) * g.in_plane();
                    let wg = MatRef::row_major(gi * g.cout_g * g.k, g.cout_g, g.k);
                    let mut z0 = 0;
                    while z0 < g.outs[0] {
                        let z1 = (z0 + zc).min(g.outs[0]);
                        let pc = (z1 - z0) * plane;
                        let dyg = MatRef::with_row_stride((n * g.cout + gi * g.cout_g) * p + z0 * plane, g.cout_g, pc, p);
                        let cm = MatRef::row_major(0, g.k, pc);
                        if let Some(dw) = dw.as_mut() {
                            im2col(xd, xoff, &g, z0, z1, &mut cols[..g.k * pc]);
                            gemm(T::one(), dyd, dyg, &cols, cm.t(), T::one(), dw, wg);
                        }
                        if let Some(dx) = dx.as_mut() {
                            gemm(T::one(), wd, wg.t(), dyd, dyg, T::zero(), &mut cols, cm);
                            col2im(&cols[..g.k * pc], dx, xoff, &g, z0, z1);
                        }
                        z0 = z1;
                    }
                }
            }
        }
    }
    (
        dx.map(|d| Tensor::from_vec(x.shape().to_vec(), d)),
        dw.map(|d| Tensor::from_vec(w.shape().to_vec(), d)),
        db,
    )
}

impl<T: Scalar> Var<T> {
    /// Convolution of `self` with kernel `w` and optional per-channel bias.
    pub fn conv(&self, w: &Var<T>, bias: Option<&Var<T>>, o: ConvOpts) -> Var<T> {
        let out = conv_forward(self.value(), w.value(), bias.map(|b| b.value()), o);
        let (x, wt) = (self.value().clone(), w.value().clone());
        let mut parents = vec![self.clone(), w.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        Var::from_op(
            out,
            parents,
            Box::new(move |g, need| {
                let nb = has_bias && need[2];
                let (dx, dw, db) = conv_backward(&x, &wt, g, o, [need[0], need[1], nb]);
                let mut v = vec![dx, dw];
                if has_bias {
                    v.push(db);
                }
                v
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, o: ConvOpts) -> Tensor<f64> {
        let g = Geom::new(x.shape(), w.shape(), o);
        let mut out = vec![0.0; g.n * g.cout * g.out_plane()];
        for n in 0..g.n {
            for co in 0..g.cout {
                let gi = co / g.cout_g;
                for oz in 0..g.outs[0] {
                    for oy in 0..g.outs[1] {
                        for ox in 0..g.outs[2] {
                            let mut acc = 0.0;
                            for ci in 0..g.cin_g {
                                for a in 0..g.ks[0] {
                                    for b in 0..g.ks[1] {
                                        for c in 0..g.ks[2] {
                                            let iz = (oz * o.stride[0] + a * o.dilation[0]) as isize - o.padding[0] as isize;
                                            let iy = (oy * o.stride[1] + b * o.dilation[1]) as isize - o.padding[1] as isize;
                                            let ix = (ox * o.stride[2] + c * o.dilation[2]) as isize - o.padding[2] as isize;
                                            if iz < 0 || iy < 0 || ix < 0 {
                                                continue;
                                            }
                                            let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                            if iz >= g.ins[0] || iy >= g.ins[1] || ix >= g.ins[2] {
                                                continue;
                                            }
                                            let xi = (((n * g.cin + gi * g.cin_g + ci) * g.ins[0] + iz) * g.ins[1] + iy) * g.ins[2] + ix;
                                            let wi = (((co * g.cin_g + ci) * g.ks[0] + a) * g.ks[1] + b) * g.ks[2] + c;
                                            acc += x.data()[xi] * w.data()[wi];
                                        }
                                    }
                                }
                            }
                            out[(((n * g.cout + co) * g.outs[0] + oz) * g.outs[1] + oy) * g.outs[2] + ox] = acc;
                        }
                    }
                }
            }
        }
        Tensor::from_vec(join5(x.rank(), g.n, g.cout, g.outs), out)
    }

    fn check(xs: Vec<usize>, ws: Vec<usize>, o: ConvOpts) {
        let mut rng = rand::rng();
        let x = Tensor::<f64>::randn(xs, 1.0, &mut rng);
        let w = Tensor::<f64>::randn(ws, 1.0, &mut rng);
        let fast = conv_forward(&x, &w, None, o);
        let slow = naive(&x, &w, o);
        assert_eq!(fast.shape(), slow.shape());
        let err = fast.sub(&slow).max_abs();
        assert!(err < 1e-10, "conv mismatch {err}");
    }

    #[test]
    fn matches_naive_3d_grouped_strided_dilated() {
        let o = ConvOpts { stride: [1, 2, 2], padding: [1, 2, 2], dilation: [1, 2, 2], groups: 2 };
        check(vec![2, 4, 3, 9, 7], vec![6, 2, 3, 3, 3], o);
    }

    #[test]
    fn matches_naive_2d_and_pointwise() {
        check(vec![1, 3, 11, 10], vec![4, 3, 7, 7], ConvOpts { stride: [1, 2, 2], padding: [0, 3, 3], ..Default::default() });
        check(vec![2, 6, 5, 5], vec![4, 3, 1, 1], ConvOpts::default().with_groups(2));
        check(vec![1, 4, 6, 6], vec![4, 1, 3, 3], ConvOpts::same([1, 3, 3], [1, 1, 1]).with_groups(4));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rand::rng();
        let o = ConvOpts { stride: [1, 2, 1], padding: [1, 1, 0], dilation: [1, 1, 2], groups: 2 };
        let x = Tensor::<f64>::randn(vec![2, 4, 3, 5, 6], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(vec![4, 2, 3, 3, 2], 1.0, &mut rng);
        let r = Tensor::<f64>::randn(conv_forward(&x, &w, None, o).shape().to_vec(), 1.0, &mut rng);
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>| conv_forward(x, w, None, o).mul(&r).sum();
        let (dx, dw, _) = conv_backward(&x, &w, &r, o, [true, true, false]);
        let (dx, dw) = (dx.unwrap(), dw.unwrap());
        let h = 1e-6;
        for i in (0..x.numel()).step_by(7) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-6, "dx[{i}] {fd} vs {}", dx.data()[i]);
        }
        for i in 0..w.numel() {
            let mut wp = w.clone();
            wp.data_mut()[i] += h;
            let mut wm = w.clone();
            wm.data_mut()[i] -= h;
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h);
            assert!((fd - dw.data()[i]).abs() < 1e-6, "dw[{i}] {fd} vs {}", dw.data()[i]);
        }
    }
}
