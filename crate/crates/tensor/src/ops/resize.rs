//! In-plane bilinear resampling (half-pixel centres, no corner alignment).

use crate::autograd::Var;
use crate::ops::conv::{join5, split5};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    w0: T,
    w1: T,
}

fn taps<T: Scalar>(input: usize, output: usize) -> Vec<Tap<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l1 = src - i0 as f64;
            Tap { i0, i1, w0: T::lit(1.0 - l1), w1: T::lit(l1) }
        })
        .collect()
}

/// Resizes axes `(H, W)` of a rank-4/5 tensor to `(oh, ow)`.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (n, c, [d, h, w]) = split5(x.shape());
    if h == oh && w == ow {
        return x.clone();
    }
    let ty = taps::<T>(h, oh);
    let tx = taps::<T>(w, ow);
    let slices = n * c * d;
    let xd = x.data();
    let mut tmp = vec![T::zero(); h * ow];
    let mut out = vec![T::zero(); slices * oh * ow];
    for s in 0..slices {
        let src = &xd[s * h * w..(s + 1) * h * w];
        for r in 0..h {
            let row = &src[r * w..(r + 1) * w];
            for (o, t) in tx.iter().enumerate() {
                tmp[r * ow + o] = row[t.i0] * t.w0 + row[t.i1] * t.w1;
            }
        }
        let dst = &mut out[s * oh * ow..(s + 1) * oh * ow];
        for (o, t) in ty.iter().enumerate() {
            let (a, b) = (&tmp[t.i0 * ow..(t.i0 + 1) * ow], &tmp[t.i1 * ow..(t.i1 + 1) * ow]);
            for x in 0..ow {
                dst[o * ow + x] = a[x] * t.w0 + b[x] * t.w1;
            }
        }
    }
    Tensor::from_vec(join5(x.rank(), n, c, [d, oh, ow]), out)
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_adjoint<T: Scalar>(g: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (n, c, [d, h, w]) = split5(in_shape);
    let (_, _, [_, oh, ow]) = split5(g.shape());
    if h == oh && w == ow {
        return g.reshape(in_shape.to_vec());
    }
    let ty = taps::<T>(h, oh);
    let tx = taps::<T>(w, ow);
    let slices = n * c * d;
    let gd = g.data();
    let mut tmp = vec![T::zero(); h * ow];
    let mut out = vec![T::zero(); slices * h * w];
    for s in 0..slices {
        tmp.fill(T::zero());
        let src = &gd[s * oh * ow..(s + 1) * oh * ow];
        for (o, t) in ty.iter().enumerate() {
            for x in 0..ow {
                let v = src[o * ow + x];
                tmp[t.i0 * ow + x] += v * t.w0;
                tmp[t.i1 * ow + x] += v * t.w1;
            }
        }
        let dst = &mut out[s * h * w..(s + 1) * h * w];
        for r in 0..h {
            for (o, t) in tx.iter().enumerate() {
                let v = tmp[r * ow + o];
                dst[r * w + t.i0] += v * t.w0;
                dst[r * w + t.i1] += v * t.w1;
            }
        }
    }
    Tensor::from_vec(in_shape.to_vec(), out)
}

impl<T: Scalar> Var<T> {
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Var<T> {
        let out = resize_bilinear(self.value(), oh, ow);
        let in_shape = self.shape().to_vec();
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(resize_bilinear_adjoint(g, &in_shape))]),
        )
    }
}
