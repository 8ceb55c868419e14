use crate::autograd::Var;
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl<T: Scalar> Var<T> {
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Var<T> {
        let out = self.value().reshape(shape);
        let in_shape = self.shape().to_vec();
        Var::from_op(out, vec![self.clone()], Box::new(move |g, _| vec![Some(g.reshape(in_shape.clone()))]))
    }

    pub fn permute(&self, perm: &[usize]) -> Var<T> {
        let out = self.value().permute(perm);
        let inv = inverse_perm(perm);
        Var::from_op(out, vec![self.clone()], Box::new(move |g, _| vec![Some(g.permute(&inv))]))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<T> {
        let out = self.value().narrow(axis, start, len);
        let in_shape = self.shape().to_vec();
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let dim = in_shape[axis];
                let mut dx = vec![T::zero(); in_shape.iter().product()];
                let gd = g.data();
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                vec![Some(Tensor::from_vec(in_shape.clone(), dx))]
            }),
        )
    }

    pub fn concat(parts: &[Var<T>], axis: usize) -> Var<T> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let out = Tensor::concat(&values, axis);
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Var::from_op(
            out,
            parts.to_vec(),
            Box::new(move |g, need| {
                let mut start = 0;
                sizes
                    .iter()
                    .zip(need)
                    .map(|(&len, &nd)| {
                        let piece = nd.then(|| g.narrow(axis, start, len));
                        start += len;
                        piece
                    })
                    .collect()
            }),
        )
    }

    /// Batched matrix product of `(B, M, K)` and `(B, K, N)`, with optional
    /// transposition of either operand's trailing two axes.
    pub fn bmm(&self, other: &Var<T>, ta: bool, tb: bool) -> Var<T> {
        let out = bmm_forward(self.value(), other.value(), ta, tb);
        let (a, b) = (self.value().clone(), other.value().clone());
        Var::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, need| {
                // C = op(A) op(B); dop(A) = G op(B)^T, dop(B) = op(A)^T G
                let da = need[0].then(|| if ta { bmm_forward(&b, g, tb, true) } else { bmm_forward(g, &b, false, !tb) });
                let db = need[1].then(|| if tb { bmm_forward(g, &a, true, ta) } else { bmm_forward(&a, g, !ta, false) });
                vec![da, db]
            }),
        )
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Var<T> {
        let out = softmax(self.value(), axis);
        let y = out.clone();
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let shape = y.shape();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let dim = shape[axis];
                let (yd, gd) = (y.data(), g.data());
                let mut dx = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |c: usize| (o * dim + c) * inner + i;
                        let dot: T = (0..dim).map(|c| yd[idx(c)] * gd[idx(c)]).sum();
                        for c in 0..dim {
                            dx[idx(c)] = yd[idx(c)] * (gd[idx(c)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_vec(shape.to_vec(), dx))]
            }),
        )
    }
}

pub fn bmm_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Tensor<T> {
    assert_eq!(a.rank(), 3, "bmm lhs rank");
    assert_eq!(b.rank(), 3, "bmm rhs rank");
    let (batch, ar, ac) = (a.dim(0), a.dim(1), a.dim(2));
    let (bb, br, bc) = (b.dim(0), b.dim(1), b.dim(2));
    assert_eq!(batch, bb, "bmm batch mismatch");
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "bmm inner dimension mismatch");
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        let am = MatRef::row_major(i * ar * ac, ar, ac);
        let bm = MatRef::row_major(i * br * bc, br, bc);
        let am = if ta { am.t() } else { am };
        let bm = if tb { bm.t() } else { bm };
        gemm(T::one(), a.data(), am, b.data(), bm, T::zero(), &mut out, MatRef::row_major(i * m * n, m, n));
    }
    Tensor::from_vec(vec![batch, m, n], out)
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let dim = shape[axis];
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |c: usize| (o * dim + c) * inner + i;
            let mx = (0..dim).map(|c| xd[idx(c)]).fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for c in 0..dim {
                let e = (xd[idx(c)] - mx).exp();
                out[idx(c)] = e;
                s += e;
            }
            for c in 0..dim {
                out[idx(c)] /= s;
            }
        }
    }
    Tensor::from_vec(shape.to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(&Tensor<f64>) -> f64>(f: F, x: &Tensor<f64>) -> Vec<f64> {
        let h = 1e-6;
        (0..x.numel())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn bmm_all_transpose_combinations() {
        let mut rng = rand::rng();
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = Tensor::<f64>::randn(if ta { vec![2, 4, 3] } else { vec![2, 3, 4] }, 1.0, &mut rng);
            let b = Tensor::<f64>::randn(if tb { vec![2, 5, 4] } else { vec![2, 4, 5] }, 1.0, &mut rng);
            let r = Tensor::<f64>::randn(vec![2, 3, 5], 1.0, &mut rng);
            let av = Var::leaf(a.clone());
            let bv = Var::leaf(b.clone());
            let grads = av.bmm(&bv, ta, tb).mul(&Var::constant(r.clone())).sum().backward();
            let fa = fd(|a| bmm_forward(a, &b, ta, tb).mul(&r).sum(), &a);
            let fb = fd(|b| bmm_forward(&a, b, ta, tb).mul(&r).sum(), &b);
            for (x, y) in grads.wrt(&av).unwrap().data().iter().zip(fa) {
                assert!((x - y).abs() < 1e-6);
            }
            for (x, y) in grads.wrt(&bv).unwrap().data().iter().zip(fb) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_gradient() {
        let mut rng = rand::rng();
        let x = Tensor::<f64>::randn(vec![2, 3, 4], 1.0, &mut rng);
        let r = Tensor::<f64>::randn(vec![2, 3, 4], 1.0, &mut rng);
        let xv = Var::leaf(x.clone());
        let grads = xv.softmax(1).mul(&Var::constant(r.clone())).sum().backward();
        let f = fd(|x| softmax(x, 1).mul(&r).sum(), &x);
        for (a, b) in grads.wrt(&xv).unwrap().data().iter().zip(f) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn permute_and_concat_gradients_route_back() {
        let a = Var::leaf(Tensor::<f64>::from_fn(vec![2, 3], |i| i as f64));
        let b = Var::leaf(Tensor::<f64>::from_fn(vec![2, 1], |i| i as f64));
        let c = Var::concat(&[a.clone(), b.clone()], 1).permute(&[1, 0]);
        let w = Var::constant(Tensor::from_fn(vec![4, 2], |i| i as f64));
        let g = c.mul(&w).sum().backward();
        assert_eq!(g.wrt(&a).unwrap().to_vec(), vec![0.0, 2.0, 4.0, 1.0, 3.0, 5.0]);
        assert_eq!(g.wrt(&b).unwrap().to_vec(), vec![6.0, 7.0]);
    }
}
