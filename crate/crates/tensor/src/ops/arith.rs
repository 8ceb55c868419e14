//! Elementwise arithmetic with same-rank broadcasting.

use crate::autograd::Var;
use crate::scalar::Scalar;
use crate::tensor::{strides, Tensor};

/// Output shape of a same-rank broadcast, where each axis of each operand
/// is either the output size or 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast needs equal ranks: {a:?} vs {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "cannot broadcast {a:?} with {b:?}");
            x.max(y)
        })
        .collect()
}

fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape.iter().zip(out).zip(s).map(|((&d, &o), st)| if d == 1 && o != 1 { 0 } else { st }).collect()
}

/// Applies `f` over the broadcast of `a` and `b`.
pub fn broadcast_zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let sa = bcast_strides(a.shape(), &out_shape);
    let sb = bcast_strides(b.shape(), &out_shape);
    let n: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let r = out_shape.len();
    if n == 0 {
        return Tensor::from_vec(out_shape, out);
    }
    let last = r - 1;
    let inner = out_shape[last];
    let (ia, ib) = (sa[last], sb[last]);
    let (da, db) = (a.data(), b.data());
    let mut idx = vec![0usize; r];
    'outer: loop {
        let oa: usize = (0..last).map(|k| idx[k] * sa[k]).sum();
        let ob: usize = (0..last).map(|k| idx[k] * sb[k]).sum();
        for i in 0..inner {
            out.push(f(da[oa + i * ia], db[ob + i * ib]));
        }
        let mut k = last;
        loop {
            if k == 0 {
                break 'outer;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < out_shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Sums `t` down to `shape` (inverse of broadcasting).
pub fn sum_to_shape<T: Scalar>(t: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if t.shape() == shape {
        return t.clone();
    }
    assert_eq!(t.rank(), shape.len());
    let out_strides = bcast_strides(shape, t.shape());
    let mut out = vec![T::zero(); shape.iter().product()];
    let ts = t.shape().to_vec();
    let r = ts.len();
    let last = r - 1;
    let inner = ts[last];
    let istride = out_strides[last];
    let data = t.data();
    let mut idx = vec![0usize; r];
    let mut src = 0usize;
    'outer: loop {
        let base: usize = (0..last).map(|k| idx[k] * out_strides[k]).sum();
        for i in 0..inner {
            out[base + i * istride] += data[src];
            src += 1;
        }
        let mut k = last;
        loop {
            if k == 0 {
                break 'outer;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < ts[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    Tensor::from_vec(shape.to_vec(), out)
}

fn unary<T: Scalar>(
    x: &Var<T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + Send + Sync + 'static,
) -> Var<T> {
    // df(input, output) is the local derivative.
    let out = x.value().map(f);
    let xin = x.value().clone();
    let yout = out.clone();
    Var::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let d: Vec<T> = g
                .data()
                .iter()
                .zip(xin.data())
                .zip(yout.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_vec(g.shape().to_vec(), d))]
        }),
    )
}

impl<T: Scalar> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Var<T> {
        let out = broadcast_zip(self.value(), other.value(), |a, b| a + b);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| sum_to_shape(g, &sa)),
                    need[1].then(|| sum_to_shape(g, &sb)),
                ]
            }),
        )
    }

    /// Broadcasts to `shape` (same rank, unit axes stretched).
    pub fn expand(&self, shape: &[usize]) -> Var<T> {
        let target = Tensor::zeros(shape.to_vec());
        let out = broadcast_zip(self.value(), &target, |a, _| a);
        assert_eq!(out.shape(), shape, "cannot expand {:?} to {shape:?}", self.shape());
        let sa = self.shape().to_vec();
        Var::from_op(out, vec![self.clone()], Box::new(move |g, _| vec![Some(sum_to_shape(g, &sa))]))
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        self.add(&other.neg())
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        let out = broadcast_zip(self.value(), other.value(), |a, b| a * b);
        let (a, b) = (self.value().clone(), other.value().clone());
        Var::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| sum_to_shape(&broadcast_zip(g, &b, |g, b| g * b), a.shape())),
                    need[1].then(|| sum_to_shape(&broadcast_zip(g, &a, |g, a| g * a), b.shape())),
                ]
            }),
        )
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-T::one())
    }

    pub fn scale(&self, s: T) -> Var<T> {
        let out = self.value().scale(s);
        Var::from_op(out, vec![self.clone()], Box::new(move |g, _| vec![Some(g.scale(s))]))
    }

    pub fn add_scalar(&self, s: T) -> Var<T> {
        let out = self.value().map(|v| v + s);
        Var::from_op(out, vec![self.clone()], Box::new(|g, _| vec![Some(g.clone())]))
    }

    pub fn relu(&self) -> Var<T> {
        unary(self, |v| v.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn sigmoid(&self) -> Var<T> {
        unary(self, |v| T::one() / (T::one() + (-v).exp()), |_, y| y * (T::one() - y))
    }

    pub fn exp(&self) -> Var<T> {
        unary(self, |v| v.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Var<T> {
        unary(self, |v| v.ln(), |x, _| T::one() / x)
    }

    pub fn square(&self) -> Var<T> {
        unary(self, |v| v * v, |x, _| x + x)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        Var::from_op(
            Tensor::scalar(self.value().sum()),
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(Tensor::full(shape.clone(), g.item()))]),
        )
    }

    pub fn mean(&self) -> Var<T> {
        let n = T::lit(self.value().numel() as f64);
        self.sum().scale(T::one() / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_per_channel() {
        let a = Tensor::<f64>::from_fn(vec![2, 3, 2], |i| i as f64);
        let b = Tensor::<f64>::from_vec(vec![1, 3, 1], vec![10.0, 20.0, 30.0]);
        let c = broadcast_zip(&a, &b, |x, y| x + y);
        assert_eq!(c.get(&[1, 2, 1]), a.get(&[1, 2, 1]) + 30.0);
        let s = sum_to_shape(&c, &[1, 3, 1]);
        let manual: f64 = (0..2).flat_map(|n| (0..2).map(move |x| (n, x))).map(|(n, x)| c.get(&[n, 1, x])).sum();
        assert_eq!(s.get(&[0, 1, 0]), manual);
    }

    #[test]
    fn mul_gradients_with_broadcast() {
        let a = Var::leaf(Tensor::<f64>::from_fn(vec![2, 2], |i| i as f64 + 1.0));
        let b = Var::leaf(Tensor::<f64>::from_vec(vec![1, 2], vec![3.0, 5.0]));
        let g = a.mul(&b).sum().backward();
        assert_eq!(g.wrt(&a).unwrap().to_vec(), vec![3.0, 5.0, 3.0, 5.0]);
        assert_eq!(g.wrt(&b).unwrap().to_vec(), vec![1.0 + 3.0, 2.0 + 4.0]);
    }
}
