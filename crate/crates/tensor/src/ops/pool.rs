use crate::autograd::Var;
use crate::ops::conv::{conv_out_size, join5, split5};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Var<T> {
    /// Max pooling over `(D, H, W)` windows; padded positions never win.
    pub fn max_pool(&self, kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Var<T> {
        let rank = self.shape().len();
        let (n, c, ins) = split5(self.shape());
        let outs = [
            conv_out_size(ins[0], kernel[0], stride[0], padding[0], 1),
            conv_out_size(ins[1], kernel[1], stride[1], padding[1], 1),
            conv_out_size(ins[2], kernel[2], stride[2], padding[2], 1),
        ];
        let in_plane = ins[0] * ins[1] * ins[2];
        let out_plane = outs[0] * outs[1] * outs[2];
        let xd = self.value().data();
        let mut out = vec![T::zero(); n * c * out_plane];
        let mut arg = vec![0usize; n * c * out_plane];
        for nc in 0..n * c {
            let base = nc * in_plane;
            for oz in 0..outs[0] {
                for oy in 0..outs[1] {
                    for ox in 0..outs[2] {
                        let mut best = T::neg_infinity();
                        let mut best_i = usize::MAX;
                        for a in 0..kernel[0] {
                            let iz = (oz * stride[0] + a) as isize - padding[0] as isize;
                            if iz < 0 || iz >= ins[0] as isize {
                                continue;
                            }
                            for b in 0..kernel[1] {
                                let iy = (oy * stride[1] + b) as isize - padding[1] as isize;
                                if iy < 0 || iy >= ins[1] as isize {
                                    continue;
                                }
                                for cc in 0..kernel[2] {
                                    let ix = (ox * stride[2] + cc) as isize - padding[2] as isize;
                                    if ix < 0 || ix >= ins[2] as isize {
                                        continue;
                                    }
                                    let i = base + (iz as usize * ins[1] + iy as usize) * ins[2] + ix as usize;
                                    if xd[i] > best || best_i == usize::MAX {
                                        best = xd[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        let o = nc * out_plane + (oz * outs[1] + oy) * outs[2] + ox;
                        out[o] = best;
                        arg[o] = best_i;
                    }
                }
            }
        }
        let in_shape = self.shape().to_vec();
        Var::from_op(
            Tensor::from_vec(join5(rank, n, c, outs), out),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); in_shape.iter().product()];
                for (o, &i) in arg.iter().enumerate() {
                    dx[i] += g.data()[o];
                }
                vec![Some(Tensor::from_vec(in_shape.clone(), dx))]
            }),
        )
    }

    /// Mean over all spatial positions, keeping unit spatial axes.
    pub fn global_avg_pool(&self) -> Var<T> {
        let rank = self.shape().len();
        let (n, c, s) = split5(self.shape());
        let plane = s[0] * s[1] * s[2];
        let xd = self.value().data();
        let inv = T::one() / T::lit(plane as f64);
        let out: Vec<T> = (0..n * c).map(|i| xd[i * plane..(i + 1) * plane].iter().copied().sum::<T>() * inv).collect();
        let in_shape = self.shape().to_vec();
        Var::from_op(
            Tensor::from_vec(join5(rank, n, c, [1, 1, 1]), out),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); n * c * plane];
                for i in 0..n * c {
                    let v = g.data()[i] * inv;
                    dx[i * plane..(i + 1) * plane].fill(v);
                }
                vec![Some(Tensor::from_vec(in_shape.clone(), dx))]
            }),
        )
    }
}
