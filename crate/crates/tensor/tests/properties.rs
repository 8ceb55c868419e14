use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::rngs::StdRng as Rng64;
use rand::SeedableRng;
use sshs_tensor::ops::{bmm_forward, conv_backward, conv_forward, resize_bilinear, resize_bilinear_adjoint, softmax, ConvOpts};
use sshs_tensor::Tensor;

/// Direct 3D convolution over `(N, C, D, H, W)` with zero padding.
fn direct_conv(x: &Tensor<f64>, w: &Tensor<f64>, o: ConvOpts) -> Tensor<f64> {
    let (n, cin, d, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(4));
    let (cout, cin_g, kd, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3), w.dim(4));
    let g = o.groups;
    let cout_g = cout / g;
    let out_len = |i: usize, k: usize, a: usize| (i + 2 * o.padding[a] - o.dilation[a] * (k - 1) - 1) / o.stride[a] + 1;
    let (od, oh, ow) = (out_len(d, kd, 0), out_len(h, kh, 1), out_len(wd, kw, 2));
    let mut out = Tensor::zeros(vec![n, cout, od, oh, ow]);
    for b in 0..n {
        for co in 0..cout {
            let grp = co / cout_g;
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin_g {
                            let c = grp * cin_g + ci;
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for cc in 0..kw {
                                        let iz = (z * o.stride[0] + a * o.dilation[0]) as isize - o.padding[0] as isize;
                                        let iy = (y * o.stride[1] + bb * o.dilation[1]) as isize - o.padding[1] as isize;
                                        let ix = (xx * o.stride[2] + cc * o.dilation[2]) as isize - o.padding[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = (((b * cin + c) * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                        let wi = (((co * cin_g + ci) * kd + a) * kh + bb) * kw + cc;
                                        acc += x.data()[xi] * w.data()[wi];
                                    }
                                }
                            }
                        }
                        out.data_mut()[(((b * cout + co) * od + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
    }
    out
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[test]
fn dilated_taps_that_only_reach_padding() {
    let mut rng = Rng64::seed_from_u64(1);
    let x = Tensor::<f64>::randn(vec![1, 2, 1, 3, 3], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(vec![2, 2, 1, 3, 3], 1.0, &mut rng);
    let o = ConvOpts { padding: [0, 4, 4], dilation: [1, 4, 4], ..Default::default() };
    let fast = conv_forward(&x, &w, None, o);
    let slow = direct_conv(&x, &w, o);
    assert_eq!(fast.shape(), slow.shape());
    assert_abs_diff_eq!(fast.sub(&slow).max_abs(), 0.0, epsilon = 1e-12);
}

fn conv_case() -> impl Strategy<Value = ([usize; 5], [usize; 3], ConvOpts, u64)> {
    (1usize..3, 1usize..3, 1usize..4, 1usize..7, 1usize..7, 0usize..2, 0usize..3, 1usize..3, 1usize..3, any::<u64>()).prop_map(
        |(n, groups, cpg, h, w, kd2, kh2, stride, dil, seed)| {
            let (kd, kh) = (2 * kd2 + 1, 2 * kh2 + 1);
            let pad = [kd2 + dil, kh2 * dil + 1, kh2 * dil];
            let o = ConvOpts { stride: [1, stride, stride], padding: pad, dilation: [1, dil, dil], groups };
            ([n, groups * cpg, 2, h, w], [kd, kh, kh], o, seed)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_direct_evaluation((xs, ks, o, seed) in conv_case()) {
        let mut rng = Rng64::seed_from_u64(seed);
        let cout = o.groups * 2;
        let x = Tensor::<f64>::randn(xs.to_vec(), 1.0, &mut rng);
        let w = Tensor::<f64>::randn(vec![cout, xs[1] / o.groups, ks[0], ks[1], ks[2]], 1.0, &mut rng);
        let fast = conv_forward(&x, &w, None, o);
        let slow = direct_conv(&x, &w, o);
        prop_assert_eq!(fast.shape(), slow.shape());
        prop_assert!(fast.sub(&slow).max_abs() < 1e-10);
    }

    #[test]
    fn conv_backward_is_the_adjoint((xs, ks, o, seed) in conv_case()) {
        let mut rng = Rng64::seed_from_u64(seed);
        let cout = o.groups * 2;
        let x = Tensor::<f64>::randn(xs.to_vec(), 1.0, &mut rng);
        let w = Tensor::<f64>::randn(vec![cout, xs[1] / o.groups, ks[0], ks[1], ks[2]], 1.0, &mut rng);
        let y = conv_forward(&x, &w, None, o);
        let g = Tensor::<f64>::randn(y.shape().to_vec(), 1.0, &mut rng);
        let (dx, dw, _) = conv_backward(&x, &w, &g, o, [true, true, false]);
        // Linear in x and in w: <g, conv(x, w)> = <dx, x> = <dw, w>.
        let lhs = dot(&g, &y);
        prop_assert!((lhs - dot(&dx.unwrap(), &x)).abs() < 1e-8 * (1.0 + lhs.abs()));
        prop_assert!((lhs - dot(&dw.unwrap(), &w)).abs() < 1e-8 * (1.0 + lhs.abs()));
    }

    #[test]
    fn bilinear_adjoint_dot_product(h in 1usize..9, w in 1usize..9, oh in 1usize..17, ow in 1usize..17, seed in any::<u64>()) {
        let mut rng = Rng64::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(vec![2, 3, h, w], 1.0, &mut rng);
        let g = Tensor::<f64>::randn(vec![2, 3, oh, ow], 1.0, &mut rng);
        let lhs = dot(&resize_bilinear(&x, oh, ow), &g);
        let rhs = dot(&x, &resize_bilinear_adjoint(&g, x.shape()));
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn bilinear_keeps_constants(h in 1usize..9, w in 1usize..9, oh in 1usize..17, ow in 1usize..17, v in -5.0f64..5.0) {
        let y = resize_bilinear(&Tensor::full(vec![1, 1, h, w], v), oh, ow);
        prop_assert!(y.data().iter().all(|&t| (t - v).abs() < 1e-12));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(n in 1usize..5, c in 1usize..9, shift in -50.0f64..50.0, seed in any::<u64>()) {
        let mut rng = Rng64::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(vec![n, c, 3], 4.0, &mut rng);
        let s = softmax(&x, 1);
        for b in 0..n {
            for i in 0..3 {
                let sum: f64 = (0..c).map(|k| s.data()[(b * c + k) * 3 + i]).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }
        let shifted = softmax(&x.map(|v| v + shift), 1);
        prop_assert!(shifted.sub(&s).max_abs() < 1e-12);
    }

    #[test]
    fn bmm_matches_loops(b in 1usize..3, m in 1usize..5, k in 1usize..5, n in 1usize..5, ta: bool, tb: bool, seed in any::<u64>()) {
        let mut rng = Rng64::seed_from_u64(seed);
        let a = Tensor::<f64>::randn(if ta { vec![b, k, m] } else { vec![b, m, k] }, 1.0, &mut rng);
        let bb = Tensor::<f64>::randn(if tb { vec![b, n, k] } else { vec![b, k, n] }, 1.0, &mut rng);
        let out = bmm_forward(&a, &bb, ta, tb);
        prop_assert_eq!(out.shape(), &[b, m, n]);
        for s in 0..b {
            for i in 0..m {
                for j in 0..n {
                    let want: f64 = (0..k)
                        .map(|t| {
                            let av = if ta { a.data()[(s * k + t) * m + i] } else { a.data()[(s * m + i) * k + t] };
                            let bv = if tb { bb.data()[(s * n + j) * k + t] } else { bb.data()[(s * k + t) * n + j] };
                            av * bv
                        })
                        .sum();
                    prop_assert!((out.data()[(s * m + i) * n + j] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn permute_round_trip(dims in proptest::collection::vec(1usize..4, 4), seed in any::<u64>()) {
        let mut rng = Rng64::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(dims, 1.0, &mut rng);
        let perm = [2, 0, 3, 1];
        let mut inv = [0; 4];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let back = x.permute(&perm).permute(&inv);
        prop_assert_eq!(back.data(), x.data());
    }
}
