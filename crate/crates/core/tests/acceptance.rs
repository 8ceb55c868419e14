//! Acceptance suite. Runs every criterion and prints one PASS/FAIL line each.
//!
//! `SSHSNET_ACCEPT=2,3,6` restricts the run to the listed criteria.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sshs_tensor::gradcheck::{max_rel_error, numeric_grad, sample_indices};
use sshs_tensor::nn::{Ctx, Module, OptimKind};
use sshs_tensor::{Tensor, Var};
use sshsnet::backbone2d::Net2d;
use sshsnet::bridge::{category_balanced_crop, crop_cdhw, fuse_confidences_g, upsample_features, ClassIndex, PatchSpec};
use sshsnet::cps::{cutmix_labels, cutmix_pair, CpsTrainer, CutMixSpec, LabeledBatch, UnlabeledBatch};
use sshsnet::ctam::{from_rows, to_rows, AttentionBlock, AttentionMode, Ctam};
use sshsnet::losses::{cps_loss, cross_entropy, dice_loss, dsc_metric, one_hot};
use sshsnet::phantom::{generate, PhantomSpec};
use sshsnet::pipeline::{new_stage1, new_stage2, run_two_stage, score_subject, stage1_dsc, train_stage1, train_stage2, FoldModel};
use sshsnet::stage2::{extract_patch, patch_labels, stage1_volume, Stage1Cache, Stage2Net};
use sshsnet::stitch::{stitch, tile_volume, Stitcher};
use sshsnet::volume::{preprocess, LabelMap, Preprocessed, Volume};
use sshsnet::ExperimentConfig;

type Outcome = Result<String, Box<dyn std::error::Error>>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+).into());
        }
    };
}

fn shape_is(name: &str, got: &[usize], want: &[usize]) -> Result<(), String> {
    if got == want {
        Ok(())
    } else {
        Err(format!("{name}: shape {got:?}, expected {want:?}"))
    }
}

/// Largest deviation of channel sums from one for a `(N, C, ...)` map.
fn channel_sum_error(t: &Tensor<f32>) -> f64 {
    let (n, c) = (t.dim(0), t.dim(1));
    let inner = t.numel() / (n * c);
    let d = t.data();
    let mut worst = 0.0f64;
    for b in 0..n {
        for i in 0..inner {
            let s: f64 = (0..c).map(|k| d[(b * c + k) * inner + i] as f64).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    worst
}

fn with_batch(t: &Tensor<f32>) -> Tensor<f32> {
    let mut s = vec![1];
    s.extend_from_slice(t.shape());
    t.reshape(s)
}

// ------------------------------------------------------------------ 1

fn shape_conformance() -> Outcome {
    let t0 = Instant::now();
    let cfg = ExperimentConfig::full();
    let (c1, c2, c3, c4) = (cfg.num_classes, cfg.c2, cfg.c3, cfg.c4);
    ensure!((c1, c2, c3, c4) == (20, 128, 256, 512), "full-size channels are {:?}", (c1, c2, c3, c4));
    let [hh, ww] = cfg.preprocess.inplane_size;
    let (h, w) = (hh / 2, ww / 2);
    ensure!((h, w) == (224, 440), "2D input {h}x{w}");
    let z = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ctx = Ctx::eval();
    let net1 = Net2d::<f32>::new(&mut rng, &cfg.net2d, c1, c2);
    let net2 = Net2d::<f32>::new(&mut rng, &cfg.net2d, c1, c2);
    let x = Var::constant(Tensor::randn(vec![1, 3, h, w], 1.0, &mut rng));
    let o1 = net1.forward(&ctx, &x)?;
    let o2 = net2.forward(&ctx, &x)?;
    shape_is("Confidence2D", o1.probs.shape(), &[1, c1, h, w])?;
    shape_is("Confidence2D logits", o1.logits.shape(), &[1, c1, h, w])?;
    shape_is("Feature2D", o1.feature.shape(), &[1, c2, h / 4, w / 4])?;
    let sum_err = channel_sum_error(o1.probs.value()).max(channel_sum_error(o2.probs.value()));
    ensure!(sum_err <= 1e-5, "2D channel sums off by {sum_err:e}");
    let t2d = t0.elapsed();

    // Per-slice stacks over Z. Eval-mode slice outputs are independent, so
    // the batch-1 result stands in for each of the Z slices.
    let stack = |t: &Tensor<f32>| Tensor::concat(&vec![t; z], 0);
    let (p1, p2) = (stack(o1.probs.value()), stack(o2.probs.value()));
    let (f1, f2) = (stack(o1.feature.value()), stack(o2.feature.value()));
    let g = fuse_confidences_g(&p1, &p2)?;
    shape_is("S_2d", g.shape(), &[c1, z, hh, ww])?;
    let g_err = channel_sum_error(&with_batch(&g));
    ensure!(g_err <= 1e-5, "S_2d channel sums off by {g_err:e}");
    let (u1, u2) = (upsample_features(&f1), upsample_features(&f2));
    shape_is("upsampled Feature2D", u1.shape(), &[c2, z, hh / 4, ww / 4])?;
    drop((p1, p2, f1, f2));

    let s2 = Stage2Net::<f32>::new(&mut rng, &cfg)?;
    let full_t = s2.bridge.fuse_features_t(&ctx, &Var::constant(with_batch(&u1)), &Var::constant(with_batch(&u2)))?;
    shape_is("I_2d", full_t.shape(), &[1, 2 * c3, z, hh / 4, ww / 4])?;

    let image = Volume::new(Tensor::<f32>::randn(vec![z * hh * ww], 1.0, &mut rng).into_vec(), [z, hh, ww], [4.4, 0.34, 0.34])?;
    let cache = Stage1Cache { coarse: g, features: Tensor::concat(&[&u1, &u2], 0) };
    drop((u1, u2));
    let spec = PatchSpec { origin: [0, 96, 200], size: cfg.stage2.patch };
    ensure!(spec.size == [12, 192, 192], "patch size {:?}", spec.size);
    let patch = extract_patch(&image, &cache, spec)?;
    shape_is("M_1", patch.m1.shape(), &[1 + c1, z, 192, 192])?;
    let first: Vec<f32> = (0..z).flat_map(|k| (96..288).flat_map(move |y| (200..392).map(move |x| (k, y, x)))).map(|(k, y, x)| image.get(k, y, x)).collect();
    ensure!(patch.m1.data()[..first.len()] == first[..], "M_1 channel 0 is not the image patch");

    let out = s2.forward(&ctx, &Var::constant(with_batch(&patch.m1)), &Var::constant(with_batch(&patch.features)))?;
    shape_is("I_3d", out.hybrid.shape(), &[1, 2 * c3, z, 48, 48])?;
    let (fo, fs) = spec.feature_crop();
    let full_crop = crop_cdhw(&full_t.value().reshape(full_t.shape()[1..].to_vec()), fo, fs)?;
    let diff = full_crop.data().iter().zip(out.hybrid.value().data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    ensure!(diff <= 1e-4, "cropping I_2d disagrees with the patch path by {diff:e}");
    drop(full_t);
    shape_is("I^c_3d", out.intra.shape(), &[1, c3, z, 48, 48])?;
    shape_is("I_2d-3d", out.inter.shape(), &[1, c3, z, 48, 48])?;
    shape_is("M_2", out.m2.shape(), &[1, c4, z, 48, 48])?;
    shape_is("patch logits", out.logits.shape(), &[1, c1, z, 192, 192])?;
    let p_err = channel_sum_error(out.probs.value());
    ensure!(p_err <= 1e-5, "patch probabilities off by {p_err:e}");

    let elapsed = t0.elapsed();
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:.1?}");
    Ok(format!("{elapsed:.1?} total, 2D forward pair {t2d:.1?}"))
}

// ------------------------------------------------------------------ 2

/// `(alpha, beta)` position of element `(c, z, s)` for a feature with
/// `z` slices and `s` in-plane positions.
fn row_oracle(mode: AttentionMode, z: usize, s: usize, (c, zc, sc): (usize, usize, usize)) -> (usize, usize) {
    match mode {
        AttentionMode::InterSlice => (zc, c * s + sc),
        AttentionMode::IntraSlice => (sc, c * z + zc),
        AttentionMode::Channel => (c, zc * s + sc),
    }
}

fn weighted_sum(out: &Var<f64>, w: &Tensor<f64>) -> Var<f64> {
    out.mul(&Var::constant(w.clone())).sum()
}

/// Worst relative error between backward and central differences over
/// sampled entries of every parameter and of the inputs.
fn gradcheck<M, F>(m: &M, inputs: &[Tensor<f64>], f: F) -> f64
where
    M: Module<f64> + Clone,
    F: Fn(&M, &Ctx<f64>, &[Var<f64>]) -> Var<f64>,
{
    let leaves: Vec<Var<f64>> = inputs.iter().map(|t| Var::leaf(t.clone())).collect();
    let grads = f(m, &Ctx::train(), &leaves).backward();
    let consts = |ts: &[Tensor<f64>]| ts.iter().map(|t| Var::constant(t.clone())).collect::<Vec<_>>();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut params = Vec::new();
    m.visit("", &mut |name, p| params.push((name.to_string(), p.id(), p.value.clone())));
    for (name, id, value) in params {
        let idx = sample_indices(value.numel(), 8);
        let analytic: Vec<f64> = match grads.param(id) {
            Some(g) => idx.iter().map(|&i| g.data()[i]).collect(),
            None => vec![0.0; idx.len()],
        };
        let numeric = numeric_grad(
            |t| {
                let mut c = m.clone();
                c.visit_mut("", &mut |n, p| {
                    if n == name {
                        p.value = t.clone();
                    }
                });
                f(&c, &Ctx::eval(), &consts(inputs)).value().item()
            },
            &value,
            &idx,
            h,
        );
        worst = worst.max(max_rel_error(&analytic, &numeric, 1e-6));
    }
    for (k, (leaf, x)) in leaves.iter().zip(inputs).enumerate() {
        let idx = sample_indices(x.numel(), 12);
        let g = grads.wrt(leaf).expect("input gradient");
        let analytic: Vec<f64> = idx.iter().map(|&i| g.data()[i]).collect();
        let numeric = numeric_grad(
            |t| {
                let mut xs = inputs.to_vec();
                xs[k] = t.clone();
                f(m, &Ctx::eval(), &consts(&xs)).value().item()
            },
            x,
            &idx,
            h,
        );
        worst = worst.max(max_rel_error(&analytic, &numeric, 1e-6));
    }
    worst
}

fn ctam_algebra() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (c0, z, hw) = (8usize, 3usize, 4usize);
    let shape = vec![2, c0, z, hw, hw];
    let s = hw * hw;
    let mut worst_rows = 0.0f64;
    let mut worst_grad = 0.0f64;
    for mode in [AttentionMode::InterSlice, AttentionMode::IntraSlice, AttentionMode::Channel] {
        let x = Tensor::<f64>::randn(shape.clone(), 1.0, &mut rng);
        let xv = Var::constant(x.clone());
        let rows = to_rows(&xv, mode);
        let (alpha, beta) = mode.alpha_beta(c0, z, s);
        shape_is("rows", rows.shape(), &[2, alpha, beta])?;
        for b in 0..2 {
            for c in 0..c0 {
                for zz in 0..z {
                    for p in 0..s {
                        let (r, col) = row_oracle(mode, z, s, (c, zz, p));
                        let got = rows.value().data()[(b * alpha + r) * beta + col];
                        let want = x.data()[((b * c0 + c) * z + zz) * s + p];
                        ensure!(got.to_bits() == want.to_bits(), "{mode:?}: row layout differs at b={b} c={c} z={zz} s={p}");
                    }
                }
            }
        }
        let back = from_rows(&rows, mode, &shape);
        ensure!(
            back.value().data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
            "{mode:?}: rows round trip is not bitwise"
        );

        let block = AttentionBlock::<f64>::new(&mut rng, mode, c0, mode.default_divisor())?;
        let (_, a) = block.forward_with_weights(&Ctx::eval(), &xv)?;
        shape_is("attention", a.shape(), &[2, alpha, alpha])?;
        for row in a.value().data().chunks(alpha) {
            worst_rows = worst_rows.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let block32 = AttentionBlock::<f32>::new(&mut rng, mode, c0, mode.default_divisor())?;
        let (_, a32) = block32.forward_with_weights(&Ctx::eval(), &Var::constant(x.cast::<f32>()))?;
        for row in a32.value().data().chunks(alpha) {
            worst_rows = worst_rows.max((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
        }

        let wts = Tensor::<f64>::randn(shape.clone(), 1.0, &mut rng);
        let err = gradcheck(&block, &[x.scale(0.5)], |m, ctx, xs| weighted_sum(&m.forward(ctx, &xs[0]).unwrap(), &wts));
        ensure!(err < 1e-3, "{mode:?}: gradient relative error {err:e}");
        worst_grad = worst_grad.max(err);
    }
    ensure!(worst_rows <= 1e-5, "attention rows off by {worst_rows:e}");

    let mut ctam = Ctam::<f64>::new(&mut rng, c0)?;
    let intra = Tensor::<f64>::randn(shape.clone(), 1.0, &mut rng);
    let inter = Tensor::<f64>::randn(shape.clone(), 1.0, &mut rng);
    let tr = ctam.forward_trace(&Ctx::eval(), &Var::constant(intra.clone()), &Var::constant(inter.clone()))?;
    let same = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    ensure!(same(tr.f1.value(), &intra), "gamma1 = 0 but F1 differs from the intra-slice input");
    ensure!(same(tr.f2.value(), &inter), "gamma2 = 0 but F2 differs from the inter-slice input");
    shape_is("M_2", tr.m2.shape(), &[2, 2 * c0, z, hw, hw])?;

    let wts = Tensor::<f64>::randn(vec![2, 2 * c0, z, hw, hw], 1.0, &mut rng);
    ctam.gamma1.value = Tensor::from_vec(vec![1], vec![0.7]);
    ctam.gamma2.value = Tensor::from_vec(vec![1], vec![-0.4]);
    let err = gradcheck(&ctam, &[intra.scale(0.5), inter.scale(0.5)], |m, ctx, xs| weighted_sum(&m.forward(ctx, &xs[0], &xs[1]).unwrap(), &wts));
    ensure!(err < 1e-3, "CTAM gradient relative error {err:e}");
    worst_grad = worst_grad.max(err);

    let elapsed = t0.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:.1?}");
    Ok(format!("row error {worst_rows:.1e}, gradient error {worst_grad:.1e}, {elapsed:.1?}"))
}

// ------------------------------------------------------------------ 3

struct LossCase {
    shape: [usize; 4],
    probs: Vec<f64>,
    labels: Vec<usize>,
}

impl LossCase {
    fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cc, h, w] = self.shape;
        self.probs[((n * cc + c) * h + y) * w + x]
    }
    fn label(&self, n: usize, y: usize, x: usize) -> usize {
        let [_, _, h, w] = self.shape;
        self.labels[(n * h + y) * w + x]
    }
}

fn random_case(rng: &mut ChaCha8Rng, n: usize) -> LossCase {
    let (c, h, w) = (3, 3, 2);
    let mut probs = vec![0.0; n * c * h * w];
    for b in 0..n {
        for p in 0..h * w {
            let logits: Vec<f64> = (0..c).map(|_| rng.random_range(-3.0..3.0)).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for k in 0..c {
                probs[(b * c + k) * h * w + p] = logits[k].exp() / z;
            }
        }
    }
    let labels = (0..n * h * w).map(|_| rng.random_range(0..c)).collect();
    LossCase { shape: [n, c, h, w], probs, labels }
}

/// Mean over samples and pixels of `-log max(r_target, 1e-12)`.
fn ce_oracle(k: &LossCase) -> f64 {
    let [n, _, h, w] = k.shape;
    let mut total = 0.0;
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                total += -k.at(b, k.label(b, y, x), y, x).max(1e-12).ln();
            }
        }
    }
    total / (n * h * w) as f64
}

/// `-(1/(N*C)) * sum_{n,c} (2*I + eps) / (sum o + sum r + eps)`.
fn dice_oracle(k: &LossCase) -> f64 {
    let [n, c, h, w] = k.shape;
    let eps = 1e-5;
    let mut total = 0.0;
    for b in 0..n {
        for cls in 0..c {
            let (mut inter, mut so, mut sr) = (0.0, 0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let o = if k.label(b, y, x) == cls { 1.0 } else { 0.0 };
                    let r = k.at(b, cls, y, x);
                    inter += o * r;
                    so += o;
                    sr += r;
                }
            }
            total += (2.0 * inter + eps) / (so + sr + eps);
        }
    }
    -total / (n * c) as f64
}

fn loss_pair(k: &LossCase) -> Result<(f64, f64), Box<dyn std::error::Error>> {
    let r = Var::constant(Tensor::from_vec(k.shape.to_vec(), k.probs.clone()));
    let o = one_hot::<f64>(&k.labels, k.shape[1], &k.shape)?;
    Ok((cross_entropy(&o, &r)?.value().item(), dice_loss(&o, &r)?.value().item()))
}

fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for i in 0..24 {
        let k = random_case(&mut rng, if i < 20 { 1 } else { 2 });
        let (ce, dc) = loss_pair(&k)?;
        worst = worst.max((ce - ce_oracle(&k)).abs()).max((dc - dice_oracle(&k)).abs());
    }
    ensure!(worst <= 1e-6, "losses differ from the oracle by {worst:e}");

    let mut perfect = random_case(&mut rng, 1);
    let [_, c, h, w] = perfect.shape;
    for p in 0..h * w {
        for k in 0..c {
            perfect.probs[k * h * w + p] = (perfect.labels[p] == k) as u8 as f64;
        }
    }
    let (ce, dc) = loss_pair(&perfect)?;
    ensure!(ce.abs() <= 1e-4, "perfect CE = {ce}");
    // Every class of the 3-class case may not be present; absent classes are
    // scored as perfect by the smoothing, so -1 still holds.
    ensure!((dc + 1.0).abs() <= 1e-4, "perfect Dice = {dc}");

    // Two classes, both present in the target, prediction always wrong.
    let labels: Vec<usize> = (0..6).map(|i| i % 2).collect();
    let probs: Vec<f64> = (0..2).flat_map(|k| labels.iter().map(move |&l| (l != k) as u8 as f64)).collect();
    let wrong = LossCase { shape: [1, 2, 3, 2], probs, labels };
    let (_, dc) = loss_pair(&wrong)?;
    ensure!(dc.abs() <= 1e-4, "fully wrong Dice = {dc}");
    Ok(format!("max oracle deviation {worst:.1e}"))
}

// ------------------------------------------------------------------ 4

fn cps_contract() -> Outcome {
    let cfg = ExperimentConfig::phantom();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let n1 = Net2d::<f64>::new(&mut rng, &cfg.net2d, 4, cfg.c2);
    let n2 = Net2d::<f64>::new(&mut rng, &cfg.net2d, 4, cfg.c2);
    let mut t = CpsTrainer::new(n1, n2, OptimKind::adam(1e-4), 0.5, true);
    let (h, w) = (16, 16);
    let labeled = LabeledBatch { images: Tensor::randn(vec![2, 3, h, w], 1.0, &mut rng), labels: (0..2 * h * w).map(|_| rng.random_range(0..4)).collect() };
    let unlabeled = UnlabeledBatch { a: Tensor::randn(vec![2, 3, h, w], 1.0, &mut rng), b: Tensor::randn(vec![2, 3, h, w], 1.0, &mut rng) };

    let terms = t.terms(&Ctx::train(), &Ctx::train(), &labeled, Some(&unlabeled), &mut rng)?;
    let touched = |g: &sshs_tensor::Gradients<f64>, net: &Net2d<f64>| {
        let mut n = 0;
        net.visit("", &mut |_, p| n += g.param(p.id()).is_some_and(|t| t.max_abs() > 0.0) as usize);
        n
    };
    let g12 = terms.ce_y1_s2.as_ref().ok_or("no CPS term")?.backward();
    ensure!(touched(&g12, &t.net1) == 0, "CE(y1, s2) reaches network 1");
    ensure!(touched(&g12, &t.net2) > 0, "CE(y1, s2) does not reach network 2");
    let g21 = terms.ce_y2_s1.as_ref().ok_or("no CPS term")?.backward();
    ensure!(touched(&g21, &t.net2) == 0, "CE(y2, s1) reaches network 2");
    ensure!(touched(&g21, &t.net1) > 0, "CE(y2, s1) does not reach network 1");

    let mut worst = 0.0f64;
    for lambda in [0.0, 0.5, 1.0, 3.0] {
        t.lambda = lambda;
        let r = t.train_step(&labeled, Some(&unlabeled), 1e-4, &mut rng)?;
        worst = worst.max((r.l_2d - (r.l_s + lambda * r.l_cps)).abs());
    }
    ensure!(worst <= 1e-6, "L_2d differs from L_s + lambda * L_cps by {worst:e}");

    for trial in 0..100 {
        let (hh, ww) = (rng.random_range(1..40), rng.random_range(2..40));
        let n = rng.random_range(1..4);
        let specs: Vec<CutMixSpec> = (0..n).map(|_| CutMixSpec::sample(&mut rng, hh, ww)).collect();
        let c = 2;
        let a = Tensor::<f32>::from_fn(vec![n, c, hh, ww], |i| i as f32 + 1.0);
        let b = Tensor::<f32>::from_fn(vec![n, c, hh, ww], |i| -(i as f32) - 1.0);
        let la: Vec<usize> = (0..n * hh * ww).map(|i| 2 * i).collect();
        let lb: Vec<usize> = (0..n * hh * ww).map(|i| 2 * i + 1).collect();
        let mixed = cutmix_pair(&a, &b, &specs)?;
        let mixed_l = cutmix_labels(&la, &lb, &specs)?;
        for (s, sp) in specs.iter().enumerate() {
            ensure!(sp.y0 + sp.h <= hh && sp.x0 + sp.w <= ww, "trial {trial}: box {sp:?} leaves the image");
            let mut inside = 0;
            for y in 0..hh {
                for x in 0..ww {
                    let from_a = y >= sp.y0 && y < sp.y0 + sp.h && x >= sp.x0 && x < sp.x0 + sp.w;
                    inside += from_a as usize;
                    let p = (s * hh + y) * ww + x;
                    ensure!(mixed_l[p] == if from_a { la[p] } else { lb[p] }, "trial {trial}: label at ({s},{y},{x})");
                    for ch in 0..c {
                        let q = ((s * c + ch) * hh + y) * ww + x;
                        let want = if from_a { a.data()[q] } else { b.data()[q] };
                        ensure!(mixed.data()[q] == want, "trial {trial}: pixel ({s},{ch},{y},{x})");
                    }
                }
            }
            ensure!(inside == sp.h * sp.w && inside > 0 && inside < hh * ww, "trial {trial}: box {sp:?} covers {inside} pixels");
        }
    }

    let uniform = Var::constant(Tensor::<f64>::full(vec![2, 20, 5, 7], 0.05));
    let y1: Vec<usize> = (0..70).map(|_| rng.random_range(0..20)).collect();
    let y2: Vec<usize> = (0..70).map(|_| rng.random_range(0..20)).collect();
    let l = cps_loss(&y1, &uniform, &y2, &uniform)?.value().item();
    let want = 2.0 * 20f64.ln();
    ensure!((l - want).abs() <= 1e-4, "uniform CPS loss {l}, expected {want}");
    Ok(format!("L_2d error {worst:.1e}, uniform CPS {l:.4}"))
}

// ------------------------------------------------------------------ 5

fn stitch_oracle(plan: &[PatchSpec], blocks: &[Tensor<f32>], c: usize, dims: [usize; 3]) -> (Vec<f64>, Vec<u32>) {
    let n = dims[0] * dims[1] * dims[2];
    let mut sum = vec![0.0f64; c * n];
    let mut count = vec![0u32; n];
    for (p, b) in plan.iter().zip(blocks) {
        let [d, h, w] = p.size;
        for ch in 0..c {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let v = ((z + p.origin[0]) * dims[1] + y + p.origin[1]) * dims[2] + x + p.origin[2];
                        sum[ch * n + v] += b.data()[((ch * d + z) * h + y) * w + x] as f64;
                        if ch == 0 {
                            count[v] += 1;
                        }
                    }
                }
            }
        }
    }
    let avg = sum.iter().enumerate().map(|(i, s)| s / count[i % n] as f64).collect();
    (avg, count)
}

fn stitching() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let dims = [64, 64, 64];
    let c = 2;
    let mut worst = 0.0f64;
    let mut plans = 0;
    while plans < 6 {
        let patch: [usize; 3] = std::array::from_fn(|_| rng.random_range(8..=40));
        let stride: [usize; 3] = std::array::from_fn(|a| rng.random_range(patch[a] / 2..=patch[a]).max(1));
        let plan = tile_volume(dims, patch, stride)?;
        let overlapping = (0..3).any(|a| stride[a] < patch[a] || 64 % patch[a] != 0);
        if !overlapping {
            continue;
        }
        plans += 1;
        let blocks: Vec<Tensor<f32>> = plan.iter().map(|p| Tensor::rand_uniform(vec![c, p.size[0], p.size[1], p.size[2]], 0.0, 1.0, &mut rng)).collect();
        let mut st = Stitcher::new(c, dims);
        for (p, b) in plan.iter().zip(&blocks) {
            st.add(p, b)?;
        }
        let (avg, count) = stitch_oracle(&plan, &blocks, c, dims);
        ensure!(st.coverage() == count.as_slice(), "coverage differs from the oracle");
        ensure!(count.iter().all(|&k| k > 0), "uncovered voxel for patch {patch:?} stride {stride:?}");
        let out = st.finish()?;
        for (a, b) in out.data().iter().zip(&avg) {
            worst = worst.max((*a as f64 - b).abs());
        }
    }
    ensure!(worst <= 1e-7, "stitched volume differs from the oracle by {worst:e}");

    for patch in [[16, 32, 64], [64, 8, 16], [32, 32, 32]] {
        let plan = tile_volume(dims, patch, patch)?;
        let blocks: Vec<Tensor<f32>> = plan.iter().map(|_| Tensor::randn(vec![c, patch[0], patch[1], patch[2]], 1.0, &mut rng)).collect();
        let out = stitch(&plan, &blocks, c, dims)?;
        for (p, b) in plan.iter().zip(&blocks) {
            ensure!(crop_cdhw(&out, p.origin, p.size)?.data() == b.data(), "non-overlapping patch {p:?} not reproduced");
        }
    }
    Ok(format!("{plans} overlapping plans, max deviation {worst:.1e}"))
}

// ------------------------------------------------------------------ 6

fn dsc_oracle() -> Outcome {
    let gt: Vec<u8> = vec![1, 1, 1, 1, 0, 0, 0, 0, 2, 2];
    ensure!(dsc_metric(&gt, &gt, 1)? == Some(1.0), "identical masks");
    let disjoint: Vec<u8> = vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2];
    ensure!(dsc_metric(&disjoint, &gt, 1)? == Some(0.0), "disjoint masks");
    let half: Vec<u8> = vec![1, 1, 0, 0, 1, 1, 0, 0, 2, 2];
    ensure!(dsc_metric(&half, &gt, 1)? == Some(0.5), "half overlap");
    ensure!(dsc_metric(&half, &gt, 3)?.is_none(), "absent class must be excluded");

    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for trial in 0..50 {
        let n = rng.random_range(20..400);
        let k = rng.random_range(2..6u8);
        let a: Vec<u8> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let b: Vec<u8> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let pa: Vec<u8> = perm.iter().map(|&i| a[i]).collect();
        let pb: Vec<u8> = perm.iter().map(|&i| b[i]).collect();
        for c in 0..k {
            let ab = dsc_metric(&a, &b, c)?;
            let ba = dsc_metric(&b, &a, c)?;
            if a.contains(&c) && b.contains(&c) {
                ensure!(ab == ba, "trial {trial} class {c}: asymmetric {ab:?} vs {ba:?}");
            }
            ensure!(dsc_metric(&pa, &pb, c)? == ab, "trial {trial} class {c}: permutation changed the score");
        }
    }
    Ok("hand cases exact, 50 random pairs".into())
}

// ------------------------------------------------------------------ 7

fn phantom_set(cfg: &ExperimentConfig, seeds: impl IntoIterator<Item = u64>, labeled: bool) -> Result<Vec<(Preprocessed, Volume, LabelMap)>, Box<dyn std::error::Error>> {
    let spec = PhantomSpec::default();
    seeds
        .into_iter()
        .map(|s| {
            let (v, m) = generate(&spec, s);
            let p = preprocess(&format!("phantom{s}"), &v, labeled.then_some(&m), &cfg.preprocess)?;
            Ok((p, v, m))
        })
        .collect()
}

fn raw_dsc(cfg: &ExperimentConfig, model: &FoldModel, set: &[(Preprocessed, Volume, LabelMap)]) -> Result<Vec<f64>, Box<dyn std::error::Error>> {
    let models = std::slice::from_ref(model);
    let mut out = Vec::new();
    for (p, v, m) in set {
        let pred = run_two_stage(cfg, models, &p.provenance.subject, v)?;
        out.push(score_subject(&p.provenance.subject, &pred, m, true)?.mean());
    }
    Ok(out)
}

fn refs(s: &[(Preprocessed, Volume, LabelMap)]) -> Vec<&Preprocessed> {
    s.iter().map(|t| &t.0).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn end_to_end() -> Outcome {
    let t0 = Instant::now();
    let cfg = ExperimentConfig::phantom();
    ensure!(cfg.stage1.schedule.epochs <= 200 && cfg.stage2.schedule.epochs <= 60, "schedule exceeds the epoch budget");
    let train = phantom_set(&cfg, 100..108, true)?;
    let held = phantom_set(&cfg, 108..110, true)?;
    let pool = phantom_set(&cfg, 120..126, false)?;
    let (lab, unl) = (refs(&train), refs(&pool));
    let s1 = train_stage1(&cfg, new_stage1(&cfg, 1), 0, &lab, &unl, &[], 1, &mut |_, _| Ok(()))?.trainer;
    let t1 = t0.elapsed();
    let caches: Vec<Stage1Cache> = lab.iter().map(|p| stage1_volume(&s1.net1, &s1.net2, &p.volume, cfg.stage1.schedule.batch_size)).collect::<Result<_, _>>()?;
    let pairs: Vec<(&Preprocessed, &Stage1Cache)> = lab.iter().copied().zip(&caches).collect();
    let s2 = train_stage2(&cfg, new_stage2(&cfg, 2)?, 0, &pairs, &[], 2, &mut |_, _| Ok(()))?.trainer;
    let model = FoldModel { net1: s1.net1, net2: s1.net2, stage2: s2.net };
    let tr = raw_dsc(&cfg, &model, &train)?;
    let ho = raw_dsc(&cfg, &model, &held)?;
    let (mt, mh) = (mean(&tr), mean(&ho));
    let elapsed = t0.elapsed();
    let detail = format!(
        "train {mt:.4} {:?}, held-out {mh:.4} {:?}, stage one {t1:.0?}, total {elapsed:.0?}",
        tr.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        ho.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    );
    ensure!(mt >= 0.90 && mh >= 0.75, "{detail}");
    ensure!(elapsed < Duration::from_secs(6 * 3600), "{detail}");
    Ok(detail)
}

// ------------------------------------------------------------------ 8

fn semi_supervision() -> Outcome {
    let base = ExperimentConfig::phantom();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 1..=3u64 {
        let first = 300 + 20 * seed;
        let lab = phantom_set(&base, first..first + 2, true)?;
        let unl = phantom_set(&base, first + 2..first + 8, false)?;
        let held = phantom_set(&base, first + 8..first + 10, true)?;
        let mut score = HashMap::new();
        for lambda in [1.0, 0.0] {
            let mut cfg = base.clone();
            cfg.stage1.lambda = lambda;
            let t = train_stage1(&cfg, new_stage1(&cfg, seed), 0, &refs(&lab), &refs(&unl), &[], seed, &mut |_, _| Ok(()))?.trainer;
            score.insert(lambda as u8, stage1_dsc(&cfg, &t, &refs(&held))?);
        }
        let (with, without) = (score[&1], score[&0]);
        wins += (with >= without) as usize;
        rows.push(format!("seed {seed}: {with:.4} vs {without:.4}"));
    }
    let detail = format!("CPS wins {wins}/3 ({})", rows.join(", "));
    ensure!(wins >= 2, "{detail}");
    Ok(detail)
}

// ------------------------------------------------------------------ 9

fn balanced_sampling() -> Outcome {
    let cfg = ExperimentConfig::phantom();
    let set = phantom_set(&cfg, [7], true)?;
    let labels = set[0].0.labels.as_ref().ok_or("phantom without labels")?;
    let index = ClassIndex::new(labels);
    let present = index.present();
    ensure!(present.len() == cfg.num_classes, "phantom has classes {present:?}");
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let draws = 10_000usize;
    let mut counts = vec![0usize; cfg.num_classes];
    for _ in 0..draws {
        let (spec, class) = category_balanced_crop(&index, cfg.stage2.patch, &mut rng)?;
        ensure!(spec.fits(labels.dims), "patch {spec:?} outside {:?}", labels.dims);
        ensure!(patch_labels(labels, spec).contains(&class), "patch {spec:?} misses its class {class}");
        counts[class] += 1;
    }
    let p = 1.0 / present.len() as f64;
    let expect = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    let worst = counts.iter().map(|&k| (k as f64 - expect).abs() / sigma).fold(0.0, f64::max);
    ensure!(worst <= 3.0, "counts {counts:?}, worst {worst:.2} sigma");
    Ok(format!("counts {counts:?}, worst {worst:.2} sigma"))
}

fn main() -> ExitCode {
    let criteria: [(usize, &str, fn() -> Outcome); 9] = [
        (1, "shape conformance", shape_conformance),
        (2, "CTAM algebra", ctam_algebra),
        (3, "loss oracles", loss_oracles),
        (4, "CPS contract", cps_contract),
        (5, "stitching oracle", stitching),
        (6, "DSC oracle", dsc_oracle),
        (7, "phantom end-to-end", end_to_end),
        (8, "semi-supervision probe", semi_supervision),
        (9, "category-balanced sampling", balanced_sampling),
    ];
    let only: Option<Vec<usize>> = std::env::var("SSHSNET_ACCEPT").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(run));
        match result {
            Ok(Ok(detail)) => println!("PASS {id} {name}: {detail}"),
            Ok(Err(e)) => {
                failed += 1;
                println!("FAIL {id} {name}: {e}");
            }
            Err(p) => {
                failed += 1;
                let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
                println!("FAIL {id} {name}: panicked: {msg}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
