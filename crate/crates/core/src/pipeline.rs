//! In-memory orchestration: manifests, fold plans, both training stages,
//! whole-volume inference and DSC evaluation.

use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sshs_tensor::nn::Module;
use sshs_tensor::Tensor;

use crate::backbone2d::Net2d;
use crate::bridge::{category_balanced_crop, ClassIndex};
use crate::config::ExperimentConfig;
use crate::cps::{CpsTrainer, LabeledBatch, StepReport, UnlabeledBatch};
use crate::error::{Error, Result};
use crate::losses::{dsc_metric, LossReport};
use crate::stage2::{extract_patch, patch_labels, stage1_volume, Patch, Stage1Cache, Stage2Net, Stage2Trainer};
use crate::stitch::{ensemble_average, tile_volume, Stitcher};
use crate::volume::{half_res_labels, invert_labels, make_slice_triplets, preprocess, LabelMap, Preprocessed, Volume};

// ------------------------------------------------------------ manifests

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    /// Relative to the data root unless absolute.
    pub image: PathBuf,
    #[serde(default)]
    pub mask: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub labeled: Vec<SubjectEntry>,
    #[serde(default)]
    pub unlabeled: Vec<SubjectEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = if matches!(path.extension().and_then(|e| e.to_str()), Some("yaml" | "yml")) {
            serde_yaml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in self.labeled.iter().chain(&self.unlabeled) {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Validation(format!("duplicate subject id {}", e.id)));
            }
        }
        if let Some(e) = self.labeled.iter().find(|e| e.mask.is_none()) {
            return Err(Error::Validation(format!("labeled subject {} has no mask", e.id)));
        }
        Ok(())
    }

    pub fn find(&self, id: &str) -> Option<&SubjectEntry> {
        self.labeled.iter().chain(&self.unlabeled).find(|e| e.id == id)
    }
}

pub fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

// ------------------------------------------------------------ fold plans

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub folds: Vec<Vec<String>>,
    pub unlabeled: Vec<String>,
}

/// Seeded shuffle of the sorted ids into `k` near-equal folds; the first
/// `n % k` folds get one extra subject.
pub fn make_folds(ids: &[String], k: usize, seed: u64, unlabeled: &[String]) -> Result<FoldPlan> {
    if k == 0 || ids.len() < k {
        return Err(Error::Validation(format!("{} labeled subjects cannot fill {k} folds", ids.len())));
    }
    let mut v = ids.to_vec();
    v.sort();
    v.dedup();
    if v.len() != ids.len() {
        return Err(Error::Validation("duplicate subject ids".into()));
    }
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (v.len() / k, v.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut it = v.into_iter();
    for f in 0..k {
        folds.push(it.by_ref().take(base + usize::from(f < extra)).collect());
    }
    Ok(FoldPlan { seed, folds, unlabeled: unlabeled.to_vec() })
}

impl FoldPlan {
    pub fn validation(&self, fold: usize) -> Result<&[String]> {
        self.folds.get(fold).map(|v| v.as_slice()).ok_or_else(|| Error::Validation(format!("fold {fold} out of range")))
    }

    pub fn training(&self, fold: usize) -> Result<Vec<String>> {
        self.validation(fold)?;
        Ok(self.folds.iter().enumerate().filter(|(i, _)| *i != fold).flat_map(|(_, f)| f.clone()).collect())
    }
}

// ------------------------------------------------------------ stage one

struct SliceSample {
    images: Vec<f32>,
    labels: Option<Vec<usize>>,
}

fn slice_samples(p: &Preprocessed) -> Vec<SliceSample> {
    make_slice_triplets(&p.provenance.subject, &p.volume)
        .into_iter()
        .map(|t| SliceSample {
            labels: p.labels.as_ref().map(|m| half_res_labels(m, t.z).into_iter().map(usize::from).collect()),
            images: t.channels,
        })
        .collect()
}

fn stack(samples: &[&SliceSample], hw: [usize; 2]) -> Tensor<f32> {
    let data: Vec<f32> = samples.iter().flat_map(|s| s.images.iter().copied()).collect();
    Tensor::from_vec(vec![samples.len(), 3, hw[0], hw[1]], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub l_s: f64,
    pub l_cps: f64,
    pub l_2d: f64,
    pub val_dsc: Option<f64>,
}

pub struct Stage1Outcome {
    pub trainer: CpsTrainer<f32>,
    pub history: Vec<Stage1Epoch>,
    /// Peers at the best validation epoch, when validation ran.
    pub best: Option<(usize, f64, Net2d<f32>, Net2d<f32>)>,
}

/// Two peers with different initialisations.
pub fn new_stage1(cfg: &ExperimentConfig, seed: u64) -> CpsTrainer<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n1 = Net2d::new(&mut rng, &cfg.net2d, cfg.num_classes, cfg.c2);
    let n2 = Net2d::new(&mut rng, &cfg.net2d, cfg.num_classes, cfg.c2);
    CpsTrainer::new(n1, n2, cfg.stage1.schedule.optimizer.to_kind(), cfg.stage1.lambda, cfg.stage1.cutmix)
}

/// Runs epochs `start..epochs` of stage one. An epoch is one shuffled pass
/// over the labeled slice triplets; each step pairs its labeled batch with
/// an equally sized batch of random unlabeled triplet pairs. With
/// `lambda == 0` the unlabeled branch is skipped.
pub fn train_stage1(
    cfg: &ExperimentConfig,
    mut trainer: CpsTrainer<f32>,
    start: usize,
    labeled: &[&Preprocessed],
    unlabeled: &[&Preprocessed],
    val: &[&Preprocessed],
    seed: u64,
    on_epoch: &mut dyn FnMut(&Stage1Epoch, &CpsTrainer<f32>) -> Result<()>,
) -> Result<Stage1Outcome> {
    if labeled.is_empty() {
        return Err(Error::Validation("stage one needs at least one labeled subject".into()));
    }
    let lab: Vec<SliceSample> = labeled.iter().flat_map(|p| slice_samples(p)).collect();
    let unl: Vec<SliceSample> = if cfg.stage1.lambda != 0.0 { unlabeled.iter().flat_map(|p| slice_samples(p)).collect() } else { Vec::new() };
    let hw = cfg.input_2d();
    let sched = &cfg.stage1.schedule;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Net2d<f32>, Net2d<f32>)> = None;
    let mut order: Vec<usize> = (0..lab.len()).collect();
    for epoch in start..sched.epochs {
        let lr = sched.lr_at(epoch);
        trainer.lambda = cfg.stage1.lambda_at(epoch);
        order.shuffle(&mut rng);
        let mut acc = StepReport::default();
        let mut steps = 0;
        for chunk in order.chunks(sched.batch_size) {
            let batch: Vec<&SliceSample> = chunk.iter().map(|&i| &lab[i]).collect();
            let labels = batch.iter().flat_map(|s| s.labels.clone().unwrap_or_default()).collect();
            let lb = LabeledBatch { images: stack(&batch, hw), labels };
            let ub = (!unl.is_empty()).then(|| {
                let pick = |rng: &mut ChaCha8Rng| -> Vec<&SliceSample> { (0..chunk.len()).map(|_| &unl[rng.random_range(0..unl.len())]).collect() };
                let a = pick(&mut rng);
                let b = pick(&mut rng);
                UnlabeledBatch { a: stack(&a, hw), b: stack(&b, hw) }
            });
            let r = trainer.train_step(&lb, ub.as_ref(), lr, &mut rng)?;
            acc.l_s += r.l_s;
            acc.l_cps += r.l_cps;
            acc.l_2d += r.l_2d;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        let mut log = Stage1Epoch { epoch, l_s: acc.l_s / n, l_cps: acc.l_cps / n, l_2d: acc.l_2d / n, val_dsc: None };
        let last = epoch + 1 == sched.epochs;
        if !val.is_empty() && cfg.stage1.val_every > 0 && ((epoch + 1) % cfg.stage1.val_every == 0 || last) {
            let d = stage1_dsc(cfg, &trainer, val)?;
            log.val_dsc = Some(d);
            if best.as_ref().is_none_or(|b| d > b.1) {
                best = Some((epoch, d, trainer.net1.clone(), trainer.net2.clone()));
            }
        }
        info!("stage1 epoch {epoch} lr {lr:.2e} lambda {:.3} L_s {:.4} L_cps {:.4} L_2d {:.4} val {:?}", trainer.lambda, log.l_s, log.l_cps, log.l_2d, log.val_dsc);
        history.push(log);
        on_epoch(&log, &trainer)?;
    }
    trainer.lambda = cfg.stage1.lambda;
    Ok(Stage1Outcome { trainer, history, best })
}

/// Mean foreground DSC of the fused coarse prediction in preprocessed space.
pub fn stage1_dsc(cfg: &ExperimentConfig, t: &CpsTrainer<f32>, subjects: &[&Preprocessed]) -> Result<f64> {
    let mut scores = Vec::new();
    for p in subjects {
        let gt = p.labels.as_ref().ok_or_else(|| Error::Validation(format!("{} has no labels", p.provenance.subject)))?;
        let cache = stage1_volume(&t.net1, &t.net2, &p.volume, cfg.stage1.schedule.batch_size)?;
        let pred: Vec<u8> = cache.coarse.argmax_axis(0).1.into_iter().map(|l| l as u8).collect();
        let pm = LabelMap { data: pred, dims: gt.dims, spacing: gt.spacing, num_classes: gt.num_classes };
        scores.push(score_subject(&p.provenance.subject, &pm, gt, cfg.eval.exclude_absent)?.mean());
    }
    Ok(mean(&scores))
}

// ------------------------------------------------------------ stage two

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Epoch {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_dc: f64,
    pub l_3d: f64,
    pub val_dsc: Option<f64>,
}

pub struct Stage2Outcome {
    pub trainer: Stage2Trainer<f32>,
    pub history: Vec<Stage2Epoch>,
    pub best: Option<(usize, f64, Stage2Net<f32>)>,
}

pub fn new_stage2(cfg: &ExperimentConfig, seed: u64) -> Result<Stage2Trainer<f32>> {
    let mut net = Stage2Net::new(&mut ChaCha8Rng::seed_from_u64(seed), cfg)?;
    if !cfg.stage2.train_bridge {
        net.bridge.visit_mut("", &mut |_, p| p.trainable = false);
    }
    Ok(Stage2Trainer::new(net, cfg.stage2.schedule.optimizer.to_kind()))
}

/// Runs epochs `start..epochs` of stage two. An epoch draws
/// `patches_per_subject` category-balanced patches from every training
/// subject and visits them in shuffled batches.
pub fn train_stage2(
    cfg: &ExperimentConfig,
    mut trainer: Stage2Trainer<f32>,
    start: usize,
    train: &[(&Preprocessed, &Stage1Cache)],
    val: &[(&Preprocessed, &Stage1Cache)],
    seed: u64,
    on_epoch: &mut dyn FnMut(&Stage2Epoch, &Stage2Trainer<f32>) -> Result<()>,
) -> Result<Stage2Outcome> {
    let indices: Vec<ClassIndex> = train
        .iter()
        .map(|(p, _)| p.labels.as_ref().map(ClassIndex::new).ok_or_else(|| Error::Validation(format!("{} has no labels", p.provenance.subject))))
        .collect::<Result<_>>()?;
    if train.is_empty() {
        return Err(Error::Validation("stage two needs at least one training subject".into()));
    }
    let sched = &cfg.stage2.schedule;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Stage2Net<f32>)> = None;
    for epoch in start..sched.epochs {
        let lr = sched.lr_at(epoch);
        let mut draws = Vec::new();
        for (s, idx) in indices.iter().enumerate() {
            for _ in 0..cfg.stage2.patches_per_subject {
                draws.push((s, category_balanced_crop(idx, cfg.stage2.patch, &mut rng)?.0));
            }
        }
        draws.shuffle(&mut rng);
        let mut acc = LossReport::default();
        let mut steps = 0;
        for chunk in draws.chunks(sched.batch_size) {
            let mut patches = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &(s, spec) in chunk {
                let (p, cache) = train[s];
                patches.push(extract_patch(&p.volume, cache, spec)?);
                labels.push(patch_labels(p.labels.as_ref().expect("checked above"), spec));
            }
            let r = trainer.train_step(&patches, &labels, lr)?;
            acc.l_ce += r.l_ce;
            acc.l_dc += r.l_dc;
            acc.total += r.total;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        let mut log = Stage2Epoch { epoch, l_ce: acc.l_ce / n, l_dc: acc.l_dc / n, l_3d: acc.total / n, val_dsc: None };
        let last = epoch + 1 == sched.epochs;
        if !val.is_empty() && cfg.stage2.val_every > 0 && ((epoch + 1) % cfg.stage2.val_every == 0 || last) {
            let mut scores = Vec::new();
            for (p, cache) in val {
                let probs = predict_from_cache(cfg, &trainer.net, &p.volume, cache)?;
                scores.push(score_prepared(cfg, p, &probs)?);
            }
            let d = mean(&scores);
            log.val_dsc = Some(d);
            if best.as_ref().is_none_or(|b| d > b.1) {
                best = Some((epoch, d, trainer.net.clone()));
            }
        }
        info!("stage2 epoch {epoch} lr {lr:.2e} L_ce {:.4} L_dc {:.4} L_3d {:.4} val {:?}", log.l_ce, log.l_dc, log.l_3d, log.val_dsc);
        history.push(log);
        on_epoch(&log, &trainer)?;
    }
    Ok(Stage2Outcome { trainer, history, best })
}

fn score_prepared(cfg: &ExperimentConfig, p: &Preprocessed, probs: &Tensor<f32>) -> Result<f64> {
    let gt = p.labels.as_ref().ok_or_else(|| Error::Validation(format!("{} has no labels", p.provenance.subject)))?;
    let pred: Vec<u8> = probs.argmax_axis(0).1.into_iter().map(|l| l as u8).collect();
    let pm = LabelMap { data: pred, dims: gt.dims, spacing: gt.spacing, num_classes: gt.num_classes };
    Ok(score_subject(&p.provenance.subject, &pm, gt, cfg.eval.exclude_absent)?.mean())
}

// ------------------------------------------------------------ inference

/// The three networks of one trained fold.
#[derive(Clone, Debug)]
pub struct FoldModel {
    pub net1: Net2d<f32>,
    pub net2: Net2d<f32>,
    pub stage2: Stage2Net<f32>,
}

/// Tiles the preprocessed volume, runs stage two in groups of at most
/// `max_patches_in_flight` patches and stitches `(C1, Z, Y, X)` probabilities.
pub fn predict_from_cache(cfg: &ExperimentConfig, net: &Stage2Net<f32>, v: &Volume, cache: &Stage1Cache) -> Result<Tensor<f32>> {
    let plan = tile_volume(v.dims, cfg.stage2.patch, cfg.inference.stride)?;
    let mut st = Stitcher::new(cfg.num_classes, v.dims);
    for group in plan.chunks(cfg.inference.max_patches_in_flight.max(1)) {
        let patches: Vec<Patch> = group.iter().map(|&s| extract_patch(v, cache, s)).collect::<Result<_>>()?;
        for (p, probs) in patches.iter().zip(net.predict(&patches)?) {
            st.add(&p.spec, &probs)?;
        }
    }
    st.finish()
}

pub fn predict_probs(cfg: &ExperimentConfig, model: &FoldModel, v: &Volume) -> Result<Tensor<f32>> {
    let cache = stage1_volume(&model.net1, &model.net2, v, cfg.stage1.schedule.batch_size)?;
    predict_from_cache(cfg, &model.stage2, v, &cache)
}

/// Mean fold-ensemble probabilities and their argmax, in preprocessed space.
pub fn predict_prepared_probs(cfg: &ExperimentConfig, models: &[FoldModel], v: &Volume) -> Result<(Tensor<f32>, Vec<u8>)> {
    let probs: Vec<Tensor<f32>> = models.iter().map(|m| predict_probs(cfg, m, v)).collect::<Result<_>>()?;
    ensemble_average(&probs)
}

pub fn predict_prepared(cfg: &ExperimentConfig, models: &[FoldModel], v: &Volume) -> Result<LabelMap> {
    let (_, labels) = predict_prepared_probs(cfg, models, v)?;
    LabelMap::new(labels, v.dims, v.spacing, cfg.num_classes)
}

/// Raw volume in, raw-space label map out.
pub fn run_two_stage(cfg: &ExperimentConfig, models: &[FoldModel], subject: &str, raw: &Volume) -> Result<LabelMap> {
    let prep = preprocess(subject, raw, None, &cfg.preprocess)?;
    let pred = predict_prepared(cfg, models, &prep.volume)?;
    invert_labels(&pred, &prep.provenance)
}

// ------------------------------------------------------------ evaluation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectScores {
    pub subject: String,
    /// DSC per foreground class `1..C1`; `None` when excluded.
    pub per_class: Vec<Option<f64>>,
}

impl SubjectScores {
    /// Mean over the non-excluded foreground classes.
    pub fn mean(&self) -> f64 {
        mean(&self.per_class.iter().flatten().copied().collect::<Vec<_>>())
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// With `exclude_absent`, classes missing from the ground truth are dropped;
/// otherwise they score 1 if the prediction also lacks them and 0 if not.
pub fn score_subject(subject: &str, pred: &LabelMap, gt: &LabelMap, exclude_absent: bool) -> Result<SubjectScores> {
    if pred.dims != gt.dims {
        return Err(Error::Shape(format!("{subject}: prediction {:?} vs ground truth {:?}", pred.dims, gt.dims)));
    }
    let per_class = (1..gt.num_classes as u8)
        .map(|c| {
            Ok(match dsc_metric(&pred.data, &gt.data, c)? {
                Some(d) => Some(d),
                None if exclude_absent => None,
                None => Some(if pred.data.contains(&c) { 0.0 } else { 1.0 }),
            })
        })
        .collect::<Result<_>>()?;
    Ok(SubjectScores { subject: subject.to_string(), per_class })
}

/// Per-structure means across subjects and their overall mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub class_names: Vec<String>,
    pub per_class: Vec<Option<f64>>,
    pub overall: f64,
    pub subjects: Vec<SubjectScores>,
}

pub fn build_report(scores: &[SubjectScores], class_names: &[String]) -> Report {
    let nfg = class_names.len().saturating_sub(1);
    let per_class: Vec<Option<f64>> = (0..nfg)
        .map(|c| {
            let v: Vec<f64> = scores.iter().filter_map(|s| s.per_class.get(c).copied().flatten()).collect();
            (!v.is_empty()).then(|| mean(&v))
        })
        .collect();
    let overall = mean(&per_class.iter().flatten().copied().collect::<Vec<_>>());
    Report { class_names: class_names[1..].to_vec(), per_class, overall, subjects: scores.to_vec() }
}

impl Report {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Runtime(format!("{}: {e}", path.display())))?;
        let err = |e: csv::Error| Error::Runtime(format!("{}: {e}", path.display()));
        w.write_record(["subject", "structure", "dsc"]).map_err(err)?;
        for s in &self.subjects {
            for (name, d) in self.class_names.iter().zip(&s.per_class) {
                let v = d.map(|d| format!("{d:.6}")).unwrap_or_default();
                w.write_record([s.subject.as_str(), name, &v]).map_err(err)?;
            }
        }
        for (name, d) in self.class_names.iter().zip(&self.per_class) {
            let v = d.map(|d| format!("{d:.6}")).unwrap_or_default();
            w.write_record(["mean", name, &v]).map_err(err)?;
        }
        w.write_record(["mean", "overall", &format!("{:.6}", self.overall)]).map_err(err)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Structures as columns, subjects as rows, in label order.
    pub fn table(&self) -> String {
        let mut out = format!("{:<14}", "subject");
        for n in &self.class_names {
            out.push_str(&format!("{n:>8}"));
        }
        out.push_str(&format!("{:>9}\n", "mean"));
        let cell = |d: &Option<f64>| d.map(|d| format!("{:>8.4}", d)).unwrap_or_else(|| format!("{:>8}", "-"));
        for s in &self.subjects {
            out.push_str(&format!("{:<14}", s.subject));
            for d in &s.per_class {
                out.push_str(&cell(d));
            }
            out.push_str(&format!("{:>9.4}\n", s.mean()));
        }
        out.push_str(&format!("{:<14}", "mean"));
        for d in &self.per_class {
            out.push_str(&cell(d));
        }
        out.push_str(&format!("{:>9.4}\n", self.overall));
        out
    }
}

/// Reads `subject,structure,dsc` rows written by [`Report::write_csv`],
/// skipping the summary rows.
pub fn read_scores_csv(path: &Path, class_names: &[String]) -> Result<Vec<SubjectScores>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Runtime(format!("{}: {e}", path.display())))?;
    let fg = &class_names[1..];
    let mut out: Vec<SubjectScores> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Runtime(format!("{}: {e}", path.display())))?;
        let (subject, name, value) = (&rec[0], &rec[1], &rec[2]);
        if subject == "mean" {
            continue;
        }
        let c = fg.iter().position(|n| n == name).ok_or_else(|| Error::Validation(format!("unknown structure {name} in {}", path.display())))?;
        let v = if value.is_empty() {
            None
        } else {
            Some(value.parse::<f64>().map_err(|e| Error::Validation(format!("bad DSC {value}: {e}")))?)
        };
        if out.last().is_none_or(|s| s.subject != subject) {
            out.push(SubjectScores { subject: subject.to_string(), per_class: vec![None; fg.len()] });
        }
        out.last_mut().expect("pushed").per_class[c] = v;
    }
    Ok(out)
}
