//! On-disk workflow behind the command-line tool.
//!
//! Layout under the output directory:
//!
//! ```text
//! config.json
//! folds.json
//! prep/<id>/{image.nii.gz, mask.nii.gz, prep.json}
//! fold<k>/stage1/{net1,net2,best_net1,best_net2}.ckpt, metrics.csv
//! fold<k>/cache/<id>.ckpt
//! fold<k>/stage2/{stage2,best_stage2}.ckpt, metrics.csv
//! pred/<id>/{labels.nii.gz, prob_<class>.nii.gz, qc.png}
//! ```
//!
//! Every checkpoint, cache and metrics row carries the config hash, and
//! loading an artifact written under a different config fails.

use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sshs_tensor::nn::Module;

use crate::backbone2d::Net2d;
use crate::checkpoint::{file_hash, load_module, load_optimizer, module_arch_hash, module_tensors, read_archive, write_archive, Archive, Header, FORMAT_VERSION};
use crate::config::ExperimentConfig;
use crate::cps::CpsTrainer;
use crate::error::{Error, Result};
use crate::pipeline::{
    build_report, make_folds, new_stage1, new_stage2, predict_prepared_probs, read_scores_csv, resolve, score_subject, train_stage1, train_stage2,
    FoldModel, FoldPlan, Manifest, Report, SubjectScores,
};
use crate::stage2::{stage1_volume, Stage1Cache, Stage2Net, Stage2Trainer};
use crate::volume::{
    invert_channel, invert_labels, load_labels, preprocess, read_nifti, write_labels, write_volume, LabelMap, Preprocessed,
    Provenance, Volume,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PrepRecord {
    config_hash: String,
    provenance: Provenance,
}

/// Which stage-one checkpoints feed the cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage1Pick {
    Last,
    Best,
}

impl Stage1Pick {
    fn files(self) -> [&'static str; 2] {
        match self {
            Stage1Pick::Last => ["net1.ckpt", "net2.ckpt"],
            Stage1Pick::Best => ["best_net1.ckpt", "best_net2.ckpt"],
        }
    }
}

pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
}

impl Workspace {
    /// Opens `out`, writing `config.json` on first use and rejecting a
    /// directory created under a different config.
    pub fn open(cfg: ExperimentConfig, out: &Path) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join("config.json");
        if path.exists() {
            let existing = ExperimentConfig::load(&path)?;
            if existing.hash() != cfg.hash() {
                return Err(Error::Config(format!(
                    "{} was created with config {}; this run uses {}",
                    out.display(),
                    existing.hash(),
                    cfg.hash()
                )));
            }
        } else {
            cfg.save(&path)?;
        }
        Ok(Workspace { cfg, out: out.to_path_buf() })
    }

    fn header(&self, kind: &str, arch_hash: String, meta: serde_json::Value) -> Header {
        let mut meta = meta;
        meta["config"] = serde_json::to_value(&self.cfg).expect("config serialises");
        Header {
            version: FORMAT_VERSION,
            kind: kind.into(),
            arch_hash,
            config_hash: self.cfg.hash(),
            num_classes: self.cfg.num_classes,
            input_size: self.cfg.input_2d().to_vec(),
            meta,
            tensors: vec![],
        }
    }

    fn read_checked(&self, path: &Path, kind: &str) -> Result<Archive> {
        let a = read_archive(path)?;
        if a.header.kind != kind {
            return Err(Error::Checkpoint(format!("{} holds a {} archive, expected {kind}", path.display(), a.header.kind)));
        }
        if a.header.config_hash != self.cfg.hash() {
            return Err(Error::Checkpoint(format!(
                "{} was written under config {}, current config is {}",
                path.display(),
                a.header.config_hash,
                self.cfg.hash()
            )));
        }
        Ok(a)
    }

    fn load_checked<M: Module<f32>>(&self, m: &mut M, path: &Path, kind: &str) -> Result<Archive> {
        let a = self.read_checked(path, kind)?;
        if a.header.arch_hash != module_arch_hash(m) {
            return Err(Error::Checkpoint(format!("{}: architecture hash {} does not match the network", path.display(), a.header.arch_hash)));
        }
        load_module(m, &a)?;
        Ok(a)
    }

    pub fn data_root(&self, manifest_path: &Path) -> PathBuf {
        self.cfg.data_root().unwrap_or_else(|| manifest_path.parent().map(Path::to_path_buf).unwrap_or_default())
    }

    pub fn fold_dir(&self, fold: usize) -> PathBuf {
        self.out.join(format!("fold{fold}"))
    }

    // -------------------------------------------------------- preprocess

    /// Preprocesses every manifest subject into `prep/<id>/`.
    pub fn preprocess(&self, manifest: &Manifest, root: &Path) -> Result<usize> {
        let mut n = 0;
        for e in manifest.labeled.iter().chain(&manifest.unlabeled) {
            let (data, dims, spacing, _) = read_nifti(&resolve(root, &e.image))?;
            let v = Volume::new(data, dims, spacing)?;
            let m = e.mask.as_ref().map(|p| load_labels(&resolve(root, p), self.cfg.num_classes, Some(dims))).transpose()?;
            let p = preprocess(&e.id, &v, m.as_ref(), &self.cfg.preprocess)?;
            let dir = self.out.join("prep").join(&e.id);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_volume(&dir.join("image.nii.gz"), &p.volume, None)?;
            if let Some(m) = &p.labels {
                write_labels(&dir.join("mask.nii.gz"), m, None)?;
            }
            let rec = PrepRecord { config_hash: self.cfg.hash(), provenance: p.provenance };
            let path = dir.join("prep.json");
            std::fs::write(&path, serde_json::to_string_pretty(&rec).expect("record serialises")).map_err(|e| Error::io(&path, e))?;
            info!("preprocessed {} -> {:?}", e.id, p.volume.dims);
            n += 1;
        }
        Ok(n)
    }

    pub fn load_prepared(&self, id: &str) -> Result<Preprocessed> {
        let dir = self.out.join("prep").join(id);
        let path = dir.join("prep.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let rec: PrepRecord = serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        if rec.config_hash != self.cfg.hash() {
            return Err(Error::Validation(format!("{id} was preprocessed under config {}; run preprocess again", rec.config_hash)));
        }
        let (data, dims, spacing, _) = read_nifti(&dir.join("image.nii.gz"))?;
        let volume = Volume::new(data, dims, spacing)?;
        let mask = dir.join("mask.nii.gz");
        let labels = mask.exists().then(|| load_labels(&mask, self.cfg.num_classes, Some(dims))).transpose()?;
        Ok(Preprocessed { volume, labels, provenance: rec.provenance })
    }

    fn load_many(&self, ids: &[String]) -> Result<Vec<Preprocessed>> {
        ids.iter().map(|id| self.load_prepared(id)).collect()
    }

    // -------------------------------------------------------- folds

    pub fn make_folds(&self, manifest: &Manifest) -> Result<FoldPlan> {
        let ids: Vec<String> = manifest.labeled.iter().map(|e| e.id.clone()).collect();
        let unl: Vec<String> = manifest.unlabeled.iter().map(|e| e.id.clone()).collect();
        let plan = make_folds(&ids, self.cfg.folds, self.cfg.seed, &unl)?;
        let path = self.out.join("folds.json");
        std::fs::write(&path, serde_json::to_string_pretty(&plan).expect("plan serialises")).map_err(|e| Error::io(&path, e))?;
        Ok(plan)
    }

    pub fn folds(&self) -> Result<FoldPlan> {
        let path = self.out.join("folds.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }

    // -------------------------------------------------------- stage one

    fn write_net2d(&self, path: &Path, net: &Net2d<f32>, opt: Option<&sshs_tensor::nn::Optimizer<f32>>, epoch: usize, extra: serde_json::Value) -> Result<()> {
        let mut meta = serde_json::json!({ "epoch": epoch, "optim_step": opt.map_or(0, |o| o.step) });
        if let serde_json::Value::Object(m) = extra {
            for (k, v) in m {
                meta[k] = v;
            }
        }
        write_archive(path, self.header("net2d", module_arch_hash(net), meta), &module_tensors(net, opt))
    }

    /// Trains both stage-one peers on fold `fold`. With `resume`, continues
    /// after the last completed epoch recorded in `net1.ckpt`.
    pub fn train_stage1(&self, fold: usize, resume: bool) -> Result<()> {
        let plan = self.folds()?;
        let train = self.load_many(&plan.training(fold)?)?;
        let val = self.load_many(plan.validation(fold)?)?;
        let unl = if self.cfg.stage1.lambda != 0.0 { self.load_many(&plan.unlabeled)? } else { Vec::new() };
        let dir = self.fold_dir(fold).join("stage1");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let seed = self.cfg.seed.wrapping_add(1000 * fold as u64);
        let mut trainer = new_stage1(&self.cfg, seed);
        let mut start = 0;
        if resume && dir.join("net1.ckpt").exists() {
            let a1 = self.load_checked(&mut trainer.net1, &dir.join("net1.ckpt"), "net2d")?;
            let a2 = self.load_checked(&mut trainer.net2, &dir.join("net2.ckpt"), "net2d")?;
            load_optimizer(&mut trainer.opt1, &a1);
            load_optimizer(&mut trainer.opt2, &a2);
            start = a1.header.meta["epoch"].as_u64().unwrap_or(0) as usize + 1;
            info!("resuming stage one of fold {fold} at epoch {start}");
        }
        let mut csv = MetricsCsv::open(&dir.join("metrics.csv"), &["epoch", "lr", "l_s", "l_cps", "l_2d", "val_dsc", "config_hash"], start)?;
        let mut best = f64::NEG_INFINITY;
        let hash = self.cfg.hash();
        let lab: Vec<&Preprocessed> = train.iter().collect();
        let unl: Vec<&Preprocessed> = unl.iter().collect();
        let val: Vec<&Preprocessed> = val.iter().collect();
        train_stage1(&self.cfg, trainer, start, &lab, &unl, &val, seed.wrapping_add(start as u64), &mut |e, t: &CpsTrainer<f32>| {
            let lr = self.cfg.stage1.schedule.lr_at(e.epoch);
            csv.row(&[e.epoch.to_string(), lr.to_string(), e.l_s.to_string(), e.l_cps.to_string(), e.l_2d.to_string(), opt_str(e.val_dsc), hash.clone()])?;
            let none = serde_json::Value::Null;
            self.write_net2d(&dir.join("net1.ckpt"), &t.net1, Some(&t.opt1), e.epoch, none.clone())?;
            self.write_net2d(&dir.join("net2.ckpt"), &t.net2, Some(&t.opt2), e.epoch, none)?;
            if let Some(d) = e.val_dsc.filter(|&d| d > best) {
                best = d;
                let meta = serde_json::json!({ "val_dsc": d });
                self.write_net2d(&dir.join("best_net1.ckpt"), &t.net1, None, e.epoch, meta.clone())?;
                self.write_net2d(&dir.join("best_net2.ckpt"), &t.net2, None, e.epoch, meta)?;
            }
            Ok(())
        })?;
        Ok(())
    }

    fn load_peers(&self, fold: usize, pick: Stage1Pick) -> Result<(Net2d<f32>, Net2d<f32>, String)> {
        let dir = self.fold_dir(fold).join("stage1");
        let mut t = new_stage1(&self.cfg, 0);
        let [a, b] = pick.files();
        self.load_checked(&mut t.net1, &dir.join(a), "net2d")?;
        self.load_checked(&mut t.net2, &dir.join(b), "net2d")?;
        let hash = format!("{}{}", file_hash(&dir.join(a))?, file_hash(&dir.join(b))?);
        Ok((t.net1, t.net2, hash))
    }

    // -------------------------------------------------------- cache

    /// Runs the stage-one peers over every labeled subject of the plan and
    /// stores coarse probabilities plus features under `fold<k>/cache/`.
    pub fn cache_stage1(&self, fold: usize, pick: Stage1Pick) -> Result<usize> {
        let plan = self.folds()?;
        let (n1, n2, s1hash) = self.load_peers(fold, pick)?;
        let dir = self.fold_dir(fold).join("cache");
        let mut n = 0;
        for id in plan.folds.concat() {
            let p = self.load_prepared(&id)?;
            let c = stage1_volume(&n1, &n2, &p.volume, self.cfg.stage1.schedule.batch_size)?;
            let meta = serde_json::json!({ "subject": id, "stage1_hash": s1hash, "stage1_files": pick.files() });
            let tensors = vec![("coarse".to_string(), c.coarse), ("features".to_string(), c.features)];
            write_archive(&dir.join(format!("{id}.ckpt")), self.header("stage1-cache", String::new(), meta), &tensors)?;
            n += 1;
        }
        info!("cached {n} subjects for fold {fold}");
        Ok(n)
    }

    fn load_cache(&self, fold: usize, id: &str) -> Result<(Stage1Cache, String, Vec<String>)> {
        let path = self.fold_dir(fold).join("cache").join(format!("{id}.ckpt"));
        if !path.exists() {
            return Err(Error::Validation(format!("missing stage-one cache for {id} in fold {fold}; run cache-stage1 first")));
        }
        let a = self.read_checked(&path, "stage1-cache")?;
        let get = |n: &str| a.get(n).cloned().ok_or_else(|| Error::Checkpoint(format!("{}: no {n} tensor", path.display())));
        let hash = a.header.meta["stage1_hash"].as_str().unwrap_or_default().to_string();
        let files = serde_json::from_value(a.header.meta["stage1_files"].clone()).unwrap_or_default();
        Ok((Stage1Cache { coarse: get("coarse")?, features: get("features")? }, hash, files))
    }

    // -------------------------------------------------------- stage two

    fn write_stage2(&self, path: &Path, t: &Stage2Trainer<f32>, with_opt: bool, epoch: usize, s1: &(String, Vec<String>)) -> Result<()> {
        let meta = serde_json::json!({ "epoch": epoch, "optim_step": t.opt.step, "stage1_hash": s1.0, "stage1_files": s1.1 });
        let tensors = module_tensors(&t.net, with_opt.then_some(&t.opt));
        write_archive(path, self.header("stage2", module_arch_hash(&t.net), meta), &tensors)
    }

    /// Trains the stage-two network of fold `fold` from its stage-one cache.
    pub fn train_stage2(&self, fold: usize, resume: bool) -> Result<()> {
        let plan = self.folds()?;
        let train_ids = plan.training(fold)?;
        let val_ids = plan.validation(fold)?.to_vec();
        let s1dir = self.fold_dir(fold).join("stage1");
        let mut s1: Option<(String, Vec<String>)> = None;
        let mut load = |ids: &[String]| -> Result<Vec<(Preprocessed, Stage1Cache)>> {
            ids.iter()
                .map(|id| {
                    let (c, h, files) = self.load_cache(fold, id)?;
                    match &s1 {
                        Some((h0, _)) if *h0 != h => {
                            return Err(Error::Checkpoint(format!("cache for {id} comes from different stage-one checkpoints")))
                        }
                        None => {
                            let f: Vec<PathBuf> = files.iter().map(|f| s1dir.join(f)).collect();
                            let now = f.iter().map(|p| file_hash(p)).collect::<Result<Vec<_>>>()?.concat();
                            if now != h {
                                return Err(Error::Checkpoint(format!("stage-one checkpoints changed since the cache was built; run cache-stage1 for fold {fold}")));
                            }
                            s1 = Some((h, files));
                        }
                        _ => {}
                    }
                    Ok((self.load_prepared(id)?, c))
                })
                .collect()
        };
        let train = load(&train_ids)?;
        let val = if self.cfg.stage2.val_every > 0 { load(&val_ids)? } else { Vec::new() };
        let s1 = s1.ok_or_else(|| Error::Validation("no training subjects".into()))?;
        let dir = self.fold_dir(fold).join("stage2");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let seed = self.cfg.seed.wrapping_add(1000 * fold as u64 + 500);
        let mut trainer = new_stage2(&self.cfg, seed)?;
        let mut start = 0;
        if resume && dir.join("stage2.ckpt").exists() {
            let a = self.load_checked(&mut trainer.net, &dir.join("stage2.ckpt"), "stage2")?;
            load_optimizer(&mut trainer.opt, &a);
            start = a.header.meta["epoch"].as_u64().unwrap_or(0) as usize + 1;
        }
        let mut csv = MetricsCsv::open(&dir.join("metrics.csv"), &["epoch", "lr", "l_ce", "l_dc", "l_3d", "val_dsc", "config_hash"], start)?;
        let hash = self.cfg.hash();
        let mut best = f64::NEG_INFINITY;
        let tr: Vec<(&Preprocessed, &Stage1Cache)> = train.iter().map(|(p, c)| (p, c)).collect();
        let va: Vec<(&Preprocessed, &Stage1Cache)> = val.iter().map(|(p, c)| (p, c)).collect();
        train_stage2(&self.cfg, trainer, start, &tr, &va, seed.wrapping_add(start as u64), &mut |e, t| {
            let lr = self.cfg.stage2.schedule.lr_at(e.epoch);
            csv.row(&[e.epoch.to_string(), lr.to_string(), e.l_ce.to_string(), e.l_dc.to_string(), e.l_3d.to_string(), opt_str(e.val_dsc), hash.clone()])?;
            self.write_stage2(&dir.join("stage2.ckpt"), t, true, e.epoch, &s1)?;
            if let Some(d) = e.val_dsc.filter(|&d| d > best) {
                best = d;
                self.write_stage2(&dir.join("best_stage2.ckpt"), t, false, e.epoch, &s1)?;
            }
            Ok(())
        })?;
        Ok(())
    }

    /// Loads the three networks of a fold, using the stage-one checkpoints
    /// the stage-two network was trained against.
    pub fn load_fold(&self, fold: usize, best: bool) -> Result<FoldModel> {
        let dir = self.fold_dir(fold);
        let mut s2 = Stage2Net::new(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0), &self.cfg)?;
        let name = if best { "best_stage2.ckpt" } else { "stage2.ckpt" };
        let a = self.load_checked(&mut s2, &dir.join("stage2").join(name), "stage2")?;
        let files: Vec<String> = serde_json::from_value(a.header.meta["stage1_files"].clone()).unwrap_or_default();
        let pick = if files.first().is_some_and(|f| f.starts_with("best_")) { Stage1Pick::Best } else { Stage1Pick::Last };
        let (net1, net2, hash) = self.load_peers(fold, pick)?;
        if a.header.meta["stage1_hash"].as_str() != Some(hash.as_str()) {
            return Err(Error::Checkpoint(format!("fold {fold}: stage-two checkpoint was trained on different stage-one checkpoints")));
        }
        Ok(FoldModel { net1, net2, stage2: s2 })
    }

    // -------------------------------------------------------- inference

    /// Segments raw volumes with the fold ensemble and writes
    /// `pred/<id>/labels.nii.gz` in the input geometry.
    pub fn infer(&self, inputs: &[(String, PathBuf)], folds: &[usize], opts: &InferOptions) -> Result<Vec<PathBuf>> {
        let models: Vec<FoldModel> = folds.iter().map(|&f| self.load_fold(f, opts.best)).collect::<Result<_>>()?;
        let dest = opts.output.clone().unwrap_or_else(|| self.out.join("pred"));
        let mut written = Vec::new();
        for (id, path) in inputs {
            let (data, dims, spacing, hdr) = read_nifti(path)?;
            let raw = Volume::new(data, dims, spacing)?;
            let prep = preprocess(id, &raw, None, &self.cfg.preprocess)?;
            let (mean, labels) = predict_prepared_probs(&self.cfg, &models, &prep.volume)?;
            let pred = LabelMap::new(labels, prep.volume.dims, prep.volume.spacing, self.cfg.num_classes)?;
            let out = invert_labels(&pred, &prep.provenance)?;
            let dir = dest.join(id);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let lp = dir.join("labels.nii.gz");
            write_labels(&lp, &out, Some(&hdr))?;
            if opts.save_probs {
                let n = pred.data.len();
                for (c, name) in self.cfg.class_names.iter().enumerate() {
                    let ch = invert_channel(&mean.data()[c * n..(c + 1) * n], prep.volume.dims, &prep.provenance)?;
                    write_volume(&dir.join(format!("prob_{name}.nii.gz")), &ch, Some(&hdr))?;
                }
            }
            if opts.qc_png {
                write_qc_png(&dir.join("qc.png"), &raw, &out)?;
            }
            info!("{id}: wrote {}", lp.display());
            written.push(lp);
        }
        Ok(written)
    }

    // -------------------------------------------------------- evaluation

    /// Scores `pred_dir/<id>/labels.nii.gz` against the manifest masks.
    pub fn evaluate(&self, pred_dir: &Path, manifest: &Manifest, root: &Path, ids: Option<&[String]>) -> Result<Report> {
        let entries: Vec<_> = match ids {
            Some(ids) => ids
                .iter()
                .map(|id| manifest.find(id).ok_or_else(|| Error::Validation(format!("{id} is not in the manifest"))))
                .collect::<Result<_>>()?,
            None => manifest.labeled.iter().collect(),
        };
        let mut scores = Vec::new();
        for e in entries {
            let mask = e.mask.as_ref().ok_or_else(|| Error::Validation(format!("{} has no ground truth", e.id)))?;
            let p = pred_dir.join(&e.id).join("labels.nii.gz");
            if !p.exists() {
                return Err(Error::Validation(format!("no prediction for {} in {}", e.id, pred_dir.display())));
            }
            let gt = load_labels(&resolve(root, mask), self.cfg.num_classes, None)?;
            let pred = load_labels(&p, self.cfg.num_classes, Some(gt.dims))?;
            scores.push(score_subject(&e.id, &pred, &gt, self.cfg.eval.exclude_absent)?);
        }
        Ok(build_report(&scores, &self.cfg.class_names))
    }
}

/// Combines per-subject score files (for example one per fold) into one report.
pub fn combine_reports(files: &[PathBuf], class_names: &[String]) -> Result<Report> {
    let mut all: Vec<SubjectScores> = Vec::new();
    for f in files {
        all.extend(read_scores_csv(f, class_names)?);
    }
    Ok(build_report(&all, class_names))
}

#[derive(Clone, Debug, Default)]
pub struct InferOptions {
    pub output: Option<PathBuf>,
    pub save_probs: bool,
    pub qc_png: bool,
    /// Use the best-validation stage-two checkpoint instead of the last.
    pub best: bool,
}

fn opt_str(v: Option<f64>) -> String {
    v.map(|d| d.to_string()).unwrap_or_default()
}

/// Per-epoch CSV that survives resumption: rows from earlier epochs are
/// kept, later ones dropped, then new rows are appended and flushed.
struct MetricsCsv {
    w: csv::Writer<std::fs::File>,
    path: PathBuf,
}

impl MetricsCsv {
    fn open(path: &Path, header: &[&str], keep_before: usize) -> Result<Self> {
        let err = |e: csv::Error| Error::Runtime(format!("{}: {e}", path.display()));
        let mut kept = Vec::new();
        if keep_before > 0 && path.exists() {
            let mut r = csv::Reader::from_path(path).map_err(err)?;
            for rec in r.records() {
                let rec = rec.map_err(err)?;
                if rec.get(0).and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e < keep_before) {
                    kept.push(rec);
                }
            }
        }
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(header).map_err(err)?;
        for r in &kept {
            w.write_record(r).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(MetricsCsv { w, path: path.to_path_buf() })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        self.w.write_record(fields).map_err(|e| Error::Runtime(format!("{}: {e}", self.path.display())))?;
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

const PALETTE: [[u8; 3]; 8] = [[230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230]];

/// Middle slice (along the first axis) with labels blended over the image.
pub fn write_qc_png(path: &Path, v: &Volume, m: &LabelMap) -> Result<()> {
    let [nz, ny, nx] = v.dims;
    let z = nz / 2;
    let sl = &v.data[z * ny * nx..(z + 1) * ny * nx];
    let (lo, hi) = sl.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = (hi - lo).max(1e-6);
    let mut rgb = Vec::with_capacity(ny * nx * 3);
    for (i, &x) in sl.iter().enumerate() {
        let g = ((x - lo) / span * 255.0) as u8;
        let l = m.data[z * ny * nx + i];
        if l == 0 {
            rgb.extend_from_slice(&[g, g, g]);
        } else {
            let c = PALETTE[(l as usize - 1) % PALETTE.len()];
            rgb.extend(c.iter().map(|&c| ((g as u16 + c as u16) / 2) as u8));
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), nx as u32, ny as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| Error::Runtime(format!("{}: {e}", path.display())))?;
    w.write_image_data(&rgb).map_err(|e| Error::Runtime(format!("{}: {e}", path.display())))
}
