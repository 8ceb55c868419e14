use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sshsnet::pipeline::Manifest;
use sshsnet::workflow::{combine_reports, InferOptions, Stage1Pick, Workspace};
use sshsnet::{Error, ExperimentConfig, Result};

#[derive(Parser, Debug)]
#[command(name = "sshsnet", version, about = "Two-stage semi-supervised spine MR segmentation")]
struct Cli {
    /// Experiment config (JSON or YAML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in config used when --config is absent.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Full)]
    preset: Preset,
    /// Output directory; defaults to paths.output_dir from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset manifest; defaults to paths.manifest from the config.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Full,
    Phantom,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write the selected config to a file for editing.
    InitConfig { path: PathBuf },
    /// Generate a synthetic phantom dataset with a manifest.
    Phantom {
        dir: PathBuf,
        #[arg(long, default_value_t = 8)]
        labeled: usize,
        #[arg(long, default_value_t = 2)]
        unlabeled: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Resample, crop, normalise and fit every manifest subject.
    Preprocess,
    /// Split the labeled subjects into cross-validation folds.
    MakeFolds,
    /// Train both stage-one peers of a fold.
    TrainStage1 {
        #[arg(long)]
        fold: usize,
        #[arg(long)]
        resume: bool,
    },
    /// Store stage-one outputs for every labeled subject of a fold.
    CacheStage1 {
        #[arg(long)]
        fold: usize,
        /// Use the best-validation peers instead of the last epoch.
        #[arg(long)]
        best: bool,
    },
    /// Train the stage-two network of a fold from its cache.
    TrainStage2 {
        #[arg(long)]
        fold: usize,
        #[arg(long)]
        resume: bool,
    },
    /// Segment volumes with the ensemble of the given folds.
    Infer {
        /// Input images; with none, every manifest subject is segmented.
        inputs: Vec<PathBuf>,
        /// Folds to ensemble; all folds when omitted.
        #[arg(long, value_delimiter = ',')]
        folds: Vec<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        save_probs: bool,
        #[arg(long)]
        qc_png: bool,
        #[arg(long)]
        best: bool,
    },
    /// Score predictions against manifest masks.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        /// Restrict to these subject ids.
        #[arg(long, value_delimiter = ',')]
        subjects: Vec<String>,
        /// Validation subjects of this fold only.
        #[arg(long, conflicts_with = "subjects")]
        fold: Option<usize>,
        #[arg(long, default_value = "scores.csv")]
        csv: PathBuf,
    },
    /// Merge score files into one per-structure table.
    Report {
        files: Vec<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    match &cli.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(match cli.preset {
            Preset::Full => ExperimentConfig::full(),
            Preset::Phantom => ExperimentConfig::phantom(),
        }),
    }
}

fn workspace(cli: &Cli, cfg: ExperimentConfig) -> Result<Workspace> {
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.paths.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set paths.output_dir".into()))?;
    Workspace::open(cfg, &out)
}

fn manifest(cli: &Cli, ws: &Workspace) -> Result<(Manifest, PathBuf)> {
    let path = cli
        .manifest
        .clone()
        .or_else(|| ws.cfg.paths.manifest.clone())
        .ok_or_else(|| Error::Config("no manifest: pass --manifest or set paths.manifest".into()))?;
    let m = Manifest::load(&path)?;
    let root = ws.data_root(&path);
    Ok((m, root))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.cmd {
        Cmd::InitConfig { path } => cfg.save(path)?,
        Cmd::Phantom { dir, labeled, unlabeled, seed } => {
            let m = sshsnet::phantom::write_dataset(dir, *labeled, *unlabeled, *seed)?;
            println!("wrote {} labeled and {} unlabeled phantoms to {}", m.labeled.len(), m.unlabeled.len(), dir.display());
        }
        Cmd::Preprocess => {
            let ws = workspace(&cli, cfg)?;
            let (m, root) = manifest(&cli, &ws)?;
            println!("preprocessed {} subjects", ws.preprocess(&m, &root)?);
        }
        Cmd::MakeFolds => {
            let ws = workspace(&cli, cfg)?;
            let (m, _) = manifest(&cli, &ws)?;
            let plan = ws.make_folds(&m)?;
            for (i, f) in plan.folds.iter().enumerate() {
                println!("fold {i}: {}", f.join(" "));
            }
        }
        Cmd::TrainStage1 { fold, resume } => workspace(&cli, cfg)?.train_stage1(*fold, *resume)?,
        Cmd::CacheStage1 { fold, best } => {
            let pick = if *best { Stage1Pick::Best } else { Stage1Pick::Last };
            workspace(&cli, cfg)?.cache_stage1(*fold, pick)?;
        }
        Cmd::TrainStage2 { fold, resume } => workspace(&cli, cfg)?.train_stage2(*fold, *resume)?,
        Cmd::Infer { inputs, folds, output, save_probs, qc_png, best } => {
            let ws = workspace(&cli, cfg)?;
            let items: Vec<(String, PathBuf)> = if inputs.is_empty() {
                let (m, root) = manifest(&cli, &ws)?;
                m.labeled.iter().chain(&m.unlabeled).map(|e| (e.id.clone(), sshsnet::pipeline::resolve(&root, &e.image))).collect()
            } else {
                inputs.iter().map(|p| (subject_id(p), p.clone())).collect()
            };
            let folds = if folds.is_empty() { (0..ws.cfg.folds).collect() } else { folds.clone() };
            let opts = InferOptions { output: output.clone(), save_probs: *save_probs, qc_png: *qc_png, best: *best };
            for p in ws.infer(&items, &folds, &opts)? {
                println!("{}", p.display());
            }
        }
        Cmd::Evaluate { pred, subjects, fold, csv } => {
            let ws = workspace(&cli, cfg)?;
            let (m, root) = manifest(&cli, &ws)?;
            let ids: Option<Vec<String>> = match fold {
                Some(f) => Some(ws.folds()?.validation(*f)?.to_vec()),
                None if !subjects.is_empty() => Some(subjects.clone()),
                None => None,
            };
            let r = ws.evaluate(pred, &m, &root, ids.as_deref())?;
            r.write_csv(csv)?;
            print!("{}", r.table());
        }
        Cmd::Report { files, csv } => {
            if files.is_empty() {
                return Err(Error::Validation("report needs at least one score file".into()));
            }
            let r = combine_reports(files, &cfg.class_names)?;
            if let Some(p) = csv {
                r.write_csv(p)?;
            }
            print!("{}", r.table());
        }
    }
    Ok(())
}

/// `.../case7/image.nii.gz` -> `case7`; `.../case7.nii.gz` -> `case7`.
fn subject_id(p: &Path) -> String {
    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("subject");
    let stem = name.trim_end_matches(".gz").trim_end_matches(".nii");
    if stem == "image" {
        if let Some(parent) = p.parent().and_then(|d| d.file_name()).and_then(|n| n.to_str()) {
            return parent.to_string();
        }
    }
    stem.to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
