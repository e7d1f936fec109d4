//! Command-line front end: config files, subcommands, manifests.

mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub use config::{ExperimentConfig, OptimizerChoice};

use crate::data::{load_dataset, load_ground_truth, make_synthetic_domains, read_pgm, write_pgm, BinaryMask, Dataset, Page, Role};
use crate::error::{Error, Result};
use crate::metrics::{confusion, Confusion};
use crate::models::Model;
use crate::params::CHECKPOINT_MAGIC;
use crate::similarity::{compare, domain_histogram, run_autobindann, Decision};
use crate::trainer::{binarize, train_sae};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const THREADS_ENV: &str = "BINADAPT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "binadapt", version, about = "Domain-adaptive document binarization")]
struct Cli {
    /// key=value experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the plain auto-encoder on the labeled source.
    TrainSae {
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Write probability and binarized maps for one page.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Compare source and target prediction histograms.
    Similarity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Train, gate, optionally adapt, and binarize the target.
    Run {
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Write the synthetic source, target-near and target-far datasets.
    Synth,
}

/// Run record; everything except `timestamp` is reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub checkpoint_format: String,
    pub config_hash: String,
    pub config: String,
    pub seed: u64,
    pub decision: Option<Decision>,
    pub outputs: Vec<String>,
    pub timestamp: u64,
}

/// Collects output files below one directory.
struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Outputs { dir: dir.to_path_buf(), written: Vec::new() })
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.written.push(rel.to_string());
        Ok(())
    }

    fn finish(mut self, command: &str, cfg: &ExperimentConfig, decision: Option<Decision>) -> Result<Manifest> {
        let manifest = Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            checkpoint_format: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            config_hash: cfg.hash(),
            config: cfg.canonical(),
            seed: cfg.seed,
            decision,
            outputs: std::mem::take(&mut self.written),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        self.write(MANIFEST_FILE, json.as_bytes())?;
        Ok(manifest)
    }
}

fn read_page(path: &Path) -> Result<Page> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_pgm(&bytes)
}

fn load_model(path: &Path) -> Result<(Model, Option<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Model::from_checkpoint(&bytes)
}

fn load_source(cfg: &ExperimentConfig) -> Result<Dataset> {
    load_dataset(cfg.require_source()?, Role::Source, cfg.validation_fraction, cfg.seed)
}

fn load_target(cfg: &ExperimentConfig) -> Result<Dataset> {
    load_dataset(cfg.require_target()?, Role::Target, 0.0, cfg.seed)
}

fn mask_pgm(mask: &BinaryMask) -> Vec<u8> {
    write_pgm(&mask.to_page())
}

/// Trains the SAE; writes `sae.ckpt` and `history.csv`.
pub fn cmd_train_sae(cfg: &ExperimentConfig) -> Result<Manifest> {
    let source = load_source(cfg)?;
    let sae = train_sae(&source, &cfg.sae_config(), &cfg.train_config())?;
    let mut out = Outputs::new(&cfg.out_dir)?;
    out.write("sae.ckpt", &sae.model.to_checkpoint(Some(sae.threshold)))?;
    out.write("history.csv", sae.history_csv().as_bytes())?;
    out.finish("train-sae", cfg, None)
}

/// Writes `<stem>_prob.pgm` and `<stem>_bin.pgm` using the stored threshold.
pub fn cmd_predict(cfg: &ExperimentConfig, checkpoint: &Path, input: &Path) -> Result<Manifest> {
    let (model, threshold) = load_model(checkpoint)?;
    let threshold =
        threshold.ok_or_else(|| Error::Checkpoint(format!("{} stores no threshold", checkpoint.display())))?;
    let page = read_page(input)?;
    let map = model.predict_prob_map(&page)?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("page");
    let mut out = Outputs::new(&cfg.out_dir)?;
    out.write(&format!("{stem}_prob.pgm"), &write_pgm(&map.to_page()))?;
    out.write(&format!("{stem}_bin.pgm"), &mask_pgm(&binarize(&map, threshold)))?;
    out.finish("predict", cfg, None)
}

/// Source histogram from the validation split, target histogram from all
/// target pages; writes `report.json` and both histogram CSVs.
pub fn cmd_similarity(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Manifest> {
    let (model, _) = load_model(checkpoint)?;
    let source = load_source(cfg)?;
    let target = load_target(cfg)?;
    let validation: Vec<&Page> = source.validation_indices().iter().map(|&i| &source.pages[i]).collect();
    let hs = domain_histogram(&model, &validation, cfg.h_prec)?;
    let ht = domain_histogram(&model, &target.pages.iter().collect::<Vec<_>>(), cfg.h_prec)?;
    let report = compare(&hs, &ht, cfg.rho_th)?;
    let mut out = Outputs::new(&cfg.out_dir)?;
    out.write("report.json", report.to_json().as_bytes())?;
    out.write("hist_source.csv", hs.to_csv().as_bytes())?;
    out.write("hist_target.csv", ht.to_csv().as_bytes())?;
    out.finish("similarity", cfg, Some(report.decision))
}

/// Per-page and pooled scores, for evaluation only.
fn summary_csv(names: &[String], masks: &[BinaryMask], truth: &[BinaryMask]) -> Result<String> {
    let mut rows = String::from("page,f1,precision,recall\n");
    let mut total = Confusion::default();
    for ((name, mask), gt) in names.iter().zip(masks).zip(truth) {
        let c = confusion(mask, gt)?;
        total += c;
        rows.push_str(&format!("{name},{:.6},{:.6},{:.6}\n", c.f1(), c.precision(), c.recall()));
    }
    rows.push_str(&format!("all,{:.6},{:.6},{:.6}\n", total.f1(), total.precision(), total.recall()));
    Ok(rows)
}

/// The full pipeline. Target ground truth under `<target_dir>/gt` is read
/// only after all masks exist, to write `summary.csv`.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<Manifest> {
    let source = load_source(cfg)?;
    let target = load_target(cfg)?;
    let outcome = run_autobindann(&source, &target, &cfg.auto_config())?;
    let mut out = Outputs::new(&cfg.out_dir)?;
    out.write("report.json", outcome.report.to_json().as_bytes())?;
    out.write("hist_source.csv", outcome.source_histogram.to_csv().as_bytes())?;
    out.write("hist_target.csv", outcome.target_histogram.to_csv().as_bytes())?;
    out.write("sae.ckpt", &outcome.sae.model.to_checkpoint(Some(outcome.sae.threshold)))?;
    out.write("history_sae.csv", outcome.sae.history_csv().as_bytes())?;
    if let Some(dann) = &outcome.adapted {
        out.write("bindann.ckpt", &dann.model.to_checkpoint(Some(dann.threshold)))?;
        out.write("history_bindann.csv", dann.history_csv().as_bytes())?;
    }
    for (name, mask) in target.names.iter().zip(&outcome.masks) {
        out.write(&format!("masks/{name}.pgm"), &mask_pgm(mask))?;
    }
    let gt_dir = cfg.require_target()?.join("gt");
    if gt_dir.is_dir() {
        let truth = load_ground_truth(&gt_dir, &target.names)?;
        out.write("summary.csv", summary_csv(&target.names, &outcome.masks, &truth)?.as_bytes())?;
    }
    out.finish("run", cfg, Some(outcome.report.decision))
}

/// Writes `source/`, `target-near/` and `target-far/`, each with `images/`
/// and `gt/` (target masks are for evaluation only).
pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<Manifest> {
    let d = make_synthetic_domains(cfg.seed);
    let mut out = Outputs::new(&cfg.out_dir)?;
    let sets: [(&str, &Dataset, &[BinaryMask]); 3] = [
        ("source", &d.source, &d.source.ground_truth),
        ("target-near", &d.near, &d.near_truth),
        ("target-far", &d.far, &d.far_truth),
    ];
    for (dir, ds, truth) in sets {
        for ((name, page), gt) in ds.names.iter().zip(&ds.pages).zip(truth) {
            out.write(&format!("{dir}/images/{name}.pgm"), &write_pgm(page))?;
            out.write(&format!("{dir}/gt/{name}.pgm"), &mask_pgm(gt))?;
        }
    }
    out.finish("synth", cfg, None)
}

/// Exit code and stable category name for an error.
pub fn error_category(e: &Error) -> (i32, &'static str) {
    match e {
        Error::Config(_) => (2, "config"),
        Error::Io { .. } => (3, "io"),
        Error::Pgm { .. } | Error::Dataset(_) | Error::Checkpoint(_) => (1, "data"),
        Error::NonFinite(_) => (1, "numeric"),
        Error::Degenerate(_) => (1, "degenerate"),
        Error::InvalidArgument(_) => (1, "invalid-argument"),
        Error::Shape { .. } | Error::UnboundInput(_) | Error::MissingParameter(_) | Error::Backward(_) => (1, "model"),
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a thread count, got `{raw}`")))?;
    if n > 0 {
        // A pool may already exist when called twice in one process; the
        // first setting then stays in force.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<Manifest> {
    configure_threads()?;
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    let override_dirs = |cfg: &mut ExperimentConfig, source: Option<PathBuf>, target: Option<PathBuf>| {
        if source.is_some() {
            cfg.source_dir = source;
        }
        if target.is_some() {
            cfg.target_dir = target;
        }
    };
    match cli.command {
        Command::TrainSae { source } => {
            override_dirs(&mut cfg, source, None);
            cmd_train_sae(&cfg)
        }
        Command::Predict { checkpoint, input } => cmd_predict(&cfg, &checkpoint, &input),
        Command::Similarity { checkpoint, source, target } => {
            override_dirs(&mut cfg, source, target);
            cmd_similarity(&cfg, &checkpoint)
        }
        Command::Run { source, target } => {
            override_dirs(&mut cfg, source, target);
            cmd_run(&cfg)
        }
        Command::Synth => cmd_synth(&cfg),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
/// Failures print one `error category=<name> exit=<code>: <message>` line.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error category=usage exit=2: {first}");
            return 2;
        }
    };
    let command = format!("{:?}", cli.command).split([' ', '{']).next().unwrap_or("").to_lowercase();
    match dispatch(cli) {
        Ok(m) => {
            let decision = m.decision.map(|d| format!(" decision={d}")).unwrap_or_default();
            println!("{command}: ok{decision} outputs={} config_hash={}", m.outputs.len(), m.config_hash);
            0
        }
        Err(e) => {
            let (code, category) = error_category(&e);
            let message = e.to_string().replace('\n', " ");
            eprintln!("error category={category} exit={code}: {message}");
            code
        }
    }
}
