//! `snlab gradcheck|train|finalize|eval [--config PATH] [--out DIR] [--seed N] [--force] [key=value ...]`
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or I/O error,
//! 3 training divergence.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SnError};
use crate::gradcheck::{run_suite, GradCheckConfig};
use crate::trainer::{
    evaluate, finalize, finetune_hard, make_dataset, train, DatasetSpec, EpochRecord, FinalizeMethod, LayerRatio,
    ModelSpec, NormKind, ToyModel, TrainConfig, TrainReport,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "snlab", version, about = "Switchable Normalization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long, default_value = "snlab-out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
    /// `key=value` overrides applied after the config file.
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Finite-difference check of every layer's backward pass.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Perturb analytic gradients so the check must fail.
        #[arg(long)]
        corrupt_grad: bool,
    },
    /// Train a model and write per-epoch reports.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Recompute frozen BN statistics of a trained model.
    Finalize {
        #[command(flatten)]
        common: Common,
        /// Model file; defaults to `<out>/model.json`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// batch-average or moving-average.
        #[arg(long)]
        method: Option<String>,
        /// Number of minibatches for batch average.
        #[arg(long)]
        batches: Option<usize>,
    },
    /// Evaluate a model on the eval split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model file; defaults to `<out>/model.json`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

/// Everything needed to rebuild the data and continue working with a model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedModel {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub model: ToyModel,
}

/// Parsed experiment settings.
#[derive(Debug, Clone)]
#[derive(Default)]
pub struct Experiment {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub batch_sweep: Vec<usize>,
    pub finetune_hard_epochs: usize,
    pub gradcheck: GradCheckConfig,
}


/// Reads `key = value` lines. `#` starts a comment; blank lines are ignored.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| SnError::Argument(format!("config line {}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| SnError::Argument(format!("{key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(SnError::Argument(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn optional(key: &str, v: &str) -> Result<Option<usize>> {
    if v == "none" || v == "0" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

impl Experiment {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (d, m, t, g) = (&mut self.dataset, &mut self.model, &mut self.train, &mut self.gradcheck);
        match key {
            "seed" => {
                let s = num(key, v)?;
                t.seed = s;
                d.seed = s;
                g.seed = s;
            }
            "data_seed" => d.seed = num(key, v)?,
            "classes" => d.classes = num(key, v)?,
            "channels" => d.channels = num(key, v)?,
            "size" => d.size = num(key, v)?,
            "train_samples" => d.train = num(key, v)?,
            "eval_samples" => d.eval = num(key, v)?,
            "noise" => d.noise = num(key, v)?,
            "bumps" => d.bumps_per_class = num(key, v)?,
            "brightness" => d.brightness = num(key, v)?,
            "contrast" => d.contrast = num(key, v)?,
            "norm" => m.norm = NormKind::parse(v)?,
            "width" => m.width = num(key, v)?,
            "blocks" => m.blocks = num(key, v)?,
            "eps" => m.eps = num(key, v)?,
            "stat_momentum" => m.momentum = num(key, v)?,
            "batch" => t.batch_per_partition = num(key, v)?,
            "partitions" => t.partitions = num(key, v)?,
            "sync" => t.sync = flag(key, v)?,
            "epochs" => t.epochs = num(key, v)?,
            "lr" => t.lr = num(key, v)?,
            "lr_ref_batch" => t.lr_ref_batch = optional(key, v)?,
            "decay_epochs" => t.decay_epochs = list(key, v)?,
            "decay_factor" => t.decay_factor = num(key, v)?,
            "momentum" => t.sgd.momentum = num(key, v)?,
            "weight_decay" => t.sgd.weight_decay = num(key, v)?,
            "decay_lambda" => t.sgd.decay_lambda = flag(key, v)?,
            "freeze_lambda" => t.sgd.freeze_lambda = flag(key, v)?,
            "finalize" => t.finalize = FinalizeMethod::parse(v)?,
            "finalize_batches" => t.finalize_batches = optional(key, v)?,
            "finalize_batch_size" => t.finalize_batch_size = optional(key, v)?,
            "finalize_pooled" => t.finalize_pooled = flag(key, v)?,
            "batch_sweep" => self.batch_sweep = list(key, v)?,
            "finetune_hard_epochs" => self.finetune_hard_epochs = num(key, v)?,
            "gradcheck_step" => g.step = num(key, v)?,
            "gradcheck_tolerance" => g.tolerance = num(key, v)?,
            "gradcheck_samples" => g.input_samples = num(key, v)?,
            "gradcheck_partitions" => g.partitions = num(key, v)?,
            _ => return Err(SnError::Argument(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies the config file, then the overrides, then `--seed`.
    fn apply(&mut self, c: &Common) -> Result<()> {
        let e = self;
        if let Some(path) = &c.config {
            let text = fs::read_to_string(path)
                .map_err(|err| SnError::Argument(format!("cannot read config {}: {err}", path.display())))?;
            for (k, v) in parse_config_text(&text)? {
                e.set(&k, &v)?;
            }
        }
        for o in &c.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| SnError::Argument(format!("override {o:?} is not key=value")))?;
            e.set(k.trim(), v.trim())?;
        }
        if let Some(s) = c.seed {
            e.set("seed", &s.to_string())?;
        }
        Ok(())
    }

    fn from_common(c: &Common) -> Result<Self> {
        let mut e = Experiment::default();
        e.apply(c)?;
        Ok(e)
    }
}

/// Output directory guard: refuses to replace files unless forced.
struct OutDir {
    root: PathBuf,
    force: bool,
}

impl OutDir {
    fn new(root: &Path, force: bool) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            force,
        })
    }

    fn sub(&self, name: &str) -> Result<Self> {
        Self::new(&self.root.join(name), self.force)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn check(&self, names: &[&str]) -> Result<()> {
        if self.force {
            return Ok(());
        }
        for n in names {
            let p = self.path(n);
            if p.exists() {
                return Err(SnError::Argument(format!(
                    "{} already exists; pass --force to overwrite",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.path(name), contents)?;
        Ok(())
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, &s)
    }

    fn write_metadata(&self, command: &str) -> Result<()> {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let meta = serde_json::json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "unix_time": now,
        });
        self.write_json("metadata.json", &meta)
    }
}

pub fn run<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("snlab: {e}");
            EXIT_USAGE
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Gradcheck { common, corrupt_grad } => cmd_gradcheck(&common, corrupt_grad),
        Command::Train { common } => cmd_train(&common),
        Command::Finalize {
            common,
            model,
            method,
            batches,
        } => cmd_finalize(&common, model, method, batches),
        Command::Eval { common, model } => cmd_eval(&common, model),
    }
}

fn cmd_gradcheck(common: &Common, corrupt: bool) -> Result<i32> {
    let mut exp = Experiment::from_common(common)?;
    exp.gradcheck.corrupt = corrupt;
    let out = OutDir::new(&common.out, common.force)?;
    out.check(&["gradcheck.json"])?;
    let reports = run_suite(&exp.gradcheck)?;
    out.write_json("gradcheck.json", &reports)?;
    out.write_metadata("gradcheck")?;
    let mut failed = 0;
    for r in &reports {
        println!(
            "{:<12} max_rel_err {:.3e} over {} entries: {}",
            r.layer,
            r.max_rel_err,
            r.checked,
            if r.pass { "pass" } else { "FAIL" }
        );
        failed += usize::from(!r.pass);
    }
    Ok(if failed == 0 { EXIT_OK } else { EXIT_VERIFY })
}

const TRAIN_FILES: [&str; 4] = ["report.jsonl", "model.json", "ratios.csv", "summary.json"];

fn cmd_train(common: &Common) -> Result<i32> {
    let exp = Experiment::from_common(common)?;
    let out = OutDir::new(&common.out, common.force)?;
    if exp.batch_sweep.is_empty() {
        out.check(&TRAIN_FILES)?;
        let code = train_into(&exp, &exp.train, &out)?;
        out.write_metadata("train")?;
        return Ok(code);
    }
    out.check(&["sweep.json"])?;
    let mut rows = Vec::new();
    let mut code = EXIT_OK;
    for &b in &exp.batch_sweep {
        let dir = out.sub(&format!("batch_{b}"))?;
        dir.check(&TRAIN_FILES)?;
        let cfg = TrainConfig {
            batch_per_partition: b,
            ..exp.train.clone()
        };
        let c = train_into(&exp, &cfg, &dir)?;
        let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path("summary.json"))?)?;
        rows.push(serde_json::json!({
            "batch": b,
            "final_eval_acc": summary["final_eval_acc"],
            "mean_bn_ratio": summary["mean_bn_ratio"],
        }));
        code = code.max(c);
    }
    out.write_json("sweep.json", &rows)?;
    out.write_metadata("train")?;
    Ok(code)
}

/// Trains one configuration and writes its files. Returns the exit code.
fn train_into(exp: &Experiment, cfg: &TrainConfig, out: &OutDir) -> Result<i32> {
    let ds = make_dataset(&exp.dataset)?;
    let report = train(&exp.model, &ds, cfg)?;
    write_report(out, &report, "")?;
    let mut code = if report.diverged.is_some() { EXIT_DIVERGED } else { EXIT_OK };
    let mut final_model = report.model.clone();
    if code == EXIT_OK && exp.finetune_hard_epochs > 0 {
        let ft_cfg = TrainConfig {
            epochs: exp.finetune_hard_epochs,
            decay_epochs: Vec::new(),
            ..cfg.clone()
        };
        let hard = finetune_hard(&report.model, &ds, &ft_cfg)?;
        write_report(out, &hard, "hard_")?;
        if hard.diverged.is_some() {
            code = EXIT_DIVERGED;
        }
        final_model = hard.model;
    }
    let saved = SavedModel {
        dataset: exp.dataset.clone(),
        train: cfg.clone(),
        model: final_model,
    };
    out.write_json("model.json", &saved)?;
    if let Some(d) = &report.diverged {
        eprintln!("snlab: training diverged at epoch {} step {} (loss {})", d.epoch, d.step, d.loss);
    }
    Ok(code)
}

fn write_report(out: &OutDir, report: &TrainReport, prefix: &str) -> Result<()> {
    let mut jsonl = String::new();
    for e in &report.epochs {
        jsonl.push_str(&serde_json::to_string(e)?);
        jsonl.push('\n');
    }
    out.write(&format!("{prefix}report.jsonl"), &jsonl)?;
    out.write(&format!("{prefix}ratios.csv"), &ratios_csv(&report.initial_layers, &report.epochs))?;
    let summary = serde_json::json!({
        "final_eval_acc": report.final_eval_acc,
        "mean_bn_ratio": report.mean_bn_ratio(),
        "diverged": report.diverged,
        "hard_snapshots": report.hard_snapshots,
    });
    out.write_json(&format!("{prefix}summary.json"), &summary)
}

/// One row per (epoch, layer); epoch 0 holds the initial ratios.
pub fn ratios_csv(initial: &[LayerRatio], epochs: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,layer,w_mu_in,w_mu_ln,w_mu_bn,w_sigma_in,w_sigma_ln,w_sigma_bn,divergence\n");
    let rows = std::iter::once((0, initial)).chain(epochs.iter().map(|e| (e.epoch, e.layers.as_slice())));
    for (epoch, layers) in rows {
        for l in layers {
            let _ = write!(s, "{epoch},{}", l.name);
            for v in l.w_mu.iter().chain(&l.w_sigma) {
                let _ = write!(s, ",{v}");
            }
            let _ = writeln!(s, ",{}", l.divergence);
        }
    }
    s
}

fn load_model(common: &Common, model: Option<PathBuf>) -> Result<(PathBuf, SavedModel)> {
    let path = model.unwrap_or_else(|| common.out.join("model.json"));
    let text = fs::read_to_string(&path)
        .map_err(|e| SnError::Argument(format!("cannot read model {}: {e}", path.display())))?;
    Ok((path, serde_json::from_str(&text)?))
}

fn cmd_finalize(
    common: &Common,
    model: Option<PathBuf>,
    method: Option<String>,
    batches: Option<usize>,
) -> Result<i32> {
    let (_, mut saved) = load_model(common, model)?;
    // Config file and overrides may adjust the data or finalize settings.
    let mut exp = Experiment {
        dataset: saved.dataset.clone(),
        train: saved.train.clone(),
        ..Experiment::default()
    };
    exp.apply(common)?;
    if let Some(m) = method {
        exp.train.finalize = FinalizeMethod::parse(&m)?;
    }
    if batches.is_some() {
        exp.train.finalize_batches = batches;
    }
    exp.train.validate()?;
    let out = OutDir::new(&common.out, common.force)?;
    out.check(&["finalized.json"])?;
    let ds = make_dataset(&exp.dataset)?;
    saved.model = finalize(&saved.model, &ds, &exp.train)?;
    saved.train = exp.train;
    out.write_json("finalized.json", &saved)?;
    out.write_metadata("finalize")?;
    Ok(EXIT_OK)
}

fn cmd_eval(common: &Common, model: Option<PathBuf>) -> Result<i32> {
    let (path, saved) = load_model(common, model)?;
    let out = OutDir::new(&common.out, common.force)?;
    out.check(&["eval.json"])?;
    let ds = make_dataset(&saved.dataset)?;
    let acc = evaluate(&saved.model, &ds.eval)?;
    let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    out.write_json(
        "eval.json",
        &serde_json::json!({
            "model": file,
            "samples": ds.eval.len(),
            "accuracy": acc,
        }),
    )?;
    println!("eval accuracy {acc:.4} on {} samples", ds.eval.len());
    Ok(EXIT_OK)
}
