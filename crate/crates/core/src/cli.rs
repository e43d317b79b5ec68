//! The `mergeopt` command line.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::checkpoint::{decode, decode_header, load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::dpo::train::{policy_shape, RunRecord, METRICS_HEADER};
use crate::dpo::{gen_task_suite, prepare_models, train_run, RunMetrics, SuiteConfig};
use crate::error::Error;
use crate::merge::{offline_merge, MergeMethod, MergeSpec};
use crate::optim::OptimizerName;
use crate::pset::ParameterSet;

#[derive(Debug, Parser)]
#[command(
    name = "mergeopt",
    version,
    about = "Online merging optimizers and offline model merging"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge fine-tuned checkpoints into a base checkpoint.
    Merge(MergeArgs),
    /// Run pretrain, SFT and DPO from a JSON config.
    Train(TrainArgs),
    /// Run a grid of training runs and summarize them.
    Sweep(SweepArgs),
    /// Write a synthetic task suite as JSON.
    Gendata(GendataArgs),
    /// Describe a checkpoint, optionally diffing it against another.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "linear")]
    pub method: MergeMethod,
    /// Reserve rate for DARE / TIES.
    #[arg(long, default_value_t = 1.0)]
    pub density: f64,
    /// One weight per model; defaults to a uniform average.
    #[arg(long, value_delimiter = ',')]
    pub weights: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep DARE survivors at their original scale.
    #[arg(long)]
    pub no_rescale: bool,
    #[arg(required = true)]
    pub models: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub config: PathBuf,
    /// Run directory; overrides `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub alpha: Vec<f64>,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub reserve: Vec<f64>,
    #[arg(long = "gap-step", value_delimiter = ',', num_args = 1..)]
    pub gap_step: Vec<u64>,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub beta: Vec<f64>,
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub seeds: Vec<u64>,
    /// Optimizers to compare; defaults to the one in the config.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub optimizer: Vec<OptimizerName>,
}

#[derive(Debug, Args)]
pub struct GendataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Suite settings as JSON; the seed flag wins over its `seed`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Size of every train split.
    #[arg(long)]
    pub train_size: Option<usize>,
    /// Size of every eval split.
    #[arg(long)]
    pub eval_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
    #[arg(long)]
    pub diff: Option<PathBuf>,
}

/// A command failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self {
            code: if e.is_usage() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

impl CliError {
    fn usage(e: Error) -> Self {
        Self {
            code: 2,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Merge(a) => cmd_merge(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Sweep(a) => cmd_sweep(&a, out),
        Command::Gendata(a) => cmd_gendata(&a, out),
        Command::Inspect(a) => cmd_inspect(&a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> CliResult<()> {
    out.write_all(text.as_bytes()).map_err(|e| CliError {
        code: 1,
        message: format!("writing output: {e}"),
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> crate::Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> crate::Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn cmd_merge(a: &MergeArgs, out: &mut dyn Write) -> CliResult<()> {
    let base = load_checkpoint(&a.base)?;
    let models = a
        .models
        .iter()
        .map(load_checkpoint)
        .collect::<crate::Result<Vec<_>>>()?;
    let weights = if a.weights.is_empty() {
        vec![1.0 / models.len() as f64; models.len()]
    } else {
        a.weights.clone()
    };
    let spec = MergeSpec {
        method: a.method,
        reserve_rate: a.density,
        weights,
        rescale: !a.no_rescale,
        seed: a.seed,
    };
    spec.validate(models.len()).map_err(CliError::usage)?;
    let merged = offline_merge(&base, &models, &spec)?;
    save_checkpoint(&merged, &a.out)?;
    emit(out, &sparsity_report(&base, &merged))
}

/// Per-tensor count of entries the merge left equal to the base.
pub fn sparsity_report(base: &ParameterSet, merged: &ParameterSet) -> String {
    let mut s = String::from("tensor,numel,unchanged,unchanged_fraction\n");
    for (b, m) in base.tensors().iter().zip(merged.tensors()) {
        let same = b
            .data
            .iter()
            .zip(&m.data)
            .filter(|(x, y)| x.to_bits() == y.to_bits())
            .count();
        let frac = if b.data.is_empty() {
            0.0
        } else {
            same as f64 / b.data.len() as f64
        };
        writeln!(s, "{},{},{},{:.6}", b.name, b.data.len(), same, frac).unwrap();
    }
    s
}

/// Outcome of one pipeline run written to a run directory.
#[derive(Debug)]
pub struct RunReport {
    pub metrics: RunMetrics,
    pub error: Option<Error>,
    pub last_good_step: u64,
}

/// Runs the full pipeline for `cfg`, writing every artifact into `dir`.
///
/// `config_text` is echoed verbatim into `config.json`. Metrics are written
/// even when the DPO phase aborts.
pub fn run_into_dir(cfg: &RunConfig, config_text: &str, dir: &Path) -> crate::Result<RunReport> {
    create_dir(dir)?;
    write_file(&dir.join("config.json"), config_text)?;
    let suite = gen_task_suite(&cfg.suite_config())?;
    let (base, reference) =
        prepare_models(&suite, cfg.hidden_dim, &cfg.pretrain, &cfg.sft, cfg.seed)?;
    save_checkpoint(&base, dir.join("theta_b.pset"))?;
    save_checkpoint(&reference, dir.join("theta_r.pset"))?;
    let spec = cfg.train_spec()?;
    let shape = policy_shape(&suite, cfg.hidden_dim);
    match train_run(&suite, shape, &base, &reference, &spec) {
        Ok(o) => {
            write_file(&dir.join("metrics.csv"), o.metrics.to_csv())?;
            save_checkpoint(&o.final_params, dir.join("theta_final.pset"))?;
            Ok(RunReport {
                metrics: o.metrics,
                error: None,
                last_good_step: cfg.dpo.steps,
            })
        }
        Err(aborted) => {
            write_file(&dir.join("metrics.csv"), aborted.metrics.to_csv())?;
            log::error!("{aborted}");
            Ok(RunReport {
                metrics: aborted.metrics,
                error: Some(aborted.source),
                last_good_step: aborted.last_good_step,
            })
        }
    }
}

fn read_config(path: &Path) -> CliResult<(RunConfig, String)> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(Error::io(path, e)))?;
    let cfg = RunConfig::from_json(&text).map_err(CliError::usage)?;
    Ok((cfg, text))
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let (cfg, text) = read_config(&a.config)?;
    let dir = a
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError {
            code: 2,
            message: "no run directory: pass --out or set output_dir".into(),
        })?;
    let report = run_into_dir(&cfg, &text, &dir)?;
    if let Some(e) = report.error {
        return Err(CliError {
            code: 1,
            message: format!(
                "{e} (last good step {}; partial metrics in {})",
                report.last_good_step,
                dir.join("metrics.csv").display()
            ),
        });
    }
    if let Some(last) = report.metrics.last() {
        emit(
            out,
            &format!("{}\n{}\n", METRICS_HEADER, metrics_tail(last)),
        )?;
    }
    Ok(())
}

fn metrics_tail(r: &RunRecord) -> String {
    format!(
        "{},{},{},{},{},{}",
        r.step, r.dpo_loss, r.reward_margin, r.pref_accuracy, r.pretrain_accuracy, r.sft_accuracy
    )
}

/// One grid point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub optimizer: OptimizerName,
    pub alpha: f64,
    pub reserve_rate: f64,
    pub gap_step: u64,
    pub beta: f64,
    pub seed: u64,
}

impl SweepPoint {
    /// The config for this point. Online optimizers become their step-K
    /// counterparts when `gap_step > 1`.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.optimizer = match (self.optimizer, self.gap_step) {
            (OptimizerName::Ondare, k) if k > 1 => OptimizerName::StepkOndare,
            (OptimizerName::Onties, k) if k > 1 => OptimizerName::StepkOnties,
            (o, _) => o,
        };
        cfg.merge.alpha = self.alpha;
        cfg.merge.reserve_rate = self.reserve_rate;
        cfg.merge.gap_step = self.gap_step;
        cfg.dpo.beta = self.beta;
        cfg.seed = self.seed;
        cfg
    }
}

/// Cartesian product of the grid axes; an empty axis takes the config value.
pub fn sweep_grid(cfg: &RunConfig, a: &SweepArgs) -> Vec<SweepPoint> {
    fn or<T: Clone>(v: &[T], d: T) -> Vec<T> {
        if v.is_empty() {
            vec![d]
        } else {
            v.to_vec()
        }
    }
    let mut grid = Vec::new();
    for optimizer in or(&a.optimizer, cfg.optimizer) {
        for &alpha in &or(&a.alpha, cfg.merge.alpha) {
            for &reserve_rate in &or(&a.reserve, cfg.merge.reserve_rate) {
                for &gap_step in &or(&a.gap_step, cfg.merge.gap_step) {
                    for &beta in &or(&a.beta, cfg.dpo.beta) {
                        for &seed in &or(&a.seeds, cfg.seed) {
                            grid.push(SweepPoint {
                                optimizer,
                                alpha,
                                reserve_rate,
                                gap_step,
                                beta,
                                seed,
                            });
                        }
                    }
                }
            }
        }
    }
    grid
}

pub const SWEEP_HEADER: &str = "point,optimizer,alpha,reserve_rate,gap_step,beta,seed,status,step,dpo_loss,reward_margin,pref_accuracy,pretrain_accuracy,sft_accuracy,error";

/// Worker count from `MERGEOPT_THREADS` (unset or 0 = rayon's default).
pub fn thread_count() -> usize {
    std::env::var("MERGEOPT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

fn sweep_row(
    index: usize,
    p: &SweepPoint,
    cfg: &RunConfig,
    result: &crate::Result<RunReport>,
) -> String {
    let name = serde_json::to_value(cfg.optimizer)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    let head = format!(
        "{index},{name},{},{},{},{},{}",
        p.alpha, p.reserve_rate, p.gap_step, p.beta, p.seed
    );
    let clean = |e: &Error| e.to_string().replace([',', '\n'], ";");
    match result {
        Ok(r) => {
            let status = if r.error.is_none() { "ok" } else { "aborted" };
            let tail = r
                .metrics
                .last()
                .map(metrics_tail)
                .unwrap_or_else(|| ",,,,,".into());
            let err = r.error.as_ref().map(clean).unwrap_or_default();
            format!("{head},{status},{tail},{err}")
        }
        Err(e) => format!("{head},failed,,,,,,,{}", clean(e)),
    }
}

pub fn cmd_sweep(a: &SweepArgs, out: &mut dyn Write) -> CliResult<()> {
    let (cfg, _) = read_config(&a.config)?;
    let grid = sweep_grid(&cfg, a);
    create_dir(&a.out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| CliError {
            code: 1,
            message: format!("thread pool: {e}"),
        })?;
    let rows: Vec<String> = pool.install(|| {
        grid.par_iter()
            .enumerate()
            .map(|(i, p)| {
                let point_cfg = p.apply(&cfg);
                let dir = a.out.join(format!("point-{i:03}"));
                let result = point_cfg
                    .validate()
                    .and_then(|_| run_into_dir(&point_cfg, &point_cfg.to_json(), &dir));
                if let Err(e) = &result {
                    log::warn!("sweep point {i} failed: {e}");
                }
                sweep_row(i, p, &point_cfg, &result)
            })
            .collect()
    });
    let mut summary = String::from(SWEEP_HEADER);
    summary.push('\n');
    for row in rows {
        summary.push_str(&row);
        summary.push('\n');
    }
    write_file(&a.out.join("summary.csv"), &summary)?;
    emit(out, &summary)
}

pub fn cmd_gendata(a: &GendataArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).map_err(|e| CliError::usage(Error::io(path, e)))?;
            serde_json::from_str::<SuiteConfig>(&text)
                .map_err(|e| CliError::usage(Error::InvalidConfig(format!("suite config: {e}"))))?
        }
        None => SuiteConfig::default(),
    };
    cfg.seed = a.seed;
    if let Some(n) = a.train_size {
        cfg.pretrain_train = n;
        cfg.sft_train = n;
        cfg.pref_train = n;
    }
    if let Some(n) = a.eval_size {
        cfg.pretrain_eval = n;
        cfg.sft_eval = n;
        cfg.pref_eval = n;
    }
    let suite = gen_task_suite(&cfg).map_err(CliError::usage)?;
    let json = serde_json::to_string(&suite).map_err(|e| CliError {
        code: 1,
        message: format!("serializing suite: {e}"),
    })?;
    write_file(&a.out, json)?;
    emit(
        out,
        &format!(
            "wrote {} pretrain, {} sft, {} preference examples to {}\n",
            suite.pretrain_train.len() + suite.pretrain_eval.len(),
            suite.sft_train.len() + suite.sft_eval.len(),
            suite.pref_train.len() + suite.pref_eval.len(),
            a.out.display()
        ),
    )
}

/// Header summary plus per-tensor norms, and delta norms against `other`.
pub fn inspect_report(path: &Path, other: Option<&Path>) -> crate::Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, payload_start) = decode_header(&bytes)?;
    let p = decode(&bytes)?;
    let mut s = String::new();
    writeln!(
        s,
        "{}: PSET1 version {} dtype {} tensors {} params {} header_bytes {}",
        path.display(),
        header.version,
        header.dtype,
        p.len(),
        p.numel(),
        payload_start
    )
    .unwrap();
    writeln!(s, "fingerprint {}", p.fingerprint()).unwrap();
    let q = other.map(load_checkpoint).transpose()?;
    if let Some(q) = &q {
        p.check_aligned(q)?;
    }
    for (i, t) in p.tensors().iter().enumerate() {
        write!(
            s,
            "{} {:?} numel={} norm={:e}",
            t.name,
            t.shape,
            t.numel(),
            t.l2_norm()
        )
        .unwrap();
        if let Some(q) = &q {
            let d: f64 = t
                .data
                .iter()
                .zip(q.data(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            write!(s, " delta_norm={d:e}").unwrap();
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn cmd_inspect(a: &InspectArgs, out: &mut dyn Write) -> CliResult<()> {
    let report = inspect_report(&a.path, a.diff.as_deref())?;
    emit(out, &report)
}
