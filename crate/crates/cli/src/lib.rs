//! The `moeprune` command-line pipeline: generate a corpus, train a toy MoE
//! model, prune it, distill it, evaluate it, analyze its routing and sweep
//! pruning settings.

pub mod config;

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{ArgGroup, Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use moeprune::analysis::{analyze_model, ingest_frequencies, BalanceReport};
use moeprune::calibration::{
    build_calibration_set, collect, export_stats, import_stats, CalibrationStats, CollectOptions,
    CountMode,
};
use moeprune::corpus::{read_corpus, synthetic_text};
use moeprune::distill::distill;
use moeprune::persistence::{load_checkpoint, save_checkpoint, write_atomic, Checkpoint};
use moeprune::pruning::{
    prune_model, MaskSet, Method, Propagate, PruneConfig, PruneReport, SparsityTarget,
};
use moeprune::train::{evaluate, train, EvalReport};
use moeprune::{Error, MoEModel};

pub use config::RunConfig;

/// Bad flag combinations detected after parsing.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Maps an error to the process exit code: 2 usage, 3 input or format,
/// 4 numerical, 1 anything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => EXIT_USAGE,
                Error::Numerical(_) => EXIT_NUMERICAL,
                _ => EXIT_INPUT,
            };
        }
        if cause.is::<serde_json::Error>() || cause.is::<std::io::Error>() {
            return EXIT_INPUT;
        }
    }
    1
}

#[derive(Parser, Debug)]
#[command(
    name = "moeprune",
    version,
    about = "Prune and distill toy mixture-of-experts models"
)]
pub struct Cli {
    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a seeded synthetic English-like byte corpus.
    GenCorpus(GenCorpusArgs),
    /// Train a model with plain next-byte cross-entropy.
    Train(TrainArgs),
    /// Calibrate and prune every expert matrix of a checkpoint.
    Prune(PruneArgs),
    /// Recover a pruned student with expert-wise distillation.
    Distill(DistillArgs),
    /// Held-out perplexity of a checkpoint.
    Eval(EvalArgs),
    /// Expert load-balance scores from a model or from a frequency file.
    Analyze(AnalyzeArgs),
    /// Perplexity across sparsities or calibration sizes.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct GenCorpusArgs {
    #[arg(long, default_value_t = 1_000_000)]
    pub bytes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Seeds both initialization and batch sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("sparsity_target").required(true).args(["sparsity", "pattern"])))]
pub struct PruneArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// magnitude, wanda, moe-pruner or sparsegpt.
    #[arg(long)]
    pub method: Option<String>,
    /// Unstructured fraction of each row to prune, in [0, 1).
    #[arg(long)]
    pub sparsity: Option<f64>,
    /// N:M pattern, e.g. 2:4.
    #[arg(long)]
    pub pattern: Option<String>,
    /// Calibration corpus.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long)]
    pub nsamples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// dense or recompute.
    #[arg(long)]
    pub propagate: Option<String>,
    #[arg(long)]
    pub damp: Option<f64>,
    /// Skip the Hessian weight update of sparsegpt.
    #[arg(long)]
    pub no_weight_update: bool,
    /// Weight Hessian inputs by router gates (not the standard baseline).
    #[arg(long)]
    pub gate_scaled_hessian: bool,
    /// Use previously exported calibration statistics instead of `--calib`.
    #[arg(long, conflicts_with = "calib")]
    pub stats: Option<PathBuf>,
    /// Also export the collected calibration statistics.
    #[arg(long)]
    pub save_stats: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DistillArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub student: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Fixed expert-loss weight; measured on the first batch when absent.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also update router weights.
    #[arg(long)]
    pub train_router: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// JSON frequency file: {"model_name", "layers": [[..], ..]} or an array.
    #[arg(long)]
    pub freq: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    pub nsamples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Count every selected expert instead of only the top one.
    #[arg(long)]
    pub top_k: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("sweep_axis").required(true).args(["sparsities", "nsamples_list"])))]
pub struct SweepArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "moe-pruner")]
    pub method: String,
    /// Calibration corpus.
    #[arg(long)]
    pub calib: PathBuf,
    /// Held-out evaluation corpus.
    #[arg(long)]
    pub eval: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub sparsities: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub nsamples_list: Option<Vec<usize>>,
    /// Sparsity used while sweeping calibration sizes.
    #[arg(long, default_value_t = 0.5)]
    pub sparsity: f64,
    /// Calibration size used while sweeping sparsities.
    #[arg(long, default_value_t = 128)]
    pub nsamples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenCorpus(a) => cmd_gen_corpus(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Prune(a) => cmd_prune(&a).map(|_| ()),
        Command::Distill(a) => cmd_distill(&a),
        Command::Eval(a) => {
            let report = cmd_eval(&a)?;
            emit(&report, a.out.as_deref())
        }
        Command::Analyze(a) => {
            let reports = cmd_analyze(&a)?;
            emit(&json!({ "reports": reports }), a.out.as_deref())
        }
        Command::Sweep(a) => cmd_sweep(&a).map(|_| ()),
    }
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    println!("{text}");
    if let Some(path) = out {
        write_atomic(path, format!("{text}\n").as_bytes())?;
    }
    Ok(())
}

fn write_json_lines<T: Serialize>(path: &Path, records: &[T]) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)?;
    Ok(())
}

pub fn cmd_gen_corpus(a: &GenCorpusArgs) -> anyhow::Result<()> {
    write_atomic(&a.out, &synthetic_text(a.seed, a.bytes))?;
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(seed) = a.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    let corpus = read_corpus(&a.corpus)?;
    let mut model = MoEModel::new(cfg.model.clone())?;
    let log = train(&mut model, &corpus, &cfg.train)?;
    let meta = json!({
        "command": "train",
        "config": cfg,
        "final_loss": log.last().map(|r| r.loss),
    });
    save_checkpoint(&model, None, &a.out, meta)?;
    write_json_lines(&a.out.join("train_log.jsonl"), &log)?;
    Ok(())
}

fn load(dir: &Path) -> anyhow::Result<Checkpoint> {
    load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn parse_method(s: &str) -> anyhow::Result<Method> {
    s.parse().map_err(|e: Error| usage(e.to_string()))
}

/// Calibrates (or imports statistics) and prunes. Returns the pruned model,
/// masks and report without writing anything.
pub fn prune_pipeline(
    model: &MoEModel,
    calib: Option<&[u8]>,
    stats: Option<CalibrationStats>,
    cfg: &RunConfig,
) -> anyhow::Result<(MoEModel, MaskSet, PruneReport, Option<CalibrationStats>)> {
    let target: SparsityTarget = cfg.prune.target.parse()?;
    let needs_data =
        cfg.prune.method != Method::Magnitude || cfg.prune.propagate == Propagate::Recompute;
    let cal = match calib {
        Some(text) => Some(build_calibration_set(
            text,
            cfg.calibration.nsamples,
            model.config.seq_len,
            cfg.calibration.seed,
        )?),
        None => None,
    };
    let stats = match (stats, &cal) {
        (Some(s), _) => s,
        (None, Some(cal)) => collect(
            model,
            cal,
            &CollectOptions {
                gate_scaled_hessian: cfg.prune.gate_scaled_hessian,
                count_mode: cfg.calibration.count_mode,
                skip_hessians: cfg.prune.method != Method::SparseGpt,
                ..Default::default()
            },
        )?,
        (None, None) if !needs_data => {
            CalibrationStats::empty(&model.config, cfg.calibration.count_mode)
        }
        (None, None) => bail!(usage(format!(
            "method {} needs calibration data (--calib or --stats)",
            cfg.prune.method
        ))),
    };
    let pcfg = PruneConfig {
        method: cfg.prune.method,
        target,
        propagate: cfg.prune.propagate,
        damp: cfg.prune.damp,
        weight_update: cfg.prune.weight_update,
        gate_scaled_hessian: cfg.prune.gate_scaled_hessian,
    };
    if pcfg.propagate == Propagate::Recompute && cal.is_none() {
        bail!(usage("--propagate recompute needs --calib"));
    }
    let (pruned, masks, report) = prune_model(model, &stats, &pcfg, cal.as_ref())?;
    Ok((pruned, masks, report, Some(stats)))
}

pub fn cmd_prune(a: &PruneArgs) -> anyhow::Result<PruneReport> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let ck = load(&a.ckpt)?;
    if ck.masks.is_some() {
        log::warn!(
            "{} already carries masks; pruning its current weights afresh",
            a.ckpt.display()
        );
    }
    cfg.model = ck.model.config.clone();
    if let Some(m) = &a.method {
        cfg.prune.method = parse_method(m)?;
    }
    cfg.prune.target = match (a.sparsity, &a.pattern) {
        (Some(p), None) => SparsityTarget::Unstructured { p }.to_string(),
        (None, Some(pat)) => pat.clone(),
        _ => bail!(usage("give exactly one of --sparsity and --pattern")),
    };
    if let Some(n) = a.nsamples {
        cfg.calibration.nsamples = n;
    }
    if let Some(s) = a.seed {
        cfg.calibration.seed = s;
    }
    if let Some(p) = &a.propagate {
        cfg.prune.propagate = p.parse().map_err(|e: Error| usage(e.to_string()))?;
    }
    if let Some(d) = a.damp {
        cfg.prune.damp = d;
    }
    if a.no_weight_update {
        cfg.prune.weight_update = false;
    }
    if a.gate_scaled_hessian {
        cfg.prune.gate_scaled_hessian = true;
    }
    let calib = a.calib.as_deref().map(read_corpus).transpose()?;
    let stats = a
        .stats
        .as_deref()
        .map(|p| import_stats(p).with_context(|| format!("importing {}", p.display())))
        .transpose()?;
    let (pruned, masks, report, stats) = prune_pipeline(&ck.model, calib.as_deref(), stats, &cfg)?;
    if let (Some(path), Some(stats)) = (&a.save_stats, &stats) {
        export_stats(stats, path)?;
    }
    let meta = json!({
        "command": "prune",
        "config": cfg,
        "source": a.ckpt,
        "sparsity": report.sparsity,
    });
    save_checkpoint(&pruned, Some(&masks), &a.out, meta)?;
    let doc = json!({ "config": cfg, "report": report });
    write_atomic(
        &a.out.join("prune_report.json"),
        serde_json::to_string_pretty(&doc)?.as_bytes(),
    )?;
    Ok(report)
}

pub fn cmd_distill(a: &DistillArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let teacher = load(&a.teacher)?;
    let student = load(&a.student)?;
    cfg.model = student.model.config.clone();
    let kd = &mut cfg.distill;
    if let Some(v) = a.samples {
        kd.samples = v;
    }
    if let Some(v) = a.epochs {
        kd.epochs = v;
    }
    if let Some(v) = a.lr {
        kd.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        kd.batch_size = v;
    }
    if a.lambda.is_some() {
        kd.lambda = a.lambda;
    }
    if let Some(v) = a.seed {
        kd.seed = v;
    }
    if a.train_router {
        kd.router_frozen = false;
    }
    let corpus = read_corpus(&a.corpus)?;
    let masks = student.masks.clone().unwrap_or_default();
    let (model, log) = distill(
        &teacher.model,
        &student.model,
        &masks,
        &corpus,
        &cfg.distill,
    )?;
    let meta = json!({
        "command": "distill",
        "config": cfg,
        "teacher": a.teacher,
        "student": a.student,
    });
    save_checkpoint(&model, student.masks.as_ref(), &a.out, meta)?;
    write_json_lines(&a.out.join("distill_log.jsonl"), &log)?;
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> anyhow::Result<EvalReport> {
    let ck = load(&a.ckpt)?;
    let text = read_corpus(&a.corpus)?;
    Ok(evaluate(&ck.model, &text)?)
}

pub fn cmd_analyze(a: &AnalyzeArgs) -> anyhow::Result<Vec<BalanceReport>> {
    let mode = if a.top_k {
        CountMode::TopK
    } else {
        CountMode::Argmax
    };
    match (&a.ckpt, &a.corpus, &a.freq) {
        (Some(ckpt), Some(corpus), None) => {
            let ck = load(ckpt)?;
            let text = read_corpus(corpus)?;
            let mut report = analyze_model(&ck.model, &text, a.nsamples, a.seed, mode)?;
            report.model_name = ckpt.display().to_string();
            Ok(vec![report])
        }
        (None, None, Some(freq)) => Ok(ingest_frequencies(freq)?),
        _ => Err(usage("give either --ckpt with --corpus, or --freq")),
    }
}

/// One CSV row of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub setting: String,
    pub perplexity: f64,
}

fn dedupe<T: Copy, K: Eq + std::hash::Hash>(
    items: &[T],
    key: impl Fn(T) -> K,
    what: &str,
) -> Vec<T> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for &item in items {
        if seen.insert(key(item)) {
            out.push(item);
        } else {
            log::warn!("dropping duplicate {what} setting");
        }
    }
    out
}

pub fn cmd_sweep(a: &SweepArgs) -> anyhow::Result<Vec<SweepRow>> {
    let ck = load(&a.ckpt)?;
    let calib = read_corpus(&a.calib)?;
    let eval_text = read_corpus(&a.eval)?;
    let mut cfg = RunConfig {
        model: ck.model.config.clone(),
        ..RunConfig::default()
    };
    cfg.prune.method = parse_method(&a.method)?;
    cfg.calibration.seed = a.seed;
    let mut rows = Vec::new();
    let header = match (&a.sparsities, &a.nsamples_list) {
        (Some(list), None) => {
            cfg.calibration.nsamples = a.nsamples;
            let list = dedupe(list, f64::to_bits, "sparsity");
            // Statistics do not depend on the sparsity; collect them once.
            let mut stats = None;
            for p in list {
                cfg.prune.target = SparsityTarget::Unstructured { p }.to_string();
                let (pruned, _, _, s) =
                    prune_pipeline(&ck.model, Some(&calib), stats.take(), &cfg)?;
                stats = s;
                rows.push(SweepRow {
                    setting: p.to_string(),
                    perplexity: evaluate(&pruned, &eval_text)?.perplexity,
                });
            }
            "sparsity"
        }
        (None, Some(list)) => {
            cfg.prune.target = SparsityTarget::Unstructured { p: a.sparsity }.to_string();
            for n in dedupe(list, |n| n, "nsamples") {
                cfg.calibration.nsamples = n;
                let (pruned, _, _, _) = prune_pipeline(&ck.model, Some(&calib), None, &cfg)?;
                rows.push(SweepRow {
                    setting: n.to_string(),
                    perplexity: evaluate(&pruned, &eval_text)?.perplexity,
                });
            }
            "nsamples"
        }
        _ => bail!(usage(
            "give exactly one of --sparsities and --nsamples-list"
        )),
    };
    let mut csv = Vec::new();
    writeln!(csv, "{header},perplexity")?;
    for r in &rows {
        writeln!(csv, "{},{}", r.setting, r.perplexity)?;
    }
    write_atomic(&a.out, &csv)?;
    Ok(rows)
}

/// Effective configuration recorded in a checkpoint, if any.
pub fn recorded_config(ck: &Checkpoint) -> Option<RunConfig> {
    serde_json::from_value(ck.metadata.get("config").cloned().unwrap_or(Value::Null)).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kinds() {
        assert_eq!(exit_code(&usage("x")), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Input("x".into()).into()), EXIT_INPUT);
        assert_eq!(exit_code(&Error::Format("x".into()).into()), EXIT_INPUT);
        assert_eq!(
            exit_code(&Error::Numerical("x".into()).into()),
            EXIT_NUMERICAL
        );
        let wrapped = anyhow::Error::from(Error::Numerical("nan".into())).context("training");
        assert_eq!(exit_code(&wrapped), EXIT_NUMERICAL);
    }

    #[test]
    fn dedupe_keeps_first_occurrence() {
        assert_eq!(
            dedupe(&[0.1, 0.2, 0.1, 0.3], f64::to_bits, "s"),
            vec![0.1, 0.2, 0.3]
        );
    }
}
