//! The `sbnet` command line: argument parsing, run configuration and the
//! subcommand implementations. Exit codes: 0 success, 1 configuration
//! error, 2 runtime or numeric failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::{self, BenchConfig, MetricsReport, ProbeKind, ReportFormat};
use crate::backbone::{count_params, NetSpec, Network, PRESETS};
use crate::checkpoint;
use crate::checks;
use crate::error::{Error, Result};
use crate::train::{self, CifarVariant, Dataset, Split, TrainConfig};

pub const THREADS_ENV: &str = "SBNET_THREADS";

#[derive(Parser, Debug)]
#[command(name = "sbnet", version, about = "Spatial-bias networks: build, train, evaluate, benchmark and count")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a network and write metrics and checkpoints under --out
    Train(CommonArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Measure inference throughput
    Bench(CommonArgs),
    /// Print parameter and MAC counts
    Count(CommonArgs),
    /// Run the double-precision gradient-check suite
    Gradcheck(CommonArgs),
    /// Fit time-versus-resolution exponents for the attention and bias blocks
    Scaling(CommonArgs),
    /// Print the full run configuration as JSON
    ExportSpec(CommonArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// JSON run configuration, or a bare network spec
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Named network to start from instead of a config file
    #[arg(long, value_name = "NAME", conflicts_with = "config")]
    pub preset: Option<String>,
    /// CIFAR binary file or directory (synthetic data when absent)
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Output directory; nothing is written without it
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seed for weights, data shuffling and synthetic data
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override a config value by dotted path, e.g. train.lr=0.1
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Report format
    #[arg(long, value_name = "FORMAT", value_parser = ["csv", "json"])]
    pub format: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint to evaluate
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic { n: usize, classes: usize },
    Cifar10 { path: Option<PathBuf> },
    Cifar100 { path: Option<PathBuf> },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic { n: 1000, classes: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingConfig {
    pub channels: usize,
    pub resolutions: Vec<usize>,
    pub reps: usize,
    pub blocks: Vec<ProbeKind>,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            channels: 64,
            resolutions: vec![16, 32, 64],
            reps: analysis::MIN_REPS,
            blocks: vec![
                ProbeKind::Nl,
                ProbeKind::NlCompressed,
                ProbeKind::Sb,
                ProbeKind::SbGenerate,
                ProbeKind::Conv,
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub net: NetSpec,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub data: DataConfig,
    pub scaling: ScalingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            net: NetSpec::cifar(38, 10),
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
            data: DataConfig::default(),
            scaling: ScalingConfig::default(),
        }
    }
}

/// Merges `overlay` into `base`. Objects merge key by key, except tagged
/// enums (objects with a `kind` key), which replace the base value whole.
fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) if !o.contains_key("kind") => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Applies one `key=value` override. Every path segment but the last must
/// already exist; the value is parsed as JSON, falling back to a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("--set `{assignment}`: expected KEY=VALUE")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(format!("--set `{assignment}`: empty key segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("split yields one segment");
    let mut node = root;
    for (i, k) in parents.iter().enumerate() {
        let at = keys[..=i].join(".");
        node = match node {
            Value::Object(m) => m.get_mut(*k),
            Value::Array(a) => k.parse::<usize>().ok().and_then(|j| a.get_mut(j)),
            _ => None,
        }
        .ok_or_else(|| Error::config(format!("--set: unknown key `{at}`")))?;
    }
    match node {
        Value::Object(m) => {
            m.insert(last.to_string(), value);
        }
        Value::Array(a) => {
            let slot = last
                .parse::<usize>()
                .ok()
                .and_then(|j| a.get_mut(j))
                .ok_or_else(|| Error::config(format!("--set: unknown key `{path}`")))?;
            *slot = value;
        }
        _ => return Err(Error::config(format!("--set: `{path}` is not inside an object"))),
    }
    Ok(())
}

/// Resolves file < preset < overrides < `--seed` into a validated config.
pub fn resolve_config(args: &CommonArgs) -> Result<RunConfig> {
    let mut root = serde_json::to_value(RunConfig::default()).expect("config serializes");
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut file: Value = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: invalid JSON: {e}", path.display())))?;
        if file.get("family").is_some() {
            file = serde_json::json!({ "net": file });
        }
        if let Value::Object(m) = &file {
            // a network spec replaces the default one whole
            if let Some(net) = m.get("net") {
                root["net"] = net.clone();
            }
        }
        merge(&mut root, file);
    }
    if let Some(name) = &args.preset {
        root["net"] = serde_json::to_value(NetSpec::preset(name)?).expect("spec serializes");
    }
    for o in &args.overrides {
        apply_override(&mut root, o)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(root).map_err(|e| Error::config(format!("config: {e}")))?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(path) = &args.data {
        cfg.data = match (&cfg.data, cfg.net.num_classes) {
            (DataConfig::Cifar10 { .. }, _) => DataConfig::Cifar10 { path: Some(path.clone()) },
            (DataConfig::Cifar100 { .. }, _) => DataConfig::Cifar100 { path: Some(path.clone()) },
            (DataConfig::Synthetic { .. }, 10) => DataConfig::Cifar10 { path: Some(path.clone()) },
            (DataConfig::Synthetic { .. }, _) => DataConfig::Cifar100 { path: Some(path.clone()) },
        };
    }
    cfg.net.validate()?;
    Ok(cfg)
}

/// Training data and, for CIFAR directories, the test split.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>)> {
    let (variant, path) = match &cfg.data {
        DataConfig::Synthetic { n, classes } => {
            return Ok((train::synthetic_dataset(*n, *classes, cfg.train.seed)?, None));
        }
        DataConfig::Cifar10 { path } => (CifarVariant::Cifar10, path),
        DataConfig::Cifar100 { path } => (CifarVariant::Cifar100, path),
    };
    let path = path
        .as_deref()
        .ok_or_else(|| Error::config("data.path: required for CIFAR data (or pass --data)"))?;
    let train_set = train::load_cifar(path, variant, Split::Train)?;
    let val = if path.is_dir() {
        Some(train::load_cifar(path, variant, Split::Test)?)
    } else {
        None
    };
    Ok((train_set, val))
}

fn format_of(args: &CommonArgs) -> Result<Option<ReportFormat>> {
    args.format.as_deref().map(str::parse).transpose()
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Prints `report` when `--format` is given and writes it under `--out`.
fn emit_report(args: &CommonArgs, report: &MetricsReport, out: &mut dyn Write) -> Result<()> {
    let format = format_of(args)?;
    if let Some(f) = format {
        writeln!(out, "{}", analysis::report_to_string(report, f)?.trim_end()).map_err(stdout_err)?;
    }
    if let Some(dir) = &args.out {
        create_out(dir)?;
        let f = format.unwrap_or_default();
        let name = match f {
            ReportFormat::Csv => "report.csv",
            ReportFormat::Json => "report.json",
        };
        analysis::export_report(report, &dir.join(name), f)?;
    }
    Ok(())
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn build(cfg: &RunConfig) -> Result<Network<f32>> {
    Network::build(&cfg.net, cfg.train.seed)
}

fn cmd_count(args: &CommonArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(args)?;
    let mut net = build(&cfg)?;
    let side = cfg.net.input_size();
    let params = count_params(&mut net) as u64;
    let macs = net.count_macs(side, side)?;
    if args.format.is_none() {
        writeln!(out, "params={params} macs={macs} gmacs={:.3} input={side}x{side}", macs as f64 / 1e9)
            .map_err(stdout_err)?;
    }
    let report = MetricsReport {
        network: Some(net_label(&cfg.net)),
        params: Some(params),
        macs: Some(macs),
        ..MetricsReport::default()
    };
    emit_report(args, &report, out)
}

fn net_label(spec: &NetSpec) -> String {
    PRESETS
        .iter()
        .find(|p| NetSpec::preset(p).is_ok_and(|s| &s == spec))
        .map_or_else(
            || {
                let family = serde_json::to_value(spec.family).expect("family serializes");
                format!("{}-{}", family.as_str().unwrap_or("net"), spec.depth)
            },
            |p| p.to_string(),
        )
}

fn cmd_bench(args: &CommonArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(args)?;
    let mut net = build(&cfg)?;
    let t = analysis::throughput(&mut net, &cfg.bench)?;
    if args.format.is_none() {
        writeln!(
            out,
            "samples_per_sec={:.3} iqr={:.3} std={:.3} batch={} input={}x{} threads={}",
            t.median,
            t.iqr(),
            t.std,
            cfg.bench.batch,
            cfg.bench.input_h,
            cfg.bench.input_w,
            cfg.bench.threads
        )
        .map_err(stdout_err)?;
    }
    let mut report = MetricsReport {
        network: Some(net_label(&cfg.net)),
        params: Some(count_params(&mut net) as u64),
        macs: Some(net.count_macs(cfg.bench.input_h, cfg.bench.input_w)?),
        ..MetricsReport::default()
    };
    report.set_throughput(&t);
    emit_report(args, &report, out)
}

fn cmd_gradcheck(args: &CommonArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(args)?;
    let results = checks::grad_suite(cfg.train.seed)?;
    for c in &results {
        writeln!(
            out,
            "{:<26} max_rel_err={:.3e} tol={:.0e} coords={} {}",
            c.op,
            c.report.max_rel_err,
            c.report.tol,
            c.report.coords_checked,
            if c.report.passed { "ok" } else { "FAIL" }
        )
        .map_err(stdout_err)?;
    }
    let failed: Vec<&str> = results.iter().filter(|c| !c.report.passed).map(|c| c.op.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn cmd_scaling(args: &CommonArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(args)?;
    let s = &cfg.scaling;
    let mut report = MetricsReport::default();
    for &kind in &s.blocks {
        let fit = analysis::scaling_probe(kind, s.channels, &s.resolutions, s.reps, cfg.train.seed)?;
        if args.format.is_none() {
            writeln!(out, "{} exponent={:.3} r2={:.4}", kind.name(), fit.exponent, fit.r2).map_err(stdout_err)?;
            if let Some(w) = &fit.warning {
                writeln!(out, "{} warning: {w}", kind.name()).map_err(stdout_err)?;
            }
        }
        report.scaling_points.extend(fit.points);
    }
    if let Some(dir) = &args.out {
        create_out(dir)?;
        let path = dir.join("scaling.csv");
        std::fs::write(&path, analysis::scaling_csv(&report.scaling_points)).map_err(|e| Error::io(&path, e))?;
    }
    emit_report(args, &report, out)
}

fn cmd_train(args: &CommonArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(args)?;
    let (data, val) = load_data(&cfg)?;
    let mut net = build(&cfg)?;
    let report = train::train(&mut net, &data, val.as_ref(), &cfg.train, args.out.as_deref())?;
    if args.format.is_none() {
        for m in &report.series {
            writeln!(
                out,
                "epoch={} split={} loss={:.6} top1={:.2} top5={:.2} lr={} samples_per_sec={:.1}",
                m.epoch, m.split, m.loss, m.top1, m.top5, m.lr, m.throughput
            )
            .map_err(stdout_err)?;
        }
    }
    let metrics = MetricsReport {
        network: Some(net_label(&cfg.net)),
        params: Some(count_params(&mut net) as u64),
        training: report.series,
        ..MetricsReport::default()
    };
    emit_report(args, &metrics, out)
}

fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(&args.common)?;
    let (data, val) = load_data(&cfg)?;
    let mut net = build(&cfg)?;
    checkpoint::load(&mut net, &args.checkpoint)?;
    let r = train::evaluate(&mut net, val.as_ref().unwrap_or(&data), cfg.train.batch_size)?;
    if args.common.format.is_none() {
        writeln!(out, "top1={:.2} top5={:.2} loss={:.6}", r.top1, r.top5, r.loss).map_err(stdout_err)?;
    }
    let report = MetricsReport {
        network: Some(net_label(&cfg.net)),
        training: vec![train::EpochMetrics {
            epoch: 0,
            split: "eval".into(),
            loss: r.loss,
            top1: r.top1,
            top5: r.top5,
            lr: 0.0,
            throughput: 0.0,
        }],
        ..MetricsReport::default()
    };
    emit_report(&args.common, &report, out)
}

fn cmd_export_spec(args: &CommonArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(args)?;
    let text = serde_json::to_string_pretty(&cfg).expect("config serializes");
    writeln!(out, "{text}").map_err(stdout_err)?;
    if let Some(dir) = &args.out {
        create_out(dir)?;
        let path = dir.join("config.json");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Bench(a) => cmd_bench(a, out),
        Command::Count(a) => cmd_count(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Scaling(a) => cmd_scaling(a, out),
        Command::ExportSpec(a) => cmd_export_spec(a, out),
    }
}

/// Caps op-level parallelism from `SBNET_THREADS`, when set.
pub fn init_threads(value: Option<&str>) -> Result<()> {
    let Some(v) = value else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(format!("{THREADS_ENV}: expected a positive integer, got `{v}`")))?;
    // a pool that is already initialized keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_config() {
        1
    } else {
        2
    }
}

/// Parses `argv` and runs the subcommand; returns the process exit code.
pub fn dispatch<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_sets_nested_and_indexed_keys() {
        let mut v = serde_json::json!({"train": {"lr": 0.25}, "net": {"insertions": [{"kind": "sb"}]}});
        apply_override(&mut v, "train.lr=0.1").unwrap();
        apply_override(&mut v, "net.insertions.0.pool_size=8").unwrap();
        assert_eq!(v["train"]["lr"], 0.1);
        assert_eq!(v["net"]["insertions"][0]["pool_size"], 8);
        assert!(apply_override(&mut v, "nope.lr=1").unwrap_err().to_string().contains("nope"));
        assert!(apply_override(&mut v, "train.lr").unwrap_err().is_config());
    }

    #[test]
    fn unknown_leaf_is_rejected_by_schema() {
        let args = CommonArgs {
            overrides: vec!["train.lrr=0.1".into()],
            ..CommonArgs::default()
        };
        let e = resolve_config(&args).unwrap_err();
        assert!(e.is_config());
        assert!(e.to_string().contains("lrr"), "{e}");
    }

    #[test]
    fn tagged_enum_override_replaces_whole_value() {
        let args = CommonArgs {
            overrides: vec![r#"train.schedule={"kind":"cosine"}"#.into(), "data.n=200".into()],
            seed: Some(9),
            ..CommonArgs::default()
        };
        let cfg = resolve_config(&args).unwrap();
        assert_eq!(cfg.train.schedule, train::Schedule::Cosine);
        assert_eq!(cfg.data, DataConfig::Synthetic { n: 200, classes: 10 });
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn threads_env_is_validated() {
        assert!(init_threads(None).is_ok());
        assert!(init_threads(Some("0")).unwrap_err().is_config());
        assert!(init_threads(Some("x")).unwrap_err().is_config());
    }

    #[test]
    fn unknown_subcommand_exits_one_with_usage() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(dispatch(["sbnet", "frobnicate"], &mut out, &mut err), 1);
        assert!(String::from_utf8(err).unwrap().contains("Usage"));
    }
}
