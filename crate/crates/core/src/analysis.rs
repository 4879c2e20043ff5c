//! Throughput benchmarking, complexity-scaling probes and report export.

use std::path::Path;
use std::sync::{Mutex, MutexGuard, TryLockError};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Network, NL_COMPRESS_DEFAULT};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Mode};
use crate::nonlocal::NlBlock;
use crate::spatial_bias::{BiasedConv, SbConfig, SpatialBias};
use crate::tensor::Tensor;
use crate::train::EpochMetrics;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub batch: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub warmup_iters: usize,
    /// At least 10.
    pub timed_iters: usize,
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            batch: 8,
            input_h: 224,
            input_w: 224,
            warmup_iters: 10,
            timed_iters: 50,
            threads: 1,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timed_iters < 10 {
            return Err(Error::config(format!("bench.timed_iters: must be at least 10, got {}", self.timed_iters)));
        }
        if self.batch == 0 || self.input_h == 0 || self.input_w == 0 {
            return Err(Error::config("bench.batch, bench.input_h and bench.input_w must be positive"));
        }
        if self.threads == 0 {
            return Err(Error::config("bench.threads: must be at least 1"));
        }
        Ok(())
    }
}

/// Samples per second over the timed iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub std: f64,
    pub per_iter: Vec<f64>,
}

impl Throughput {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }

    fn from_samples(per_iter: Vec<f64>) -> Self {
        let mut sorted = per_iter.clone();
        sorted.sort_by(f64::total_cmp);
        let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
        let var = sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (sorted.len().max(2) - 1) as f64;
        Throughput {
            median: quantile(&sorted, 0.5),
            q1: quantile(&sorted, 0.25),
            q3: quantile(&sorted, 0.75),
            std: var.sqrt(),
            per_iter,
        }
    }
}

/// Linear-interpolated quantile of sorted, non-empty data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

static BENCH_LOCK: Mutex<()> = Mutex::new(());

/// Exclusive benchmark slot for this process; a second concurrent holder
/// gets [`Error::BenchmarkBusy`].
pub struct BenchGuard(#[allow(dead_code)] MutexGuard<'static, ()>);

pub fn bench_lock() -> Result<BenchGuard> {
    match BENCH_LOCK.try_lock() {
        Ok(g) => Ok(BenchGuard(g)),
        Err(TryLockError::Poisoned(p)) => Ok(BenchGuard(p.into_inner())),
        Err(TryLockError::WouldBlock) => Err(Error::BenchmarkBusy),
    }
}

fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(format!("bench.threads: {e}")))?;
    Ok(pool.install(f))
}

fn bench_input(cfg: &BenchConfig, channels: usize) -> Tensor<f32> {
    Tensor::randn(
        [cfg.batch, channels, cfg.input_h, cfg.input_w],
        1.0,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
}

/// Eval-mode inference throughput of one network on a fixed input.
pub fn throughput(net: &mut Network<f32>, cfg: &BenchConfig) -> Result<Throughput> {
    let mut out = throughput_interleaved(&mut [net], cfg)?;
    Ok(out.remove(0))
}

/// Benchmarks several networks round-robin, one forward each per iteration,
/// so that slow drift in machine state affects all of them equally.
pub fn throughput_interleaved(nets: &mut [&mut Network<f32>], cfg: &BenchConfig) -> Result<Vec<Throughput>> {
    cfg.validate()?;
    let _guard = bench_lock()?;
    let x = bench_input(cfg, 3);
    with_threads(cfg.threads, || {
        for _ in 0..cfg.warmup_iters {
            for net in nets.iter_mut() {
                net.forward(&x, Mode::Eval)?;
            }
        }
        let mut rates = vec![Vec::with_capacity(cfg.timed_iters); nets.len()];
        for _ in 0..cfg.timed_iters {
            for (net, r) in nets.iter_mut().zip(&mut rates) {
                let start = Instant::now();
                net.forward(&x, Mode::Eval)?;
                r.push(cfg.batch as f64 / start.elapsed().as_secs_f64().max(1e-12));
            }
        }
        Ok(rates.into_iter().map(Throughput::from_samples).collect())
    })?
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    /// Embedded-Gaussian non-local block.
    Nl,
    /// Non-local block with keys and values pooled to 10x10.
    NlCompressed,
    /// 3x3 convolution with a spatial-bias branch, BN and ReLU.
    Sb,
    /// The spatial-bias branch alone, upsampled to the input size.
    SbGenerate,
    /// Plain 3x3 convolution.
    Conv,
}

impl ProbeKind {
    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Nl => "nl",
            ProbeKind::NlCompressed => "nl_compressed",
            ProbeKind::Sb => "sb",
            ProbeKind::SbGenerate => "sb_generate",
            ProbeKind::Conv => "conv",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub block: String,
    /// Spatial positions `H * W`.
    pub n: usize,
    /// Median seconds per forward pass.
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub kind: ProbeKind,
    pub channels: usize,
    /// Slope of `ln(seconds)` against `ln(n)`.
    pub exponent: f64,
    pub r2: f64,
    pub points: Vec<ScalingPoint>,
    /// Set when `r2 < 0.9`.
    pub warning: Option<String>,
}

pub const MIN_R2: f64 = 0.9;
pub const MIN_REPS: usize = 20;

/// Least-squares fit `y = a + b x`; returns `(b, r2)`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, r2)
}

/// Times one block at batch 1 over square `resolutions` and fits the
/// log-log slope of time against the number of positions.
pub fn scaling_probe(kind: ProbeKind, channels: usize, resolutions: &[usize], reps: usize, seed: u64) -> Result<ScalingFit> {
    if resolutions.len() < 3 {
        return Err(Error::config(format!("scaling: need at least 3 resolutions, got {}", resolutions.len())));
    }
    if reps < MIN_REPS {
        return Err(Error::config(format!("scaling: need at least {MIN_REPS} repetitions, got {reps}")));
    }
    let _guard = bench_lock()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut forward: Box<dyn FnMut(&Tensor<f32>) -> Result<Tensor<f32>>> = match kind {
        ProbeKind::Nl => {
            let mut b = NlBlock::<f32>::new(channels, None, &mut rng)?;
            Box::new(move |x| b.forward(x, Mode::Eval))
        }
        ProbeKind::NlCompressed => {
            let mut b = NlBlock::<f32>::new(channels, Some(NL_COMPRESS_DEFAULT), &mut rng)?;
            Box::new(move |x| b.forward(x, Mode::Eval))
        }
        ProbeKind::SbGenerate => {
            let mut b = SpatialBias::<f32>::new(channels, SbConfig::default(), &mut rng)?;
            Box::new(move |x| b.generate(x, x.h(), x.w(), Mode::Eval))
        }
        ProbeKind::Sb => {
            let conv = Conv2d::new(channels, channels, 3, 1, 1, &mut rng);
            let mut b = BiasedConv::<f32>::new(conv, SbConfig::default(), &mut rng)?;
            Box::new(move |x| b.forward(x, Mode::Eval))
        }
        ProbeKind::Conv => {
            let mut c = Conv2d::<f32>::new(channels, channels, 3, 1, 1, &mut rng);
            Box::new(move |x| c.forward(x, Mode::Eval))
        }
    };
    let mut points = Vec::with_capacity(resolutions.len());
    for &r in resolutions {
        let x = Tensor::randn([1, channels, r, r], 1.0, &mut rng);
        forward(&x)?;
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let start = Instant::now();
            forward(&x)?;
            times.push(start.elapsed().as_secs_f64());
        }
        times.sort_by(f64::total_cmp);
        points.push(ScalingPoint {
            block: kind.name().into(),
            n: r * r,
            seconds: quantile(&times, 0.5),
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| (p.n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.seconds.max(1e-12).ln()).collect();
    let (exponent, r2) = fit_line(&xs, &ys);
    let warning = (r2 < MIN_R2).then(|| format!("unreliable measurement: R^2 = {r2:.3} < {MIN_R2}"));
    Ok(ScalingFit {
        kind,
        channels,
        exponent,
        r2,
        points,
        warning,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub network: Option<String>,
    pub params: Option<u64>,
    pub macs: Option<u64>,
    pub samples_per_sec: Option<f64>,
    pub samples_per_sec_std: Option<f64>,
    pub samples_per_sec_iqr: Option<f64>,
    pub scaling_points: Vec<ScalingPoint>,
    pub training: Vec<EpochMetrics>,
}

impl MetricsReport {
    pub fn set_throughput(&mut self, t: &Throughput) {
        self.samples_per_sec = Some(t.median);
        self.samples_per_sec_std = Some(t.std);
        self.samples_per_sec_iqr = Some(t.iqr());
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    #[default]
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::config(format!("format: expected csv or json, got `{other}`"))),
        }
    }
}

/// Long-format CSV columns; one row per scalar.
pub const REPORT_CSV_HEADER: [&str; 5] = ["section", "index", "split", "key", "value"];
const TRAINING_KEYS: [&str; 6] = ["epoch", "loss", "top1", "top5", "lr", "throughput"];

type Row = [String; 5];

fn row(section: &str, index: String, split: &str, key: &str, value: String) -> Row {
    [section.into(), index, split.into(), key.into(), value]
}

fn report_rows(r: &MetricsReport) -> Vec<Row> {
    let mut rows = Vec::new();
    let summary = [
        ("network", r.network.clone()),
        ("params", r.params.map(|v| v.to_string())),
        ("macs", r.macs.map(|v| v.to_string())),
        ("samples_per_sec", r.samples_per_sec.map(|v| v.to_string())),
        ("samples_per_sec_std", r.samples_per_sec_std.map(|v| v.to_string())),
        ("samples_per_sec_iqr", r.samples_per_sec_iqr.map(|v| v.to_string())),
    ];
    for (key, v) in summary {
        if let Some(v) = v {
            rows.push(row("summary", String::new(), "", key, v));
        }
    }
    for (i, p) in r.scaling_points.iter().enumerate() {
        rows.push(row("scaling", i.to_string(), &p.block, "n", p.n.to_string()));
        rows.push(row("scaling", i.to_string(), &p.block, "seconds", p.seconds.to_string()));
    }
    for (i, m) in r.training.iter().enumerate() {
        let values = [m.epoch as f64, m.loss, m.top1, m.top5, m.lr, m.throughput];
        for (key, v) in TRAINING_KEYS.iter().zip(values) {
            rows.push(row("training", i.to_string(), &m.split, key, v.to_string()));
        }
    }
    rows
}

fn bad_row(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("report row {line}: {msg}"))
}

fn parse_num<V: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<V> {
    v.parse().map_err(|_| bad_row(line, format!("`{key}` value `{v}` is not a number")))
}

fn rows_to_report(rows: Vec<Row>) -> Result<MetricsReport> {
    let mut r = MetricsReport::default();
    for (line, [section, index, split, key, value]) in rows.into_iter().enumerate() {
        let line = line + 2;
        match section.as_str() {
            "summary" => match key.as_str() {
                "network" => r.network = Some(value),
                "params" => r.params = Some(parse_num(line, &key, &value)?),
                "macs" => r.macs = Some(parse_num(line, &key, &value)?),
                "samples_per_sec" => r.samples_per_sec = Some(parse_num(line, &key, &value)?),
                "samples_per_sec_std" => r.samples_per_sec_std = Some(parse_num(line, &key, &value)?),
                "samples_per_sec_iqr" => r.samples_per_sec_iqr = Some(parse_num(line, &key, &value)?),
                _ => return Err(bad_row(line, format!("unknown summary key `{key}`"))),
            },
            "scaling" => {
                let i: usize = parse_num(line, "index", &index)?;
                if i == r.scaling_points.len() {
                    r.scaling_points.push(ScalingPoint {
                        block: split.clone(),
                        n: 0,
                        seconds: 0.0,
                    });
                }
                let p = r.scaling_points.get_mut(i).ok_or_else(|| bad_row(line, "scaling index out of order"))?;
                match key.as_str() {
                    "n" => p.n = parse_num(line, &key, &value)?,
                    "seconds" => p.seconds = parse_num(line, &key, &value)?,
                    _ => return Err(bad_row(line, format!("unknown scaling key `{key}`"))),
                }
            }
            "training" => {
                let i: usize = parse_num(line, "index", &index)?;
                if i == r.training.len() {
                    r.training.push(EpochMetrics {
                        epoch: 0,
                        split: split.clone(),
                        loss: 0.0,
                        top1: 0.0,
                        top5: 0.0,
                        lr: 0.0,
                        throughput: 0.0,
                    });
                }
                let m = r.training.get_mut(i).ok_or_else(|| bad_row(line, "training index out of order"))?;
                let v: f64 = parse_num(line, &key, &value)?;
                match key.as_str() {
                    "epoch" => m.epoch = v as usize,
                    "loss" => m.loss = v,
                    "top1" => m.top1 = v,
                    "top5" => m.top5 = v,
                    "lr" => m.lr = v,
                    "throughput" => m.throughput = v,
                    _ => return Err(bad_row(line, format!("unknown training key `{key}`"))),
                }
            }
            other => return Err(bad_row(line, format!("unknown section `{other}`"))),
        }
    }
    Ok(r)
}

pub fn report_to_string(report: &MetricsReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => {
            serde_json::to_string_pretty(report).map_err(|e| Error::Format(format!("report: {e}")))
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| Error::Format(format!("report: {e}"));
            w.write_record(REPORT_CSV_HEADER).map_err(csv_err)?;
            for r in report_rows(report) {
                w.write_record(&r).map_err(csv_err)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Format(format!("report: {e}")))?;
            String::from_utf8(bytes).map_err(|e| Error::Format(format!("report: {e}")))
        }
    }
}

pub fn report_from_str(text: &str, format: ReportFormat) -> Result<MetricsReport> {
    match format {
        ReportFormat::Json => serde_json::from_str(text).map_err(|e| Error::Format(format!("report: {e}"))),
        ReportFormat::Csv => {
            let mut r = csv::Reader::from_reader(text.as_bytes());
            let header: Vec<String> = r
                .headers()
                .map_err(|e| Error::Format(format!("report: {e}")))?
                .iter()
                .map(str::to_string)
                .collect();
            if header != REPORT_CSV_HEADER {
                return Err(Error::Format(format!("report: unexpected header {header:?}")));
            }
            let rows = r
                .deserialize::<Row>()
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("report: {e}")))?;
            rows_to_report(rows)
        }
    }
}

/// Writes `report` with a deterministic field order.
pub fn export_report(report: &MetricsReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = report_to_string(report, format)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn import_report(path: &Path, format: ReportFormat) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    report_from_str(&text, format)
}

/// `n,seconds` pairs for plotting.
pub fn scaling_csv(points: &[ScalingPoint]) -> String {
    let mut s = String::from("n,seconds\n");
    for p in points {
        s.push_str(&format!("{},{}\n", p.n, p.seconds));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report() -> MetricsReport {
        MetricsReport {
            network: Some("resnet50".into()),
            params: Some(25_557_032),
            macs: Some(4_089_184_256),
            samples_per_sec: Some(12.345678901234567),
            samples_per_sec_std: Some(0.1),
            samples_per_sec_iqr: Some(0.2),
            scaling_points: vec![ScalingPoint {
                block: "nl".into(),
                n: 256,
                seconds: 1.5e-3,
            }],
            training: vec![EpochMetrics {
                epoch: 3,
                split: "train".into(),
                loss: 0.1 + 0.2,
                top1: 97.5,
                top5: 100.0,
                lr: 0.025,
                throughput: 811.25,
            }],
        }
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
    }

    #[test]
    fn median_ignores_one_outlier() {
        let t = Throughput::from_samples(vec![10.0, 10.0, 10.0, 10.0, 0.001]);
        assert_eq!(t.median, 10.0);
    }

    #[test]
    fn line_fit_recovers_power_law() {
        let xs: Vec<f64> = [256.0f64, 1024.0, 4096.0].iter().map(|v| v.ln()).collect();
        let ys: Vec<f64> = [256.0f64, 1024.0, 4096.0].iter().map(|v| (3e-9 * v * v).ln()).collect();
        let (b, r2) = fit_line(&xs, &ys);
        assert!((b - 2.0).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bench_config_rejects_few_iters() {
        let cfg = BenchConfig {
            timed_iters: 9,
            ..BenchConfig::default()
        };
        assert!(cfg.validate().unwrap_err().is_config());
    }

    #[test]
    fn concurrent_benchmarks_are_rejected() {
        let g = bench_lock().unwrap();
        assert!(matches!(bench_lock(), Err(Error::BenchmarkBusy)));
        drop(g);
        assert!(bench_lock().is_ok());
    }

    #[test]
    fn scaling_probe_preconditions() {
        assert!(scaling_probe(ProbeKind::Conv, 4, &[4, 8], 20, 0).unwrap_err().is_config());
        assert!(scaling_probe(ProbeKind::Conv, 4, &[4, 8, 16], 19, 0).unwrap_err().is_config());
    }

    #[test]
    fn json_and_csv_round_trip() {
        let r = sample_report();
        for f in [ReportFormat::Json, ReportFormat::Csv] {
            let text = report_to_string(&r, f).unwrap();
            assert_eq!(report_from_str(&text, f).unwrap(), r, "{f:?}");
            assert_eq!(report_to_string(&r, f).unwrap(), text);
        }
    }

    #[test]
    fn empty_report_csv_is_header_only() {
        let text = report_to_string(&MetricsReport::default(), ReportFormat::Csv).unwrap();
        assert_eq!(text, "section,index,split,key,value\n");
        assert_eq!(report_from_str(&text, ReportFormat::Csv).unwrap(), MetricsReport::default());
    }

    #[test]
    fn export_names_path_on_failure() {
        let bad = Path::new("/nonexistent-dir/for/report.json");
        let e = export_report(&sample_report(), bad, ReportFormat::Json).unwrap_err();
        assert!(e.to_string().contains("/nonexistent-dir/for/report.json"));
    }

    #[test]
    fn scaling_pairs() {
        assert_eq!(scaling_csv(&sample_report().scaling_points), "n,seconds\n256,0.0015\n");
    }
}
