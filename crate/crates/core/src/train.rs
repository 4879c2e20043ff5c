//! Datasets, SGD training and evaluation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Network;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::layers::{Mode, Module, ParamKind};
use crate::tensor::{Real, Tensor};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    pub fn normalization(self) -> Normalization {
        match self {
            CifarVariant::Cifar10 => Normalization {
                mean: [0.4914, 0.4822, 0.4465],
                std: [0.2470, 0.2435, 0.2616],
            },
            CifarVariant::Cifar100 => Normalization {
                mean: [0.5071, 0.4865, 0.4409],
                std: [0.2673, 0.2564, 0.2762],
            },
        }
    }

    /// File names of the training and test splits inside an extracted
    /// archive directory.
    fn split_files(self, split: Split) -> Vec<&'static str> {
        match (self, split) {
            (CifarVariant::Cifar10, Split::Train) => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            (CifarVariant::Cifar10, Split::Test) => vec!["test_batch.bin"],
            (CifarVariant::Cifar100, Split::Train) => vec!["train.bin"],
            (CifarVariant::Cifar100, Split::Test) => vec!["test.bin"],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel statistics applied to `x / 255`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `(n, 3, h, w)` bytes, channel planes in R, G, B order.
    pub images: Vec<u8>,
    pub labels: Vec<u32>,
    /// CIFAR-100 coarse labels, kept so files can be written back unchanged.
    pub coarse: Option<Vec<u8>>,
    pub num_classes: usize,
    pub side: usize,
    pub norm: Normalization,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn pixels(&self) -> usize {
        3 * self.side * self.side
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let p = self.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    /// The first `n` samples.
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.pixels()].to_vec(),
            labels: self.labels[..n].to_vec(),
            coarse: self.coarse.as_ref().map(|c| c[..n].to_vec()),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            images: Vec::new(),
            labels: Vec::new(),
            coarse: None,
            num_classes: self.num_classes,
            side: self.side,
            norm: self.norm,
        }
    }

    /// Normalized `(len, 3, side, side)` batch. With `augment`, each image
    /// gets a random 4-pixel-padded crop and a random horizontal flip.
    pub fn batch<T: Real>(&self, indices: &[usize], augment: Option<&mut ChaCha8Rng>) -> Tensor<T> {
        let s = self.side;
        let plane = s * s;
        let mut data = Vec::with_capacity(indices.len() * self.pixels());
        let mut aug = augment;
        for &i in indices {
            let img = self.image(i);
            let (dy, dx, flip) = match aug.as_deref_mut() {
                Some(rng) => (rng.gen_range(-4i64..=4), rng.gen_range(-4i64..=4), rng.gen_bool(0.5)),
                None => (0, 0, false),
            };
            for c in 0..3 {
                let (m, sd) = (self.norm.mean[c], self.norm.std[c]);
                for y in 0..s {
                    for x in 0..s {
                        let sx = if flip { s - 1 - x } else { x } as i64 + dx;
                        let sy = y as i64 + dy;
                        let v = if (0..s as i64).contains(&sy) && (0..s as i64).contains(&sx) {
                            (img[c * plane + sy as usize * s + sx as usize] as f64 / 255.0 - m) / sd
                        } else {
                            0.0
                        };
                        data.push(T::from_f64_lossy(v));
                    }
                }
            }
        }
        Tensor::from_vec([indices.len(), 3, s, s], data).expect("batch volume")
    }
}

/// Parses the CIFAR binary format: per record, the label byte(s) followed by
/// 3072 bytes of R, G and B planes.
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant) -> Result<Dataset> {
    let stride = variant.record_len();
    if bytes.is_empty() {
        return Err(Error::Format("CIFAR file is empty".into()));
    }
    if bytes.len() % stride != 0 {
        let offset = bytes.len() - bytes.len() % stride;
        return Err(Error::Parse {
            offset,
            msg: format!(
                "truncated record: {} bytes left, records are {stride} bytes",
                bytes.len() - offset
            ),
        });
    }
    let n = bytes.len() / stride;
    let classes = variant.num_classes();
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    let mut coarse = (variant == CifarVariant::Cifar100).then(|| Vec::with_capacity(n));
    for (r, rec) in bytes.chunks_exact(stride).enumerate() {
        let lb = variant.label_bytes();
        let label = rec[lb - 1] as usize;
        if label >= classes {
            return Err(Error::Range {
                offset: r * stride + lb - 1,
                msg: format!("label {label} outside 0..{classes}"),
            });
        }
        if let Some(c) = coarse.as_mut() {
            c.push(rec[0]);
        }
        labels.push(label as u32);
        images.extend_from_slice(&rec[lb..]);
    }
    Ok(Dataset {
        images,
        labels,
        coarse,
        num_classes: classes,
        side: CIFAR_SIDE,
        norm: variant.normalization(),
    })
}

/// Serializes `ds` in the CIFAR binary format. Missing coarse labels are
/// written as zero.
pub fn write_cifar(ds: &Dataset, variant: CifarVariant) -> Result<Vec<u8>> {
    if ds.side != CIFAR_SIDE {
        return Err(Error::Format(format!("CIFAR images are 32x32, dataset has side {}", ds.side)));
    }
    let mut out = Vec::with_capacity(ds.len() * variant.record_len());
    for i in 0..ds.len() {
        let label = u8::try_from(ds.labels[i])
            .ok()
            .filter(|&l| (l as usize) < variant.num_classes())
            .ok_or_else(|| Error::Format(format!("label {} does not fit {variant:?}", ds.labels[i])))?;
        if variant == CifarVariant::Cifar100 {
            out.push(ds.coarse.as_ref().map_or(0, |c| c[i]));
        }
        out.push(label);
        out.extend_from_slice(ds.image(i));
    }
    Ok(out)
}

/// Loads a CIFAR binary file, or the given split from an extracted archive
/// directory.
pub fn load_cifar(path: &Path, variant: CifarVariant, split: Split) -> Result<Dataset> {
    let files: Vec<PathBuf> = if path.is_dir() {
        variant.split_files(split).into_iter().map(|f| path.join(f)).collect()
    } else {
        vec![path.to_path_buf()]
    };
    let mut all: Option<Dataset> = None;
    for f in files {
        let bytes = std::fs::read(&f).map_err(|e| Error::io(&f, e))?;
        let part = parse_cifar(&bytes, variant).map_err(|e| match e {
            Error::Parse { offset, msg } => Error::Parse {
                offset,
                msg: format!("{}: {msg}", f.display()),
            },
            other => other,
        })?;
        match all.as_mut() {
            None => all = Some(part),
            Some(acc) => {
                acc.images.extend(part.images);
                acc.labels.extend(part.labels);
                if let (Some(a), Some(b)) = (acc.coarse.as_mut(), part.coarse) {
                    a.extend(b);
                }
            }
        }
    }
    all.ok_or_else(|| Error::Format(format!("{}: no CIFAR files found", path.display())))
}

/// Side of the square patch marking a class in synthetic images.
pub const PATCH: usize = 8;

/// Seeded, class-balanced 32x32 images on a dim noisy background. Class `c`
/// is marked by a bright patch at grid cell `c mod 16` in channel
/// `(c / 16) mod 3`.
pub fn synthetic_dataset(n: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || n < num_classes {
        return Err(Error::config(format!(
            "synthetic dataset needs n >= num_classes >= 1, got n={n}, classes={num_classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<u32> = (0..n).map(|i| (i % num_classes) as u32).collect();
    labels.shuffle(&mut rng);
    let s = CIFAR_SIDE;
    let cells = s / PATCH;
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    for &label in &labels {
        let c = label as usize;
        let (cell, channel) = (c % (cells * cells), (c / (cells * cells)) % 3);
        let (py, px) = ((cell / cells) * PATCH, (cell % cells) * PATCH);
        for ch in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    let inside = ch == channel && (py..py + PATCH).contains(&y) && (px..px + PATCH).contains(&x);
                    let v: u8 = if inside { rng.gen_range(180..=255) } else { rng.gen_range(0..=90) };
                    images.push(v);
                }
            }
        }
    }
    Ok(Dataset {
        images,
        labels,
        coarse: None,
        num_classes,
        side: s,
        norm: Normalization {
            mean: [0.5; 3],
            std: [0.25; 3],
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// Multiply the rate by `factor` every `period` epochs.
    Step { period: usize, factor: f64 },
    /// Half-cosine decay from `lr` to zero over the run.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub seed: u64,
    /// Cap on the number of training samples.
    pub subset: Option<usize>,
    pub augment: bool,
    /// Stop once the training top-1 accuracy (percent) reaches this value.
    pub stop_at_top1: Option<f64>,
    /// Epochs that always run before `stop_at_top1` is consulted.
    pub min_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 300,
            lr: 0.25,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: Schedule::Step {
                period: 75,
                factor: 0.1,
            },
            seed: 0,
            subset: None,
            augment: false,
            stop_at_top1: None,
            min_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr: must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum: must lie in [0, 1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay: must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size: must be at least 1"));
        }
        if let Schedule::Step { period: 0, .. } = self.schedule {
            return Err(Error::config("schedule.period: must be at least 1"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Step { period, factor } => self.lr * factor.powi((epoch / period.max(1)) as i32),
            Schedule::Cosine => {
                let t = epoch as f64 / self.epochs.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// SGD with momentum and L2 weight decay:
/// `v = mu * v + (g + wd * p)`, `p -= lr * v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one update to every learnable tensor and clears its gradient.
    pub fn step<M: Module<f32> + ?Sized>(&mut self, model: &mut M, lr: f64) {
        let (mu, wd, lr) = (self.momentum as f32, self.weight_decay as f32, lr as f32);
        let velocity = &mut self.velocity;
        let mut slot = 0;
        model.visit("", &mut |_, kind, t| {
            if kind != ParamKind::Learnable {
                return;
            }
            if velocity.len() == slot {
                velocity.push(vec![0.0; t.len()]);
            }
            let v = &mut velocity[slot];
            slot += 1;
            let grad = t.grad().map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
            for ((p, vi), g) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                *vi = mu * *vi + g + wd * *p;
                *p -= lr * *vi;
            }
            t.zero_grad();
        });
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[u32]) -> Result<(f64, Tensor<T>)> {
    let [n, k, _, _] = logits.dims();
    if labels.len() != n || logits.h() * logits.w() != 1 {
        return Err(Error::dim(
            "cross_entropy",
            format!("logits {:?} with {} labels", logits.dims(), labels.len()),
        ));
    }
    let mut grad = Vec::with_capacity(n * k);
    let mut loss = 0.0;
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let label = label as usize;
        if label >= k {
            return Err(Error::dim("cross_entropy", format!("label {label} with {k} classes")));
        }
        let row: Vec<f64> = row.iter().map(|v| v.to_f64_lossy()).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += sum.ln() + max - row[label];
        for (j, v) in row.iter().enumerate() {
            let p = (v - max).exp() / sum;
            let g = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
            grad.push(T::from_f64_lossy(g));
        }
    }
    Ok((loss / n as f64, Tensor::from_vec(logits.dims(), grad)?))
}

/// Indices of the `k` largest entries of `row`, ties going to the lower index.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Counts of samples whose label is in the top-1 and top-5 predictions.
pub fn topk_hits<T: Real>(logits: &Tensor<T>, labels: &[u32]) -> (usize, usize) {
    let k = logits.c();
    let (mut h1, mut h5) = (0, 0);
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let row: Vec<f64> = row.iter().map(|v| v.to_f64_lossy()).collect();
        let top = top_k(&row, 5.min(k));
        h1 += usize::from(top[0] == label as usize);
        h5 += usize::from(top.contains(&(label as usize)));
    }
    (h1, h5)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Percent.
    pub top1: f64,
    /// Percent.
    pub top5: f64,
    pub loss: f64,
}

/// Eval-mode accuracy and mean loss over `data`.
pub fn evaluate(net: &mut Network<f32>, data: &Dataset, batch: usize) -> Result<EvalResult> {
    let (mut h1, mut h5, mut loss) = (0, 0, 0.0);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let x = data.batch::<f32>(chunk, None);
        let labels: Vec<u32> = chunk.iter().map(|&i| data.labels[i]).collect();
        let logits = net.forward(&x, Mode::Eval)?;
        let (l, _) = cross_entropy(&logits, &labels)?;
        let (a, b) = topk_hits(&logits, &labels);
        h1 += a;
        h5 += b;
        loss += l * chunk.len() as f64;
    }
    let n = data.len().max(1) as f64;
    Ok(EvalResult {
        top1: 100.0 * h1 as f64 / n,
        top5: 100.0 * h5 as f64 / n,
        loss: loss / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub lr: f64,
    /// Samples per second.
    pub throughput: f64,
}

pub const METRICS_HEADER: [&str; 7] = ["epoch", "split", "loss", "top1", "top5", "lr", "throughput"];

pub fn write_metrics_csv(rows: &[EpochMetrics], path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err)?;
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochMetrics>> {
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(Error::Format(format!("{}: unexpected header {header:?}", path.display())));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub series: Vec<EpochMetrics>,
    pub best_top1: Option<f64>,
    pub final_loss: Option<f64>,
}

/// One forward/backward/update on a batch; returns the loss and top-1 hits.
pub fn train_step(net: &mut Network<f32>, opt: &mut Sgd, x: &Tensor<f32>, labels: &[u32], lr: f64) -> Result<(f64, usize, usize)> {
    let logits = net.forward(x, Mode::Train)?;
    let (loss, d) = cross_entropy(&logits, labels)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss} with finite logits")));
    }
    let (h1, h5) = topk_hits(&logits, labels);
    net.backward(&d)?;
    opt.step(net, lr);
    Ok((loss, h1, h5))
}

/// Trains `net` on `data`, optionally evaluating on `val` after each epoch.
///
/// With `out_dir`, writes `metrics.csv`, `last.sbnt` and `best.sbnt`; the
/// best epoch is chosen by validation top-1 when `val` is given, otherwise by
/// training top-1.
pub fn train(
    net: &mut Network<f32>,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.num_classes > net.spec.num_classes {
        return Err(Error::config(format!(
            "dataset has {} classes, network outputs {}",
            data.num_classes, net.spec.num_classes
        )));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let data = match cfg.subset {
        Some(n) => data.truncated(n),
        None => data.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let start = Instant::now();
        let (mut loss, mut h1, mut h5) = (0.0, 0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let x = data.batch::<f32>(chunk, cfg.augment.then_some(&mut rng));
            let labels: Vec<u32> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (l, a, b) = train_step(net, &mut opt, &x, &labels, lr)?;
            loss += l * chunk.len() as f64;
            h1 += a;
            h5 += b;
        }
        let n = data.len().max(1) as f64;
        let train_row = EpochMetrics {
            epoch,
            split: "train".into(),
            loss: loss / n,
            top1: 100.0 * h1 as f64 / n,
            top5: 100.0 * h5 as f64 / n,
            lr,
            throughput: n / start.elapsed().as_secs_f64().max(1e-9),
        };
        let mut score = train_row.top1;
        report.final_loss = Some(train_row.loss);
        report.series.push(train_row.clone());
        if let Some(v) = val {
            let start = Instant::now();
            let r = evaluate(net, v, cfg.batch_size)?;
            score = r.top1;
            report.series.push(EpochMetrics {
                epoch,
                split: "val".into(),
                loss: r.loss,
                top1: r.top1,
                top5: r.top5,
                lr,
                throughput: v.len() as f64 / start.elapsed().as_secs_f64().max(1e-9),
            });
        }
        if report.best_top1.map_or(true, |b| score > b) {
            report.best_top1 = Some(score);
            if let Some(dir) = out_dir {
                checkpoint::save(net, &dir.join("best.sbnt"))?;
            }
        }
        if let Some(dir) = out_dir {
            write_metrics_csv(&report.series, &dir.join("metrics.csv"))?;
        }
        let done = cfg.stop_at_top1.is_some_and(|t| train_row.top1 >= t) && epoch + 1 >= cfg.min_epochs;
        if done {
            break;
        }
    }
    if let Some(dir) = out_dir {
        checkpoint::save(net, &dir.join("last.sbnt"))?;
        write_metrics_csv(&report.series, &dir.join("metrics.csv"))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ParamVisitor;

    fn records(variant: CifarVariant, labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            if variant == CifarVariant::Cifar100 {
                out.push(7);
            }
            out.push(l);
            out.extend((0..CIFAR_PIXELS).map(|p| ((p * 31 + i * 7) % 256) as u8));
        }
        out
    }

    #[test]
    fn cifar_round_trip() {
        for v in [CifarVariant::Cifar10, CifarVariant::Cifar100] {
            let bytes = records(v, &[0, 3, 9]);
            let ds = parse_cifar(&bytes, v).unwrap();
            assert_eq!(ds.len(), 3);
            assert_eq!(ds.labels, vec![0, 3, 9]);
            assert_eq!(write_cifar(&ds, v).unwrap(), bytes);
        }
    }

    #[test]
    fn cifar100_record_stride_and_range() {
        assert_eq!(CifarVariant::Cifar100.record_len(), 3074);
        assert!(parse_cifar(&records(CifarVariant::Cifar100, &[99]), CifarVariant::Cifar100).is_ok());
        let err = parse_cifar(&records(CifarVariant::Cifar100, &[5, 100]), CifarVariant::Cifar100).unwrap_err();
        assert!(matches!(err, Error::Range { offset: 3075, .. }), "{err:?}");
    }

    #[test]
    fn truncated_file_reports_offset() {
        let bytes = records(CifarVariant::Cifar10, &[1, 2]);
        let err = parse_cifar(&bytes[..bytes.len() - 5], CifarVariant::Cifar10).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 3073, .. }), "{err:?}");
        assert!(matches!(parse_cifar(&[], CifarVariant::Cifar10), Err(Error::Format(_))));
    }

    #[test]
    fn synthetic_is_balanced_and_seeded() {
        let a = synthetic_dataset(100, 10, 3).unwrap();
        assert_eq!(a, synthetic_dataset(100, 10, 3).unwrap());
        assert_ne!(a, synthetic_dataset(100, 10, 4).unwrap());
        for c in 0..10 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 10);
        }
        assert!(synthetic_dataset(5, 10, 0).unwrap_err().is_config());
    }

    #[test]
    fn step_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.25);
        assert_eq!(cfg.lr_at(74), 0.25);
        assert!((cfg.lr_at(75) - 0.025).abs() < 1e-15);
        let cos = TrainConfig {
            schedule: Schedule::Cosine,
            epochs: 10,
            ..cfg
        };
        assert_eq!(cos.lr_at(0), 0.25);
        assert!((cos.lr_at(5) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("momentum"));
        let bad = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("lr"));
        let json = r#"{"epochs": 3, "schedule": {"kind": "cosine"}, "bogus": 1}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
    }

    struct Scalar(Tensor<f32>);

    impl Module<f32> for Scalar {
        fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, f32>) {
            f(prefix, ParamKind::Learnable, &mut self.0);
        }
    }

    #[test]
    fn plain_sgd_is_gradient_descent() {
        // loss = (p - 3)^2 at p = 1 has gradient -4; one step with lr 0.1 gives 1.4
        let mut m = Scalar(Tensor::from_vec([1, 1, 1, 1], vec![1.0]).unwrap().with_grad());
        m.0.accumulate_grad(&[-4.0]);
        Sgd::new(0.0, 0.0).step(&mut m, 0.1);
        assert!((m.0.data()[0] - 1.4).abs() < 1e-7);
        assert_eq!(m.0.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn momentum_and_decay_follow_update_rule() {
        let mut m = Scalar(Tensor::from_vec([1, 1, 1, 1], vec![2.0]).unwrap().with_grad());
        let mut opt = Sgd::new(0.5, 0.1);
        m.0.accumulate_grad(&[1.0]);
        opt.step(&mut m, 1.0);
        // v = 1 + 0.2 = 1.2, p = 0.8
        assert!((m.0.data()[0] - 0.8).abs() < 1e-6);
        m.0.accumulate_grad(&[1.0]);
        opt.step(&mut m, 1.0);
        // v = 0.6 + 1 + 0.08 = 1.68, p = -0.88
        assert!((m.0.data()[0] + 0.88).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_gradient_rows_sum_to_zero() {
        let logits = Tensor::<f64>::from_vec([2, 3, 1, 1], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let (loss, d) = cross_entropy(&logits, &[2, 1]).unwrap();
        let expected = ((1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0 + 3f64.ln()) / 2.0;
        assert!((loss - expected).abs() < 1e-12);
        for row in d.data().chunks(3) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn top_k_breaks_ties_by_index() {
        assert_eq!(top_k(&[1.0, 3.0, 3.0, 0.0], 2), vec![1, 2]);
        let logits = Tensor::<f32>::from_vec([1, 3, 1, 1], vec![0.5, 0.5, 0.5]).unwrap();
        assert_eq!(topk_hits(&logits, &[0]), (1, 1));
        assert_eq!(topk_hits(&logits, &[1]), (0, 1));
    }
}
