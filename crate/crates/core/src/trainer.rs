//! Mini-batch SGD with validation-driven early stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{Class, Volume};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_scores, MetricsReport};
use crate::model::{Checkpoint, Model};
use crate::nn::ParamStore;
use crate::ops::loss::softmax_rows;
use crate::tensor::Tensor;

fn default_lr() -> f64 {
    0.001
}
fn default_batch() -> usize {
    6
}
fn default_patience() -> usize {
    50
}
fn default_max_epochs() -> usize {
    200
}
fn default_scale() -> f64 {
    1.0 / 255.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Heavy-ball coefficient; 0 gives plain SGD.
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// Drives batch order. Weight initialisation has its own seed.
    #[serde(default)]
    pub seed: u64,
    /// Multiplier applied to raw voxels when batches are assembled.
    #[serde(default = "default_scale")]
    pub intensity_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            momentum: 0.0,
            batch_size: default_batch(),
            patience: default_patience(),
            max_epochs: default_max_epochs(),
            seed: 0,
            intensity_scale: default_scale(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if !(self.intensity_scale > 0.0) {
            return bad("intensity_scale must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Raw voxels, `[Cin, D, H, W]`.
    pub input: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Single-channel samples from preprocessed volumes of one common shape.
    pub fn from_volumes<'a>(volumes: impl IntoIterator<Item = &'a Volume>) -> Result<Self> {
        let mut samples = Vec::new();
        for v in volumes {
            let [s, h, w] = v.extents();
            samples.push(Sample { id: v.id.clone(), input: v.voxels.clone().reshape(&[1, s, h, w])?, label: v.label.index() });
        }
        let ds = Self { samples };
        ds.check_uniform()?;
        Ok(ds)
    }

    fn check_uniform(&self) -> Result<()> {
        if let Some(first) = self.samples.first() {
            if let Some(odd) = self.samples.iter().find(|s| s.input.shape() != first.input.shape()) {
                return Err(Error::Data(format!(
                    "{} has shape {:?}, expected {:?}",
                    odd.id,
                    odd.input.shape(),
                    first.input.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Scaled `[N, Cin, D, H, W]` batch and its labels.
    pub fn batch(&self, indices: &[usize], scale: f64) -> Result<(Tensor, Vec<usize>)> {
        let mut items = Vec::with_capacity(indices.len());
        for &i in indices {
            let x = &self.samples[i].input;
            let mut shape = vec![1];
            shape.extend_from_slice(x.shape());
            items.push(x.map(|v| v * scale).reshape(&shape)?);
        }
        Ok((Tensor::concat(&items)?, indices.iter().map(|&i| self.samples[i].label).collect()))
    }
}

/// `w <- w - lr * g` for every parameter.
pub fn sgd_step(params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
    Sgd::new(lr, 0.0).step(params, grads)
}

/// SGD with optional heavy-ball momentum: `v <- m v + g`, `w <- w - lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.params().len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), params.params().len())));
        }
        for (p, g) in params.params().iter().zip(grads) {
            if p.tensor.len() != g.len() {
                return Err(Error::Shape(format!("{}: gradient length {} vs {}", p.name, g.len(), p.tensor.len())));
            }
        }
        if self.momentum == 0.0 {
            for (p, g) in params.params_mut().iter_mut().zip(grads) {
                for (w, gi) in p.tensor.data_mut().iter_mut().zip(g) {
                    *w -= self.lr * gi;
                }
            }
            return Ok(());
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        for ((p, g), v) in params.params_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, gi), vi) in p.tensor.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *w -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_weighted_f1: f64,
    pub improved: bool,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub stop: StopReason,
}

impl TrainLog {
    /// One JSON object per epoch.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: TrainLog,
    /// Weights from the epoch with the best validation weighted F1.
    pub best: Checkpoint,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// Softmax probabilities, one row per sample.
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
    pub mean_loss: f64,
}

impl Evaluation {
    pub fn predictions(&self) -> Vec<usize> {
        self.scores.iter().map(|s| crate::metrics::argmax(s)).collect()
    }
}

fn class_names(k: usize) -> Vec<String> {
    (0..k).map(|i| Class::from_index(i).map(|c| c.name().to_string()).unwrap_or_else(|_| i.to_string())).collect()
}

/// Batched inference with softmax scores and the full metrics report.
pub fn evaluate(model: &Model, ds: &Dataset, batch_size: usize, scale: f64) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let k = model.config().num_classes;
    let mut scores = Vec::with_capacity(ds.len());
    let mut loss_sum = 0.0;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = ds.batch(chunk, scale)?;
        let logits = model.predict(&x)?;
        let probs = softmax_rows(logits.data(), k);
        for (row, &l) in probs.chunks_exact(k).zip(&labels) {
            if l >= k {
                return Err(Error::Label { label: l, classes: k });
            }
            loss_sum -= row[l].max(f64::MIN_POSITIVE).ln();
            scores.push(row.to_vec());
        }
    }
    let labels = ds.labels();
    let names = class_names(k);
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let report = evaluate_scores(&labels, &scores, &name_refs)?;
    Ok(Evaluation {
        report,
        scores,
        labels,
        ids: ds.samples.iter().map(|s| s.id.clone()).collect(),
        mean_loss: loss_sum / ds.len() as f64,
    })
}

/// One pass over `train` in a shuffled order; returns mean loss and accuracy.
fn run_epoch(model: &mut Model, opt: &mut Sgd, train: &Dataset, order: &[usize], cfg: &TrainConfig, epoch: usize) -> Result<(f64, f64)> {
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let (x, labels) = train.batch(chunk, cfg.intensity_scale)?;
        let mut tape = Tape::new();
        let pv = model.params.bind(&mut tape, true);
        let xv = tape.constant(x);
        let out = model
            .forward(&mut tape, &pv, xv)
            .map_err(|e| Error::Numeric(format!("epoch {} batch {}: forward failed: {}", epoch, b, e)))?;
        let logits = tape.value(out.logits);
        let k = logits.shape()[1];
        correct += logits
            .data()
            .chunks_exact(k)
            .zip(&labels)
            .filter(|(row, &l)| crate::metrics::argmax(row) == l)
            .count();
        let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
        let lv = tape.value(loss).item()?;
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("epoch {} batch {}: loss is {}", epoch, b, lv)));
        }
        tape.backward(loss)
            .map_err(|e| Error::Numeric(format!("epoch {} batch {}: backward failed: {}", epoch, b, e)))?;
        let grads = model.params.gradients(&tape, &pv);
        opt.step(&mut model.params, &grads)?;
        loss_sum += lv * chunk.len() as f64;
    }
    Ok((loss_sum / train.len() as f64, correct as f64 / train.len() as f64))
}

/// Train until validation weighted F1 stops improving for `patience` epochs
/// or `max_epochs` is reached. `on_epoch` sees every epoch record as it is
/// produced.
pub fn train(
    mut model: Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!("need non-empty splits, got {} train / {} val", train.len(), val.len())));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let (mut best_epoch, mut best_metric) = (0, f64::NEG_INFINITY);
    let mut stop = StopReason::MaxEpochs;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (train_loss, train_accuracy) = run_epoch(&mut model, &mut opt, train, &order, cfg, epoch)?;
        let ev = evaluate(&model, val, cfg.batch_size, cfg.intensity_scale)?;
        let metric = ev.report.weighted_f1;
        let improved = metric > best_metric;
        if improved {
            best_metric = metric;
            best_epoch = epoch;
            best = Some(Checkpoint { model: model.clone(), epoch: epoch as u64, best_metric: metric });
        }
        let rec = EpochLog {
            epoch,
            train_loss,
            train_accuracy,
            val_loss: ev.mean_loss,
            val_accuracy: ev.report.accuracy,
            val_weighted_f1: metric,
            improved,
            best_epoch,
            best_metric,
            elapsed_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec)?;
        epochs.push(rec);
        if epoch - best_epoch >= cfg.patience {
            stop = StopReason::Patience;
            break;
        }
    }
    let best = best.expect("at least one epoch ran");
    Ok(TrainOutcome { log: TrainLog { epochs, best_epoch, best_metric, stop }, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Parameter;

    fn store(v: f64) -> ParamStore {
        ParamStore::from_params(vec![Parameter { name: "w".into(), tensor: Tensor::full(&[1], v) }])
    }

    #[test]
    fn sgd_examples() {
        let mut p = store(1.0);
        sgd_step(&mut p, &[vec![0.0]], 0.1).unwrap();
        assert_eq!(p.params()[0].tensor.data(), &[1.0]);
        sgd_step(&mut p, &[vec![2.0]], 0.1).unwrap();
        assert_eq!(p.params()[0].tensor.data(), &[0.8]);
        assert!(sgd_step(&mut p, &[vec![1.0, 2.0]], 0.1).is_err());
        let (mut a, mut b) = (store(0.0), store(0.0));
        sgd_step(&mut a, &[vec![1.0]], 0.25).unwrap();
        sgd_step(&mut a, &[vec![1.0]], 0.25).unwrap();
        sgd_step(&mut b, &[vec![1.0]], 0.5).unwrap();
        assert_eq!(a.params()[0].tensor.data(), b.params()[0].tensor.data());
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = store(0.0);
        let mut opt = Sgd::new(1.0, 0.5);
        opt.step(&mut p, &[vec![1.0]]).unwrap();
        opt.step(&mut p, &[vec![1.0]]).unwrap();
        assert_eq!(p.params()[0].tensor.data(), &[-2.5]);
    }

    #[test]
    fn quadratic_descent() {
        // loss = (w - 3)^2
        let mut p = store(0.0);
        let loss = |w: f64| (w - 3.0) * (w - 3.0);
        let w0 = p.params()[0].tensor.data()[0];
        sgd_step(&mut p, &[vec![2.0 * (w0 - 3.0)]], 0.1).unwrap();
        assert!(loss(p.params()[0].tensor.data()[0]) < loss(w0));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { patience: 0, ..Default::default() }.validate().is_err());
        TrainConfig::default().validate().unwrap();
    }
}
