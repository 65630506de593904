//! Cross-entropy, AdamW and the toy training loop.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::data::{DatasetConfig, SyntheticDataset};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

fn check_labels(shape: &[usize], labels: &[usize]) -> Result<(usize, usize)> {
    let &[n, k] = shape else {
        return Err(Error::invalid("cross_entropy", format!("logits must be (N, K), got {shape:?}")));
    };
    if labels.len() != n || n == 0 {
        return Err(Error::invalid("cross_entropy", format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Precondition(format!("label {bad} out of range for {k} classes")));
    }
    Ok((n, k))
}

/// Row-wise `log softmax`, stabilised by subtracting the row max.
fn log_softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = logits.to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, k) = check_labels(logits.shape(), labels)?;
    let lp = log_softmax_rows(logits.data(), k);
    Ok(-labels.iter().enumerate().map(|(i, &l)| lp[i * k + l]).sum::<f64>() / n as f64)
}

impl Tape {
    /// Fused softmax + NLL. The backward is `(softmax − onehot) / N`.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let value = self.value(logits);
        let (n, k) = check_labels(value.shape(), labels)?;
        let lp = log_softmax_rows(value.data(), k);
        let loss = -labels.iter().enumerate().map(|(i, &l)| lp[i * k + l]).sum::<f64>() / n as f64;
        let labels = labels.to_vec();
        let shape = value.shape().to_vec();
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |g, _| {
                let scale = g.data()[0] / n as f64;
                let mut d: Vec<f64> = lp.iter().map(|v| v.exp() * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= scale;
                }
                vec![Some(Tensor::from_parts(shape.clone(), d))]
            }),
        ))
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub cosine: bool,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Full-set evaluation interval in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Stop once an evaluation reaches this accuracy.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            min_learning_rate: 1e-6,
            weight_decay: 0.04,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            cosine: true,
            warmup_steps: 20,
            batch_size: 16,
            steps: 500,
            seed: 0,
            eval_every: 25,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.min_learning_rate >= 0.0 && self.min_learning_rate <= self.learning_rate) {
            return bad(format!("min_learning_rate must lie in [0, learning_rate], got {}", self.min_learning_rate));
        }
        if self.weight_decay < 0.0 {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got ({}, {})", self.beta1, self.beta2));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        Ok(())
    }

    /// Linear warmup, then cosine decay to `min_learning_rate` (or constant).
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if !self.cosine {
            return self.learning_rate;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.min_learning_rate + 0.5 * (self.learning_rate - self.min_learning_rate) * (1.0 + (PI * progress).cos())
    }
}

/// Decoupled-weight-decay Adam over the trainable tensors of a store.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, epsilon: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store.trainable().map(|(_, p)| Tensor::zeros_like(&p.value)).collect();
        AdamW {
            beta1,
            beta2,
            epsilon,
            weight_decay,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn from_config(store: &ParamStore, cfg: &TrainConfig) -> Self {
        AdamW::new(store, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.weight_decay)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr` using the gradients in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        let params: Vec<_> = store.iter_mut().filter(|p| p.role.is_trainable()).collect();
        if params.len() != self.first.len() {
            return Err(Error::Precondition(format!(
                "optimizer tracks {} tensors, store has {}",
                self.first.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, m), v) in params.into_iter().zip(&mut self.first).zip(&mut self.second) {
            if m.shape() != p.value.shape() {
                return Err(Error::shape("adamw", m.shape(), p.value.shape()));
            }
            let decay = if p.role.decays() { 1.0 - lr * self.weight_decay } else { 1.0 };
            let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
            let grad = p.gradient.data();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + (1.0 - b1) * g;
                let mhat = *mi / c1;
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let vhat = *vi / c2;
                value[i] = value[i] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Everything `train_toy` needs; the JSON schema of `train-toy --config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    #[serde(default = "ModelConfig::micro")]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DatasetConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            model: ModelConfig::micro(),
            train: TrainConfig::default(),
            data: DatasetConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainMetrics {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub steps_run: usize,
    pub losses: Vec<StepRecord>,
    pub evaluations: Vec<Evaluation>,
}

/// Eval-mode loss and accuracy over the whole dataset, in chunks.
pub fn evaluate(model: &mut Model, data: &SyntheticDataset, chunk: usize) -> Result<(f64, f64)> {
    let (mut loss, mut hits) = (0.0, 0.0);
    let indices: Vec<usize> = (0..data.len()).collect();
    for part in indices.chunks(chunk.max(1)) {
        let (x, y) = data.batch(part)?;
        let logits = model.predict(&x)?;
        loss += cross_entropy(&logits, &y)? * part.len() as f64;
        hits += accuracy(&logits, &y) * part.len() as f64;
    }
    let n = data.len() as f64;
    Ok((loss / n, hits / n))
}

/// Mini-batch AdamW training with cross-entropy. The seed fixes both the
/// initial weights and the batch order, so runs are reproducible bit for bit.
pub fn train_toy(model: &mut Model, cfg: &TrainConfig, data: &SyntheticDataset, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainMetrics> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    if data.config.num_classes > model.config.num_classes {
        return Err(Error::Config(format!(
            "{} classes in the data, {} model outputs",
            data.config.num_classes, model.config.num_classes
        )));
    }
    let mut opt = AdamW::from_config(&model.store, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut evaluations = Vec::new();
    let batch = cfg.batch_size.min(data.len());
    let mut steps_run = 0;
    for step in 0..cfg.steps {
        if order.len() < batch {
            let mut epoch: Vec<usize> = (0..data.len()).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        let idx: Vec<usize> = order.drain(..batch).collect();
        let (x, y) = data.batch(&idx)?;
        let lr = cfg.lr_at(step);
        model.store.zero_grad();
        let loss = {
            let (net, store) = model.parts();
            let mut s = crate::autodiff::Session::new(store, true);
            let xv = s.constant(x);
            let logits = net.classify(&mut s, xv)?;
            let loss = s.cross_entropy(logits, &y)?;
            s.backward(loss)?;
            s.value(loss).data()[0]
        };
        if !loss.is_finite() {
            return Err(Error::Precondition(format!("loss diverged at step {step}")));
        }
        opt.step(&mut model.store, lr)?;
        let record = StepRecord { step, lr, loss };
        on_step(&record);
        losses.push(record);
        steps_run = step + 1;
        if cfg.eval_every > 0 && steps_run % cfg.eval_every == 0 {
            let (loss, acc) = evaluate(model, data, batch)?;
            evaluations.push(Evaluation { step: steps_run, loss, accuracy: acc });
            if cfg.target_accuracy.is_some_and(|t| acc >= t) {
                break;
            }
        }
    }
    if evaluations.last().is_none_or(|e| e.step != steps_run) {
        let (loss, acc) = evaluate(model, data, batch)?;
        evaluations.push(Evaluation { step: steps_run, loss, accuracy: acc });
    }
    let last = evaluations.last().expect("at least one evaluation");
    Ok(TrainMetrics {
        initial_loss: losses.first().map_or(f64::NAN, |r| r.loss),
        final_loss: last.loss,
        train_accuracy: last.accuracy,
        steps_run,
        losses,
        evaluations,
    })
}

/// Builds the model and data described by `cfg` and trains.
pub fn run_toy(cfg: &ToyConfig, on_step: impl FnMut(&StepRecord)) -> Result<(Model, TrainMetrics)> {
    let mut model = Model::build(cfg.model.clone(), cfg.train.seed)?;
    let data = SyntheticDataset::generate(cfg.data.clone())?;
    let metrics = train_toy(&mut model, &cfg.train, &data, on_step)?;
    Ok((model, metrics))
}
