//! Toy-scale training on the synthetic shapes.

use std::fmt::Write as _;

use crate::data::synthetic_batch;
use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};
use crate::tensor::{Float, Tensor};

/// Adam with decoupled weight decay. Decay applies only to tensors with at
/// least two dimensions, so norms and biases are exempt.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(params: &[std::sync::Arc<Tensor<T>>], lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, model: &mut Model<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} gradients",
                self.m.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (ob1, ob2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step_size = T::of(self.lr / c1);
        let inv_c2 = T::of(1.0 / c2);
        let eps = T::of(self.eps);
        for (i, g) in grads.iter().enumerate() {
            let p = model.param_mut(i);
            let decay = if p.ndim() >= 2 {
                T::of(1.0 - self.lr * self.weight_decay)
            } else {
                T::one()
            };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + ob1 * gv;
                *vv = b2 * *vv + ob2 * gv * gv;
                *pv = *pv * decay - step_size * *mv / ((*vv * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub num_classes: usize,
    pub input_size: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 32,
            lr: 1e-3,
            weight_decay: 0.05,
            seed: 0,
            num_classes: 3,
            input_size: 32,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.log_every == 0 {
            return Err(Error::config("batch and logging interval must be positive"));
        }
        if !(2..=crate::data::MAX_CLASSES).contains(&self.num_classes) {
            return Err(Error::config(format!(
                "synthetic data has 2..={} classes, got {}",
                crate::data::MAX_CLASSES,
                self.num_classes
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite())
            || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite())
        {
            return Err(Error::config(format!(
                "learning rate must be > 0 and weight decay >= 0, got lr={} wd={}",
                self.lr, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Mean loss and accuracy over one logging interval ending at `step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub train_acc: f64,
}

pub const METRICS_HEADER: &str = "step,loss,train_acc";

impl MetricRow {
    pub fn csv_line(&self) -> String {
        format!("{},{:.6},{:.6}", self.step, self.loss, self.train_acc)
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub rows: Vec<MetricRow>,
    /// Loss of every step, in order.
    pub step_losses: Vec<f64>,
}

fn correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(
                    (0, f32::NEG_INFINITY),
                    |b, (i, &v)| if v > b.1 { (i, v) } else { b },
                );
            best.0 == l
        })
        .count()
}

/// Trains `model_cfg` from seed-initialized weights. Step `s` (from 0) sees
/// samples `s*batch .. (s+1)*batch`, so no sample repeats.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_row: impl FnMut(&MetricRow) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model_cfg.num_classes != cfg.num_classes {
        return Err(Error::config(format!(
            "model has {} classes, training data has {}",
            model_cfg.num_classes, cfg.num_classes
        )));
    }
    let mut model = Model::<f32>::new(model_cfg.clone(), cfg.seed)?;
    model.check_input(&[cfg.batch, cfg.input_size, cfg.input_size, 3])?;
    let mut opt = AdamW::new(model.params(), cfg.lr, cfg.weight_decay);
    let mut rows = Vec::new();
    let mut step_losses = Vec::with_capacity(cfg.steps);
    let (mut loss_acc, mut hits, mut seen) = (0.0, 0usize, 0usize);
    for s in 0..cfg.steps {
        let start = (s * cfg.batch) as u64;
        let (x, y) = synthetic_batch(cfg.seed, start, cfg.batch, cfg.num_classes, cfg.input_size)?;
        let out = model.loss_and_grads(&x, &y)?;
        opt.step(&mut model, &out.grads)?;
        let loss = f64::from(out.loss);
        step_losses.push(loss);
        loss_acc += loss;
        hits += correct(&out.logits, &y);
        seen += cfg.batch;
        if (s + 1) % cfg.log_every == 0 {
            let row = MetricRow {
                step: s + 1,
                loss: loss_acc / cfg.log_every as f64,
                train_acc: hits as f64 / seen as f64,
            };
            on_row(&row)?;
            rows.push(row);
            (loss_acc, hits, seen) = (0.0, 0, 0);
        }
    }
    Ok(TrainOutcome {
        model,
        rows,
        step_losses,
    })
}

/// Means of consecutive `window`-step blocks of a loss curve.
pub fn block_means(losses: &[f64], window: usize) -> Vec<f64> {
    losses
        .chunks_exact(window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}
