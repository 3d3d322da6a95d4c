//! Minibatch SGD with momentum, coupled L2 weight decay and a step learning
//! rate schedule.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{compute_loss, LossConfig};
use crate::metrics::accuracy;
use crate::model::{MlpModel, ModelGrads};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub base_lr: f64,
    /// Steps at which the rate is multiplied by `lr_drop_factor`. Inclusive:
    /// the drop is already in effect at the named step.
    pub lr_drop_points: Vec<usize>,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl TrainConfig {
    /// Batch 128, rate 0.1 dropped tenfold at 50% and 75% of the run,
    /// momentum 0.9, weight decay 1e-4.
    pub fn with_defaults(steps: usize, loss: LossConfig, seed: u64) -> Self {
        let mut lr_drop_points = vec![steps / 2, steps * 3 / 4];
        lr_drop_points.dedup();
        lr_drop_points.retain(|&p| p > 0);
        TrainConfig {
            batch_size: 128,
            steps,
            base_lr: 0.1,
            lr_drop_points,
            lr_drop_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed,
            loss,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.base_lr
            )));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return Err(Error::config(format!(
                "drop factor must be positive, got {}",
                self.lr_drop_factor
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.lr_drop_points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "drop points must be strictly increasing, got {:?}",
                self.lr_drop_points
            )));
        }
        if self
            .lr_drop_points
            .last()
            .is_some_and(|&p| self.steps > 0 && p >= self.steps)
        {
            return Err(Error::config(format!(
                "drop points {:?} fall outside a run of {} steps",
                self.lr_drop_points, self.steps
            )));
        }
        self.loss.validate()
    }
}

/// `base_lr * factor^(number of drop points <= step)`.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    let drops = config.lr_drop_points.iter().filter(|&&p| p <= step).count();
    config.base_lr * config.lr_drop_factor.powi(drops as i32)
}

/// One momentum step on a flat buffer:
/// `v = momentum * v + grad + weight_decay * param`, then `param -= lr * v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(format!(
            "sgd buffers differ in length: params {}, grads {}, velocity {}",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Per-parameter momentum buffers shaped like an [`MlpModel`].
#[derive(Clone, Debug)]
pub struct Velocity(Vec<Vec<f64>>);

impl Velocity {
    pub fn zeros_like(model: &MlpModel) -> Self {
        let mut bufs = Vec::new();
        let mut model = model.clone();
        model.for_each_param_mut(|p| bufs.push(vec![0.0; p.len()]));
        Velocity(bufs)
    }
}

fn grad_buffers(grads: &ModelGrads) -> Vec<&[f64]> {
    let mut out = Vec::with_capacity(2 * grads.weights.len() + 1);
    for (w, b) in grads.weights.iter().zip(&grads.biases) {
        out.push(w.data());
        out.push(b.as_slice());
    }
    out.push(grads.class_weights.data());
    out
}

/// Applies [`sgd_step`] to every parameter of `model`.
pub fn apply_sgd(
    model: &mut MlpModel,
    grads: &ModelGrads,
    velocity: &mut Velocity,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let gbufs = grad_buffers(grads);
    if gbufs.len() != velocity.0.len() {
        return Err(Error::shape("gradient layout does not match the model"));
    }
    let mut idx = 0;
    let mut result = Ok(());
    model.for_each_param_mut(|p| {
        if result.is_ok() {
            result = sgd_step(
                p,
                gbufs[idx],
                &mut velocity.0[idx],
                lr,
                momentum,
                weight_decay,
            );
        }
        idx += 1;
    });
    result
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub c_all: f64,
    pub c_ce: f64,
    pub c_sep: f64,
    /// Accuracy on the minibatch, from the plain cosine logits.
    pub train_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub model: MlpModel,
}

impl TrainReport {
    pub fn final_separator_loss(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.c_sep)
    }

    /// `step,lr,c_all,c_ce,c_sep,train_acc` with a header row.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "lr", "c_all", "c_ce", "c_sep", "train_acc"])?;
        for r in &self.records {
            w.write_record(&[
                r.step.to_string(),
                r.lr.to_string(),
                r.c_all.to_string(),
                r.c_ce.to_string(),
                r.c_sep.to_string(),
                r.train_acc.to_string(),
            ])?;
        }
        w.flush()
    }
}

/// Yields minibatch index lists, reshuffling with a fresh permutation at the
/// start of every epoch. The last partial batch of an epoch is kept.
struct Batches {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl Batches {
    fn new(len: usize, batch_size: usize, seed: u64) -> Self {
        Batches {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..len).collect(),
            pos: len,
            batch_size,
        }
    }

    fn next_batch(&mut self) -> &[usize] {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = &self.order[self.pos..end];
        self.pos = end;
        batch
    }
}

/// Trains `model` on `data` and returns the per-step records and the final
/// model. The shuffling stream is seeded from `config.seed`.
pub fn train(model: MlpModel, data: &Dataset, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::input("cannot train on an empty dataset"));
    }
    if data.dim() != model.input_dim() {
        return Err(Error::shape(format!(
            "model expects {} features, dataset has {}",
            model.input_dim(),
            data.dim()
        )));
    }
    if data.num_classes > model.num_classes() {
        return Err(Error::shape(format!(
            "dataset has {} classes, model head has {}",
            data.num_classes,
            model.num_classes()
        )));
    }

    let mut model = model;
    let mut velocity = Velocity::zeros_like(&model);
    let mut batches = Batches::new(data.len(), config.batch_size, config.seed);
    let mut records = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let idx = batches.next_batch();
        let x = data.features.select_rows(idx);
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();

        let trace = model.forward(&x)?;
        let loss = compute_loss(
            &trace.embeddings,
            &model.class_weights,
            &labels,
            &config.loss,
        )?;
        let grads = model.backward(&trace, &loss.grad_embeddings, &loss.grad_weights)?;
        let lr = lr_at(step, config);
        records.push(StepRecord {
            step,
            lr,
            c_all: loss.total_loss,
            c_ce: loss.ce_loss,
            c_sep: loss.separator_loss,
            train_acc: accuracy(&loss.logits, &labels)?,
        });
        apply_sgd(
            &mut model,
            &grads,
            &mut velocity,
            lr,
            config.momentum,
            config.weight_decay,
        )?;
    }
    Ok(TrainReport { records, model })
}
