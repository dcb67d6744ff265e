//! Scale-invariant loss, schedules, early stopping, and the fit loop.
//!
//! The loss is the variance of centered log-depth residuals over valid
//! pixels, so any global rescaling of the prediction leaves it unchanged.
//! Optimization uses adaptive moments with decoupled weight decay and a
//! cosine-annealed learning rate; validation is checked once per epoch
//! with patience-based early stopping.

use crate::adaptation_head::{update_running_stats, BnMode};
use crate::backbone::RunMode;
use crate::dataset::{DepthMap, SceneSample, Split};
use crate::error::{Error, Result};
use crate::model::DepthModel;
use crate::tape::{ParamRegistry, Tape, Var};
use crate::tensor::Tensor;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

type ChannelStats = Vec<(Vec<f64>, Vec<f64>)>;
/// (pixel index, predicted depth, log residual) per valid pixel.
type Residuals = Vec<(usize, f64, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    /// Cosine floor; lr0 / 100 unless overridden.
    pub lr_min: f64,
    pub epochs: usize,
    pub patience: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl TrainConfig {
    /// Published protocol: batch 16, initial rate 1e-5, 50 epochs,
    /// patience 5.
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 16,
            lr0: 1e-5,
            lr_min: 1e-7,
            epochs: 50,
            patience: 5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Desk-scale smoke protocol; same shape, larger steps, fewer epochs.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 4,
            lr0: 1e-2,
            lr_min: 1e-4,
            epochs: 8,
            patience: 5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

// ---- scale-invariant loss ----

fn valid_residuals(pred: &DepthMap, gt: &DepthMap) -> Result<(Residuals, f64)> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    // (index, pred, r) with r = log d - log d_hat
    let mut picks = Vec::new();
    for i in 0..gt.depth().len() {
        let (p, g) = (pred.depth()[i], gt.depth()[i]);
        if gt.valid()[i] && pred.valid()[i] && p > 0.0 && g > 0.0 {
            picks.push((i, p, g.ln() - p.ln()));
        }
    }
    if picks.is_empty() {
        return Err(Error::Loss("no valid pixels".into()));
    }
    let mean = picks.iter().map(|(_, _, r)| *r).sum::<f64>() / picks.len() as f64;
    Ok((picks, mean))
}

/// Variance of centered log-depth residuals over valid pixels.
pub fn ssi_loss(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    let (picks, mean) = valid_residuals(pred, gt)?;
    let n = picks.len() as f64;
    Ok(picks.iter().map(|(_, _, r)| (r - mean).powi(2)).sum::<f64>() / n)
}

/// Analytic gradient of [`ssi_loss`] with respect to the prediction,
/// dense over the full map with zeros at excluded pixels.
pub fn ssi_loss_grad(pred: &DepthMap, gt: &DepthMap) -> Result<Vec<f64>> {
    let (picks, mean) = valid_residuals(pred, gt)?;
    let n = picks.len() as f64;
    let mut grad = vec![0.0; gt.depth().len()];
    for (i, p, r) in picks {
        grad[i] = -(2.0 / n) * (r - mean) / p;
    }
    Ok(grad)
}

/// Records the loss on the tape with its analytic backward pass.
pub fn ssi_loss_op(tape: &mut Tape, pred: Var, gt: &DepthMap) -> Result<Var> {
    let pred_map = pred_as_map(tape.value(pred), gt)?;
    let loss = ssi_loss(&pred_map, gt)?;
    let gt_back = gt.clone();
    Ok(tape.unary_custom(pred, Tensor::scalar(loss), move |pred_t, g| {
        let pred_map = pred_as_map(pred_t, &gt_back).expect("shape verified at forward");
        let grad = ssi_loss_grad(&pred_map, &gt_back).expect("validity verified at forward");
        let mut out = Tensor::new(pred_t.shape().to_vec(), grad);
        let scale = g.item();
        for v in out.data_mut() {
            *v *= scale;
        }
        out
    }))
}

fn pred_as_map(t: &Tensor, gt: &DepthMap) -> Result<DepthMap> {
    if t.shape() != [gt.height(), gt.width()] {
        return Err(Error::Shape(format!(
            "prediction tensor {:?} vs ground truth {}x{}",
            t.shape(),
            gt.height(),
            gt.width()
        )));
    }
    DepthMap::new(
        gt.height(),
        gt.width(),
        t.data().to_vec(),
        vec![true; t.numel()],
    )
}

// ---- schedule and stopping ----

/// Cosine annealing from lr0 down to lr_min across total_steps; steps past
/// the horizon clamp to lr_min.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_min: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return lr_min;
    }
    let progress = step as f64 / total_steps as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Halts after `patience` consecutive validation epochs without a strict
/// improvement over the best loss seen.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    strikes: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            strikes: 0,
        }
    }

    pub fn step(&mut self, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.strikes = 0;
            StopDecision::Continue
        } else {
            self.strikes += 1;
            if self.strikes >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

// ---- optimizer ----

/// Adaptive moments with decoupled weight decay.
struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    steps: usize,
    moments: Vec<(Tensor, Tensor)>,
}

impl AdamW {
    fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            steps: 0,
            moments: Vec::new(),
        }
    }

    fn ensure_slots(&mut self, grads: &[Tensor]) {
        if self.moments.is_empty() {
            self.moments = grads
                .iter()
                .map(|g| {
                    (
                        Tensor::zeros(g.shape().to_vec()),
                        Tensor::zeros(g.shape().to_vec()),
                    )
                })
                .collect();
        }
    }

    fn begin_step(&mut self) {
        self.steps += 1;
    }

    fn step_param(&mut self, slot: usize, theta: &mut Tensor, grad: &Tensor, lr: f64) {
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        let (m, v) = &mut self.moments[slot];
        for i in 0..theta.numel() {
            let g = grad.data()[i];
            let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
            let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let update = (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
            let decayed = theta.data()[i] * (1.0 - lr * self.weight_decay);
            theta.data_mut()[i] = decayed - lr * update;
        }
    }
}

// ---- fit ----

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub stopped: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub rows: Vec<EpochRow>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr,stopped\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.val_loss, r.lr, r.stopped
            ));
        }
        out
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.train_loss)
    }
}

/// Mean evaluation-mode loss over the given pool indices.
pub fn mean_eval_loss(model: &DepthModel, pool: &[SceneSample], indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Loss("empty evaluation set".into()));
    }
    let mut total = 0.0;
    for &i in indices {
        let pred = model.predict(&pool[i])?;
        total += ssi_loss(&pred, &pool[i].depth)?;
    }
    Ok(total / indices.len() as f64)
}

fn shuffle(indices: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..indices.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        indices.swap(i, j);
    }
}

/// Trains the unfrozen parameters in place and returns the per-epoch
/// history. Deterministic given (model seed, pool, split, cfg, seed);
/// frozen backbone tensors are bit-identical at exit.
pub fn fit(
    model: &mut DepthModel,
    pool: &[SceneSample],
    split: &Split,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    if split.val.is_empty() {
        return Err(Error::Config("empty validation split".into()));
    }
    let steps_per_epoch = split.train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut optimizer = AdamW::new(cfg);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut history = TrainHistory::default();
    let mut master_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = split.train.clone();
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut master_rng);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(master_rng.next_u64());
        let mut epoch_loss = 0.0;
        let mut last_lr = cosine_lr(global_step, total_steps, cfg.lr0, cfg.lr_min);

        for batch in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(global_step, total_steps, cfg.lr0, cfg.lr_min);
            last_lr = lr;
            let mut tape = Tape::new();
            let mut reg = ParamRegistry::new();
            let bound = model.bind(&mut tape, &mut reg)?;
            let mut mode = RunMode::Train {
                rng: &mut dropout_rng,
            };
            let mut losses = Vec::with_capacity(batch.len());
            let mut bn_acc: Option<ChannelStats> = None;
            for &idx in batch {
                let out = model.forward(&mut tape, &bound, &pool[idx], &mut mode, &BnMode::Batch)?;
                losses.push(ssi_loss_op(&mut tape, out.depth, &pool[idx].depth)?);
                bn_acc = Some(match bn_acc {
                    None => out.bn_stats,
                    Some(acc) => acc
                        .into_iter()
                        .zip(out.bn_stats)
                        .map(|((m1, v1), (m2, v2))| {
                            (
                                m1.iter().zip(&m2).map(|(a, b)| a + b).collect(),
                                v1.iter().zip(&v2).map(|(a, b)| a + b).collect(),
                            )
                        })
                        .collect(),
                });
            }
            let mut loss = losses[0];
            for l in &losses[1..] {
                loss = tape.add(loss, *l);
            }
            let loss = tape.scale(loss, 1.0 / batch.len() as f64);
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::Train {
                    step: global_step,
                    msg: format!("loss diverged to {loss_value}"),
                });
            }
            epoch_loss += loss_value * batch.len() as f64;

            let mut grads = tape.backward(loss);
            let trainable: Vec<(String, Var)> = reg.trainable().to_vec();
            let grad_tensors: Vec<Tensor> = trainable
                .iter()
                .map(|(_, v)| {
                    grads
                        .take(*v)
                        .unwrap_or_else(|| Tensor::zeros(tape.value(*v).shape().to_vec()))
                })
                .collect();
            optimizer.ensure_slots(&grad_tensors);
            optimizer.begin_step();
            for (slot, (name, _)) in trainable.iter().enumerate() {
                let theta = model.param_mut(name).ok_or_else(|| {
                    Error::State(format!("trainable parameter {name} not found"))
                })?;
                optimizer.step_param(slot, theta, &grad_tensors[slot], lr);
            }

            if let Some(acc) = bn_acc {
                let inv = 1.0 / batch.len() as f64;
                let averaged: ChannelStats = acc
                    .into_iter()
                    .map(|(m, v)| {
                        (
                            m.iter().map(|x| x * inv).collect(),
                            v.iter().map(|x| x * inv).collect(),
                        )
                    })
                    .collect();
                update_running_stats(&mut model.head, &averaged);
            }
            global_step += 1;
        }

        let train_loss = epoch_loss / split.train.len() as f64;
        let val_loss = mean_eval_loss(model, pool, &split.val)?;
        let stopped = stopper.step(val_loss) == StopDecision::Stop;
        history.rows.push(EpochRow {
            epoch,
            train_loss,
            val_loss,
            lr: last_lr,
            stopped,
        });
        if stopped {
            break;
        }
    }
    Ok(history)
}
