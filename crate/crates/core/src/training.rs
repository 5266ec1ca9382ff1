//! Optimizers and the pretraining / fine-tuning loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::mim::VisualCodebook;
use crate::decoder::{GtSegment, LossBreakdown};
use crate::model::{Model, StepResult};
use crate::nn::ParamStore;
use crate::numkit::Tensor;
use crate::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Heavy-ball momentum for SGD; 0 is plain SGD.
    pub momentum: f64,
    /// Rescales the whole gradient when its norm exceeds this; 0 disables.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Sgd, lr: 1e-2, momentum: 0.0, clip_norm: 0.0 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) || !(self.clip_norm >= 0.0) {
            return Err(ModelError::Config(format!(
                "optimizer needs lr > 0, momentum in [0, 1) and clip_norm >= 0, got {} / {} / {}",
                self.lr, self.momentum, self.clip_norm
            )));
        }
        Ok(())
    }
}

pub struct Optimizer {
    cfg: OptimizerConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: i32,
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        Self { cfg: cfg.clone(), first: Vec::new(), second: Vec::new(), steps: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &mut [Tensor]) {
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.second = self.first.clone();
        }
        if self.cfg.clip_norm > 0.0 {
            let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
            if norm > self.cfg.clip_norm {
                let s = self.cfg.clip_norm / norm;
                for g in grads.iter_mut() {
                    g.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        self.steps += 1;
        let lr = self.cfg.lr;
        match self.cfg.kind {
            OptimizerKind::Sgd if self.cfg.momentum == 0.0 => store.sgd_step(grads, lr),
            OptimizerKind::Sgd => {
                let mu = self.cfg.momentum;
                for (vel, g) in self.first.iter_mut().zip(grads.iter()) {
                    for (v, gv) in vel.data_mut().iter_mut().zip(g.data()) {
                        *v = mu * *v + gv;
                    }
                }
                store.sgd_step(&self.first, lr);
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
                let c1 = 1.0 - b1.powi(self.steps);
                let c2 = 1.0 - b2.powi(self.steps);
                let mut update = Vec::with_capacity(grads.len());
                for ((m, v), g) in self.first.iter_mut().zip(self.second.iter_mut()).zip(grads.iter()) {
                    let mut u = Tensor::zeros(g.shape());
                    for (((mv, vv), gv), uv) in m.data_mut().iter_mut().zip(v.data_mut().iter_mut()).zip(g.data()).zip(u.data_mut()) {
                        *mv = b1 * *mv + (1.0 - b1) * gv;
                        *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                        *uv = (*mv / c1) / ((*vv / c2).sqrt() + eps);
                    }
                    update.push(u);
                }
                store.sgd_step(&update, lr);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub mask_ratio: f64,
    /// Codebook size; must match the model's vocabulary.
    pub vocab: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Image extent (width, height) the corpus is resized to.
    pub resize: (usize, usize),
    pub optimizer: OptimizerConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { mask_ratio: 0.4, vocab: 64, epochs: 20, batch_size: 8, resize: (224, 224), optimizer: OptimizerConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Image extent (width, height) samples are resized to.
    pub resize: (usize, usize),
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 4, resize: (2048, 640), optimizer: OptimizerConfig::default() }
    }
}

fn check_batch(batch_size: usize, n: usize) -> Result<(), ModelError> {
    if batch_size == 0 {
        return Err(ModelError::Config("batch_size must be at least 1".into()));
    }
    if n == 0 {
        return Err(ModelError::DegenerateBatch);
    }
    Ok(())
}

/// Per-epoch mean losses and term breakdowns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochLog {
    pub loss: f64,
    pub parts: LossBreakdown,
}

/// Runs mini-batch epochs over `n` items; `step(i, epoch)` evaluates item `i`.
fn run_epochs(
    model: &mut Model,
    n: usize,
    epochs: usize,
    batch_size: usize,
    opt_cfg: &OptimizerConfig,
    seed: u64,
    mut step: impl FnMut(&Model, usize, usize) -> Result<StepResult, ModelError>,
    mut on_epoch: impl FnMut(usize, &EpochLog),
) -> Result<Vec<EpochLog>, ModelError> {
    check_batch(batch_size, n)?;
    opt_cfg.validate()?;
    let mut opt = Optimizer::new(opt_cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut logs = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut log = EpochLog::default();
        for batch in order.chunks(batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in batch {
                let r = step(model, i, epoch)?;
                log.loss += r.loss;
                log.parts.class += r.parts.class;
                log.parts.bce += r.parts.bce;
                log.parts.dice += r.parts.dice;
                match &mut acc {
                    None => acc = Some(r.grads),
                    Some(a) => {
                        for (x, y) in a.iter_mut().zip(&r.grads) {
                            x.data_mut().iter_mut().zip(y.data()).for_each(|(p, q)| *p += q);
                        }
                    }
                }
            }
            let mut grads = acc.expect("nonempty batch");
            let k = batch.len() as f64;
            for gr in &mut grads {
                gr.data_mut().iter_mut().for_each(|v| *v /= k);
            }
            opt.step(&mut model.store, &mut grads);
        }
        let n = n as f64;
        log.loss /= n;
        log.parts.class /= n;
        log.parts.bce /= n;
        log.parts.dice /= n;
        on_epoch(epoch, &log);
        logs.push(log);
    }
    Ok(logs)
}

/// Masked-image-modeling epochs over `images`, predicting `codebook` tokens.
pub fn pretrain(
    model: &mut Model,
    images: &[Tensor],
    codebook: &VisualCodebook,
    cfg: &PretrainConfig,
    seed: u64,
    on_epoch: impl FnMut(usize, &EpochLog),
) -> Result<Vec<EpochLog>, ModelError> {
    if codebook.len() != model.cfg.vocab {
        return Err(ModelError::Config(format!("codebook has {} tokens but the model predicts {}", codebook.len(), model.cfg.vocab)));
    }
    if !(cfg.mask_ratio > 0.0 && cfg.mask_ratio < 1.0) {
        return Err(ModelError::Config(format!("mask_ratio {} must lie in (0, 1)", cfg.mask_ratio)));
    }
    let ratio = cfg.mask_ratio;
    let targets: Vec<Vec<usize>> = images.iter().map(|img| codebook.tokenize(img)).collect::<Result<_, _>>()?;
    run_epochs(
        model,
        images.len(),
        cfg.epochs,
        cfg.batch_size,
        &cfg.optimizer,
        seed,
        |m, i, epoch| {
            let mask_seed = seed ^ ((epoch as u64) << 32) ^ i as u64;
            let mut g = crate::numkit::Graph::new();
            let b = m.store.bind(&mut g, true);
            let loss = m.mim_loss(&mut g, &b, &images[i], &targets[i], ratio, mask_seed)?;
            let grads = g.gradient(loss, b.vars())?;
            Ok(StepResult { loss: g.value(loss).item(), parts: LossBreakdown::default(), grads })
        },
        on_epoch,
    )
}

/// Supervised epochs over `(image, segments)` pairs.
pub fn train(
    model: &mut Model,
    samples: &[(Tensor, Vec<GtSegment>)],
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: impl FnMut(usize, &EpochLog),
) -> Result<Vec<EpochLog>, ModelError> {
    run_epochs(model, samples.len(), cfg.epochs, cfg.batch_size, &cfg.optimizer, seed, |m, i, _| m.segmentation_step(&samples[i].0, &samples[i].1), on_epoch)
}
