//! Training loop for the multi-task network and the three cascaded stages.

use std::time::Instant;

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{build_network, Graph, Model, ModelRole, NetworkConfig, ParamKind};
use crate::objectives::{binary_dice, multiclass_dice_loss_grad, DiceParams};
use crate::patches::{extract, plan_patches, PatchSpec};
use crate::preprocess::{augment, AugmentParams};
use crate::volumes::{
    bounding_box, labels_to_subregions, BoundingBox, LabelMap, MultiModalVolume, Subregion,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub l2_weight: f64,
    pub dropout: f64,
    pub augmentation: bool,
    pub seed: u64,
    /// Fraction of cases held out for the scheduling metric.
    pub val_fraction: f64,
    /// Record wall time per epoch; when off the history's seconds column is 0.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 5e-4,
            plateau_factor: 0.5,
            plateau_patience: 10,
            early_stop_patience: 50,
            max_epochs: 300,
            batch_size: 1,
            l2_weight: 1e-5,
            dropout: 0.3,
            augmentation: true,
            seed: 0,
            val_fraction: 0.1,
            record_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return fail(format!("plateau_factor must lie in (0, 1), got {}", self.plateau_factor));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return fail("patience values must be at least 1".to_string());
        }
        if self.batch_size != 1 {
            return fail(format!("only batch_size 1 is supported, got {}", self.batch_size));
        }
        if !(self.initial_lr > 0.0) {
            return fail("initial_lr must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.l2_weight < 0.0 {
            return fail("dropout must lie in [0, 1) and l2_weight be non-negative".to_string());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_dice: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Epoch indices after which the learning rate was reduced.
    pub plateau_events: Vec<usize>,
    pub early_stopped: bool,
}

impl TrainingHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,val_dice,lr,seconds\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{:.3}\n",
                r.epoch, r.loss, r.val_dice, r.lr, r.seconds
            ));
        }
        out
    }
}

/// Reduce-on-plateau learning rate with early stopping on a metric to maximise.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    stop_patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
    since_reduction: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    pub improved: bool,
    pub reduced: bool,
    pub stop: bool,
}

impl PlateauScheduler {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            lr: config.initial_lr,
            factor: config.plateau_factor,
            patience: config.plateau_patience,
            stop_patience: config.early_stop_patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            since_best: 0,
            since_reduction: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    /// Feeds the metric of `epoch`; strict improvement resets both counters.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> Step {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.since_best = 0;
            self.since_reduction = 0;
            return Step {
                improved: true,
                reduced: false,
                stop: false,
            };
        }
        self.since_best += 1;
        self.since_reduction += 1;
        let mut reduced = false;
        if self.since_reduction >= self.patience {
            self.lr *= self.factor;
            self.since_reduction = 0;
            reduced = true;
        }
        Step {
            improved: false,
            reduced,
            stop: self.since_best >= self.stop_patience,
        }
    }
}

/// Adam with Keras defaults.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, model: &mut Model, grads: &[Vec<f64>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let alpha = lr * bc2.sqrt() / bc1;
        for (((param, g), m), v) in model
            .params_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &g), m), v) in param.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= alpha * *m / (v.sqrt() + self.eps);
            }
        }
    }
}

/// Objective `MDL + l2·Σw²` (convolution weights only) and its gradient.
pub fn loss_and_gradients(
    model: &Model,
    input: &Array4<f64>,
    target: &Array4<f64>,
    l2_weight: f64,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new(model.params(), true);
    let out = model.forward_graph(&mut g, input, dropout_rng)?;
    let (dice_loss, seed) =
        multiclass_dice_loss_grad(target.view(), g.value(out).view(), &DiceParams::default())?;
    let mut grads = g.backward(out, seed);
    let mut loss = dice_loss;
    if l2_weight > 0.0 {
        loss += l2_weight * model.params().conv_weight_sq_norm();
        for (param, grad) in model.params().iter().zip(&mut grads) {
            if param.kind == ParamKind::ConvWeight {
                for (g, w) in grad.iter_mut().zip(&param.data) {
                    *g += 2.0 * l2_weight * w;
                }
            }
        }
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone)]
pub struct TrainingCase {
    pub id: String,
    pub volume: MultiModalVolume,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<TrainingCase>,
    pub validation: Vec<TrainingCase>,
}

impl Dataset {
    /// Holds out the last `round(n·fraction)` cases for validation.
    pub fn split(mut cases: Vec<TrainingCase>, val_fraction: f64) -> Self {
        let n_val = (cases.len() as f64 * val_fraction).round() as usize;
        let n_val = n_val.min(cases.len().saturating_sub(1));
        let validation = cases.split_off(cases.len() - n_val);
        Self {
            train: cases,
            validation,
        }
    }
}

/// Target channels for a role, `[c, x, y, z]` as 0/1 floats.
pub fn role_target(labels: &LabelMap, role: ModelRole) -> Array4<f64> {
    let masks = labels_to_subregions(labels);
    let regions: Vec<Subregion> = match role {
        ModelRole::Multitask => Subregion::ALL.to_vec(),
        ModelRole::Cascaded(r) => vec![r],
    };
    let views: Vec<Array3<f64>> = regions
        .iter()
        .map(|r| masks.get(*r).mapv(|v| v as u8 as f64))
        .collect();
    let views: Vec<_> = views.iter().map(|a| a.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal shapes")
}

/// Patches centred on the ground-truth whole tumour, or on the volume centre
/// for tumour-free cases.
pub fn training_patches(labels: &LabelMap, patch_size: [usize; 3]) -> Result<Vec<PatchSpec>> {
    let shape = labels.shape();
    let wt = labels.labels().mapv(|v| v != 0);
    let bbox = bounding_box(&wt).unwrap_or_else(|| {
        let centre = shape.map(|n| n / 2);
        BoundingBox::centred(centre, [1; 3])
    });
    Ok(plan_patches(&bbox, shape, patch_size)?.specs)
}

/// Source of the per-epoch scheduling metric (higher is better).
pub trait Validation {
    fn validate(&mut self, model: &Model, epoch: usize) -> Result<f64>;
}

impl<F> Validation for F
where
    F: FnMut(&Model, usize) -> f64,
{
    fn validate(&mut self, model: &Model, epoch: usize) -> Result<f64> {
        Ok(self(model, epoch))
    }
}

/// Mean hard Dice (threshold 0.5, both-empty = 1) over channels and patches.
pub struct DiceValidation {
    samples: Vec<(Array4<f64>, Array4<f64>)>,
}

impl DiceValidation {
    pub fn new(cases: &[TrainingCase], role: ModelRole, patch_size: [usize; 3]) -> Result<Self> {
        let mut samples = Vec::new();
        for case in cases {
            let target = role_target(&case.labels, role);
            for spec in training_patches(&case.labels, patch_size)? {
                samples.push((
                    extract(case.volume.data().view(), &spec),
                    extract(target.view(), &spec),
                ));
            }
        }
        Ok(Self { samples })
    }
}

pub fn patch_dice(pred: &Array4<f64>, target: &Array4<f64>) -> f64 {
    let channels = pred.shape()[0];
    let mut total = 0.0;
    for (p, t) in pred.outer_iter().zip(target.outer_iter()) {
        total += binary_dice(&p.mapv(|v| v >= 0.5), &t.mapv(|v| v >= 0.5));
    }
    total / channels as f64
}

impl Validation for DiceValidation {
    fn validate(&mut self, model: &Model, _epoch: usize) -> Result<f64> {
        if self.samples.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for (input, target) in &self.samples {
            total += patch_dice(&model.forward(input, None)?, target);
        }
        Ok(total / self.samples.len() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation metric.
    pub model: Model,
    pub role: ModelRole,
    pub history: TrainingHistory,
}

fn effective_config(net: &NetworkConfig, cfg: &TrainConfig, role: ModelRole) -> NetworkConfig {
    NetworkConfig {
        out_channels: role.out_channels(),
        dropout_rate: cfg.dropout,
        weight_decay: cfg.l2_weight,
        ..net.clone()
    }
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix-style combination so nearby indices give unrelated streams
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs the optimisation loop with an explicit validation source.
pub fn train_with_validation(
    dataset: &Dataset,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    role: ModelRole,
    validation: &mut dyn Validation,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let net = effective_config(net, cfg, role);
    let mut model = build_network(&net)?;
    let mut adam = Adam::new(&model);
    let mut scheduler = PlateauScheduler::new(cfg);
    let mut history = TrainingHistory::default();
    let mut best_model = model.clone();
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();

    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let lr = scheduler.lr();
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64, 0));
        order.shuffle(&mut epoch_rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for &idx in &order {
            let case = &dataset.train[idx];
            let (volume, labels) = if cfg.augmentation {
                let params = AugmentParams::default().with_seed(mix_seed(cfg.seed, epoch as u64, idx as u64 + 1));
                augment(&case.volume, &case.labels, &params)?
            } else {
                (case.volume.clone(), case.labels.clone())
            };
            let target = role_target(&labels, role);
            for spec in training_patches(&labels, net.patch_size)? {
                let input = extract(volume.data().view(), &spec);
                let patch_target = extract(target.view(), &spec);
                let (loss, grads) =
                    loss_and_gradients(&model, &input, &patch_target, cfg.l2_weight, Some(&mut epoch_rng))?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, loss });
                }
                adam.update(&mut model, &grads, lr);
                loss_sum += loss;
                steps += 1;
            }
        }
        let val_dice = validation.validate(&model, epoch)?;
        let step = scheduler.observe(epoch, val_dice);
        if step.improved {
            best_model = model.clone();
        }
        if step.reduced {
            history.plateau_events.push(epoch);
        }
        let loss = loss_sum / steps as f64;
        history.records.push(EpochRecord {
            epoch,
            loss,
            val_dice,
            lr,
            seconds: if cfg.record_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
        log::info!("epoch {epoch}: loss {loss:.5} val_dice {val_dice:.4} lr {lr:.2e}");
        if step.stop {
            history.early_stopped = true;
            break;
        }
    }
    history.best_epoch = scheduler.best_epoch();
    Ok(TrainOutcome {
        model: best_model,
        role,
        history,
    })
}

fn default_validation(dataset: &Dataset, net: &NetworkConfig, role: ModelRole) -> Result<DiceValidation> {
    // without held-out cases the training cases drive scheduling
    let cases = if dataset.validation.is_empty() {
        &dataset.train
    } else {
        &dataset.validation
    };
    DiceValidation::new(cases, role, net.patch_size)
}

/// One network predicting WT, TC and ET jointly.
pub fn train_multitask(dataset: &Dataset, net: &NetworkConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let role = ModelRole::Multitask;
    let mut validation = default_validation(dataset, net, role)?;
    train_with_validation(dataset, net, cfg, role, &mut validation)
}

/// One single-channel stage of the cascade.
pub fn train_cascaded(
    dataset: &Dataset,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    stage: Subregion,
) -> Result<TrainOutcome> {
    let role = ModelRole::Cascaded(stage);
    let mut validation = default_validation(dataset, net, role)?;
    train_with_validation(dataset, net, cfg, role, &mut validation)
}
