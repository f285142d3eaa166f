//! Teacher-forced training with Adam and linear learning-rate decay.
//!
//! One logical optimizer writer, seeded data order, and checkpoints under
//! `run-<seed>/step-<n>/`. With a fixed seed the loss curve and checkpoint
//! bytes are fully reproducible.
//!
//! The configured `weight_decay_schedule` is a linear decay of the update
//! scale over training (`lr_t = lr * (1 - step/total)`); an optional
//! decoupled weight-decay coefficient (default 0) is applied at the same
//! decayed scale.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{save_checkpoint, ModelError, ModelGrads, ModelInput, SummaryModel};
use crate::rng::Rng;
use crate::sdc::SyntheticQuadruplet;
use crate::tokenizer::Tokenizer;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("no quadruplets to train on")]
    EmptyDataset,
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Shape of the update-scale schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecaySchedule {
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_eps: f64,
    pub weight_decay_schedule: DecaySchedule,
    /// Decoupled weight-decay coefficient; 0 disables.
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Evaluate on the held-out split every this many steps (0 disables).
    pub eval_every: usize,
    /// Fraction of products held out for dev evaluation.
    #[serde(default = "default_dev_fraction")]
    pub dev_fraction: f64,
    /// Hard cap on optimizer steps across all epochs (None = no cap).
    #[serde(default)]
    pub max_steps: Option<usize>,
}

fn default_dev_fraction() -> f64 {
    0.02
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-6,
            batch_size: 8,
            epochs: 5,
            adam_eps: 1e-4,
            weight_decay_schedule: DecaySchedule::Linear,
            weight_decay: 0.0,
            seed: 42,
            grad_clip: None,
            eval_every: 50,
            dev_fraction: default_dev_fraction(),
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 {
            return Err(TrainError::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        if self.adam_eps <= 0.0 {
            return Err(TrainError::InvalidConfig("adam_eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(TrainError::InvalidConfig(
                "dev_fraction must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Linear decay of the base rate to zero across training.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    assert!(step <= total_steps, "step {step} past total {total_steps}");
    if total_steps == 0 {
        return base_lr;
    }
    base_lr * (1.0 - step as f64 / total_steps as f64)
}

/// Everything a finished run reports. Wall-clock time is returned to the
/// caller but excluded from serialized artifacts so outputs stay
/// byte-reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_curve: Vec<(usize, f64)>,
    pub dev_metrics: Vec<(usize, f64)>,
    pub final_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub seed: u64,
    pub steps: usize,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl AdamState {
    fn new(model: &SummaryModel) -> Self {
        let sizes: Vec<usize> = model.tensors().iter().map(|(_, t)| t.data.len()).collect();
        AdamState {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        }
    }

    fn step(
        &mut self,
        model: &mut SummaryModel,
        grads: &ModelGrads,
        lr_t: f64,
        eps: f64,
        weight_decay: f64,
        grad_clip: Option<f64>,
    ) {
        self.t += 1;
        let gt = grads.tensors();
        let clip_scale = match grad_clip {
            Some(max_norm) if max_norm > 0.0 => {
                let norm: f64 = gt
                    .iter()
                    .flat_map(|(_, t)| t.data.iter())
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            _ => 1.0,
        };
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (idx, (param, grad)) in model.tensors_mut().into_iter().zip(gt).enumerate() {
            let (_, pt) = param;
            let (_, g) = grad;
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..pt.data.len() {
                let gi = g.data[i] * clip_scale;
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                pt.data[i] -= lr_t * (m_hat / (v_hat.sqrt() + eps) + weight_decay * pt.data[i]);
            }
        }
    }
}

/// Splits quadruplets into train and dev by product, never by quadruplet,
/// so a product's other reviews cannot leak across the split.
fn split_by_product(
    quads: &[SyntheticQuadruplet],
    dev_fraction: f64,
    rng: &mut Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut product_ids: Vec<&str> = Vec::new();
    for q in quads {
        if !product_ids.contains(&q.product_id.as_str()) {
            product_ids.push(&q.product_id);
        }
    }
    let dev_products = ((product_ids.len() as f64) * dev_fraction).floor() as usize;
    let mut dev_set: Vec<&str> = Vec::new();
    if dev_products > 0 && product_ids.len() > 1 {
        let picked = rng.sample_indices(product_ids.len(), dev_products.min(product_ids.len() - 1));
        dev_set = picked.into_iter().map(|i| product_ids[i]).collect();
    }
    let mut train_idx = Vec::new();
    let mut dev_idx = Vec::new();
    for (i, q) in quads.iter().enumerate() {
        if dev_set.contains(&q.product_id.as_str()) {
            dev_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    (train_idx, dev_idx)
}

/// Checkpoint writes get one retry before aborting the run (transient
/// disk pressure should not lose a training run).
fn save_with_retry(
    path: &std::path::Path,
    model: &SummaryModel,
    tok: &Tokenizer,
) -> Result<(), ModelError> {
    match save_checkpoint(path, model, tok) {
        Ok(()) => Ok(()),
        Err(_) => save_checkpoint(path, model, tok),
    }
}

fn prepare(model: &SummaryModel, tok: &Tokenizer, q: &SyntheticQuadruplet) -> ModelInput {
    model.prepare_input(
        tok,
        &q.input_reviews,
        q.description.as_deref(),
        &q.qa,
        Some(&q.pseudo_summary),
    )
}

/// Runs `epochs * ceil(|train| / batch)` optimizer steps over the
/// quadruplets, mutating the model in place. Saves the final checkpoint and
/// the best-dev checkpoint (when a dev split exists and `out_dir` is given)
/// under `out_dir/run-<seed>/step-<n>/checkpoint.json`.
pub fn train(
    model: &mut SummaryModel,
    quads: &[SyntheticQuadruplet],
    tok: &Tokenizer,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if quads.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let started = std::time::Instant::now();
    let root = Rng::new(cfg.seed);
    let mut order_rng = root.fork("data-order");
    let mut split_rng = root.fork("dev-split");
    let mut dropout_rng = root.fork("dropout");

    let (train_idx, dev_idx) = split_by_product(quads, cfg.dev_fraction, &mut split_rng);
    let train_idx = if train_idx.is_empty() {
        // Degenerate corpora train on everything rather than nothing.
        (0..quads.len()).collect()
    } else {
        train_idx
    };
    let dev_inputs: Vec<ModelInput> =
        dev_idx.iter().map(|&i| prepare(model, tok, &quads[i])).collect();

    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total_steps = match cfg.max_steps {
        Some(cap) => (cfg.epochs * steps_per_epoch).min(cap),
        None => cfg.epochs * steps_per_epoch,
    };

    let mut adam = AdamState::new(model);
    let mut loss_curve = Vec::new();
    let mut dev_metrics = Vec::new();
    let mut best_dev = f64::INFINITY;
    let mut best_checkpoint = None;
    let mut step = 0usize;

    let run_dir = out_dir.map(|d| d.join(format!("run-{}", cfg.seed)));

    'epochs: for _epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        order_rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total_steps {
                break 'epochs;
            }
            let batch: Vec<ModelInput> =
                chunk.iter().map(|&i| prepare(model, tok, &quads[i])).collect();
            let lr_t = lr_schedule(step, total_steps, cfg.learning_rate);
            let (loss, _count, grads) = model
                .forward_backward(&batch, Some(&mut dropout_rng))
                .map_err(|e| match e {
                    ModelError::NonFiniteLoss { .. } => TrainError::NonFiniteLoss { step },
                    other => TrainError::Model(other),
                })?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            adam.step(model, &grads, lr_t, cfg.adam_eps, cfg.weight_decay, cfg.grad_clip);
            step += 1;
            loss_curve.push((step, loss));

            if cfg.eval_every > 0 && step.is_multiple_of(cfg.eval_every) && !dev_inputs.is_empty() {
                let (dev_loss, _) = model.forward_loss(&dev_inputs)?;
                dev_metrics.push((step, dev_loss));
                if dev_loss < best_dev {
                    best_dev = dev_loss;
                    if let Some(dir) = &run_dir {
                        let path = dir.join(format!("step-{step}")).join("checkpoint.json");
                        save_with_retry(&path, model, tok)?;
                        best_checkpoint = Some(path);
                    }
                }
            }
        }
    }

    let final_checkpoint = match &run_dir {
        Some(dir) => {
            let path = dir.join(format!("step-{step}")).join("checkpoint.json");
            save_with_retry(&path, model, tok)?;
            Some(path)
        }
        None => None,
    };

    Ok(TrainReport {
        loss_curve,
        dev_metrics,
        final_checkpoint,
        best_checkpoint,
        seed: cfg.seed,
        steps: step,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}
