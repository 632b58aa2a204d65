//! Optimization: rectified Adam with a Lookahead wrapper, a stepwise
//! learning-rate schedule, the training loop with mAP-based early
//! stopping, and checkpoint serialization.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, Subset};
use crate::io::mmrt::{self, Dtype};
use crate::io::Dims;
use crate::model::{Model, ModelInput, VariantSpec};
use crate::params::ParameterStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// coupled L2 penalty, added to gradients of non-bias parameters
    pub weight_decay: f64,
    pub lookahead_k: usize,
    pub lookahead_alpha: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            lookahead_k: 5,
            lookahead_alpha: 0.5,
        }
    }
}

/// Base learning rate scaled by `factor` once per milestone already
/// reached (epochs are 0-based, milestones compare with `<=`).
pub fn lr_at_epoch(base: f64, milestones: &[usize], factor: f64, epoch: usize) -> f64 {
    let hits = milestones.iter().filter(|&&m| m <= epoch).count();
    base * factor.powi(hits as i32)
}

/// Rectified Adam wrapped in Lookahead. The fast weights live in the
/// model's parameter store; slow weights are kept here and synced every
/// `lookahead_k` steps.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub cfg: OptimConfig,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    slow: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig, params: &ParameterStore) -> Optimizer {
        let m = params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        let v = params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        let slow = params.iter().map(|p| p.value.clone()).collect();
        Optimizer { cfg, t: 0, m, v, slow }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update. `grads` must align with the store's registration order.
    pub fn step(&mut self, params: &mut ParameterStore, grads: &[(String, Tensor)], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let t = self.t as f64;
        let c = &self.cfg;
        let rho_inf = 2.0 / (1.0 - c.beta2) - 1.0;
        let beta2_t = c.beta2.powf(t);
        let rho_t = rho_inf - 2.0 * t * beta2_t / (1.0 - beta2_t);
        let bias1 = 1.0 - c.beta1.powf(t);
        let bias2 = 1.0 - beta2_t;
        let rect = if rho_t > 4.0 {
            Some(
                ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                    .sqrt(),
            )
        } else {
            None
        };

        for (i, param) in params.iter_mut().enumerate() {
            let (gname, grad) = &grads[i];
            if gname != &param.name {
                return Err(Error::InvalidArgument(format!(
                    "optimizer: gradient {gname} does not match parameter {}",
                    param.name
                )));
            }
            if grad.shape() != param.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer",
                    detail: format!("gradient shape {:?} vs parameter shape {:?}", grad.shape(), param.value.shape()),
                });
            }
            let decay = if param.is_bias { 0.0 } else { c.weight_decay };
            let theta = param.value.data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..theta.len() {
                let g = grad.data()[j] + decay * theta[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = m[j] / bias1;
                theta[j] -= match rect {
                    Some(r) => lr * r * m_hat / ((v[j] / bias2).sqrt() + c.eps),
                    None => lr * m_hat,
                };
                if !theta[j].is_finite() {
                    return Err(Error::NonFinite { op: "optimizer" });
                }
            }
        }

        if c.lookahead_k > 0 && self.t.is_multiple_of(c.lookahead_k as u64) {
            for (i, param) in params.iter_mut().enumerate() {
                let slow = self.slow[i].data_mut();
                let fast = param.value.data_mut();
                for j in 0..fast.len() {
                    // lerp form: alpha = 1 reproduces the fast weights
                    // exactly, so that setting degenerates to the inner
                    // optimizer bitwise
                    slow[j] = (1.0 - c.lookahead_alpha) * slow[j] + c.lookahead_alpha * fast[j];
                    fast[j] = slow[j];
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub milestones: Vec<usize>,
    pub lr_factor: f64,
    /// epochs without held-out mAP improvement before stopping
    pub patience: usize,
    /// abort when the batch loss exceeds this
    pub divergence_loss: f64,
    pub seed: u64,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 45,
            batch_size: 16,
            milestones: vec![15, 30, 45],
            lr_factor: 0.1,
            patience: 10,
            divergence_loss: 1e6,
            seed: 0,
            optim: OptimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_map: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub steps: u64,
    pub best_epoch: usize,
    pub best_val_map: f64,
    pub stopped_early: bool,
    pub trace: Vec<EpochRecord>,
}

/// Trains in place. The model is left holding the parameters of the best
/// validation epoch, not the last one.
pub fn train(
    model: &mut Model,
    train_inputs: &[ModelInput],
    val_inputs: &[ModelInput],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if train_inputs.is_empty() || val_inputs.is_empty() {
        return Err(Error::InvalidArgument("train: empty split".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("train: batch_size must be positive".into()));
    }
    if cfg.milestones.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("train: milestones must be strictly increasing".into()));
    }
    let root = Rng::new(cfg.seed);
    let mut optimizer = Optimizer::new(cfg.optim.clone(), &model.params);

    let mut best_params = model.params.clone();
    let mut best_val_map = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut trace = Vec::new();
    let mut stopped_early = false;
    let mut epochs_run = 0;

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg.optim.lr, &cfg.milestones, cfg.lr_factor, epoch);
        let mut order: Vec<usize> = (0..train_inputs.len()).collect();
        root.fork(0x65706f6368 ^ epoch as u64).shuffle(&mut order);
        let mut dropout_rng = root.fork(0x64726f70 ^ epoch as u64);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&ModelInput> = chunk.iter().map(|&i| &train_inputs[i]).collect();
            let (loss, grads) = model.loss_and_grads(&batch, true, &mut dropout_rng)?;
            if !loss.is_finite() || loss > cfg.divergence_loss {
                return Err(Error::Diverged(format!("epoch {epoch}: batch loss {loss}")));
            }
            optimizer.step(&mut model.params, &grads, lr)?;
            loss_sum += loss;
            batches += 1;
        }

        let val = eval::evaluate_classification(model, val_inputs, Subset::All)?;
        let val_map = val.map.ok_or_else(|| Error::Eval("validation mAP undefined".into()))?;
        trace.push(EpochRecord { epoch, lr, train_loss: loss_sum / batches as f64, val_map });
        epochs_run = epoch + 1;

        // a tie refreshes the snapshot (the later epoch has had more
        // training) but only a strict improvement resets the patience
        if val_map >= best_val_map {
            if val_map > best_val_map {
                since_best = 0;
            } else {
                since_best += 1;
            }
            best_val_map = val_map;
            best_epoch = epoch;
            best_params = model.params.clone();
        } else {
            since_best += 1;
        }
        if since_best > 0 && since_best >= cfg.patience {
            stopped_early = true;
            break;
        }
    }

    model.params = best_params;
    Ok(TrainReport {
        epochs_run,
        steps: optimizer.steps_taken(),
        best_epoch,
        best_val_map,
        stopped_early,
        trace,
    })
}

/// Training provenance written next to the weights: which optimizer step
/// and epoch they came from, and a hash of the run configuration.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointStamp {
    pub step: u64,
    pub epoch: usize,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    schema: String,
    #[serde(default)]
    stamp: CheckpointStamp,
    spec: VariantSpec,
    dims: Dims,
    num_classes: usize,
    /// (name, is_bias) in registration order
    params: Vec<(String, bool)>,
}

const CHECKPOINT_SCHEMA: &str = "mmr-checkpoint-v1";

/// Writes `checkpoint.json` plus one MMRT file per parameter into `dir`.
/// No timestamps anywhere, so identical models produce identical bytes.
pub fn save_checkpoint(model: &Model, dir: &Path, stamp: &CheckpointStamp) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let meta = CheckpointMeta {
        schema: CHECKPOINT_SCHEMA.to_string(),
        stamp: stamp.clone(),
        spec: model.spec,
        dims: model.dims,
        num_classes: model.num_classes,
        params: model.params.iter().map(|p| (p.name.clone(), p.is_bias)).collect(),
    };
    let meta_path = dir.join("checkpoint.json");
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))?;
    fs::write(&meta_path, json).map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    for param in model.params.iter() {
        let file = dir.join(format!("{}.mmrt", param.name.replace('.', "_")));
        mmrt::write_tensor(&file, &param.value, Dtype::F64)?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointStamp)> {
    let meta_path = dir.join("checkpoint.json");
    let json = fs::read_to_string(&meta_path).map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&json).map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))?;
    if meta.schema != CHECKPOINT_SCHEMA {
        return Err(Error::Config(format!("unknown checkpoint schema {}", meta.schema)));
    }
    let mut model = Model::new(meta.spec, meta.dims, meta.num_classes, 0)?;
    if meta.params.len() != model.params.len() {
        return Err(Error::Config(format!(
            "checkpoint lists {} parameters, variant has {}",
            meta.params.len(),
            model.params.len()
        )));
    }
    for (name, _is_bias) in &meta.params {
        let file = dir.join(format!("{}.mmrt", name.replace('.', "_")));
        let value = mmrt::read_tensor(&file)?;
        let slot = model
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("checkpoint parameter {name} not in variant")))?;
        if value.shape() != slot.shape() {
            return Err(Error::Config(format!(
                "checkpoint parameter {name}: shape {:?} vs expected {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
    }
    Ok((model, meta.stamp))
}
