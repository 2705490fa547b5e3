//! Optimisation, checkpoints, training loop and ablations.

mod checkpoint;
pub mod gradsuite;
mod train;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::metrics::MetricsError;
use crate::model::{AblationFlags, ModelConfig, ModelError};
use crate::nn::{GradientSet, ParamError, ParamSet};
use crate::synthdata::DataError;
use crate::tensor::io::FormatError;
use crate::tensor::{Element, Tensor, TensorError};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MetricSnapshot, CKPT_MAGIC, CKPT_VERSION};
pub use train::{
    ablate, evaluate_model, order_arms, predict_records, train, train_with, ArmResult, EpochLog, ImageCache, TrainOutcome,
    BEST_FILE, HISTORY_FILE, LAST_FILE,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no gradient for parameter {0}")]
    MissingGradient(String),
    #[error("optimizer state does not match parameter {0}")]
    StateMismatch(String),
    #[error("training diverged at epoch {epoch}, step {step}: {what}")]
    Diverged { epoch: usize, step: usize, what: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which evaluation set picks the best checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Unseen-domain AUC.
    Unseen,
    /// AUC on the held-out test rows of the seen domains.
    SeenHoldout,
}

impl Selection {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "unseen" => Some(Selection::Unseen),
            "seen-holdout" => Some(Selection::SeenHoldout),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Selection::Unseen => "unseen",
            Selection::SeenHoldout => "seen-holdout",
        }
    }
}

/// Training configuration. Every key is optional in JSON; unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Multiplicative decay applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub lambda: f64,
    pub tiles: usize,
    pub ensemble_weights: [f64; 3],
    pub tau: f64,
    pub use_cve: bool,
    pub use_mixstyle_stages: bool,
    pub use_global_encoder: bool,
    pub use_micl: bool,
    pub seed: u64,
    pub selection: Selection,
    pub augment: bool,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub reduction_ratio: usize,
    pub heads: usize,
    pub noise_sigma: f64,
    pub stage_mixstyle_p: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainConfig {
            epochs: 50,
            batch_size: 12,
            base_lr: 2e-5,
            lr_decay: 0.9,
            lr_decay_every: 5,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            lambda: m.lambda,
            tiles: m.tiles,
            ensemble_weights: m.ensemble_weights,
            tau: m.tau,
            use_cve: true,
            use_mixstyle_stages: true,
            use_global_encoder: true,
            use_micl: true,
            seed: 0,
            selection: Selection::Unseen,
            augment: true,
            stage_channels: m.backbone.stage_channels,
            blocks_per_stage: m.backbone.blocks_per_stage,
            reduction_ratio: m.reduction_ratio,
            heads: m.heads,
            noise_sigma: m.noise_sigma,
            stage_mixstyle_p: m.stage_mixstyle_p,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn flags(&self) -> AblationFlags {
        AblationFlags {
            use_cve: self.use_cve,
            use_mixstyle_stages: self.use_mixstyle_stages,
            use_global_encoder: self.use_global_encoder,
            use_micl: self.use_micl,
        }
    }

    pub fn set_flags(&mut self, f: AblationFlags) {
        self.use_cve = f.use_cve;
        self.use_mixstyle_stages = f.use_mixstyle_stages;
        self.use_global_encoder = f.use_global_encoder;
        self.use_micl = f.use_micl;
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [self.base_lr, self.lr_decay, self.adam_eps, self.adam_betas[0], self.adam_betas[1]];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(TrainError::Config("rates, decay, betas and eps must be positive".into()));
        }
        if self.adam_betas.iter().any(|&b| b >= 1.0) {
            return Err(TrainError::Config("Adam betas must be below 1".into()));
        }
        if self.batch_size == 0 || self.lr_decay_every == 0 {
            return Err(TrainError::Config("batch_size and lr_decay_every must be positive".into()));
        }
        Ok(())
    }

    /// Model configuration for square inputs of side `input_size`.
    pub fn model_config(&self, input_size: usize) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                stage_channels: self.stage_channels.clone(),
                blocks_per_stage: self.blocks_per_stage,
                input_channels: 1,
                input_size,
            },
            reduction_ratio: self.reduction_ratio,
            tiles: self.tiles,
            heads: self.heads,
            pooled_resolution: None,
            tau: self.tau,
            lambda: self.lambda,
            noise_sigma: self.noise_sigma,
            stage_mixstyle_p: self.stage_mixstyle_p,
            ensemble_weights: self.ensemble_weights,
            flags: self.flags(),
        }
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.base_lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// `base_lr · 0.9^⌊epoch/5⌋`.
pub fn lr_at_epoch(base_lr: f64, epoch: usize) -> f64 {
    base_lr * 0.9f64.powi((epoch / 5) as i32)
}

/// First and second moments per parameter plus the shared step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Element> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.dims())).collect();
        AdamState { step: 0, m: zeros(), v: zeros() }
    }
}

/// One bias-corrected Adam update, in place. Arithmetic runs in f64.
pub fn adam_step<T: Element>(
    params: &mut ParamSet<T>,
    grads: &GradientSet<T>,
    state: &mut AdamState<T>,
    lr: f64,
    betas: [f64; 2],
    eps: f64,
) -> Result<(), TrainError> {
    let n = params.len();
    if state.m.len() != n || state.v.len() != n {
        return Err(TrainError::StateMismatch(format!("{} moments for {n} parameters", state.m.len())));
    }
    for i in 0..n {
        let name = &params.names()[i];
        let g = grads.grads.get(i).and_then(Option::as_ref).ok_or_else(|| TrainError::MissingGradient(name.clone()))?;
        let p = &params.tensors()[i];
        if g.dims() != p.dims() || state.m[i].dims() != p.dims() || state.v[i].dims() != p.dims() {
            return Err(TrainError::StateMismatch(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (betas[0], betas[1]);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let tensors = params.tensors_mut();
    for i in 0..n {
        let g = grads.grads[i].as_ref().unwrap().data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = tensors[i].data_mut();
        for j in 0..p.len() {
            let gj = g[j].to_f64_lossy();
            let mj = b1 * m[j].to_f64_lossy() + (1.0 - b1) * gj;
            let vj = b2 * v[j].to_f64_lossy() + (1.0 - b2) * gj * gj;
            m[j] = T::c(mj);
            v[j] = T::c(vj);
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
            p[j] = T::c(p[j].to_f64_lossy() - update);
        }
    }
    Ok(())
}
