use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Rescales the batch gradient to this global L2 norm when it is larger.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            weight_decay: 1e-4,
            momentum: 0.9,
            total_steps: 500,
            batch_size: 16,
            clip_norm: None,
        }
    }
}

impl OptimizerConfig {
    /// Settings for the synthetic corpus: a higher base rate for the small
    /// batch and short schedule, with clipping against early ArcFace spikes.
    pub fn desk() -> Self {
        Self {
            base_lr: 0.03,
            clip_norm: Some(2.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::Config("batch_size and total_steps must be positive".into()));
        }
        if [self.base_lr, self.weight_decay, self.momentum]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::Config(
                "learning rate, weight decay and momentum must be finite and non-negative".into(),
            ));
        }
        if self.clip_norm.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return Err(Error::Config("clip_norm must be finite and positive".into()));
        }
        Ok(())
    }
}

/// SGD with momentum, coupled weight decay and linear learning-rate decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub buffers: Vec<Tensor>,
    pub step: usize,
}

impl OptimizerState {
    /// Zero momentum buffers shaped like `params`.
    pub fn new<'a>(config: OptimizerConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        Self {
            config,
            buffers: params.into_iter().map(|t| Tensor::zeros(t.shape())).collect(),
            step: 0,
        }
    }

    pub fn for_model(config: OptimizerConfig, model: &ModelParams) -> Self {
        Self::new(config, model.named_tensors().into_iter().map(|(_, t)| t))
    }

    /// `base_lr · max(0, 1 − step/total_steps)`.
    pub fn lr(&self, step: usize) -> f64 {
        let frac = step as f64 / self.config.total_steps as f64;
        self.config.base_lr * (1.0 - frac).max(0.0)
    }
}

/// `v ← μv + (g + λθ)`, `θ ← θ − lr(step)·v`, then advances the step counter.
/// With `clip_norm = Some(c)`, `g` is first scaled by `min(1, c/‖g‖)` over all tensors.
pub fn sgd_update(params: Vec<&mut Tensor>, grads: &[Tensor], st: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != st.buffers.len() {
        return Err(Error::dim(
            "sgd_step",
            &[params.len()],
            &[grads.len(), st.buffers.len()],
        ));
    }
    for ((p, g), b) in params.iter().zip(grads).zip(&st.buffers) {
        if p.shape() != g.shape() || p.shape() != b.shape() {
            return Err(Error::dim("sgd_step", p.shape(), g.shape()));
        }
    }
    let lr = st.lr(st.step);
    let OptimizerConfig {
        weight_decay,
        momentum,
        clip_norm,
        ..
    } = st.config;
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    let factor = match clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    for ((p, g), b) in params.into_iter().zip(grads).zip(&mut st.buffers) {
        for ((theta, grad), v) in p.data_mut().iter_mut().zip(g.data()).zip(b.data_mut()) {
            *v = momentum * *v + (factor * grad + weight_decay * *theta);
            *theta -= lr * *v;
        }
    }
    st.step += 1;
    Ok(())
}

pub fn sgd_step(params: &mut ModelParams, grads: &[Tensor], st: &mut OptimizerState) -> Result<()> {
    sgd_update(params.tensors_mut(), grads, st)
}
