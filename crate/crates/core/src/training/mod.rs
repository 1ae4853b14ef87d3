//! ArcFace objective, SGD with linear decay, the synthetic corpus, full-model
//! gradient checking and the training loop.

mod gradcheck;
mod optim;
mod synth;
mod train;

pub use gradcheck::{grad_check_full_model, GradCheckOptions, GradCheckReport, TensorCheck};
pub use optim::{sgd_step, sgd_update, OptimizerConfig, OptimizerState};
pub use synth::{synth_generate, Difficulty, Split, SyntheticCorpus, SyntheticDatasetSpec, SyntheticImage};
pub use train::{train, EpochStats, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Cosines are clamped to `[−1 + COS_CLAMP, 1 − COS_CLAMP]` before `acos`.
pub const COS_CLAMP: f64 = 1e-7;

/// `AF(s, c) = (1 − c)·s + c·cos(acos(s) + m)`.
pub fn adjusted_cosine(s: f64, is_target: bool, m: f64) -> f64 {
    if !is_target || m == 0.0 {
        return s;
    }
    let lim = 1.0 - COS_CLAMP;
    (s.clamp(-lim, lim).acos() + m).cos()
}

/// `∂AF/∂s`; zero where the clamp is active.
pub fn adjusted_cosine_slope(s: f64, is_target: bool, m: f64) -> f64 {
    if !is_target || m == 0.0 {
        return 1.0;
    }
    let lim = 1.0 - COS_CLAMP;
    if s.abs() > lim {
        return 0.0;
    }
    (s.acos() + m).sin() / (1.0 - s * s).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArcFaceParams {
    /// `num_classes×d`; rows are normalized at each use.
    pub weights: Tensor,
    pub margin: f64,
    pub scale: f64,
}

impl ArcFaceParams {
    pub fn new(weights: Tensor) -> Self {
        Self {
            weights,
            margin: 0.2,
            scale: 32.0,
        }
    }
}

/// Records `−log softmax(γ·AF(ŵₙ·f̂, yₙ))[label]` for a `1×d` descriptor.
pub fn arcface_graph(
    g: &mut Graph,
    descriptor: Var,
    classifier: Var,
    label: usize,
    margin: f64,
    scale: f64,
) -> Result<Var> {
    if g.value(descriptor).data().iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate("ArcFace loss of a zero descriptor".into()));
    }
    let f_hat = g.l2_normalize_rows(descriptor);
    let w_hat = g.l2_normalize_rows(classifier);
    let cos = g.matmul_nt(f_hat, w_hat)?;
    let logits = g.arc_margin(cos, label, margin, scale)?;
    g.cross_entropy(logits, label)
}

pub fn arcface_loss(f_g: &[f64], label: usize, p: &ArcFaceParams) -> Result<f64> {
    if p.weights.cols() != f_g.len() {
        return Err(Error::dim("arcface_loss", &[1, f_g.len()], p.weights.shape()));
    }
    let mut g = Graph::new();
    let f = g.constant(Tensor::row(f_g.to_vec()));
    let w = g.constant(p.weights.clone());
    let out = arcface_graph(&mut g, f, w, label, p.margin, p.scale)?;
    Ok(g.value(out).data()[0])
}
