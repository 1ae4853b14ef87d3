use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::aggregation::FeatureMap;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::parallel;
use crate::refinement::ForwardMode;
use crate::tensor::{random_tensor, relative_error};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub height: usize,
    pub width: usize,
    pub step: f64,
    /// Seeded subsample per tensor; every coordinate when `None`.
    pub max_coords: Option<usize>,
    /// Replace zero/identity initializations (LFSA output, norm gains and
    /// biases, head bias) with random values so every path is exercised.
    pub randomize_all: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            height: 5,
            width: 5,
            step: 1e-6,
            max_coords: None,
            randomize_all: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub coords_checked: usize,
    pub grad_abs_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub label: usize,
    pub loss: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }
}

fn randomize(model: &mut ModelParams, rng: &mut ChaCha8Rng) {
    let c = model.config.channels;
    if let Some(l) = &mut model.lfsa {
        l.output = random_tensor(&[c, c], 1.0 / (c as f64).sqrt(), rng);
    }
    for b in &mut model.blocks {
        for t in [&mut b.self_norm_gain, &mut b.cross_norm_gain] {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = 1.0 + 0.2 * rng.gen_range(-1.0..1.0));
        }
        for t in [&mut b.self_norm_bias, &mut b.cross_norm_bias] {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.2 * rng.gen_range(-1.0..1.0));
        }
    }
    if let Some(b) = &mut model.head.bias {
        b.data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.1 * rng.gen_range(-1.0..1.0));
    }
}

/// Compares the recorded gradient of the full ArcFace loss with central
/// differences for every parameter tensor, in evaluation mode.
pub fn grad_check_full_model(config: &ModelConfig, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ModelParams::init(config, &mut rng)?;
    if opts.randomize_all {
        randomize(&mut model, &mut rng);
    }
    let (c, h, w) = (config.channels, opts.height, opts.width);
    let input = FeatureMap::new(c, h, w, random_tensor(&[c * h * w], 1.0, &mut rng).into_data())?;
    let label = rng.gen_range(0..config.num_classes);

    let (loss, grads) = model.loss_and_grads(&input, label, &mut ForwardMode::Eval)?;
    if !loss.is_finite() {
        return Err(Error::Evaluation(format!("loss is {loss} at the check point")));
    }
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();

    // (tensor, coordinate) pairs, evaluated concurrently
    let mut jobs = Vec::new();
    for (ti, (_, t)) in model.named_tensors().into_iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < t.len() => rand::seq::index::sample(&mut rng, t.len(), k).into_vec(),
            _ => (0..t.len()).collect(),
        };
        jobs.extend(coords.into_iter().map(|i| (ti, i)));
    }
    let eval = |ti: usize, i: usize, delta: f64| -> Result<f64> {
        let mut probe = model.clone();
        probe.tensors_mut()[ti].data_mut()[i] += delta;
        probe.loss(&input, label, &mut ForwardMode::Eval)
    };
    let numeric: Vec<Result<f64>> = parallel::map(&jobs, |_, &(ti, i)| {
        let plus = eval(ti, i, opts.step)?;
        let minus = eval(ti, i, -opts.step)?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite loss perturbing {}[{i}]",
                names[ti]
            )));
        }
        Ok((plus - minus) / (2.0 * opts.step))
    });

    let mut tensors: Vec<TensorCheck> = names
        .iter()
        .zip(&grads)
        .map(|(n, g)| TensorCheck {
            name: n.clone(),
            max_rel_err: 0.0,
            worst_coord: 0,
            coords_checked: 0,
            grad_abs_max: g.data().iter().fold(0.0, |m, v| m.max(v.abs())),
        })
        .collect();
    for (&(ti, i), num) in jobs.iter().zip(numeric) {
        let err = relative_error(grads[ti].data()[i], num?);
        let entry = &mut tensors[ti];
        entry.coords_checked += 1;
        if err > entry.max_rel_err {
            entry.max_rel_err = err;
            entry.worst_coord = i;
        }
    }
    Ok(GradCheckReport {
        seed,
        label,
        loss,
        tensors,
    })
}

/// Gradient of the loss at a freshly initialized model, by tensor name.
#[cfg(test)]
fn fresh_gradient(config: &ModelConfig, seed: u64, name: &str) -> crate::tensor::Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ModelParams::init(config, &mut rng).unwrap();
    let c = config.channels;
    let input = FeatureMap::new(c, 4, 4, random_tensor(&[c * 16], 1.0, &mut rng).into_data()).unwrap();
    let (_, grads) = model.loss_and_grads(&input, 0, &mut ForwardMode::Eval).unwrap();
    let idx = model.named_tensors().iter().position(|(n, _)| n == name).unwrap();
    grads[idx].clone()
}
