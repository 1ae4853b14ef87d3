use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{sgd_step, OptimizerConfig, OptimizerState};
use super::synth::SyntheticDatasetSpec;
use crate::aggregation::FeatureMap;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::parallel;
use crate::refinement::ForwardMode;
use crate::tensor::Tensor;

/// Everything a training run needs; the JSON document read by `train --config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub data: SyntheticDatasetSpec,
    /// Fraction of the training split held out for validation loss.
    pub validation_fraction: f64,
    /// Resample each training map by a factor drawn uniformly between the
    /// smallest and largest inference scale.
    pub scale_augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let data = SyntheticDatasetSpec::default();
        Self {
            model: ModelConfig::desk(data.channels, data.num_classes),
            optimizer: OptimizerConfig::desk(),
            data,
            validation_fraction: 0.2,
            scale_augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.data.validate()?;
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        if self.model.channels != self.data.channels || self.model.num_classes < self.data.num_classes {
            return Err(Error::Config(
                "model channels and class count must cover the dataset".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub params: ModelParams,
    pub curve: Vec<EpochStats>,
    pub steps: usize,
}

fn mode_rng_uniform(mode: &mut ForwardMode<'_>, lo: f64, hi: f64) -> f64 {
    match mode {
        ForwardMode::Train { rng, .. } => rng.gen_range(lo..=hi),
        ForwardMode::Eval => 1.0,
    }
}

fn mean_loss(model: &ModelParams, items: &[(FeatureMap, usize)], idx: &[usize]) -> Result<f64> {
    let losses = parallel::map(idx, |_, &i| model.loss(&items[i].0, items[i].1, &mut ForwardMode::Eval));
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / idx.len() as f64)
}

/// Mini-batch SGD over a seeded shuffle; deterministic in `cfg.seed`
/// regardless of worker count.
pub fn train(corpus: &[(FeatureMap, usize)], init: ModelParams, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.optimizer.validate()?;
    if corpus.is_empty() {
        return Err(Error::Input("empty training corpus".into()));
    }
    if let Some((_, l)) = corpus.iter().find(|(_, l)| *l >= init.config.num_classes) {
        return Err(Error::Input(format!(
            "label {l} outside {} classes",
            init.config.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((corpus.len() as f64) * cfg.validation_fraction).floor() as usize;
    let n_val = n_val.min(corpus.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let (val_idx, mut train_idx) = (val_idx.to_vec(), train_idx.to_vec());

    let mut params = init;
    let mut state = OptimizerState::for_model(cfg.optimizer.clone(), &params);
    let batch = cfg.optimizer.batch_size;
    let total = cfg.optimizer.total_steps;
    let dropout = params.config.dropout;
    let scales = &params.config.scales;
    let augment = cfg.scale_augment.then(|| {
        let lo = scales.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = scales.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    });
    let mut curve = Vec::new();
    let mut step = 0;
    let mut epoch = 0;
    while step < total {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_items = 0usize;
        let mut epoch_steps = 0;
        for chunk in train_idx.chunks(batch) {
            if step == total {
                break;
            }
            let results = parallel::map(chunk, |k, &i| {
                let mut item_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                item_rng.set_stream((step * batch + k) as u64 + 1);
                let mut mode = ForwardMode::Train {
                    dropout,
                    rng: &mut item_rng,
                };
                match augment {
                    Some((lo, hi)) if hi > lo => {
                        let f = corpus[i].0.resample(mode_rng_uniform(&mut mode, lo, hi))?;
                        params.loss_and_grads(&f, corpus[i].1, &mut mode)
                    }
                    _ => params.loss_and_grads(&corpus[i].0, corpus[i].1, &mut mode),
                }
            });
            let mut sum: Option<Vec<Tensor>> = None;
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, grads) = r?;
                if !loss.is_finite() {
                    return Err(Error::Evaluation(format!("loss is {loss} at step {step}")));
                }
                batch_loss += loss;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = sum.expect("nonempty batch");
            let scale = 1.0 / chunk.len() as f64;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            sgd_step(&mut params, &grads, &mut state)?;
            epoch_loss += batch_loss;
            epoch_items += chunk.len();
            epoch_steps += 1;
            step += 1;
        }
        let validation_loss = if val_idx.is_empty() {
            None
        } else {
            Some(mean_loss(&params, corpus, &val_idx)?)
        };
        let stats = EpochStats {
            epoch,
            steps: epoch_steps,
            train_loss: epoch_loss / epoch_items as f64,
            validation_loss,
        };
        log::info!(
            "epoch {} steps {} train loss {:.5} validation loss {}",
            stats.epoch,
            step,
            stats.train_loss,
            validation_loss.map_or("-".to_string(), |v| format!("{v:.5}"))
        );
        curve.push(stats);
        epoch += 1;
    }
    Ok(TrainReport {
        params,
        curve,
        steps: step,
    })
}
