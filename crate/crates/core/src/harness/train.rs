//! Minibatch SGD with momentum on softmax cross-entropy.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::model::{argmax, Model, ModelConfig, ParamKind};
use crate::attention::FrequencyAssignment;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Learning-rate multiplier for NAS architecture logits.
    pub alpha_lr_multiplier: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            lr: 0.02,
            momentum: 0.9,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            alpha_lr_multiplier: 10.0,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::invalid(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.alpha_lr_multiplier.is_finite() && self.alpha_lr_multiplier >= 0.0) {
            return Err(Error::invalid("alpha_lr_multiplier must be >= 0"));
        }
        Ok(())
    }
}

/// Outcome of one training run. `wall_clock_seconds` is kept out of the
/// serialized form so that records of identical runs are byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ModelConfig,
    pub hyper: Hyper,
    pub seed: u64,
    pub param_count: usize,
    pub attention_param_count: usize,
    pub initial_val_accuracy: f64,
    pub train_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub final_val_accuracy: f64,
    /// Per attention site, for NAS runs.
    pub derived_assignment: Option<Vec<FrequencyAssignment>>,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    for i in 0..data.len() {
        if argmax(&model.logits(&data.sample(i))?) == data.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Builds a model from `config` (seeded by `hyper.seed`) and trains it.
pub fn train(
    config: &ModelConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    hyper: &Hyper,
) -> Result<(Model, RunRecord)> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid(
            "training and validation sets must be non-empty",
        ));
    }
    let model = Model::new(config, train_set.image_size(), hyper.seed)?;
    fit(model, train_set, val_set, hyper)
}

/// Trains an existing model in place of a fresh one.
pub fn fit(
    mut model: Model,
    train_set: &Dataset,
    val_set: &Dataset,
    hyper: &Hyper,
) -> Result<(Model, RunRecord)> {
    hyper.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid(
            "training and validation sets must be non-empty",
        ));
    }
    let started = Instant::now();
    let initial_val_accuracy = accuracy(&model, val_set)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    rng.set_stream(7);
    let kinds: Vec<ParamKind> = model
        .param_slices_mut()
        .into_iter()
        .map(|(k, _)| k)
        .collect();
    let mut velocity = model.zero_grads();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut train_loss = Vec::with_capacity(hyper.epochs);
    let mut val_accuracy = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(hyper.batch_size).enumerate() {
            let mut grads = model.zero_grads();
            let mut batch_loss = 0.0;
            for &i in batch {
                batch_loss += match model.accumulate_grads(
                    &train_set.sample(i),
                    train_set.labels[i],
                    &mut grads,
                ) {
                    Ok(loss) => loss,
                    // finite weights can still overflow the activations
                    Err(Error::NonFinite { .. }) if epoch + batch_idx > 0 => f64::NAN,
                    Err(e) => return Err(e),
                };
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch_idx,
                    loss: batch_loss / batch.len() as f64,
                });
            }
            epoch_loss += batch_loss;
            let inv = 1.0 / batch.len() as f64;
            let mut finite = true;
            for (((kind, params), g), v) in kinds
                .iter()
                .zip(model.param_slices_mut())
                .zip(&grads)
                .zip(&mut velocity)
            {
                let lr = match kind {
                    ParamKind::Weight => hyper.lr,
                    ParamKind::Alpha => hyper.lr * hyper.alpha_lr_multiplier,
                };
                for ((p, &gi), vi) in params.1.iter_mut().zip(g).zip(v.iter_mut()) {
                    *vi = hyper.momentum * *vi + gi * inv;
                    *p -= lr * *vi;
                    finite &= p.is_finite();
                }
            }
            if !finite {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch_idx,
                    loss: batch_loss / batch.len() as f64,
                });
            }
        }
        let mean_loss = epoch_loss / train_set.len() as f64;
        train_loss.push(mean_loss);
        val_accuracy.push(accuracy(&model, val_set)?);
        log::debug!(
            "epoch {epoch}: loss {mean_loss:.4}, val acc {:.3}",
            val_accuracy.last().expect("just pushed")
        );
    }

    let final_val_accuracy = val_accuracy.last().copied().unwrap_or(initial_val_accuracy);
    let record = RunRecord {
        config: model.config().clone(),
        hyper: hyper.clone(),
        seed: hyper.seed,
        param_count: model.param_count(),
        attention_param_count: model.attention_param_count(),
        initial_val_accuracy,
        train_loss,
        val_accuracy,
        final_val_accuracy,
        derived_assignment: model.derived_assignments()?,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((model, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::{gen_synthetic, SyntheticSpec};
    use crate::harness::model::{AttentionKind, ModelConfig};

    fn tiny() -> (Dataset, Dataset, ModelConfig) {
        let data = gen_synthetic(&SyntheticSpec {
            height: 8,
            width: 8,
            samples_per_class: 10,
            noise_sigma: 0.2,
            class_bands: vec![
                vec![(0, 1).into()],
                vec![(1, 0).into()],
                vec![(1, 2).into()],
                vec![(2, 1).into()],
            ],
            ..SyntheticSpec::default()
        })
        .unwrap();
        let (tr, va) = data.split_stratified(0.2, 0).unwrap();
        let cfg = ModelConfig {
            channels: vec![4, 8],
            strides: vec![1, 2],
            reduction: 2,
            attention: AttentionKind::Gap,
            ..ModelConfig::default()
        };
        (tr, va, cfg)
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let (tr, va, cfg) = tiny();
        let hyper = Hyper {
            lr: 0.0,
            epochs: 3,
            ..Hyper::default()
        };
        let initial = Model::new(&cfg, tr.image_size(), hyper.seed).unwrap();
        let (model, record) = train(&cfg, &tr, &va, &hyper).unwrap();
        assert_eq!(model, initial);
        for l in &record.train_loss {
            assert!((l - record.train_loss[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_epochs_reports_untrained_accuracy() {
        let (tr, va, cfg) = tiny();
        let hyper = Hyper {
            epochs: 0,
            ..Hyper::default()
        };
        let (model, record) = train(&cfg, &tr, &va, &hyper).unwrap();
        assert!(record.train_loss.is_empty());
        assert!(record.val_accuracy.is_empty());
        assert_eq!(record.final_val_accuracy, accuracy(&model, &va).unwrap());
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let (tr, va, cfg) = tiny();
        let hyper = Hyper {
            epochs: 8,
            ..Hyper::default()
        };
        let (_, a) = train(&cfg, &tr, &va, &hyper).unwrap();
        let (_, b) = train(&cfg, &tr, &va, &hyper).unwrap();
        assert_eq!(a.train_loss, b.train_loss);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert!(a.train_loss.last().unwrap() < &a.train_loss[0]);
        assert_eq!(a.train_loss.len(), 8);
        assert!(a.val_accuracy.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn divergence_is_reported() {
        let (tr, va, cfg) = tiny();
        let hyper = Hyper {
            lr: 1e300,
            epochs: 3,
            ..Hyper::default()
        };
        match train(&cfg, &tr, &va, &hyper) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
