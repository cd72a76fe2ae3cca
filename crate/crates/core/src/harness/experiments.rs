//! Per-component evaluation, component-count sweeps, the learnable-tensor
//! comparison and the NAS search, all on top of [`train`](super::train).
//!
//! Independent runs go through rayon; results are collected in input order so
//! the output does not depend on scheduling.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::model::{AttentionKind, Model, ModelConfig};
use super::train::{fit, train, Hyper, RunRecord};
use crate::attention::{FrequencyAssignment, TensorInit};
use crate::dct::Component;
use crate::error::{Error, Result};
use crate::selection::{assign_lf, assign_ts, lf_order, ComponentScore, FrequencyGrid};

/// Sample mean and standard deviation (n - 1 denominator, 0 for n < 2).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains the attention-free backbone.
pub fn pretrain_base(
    config: &ModelConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    hyper: &Hyper,
) -> Result<(Model, RunRecord)> {
    train(
        &config.with_attention(AttentionKind::None),
        train_set,
        val_set,
        hyper,
    )
}

/// Adds attention blocks of `kind` to a copy of `base`, fine-tunes the whole
/// model for `budget.epochs` and returns the final validation accuracy.
pub fn evaluate_attention(
    base: &Model,
    kind: AttentionKind,
    train_set: &Dataset,
    val_set: &Dataset,
    budget: &Hyper,
) -> Result<f64> {
    let model = base.with_attention(kind, budget.seed)?;
    let (_, record) = fit(model, train_set, val_set, budget)?;
    Ok(record.final_val_accuracy)
}

pub fn evaluate_component(
    base: &Model,
    component: Component,
    grid: FrequencyGrid,
    train_set: &Dataset,
    val_set: &Dataset,
    budget: &Hyper,
) -> Result<ComponentScore> {
    component.check_in(grid.height, grid.width)?;
    let assignment = FrequencyAssignment::uniform(1, grid.height, grid.width, component)?;
    let score = evaluate_attention(
        base,
        AttentionKind::MultiSpectral { assignment },
        train_set,
        val_set,
        budget,
    )?;
    Ok(ComponentScore { component, score })
}

/// Scores every component of `grid`, in low-frequency order.
pub fn evaluate_components(
    base: &Model,
    grid: FrequencyGrid,
    train_set: &Dataset,
    val_set: &Dataset,
    budget: &Hyper,
) -> Result<Vec<ComponentScore>> {
    base.config()
        .check_grid(base.input_size(), (grid.height, grid.width))?;
    lf_order(grid)
        .into_par_iter()
        .map(|c| evaluate_component(base, c, grid, train_set, val_set, budget))
        .collect()
}

/// Trains `config` once per seed. Records come back in seed order.
pub fn run_seeds(
    config: &ModelConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    hyper: &Hyper,
    seeds: &[u64],
) -> Result<Vec<RunRecord>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let hyper = Hyper {
                seed,
                ..hyper.clone()
            };
            train(config, train_set, val_set, &hyper).map(|(_, record)| record)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Lf,
    Ts,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Lf => "lf",
            Criterion::Ts => "ts",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Requested component count.
    pub k: usize,
    /// `k` capped at the number of available components.
    pub effective_k: usize,
    pub components: Vec<Component>,
    pub mean: f64,
    pub std: f64,
    pub accuracies: Vec<f64>,
    /// Full per-seed records; not serialized with the table.
    #[serde(skip)]
    pub records: Vec<RunRecord>,
}

/// Builds the assignment for one sweep entry. `scores` is required for TS.
pub fn select_components(
    criterion: Criterion,
    k: usize,
    grid: FrequencyGrid,
    scores: Option<&[ComponentScore]>,
    channels: usize,
) -> Result<FrequencyAssignment> {
    match criterion {
        Criterion::Lf => assign_lf(channels, k.min(grid.len()), grid),
        Criterion::Ts => {
            let scores =
                scores.ok_or_else(|| Error::invalid("the TS criterion needs component scores"))?;
            assign_ts(channels, k.min(scores.len()), scores, grid)
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn sweep_k(
    criterion: Criterion,
    ks: &[usize],
    grid: FrequencyGrid,
    scores: Option<&[ComponentScore]>,
    config: &ModelConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    hyper: &Hyper,
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if seeds.is_empty() {
        return Err(Error::invalid("need at least one seed"));
    }
    // Validate every row before training anything.
    let channels = config.channels[0];
    let assignments = ks
        .iter()
        .map(|&k| {
            let assignment = select_components(criterion, k, grid, scores, channels)?;
            for &c in &config.channels {
                if c % assignment.parts() != 0 {
                    return Err(Error::Divisibility {
                        what: "stage channels",
                        value: c,
                        divisor: assignment.parts(),
                    });
                }
            }
            config.check_grid(train_set.image_size(), (grid.height, grid.width))?;
            Ok(assignment)
        })
        .collect::<Result<Vec<_>>>()?;

    ks.iter()
        .zip(assignments)
        .map(|(&k, assignment)| {
            let components = assignment.components().to_vec();
            let cfg = config.with_attention(AttentionKind::MultiSpectral { assignment });
            let records = run_seeds(&cfg, train_set, val_set, hyper, seeds)?;
            let accuracies: Vec<f64> = records.iter().map(|r| r.final_val_accuracy).collect();
            let (mean, std) = mean_std(&accuracies);
            Ok(SweepRow {
                k,
                effective_k: components.len(),
                components,
                mean,
                std,
                accuracies,
                records,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnableMode {
    pub init: TensorInit,
    pub trainable: bool,
}

impl LearnableMode {
    pub const FR: Self = Self {
        init: TensorInit::Random,
        trainable: false,
    };
    pub const LR: Self = Self {
        init: TensorInit::Random,
        trainable: true,
    };
    pub const LD: Self = Self {
        init: TensorInit::Dct,
        trainable: true,
    };
    pub const FD: Self = Self {
        init: TensorInit::Dct,
        trainable: false,
    };

    pub fn all() -> [Self; 4] {
        [Self::FR, Self::LR, Self::LD, Self::FD]
    }

    pub fn label(&self) -> &'static str {
        match (self.trainable, self.init) {
            (false, TensorInit::Random) => "FR",
            (true, TensorInit::Random) => "LR",
            (true, TensorInit::Dct) => "LD",
            (false, TensorInit::Dct) => "FD",
        }
    }

    /// FD is plain fixed DCT pooling.
    pub fn attention(&self, assignment: FrequencyAssignment) -> AttentionKind {
        if *self == Self::FD {
            AttentionKind::MultiSpectral { assignment }
        } else {
            AttentionKind::LearnableTensor {
                init: self.init,
                trainable: self.trainable,
                assignment,
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub label: String,
    pub mode: LearnableMode,
    pub param_count: usize,
    pub attention_param_count: usize,
    pub mean: f64,
    pub std: f64,
    pub accuracies: Vec<f64>,
    #[serde(skip)]
    pub records: Vec<RunRecord>,
}

pub fn compare_learnable(
    modes: &[LearnableMode],
    assignment: &FrequencyAssignment,
    config: &ModelConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    hyper: &Hyper,
    seeds: &[u64],
) -> Result<Vec<CompareRow>> {
    if seeds.is_empty() {
        return Err(Error::invalid("need at least one seed"));
    }
    modes
        .iter()
        .map(|mode| {
            let cfg = config.with_attention(mode.attention(assignment.clone()));
            let records = run_seeds(&cfg, train_set, val_set, hyper, seeds)?;
            let accuracies: Vec<f64> = records.iter().map(|r| r.final_val_accuracy).collect();
            let (mean, std) = mean_std(&accuracies);
            Ok(CompareRow {
                label: mode.label().to_string(),
                mode: *mode,
                param_count: records[0].param_count,
                attention_param_count: records[0].attention_param_count,
                mean,
                std,
                accuracies,
                records,
            })
        })
        .collect()
}

/// Trains a NAS mixture jointly with the network and returns the trained
/// model, its record and the assignment derived at the smallest site.
pub fn nas_search(
    parts: usize,
    grid: FrequencyGrid,
    config: &ModelConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    hyper: &Hyper,
) -> Result<(Model, RunRecord, FrequencyAssignment)> {
    let cfg = config.with_attention(AttentionKind::NasSearch { parts, grid });
    let (model, record) = train(&cfg, train_set, val_set, hyper)?;
    let derived = record
        .derived_assignment
        .as_ref()
        .and_then(|sites| sites.last().cloned())
        .ok_or_else(|| Error::invalid("NAS run produced no derived assignment"))?;
    Ok((model, record, derived))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::{gen_synthetic, SyntheticSpec};
    use crate::harness::train::accuracy;

    fn setup() -> (Dataset, Dataset, ModelConfig) {
        let data = gen_synthetic(&SyntheticSpec {
            height: 8,
            width: 8,
            samples_per_class: 6,
            noise_sigma: 0.5,
            class_bands: vec![
                vec![(0, 1).into()],
                vec![(1, 0).into()],
                vec![(1, 1).into()],
                vec![(0, 2).into()],
            ],
            ..SyntheticSpec::default()
        })
        .unwrap();
        let (tr, va) = data.split_stratified(0.25, 0).unwrap();
        let cfg = ModelConfig {
            channels: vec![4, 4],
            strides: vec![2, 2],
            reduction: 2,
            ..ModelConfig::default()
        };
        (tr, va, cfg)
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_budget_scores_equal_base_accuracy() {
        let (tr, va, cfg) = setup();
        let hyper = Hyper {
            epochs: 2,
            ..Hyper::default()
        };
        let (base, _) = pretrain_base(&cfg, &tr, &va, &hyper).unwrap();
        let base_acc = accuracy(&base, &va).unwrap();
        let budget = Hyper {
            epochs: 0,
            ..Hyper::default()
        };
        let grid = FrequencyGrid::square(2).unwrap();
        let scores = evaluate_components(&base, grid, &tr, &va, &budget).unwrap();
        assert_eq!(scores.len(), 4);
        assert_eq!(
            scores.iter().map(|s| s.component).collect::<Vec<_>>(),
            lf_order(grid)
        );
        for s in scores {
            assert_eq!(s.score, base_acc);
        }
    }

    #[test]
    fn component_out_of_range_is_rejected() {
        let (tr, va, cfg) = setup();
        let base = Model::new(&cfg.with_attention(AttentionKind::None), (8, 8), 0).unwrap();
        let grid = FrequencyGrid::square(2).unwrap();
        let err = evaluate_component(
            &base,
            Component::new(2, 0),
            grid,
            &tr,
            &va,
            &Hyper::default(),
        );
        assert!(matches!(err, Err(Error::ComponentOutOfRange { .. })));
    }

    #[test]
    fn oversized_grid_is_rejected() {
        let (tr, va, cfg) = setup();
        let base = Model::new(&cfg.with_attention(AttentionKind::None), (8, 8), 0).unwrap();
        let err = evaluate_components(
            &base,
            FrequencyGrid::square(4).unwrap(),
            &tr,
            &va,
            &Hyper::default(),
        );
        assert!(err.unwrap_err().to_string().contains("exceeds"));
    }

    #[test]
    fn sweep_rows_and_caps() {
        let (tr, va, cfg) = setup();
        let hyper = Hyper {
            epochs: 1,
            ..Hyper::default()
        };
        let grid = FrequencyGrid::square(2).unwrap();
        let rows = sweep_k(
            Criterion::Lf,
            &[1, 2, 4, 8],
            grid,
            None,
            &cfg,
            &tr,
            &va,
            &hyper,
            &[0, 1],
        )
        .unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(
            rows.iter().map(|r| r.effective_k).collect::<Vec<_>>(),
            vec![1, 2, 4, 4]
        );
        assert!(rows.iter().all(|r| r.accuracies.len() == 2));
        // k that does not divide the channel count fails before training.
        let err = sweep_k(
            Criterion::Lf,
            &[3],
            grid,
            None,
            &cfg,
            &tr,
            &va,
            &hyper,
            &[0],
        );
        assert!(matches!(err, Err(Error::Divisibility { .. })));
        assert!(sweep_k(
            Criterion::Ts,
            &[1],
            grid,
            None,
            &cfg,
            &tr,
            &va,
            &hyper,
            &[0]
        )
        .is_err());
    }

    #[test]
    fn lf_k1_matches_gap_up_to_scale() {
        let (tr, va, cfg) = setup();
        let hyper = Hyper {
            epochs: 2,
            ..Hyper::default()
        };
        let grid = FrequencyGrid::square(2).unwrap();
        let rows = sweep_k(
            Criterion::Lf,
            &[1],
            grid,
            None,
            &cfg,
            &tr,
            &va,
            &hyper,
            &[0],
        )
        .unwrap();
        let gap = run_seeds(
            &cfg.with_attention(AttentionKind::Gap),
            &tr,
            &va,
            &hyper,
            &[0],
        )
        .unwrap();
        assert_eq!(rows[0].accuracies[0], gap[0].final_val_accuracy);
        assert_eq!(rows[0].components, vec![Component::DC]);
    }

    #[test]
    fn learnable_table_shape_and_params() {
        let (tr, va, cfg) = setup();
        let hyper = Hyper {
            epochs: 1,
            ..Hyper::default()
        };
        let assignment = assign_lf(4, 2, FrequencyGrid::square(2).unwrap()).unwrap();
        let rows = compare_learnable(
            &LearnableMode::all(),
            &assignment,
            &cfg,
            &tr,
            &va,
            &hyper,
            &[0, 1],
        )
        .unwrap();
        assert_eq!(
            rows.iter().map(|r| r.label.as_str()).collect::<Vec<_>>(),
            vec!["FR", "LR", "LD", "FD"]
        );
        let gap = Model::new(&cfg.with_attention(AttentionKind::Gap), (8, 8), 0).unwrap();
        assert_eq!(rows[3].param_count, gap.param_count());
        assert_eq!(rows[0].param_count, rows[3].param_count);
        // Two parts on 4x4 and 2x2 sites.
        let extra = 2 * 4 * 4 + 2 * 2 * 2;
        assert_eq!(rows[1].param_count, rows[0].param_count + extra);
        assert_eq!(rows[2].param_count, rows[3].param_count + extra);
    }

    #[test]
    fn nas_search_derives_in_range_assignment() {
        let (tr, va, cfg) = setup();
        let hyper = Hyper {
            epochs: 1,
            ..Hyper::default()
        };
        let grid = FrequencyGrid::square(2).unwrap();
        let (_, record, derived) = nas_search(2, grid, &cfg, &tr, &va, &hyper).unwrap();
        assert_eq!(derived.parts(), 2);
        assert!(derived.components().iter().all(|&c| grid.contains(c)));
        assert_eq!(record.derived_assignment.unwrap().len(), 2);
    }
}
