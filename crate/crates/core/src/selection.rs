//! Choosing which DCT components feed the attention head.
//!
//! Three criteria are provided:
//!
//! * low-frequency ([`assign_lf`]): the first `k` components in zigzag order,
//!   sorted by `u + v`, then `u`, then `v`;
//! * two-step ([`assign_ts`]): the `k` best components according to
//!   per-component scores measured beforehand;
//! * search ([`NasState`], [`nas_mix`], [`nas_derive`]): a softmax mixture
//!   over every component per channel part, trained jointly with the network,
//!   then collapsed to its argmax.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::attention::FrequencyAssignment;
use crate::dct::{self, Component};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyGrid {
    pub height: usize,
    pub width: usize,
}

impl FrequencyGrid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("frequency grid needs positive extents"));
        }
        Ok(Self { height, width })
    }

    pub fn square(side: usize) -> Result<Self> {
        Self::new(side, side)
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every component, row-major in `(u, v)`.
    pub fn components(&self) -> Vec<Component> {
        (0..self.height)
            .flat_map(|u| (0..self.width).map(move |v| Component::new(u, v)))
            .collect()
    }

    pub fn contains(&self, c: Component) -> bool {
        c.u < self.height && c.v < self.width
    }
}

/// Sort key for the low-frequency order.
pub fn lf_key(c: Component) -> (usize, usize, usize) {
    (c.u + c.v, c.u, c.v)
}

pub fn lf_order(grid: FrequencyGrid) -> Vec<Component> {
    let mut all = grid.components();
    all.sort_by_key(|&c| lf_key(c));
    all
}

pub fn assign_lf(channels: usize, k: usize, grid: FrequencyGrid) -> Result<FrequencyAssignment> {
    if k == 0 || k > grid.len() {
        return Err(Error::invalid(format!(
            "k = {k} must be in 1..={} for a {}x{} grid",
            grid.len(),
            grid.height,
            grid.width
        )));
    }
    let components = lf_order(grid).into_iter().take(k).collect();
    FrequencyAssignment::new(channels, grid.height, grid.width, components)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentScore {
    pub component: Component,
    pub score: f64,
}

#[derive(Serialize, Deserialize)]
struct ScoreRow {
    u: usize,
    v: usize,
    score: f64,
}

/// Top-`k` components by descending score; equal scores go to the lower
/// frequency.
pub fn assign_ts(
    channels: usize,
    k: usize,
    scores: &[ComponentScore],
    grid: FrequencyGrid,
) -> Result<FrequencyAssignment> {
    if k == 0 || k > scores.len() {
        return Err(Error::invalid(format!(
            "k = {k} must be in 1..={} (number of scored components)",
            scores.len()
        )));
    }
    for (i, s) in scores.iter().enumerate() {
        if scores[..i].iter().any(|t| t.component == s.component) {
            return Err(Error::DuplicateComponent {
                u: s.component.u,
                v: s.component.v,
            });
        }
        if !s.score.is_finite() {
            return Err(Error::invalid(format!(
                "score for {} is not finite",
                s.component
            )));
        }
        s.component.check_in(grid.height, grid.width)?;
    }
    let mut ranked = scores.to_vec();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| lf_key(a.component).cmp(&lf_key(b.component)))
    });
    let components = ranked.into_iter().take(k).map(|s| s.component).collect();
    FrequencyAssignment::new(channels, grid.height, grid.width, components)
}

pub fn write_scores_csv<W: Write>(scores: &[ComponentScore], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in scores {
        w.serialize(ScoreRow {
            u: s.component.u,
            v: s.component.v,
            score: s.score,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv<R: Read>(input: R) -> Result<Vec<ComponentScore>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize::<ScoreRow>()
        .map(|row| {
            let row = row?;
            Ok(ComponentScore {
                component: Component::new(row.u, row.v),
                score: row.score,
            })
        })
        .collect()
}

/// Numerically stable softmax of `logits / temperature`.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&a| ((a - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Architecture variables for the component search: one logit per grid
/// component for each channel part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NasState {
    /// `n x H x W` logits.
    pub alpha: Tensor,
    pub temperature: f64,
}

impl NasState {
    /// All-zero logits, i.e. a uniform mixture.
    pub fn uniform(parts: usize, grid: FrequencyGrid) -> Result<Self> {
        Ok(Self {
            alpha: Tensor::zeros(&[parts, grid.height, grid.width])?,
            temperature: 1.0,
        })
    }

    pub fn new(alpha: Tensor, temperature: f64) -> Result<Self> {
        alpha.dims3("NasState")?;
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self { alpha, temperature })
    }

    pub fn parts(&self) -> usize {
        self.alpha.shape()[0]
    }

    pub fn grid(&self) -> FrequencyGrid {
        FrequencyGrid {
            height: self.alpha.shape()[1],
            width: self.alpha.shape()[2],
        }
    }

    pub fn alpha_part(&self, part: usize) -> &[f64] {
        let n = self.grid().len();
        &self.alpha.data()[part * n..(part + 1) * n]
    }

    pub fn weights(&self, part: usize) -> Vec<f64> {
        softmax(self.alpha_part(part), self.temperature)
    }
}

/// Softmax-weighted sum of every single-component pooling of `xpart`.
pub fn nas_mix(xpart: &Tensor, alpha_part: &Tensor, temperature: f64) -> Result<Tensor> {
    let (c, h, w) = xpart.dims3("nas_mix")?;
    let (ah, aw) = alpha_part.dims2("nas_mix")?;
    if (ah, aw) != (h, w) {
        return Err(Error::ShapeMismatch {
            op: "nas_mix",
            left: xpart.shape().to_vec(),
            right: alpha_part.shape().to_vec(),
        });
    }
    let weights = softmax(alpha_part.data(), temperature);
    let mut out = vec![0.0; c];
    for (k, &wk) in weights.iter().enumerate() {
        let pooled = dct::spectral_pool(xpart, k / w, k % w)?;
        for (o, p) in out.iter_mut().zip(pooled.data()) {
            *o += wk * p;
        }
    }
    Tensor::new(vec![c], out)
}

/// Collapses each part's mixture to its highest-logit component.
pub fn nas_derive(state: &NasState, channels: usize) -> Result<FrequencyAssignment> {
    let grid = state.grid();
    let components = (0..state.parts())
        .map(|p| {
            state
                .alpha_part(p)
                .iter()
                .enumerate()
                .map(|(k, &a)| (a, Component::new(k / grid.width, k % grid.width)))
                .max_by(|(a, ca), (b, cb)| {
                    a.total_cmp(b).then_with(|| lf_key(*cb).cmp(&lf_key(*ca)))
                })
                .map(|(_, c)| c)
                .expect("grid is non-empty")
        })
        .collect();
    FrequencyAssignment::new(channels, grid.height, grid.width, components)
}
