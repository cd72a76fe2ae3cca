//! A three-stage CNN with an attention block after every stage.
//!
//! ```text
//! input 1 x H x W
//!   -> [conv3x3 (no bias) -> relu -> attention] x 3
//!   -> global average pool -> linear (no bias) -> logits
//! ```
//!
//! With the default strides `[1, 2, 2]` a 16x16 input gives attention sites of
//! 16x16, 8x8 and 4x4. Frequency assignments are written against the smallest
//! site and scaled up to the larger ones (see
//! [`FrequencyAssignment::rescaled`]).
//!
//! Attention blocks start with `W2 = 0` and `b2 = bias_init`, so every gate
//! is the same constant `sigmoid(bias_init)` until training moves `W2`. The
//! network has no biases and only positive scalings between layers, so a
//! constant gate rescales all logits by the same positive factor and leaves
//! every prediction unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    self, AttentionCache, AttentionParams, Compression, CompressionTensor, FrequencyAssignment,
    NasMixture, TensorInit,
};
use crate::error::{Error, Result};
use crate::selection::{nas_derive, FrequencyGrid, NasState};
use crate::tensor::{dot, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttentionKind {
    None,
    Gap,
    /// Fixed DCT pooling. Only the components and grid of `assignment` are
    /// used; the channel count is rebound per site.
    MultiSpectral {
        assignment: FrequencyAssignment,
    },
    /// Pooling planes as free tensors, one per part of `assignment`.
    LearnableTensor {
        init: TensorInit,
        trainable: bool,
        assignment: FrequencyAssignment,
    },
    /// Softmax mixture over every component of `grid`, per part.
    NasSearch {
        parts: usize,
        grid: FrequencyGrid,
    },
}

impl AttentionKind {
    pub fn label(&self) -> String {
        match self {
            AttentionKind::None => "none".into(),
            AttentionKind::Gap => "gap".into(),
            AttentionKind::MultiSpectral { assignment } => format!("ms{}", assignment.parts()),
            AttentionKind::LearnableTensor {
                init, trainable, ..
            } => {
                let f = if *trainable { "L" } else { "F" };
                let i = match init {
                    TensorInit::Random => "R",
                    TensorInit::Dct => "D",
                };
                format!("{f}{i}")
            }
            AttentionKind::NasSearch { parts, .. } => format!("nas{parts}"),
        }
    }

    fn grid(&self) -> Option<(usize, usize)> {
        match self {
            AttentionKind::MultiSpectral { assignment }
            | AttentionKind::LearnableTensor { assignment, .. } => {
                Some((assignment.height(), assignment.width()))
            }
            AttentionKind::NasSearch { grid, .. } => Some((grid.height, grid.width)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub reduction: usize,
    pub num_classes: usize,
    pub attention: AttentionKind,
    /// Initial `b2` of every attention block. The default 0 starts every gate
    /// at 0.5, where the sigmoid is steepest.
    pub attention_bias_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64],
            strides: vec![1, 2, 2],
            reduction: 4,
            num_classes: 4,
            attention: AttentionKind::Gap,
            attention_bias_init: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn with_attention(&self, attention: AttentionKind) -> Self {
        Self {
            attention,
            ..self.clone()
        }
    }

    /// Spatial size of each stage output for a given input size.
    pub fn site_sizes(&self, input: (usize, usize)) -> Result<Vec<(usize, usize)>> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::invalid(
                "channels and strides must be non-empty and equally long",
            ));
        }
        let mut size = input;
        let mut out = Vec::with_capacity(self.strides.len());
        for &s in &self.strides {
            if s == 0 {
                return Err(Error::invalid("stride must be positive"));
            }
            size = ((size.0 - 1) / s + 1, (size.1 - 1) / s + 1);
            out.push(size);
        }
        Ok(out)
    }

    /// Rejects frequency grids that cannot be mapped onto every site.
    pub fn check_grid(&self, input: (usize, usize), grid: (usize, usize)) -> Result<()> {
        for (h, w) in self.site_sizes(input)? {
            if grid.0 > h || grid.1 > w {
                return Err(Error::invalid(format!(
                    "a {}x{} frequency grid exceeds the {h}x{w} attention-site map; \
                     the grid can be at most as large as the smallest site",
                    grid.0, grid.1
                )));
            }
            if h % grid.0 != 0 || w % grid.1 != 0 {
                return Err(Error::invalid(format!(
                    "a {}x{} frequency grid does not evenly divide the {h}x{w} attention-site map",
                    grid.0, grid.1
                )));
            }
        }
        Ok(())
    }

    pub fn smallest_site(&self, input: (usize, usize)) -> Result<(usize, usize)> {
        Ok(*self.site_sizes(input)?.last().expect("non-empty"))
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Conv {
    in_c: usize,
    out_c: usize,
    stride: usize,
    /// `out_c x in_c x 3 x 3`
    weight: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    /// Architecture logits of a NAS mixture.
    Alpha,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttentionMode {
    #[default]
    Learned,
    /// Gates fixed at 1, i.e. attention switched off.
    ForceOnes,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    input_size: (usize, usize),
    sites: Vec<(usize, usize)>,
    convs: Vec<Conv>,
    attention: Vec<Option<AttentionParams>>,
    /// `num_classes x channels.last()`
    classifier: Tensor,
}

/// Streams for the backbone and for attention blocks are independent so
/// models differing only in attention share their backbone initialization.
fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

const BACKBONE_STREAM: u64 = 1;
const ATTENTION_STREAM: u64 = 2;
const TENSOR_STREAM: u64 = 3;

impl Model {
    pub fn new(config: &ModelConfig, input_size: (usize, usize), seed: u64) -> Result<Self> {
        let sites = config.site_sizes(input_size)?;
        if config.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        let mut rng = stream(seed, BACKBONE_STREAM);
        let mut convs = Vec::with_capacity(config.channels.len());
        let mut in_c = 1;
        for (&out_c, &stride) in config.channels.iter().zip(&config.strides) {
            let std = (2.0 / (in_c * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let weight = Tensor::from_fn(&[out_c, in_c, 3, 3], |_| normal.sample(&mut rng))?;
            convs.push(Conv {
                in_c,
                out_c,
                stride,
                weight,
            });
            in_c = out_c;
        }
        let bound = 1.0 / (in_c as f64).sqrt();
        let classifier = Tensor::from_fn(&[config.num_classes, in_c], |_| {
            rng.gen_range(-bound..bound)
        })?;
        let mut model = Self {
            config: config.clone(),
            input_size,
            sites,
            convs,
            attention: Vec::new(),
            classifier,
        };
        model.attention = model.build_attention(&config.attention, seed)?;
        Ok(model)
    }

    /// Copy of this model with fresh attention blocks of another kind; the
    /// backbone weights are kept.
    pub fn with_attention(&self, kind: AttentionKind, seed: u64) -> Result<Self> {
        let mut model = self.clone();
        model.config.attention = kind.clone();
        model.attention = model.build_attention(&kind, seed)?;
        Ok(model)
    }

    fn build_attention(
        &self,
        kind: &AttentionKind,
        seed: u64,
    ) -> Result<Vec<Option<AttentionParams>>> {
        if let Some(grid) = kind.grid() {
            self.config.check_grid(self.input_size, grid)?;
        }
        let mut fc_rng = stream(seed, ATTENTION_STREAM);
        let mut tensor_rng = stream(seed, TENSOR_STREAM);
        let r = self.config.reduction;
        self.sites
            .iter()
            .zip(&self.config.channels)
            .map(|(&(h, w), &c)| {
                let scale = 1.0 / (h * w) as f64;
                let (compression, input_scale) = match kind {
                    AttentionKind::None => return Ok(None),
                    AttentionKind::Gap => (Compression::Gap, 1.0),
                    AttentionKind::MultiSpectral { assignment } => (
                        Compression::MultiSpectral {
                            assignment: assignment.with_channels(c)?.rescaled(h, w)?,
                        },
                        scale,
                    ),
                    AttentionKind::LearnableTensor {
                        init,
                        trainable,
                        assignment,
                    } => {
                        let site = assignment.with_channels(c)?.rescaled(h, w)?;
                        let tensor = match init {
                            TensorInit::Dct => CompressionTensor::from_dct(&site, *trainable)?,
                            TensorInit::Random => CompressionTensor::random(
                                site.parts(),
                                h,
                                w,
                                *trainable,
                                &mut tensor_rng,
                            )?,
                        };
                        (Compression::LearnableTensor { tensor }, scale)
                    }
                    AttentionKind::NasSearch { parts, grid } => (
                        Compression::NasMixture {
                            mixture: NasMixture::new(NasState::uniform(*parts, *grid)?, h, w)?,
                        },
                        scale,
                    ),
                };
                let mut params = AttentionParams::new(c, r, compression)?;
                params.input_scale = input_scale;
                params.randomize_fc(&mut fc_rng);
                params.w2.data_mut().fill(0.0);
                params.b2.data_mut().fill(self.config.attention_bias_init);
                params.validate()?;
                Ok(Some(params))
            })
            .collect()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.input_size
    }

    pub fn sites(&self) -> &[(usize, usize)] {
        &self.sites
    }

    pub fn attention_blocks(&self) -> impl Iterator<Item = &AttentionParams> {
        self.attention.iter().flatten()
    }

    pub fn attention_blocks_mut(&mut self) -> impl Iterator<Item = &mut AttentionParams> {
        self.attention.iter_mut().flatten()
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.weight.len()).sum::<usize>()
            + self
                .attention_blocks()
                .map(AttentionParams::param_count)
                .sum::<usize>()
            + self.classifier.len()
    }

    /// Trainable parameters of the attention blocks only.
    pub fn attention_param_count(&self) -> usize {
        self.attention_blocks()
            .map(AttentionParams::param_count)
            .sum()
    }

    pub fn param_slices_mut(&mut self) -> Vec<(ParamKind, &mut [f64])> {
        let mut out: Vec<(ParamKind, &mut [f64])> = Vec::new();
        for conv in &mut self.convs {
            out.push((ParamKind::Weight, conv.weight.data_mut()));
        }
        for params in self.attention.iter_mut().flatten() {
            let is_nas = matches!(params.compression, Compression::NasMixture { .. });
            for (name, slice) in params.trainable_slices_mut() {
                let kind = if is_nas && name == "compression" {
                    ParamKind::Alpha
                } else {
                    ParamKind::Weight
                };
                out.push((kind, slice));
            }
        }
        out.push((ParamKind::Weight, self.classifier.data_mut()));
        out
    }

    pub fn zero_grads(&mut self) -> Vec<Vec<f64>> {
        self.param_slices_mut()
            .into_iter()
            .map(|(_, s)| vec![0.0; s.len()])
            .collect()
    }

    /// Per-site assignments derived from NAS logits, on the search grid.
    pub fn derived_assignments(&self) -> Result<Option<Vec<FrequencyAssignment>>> {
        if !matches!(self.config.attention, AttentionKind::NasSearch { .. }) {
            return Ok(None);
        }
        self.attention_blocks()
            .map(|p| match &p.compression {
                Compression::NasMixture { mixture } => nas_derive(&mixture.state, p.channels),
                _ => unreachable!("NAS models only carry mixture blocks"),
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != [1, self.input_size.0, self.input_size.1] {
            return Err(Error::ShapeMismatch {
                op: "model forward",
                left: x.shape().to_vec(),
                right: vec![1, self.input_size.0, self.input_size.1],
            });
        }
        Ok(())
    }

    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.logits_with(x, AttentionMode::Learned)
    }

    pub fn logits_with(&self, x: &Tensor, mode: AttentionMode) -> Result<Vec<f64>> {
        Ok(self.forward(x, mode)?.logits)
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Cross-entropy of one sample.
    pub fn loss(&self, x: &Tensor, label: usize, mode: AttentionMode) -> Result<f64> {
        let logits = self.logits_with(x, mode)?;
        Ok(cross_entropy(&logits, label).0)
    }

    fn forward(&self, x: &Tensor, mode: AttentionMode) -> Result<Tape> {
        self.check_input(x)?;
        let mut act = x.data().to_vec();
        let (mut h, mut w) = self.input_size;
        let mut stages = Vec::with_capacity(self.convs.len());
        for (conv, params) in self.convs.iter().zip(&self.attention) {
            let (ho, wo) = ((h - 1) / conv.stride + 1, (w - 1) / conv.stride + 1);
            let (pre, cols) = conv_forward(&act, conv, h, w, ho, wo);
            let relu: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
            let (out, cache) = match (params, mode) {
                (Some(p), AttentionMode::Learned) => {
                    let feat = Tensor::from_parts(vec![conv.out_c, ho, wo], relu);
                    let (att, cache) = attention::attention_forward(&feat, p)?;
                    (
                        attention::apply_attention(&feat, &att)?.into_data(),
                        Some(cache),
                    )
                }
                _ => (relu, None),
            };
            act = out;
            stages.push(Stage {
                cols,
                in_size: (h, w),
                pre,
                cache,
            });
            h = ho;
            w = wo;
        }
        let c = self.convs.last().expect("non-empty").out_c;
        let hw = (h * w) as f64;
        let pooled: Vec<f64> = (0..c)
            .map(|ch| act[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / hw)
            .collect();
        let logits = (0..self.config.num_classes)
            .map(|k| dot(&self.classifier.data()[k * c..(k + 1) * c], &pooled))
            .collect();
        Ok(Tape {
            stages,
            final_size: (h, w),
            pooled,
            logits,
        })
    }

    /// Adds the gradient of one sample's cross-entropy into `grads` (laid out
    /// like [`Model::param_slices_mut`]) and returns the loss.
    pub fn accumulate_grads(
        &self,
        x: &Tensor,
        label: usize,
        grads: &mut [Vec<f64>],
    ) -> Result<f64> {
        let tape = self.forward(x, AttentionMode::Learned)?;
        let (loss, dlogits) = cross_entropy(&tape.logits, label);

        let c = self.convs.last().expect("non-empty").out_c;
        let cls_slot = grads.len() - 1;
        for (k, &d) in dlogits.iter().enumerate() {
            for (g, &p) in grads[cls_slot][k * c..(k + 1) * c]
                .iter_mut()
                .zip(&tape.pooled)
            {
                *g += d * p;
            }
        }
        let (h, w) = tape.final_size;
        let hw = h * w;
        let mut dact = vec![0.0; c * hw];
        for ch in 0..c {
            let d: f64 = (0..self.config.num_classes)
                .map(|k| self.classifier.data()[k * c + ch] * dlogits[k])
                .sum::<f64>()
                / hw as f64;
            dact[ch * hw..(ch + 1) * hw].fill(d);
        }

        // slots: convs first, then attention blocks in site order, then classifier
        let mut attn_slot: Vec<usize> = Vec::with_capacity(self.attention.len());
        let mut next = self.convs.len();
        for p in &self.attention {
            attn_slot.push(next);
            if let Some(p) = p {
                next += 4 + usize::from(p.compression.extra_params() > 0);
            }
        }

        for (s, stage) in tape.stages.iter().enumerate().rev() {
            let conv = &self.convs[s];
            let (hi, wi) = stage.in_size;
            let (ho, wo) = ((hi - 1) / conv.stride + 1, (wi - 1) / conv.stride + 1);
            let mut drelu = match (&self.attention[s], &stage.cache) {
                (Some(p), Some(cache)) => {
                    let g = Tensor::from_parts(vec![conv.out_c, ho, wo], dact);
                    let (gx, ag) = attention::attention_backward(&g, cache, p)?;
                    for (offset, (_, gslice)) in ag.slices().into_iter().enumerate() {
                        for (acc, v) in grads[attn_slot[s] + offset].iter_mut().zip(gslice) {
                            *acc += v;
                        }
                    }
                    gx.into_data()
                }
                _ => dact,
            };
            for (d, &p) in drelu.iter_mut().zip(&stage.pre) {
                if p <= 0.0 {
                    *d = 0.0;
                }
            }
            let need_input_grad = s > 0;
            dact = conv_backward(
                &stage.cols,
                conv,
                hi,
                wi,
                ho,
                wo,
                &drelu,
                &mut grads[s],
                need_input_grad,
            );
        }
        Ok(loss)
    }
}

struct Stage {
    /// Patch matrix of the stage input.
    cols: Vec<f64>,
    in_size: (usize, usize),
    pre: Vec<f64>,
    cache: Option<AttentionCache>,
}

struct Tape {
    stages: Vec<Stage>,
    final_size: (usize, usize),
    pooled: Vec<f64>,
    logits: Vec<f64>,
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Loss and gradient with respect to the logits.
fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Output columns `ox` whose tap `kx` lands inside `0..w`, for padding 1.
#[inline]
fn valid_range(k: usize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    // ix = ox*stride + k - 1 must satisfy 0 <= ix < w
    let lo = if k == 0 { 1usize.div_ceil(stride) } else { 0 };
    let hi = if w + 1 > k {
        ((w + 1 - k - 1) / stride + 1).min(wo)
    } else {
        0
    };
    (lo, hi)
}

/// Patch matrix of a padded 3x3 convolution: row `(ci, ky, kx)`, column
/// `(oy, ox)`.
fn im2col(
    input: &[f64],
    in_c: usize,
    stride: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let p = ho * wo;
    let mut cols = vec![0.0; in_c * 9 * p];
    for ci in 0..in_c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            let (oy_lo, oy_hi) = valid_range(ky, stride, h, ho);
            for kx in 0..3 {
                let (ox_lo, ox_hi) = valid_range(kx, stride, w, wo);
                let row = &mut cols[((ci * 3 + ky) * 3 + kx) * p..][..p];
                for oy in oy_lo..oy_hi {
                    let in_row = &plane[(oy * stride + ky - 1) * w..][..w];
                    for ox in ox_lo..ox_hi {
                        row[oy * wo + ox] = in_row[ox * stride + kx - 1];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a patch-matrix gradient back onto the input planes.
fn col2im(
    dcols: &[f64],
    in_c: usize,
    stride: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let p = ho * wo;
    let mut din = vec![0.0; in_c * h * w];
    for ci in 0..in_c {
        let plane = &mut din[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            let (oy_lo, oy_hi) = valid_range(ky, stride, h, ho);
            for kx in 0..3 {
                let (ox_lo, ox_hi) = valid_range(kx, stride, w, wo);
                let row = &dcols[((ci * 3 + ky) * 3 + kx) * p..][..p];
                for oy in oy_lo..oy_hi {
                    let in_row = &mut plane[(oy * stride + ky - 1) * w..][..w];
                    for ox in ox_lo..ox_hi {
                        in_row[ox * stride + kx - 1] += row[oy * wo + ox];
                    }
                }
            }
        }
    }
    din
}

/// Row-major `c = beta * c + a * b` with optional transposes given as strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Returns the pre-activation output and the patch matrix for the backward pass.
fn conv_forward(
    input: &[f64],
    conv: &Conv,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(input, conv.in_c, conv.stride, h, w, ho, wo);
    let (k, p) = (conv.in_c * 9, ho * wo);
    let mut out = vec![0.0; conv.out_c * p];
    gemm(
        conv.out_c,
        k,
        p,
        conv.weight.data(),
        (k as isize, 1),
        &cols,
        (p as isize, 1),
        0.0,
        &mut out,
    );
    (out, cols)
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    cols: &[f64],
    conv: &Conv,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    dout: &[f64],
    dweight: &mut [f64],
    need_input_grad: bool,
) -> Vec<f64> {
    let (k, p) = (conv.in_c * 9, ho * wo);
    // dW += dout * cols^T
    gemm(
        conv.out_c,
        p,
        k,
        dout,
        (p as isize, 1),
        cols,
        (1, p as isize),
        1.0,
        dweight,
    );
    if !need_input_grad {
        return Vec::new();
    }
    // dcols = W^T * dout
    let mut dcols = vec![0.0; k * p];
    gemm(
        k,
        conv.out_c,
        p,
        conv.weight.data(),
        (1, k as isize),
        dout,
        (p as isize, 1),
        0.0,
        &mut dcols,
    );
    col2im(&dcols, conv.in_c, conv.stride, h, w, ho, wo)
}
