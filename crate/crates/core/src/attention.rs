//! Channel attention with pluggable channel compression.
//!
//! The block computes
//!
//! ```text
//! z   = compress(X) * input_scale          (C)
//! att = sigmoid(W2 relu(W1 z + b1) + b2)   (C)
//! out = att[c] * X[c]                      (C x H x W)
//! ```
//!
//! `compress` is either spatial mean pooling, or a split of the channels into
//! `n` equal parts where part `i` is projected onto one weight plane: a fixed
//! DCT basis ([`Compression::MultiSpectral`]), a free tensor
//! ([`Compression::LearnableTensor`]), or a softmax mixture of DCT bases
//! ([`Compression::NasMixture`]). Backward passes are analytic for every
//! variant.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dct::{self, Component};
use crate::error::{Error, Result};
use crate::selection::{FrequencyGrid, NasState};
use crate::tensor::{dot, Tensor};

/// Which DCT component each channel part is pooled with.
///
/// Part `i` covers channels `i*C/n .. (i+1)*C/n` and uses `components[i]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "AssignmentDoc", into = "AssignmentDoc")]
pub struct FrequencyAssignment {
    channels: usize,
    height: usize,
    width: usize,
    components: Vec<Component>,
}

#[derive(Serialize, Deserialize)]
struct AssignmentDoc {
    n: usize,
    #[serde(rename = "H")]
    height: usize,
    #[serde(rename = "W")]
    width: usize,
    #[serde(rename = "C")]
    channels: usize,
    components: Vec<Component>,
}

impl TryFrom<AssignmentDoc> for FrequencyAssignment {
    type Error = Error;

    fn try_from(doc: AssignmentDoc) -> Result<Self> {
        if doc.n != doc.components.len() {
            return Err(Error::invalid(format!(
                "assignment declares n = {} but lists {} components",
                doc.n,
                doc.components.len()
            )));
        }
        FrequencyAssignment::new(doc.channels, doc.height, doc.width, doc.components)
    }
}

impl From<FrequencyAssignment> for AssignmentDoc {
    fn from(a: FrequencyAssignment) -> Self {
        AssignmentDoc {
            n: a.components.len(),
            height: a.height,
            width: a.width,
            channels: a.channels,
            components: a.components,
        }
    }
}

impl FrequencyAssignment {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        components: Vec<Component>,
    ) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid(
                "frequency assignment needs at least one part",
            ));
        }
        if height == 0 || width == 0 {
            return Err(Error::invalid(
                "frequency assignment needs positive extents",
            ));
        }
        if channels == 0 || !channels.is_multiple_of(components.len()) {
            return Err(Error::Divisibility {
                what: "channel count",
                value: channels,
                divisor: components.len(),
            });
        }
        for c in &components {
            c.check_in(height, width)?;
        }
        if height == 1 && width == 1 && components.len() > 1 {
            log::warn!(
                "{} parts on a 1x1 map: every part pools with (0, 0)",
                components.len()
            );
        }
        Ok(Self {
            channels,
            height,
            width,
            components,
        })
    }

    /// Every channel pooled with the same component.
    pub fn uniform(
        channels: usize,
        height: usize,
        width: usize,
        component: Component,
    ) -> Result<Self> {
        Self::new(channels, height, width, vec![component])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn parts(&self) -> usize {
        self.components.len()
    }

    pub fn part_size(&self) -> usize {
        self.channels / self.components.len()
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn component_for_channel(&self, channel: usize) -> Component {
        self.components[channel / self.part_size()]
    }

    pub fn with_channels(&self, channels: usize) -> Result<Self> {
        Self::new(channels, self.height, self.width, self.components.clone())
    }

    /// Maps the assignment onto a larger map whose extents are integer
    /// multiples of this one, scaling each index so it keeps the same
    /// fraction of the frequency range.
    pub fn rescaled(&self, height: usize, width: usize) -> Result<Self> {
        let (sh, sw) = scale_factors(self.height, self.width, height, width)?;
        let components = self
            .components
            .iter()
            .map(|c| Component::new(c.u * sh, c.v * sw))
            .collect();
        Self::new(self.channels, height, width, components)
    }
}

fn scale_factors(
    grid_h: usize,
    grid_w: usize,
    height: usize,
    width: usize,
) -> Result<(usize, usize)> {
    if !height.is_multiple_of(grid_h) || !width.is_multiple_of(grid_w) {
        return Err(Error::invalid(format!(
            "a {height}x{width} map is not an integer multiple of the {grid_h}x{grid_w} frequency grid"
        )));
    }
    Ok((height / grid_h, width / grid_w))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorInit {
    Random,
    Dct,
}

/// Free-form pooling planes, one per channel part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionTensor {
    pub init: TensorInit,
    pub trainable: bool,
    /// `n x H x W`.
    pub weights: Tensor,
}

impl CompressionTensor {
    /// Planes copied from the DCT bases of `assignment`.
    pub fn from_dct(assignment: &FrequencyAssignment, trainable: bool) -> Result<Self> {
        let planes = assignment
            .components()
            .iter()
            .map(|c| Ok(dct::basis(assignment.height(), assignment.width(), c.u, c.v)?.values))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            init: TensorInit::Dct,
            trainable,
            weights: Tensor::stack(&planes)?,
        })
    }

    /// Planes drawn uniformly from `[-1, 1]`, the value range of a DCT basis.
    pub fn random(
        parts: usize,
        height: usize,
        width: usize,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            init: TensorInit::Random,
            trainable,
            weights: Tensor::from_fn(&[parts, height, width], |_| rng.gen_range(-1.0..=1.0))?,
        })
    }

    pub fn parts(&self) -> usize {
        self.weights.shape()[0]
    }
}

/// Softmax mixture over a grid of candidate components.
///
/// Candidate `(a, b)` of the logit grid pools with basis `(a*sh, b*sw)` on
/// the `height x width` map, where `sh = height / grid.height` (likewise for
/// `sw`). When the grid matches the map this is the plain mixture over every
/// component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NasMixture {
    pub state: NasState,
    pub height: usize,
    pub width: usize,
}

impl NasMixture {
    pub fn new(state: NasState, height: usize, width: usize) -> Result<Self> {
        let grid = state.grid();
        scale_factors(grid.height, grid.width, height, width)?;
        Ok(Self {
            state,
            height,
            width,
        })
    }

    /// Candidate components in map coordinates, in logit order.
    pub fn candidates(&self) -> Vec<Component> {
        let grid = self.state.grid();
        let sh = self.height / grid.height;
        let sw = self.width / grid.width;
        grid.components()
            .into_iter()
            .map(|c| Component::new(c.u * sh, c.v * sw))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum Compression {
    Gap,
    MultiSpectral { assignment: FrequencyAssignment },
    LearnableTensor { tensor: CompressionTensor },
    NasMixture { mixture: NasMixture },
}

impl Compression {
    pub fn name(&self) -> &'static str {
        match self {
            Compression::Gap => "gap",
            Compression::MultiSpectral { .. } => "multi_spectral",
            Compression::LearnableTensor { .. } => "learnable_tensor",
            Compression::NasMixture { .. } => "nas_mixture",
        }
    }

    pub fn parts(&self) -> usize {
        match self {
            Compression::Gap => 1,
            Compression::MultiSpectral { assignment } => assignment.parts(),
            Compression::LearnableTensor { tensor } => tensor.parts(),
            Compression::NasMixture { mixture } => mixture.state.parts(),
        }
    }

    /// Spatial extents the strategy is bound to, if any.
    pub fn map_size(&self) -> Option<(usize, usize)> {
        match self {
            Compression::Gap => None,
            Compression::MultiSpectral { assignment } => {
                Some((assignment.height(), assignment.width()))
            }
            Compression::LearnableTensor { tensor } => {
                let s = tensor.weights.shape();
                Some((s[1], s[2]))
            }
            Compression::NasMixture { mixture } => Some((mixture.height, mixture.width)),
        }
    }

    /// Number of trainable values the compression itself adds.
    pub fn extra_params(&self) -> usize {
        match self {
            Compression::LearnableTensor { tensor } if tensor.trainable => tensor.weights.len(),
            Compression::NasMixture { mixture } => mixture.state.alpha.len(),
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub channels: usize,
    pub reduction: usize,
    /// `(C/r) x C`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `C x (C/r)`
    pub w2: Tensor,
    pub b2: Tensor,
    pub compression: Compression,
    /// Multiplies the compressed vector before the fc head.
    #[serde(default = "one")]
    pub input_scale: f64,
}

fn one() -> f64 {
    1.0
}

fn hidden_size(channels: usize, reduction: usize) -> Result<usize> {
    if channels == 0
        || reduction == 0
        || reduction > channels
        || !channels.is_multiple_of(reduction)
    {
        return Err(Error::Divisibility {
            what: "channels / reduction ratio",
            value: channels,
            divisor: reduction,
        });
    }
    Ok(channels / reduction)
}

/// Trainable parameter count of an attention block: the two-layer fc head
/// plus whatever the compression strategy learns.
pub fn param_count(channels: usize, reduction: usize, compression: &Compression) -> Result<usize> {
    let hidden = hidden_size(channels, reduction)?;
    Ok(channels * hidden + hidden + hidden * channels + channels + compression.extra_params())
}

/// Floating-point operations of one attention block on a `C x H x W` input,
/// counting a multiply-add as two. The fc head, sigmoid, and scaling are
/// shared by every strategy; only compression differs.
pub fn attention_flops(
    channels: usize,
    height: usize,
    width: usize,
    reduction: usize,
    compression: &Compression,
) -> Result<u64> {
    let hidden = hidden_size(channels, reduction)? as u64;
    let (c, hw) = (channels as u64, (height * width) as u64);
    let compress = match compression {
        // sum, then one division per channel
        Compression::Gap => c * hw + c,
        // dot product per channel against a precomputed plane
        Compression::MultiSpectral { .. } | Compression::LearnableTensor { .. } => 2 * c * hw,
        Compression::NasMixture { mixture } => {
            2 * c * hw + 2 * (mixture.state.parts() * mixture.state.grid().len()) as u64 * hw
        }
    };
    let fc = 2 * c * hidden + hidden + hidden + 2 * hidden * c + c;
    let sigmoid = 4 * c;
    let scale = c * hw;
    Ok(compress + fc + sigmoid + scale)
}

impl AttentionParams {
    /// All-zero fc head (so `att == 0.5` everywhere) with unit input scale.
    pub fn new(channels: usize, reduction: usize, compression: Compression) -> Result<Self> {
        let hidden = hidden_size(channels, reduction)?;
        let params = Self {
            channels,
            reduction,
            w1: Tensor::zeros(&[hidden, channels])?,
            b1: Tensor::zeros(&[hidden])?,
            w2: Tensor::zeros(&[channels, hidden])?,
            b2: Tensor::zeros(&[channels])?,
            compression,
            input_scale: 1.0,
        };
        params.validate()?;
        Ok(params)
    }

    /// Uniform `+-1/sqrt(fan_in)` fc weights, zero biases.
    pub fn randomize_fc(&mut self, rng: &mut impl Rng) {
        let hidden = self.hidden();
        let a1 = 1.0 / (self.channels as f64).sqrt();
        let a2 = 1.0 / (hidden as f64).sqrt();
        for w in self.w1.data_mut() {
            *w = rng.gen_range(-a1..a1);
        }
        for w in self.w2.data_mut() {
            *w = rng.gen_range(-a2..a2);
        }
        self.b1.data_mut().fill(0.0);
        self.b2.data_mut().fill(0.0);
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn param_count(&self) -> usize {
        param_count(self.channels, self.reduction, &self.compression).expect("validated params")
    }

    pub fn validate(&self) -> Result<()> {
        let hidden = hidden_size(self.channels, self.reduction)?;
        let expect = |t: &Tensor, shape: &[usize], name: &str| {
            if t.shape() == shape {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
        };
        expect(&self.w1, &[hidden, self.channels], "w1")?;
        expect(&self.b1, &[hidden], "b1")?;
        expect(&self.w2, &[self.channels, hidden], "w2")?;
        expect(&self.b2, &[self.channels], "b2")?;
        if !(self.input_scale.is_finite() && self.input_scale != 0.0) {
            return Err(Error::invalid(format!(
                "input_scale must be finite and nonzero, got {}",
                self.input_scale
            )));
        }
        let parts = self.compression.parts();
        if !self.channels.is_multiple_of(parts) {
            return Err(Error::Divisibility {
                what: "channel count",
                value: self.channels,
                divisor: parts,
            });
        }
        match &self.compression {
            Compression::MultiSpectral { assignment } if assignment.channels() != self.channels => {
                Err(Error::invalid(format!(
                    "assignment is for {} channels, block has {}",
                    assignment.channels(),
                    self.channels
                )))
            }
            Compression::LearnableTensor { tensor } => {
                tensor.weights.dims3("compression tensor").map(|_| ())
            }
            _ => Ok(()),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let params: Self = serde_json::from_str(text)?;
        params.validate()?;
        Ok(params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Mutable views of every trainable value, in a fixed order matching
    /// [`AttentionGrads::slices`].
    pub fn trainable_slices_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out: Vec<(&'static str, &mut [f64])> = vec![
            ("w1", self.w1.data_mut()),
            ("b1", self.b1.data_mut()),
            ("w2", self.w2.data_mut()),
            ("b2", self.b2.data_mut()),
        ];
        match &mut self.compression {
            Compression::LearnableTensor { tensor } if tensor.trainable => {
                out.push(("compression", tensor.weights.data_mut()))
            }
            Compression::NasMixture { mixture } => {
                out.push(("compression", mixture.state.alpha.data_mut()))
            }
            _ => {}
        }
        out
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.channels.hash(&mut h);
        self.reduction.hash(&mut h);
        self.input_scale.to_bits().hash(&mut h);
        let mut feed = |t: &Tensor| {
            t.shape().hash(&mut h);
            for x in t.data() {
                x.to_bits().hash(&mut h);
            }
        };
        feed(&self.w1);
        feed(&self.b1);
        feed(&self.w2);
        feed(&self.b2);
        match &self.compression {
            Compression::Gap => {}
            Compression::MultiSpectral { assignment } => {
                for c in assignment.components() {
                    feed(&Tensor::from_parts(vec![2], vec![c.u as f64, c.v as f64]));
                }
            }
            Compression::LearnableTensor { tensor } => feed(&tensor.weights),
            Compression::NasMixture { mixture } => {
                feed(&mixture.state.alpha);
                mixture.state.temperature.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Per-part pooling planes, or plain mean pooling.
#[derive(Clone, Debug)]
enum Pooling {
    Mean,
    Planes {
        /// `n x H*W`, row-major.
        planes: Vec<f64>,
        /// softmax weights per part, for mixtures
        mixture: Option<Vec<Vec<f64>>>,
    },
}

fn pooling_for(params: &AttentionParams, height: usize, width: usize) -> Result<Pooling> {
    let hw = height * width;
    let check_map = |h: usize, w: usize| {
        if (h, w) != (height, width) {
            Err(Error::ShapeMismatch {
                op: "compress",
                left: vec![params.channels, height, width],
                right: vec![params.channels, h, w],
            })
        } else {
            Ok(())
        }
    };
    match &params.compression {
        Compression::Gap => Ok(Pooling::Mean),
        Compression::MultiSpectral { assignment } => {
            check_map(assignment.height(), assignment.width())?;
            let mut unique: Vec<Component> = Vec::new();
            for &c in assignment.components() {
                if !unique.contains(&c) {
                    unique.push(c);
                }
            }
            let bank = dct::cached_filter_bank(height, width, &unique)?;
            let mut planes = Vec::with_capacity(assignment.parts() * hw);
            for &c in assignment.components() {
                let k = bank.position(c).expect("component is in the bank");
                planes.extend_from_slice(bank.plane(k));
            }
            Ok(Pooling::Planes {
                planes,
                mixture: None,
            })
        }
        Compression::LearnableTensor { tensor } => {
            let (_, h, w) = tensor.weights.dims3("compression tensor")?;
            check_map(h, w)?;
            Ok(Pooling::Planes {
                planes: tensor.weights.data().to_vec(),
                mixture: None,
            })
        }
        Compression::NasMixture { mixture } => {
            check_map(mixture.height, mixture.width)?;
            let bank = dct::cached_filter_bank(height, width, &mixture.candidates())?;
            let parts = mixture.state.parts();
            let mut planes = vec![0.0; parts * hw];
            let mut weights = Vec::with_capacity(parts);
            for p in 0..parts {
                let wts = mixture.state.weights(p);
                let plane = &mut planes[p * hw..(p + 1) * hw];
                for (k, &wk) in wts.iter().enumerate() {
                    for (dst, &b) in plane.iter_mut().zip(bank.plane(k)) {
                        *dst += wk * b;
                    }
                }
                weights.push(wts);
            }
            Ok(Pooling::Planes {
                planes,
                mixture: Some(weights),
            })
        }
    }
}

fn check_input(x: &Tensor, params: &AttentionParams) -> Result<(usize, usize, usize)> {
    let (c, h, w) = x.dims3("attention")?;
    if c != params.channels {
        return Err(Error::ShapeMismatch {
            op: "attention",
            left: x.shape().to_vec(),
            right: vec![params.channels, h, w],
        });
    }
    Ok((c, h, w))
}

fn pool(x: &Tensor, pooling: &Pooling, parts: usize) -> Tensor {
    match pooling {
        Pooling::Mean => x.reduce_mean_hw().expect("rank checked"),
        Pooling::Planes { planes, .. } => {
            let (c, h, w) = x.dims3("compress").expect("rank checked");
            let hw = h * w;
            let part_size = c / parts;
            let xs = x.data();
            let data = (0..c)
                .map(|ch| {
                    let p = ch / part_size;
                    dot(&xs[ch * hw..(ch + 1) * hw], &planes[p * hw..(p + 1) * hw])
                })
                .collect();
            Tensor::from_parts(vec![c], data)
        }
    }
}

/// The per-channel compression vector (before `input_scale`).
pub fn compress(x: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    let (_, h, w) = check_input(x, params)?;
    params.validate()?;
    let pooling = pooling_for(params, h, w)?;
    Ok(pool(x, &pooling, params.compression.parts()))
}

/// Sigmoid kept strictly inside `(0, 1)`.
pub fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Intermediates of one forward pass, consumed by [`attention_backward`].
#[derive(Clone, Debug)]
pub struct AttentionCache {
    input: Tensor,
    fc_in: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    att: Vec<f64>,
    pooling: Pooling,
    fingerprint: u64,
}

impl AttentionCache {
    pub fn att(&self) -> &[f64] {
        &self.att
    }
}

pub fn attention_forward(x: &Tensor, params: &AttentionParams) -> Result<(Tensor, AttentionCache)> {
    let (c, h, w) = check_input(x, params)?;
    params.validate()?;
    let pooling = pooling_for(params, h, w)?;
    let z = pool(x, &pooling, params.compression.parts());
    let fc_in: Vec<f64> = z.data().iter().map(|v| v * params.input_scale).collect();

    let hidden_n = params.hidden();
    let w1 = params.w1.data();
    let pre: Vec<f64> = (0..hidden_n)
        .map(|k| dot(&w1[k * c..(k + 1) * c], &fc_in) + params.b1.data()[k])
        .collect();
    let hidden: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
    let w2 = params.w2.data();
    let att: Vec<f64> = (0..c)
        .map(|ch| {
            sigmoid(dot(&w2[ch * hidden_n..(ch + 1) * hidden_n], &hidden) + params.b2.data()[ch])
        })
        .collect();

    let out = Tensor::new(vec![c], att.clone())?;
    Ok((
        out,
        AttentionCache {
            input: x.clone(),
            fc_in,
            pre,
            hidden,
            att,
            pooling,
            fingerprint: params.fingerprint(),
        },
    ))
}

/// `out[c, i, j] = att[c] * x[c, i, j]`.
pub fn apply_attention(x: &Tensor, att: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3("apply_attention")?;
    if att.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "apply_attention",
            left: x.shape().to_vec(),
            right: att.shape().to_vec(),
        });
    }
    let hw = h * w;
    let mut data = x.data().to_vec();
    for (ch, &a) in att.data().iter().enumerate() {
        for v in &mut data[ch * hw..(ch + 1) * hw] {
            *v *= a;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrads {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    /// Gradient of the compression tensor (trainable learnable tensors) or of
    /// the mixture logits (NAS); `None` when the compression has no
    /// trainable state.
    pub compression: Option<Tensor>,
}

impl AttentionGrads {
    pub fn slices(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = vec![
            ("w1", self.w1.data()),
            ("b1", self.b1.data()),
            ("w2", self.w2.data()),
            ("b2", self.b2.data()),
        ];
        if let Some(g) = &self.compression {
            out.push(("compression", g.data()));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BackwardPath {
    /// Both the direct scaling path and the path through the attention weights.
    #[default]
    Full,
    /// Treats `att` as a constant: `grad_x[c] = att[c] * grad_out[c]`.
    DirectOnly,
}

/// Gradients of a scalar loss through `apply_attention(X, attention_forward(X))`.
pub fn attention_backward(
    grad_out: &Tensor,
    cache: &AttentionCache,
    params: &AttentionParams,
) -> Result<(Tensor, AttentionGrads)> {
    attention_backward_with(grad_out, cache, params, BackwardPath::Full)
}

pub fn attention_backward_with(
    grad_out: &Tensor,
    cache: &AttentionCache,
    params: &AttentionParams,
    path: BackwardPath,
) -> Result<(Tensor, AttentionGrads)> {
    if grad_out.shape() != cache.input.shape() {
        return Err(Error::StaleCache(format!(
            "gradient shape {:?} vs cached input {:?}",
            grad_out.shape(),
            cache.input.shape()
        )));
    }
    if cache.fingerprint != params.fingerprint() {
        return Err(Error::StaleCache(
            "parameters changed since the forward pass".into(),
        ));
    }
    let (c, h, w) = grad_out.dims3("attention_backward")?;
    let hw = h * w;
    let hidden_n = params.hidden();
    let g = grad_out.data();
    let x = cache.input.data();

    let mut grad_x: Vec<f64> = Vec::with_capacity(c * hw);
    for ch in 0..c {
        let a = cache.att[ch];
        grad_x.extend(g[ch * hw..(ch + 1) * hw].iter().map(|v| a * v));
    }

    let dlogit: Vec<f64> = (0..c)
        .map(|ch| {
            let datt = dot(&g[ch * hw..(ch + 1) * hw], &x[ch * hw..(ch + 1) * hw]);
            let a = cache.att[ch];
            datt * a * (1.0 - a)
        })
        .collect();

    let mut gw2 = vec![0.0; c * hidden_n];
    for ch in 0..c {
        for k in 0..hidden_n {
            gw2[ch * hidden_n + k] = dlogit[ch] * cache.hidden[k];
        }
    }
    let w2 = params.w2.data();
    let dpre: Vec<f64> = (0..hidden_n)
        .map(|k| {
            if cache.pre[k] > 0.0 {
                (0..c).map(|ch| w2[ch * hidden_n + k] * dlogit[ch]).sum()
            } else {
                0.0
            }
        })
        .collect();
    let mut gw1 = vec![0.0; hidden_n * c];
    for k in 0..hidden_n {
        for ch in 0..c {
            gw1[k * c + ch] = dpre[k] * cache.fc_in[ch];
        }
    }
    let w1 = params.w1.data();
    let dz: Vec<f64> = (0..c)
        .map(|ch| params.input_scale * (0..hidden_n).map(|k| w1[k * c + ch] * dpre[k]).sum::<f64>())
        .collect();

    let parts = params.compression.parts();
    let part_size = c / parts;
    let mut compression_grad = None;
    match &cache.pooling {
        Pooling::Mean => {
            if path == BackwardPath::Full {
                for ch in 0..c {
                    let d = dz[ch] / hw as f64;
                    for v in &mut grad_x[ch * hw..(ch + 1) * hw] {
                        *v += d;
                    }
                }
            }
        }
        Pooling::Planes { planes, mixture } => {
            if path == BackwardPath::Full {
                for ch in 0..c {
                    let p = ch / part_size;
                    let plane = &planes[p * hw..(p + 1) * hw];
                    for (v, &b) in grad_x[ch * hw..(ch + 1) * hw].iter_mut().zip(plane) {
                        *v += dz[ch] * b;
                    }
                }
            }
            let wants_plane_grad = match &params.compression {
                Compression::LearnableTensor { tensor } => tensor.trainable,
                Compression::NasMixture { .. } => true,
                _ => false,
            };
            if wants_plane_grad {
                let mut dplanes = vec![0.0; parts * hw];
                for ch in 0..c {
                    let p = ch / part_size;
                    for (d, &xv) in dplanes[p * hw..(p + 1) * hw]
                        .iter_mut()
                        .zip(&x[ch * hw..(ch + 1) * hw])
                    {
                        *d += dz[ch] * xv;
                    }
                }
                compression_grad = Some(match (&params.compression, mixture) {
                    (Compression::NasMixture { mixture: mix }, Some(weights)) => {
                        let bank = dct::cached_filter_bank(h, w, &mix.candidates())?;
                        let per = mix.state.grid().len();
                        let mut dalpha = Vec::with_capacity(parts * per);
                        for (p, wts) in weights.iter().enumerate() {
                            let dk = &dplanes[p * hw..(p + 1) * hw];
                            let dw: Vec<f64> = (0..per).map(|k| dot(dk, bank.plane(k))).collect();
                            let mean: f64 = wts.iter().zip(&dw).map(|(a, b)| a * b).sum();
                            dalpha.extend(
                                wts.iter()
                                    .zip(&dw)
                                    .map(|(wk, dwk)| wk * (dwk - mean) / mix.state.temperature),
                            );
                        }
                        Tensor::from_parts(mix.state.alpha.shape().to_vec(), dalpha)
                    }
                    _ => Tensor::from_parts(vec![parts, h, w], dplanes),
                });
            }
        }
    }

    let grads = AttentionGrads {
        w1: Tensor::from_parts(vec![hidden_n, c], gw1),
        b1: Tensor::from_parts(vec![hidden_n], dpre),
        w2: Tensor::from_parts(vec![c, hidden_n], gw2),
        b2: Tensor::from_parts(vec![c], dlogit),
        compression: compression_grad,
    };
    Ok((Tensor::from_parts(grad_out.shape().to_vec(), grad_x), grads))
}

/// NAS compression over every component of the map (`grid == map`).
pub fn full_grid_mixture(parts: usize, height: usize, width: usize) -> Result<NasMixture> {
    NasMixture::new(
        NasState::uniform(parts, FrequencyGrid::new(height, width)?)?,
        height,
        width,
    )
}
