//! Unnormalized 2D DCT-II.
//!
//! The basis for component `(u, v)` on an `H x W` map is
//! `B[i, j] = cos(pi*u*(i + 1/2)/H) * cos(pi*v*(j + 1/2)/W)` with no scale
//! factors, so component `(0, 0)` is the all-ones plane and projecting onto it
//! yields `H*W` times the spatial mean.
//!
//! [`dct2`] runs as two small matrix products (one cosine matrix per axis).
//! [`dct2_naive`] evaluates the quadruple sum directly and is kept as the
//! reference the fast path is tested against.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::{Arc, OnceLock, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A 2D frequency index `(u, v)`: `u` runs along the height axis, `v` along
/// the width axis. Serialized as a `[u, v]` pair.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Component {
    pub u: usize,
    pub v: usize,
}

impl Component {
    pub const DC: Component = Component { u: 0, v: 0 };

    pub const fn new(u: usize, v: usize) -> Self {
        Self { u, v }
    }

    pub fn check_in(self, height: usize, width: usize) -> Result<Self> {
        if self.u < height && self.v < width {
            Ok(self)
        } else {
            Err(Error::ComponentOutOfRange {
                u: self.u,
                v: self.v,
                height,
                width,
            })
        }
    }
}

impl From<(usize, usize)> for Component {
    fn from((u, v): (usize, usize)) -> Self {
        Self { u, v }
    }
}

impl From<Component> for (usize, usize) {
    fn from(c: Component) -> Self {
        (c.u, c.v)
    }
}

impl fmt::Debug for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.u, self.v)
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.u, self.v)
    }
}

/// `cos(pi*k*(i + 1/2)/n)`, exactly 1.0 for `k == 0`.
#[inline]
pub fn cosine(k: usize, i: usize, n: usize) -> f64 {
    if k == 0 {
        1.0
    } else {
        (PI * k as f64 * (i as f64 + 0.5) / n as f64).cos()
    }
}

/// `n x n` matrix whose row `k` holds the 1D cosine for frequency `k`.
pub fn cosine_matrix(n: usize) -> Vec<f64> {
    let mut m = Vec::with_capacity(n * n);
    for k in 0..n {
        for i in 0..n {
            m.push(cosine(k, i, n));
        }
    }
    m
}

/// Squared DCT-II orthonormalization factor: `1/n` for `k == 0`, else `2/n`.
pub fn orthonormal_weight(k: usize, n: usize) -> f64 {
    if k == 0 {
        1.0 / n as f64
    } else {
        2.0 / n as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DctBasis {
    pub component: Component,
    pub height: usize,
    pub width: usize,
    pub values: Tensor,
}

pub fn basis(height: usize, width: usize, u: usize, v: usize) -> Result<DctBasis> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("DCT basis needs positive extents"));
    }
    let component = Component::new(u, v).check_in(height, width)?;
    let rows: Vec<f64> = (0..height).map(|i| cosine(u, i, height)).collect();
    let cols: Vec<f64> = (0..width).map(|j| cosine(v, j, width)).collect();
    let mut data = Vec::with_capacity(height * width);
    for &r in &rows {
        data.extend(cols.iter().map(|&c| r * c));
    }
    Ok(DctBasis {
        component,
        height,
        width,
        values: Tensor::from_parts(vec![height, width], data),
    })
}

/// Basis scaled so that the full set is orthonormal.
pub fn orthonormal_basis(height: usize, width: usize, u: usize, v: usize) -> Result<Tensor> {
    let scale = (orthonormal_weight(u, height) * orthonormal_weight(v, width)).sqrt();
    Ok(basis(height, width, u, v)?.values.scale(scale))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DctPath {
    #[default]
    Separable,
    Naive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    /// The bare double sum with no constants; not an inverse of [`dct2`].
    Unnormalized,
    /// DCT-III scaling that exactly inverts the unnormalized [`dct2`].
    Orthonormal,
}

pub fn dct2(x: &Tensor) -> Result<Tensor> {
    dct2_with(x, DctPath::Separable)
}

pub fn dct2_with(x: &Tensor, path: DctPath) -> Result<Tensor> {
    match path {
        DctPath::Separable => {
            let (h, w) = x.dims2("dct2")?;
            let out = separable(x.data(), h, w, &cosine_matrix(h), &cosine_matrix(w));
            Ok(Tensor::from_parts(vec![h, w], out))
        }
        DctPath::Naive => dct2_naive(x),
    }
}

/// Direct evaluation of `f[u,v] = sum_ij x[i,j] * B_uv[i,j]`, O(H^2 W^2).
pub fn dct2_naive(x: &Tensor) -> Result<Tensor> {
    let (h, w) = x.dims2("dct2_naive")?;
    let xs = x.data();
    let mut out = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..w {
                    let b = (PI * u as f64 * (i as f64 + 0.5) / h as f64).cos()
                        * (PI * v as f64 * (j as f64 + 0.5) / w as f64).cos();
                    acc += xs[i * w + j] * b;
                }
            }
            out[u * w + v] = acc;
        }
    }
    Ok(Tensor::from_parts(vec![h, w], out))
}

pub fn idct2(f: &Tensor, normalization: Normalization) -> Result<Tensor> {
    let (h, w) = f.dims2("idct2")?;
    let coeffs: Vec<f64> = match normalization {
        Normalization::Unnormalized => f.data().to_vec(),
        Normalization::Orthonormal => f
            .data()
            .iter()
            .enumerate()
            .map(|(k, &c)| c * orthonormal_weight(k / w, h) * orthonormal_weight(k % w, w))
            .collect(),
    };
    let out = separable(
        &coeffs,
        h,
        w,
        &transpose(&cosine_matrix(h), h),
        &transpose(&cosine_matrix(w), w),
    );
    Ok(Tensor::from_parts(vec![h, w], out))
}

fn transpose(m: &[f64], n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            t[c * n + r] = m[r * n + c];
        }
    }
    t
}

/// `rows * x * cols^T` for square `rows` (h x h) and `cols` (w x w).
fn separable(x: &[f64], h: usize, w: usize, rows: &[f64], cols: &[f64]) -> Vec<f64> {
    // x * cols^T
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        let xr = &x[i * w..(i + 1) * w];
        for v in 0..w {
            tmp[i * w + v] = crate::tensor::dot(xr, &cols[v * w..(v + 1) * w]);
        }
    }
    let mut out = vec![0.0; h * w];
    for u in 0..h {
        for i in 0..h {
            let a = rows[u * h + i];
            for v in 0..w {
                out[u * w + v] += a * tmp[i * w + v];
            }
        }
    }
    out
}

/// Single-component 2D DCT of every channel of a `C x H x W` tensor.
pub fn spectral_pool(x: &Tensor, u: usize, v: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3("spectral_pool")?;
    let b = basis(h, w, u, v)?;
    Ok(pool_with(x.data(), c, b.values.data()))
}

pub(crate) fn pool_with(x: &[f64], channels: usize, plane: &[f64]) -> Tensor {
    let n = plane.len();
    let data = (0..channels)
        .map(|ch| crate::tensor::dot(&x[ch * n..(ch + 1) * n], plane))
        .collect();
    Tensor::from_parts(vec![channels], data)
}

/// Precomputed basis planes for an ordered list of distinct components.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    height: usize,
    width: usize,
    components: Vec<Component>,
    stacked: Tensor,
}

impl FilterBank {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// `n x H x W` stack of basis planes in component order.
    pub fn stacked(&self) -> &Tensor {
        &self.stacked
    }

    pub fn plane(&self, k: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.stacked.data()[k * n..(k + 1) * n]
    }

    pub fn position(&self, c: Component) -> Option<usize> {
        self.components.iter().position(|&x| x == c)
    }
}

pub fn make_filter_bank(
    height: usize,
    width: usize,
    components: &[Component],
) -> Result<FilterBank> {
    if components.is_empty() {
        return Err(Error::invalid("filter bank needs at least one component"));
    }
    let mut planes = Vec::with_capacity(components.len());
    for (k, &c) in components.iter().enumerate() {
        if components[..k].contains(&c) {
            return Err(Error::DuplicateComponent { u: c.u, v: c.v });
        }
        planes.push(basis(height, width, c.u, c.v)?.values);
    }
    Ok(FilterBank {
        height,
        width,
        components: components.to_vec(),
        stacked: Tensor::stack(&planes)?,
    })
}

type BankKey = (usize, usize, Vec<Component>);

fn bank_cache() -> &'static RwLock<HashMap<BankKey, Arc<FilterBank>>> {
    static CACHE: OnceLock<RwLock<HashMap<BankKey, Arc<FilterBank>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Like [`make_filter_bank`], but shares one immutable bank per
/// `(H, W, components)` key across the process.
pub fn cached_filter_bank(
    height: usize,
    width: usize,
    components: &[Component],
) -> Result<Arc<FilterBank>> {
    let key = (height, width, components.to_vec());
    if let Some(bank) = bank_cache()
        .read()
        .expect("filter bank cache poisoned")
        .get(&key)
    {
        return Ok(Arc::clone(bank));
    }
    let bank = Arc::new(make_filter_bank(height, width, components)?);
    let mut cache = bank_cache().write().expect("filter bank cache poisoned");
    Ok(Arc::clone(cache.entry(key).or_insert(bank)))
}
