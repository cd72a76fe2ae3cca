//! Synthetic frequency-band classification data.
//!
//! Each class owns a set of DCT components. A sample of class `k` is a random
//! combination of that class's orthonormal basis images plus white noise, so
//! the label is recoverable from where the image's spectral energy sits.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dct::{self, Component};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub noise_sigma: f64,
    pub class_bands: Vec<Vec<Component>>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            num_classes: 4,
            samples_per_class: 200,
            noise_sigma: 3.0,
            class_bands: default_bands(),
            seed: 0,
        }
    }
}

/// Four classes on a 16x16 map, one component each: (0,1), (0,2), (0,3) and
/// (1,1). None of them touches (0,0), so a plain spatial mean carries no class
/// information; only the first class has `u + v < 2`.
pub fn default_bands() -> Vec<Vec<Component>> {
    let c = Component::new;
    vec![vec![c(0, 1)], vec![c(0, 2)], vec![c(0, 3)], vec![c(1, 1)]]
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("synthetic images need positive extents"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.class_bands.len() != self.num_classes {
            return Err(Error::invalid(format!(
                "{} classes but {} band sets",
                self.num_classes,
                self.class_bands.len()
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::invalid("samples_per_class must be positive"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::invalid(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        let mut seen: Vec<Component> = Vec::new();
        for (k, band) in self.class_bands.iter().enumerate() {
            if band.is_empty() {
                return Err(Error::invalid(format!("class {k} has an empty band")));
            }
            for &comp in band {
                comp.check_in(self.height, self.width)?;
                if seen.contains(&comp) {
                    return Err(Error::invalid(format!(
                        "class bands overlap: component {comp} appears more than once"
                    )));
                }
                seen.push(comp);
            }
        }
        if !self
            .class_bands
            .iter()
            .any(|band| band.iter().all(|c| c.u + c.v >= 2))
        {
            return Err(Error::invalid(
                "at least one class must use only components with u + v >= 2",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N x 1 x H x W`
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> (usize, usize) {
        let s = self.inputs.shape();
        (s[2], s[3])
    }

    /// Sample `i` as a `1 x H x W` tensor.
    pub fn sample(&self, i: usize) -> Tensor {
        self.inputs.slice_outer(i).expect("index in range")
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::invalid("empty subset"));
        }
        let parts = indices.iter().map(|&i| self.sample(i)).collect::<Vec<_>>();
        Ok(Dataset {
            inputs: Tensor::stack(&parts)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        })
    }

    /// Stratified split: within each class a seeded shuffle sends the first
    /// `ceil(val_fraction * count)` samples to validation.
    pub fn split_stratified(&self, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::invalid(format!(
                "val_fraction must be in [0, 1), got {val_fraction}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut val = Vec::new();
        for class in 0..self.num_classes {
            let mut idx: Vec<usize> = (0..self.len())
                .filter(|&i| self.labels[i] == class)
                .collect();
            idx.shuffle(&mut rng);
            let n_val = (val_fraction * idx.len() as f64).ceil() as usize;
            val.extend_from_slice(&idx[..n_val]);
            train.extend_from_slice(&idx[n_val..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        Ok((self.subset(&train)?, self.subset(&val)?))
    }

    /// Writes `inputs.fcat` (binary tensor) and `labels.csv` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.inputs
            .write_binary(std::io::BufWriter::new(fs::File::create(
                dir.join("inputs.fcat"),
            )?))?;
        let mut w = csv::Writer::from_path(dir.join("labels.csv"))?;
        w.write_record(["index", "label"])?;
        for (i, l) in self.labels.iter().enumerate() {
            w.write_record([i.to_string(), l.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Sample `i` has class `i % num_classes`. Band amplitudes have a random sign
/// and a magnitude drawn from `[0.5, 1.5] * sqrt(H*W)`, so each component
/// contributes a per-pixel RMS between 0.5 and 1.5.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let bases: Vec<Vec<Tensor>> = spec
        .class_bands
        .iter()
        .map(|band| {
            band.iter()
                .map(|c| dct::orthonormal_basis(h, w, c.u, c.v))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let norm = ((h * w) as f64).sqrt();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.num_classes * spec.samples_per_class;
    let mut data = Vec::with_capacity(total * h * w);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let class = i % spec.num_classes;
        let mut img = vec![0.0; h * w];
        for b in &bases[class] {
            let mag = rng.gen_range(0.5..1.5) * norm;
            let amp = if rng.gen_bool(0.5) { mag } else { -mag };
            for (p, &v) in img.iter_mut().zip(b.data()) {
                *p += amp * v;
            }
        }
        if spec.noise_sigma > 0.0 {
            for p in &mut img {
                *p += spec.noise_sigma * noise.sample(&mut rng);
            }
        }
        data.extend_from_slice(&img);
        labels.push(class);
    }
    Ok(Dataset {
        inputs: Tensor::new(vec![total, 1, h, w], data)?,
        labels,
        num_classes: spec.num_classes,
    })
}

/// Predicts the class whose band holds the most spectral energy.
pub fn band_energy_classify(image: &Tensor, bands: &[Vec<Component>]) -> Result<usize> {
    let plane = match image.shape() {
        [1, h, w] => image.reshape(&[*h, *w])?,
        [_, _] => image.clone(),
        other => {
            return Err(Error::invalid(format!(
                "expected a 1 x H x W or H x W image, got {other:?}"
            )))
        }
    };
    let (h, w) = plane.dims2("band_energy_classify")?;
    let spectrum = dct::dct2(&plane)?;
    let energy = |band: &Vec<Component>| -> f64 {
        band.iter()
            .map(|c| {
                let f = spectrum.data()[c.u * w + c.v];
                f * f * dct::orthonormal_weight(c.u, h) * dct::orthonormal_weight(c.v, w)
            })
            .sum()
    };
    Ok(bands
        .iter()
        .enumerate()
        .map(|(k, band)| (k, energy(band)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
        .expect("at least one band"))
}

pub fn band_energy_accuracy(data: &Dataset, bands: &[Vec<Component>]) -> Result<f64> {
    let mut correct = 0;
    for i in 0..data.len() {
        if band_energy_classify(&data.sample(i), bands)? == data.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Inverse of the sample construction for one image: orthonormal DCT
/// coefficients laid out on the `H x W` grid.
pub fn orthonormal_spectrum(image: &Tensor) -> Result<Tensor> {
    let (h, w) = match image.shape() {
        [1, h, w] => (*h, *w),
        [h, w] => (*h, *w),
        other => return Err(Error::invalid(format!("not an image shape: {other:?}"))),
    };
    let f = dct::dct2(&image.reshape(&[h, w])?)?;
    let data = f
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            v * (dct::orthonormal_weight(k / w, h) * dct::orthonormal_weight(k % w, w)).sqrt()
        })
        .collect();
    Tensor::new(vec![h, w], data)
}
