//! Seeded synthetic datasets and train/validation/test splits.
//!
//! All randomness comes from ChaCha20 seeded with `seed_from_u64`, one
//! stream per purpose, so every generator is a pure function of its
//! arguments on every platform.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Tensor};

pub const PRNG_NAME: &str = "chacha20";

/// Radius of the regular polygon holding the blob centres.
pub const BLOB_RADIUS: f64 = 4.5;

/// Spiral arms follow `r = SPIRAL_RADIAL_RATE * t` for `t` in `[0, SPIRAL_TURNS]`.
pub const SPIRAL_RADIAL_RATE: f64 = 3.2;
pub const SPIRAL_TURNS: f64 = 3.0 * PI;

/// Legal driving limit for the simulated blood alcohol concentration.
pub const BAC_THRESHOLD: f64 = 0.08;

const DATA_STREAM: u64 = 0;
const SPLIT_STREAM: u64 = 1;

fn rng_for(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Where a dataset came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub params: BTreeMap<String, f64>,
    pub seed: Option<u64>,
    pub prng: Option<String>,
}

impl Provenance {
    fn generated(generator: &str, params: &[(&str, f64)], seed: u64) -> Self {
        Provenance {
            generator: generator.to_string(),
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            seed: Some(seed),
            prng: Some(PRNG_NAME.to_string()),
        }
    }

    pub fn external(source: &str) -> Self {
        Provenance {
            generator: source.to_string(),
            params: BTreeMap::new(),
            seed: None,
            prng: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// `[n, d]`
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if features.rank() != 2 || features.rows() != labels.len() {
            return Err(Error::SizeMismatch {
                expected: labels.len(),
                got: features.rows(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidArgument(alloc::format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(LabeledDataset {
            features,
            labels,
            num_classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        LabeledDataset {
            features: Tensor::from_parts(vec![indices.len(), d], data),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            provenance: self.provenance.clone(),
        }
    }

    /// `[n, C]` indicator matrix of the labels.
    pub fn one_hot(&self) -> Tensor {
        let c = self.num_classes;
        let mut data = vec![0.0; self.len() * c];
        for (i, &y) in self.labels.iter().enumerate() {
            data[i * c + y] = 1.0;
        }
        Tensor::from_parts(vec![self.len(), c], data)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// `C` isotropic Gaussian blobs around the vertices of a regular polygon.
pub fn gen_blobs(n: usize, classes: usize, std: f64, seed: u64) -> Result<LabeledDataset> {
    if classes < 2 || n < classes {
        return Err(Error::InvalidArgument(alloc::format!(
            "blobs need n >= classes >= 2, got n = {n}, classes = {classes}"
        )));
    }
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::InvalidArgument(alloc::format!("blob std = {std}")));
    }
    let mut rng = rng_for(seed, DATA_STREAM);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for k in 0..classes {
        let count = n / classes + usize::from(k < n % classes);
        let angle = 2.0 * PI * k as f64 / classes as f64;
        let (cx, cy) = (
            BLOB_RADIUS * libm::cos(angle),
            BLOB_RADIUS * libm::sin(angle),
        );
        for _ in 0..count {
            let dx: f64 = rng.sample(StandardNormal);
            let dy: f64 = rng.sample(StandardNormal);
            data.push(cx + std * dx);
            data.push(cy + std * dy);
            labels.push(k);
        }
    }
    LabeledDataset::new(
        Tensor::matrix(n, 2, data)?,
        labels,
        classes,
        Provenance::generated(
            "blobs",
            &[
                ("n", n as f64),
                ("classes", classes as f64),
                ("std", std),
                ("radius", BLOB_RADIUS),
            ],
            seed,
        ),
    )
}

/// Centre of blob `k` out of `classes`.
pub fn blob_center(k: usize, classes: usize) -> [f64; 2] {
    let angle = 2.0 * PI * k as f64 / classes as f64;
    [
        BLOB_RADIUS * libm::cos(angle),
        BLOB_RADIUS * libm::sin(angle),
    ]
}

/// Two interleaved spiral arms, one per class, with Gaussian noise.
pub fn gen_spirals(n: usize, noise_std: f64, seed: u64) -> Result<LabeledDataset> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::InvalidArgument(alloc::format!(
            "spirals need an even n, got {n}"
        )));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::InvalidArgument(alloc::format!(
            "noise std = {noise_std}"
        )));
    }
    let mut rng = rng_for(seed, DATA_STREAM);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for k in 0..2 {
        for _ in 0..n / 2 {
            let t: f64 = rng.random_range(0.0..=SPIRAL_TURNS);
            let [x, y] = spiral_point(k, t);
            let dx: f64 = rng.sample(StandardNormal);
            let dy: f64 = rng.sample(StandardNormal);
            data.push(x + noise_std * dx);
            data.push(y + noise_std * dy);
            labels.push(k);
        }
    }
    LabeledDataset::new(
        Tensor::matrix(n, 2, data)?,
        labels,
        2,
        Provenance::generated(
            "spirals",
            &[
                ("n", n as f64),
                ("noise_std", noise_std),
                ("radial_rate", SPIRAL_RADIAL_RATE),
                ("turns", SPIRAL_TURNS),
            ],
            seed,
        ),
    )
}

/// Noise-free point of arm `class` at parameter `t`.
pub fn spiral_point(class: usize, t: f64) -> [f64; 2] {
    let r = SPIRAL_RADIAL_RATE * t;
    let phase = t + class as f64 * PI;
    [r * libm::cos(phase), r * libm::sin(phase)]
}

/// Simulated blood alcohol concentration (g/dL) by the Widmark formula.
///
/// `noise` multiplies the absorbed amount, so zero drinks always give zero.
pub fn widmark_bac(weight_kg: f64, drinks: f64, hours: f64, noise: f64) -> f64 {
    const GRAMS_PER_DRINK: f64 = 14.0;
    const DISTRIBUTION_RATIO: f64 = 0.6;
    const ELIMINATION_PER_HOUR: f64 = 0.015;
    let peak = GRAMS_PER_DRINK * drinks / (weight_kg * 1000.0 * DISTRIBUTION_RATIO) * 100.0;
    f64::max(0.0, peak * noise - ELIMINATION_PER_HOUR * hours)
}

/// Simulated stand-in for the blood alcohol concentration task.
///
/// Features are body weight (kg, uniform on [45, 120]), standard drinks
/// (uniform on [0, 12]) and hours since drinking (uniform on [0, 8]),
/// standardised to zero mean and unit variance. The label is
/// `BAC >= 0.08` where BAC follows [`widmark_bac`] with log-normal noise.
pub fn gen_bac_sim(n: usize, seed: u64) -> Result<LabeledDataset> {
    const NOISE_SIGMA: f64 = 0.05;
    if n < 2 {
        return Err(Error::InvalidArgument(alloc::format!(
            "bac-sim needs n >= 2, got {n}"
        )));
    }
    let mut rng = rng_for(seed, DATA_STREAM);
    let mut raw = Vec::with_capacity(3 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let weight: f64 = rng.random_range(45.0..=120.0);
        let drinks: f64 = rng.random_range(0.0..=12.0);
        let hours: f64 = rng.random_range(0.0..=8.0);
        let z: f64 = rng.sample(StandardNormal);
        let bac = widmark_bac(weight, drinks, hours, libm::exp(NOISE_SIGMA * z));
        raw.extend_from_slice(&[weight, drinks, hours]);
        labels.push(usize::from(bac >= BAC_THRESHOLD));
    }
    let raw = Tensor::matrix(n, 3, raw)?;
    let scaler = Standardizer::fit(&raw)?;
    LabeledDataset::new(
        scaler.apply(&raw)?,
        labels,
        2,
        Provenance::generated(
            "bac-sim",
            &[
                ("n", n as f64),
                ("threshold", BAC_THRESHOLD),
                ("noise_sigma", NOISE_SIGMA),
            ],
            seed,
        ),
    )
}

/// Per-column z-scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Population statistics of each column; constant columns get scale 1.
    pub fn fit(features: &Tensor) -> Result<Self> {
        let (n, d) = (features.rows(), features.cols());
        if features.rank() != 2 || n == 0 {
            return Err(Error::EmptyInput("standardizer"));
        }
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, &x) in mean.iter_mut().zip(features.row(r)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((v, &x), m) in var.iter_mut().zip(features.row(r)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let s = libm::sqrt(v / n as f64);
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, scale })
    }

    pub fn apply(&self, features: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if features.rank() != 2 || features.cols() != d {
            return Err(Error::SizeMismatch {
                expected: d,
                got: features.cols(),
            });
        }
        let data = features
            .data()
            .iter()
            .enumerate()
            .map(|(k, &x)| (x - self.mean[k % d]) / self.scale[k % d])
            .collect();
        Tensor::new(features.shape().to_vec(), data)
    }

    pub fn apply_dataset(&self, data: &LabeledDataset) -> Result<LabeledDataset> {
        Ok(LabeledDataset {
            features: self.apply(&data.features)?,
            ..data.clone()
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl SplitSpec {
    pub fn new(n_train: usize, n_val: usize, n_test: usize) -> Self {
        SplitSpec {
            n_train,
            n_val,
            n_test,
        }
    }

    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::new(700, 300, 1000)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
    /// Original row indices of each part.
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Seeded shuffle followed by a contiguous train/val/test partition.
pub fn split(data: &LabeledDataset, spec: SplitSpec, seed: u64) -> Result<Split> {
    if spec.n_train == 0 || spec.n_val == 0 || spec.n_test == 0 || spec.total() != data.len() {
        return Err(Error::InvalidArgument(alloc::format!(
            "split {}/{}/{} does not partition {} samples",
            spec.n_train,
            spec.n_val,
            spec.n_test,
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng_for(seed, SPLIT_STREAM));
    let (train_idx, rest) = order.split_at(spec.n_train);
    let (val_idx, test_idx) = rest.split_at(spec.n_val);
    Ok(Split {
        train: data.subset(train_idx),
        val: data.subset(val_idx),
        test: data.subset(test_idx),
        train_indices: train_idx.to_vec(),
        val_indices: val_idx.to_vec(),
        test_indices: test_idx.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_counts_and_determinism() {
        let d = gen_blobs(2000, 5, 1.3, 1).unwrap();
        assert_eq!(d.class_counts(), vec![400; 5]);
        assert_eq!(d, gen_blobs(2000, 5, 1.3, 1).unwrap());
        assert_ne!(d.features, gen_blobs(2000, 5, 1.3, 2).unwrap().features);
        assert_eq!(
            gen_blobs(7, 3, 1.0, 0).unwrap().class_counts(),
            vec![3, 2, 2]
        );
    }

    #[test]
    fn tiny_std_collapses_to_centres() {
        let d = gen_blobs(50, 5, 1e-9, 3).unwrap();
        for i in 0..d.len() {
            let c = blob_center(d.labels[i], 5);
            let row = d.features.row(i);
            assert!((row[0] - c[0]).abs() < 1e-6 && (row[1] - c[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn blob_arguments_checked() {
        assert!(gen_blobs(3, 5, 1.0, 0).is_err());
        assert!(gen_blobs(10, 5, 0.0, 0).is_err());
        assert!(gen_blobs(10, 1, 1.0, 0).is_err());
    }

    #[test]
    fn noiseless_spirals_lie_on_their_arm() {
        let d = gen_spirals(200, 0.0, 4).unwrap();
        assert_eq!(d.class_counts(), vec![100, 100]);
        for i in 0..d.len() {
            let [x, y] = [d.features.row(i)[0], d.features.row(i)[1]];
            let r = libm::sqrt(x * x + y * y);
            let t = r / SPIRAL_RADIAL_RATE;
            let [px, py] = spiral_point(d.labels[i], t);
            assert!((px - x).abs() < 1e-9 && (py - y).abs() < 1e-9, "row {i}");
        }
        assert!(gen_spirals(3, 1.0, 0).is_err());
    }

    #[test]
    fn zero_drinks_never_positive() {
        for w in [45.0, 80.0, 120.0] {
            for h in [0.0, 4.0] {
                assert_eq!(widmark_bac(w, 0.0, h, 1.3), 0.0);
            }
        }
    }

    #[test]
    fn bac_features_are_standardised() {
        let d = gen_bac_sim(500, 9).unwrap();
        assert_eq!(d.dim(), 3);
        let s = Standardizer::fit(&d.features).unwrap();
        for (m, sc) in s.mean.iter().zip(&s.scale) {
            assert!(m.abs() < 1e-12);
            assert!((sc - 1.0).abs() < 1e-12);
        }
        assert_eq!(d, gen_bac_sim(500, 9).unwrap());
    }

    #[test]
    fn split_partitions_indices() {
        let d = gen_blobs(2000, 5, 1.7, 0).unwrap();
        let s = split(&d, SplitSpec::default(), 11).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (700, 300, 1000));
        let mut all: Vec<usize> = s
            .train_indices
            .iter()
            .chain(&s.val_indices)
            .chain(&s.test_indices)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..2000).collect::<Vec<_>>());
        let other = split(&d, SplitSpec::default(), 12).unwrap();
        assert_ne!(s.train_indices, other.train_indices);
        assert!(split(&d, SplitSpec::new(700, 300, 999), 0).is_err());
        assert!(split(&d, SplitSpec::new(0, 1000, 1000), 0).is_err());
    }
}
