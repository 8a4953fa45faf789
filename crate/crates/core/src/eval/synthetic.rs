use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Records already mapped to latent space, split into training and stream.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDataset {
    pub train_x: Vec<DVector<f64>>,
    pub train_labels: Vec<String>,
    pub test_ids: Vec<String>,
    pub test_x: Vec<DVector<f64>>,
    pub test_labels: Vec<String>,
}

impl LatentDataset {
    pub fn dim(&self) -> usize {
        self.train_x.first().or(self.test_x.first()).map_or(0, |x| x.len())
    }

    /// Distinct training labels, sorted.
    pub fn known_labels(&self) -> Vec<String> {
        let mut v = self.train_labels.clone();
        v.sort();
        v.dedup();
        v
    }
}

/// Gaussian classes with power-law sizes. Known classes appear in training
/// and stream; emerging classes only in the stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub known: usize,
    pub emerging: usize,
    pub n_train: usize,
    pub n_stream: usize,
    /// Distance between any two class means, in units of `sigma`.
    pub separation: f64,
    pub sigma: f64,
    /// Class `k` (0-based) has size ∝ `(k + 1)^-exponent`.
    pub exponent: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            dim: 5,
            known: 3,
            emerging: 2,
            n_train: 50,
            n_stream: 50,
            separation: 10.0,
            sigma: 1.0,
            exponent: 1.0,
        }
    }
}

/// Splits `total` over `weights` by largest remainder, at least one each.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let k = weights.len();
    let spare = total - k;
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * spare as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        (quotas[b] - quotas[b].floor())
            .total_cmp(&(quotas[a] - quotas[a].floor()))
            .then(a.cmp(&b))
    });
    let short = spare - sizes.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        sizes[i] += 1;
    }
    sizes.iter().map(|s| s + 1).collect()
}

impl SyntheticConfig {
    pub fn classes(&self) -> usize {
        self.known + self.emerging
    }

    pub fn label(k: usize) -> String {
        format!("P{}", k + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.classes();
        if self.known == 0 {
            return Err(Error::invalid("at least one known class is required"));
        }
        if self.dim < k {
            return Err(Error::invalid(format!(
                "dimension {} cannot hold {k} mutually equidistant class means",
                self.dim
            )));
        }
        if self.n_train < self.known || self.n_stream < k {
            return Err(Error::invalid("too few records for the number of classes"));
        }
        if !(self.sigma > 0.0) || !(self.separation >= 0.0) || !self.exponent.is_finite() {
            return Err(Error::invalid("sigma must be positive, separation non-negative"));
        }
        Ok(())
    }

    /// Class means on orthogonal axes, pairwise `separation · sigma` apart.
    pub fn means(&self) -> Vec<DVector<f64>> {
        let r = self.separation * self.sigma / 2f64.sqrt();
        (0..self.classes())
            .map(|k| {
                let mut m = DVector::zeros(self.dim);
                m[k] = r;
                m
            })
            .collect()
    }

    fn weights(&self, n: usize) -> Vec<f64> {
        (0..n).map(|k| ((k + 1) as f64).powf(-self.exponent)).collect()
    }

    /// Training sizes per known class, then stream sizes per class.
    pub fn sizes(&self) -> (Vec<usize>, Vec<usize>) {
        (
            apportion(self.n_train, &self.weights(self.known)),
            apportion(self.n_stream, &self.weights(self.classes())),
        )
    }

    /// Draws a dataset from the streams `(seed, Synthetic, ·, ·)`.
    pub fn generate(&self, seed: u64) -> Result<LatentDataset> {
        self.validate()?;
        let means = self.means();
        let (train_sizes, stream_sizes) = self.sizes();
        let mut r = rng::stream(seed, Purpose::Synthetic, 0, 0);
        let mut draw = |k: usize| -> DVector<f64> {
            let noise = DVector::from_fn(self.dim, |_, _| StandardNormal.sample(&mut r));
            &means[k] + noise * self.sigma
        };
        let mut train = Vec::with_capacity(self.n_train);
        for (k, &n) in train_sizes.iter().enumerate() {
            train.extend((0..n).map(|_| (draw(k), Self::label(k))));
        }
        let mut stream = Vec::with_capacity(self.n_stream);
        for (k, &n) in stream_sizes.iter().enumerate() {
            stream.extend((0..n).map(|_| (draw(k), Self::label(k))));
        }
        let mut shuffle = rng::stream(seed, Purpose::Synthetic, 1, 0);
        stream.shuffle(&mut shuffle);
        let (train_x, train_labels) = train.into_iter().unzip();
        let (test_x, test_labels): (Vec<_>, Vec<_>) = stream.into_iter().unzip();
        Ok(LatentDataset {
            train_x,
            train_labels,
            test_ids: (0..test_x.len()).map(|i| format!("s{i}")).collect(),
            test_x,
            test_labels,
        })
    }
}
