//! Reproducible randomness and estimator plumbing.
//!
//! Every randomized routine in the crate takes an explicit `u64` stream seed.
//! Stream seeds are derived from a root seed and a path of integer labels with
//! a counter-based mixer, so replicas can be created before parallel dispatch
//! without any shared RNG state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// The generator used for every simulation stream.
pub type StreamRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer. Bijective on `u64`.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a sequence of words into one `u64`. Position-sensitive.
#[inline]
pub fn hash_words(words: &[u64]) -> u64 {
    let mut h = mix64(0x5EED_BA4C_0000_0000 ^ words.len() as u64);
    for (k, &w) in words.iter().enumerate() {
        h = mix64(h ^ mix64(w.wrapping_add(GOLDEN.wrapping_mul(k as u64 + 1))));
    }
    h
}

/// Derives a stream seed from `root` and a label path.
pub fn derive_stream(root: u64, labels: &[u64]) -> u64 {
    let mut h = mix64(root ^ GOLDEN);
    for (depth, &label) in labels.iter().enumerate() {
        h = mix64(h ^ hash_words(&[depth as u64, label]));
    }
    h
}

/// A root seed plus a derivation path.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SeedTree {
    root: u64,
    path: Vec<u64>,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self {
            root,
            path: Vec::new(),
        }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    /// Subtree one level deeper.
    pub fn child(&self, label: u64) -> SeedTree {
        let mut path = self.path.clone();
        path.push(label);
        SeedTree {
            root: self.root,
            path,
        }
    }

    /// Seed of this node.
    pub fn seed(&self) -> u64 {
        derive_stream(self.root, &self.path)
    }

    pub fn rng(&self) -> StreamRng {
        rng_from_seed(self.seed())
    }
}

pub fn rng_from_seed(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Maps a hash to a uniform double in `[0, 1)`.
#[inline]
pub fn unit_f64(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Two-sided confidence level for normal-approximation intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Confidence {
    /// Multiple of the standard error.
    Sigma(f64),
    /// Two-sided coverage probability in `(0, 1)`.
    Coverage(f64),
}

impl Confidence {
    pub const THREE_SIGMA: Confidence = Confidence::Sigma(3.0);

    /// Normal quantile multiplier.
    pub fn z(self) -> f64 {
        match self {
            Confidence::Sigma(z) => z,
            Confidence::Coverage(p) => {
                let normal = Normal::new(0.0, 1.0).expect("standard normal");
                normal.inverse_cdf(0.5 + 0.5 * p)
            }
        }
    }
}

impl Default for Confidence {
    fn default() -> Self {
        Confidence::THREE_SIGMA
    }
}

/// Sample mean and halfwidth `z * s / sqrt(n)`, with `s` the unbiased
/// sample standard deviation.
pub fn mean_ci(samples: &[f64], level: Confidence) -> Result<(f64, f64)> {
    let mut acc = MeanAccumulator::default();
    for &x in samples {
        acc.push(x);
    }
    acc.ci(level)
}

/// Welford running mean/variance. Merging is order-dependent only through
/// floating-point rounding, so callers merge in replica order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MeanAccumulator {
    n: u64,
    mean: f64,
    m2: f64,
}

impl MeanAccumulator {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &MeanAccumulator) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        self.mean += delta * other.n as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * (self.n as f64) * (other.n as f64) / n as f64;
        self.n = n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero below two samples.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).max(0.0)
        }
    }

    pub fn std_error(&self) -> f64 {
        (self.variance() / self.n as f64).sqrt()
    }

    pub fn ci(&self, level: Confidence) -> Result<(f64, f64)> {
        if self.n < 2 {
            return Err(Error::TooFewSamples(self.n as usize));
        }
        Ok((self.mean, level.z() * self.std_error()))
    }
}

/// Batch-means estimate for the mean of a correlated series.
///
/// `batch_means` holds the per-batch averages of equally sized consecutive
/// batches. Returns the grand mean and its halfwidth.
pub fn batch_means_ci(batch_means: &[f64], level: Confidence) -> Result<(f64, f64)> {
    mean_ci(batch_means, level)
}

/// Normalized deviation `|estimate - target| / stderr`. Infinite when the
/// standard error vanishes and the values differ.
pub fn z_score(estimate: f64, target: f64, std_error: f64) -> f64 {
    let d = (estimate - target).abs();
    if d == 0.0 {
        0.0
    } else if std_error == 0.0 {
        f64::INFINITY
    } else {
        d / std_error
    }
}
