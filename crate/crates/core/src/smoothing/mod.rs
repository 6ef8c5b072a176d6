//! Percentile smoothing of the trigger-set accuracy function and the
//! order-statistic machinery that turns Monte Carlo samples into
//! confidence-backed lower bounds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::ParamVector;
use crate::rng::{mix, perturb, stream_rng};

pub mod special;

pub use special::{binomial_cdf, binomial_sf, gaussian_cdf, gaussian_quantile, gaussian_sf};

#[derive(Debug, Error)]
pub enum SmoothingError {
    #[error("invalid smoothing config: {0}")]
    Config(String),
    #[error("argument out of domain: {0}")]
    Domain(String),
    #[error("trigger function failed on sample {index}: {source}")]
    Trigger {
        index: u64,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("trigger function returned {value} on sample {index}, expected a value in [0, 1]")]
    OutOfRange { index: u64, value: f64 },
    #[error("sample set has {got} values but the config asks for {expected}")]
    SampleCount { expected: u64, got: u64 },
}

/// Monte Carlo smoothing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingConfig {
    pub sigma: f64,
    pub n: u64,
    pub confidence: f64,
    pub root_seed: u64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            n: 10_000,
            confidence: 0.99,
            root_seed: 0,
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<(), SmoothingError> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(SmoothingError::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.n == 0 {
            return Err(SmoothingError::Config("n must be at least 1".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(SmoothingError::Config(format!(
                "confidence must lie in (0, 1), got {}",
                self.confidence
            )));
        }
        Ok(())
    }
}

/// Ascending accuracies of f(theta + G) with the seed that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySample {
    sorted: Vec<f64>,
    root_seed: u64,
    sigma: f64,
}

impl AccuracySample {
    /// Sorts `values` and checks they are accuracies.
    pub fn from_values(mut values: Vec<f64>, root_seed: u64, sigma: f64) -> Result<Self, SmoothingError> {
        if values.is_empty() {
            return Err(SmoothingError::SampleCount { expected: 1, got: 0 });
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(SmoothingError::OutOfRange { index: index as u64, value });
        }
        values.sort_by(f64::total_cmp);
        Ok(Self { sorted: values, root_seed, sigma })
    }

    pub fn sorted(&self) -> &[f64] {
        &self.sorted
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn max(&self) -> f64 {
        self.sorted[self.sorted.len() - 1]
    }
}

/// Evaluates `trigger_fn(theta + G_i)` for `i in 0..n`, each G_i drawn from
/// its own stream seeded by `mix(root_seed, i)`. The result does not depend
/// on the rayon pool size.
pub fn sample_accuracies<F, E>(
    trigger_fn: F,
    theta: &ParamVector,
    cfg: &SmoothingConfig,
) -> Result<AccuracySample, SmoothingError>
where
    F: Fn(&ParamVector) -> Result<f64, E> + Sync,
    E: std::error::Error + Send + Sync + 'static,
{
    cfg.validate()?;
    let values = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(mix(cfg.root_seed, i), 0);
            let noisy = perturb(theta, cfg.sigma, &mut rng);
            trigger_fn(&noisy).map_err(|e| SmoothingError::Trigger {
                index: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<f64>, _>>()?;
    AccuracySample::from_values(values, cfg.root_seed, cfg.sigma)
}

/// The median estimator: the element at 0-based index floor(n/2).
pub fn smoothed_trigger_accuracy(samples: &AccuracySample) -> f64 {
    samples.sorted[samples.sorted.len() / 2]
}

/// Phi(-epsilon / sigma), the percentile whose lower bound certifies the
/// median at distance epsilon.
pub fn p_lower(epsilon: f64, sigma: f64) -> f64 {
    gaussian_cdf(-epsilon / sigma)
}

/// Largest 1-based order statistic k with P[Bin(n, p_lower) >= k] >= c.
///
/// The survival function is non-increasing in k, so a binary search over
/// the whole range [0, n] finds the boundary. Returns `None` when even k = 1
/// fails the confidence requirement.
pub fn empirical_percentile_index(
    n: u64,
    confidence: f64,
    sigma: f64,
    epsilon: f64,
) -> Result<Option<u64>, SmoothingError> {
    if n == 0 {
        return Err(SmoothingError::Domain("n must be at least 1".into()));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(SmoothingError::Domain(format!("confidence {confidence} is outside (0, 1)")));
    }
    if !(sigma > 0.0) || !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(SmoothingError::Domain(format!(
            "need sigma > 0 and finite epsilon >= 0, got sigma={sigma}, epsilon={epsilon}"
        )));
    }
    let p = p_lower(epsilon, sigma);
    // Invariant: sf(lo) >= c (sf(0) = 1), sf(hi) < c or hi = n + 1.
    let (mut lo, mut hi) = (0u64, n + 1);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if binomial_sf(n, mid, p)? >= confidence {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo > 0).then_some(lo))
}

/// A certified lower bound on the median smoothed accuracy at some radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertifiedBound {
    pub bound: f64,
    pub index: u64,
    pub p_lower: f64,
}

/// The order statistic that lower-bounds h_50%(theta + delta) for every
/// ||delta|| < epsilon with probability at least `cfg.confidence`.
pub fn certified_lower_bound(
    samples: &AccuracySample,
    cfg: &SmoothingConfig,
    epsilon: f64,
) -> Result<Option<CertifiedBound>, SmoothingError> {
    cfg.validate()?;
    if samples.len() as u64 != cfg.n {
        return Err(SmoothingError::SampleCount {
            expected: cfg.n,
            got: samples.len() as u64,
        });
    }
    let index = empirical_percentile_index(cfg.n, cfg.confidence, cfg.sigma, epsilon)?;
    Ok(index.map(|k| CertifiedBound {
        bound: samples.sorted[(k - 1) as usize],
        index: k,
        p_lower: p_lower(epsilon, cfg.sigma),
    }))
}
