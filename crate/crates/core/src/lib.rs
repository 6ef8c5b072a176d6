//! Certifiable backdoor watermarks for small classifiers.
//!
//! A watermark is a trigger set whose accuracy the model owner can prove
//! survives any parameter perturbation of bounded l2 norm. The proof comes
//! from smoothing the trigger-set accuracy over Gaussian parameter noise and
//! reading a confidence-backed order statistic off Monte Carlo samples.

pub mod data;
pub mod nn;
pub mod rng;
pub mod smoothing;
pub mod embed;
mod train;
pub mod attacks;
pub mod certify;
