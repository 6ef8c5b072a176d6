//! Independent reference computations for the statistical and numerical
//! routines, written without calling the code under test.

use certmark::nn::engine::{loss_and_grad_with, loss_with, Targets};
use certmark::nn::{ModelSpec, ParamVector};
use num_bigint::BigUint;
use num_traits::ToPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Standard normal CDF by composite Simpson integration of the density
/// over [0, |x|] with `intervals` panels.
pub fn normal_cdf_simpson(x: f64, intervals: usize) -> f64 {
    let density = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let a = x.abs();
    let m = intervals + intervals % 2;
    let h = a / m as f64;
    let mut sum = density(0.0) + density(a);
    for i in 1..m {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * density(i as f64 * h);
    }
    let half_mass = sum * h / 3.0;
    if x >= 0.0 {
        0.5 + half_mass
    } else {
        0.5 - half_mass
    }
}

/// Natural log of a positive integer given exactly.
fn ln_big(v: &BigUint) -> f64 {
    let bits = v.bits();
    if bits <= 1000 {
        return v.to_f64().unwrap().ln();
    }
    let shift = bits - 64;
    (v >> shift).to_f64().unwrap().ln() + shift as f64 * std::f64::consts::LN_2
}

/// ln C(n, i) for i = 0..=n, from coefficients formed exactly in big
/// integers.
pub fn ln_binomial_row(n: u64) -> Vec<f64> {
    let mut coeff = BigUint::from(1u32);
    let mut row = Vec::with_capacity(n as usize + 1);
    for i in 0..=n {
        row.push(ln_big(&coeff));
        if i < n {
            coeff = coeff * (n - i) / (i + 1);
        }
    }
    row
}

/// P[X = i] for X ~ Binomial(n, p), where `ln_row = ln_binomial_row(n)`.
pub fn pmf_from_ln_row(ln_row: &[f64], p: f64) -> Vec<f64> {
    let n = ln_row.len() - 1;
    (0..=n)
        .map(|i| {
            if p == 0.0 {
                (i == 0) as u8 as f64
            } else if p == 1.0 {
                (i == n) as u8 as f64
            } else {
                (ln_row[i] + i as f64 * p.ln() + (n - i) as f64 * (-p).ln_1p()).exp()
            }
        })
        .collect()
}

/// Every probability P[X = i], i = 0..=n, of X ~ Binomial(n, p).
pub fn binomial_pmf_row(n: u64, p: f64) -> Vec<f64> {
    pmf_from_ln_row(&ln_binomial_row(n), p)
}

/// P[X <= k] for every k, summed from the lower end.
pub fn cdf_from_row(row: &[f64]) -> Vec<f64> {
    row.iter()
        .scan(0.0, |acc, &t| {
            *acc += t;
            Some(*acc)
        })
        .collect()
}

/// P[X >= k] for every k, summed from the upper end.
pub fn sf_from_row(row: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    let mut acc = 0.0;
    for i in (0..row.len()).rev() {
        acc += row[i];
        out[i] = acc;
    }
    out
}

/// Largest 1-based k with P[Binomial(n, p) >= k] >= c, found by checking
/// every k; `None` when no k qualifies.
pub fn brute_force_index(n: u64, c: f64, p: f64) -> Option<u64> {
    brute_force_index_from(&ln_binomial_row(n), c, p)
}

/// [`brute_force_index`] with a precomputed `ln_binomial_row(n)`.
pub fn brute_force_index_from(ln_row: &[f64], c: f64, p: f64) -> Option<u64> {
    let sf = sf_from_row(&pmf_from_ln_row(ln_row, p));
    (1..sf.len() as u64).rev().find(|&k| sf[k as usize] >= c)
}

/// Largest relative difference between the analytic gradient and central
/// differences, in f64, at a jittered initialization.
pub fn gradient_check(spec: &ModelSpec, seed: u64, batch: usize) -> f64 {
    let layout = spec.layout().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    let params: Vec<f64> = ParamVector::init(spec, seed)
        .unwrap()
        .as_slice()
        .iter()
        .map(|&v| v as f64 + rng.random_range(-0.05..0.05))
        .collect();
    let images: Vec<f64> = (0..batch * layout.input_len()).map(|_| rng.random::<f64>()).collect();
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..layout.classes)).collect();
    let (_, grad) = loss_and_grad_with(&layout, &params, &images, Targets::Hard(&labels));
    let step = 1e-5;
    let mut worst = 0f64;
    let mut probe = params.clone();
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let up = loss_with(&layout, &probe, &images, Targets::Hard(&labels));
        probe[i] = params[i] - step;
        let down = loss_with(&layout, &probe, &images, Targets::Hard(&labels));
        probe[i] = params[i];
        let numeric = (up - down) / (2.0 * step);
        let scale = grad[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((grad[i] - numeric).abs() / scale);
    }
    worst
}
