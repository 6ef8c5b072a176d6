//! Gaussian and binomial distribution functions in `f64`.
//!
//! The Gaussian tail uses a Taylor series near the origin and a continued
//! fraction beyond |z| = 2, so tail probabilities keep full relative
//! precision. Binomial probabilities use Loader's saddle-point form of the
//! pmf and sum terms by recurrence, always over the tail that does not
//! contain the mean.

use std::f64::consts::PI;

use super::SmoothingError;

const SERIES_LIMIT: f64 = 2.0;
const CF_DEPTH: usize = 100;

fn density(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Q(x) = 1 - Phi(x) for x >= 0.
fn upper_tail(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x < SERIES_LIMIT {
        // Phi(x) - 1/2 = phi(x) * sum_n x^(2n+1) / (2n+1)!!
        let mut sum = 0.0;
        let mut term = x;
        let mut n = 0.0;
        loop {
            let next = sum + term;
            if next == sum {
                break;
            }
            sum = next;
            n += 1.0;
            term *= x * x / (2.0 * n + 1.0);
        }
        0.5 - density(x) * sum
    } else {
        // Q(x) = phi(x) / (x + 1/(x + 2/(x + 3/(x + ...))))
        let mut f = x;
        for k in (1..=CF_DEPTH).rev() {
            f = x + k as f64 / f;
        }
        density(x) / f
    }
}

/// Standard normal CDF.
pub fn gaussian_cdf(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    if z < 0.0 {
        upper_tail(-z)
    } else {
        1.0 - upper_tail(z)
    }
}

/// Standard normal survival function, 1 - Phi(z).
pub fn gaussian_sf(z: f64) -> f64 {
    gaussian_cdf(-z)
}

/// Inverse of [`gaussian_cdf`] on (0, 1).
pub fn gaussian_quantile(p: f64) -> Result<f64, SmoothingError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(SmoothingError::Domain(format!(
            "quantile probability {p} is outside (0, 1)"
        )));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    // Solve Q(x) = min(p, 1-p) for x > 0 in the tail, then restore the sign.
    let tail = p.min(1.0 - p);
    let mut x = -acklam(tail);
    for _ in 0..4 {
        let err = upper_tail(x) - tail;
        let u = err / density(x);
        let step = u / (1.0 + 0.5 * x * u);
        x += step;
        if step.abs() <= 1e-15 * x.abs() {
            break;
        }
    }
    Ok(if p < 0.5 { -x } else { x })
}

/// Acklam's rational approximation to the normal quantile (p <= 0.5 here),
/// accurate to about 1e-9 before refinement.
fn acklam(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    if p < 0.02425 {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// ln(n!) - ((n + 1/2) ln n - n + ln sqrt(2 pi)), the Stirling remainder.
fn stirling_error(n: f64) -> f64 {
    const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
    if n <= 15.0 {
        let mut ln_fact = 0.0;
        let mut k = 2.0;
        while k <= n {
            ln_fact += f64::ln(k);
            k += 1.0;
        }
        return ln_fact - ((n + 0.5) * n.ln() - n + LN_SQRT_2PI);
    }
    const S0: f64 = 1.0 / 12.0;
    const S1: f64 = 1.0 / 360.0;
    const S2: f64 = 1.0 / 1260.0;
    const S3: f64 = 1.0 / 1680.0;
    const S4: f64 = 1.0 / 1188.0;
    let nn = n * n;
    if n > 500.0 {
        (S0 - S1 / nn) / n
    } else if n > 80.0 {
        (S0 - (S1 - S2 / nn) / nn) / n
    } else if n > 35.0 {
        (S0 - (S1 - (S2 - S3 / nn) / nn) / nn) / n
    } else {
        (S0 - (S1 - (S2 - (S3 - S4 / nn) / nn) / nn) / nn) / n
    }
}

/// Deviance term x ln(x / m) + m - x, evaluated without cancellation.
fn deviance(x: f64, m: f64) -> f64 {
    if (x - m).abs() < 0.1 * (x + m) {
        let mut v = (x - m) / (x + m);
        let mut s = (x - m) * v;
        let mut ej = 2.0 * x * v;
        v *= v;
        let mut j = 1.0;
        loop {
            ej *= v;
            let next = s + ej / (2.0 * j + 1.0);
            if next == s {
                return next;
            }
            s = next;
            j += 1.0;
        }
    }
    x * (x / m).ln() + m - x
}

/// P[Binomial(n, p) = k] for 0 < p < 1.
fn pmf(n: u64, k: u64, p: f64) -> f64 {
    let q = 1.0 - p;
    let nf = n as f64;
    if k == 0 {
        return (nf * (-p).ln_1p()).exp();
    }
    if k == n {
        return (nf * p.ln()).exp();
    }
    let kf = k as f64;
    let lc = stirling_error(nf)
        - stirling_error(kf)
        - stirling_error(nf - kf)
        - deviance(kf, nf * p)
        - deviance(nf - kf, nf * q);
    let lf = (2.0 * PI).ln() + kf.ln() + (-kf / nf).ln_1p();
    (lc - 0.5 * lf).exp()
}

/// sum_{i <= k} P[X = i], walking down from k. Intended for k at or below the mean.
fn lower_sum(n: u64, k: u64, p: f64) -> f64 {
    let ratio = (1.0 - p) / p;
    let mut term = pmf(n, k, p);
    let mut sum = term;
    let mut i = k;
    while i > 0 && term > sum * 1e-18 {
        term *= i as f64 * ratio / (n - i + 1) as f64;
        sum += term;
        i -= 1;
    }
    sum
}

/// sum_{i >= k} P[X = i], walking up from k. Intended for k above the mean.
fn upper_sum(n: u64, k: u64, p: f64) -> f64 {
    let ratio = p / (1.0 - p);
    let mut term = pmf(n, k, p);
    let mut sum = term;
    let mut i = k;
    while i < n && term > sum * 1e-18 {
        term *= (n - i) as f64 * ratio / (i + 1) as f64;
        sum += term;
        i += 1;
    }
    sum
}

fn check_args(n: u64, k: u64, p: f64) -> Result<(), SmoothingError> {
    if k > n {
        return Err(SmoothingError::Domain(format!(
            "binomial index {k} exceeds the trial count {n}"
        )));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(SmoothingError::Domain(format!(
            "binomial probability {p} is outside [0, 1]"
        )));
    }
    Ok(())
}

/// P[Binomial(n, p) <= k].
pub fn binomial_cdf(n: u64, k: u64, p: f64) -> Result<f64, SmoothingError> {
    check_args(n, k, p)?;
    if k == n || p == 0.0 {
        return Ok(1.0);
    }
    if p == 1.0 {
        return Ok(0.0);
    }
    let mean = n as f64 * p;
    Ok(if (k as f64) <= mean {
        lower_sum(n, k, p)
    } else {
        1.0 - upper_sum(n, k + 1, p)
    })
}

/// P[Binomial(n, p) >= k].
pub fn binomial_sf(n: u64, k: u64, p: f64) -> Result<f64, SmoothingError> {
    check_args(n, k, p)?;
    if k == 0 || p == 1.0 {
        return Ok(1.0);
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    let mean = n as f64 * p;
    Ok(if (k as f64) > mean {
        upper_sum(n, k, p)
    } else {
        1.0 - lower_sum(n, k - 1, p)
    })
}
