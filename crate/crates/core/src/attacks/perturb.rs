//! Weight pruning, shifting and quantization.

use rand_distr::{Distribution, Normal};

use super::{AttackError, AttackKind};
use crate::nn::{ModelSpec, ParamVector};
use crate::rng::stream_rng;

const SHIFT_STREAM: u64 = 0x5F1F7;

pub(crate) fn check_magnitude(kind: AttackKind, m: f64) -> Result<(), AttackError> {
    let ok = match kind {
        AttackKind::Prune => (0.0..1.0).contains(&m),
        AttackKind::Shift => m >= 0.0 && m.is_finite(),
        AttackKind::Quantize => m.fract() == 0.0 && (2.0..=32.0).contains(&m),
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(AttackError::Config(format!(
            "invalid {kind} magnitude {m} (prune: fraction in [0, 1); shift: std >= 0; quantize: bits in 2..=32)"
        )))
    }
}

/// Zeroes the `fraction` of entries with the smallest magnitude, globally.
fn prune(values: &mut [f32], fraction: f64) {
    let count = (fraction * values.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)));
    for &i in &order[..count] {
        values[i] = 0.0;
    }
}

/// Rounds each entry to the nearest of `2^bits` evenly spaced levels
/// spanning the slice's own [min, max].
fn quantize(values: &mut [f32], bits: u32) {
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
    if !(max > min) {
        return;
    }
    let step = (max - min) / ((1u64 << bits) - 1) as f64;
    for v in values.iter_mut() {
        let level = ((*v as f64 - min) / step).round();
        *v = (min + level * step).clamp(min, max) as f32;
    }
}

/// One of the simple removal attacks. `magnitude` is the pruned fraction,
/// the shift standard deviation or the quantization bit count. Quantization
/// works per weight and bias tensor of `spec`.
pub fn perturbation_attack(
    spec: &ModelSpec,
    params: &ParamVector,
    kind: AttackKind,
    magnitude: f64,
    seed: u64,
) -> Result<ParamVector, AttackError> {
    check_magnitude(kind, magnitude)?;
    let layout = spec.layout()?;
    params.check_len(layout.param_count)?;
    let mut values = params.clone().into_inner();
    match kind {
        AttackKind::Prune => prune(&mut values, magnitude),
        AttackKind::Shift => {
            let noise = Normal::new(0.0f64, magnitude).expect("std checked above");
            let mut rng = stream_rng(seed, SHIFT_STREAM);
            for v in values.iter_mut() {
                *v = (*v as f64 + noise.sample(&mut rng)) as f32;
            }
        }
        AttackKind::Quantize => {
            for l in layout.tensors() {
                quantize(&mut values[l.weight_offset..l.weight_offset + l.weight_len], magnitude as u32);
                quantize(&mut values[l.bias_offset..l.bias_offset + l.bias_len], magnitude as u32);
            }
        }
        _ => unreachable!("check_magnitude admits only perturbation kinds"),
    }
    Ok(ParamVector::new(values)?)
}
