//! Projected gradient ascent on the loss over parameters, confined to an l2
//! ball around the starting point.

use serde::Serialize;

use super::{check_data, AttackConfig, AttackError, AttackKind};
use crate::data::Dataset;
use crate::nn::{accuracy_in, l2_distance, loss_and_grad_in, Layout, ModelSpec, ParamVector, Targets};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PgdOutcome {
    pub radius: f64,
    pub accuracy: f64,
    pub loss: f64,
    pub distance: f64,
    #[serde(skip)]
    pub params: ParamVector,
}

/// Pulls `theta` back into the ball of `radius` around `center`. The
/// rescaling is computed in `f64`; the `f32` result is re-measured and
/// shrunk again if rounding pushed it outside.
pub(crate) fn project(center: &[f32], theta: &mut [f32], radius: f64) {
    for _ in 0..4 {
        let norm = center
            .iter()
            .zip(theta.iter())
            .map(|(&c, &t)| (t as f64 - c as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        if norm <= radius {
            return;
        }
        let scale = radius / norm * (1.0 - 1e-9);
        for (t, &c) in theta.iter_mut().zip(center) {
            *t = (c as f64 + (*t as f64 - c as f64) * scale) as f32;
        }
    }
    theta.copy_from_slice(center);
}

fn evaluate(layout: &Layout, theta: &ParamVector, data: &Dataset) -> Result<(f64, f64, ParamVector), AttackError> {
    let (loss, grad) = loss_and_grad_in(layout, theta, data.images(), Targets::Hard(data.labels()))?;
    let acc = accuracy_in(layout, theta, data.images(), data.labels())?;
    Ok((acc, loss as f64, grad))
}

/// Normalized ascent steps of length `lr * radius` from `start`, each
/// followed by projection onto the ball around `center`. Returns the iterate
/// with the lowest accuracy, ties broken by the higher loss.
fn pgd_from(
    layout: &Layout,
    center: &ParamVector,
    start: &ParamVector,
    data: &Dataset,
    radius: f64,
    cfg: &AttackConfig,
) -> Result<PgdOutcome, AttackError> {
    let step = cfg.lr as f64 * radius;
    let mut theta = start.clone();
    let (mut acc, mut loss, mut grad) = evaluate(layout, &theta, data)?;
    let mut worst = (acc, loss, theta.clone());
    for _ in 0..cfg.pgd_steps {
        let gnorm = grad.norm();
        if gnorm == 0.0 {
            break;
        }
        let mut next = theta.clone().into_inner();
        for (t, &g) in next.iter_mut().zip(grad.as_slice()) {
            *t = (*t as f64 + step * g as f64 / gnorm) as f32;
        }
        project(center.as_slice(), &mut next, radius);
        theta = ParamVector::new(next)?;
        (acc, loss, grad) = evaluate(layout, &theta, data)?;
        if acc < worst.0 || (acc == worst.0 && loss > worst.1) {
            worst = (acc, loss, theta.clone());
        }
    }
    let (accuracy, loss, params) = worst;
    Ok(PgdOutcome {
        radius,
        accuracy,
        loss,
        distance: l2_distance(center, &params)?,
        params,
    })
}

/// Worst point found by PGD within `cfg.radius` of `params`, judged by
/// accuracy on `data` (pass a trigger set's dataset view to attack the
/// watermark directly).
pub fn pgd_parameter_attack(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    cfg: &AttackConfig,
) -> Result<PgdOutcome, AttackError> {
    cfg.validate()?;
    if cfg.kind != AttackKind::Pgd {
        return Err(AttackError::Config(format!("pgd_parameter_attack got kind {}", cfg.kind)));
    }
    let layout = spec.layout()?;
    params.check_len(layout.param_count)?;
    check_data(&layout, data)?;
    pgd_from(&layout, params, params, data, cfg.radius.unwrap_or_default(), cfg)
}

/// PGD over an ascending radius grid. Each radius starts from the worst
/// point of the previous one, which lies inside the larger ball too, so the
/// reported worst accuracy never increases with the radius.
pub fn pgd_radius_sweep(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    radii: &[f64],
    cfg: &AttackConfig,
) -> Result<Vec<PgdOutcome>, AttackError> {
    if radii.windows(2).any(|w| w[0] > w[1]) {
        return Err(AttackError::Config("pgd radii must be ascending".into()));
    }
    let layout = spec.layout()?;
    params.check_len(layout.param_count)?;
    check_data(&layout, data)?;
    let mut out: Vec<PgdOutcome> = Vec::with_capacity(radii.len());
    for &radius in radii {
        let cfg = AttackConfig { radius: Some(radius), ..cfg.clone() };
        cfg.validate()?;
        let start = out.last().map_or(params, |prev| &prev.params);
        let mut found = pgd_from(&layout, params, start, data, radius, &cfg)?;
        if let Some(prev) = out.last() {
            if prev.accuracy < found.accuracy || (prev.accuracy == found.accuracy && prev.loss > found.loss) {
                found = PgdOutcome { radius, ..prev.clone() };
            }
        }
        out.push(found);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_dataset;
    use crate::nn::Shape3;
    use proptest::prelude::*;

    fn setup() -> (ModelSpec, ParamVector, Dataset) {
        let dims = Shape3::new(6, 6, 1);
        let spec = ModelSpec::mlp(dims, &[8], 3).unwrap();
        (spec.clone(), ParamVector::init(&spec, 2).unwrap(), synthetic_dataset(1, 30, 3, dims).unwrap())
    }

    #[test]
    fn tiny_radius_leaves_accuracy_unchanged() {
        let (spec, params, data) = setup();
        let before = crate::nn::accuracy(&spec, &params, &data).unwrap();
        let out = pgd_parameter_attack(&spec, &params, &data, &AttackConfig::pgd(1e-9)).unwrap();
        assert_eq!(out.accuracy, before);
        assert!(out.distance <= 1e-9 + 1e-5);
    }

    #[test]
    fn attack_stays_in_the_ball_and_does_not_help() {
        let (spec, params, data) = setup();
        let before = crate::nn::accuracy(&spec, &params, &data).unwrap();
        let out = pgd_parameter_attack(&spec, &params, &data, &AttackConfig::pgd(0.5)).unwrap();
        assert!(out.distance <= 0.5 + 1e-5);
        assert!(out.accuracy <= before);
    }

    #[test]
    fn sweep_is_monotone_and_rejects_unsorted_radii() {
        let (spec, params, data) = setup();
        let radii = [0.1, 0.3, 0.6, 1.0];
        let out = pgd_radius_sweep(&spec, &params, &data, &radii, &AttackConfig::pgd(1.0)).unwrap();
        for (o, r) in out.iter().zip(radii) {
            assert!(o.distance <= r + 1e-5);
        }
        assert!(out.windows(2).all(|w| w[1].accuracy <= w[0].accuracy));
        assert!(pgd_radius_sweep(&spec, &params, &data, &[0.5, 0.1], &AttackConfig::pgd(1.0)).is_err());
    }

    proptest! {
        #[test]
        fn projection_lands_in_the_ball(
            center in prop::collection::vec(-3.0f32..3.0, 1..40),
            offset in prop::collection::vec(-50.0f32..50.0, 40),
            radius in 1e-6f64..10.0,
        ) {
            let mut theta: Vec<f32> = center.iter().zip(&offset).map(|(c, o)| c + o).collect();
            project(&center, &mut theta, radius);
            let d = center.iter().zip(&theta).map(|(&c, &t)| (t as f64 - c as f64).powi(2)).sum::<f64>().sqrt();
            prop_assert!(d <= radius + 1e-5);
        }
    }
}
