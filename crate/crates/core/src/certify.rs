//! Certificates over a radius grid, their empirical cross-check against
//! attacked models, and the noise-level trade-off sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use time::format_description::well_known::Rfc3339;
use time::OffsetDateTime;

use crate::data::{Dataset, TriggerScheme, TriggerSet};
use crate::embed::{embed_watermark, EmbedConfig, EmbedError};
use crate::nn::{accuracy_in, model_digest, Layout, ModelSpec, NnError, ParamVector};
use crate::rng::mix;
use crate::smoothing::{
    certified_lower_bound, p_lower, sample_accuracies, smoothed_trigger_accuracy, AccuracySample,
    SmoothingConfig, SmoothingError,
};

pub const REPORT_SCHEMA: &str = "certmark-report/1";

const VERIFY_TAG: u64 = 0x7E71F;

#[derive(Debug, Error)]
pub enum CertifyError {
    #[error("invalid radius grid: {0}")]
    Radii(String),
    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),
    #[error("report: {0}")]
    Report(String),
    #[error(transparent)]
    Smoothing(#[from] SmoothingError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// One radius of a certificate. `order_index` and `certified_accuracy` are
/// absent when the confidence requirement cannot be met at this radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateEntry {
    pub radius: f64,
    pub radius_over_sigma: f64,
    pub p_lower: f64,
    pub order_index: Option<u64>,
    pub certified_accuracy: Option<f64>,
}

/// Certified trigger-set accuracy lower bounds over a radius grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateReport {
    pub schema: String,
    pub model_digest: String,
    pub smoothing: SmoothingConfig,
    pub trigger_scheme: TriggerScheme,
    pub trigger_count: usize,
    pub median_smoothed_accuracy: f64,
    pub max_sampled_accuracy: f64,
    pub entries: Vec<CertificateEntry>,
    pub generated_at: String,
}

impl CertificateReport {
    /// Pretty JSON with fields in declaration order and a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report fields are serializable");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, CertifyError> {
        let report: Self = serde_json::from_str(text).map_err(|e| CertifyError::Report(e.to_string()))?;
        report.validate()?;
        Ok(report)
    }

    /// Checks the stored invariants: ascending radii, non-increasing bounds,
    /// p_lower matching the radius, bounds within the sampled range.
    pub fn validate(&self) -> Result<(), CertifyError> {
        let fail = |m: String| Err(CertifyError::Report(m));
        if self.schema != REPORT_SCHEMA {
            return fail(format!("schema '{}' is not {REPORT_SCHEMA}", self.schema));
        }
        self.smoothing.validate()?;
        if self.entries.windows(2).any(|w| w[0].radius > w[1].radius) {
            return fail("entries are not sorted by radius".into());
        }
        let mut last = f64::INFINITY;
        for e in &self.entries {
            let expected = p_lower(e.radius, self.smoothing.sigma);
            if (e.p_lower - expected).abs() > 1e-10 {
                return fail(format!("p_lower {} at radius {} should be {expected}", e.p_lower, e.radius));
            }
            if let Some(a) = e.certified_accuracy {
                if a > last {
                    return fail(format!("certified accuracy rises at radius {}", e.radius));
                }
                if a > self.max_sampled_accuracy {
                    return fail(format!("certified accuracy {a} exceeds every sample"));
                }
                last = a;
            }
        }
        Ok(())
    }

    /// Entries with a certificate whose radius strictly exceeds `distance`.
    pub fn covering(&self, distance: f64) -> impl Iterator<Item = &CertificateEntry> {
        self.entries
            .iter()
            .filter(move |e| distance < e.radius && e.certified_accuracy.is_some())
    }
}

/// RFC 3339 time taken from `SOURCE_DATE_EPOCH` (the Unix epoch when
/// unset), so identical inputs give byte-identical reports.
pub fn report_timestamp() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse::<i64>().ok())
        .unwrap_or(0);
    OffsetDateTime::from_unix_timestamp(secs)
        .unwrap_or(OffsetDateTime::UNIX_EPOCH)
        .format(&Rfc3339)
        .expect("RFC 3339 formatting of a valid timestamp")
}

fn check_radii(radii: &[f64]) -> Result<(), CertifyError> {
    if radii.is_empty() {
        return Err(CertifyError::Radii("no radii given".into()));
    }
    if radii.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(CertifyError::Radii("radii must be finite and non-negative".into()));
    }
    if radii.windows(2).any(|w| w[0] > w[1]) {
        return Err(CertifyError::Radii("radii must be ascending".into()));
    }
    Ok(())
}

fn check_triggers(layout: &Layout, triggers: &TriggerSet) -> Result<(), CertifyError> {
    if triggers.shape() != layout.input || triggers.classes() > layout.classes {
        return Err(CertifyError::Inconsistent(format!(
            "trigger images are {} over {} classes, model takes {} over {}",
            triggers.shape(),
            triggers.classes(),
            layout.input,
            layout.classes
        )));
    }
    Ok(())
}

/// Monte Carlo trigger accuracies of `params` under `cfg`.
pub fn sample_trigger_accuracies(
    layout: &Layout,
    params: &ParamVector,
    triggers: &TriggerSet,
    cfg: &SmoothingConfig,
) -> Result<AccuracySample, SmoothingError> {
    let f = |p: &ParamVector| accuracy_in(layout, p, triggers.images(), triggers.target_labels());
    sample_accuracies(f, params, cfg)
}

/// Certifies every radius from one shared sample of n noisy evaluations.
pub fn certify_grid(
    spec: &ModelSpec,
    params: &ParamVector,
    triggers: &TriggerSet,
    cfg: &SmoothingConfig,
    radii: &[f64],
) -> Result<CertificateReport, CertifyError> {
    check_radii(radii)?;
    cfg.validate()?;
    let layout = spec.layout()?;
    params.check_len(layout.param_count)?;
    check_triggers(&layout, triggers)?;
    let samples = sample_trigger_accuracies(&layout, params, triggers, cfg)?;
    let entries = radii
        .iter()
        .map(|&radius| {
            let bound = certified_lower_bound(&samples, cfg, radius)?;
            Ok(CertificateEntry {
                radius,
                radius_over_sigma: radius / cfg.sigma,
                p_lower: p_lower(radius, cfg.sigma),
                order_index: bound.map(|b| b.index),
                certified_accuracy: bound.map(|b| b.bound),
            })
        })
        .collect::<Result<Vec<_>, SmoothingError>>()?;
    Ok(CertificateReport {
        schema: REPORT_SCHEMA.to_string(),
        model_digest: model_digest(spec, params)?,
        smoothing: *cfg,
        trigger_scheme: triggers.scheme(),
        trigger_count: triggers.len(),
        median_smoothed_accuracy: smoothed_trigger_accuracy(&samples),
        max_sampled_accuracy: samples.max(),
        entries,
        generated_at: report_timestamp(),
    })
}

/// An attacked model and its l2 distance from the certified model.
#[derive(Clone, Debug)]
pub struct TaggedParams {
    pub label: String,
    pub params: ParamVector,
    pub distance: f64,
}

/// A certified bound that an attacked model's re-estimated median fell
/// below, even after the finite-sample allowance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub label: String,
    pub distance: f64,
    pub radius: f64,
    pub certified_accuracy: f64,
    pub median_estimate: f64,
    pub allowance_estimate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CaseStatus {
    Checked {
        median_estimate: f64,
        allowance_estimate: f64,
        radii_checked: usize,
    },
    /// The distance is at or beyond every certified radius.
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub label: String,
    pub distance: f64,
    #[serde(flatten)]
    pub status: CaseStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub cases: Vec<CaseResult>,
    pub violations: Vec<Violation>,
}

/// Rank of the order statistic three standard errors above the median
/// estimator: the median's rank has standard deviation sqrt(n)/2.
pub fn allowance_rank(n: u64) -> usize {
    let shift = (1.5 * (n as f64).sqrt()).ceil() as u64;
    (n / 2 + shift).min(n - 1) as usize
}

/// Re-estimates the median smoothed trigger accuracy of every attacked
/// model that lies strictly inside some certified radius, with fresh
/// seeds, and flags each covering entry whose bound exceeds the estimate
/// after the allowance.
pub fn verify_certificate(
    spec: &ModelSpec,
    report: &CertificateReport,
    attacked: &[TaggedParams],
    triggers: &TriggerSet,
    cfg: &SmoothingConfig,
) -> Result<Verification, CertifyError> {
    report.validate()?;
    cfg.validate()?;
    if cfg.sigma != report.smoothing.sigma {
        return Err(CertifyError::Inconsistent(format!(
            "verification sigma {} differs from the certified sigma {}",
            cfg.sigma, report.smoothing.sigma
        )));
    }
    if triggers.len() != report.trigger_count || triggers.scheme() != report.trigger_scheme {
        return Err(CertifyError::Inconsistent("trigger set does not match the report".into()));
    }
    let layout = spec.layout()?;
    check_triggers(&layout, triggers)?;
    let mut cases = Vec::with_capacity(attacked.len());
    let mut violations = Vec::new();
    for (i, case) in attacked.iter().enumerate() {
        case.params.check_len(layout.param_count)?;
        let covering: Vec<&CertificateEntry> = report.covering(case.distance).collect();
        if covering.is_empty() {
            cases.push(CaseResult {
                label: case.label.clone(),
                distance: case.distance,
                status: CaseStatus::Skipped,
            });
            continue;
        }
        let fresh = SmoothingConfig {
            root_seed: mix(cfg.root_seed ^ VERIFY_TAG, i as u64),
            ..*cfg
        };
        let samples = sample_trigger_accuracies(&layout, &case.params, triggers, &fresh)?;
        let median_estimate = smoothed_trigger_accuracy(&samples);
        let allowance_estimate = samples.sorted()[allowance_rank(fresh.n)];
        for e in &covering {
            let certified = e.certified_accuracy.expect("covering entries are certified");
            if allowance_estimate < certified {
                violations.push(Violation {
                    label: case.label.clone(),
                    distance: case.distance,
                    radius: e.radius,
                    certified_accuracy: certified,
                    median_estimate,
                    allowance_estimate,
                });
            }
        }
        cases.push(CaseResult {
            label: case.label.clone(),
            distance: case.distance,
            status: CaseStatus::Checked {
                median_estimate,
                allowance_estimate,
                radii_checked: covering.len(),
            },
        });
    }
    Ok(Verification { cases, violations })
}

/// Settings shared by every point of a noise sweep. The embedding runs with
/// `max_noise = sigma` and certification with smoothing at the same sigma.
#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub embed: EmbedConfig,
    pub smoothing: SmoothingConfig,
    pub radii: Vec<f64>,
    pub init_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub sigma: f64,
    pub test_acc: Option<f64>,
    pub trigger_acc: Option<f64>,
    pub report: Option<CertificateReport>,
    /// Set when embedding or certification failed at this sigma.
    pub error: Option<String>,
}

impl TradeoffRow {
    /// Certified accuracy at `radius`, counting an uncertified radius as 0.
    pub fn certified_at(&self, radius: f64) -> Option<f64> {
        let report = self.report.as_ref()?;
        let entry = report.entries.iter().find(|e| e.radius == radius)?;
        Some(entry.certified_accuracy.unwrap_or(0.0))
    }
}

/// Runs embed and certify once per sigma, each from the same
/// initialization. A failure at one sigma is recorded in its row.
pub fn sweep_noise_tradeoff(
    spec: &ModelSpec,
    train: &Dataset,
    test: Option<&Dataset>,
    triggers: &TriggerSet,
    sigmas: &[f64],
    shared: &SweepConfig,
) -> Result<Vec<TradeoffRow>, CertifyError> {
    if sigmas.is_empty() || sigmas.iter().any(|s| !(*s > 0.0)) || sigmas.windows(2).any(|w| w[0] > w[1]) {
        return Err(CertifyError::Inconsistent("sigmas must be positive and ascending".into()));
    }
    check_radii(&shared.radii)?;
    let layout = spec.layout()?;
    let init = ParamVector::init(spec, shared.init_seed)?;
    let run = |sigma: f64| -> Result<TradeoffRow, CertifyError> {
        let embed = EmbedConfig { max_noise: sigma, ..shared.embed.clone() };
        let mut opt = embed.optimizer().build(init.len());
        let out = embed_watermark(spec, &init, train, test, triggers, &embed, &mut opt)?;
        let smoothing = SmoothingConfig { sigma, ..shared.smoothing };
        let report = certify_grid(spec, &out.params, triggers, &smoothing, &shared.radii)?;
        Ok(TradeoffRow {
            sigma,
            test_acc: test
                .map(|t| accuracy_in(&layout, &out.params, t.images(), t.labels()))
                .transpose()?,
            trigger_acc: Some(accuracy_in(&layout, &out.params, triggers.images(), triggers.target_labels())?),
            report: Some(report),
            error: None,
        })
    };
    Ok(sigmas
        .par_iter()
        .map(|&sigma| {
            run(sigma).unwrap_or_else(|e| TradeoffRow {
                sigma,
                test_acc: None,
                trigger_acc: None,
                report: None,
                error: Some(e.to_string()),
            })
        })
        .collect())
}

/// The largest radius that appears in every successful row's grid.
pub fn largest_common_radius(rows: &[TradeoffRow]) -> Option<f64> {
    let reports: Vec<&CertificateReport> = rows.iter().filter_map(|r| r.report.as_ref()).collect();
    let first = reports.first()?;
    first
        .entries
        .iter()
        .map(|e| e.radius)
        .filter(|r| reports.iter().all(|rep| rep.entries.iter().any(|e| e.radius == *r)))
        .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_trigger_set, synthetic_dataset, PatchSpec, TriggerSource};
    use crate::nn::Shape3;

    fn setup() -> (ModelSpec, ParamVector, TriggerSet) {
        let dims = Shape3::new(8, 8, 1);
        let spec = ModelSpec::mlp(dims, &[6], 3).unwrap();
        let base = synthetic_dataset(3, 30, 3, dims).unwrap();
        let source = TriggerSource::EmbeddedContent { base: &base, patch: PatchSpec::default() };
        let triggers = make_trigger_set(source, 1, 12, 2).unwrap();
        (spec.clone(), ParamVector::init(&spec, 3).unwrap(), triggers)
    }

    fn smoothing() -> SmoothingConfig {
        SmoothingConfig { sigma: 0.05, n: 200, confidence: 0.99, root_seed: 4 }
    }

    #[test]
    fn grid_is_monotone_consistent_and_reproducible() {
        let (spec, params, triggers) = setup();
        let radii = [0.0, 0.02, 0.05, 0.1, 0.2];
        let a = certify_grid(&spec, &params, &triggers, &smoothing(), &radii).unwrap();
        let b = certify_grid(&spec, &params, &triggers, &smoothing(), &radii).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        a.validate().unwrap();
        assert_eq!(CertificateReport::from_json(&a.to_json()).unwrap(), a);
        assert_eq!(a.entries[0].p_lower, 0.5);
        assert!(a.entries[0].order_index.unwrap() < 100);
        assert_eq!(a.schema, REPORT_SCHEMA);
    }

    #[test]
    fn radius_grid_must_be_ascending() {
        let (spec, params, triggers) = setup();
        assert!(certify_grid(&spec, &params, &triggers, &smoothing(), &[0.2, 0.1]).is_err());
        assert!(certify_grid(&spec, &params, &triggers, &smoothing(), &[]).is_err());
        assert!(certify_grid(&spec, &params, &triggers, &smoothing(), &[-0.1]).is_err());
    }

    #[test]
    fn tampered_reports_are_rejected() {
        let (spec, params, triggers) = setup();
        let report = certify_grid(&spec, &params, &triggers, &smoothing(), &[0.0, 0.1]).unwrap();
        let mut bad = report.clone();
        bad.entries[1].p_lower += 1e-6;
        assert!(bad.validate().is_err());
        let mut bad = report.clone();
        bad.schema = "certmark-report/0".into();
        assert!(bad.validate().is_err());
        let mut bad = report;
        bad.entries.reverse();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn unattacked_model_has_no_violations_and_far_models_are_skipped() {
        let (spec, params, triggers) = setup();
        let report = certify_grid(&spec, &params, &triggers, &smoothing(), &[0.0, 0.05, 0.1]).unwrap();
        let cases = [
            TaggedParams { label: "same".into(), params: params.clone(), distance: 0.0 },
            TaggedParams { label: "far".into(), params: params.clone(), distance: 0.15 },
        ];
        let fresh = SmoothingConfig { root_seed: 99, ..smoothing() };
        let v = verify_certificate(&spec, &report, &cases, &triggers, &fresh).unwrap();
        assert!(v.violations.is_empty());
        let covering = report.covering(0.0).count();
        assert!(covering >= 1);
        assert!(matches!(v.cases[0].status, CaseStatus::Checked { radii_checked, .. } if radii_checked == covering));
        assert_eq!(v.cases[1].status, CaseStatus::Skipped);
    }

    #[test]
    fn verification_requires_the_certified_sigma() {
        let (spec, params, triggers) = setup();
        let report = certify_grid(&spec, &params, &triggers, &smoothing(), &[0.0]).unwrap();
        let other = SmoothingConfig { sigma: 0.1, ..smoothing() };
        assert!(verify_certificate(&spec, &report, &[], &triggers, &other).is_err());
    }

    #[test]
    fn allowance_rank_stays_in_range() {
        assert_eq!(allowance_rank(1), 0);
        assert_eq!(allowance_rank(100), 65);
        assert_eq!(allowance_rank(10_000), 5150);
    }

    #[test]
    fn timestamp_defaults_to_the_epoch() {
        if std::env::var_os("SOURCE_DATE_EPOCH").is_none() {
            assert_eq!(report_timestamp(), "1970-01-01T00:00:00Z");
        }
    }
}
