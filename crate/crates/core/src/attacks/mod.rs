//! Watermark-removal adversaries and their l2 instrumentation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, TriggerSet};
use crate::nn::{accuracy_in, engine, l2_distance, Layout, ModelSpec, NnError, OptimizerConfig, ParamVector};
use crate::rng::mix;
use crate::smoothing::{sample_accuracies, smoothed_trigger_accuracy, SmoothingConfig, SmoothingError};
use crate::train::{run_epoch, Labels};

mod perturb;
mod pgd;

pub use perturb::perturbation_attack;
pub use pgd::{pgd_parameter_attack, pgd_radius_sweep, PgdOutcome};

const ATTACK_TAG: u64 = 0xA77A;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    Config(String),
    #[error("attack diverged in epoch {epoch}: {source}")]
    Diverged {
        epoch: usize,
        #[source]
        source: NnError,
        partial: Box<AttackTrajectory>,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Smoothing(#[from] SmoothingError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Finetune,
    DistillHard,
    DistillSoft,
    Pgd,
    Prune,
    Shift,
    Quantize,
}

impl AttackKind {
    pub const ALL: [AttackKind; 7] = [
        AttackKind::Finetune,
        AttackKind::DistillHard,
        AttackKind::DistillSoft,
        AttackKind::Pgd,
        AttackKind::Prune,
        AttackKind::Shift,
        AttackKind::Quantize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Finetune => "finetune",
            AttackKind::DistillHard => "distill-hard",
            AttackKind::DistillSoft => "distill-soft",
            AttackKind::Pgd => "pgd",
            AttackKind::Prune => "prune",
            AttackKind::Shift => "shift",
            AttackKind::Quantize => "quantize",
        }
    }

    pub fn is_training(self) -> bool {
        matches!(self, AttackKind::Finetune | AttackKind::DistillHard | AttackKind::DistillSoft)
    }

    pub fn is_perturbation(self) -> bool {
        matches!(self, AttackKind::Prune | AttackKind::Shift | AttackKind::Quantize)
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
#[error("unknown attack kind '{0}' (valid kinds: finetune, distill-hard, distill-soft, pgd, prune, shift, quantize)")]
pub struct UnknownAttackKind(pub String);

impl FromStr for AttackKind {
    type Err = UnknownAttackKind;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| UnknownAttackKind(s.to_string()))
    }
}

/// Settings for one attack run.
///
/// `radius` is required for PGD and rejected otherwise; `magnitude` is the
/// pruned fraction, shift std or bit count of the perturbation attacks. For
/// PGD, `lr` is the step length as a fraction of the radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub reg_lambda: f32,
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default = "default_pgd_steps")]
    pub pgd_steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub magnitude: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_lr() -> f32 {
    1e-3
}

fn default_epochs() -> usize {
    10
}

fn default_pgd_steps() -> usize {
    40
}

fn default_batch_size() -> usize {
    32
}

/// Relative PGD step length used by [`AttackConfig::pgd`].
pub const PGD_LR_DEFAULT: f32 = 0.1;

impl AttackConfig {
    fn base(kind: AttackKind) -> Self {
        Self {
            kind,
            lr: default_lr(),
            epochs: default_epochs(),
            reg_lambda: 0.0,
            radius: None,
            pgd_steps: default_pgd_steps(),
            batch_size: default_batch_size(),
            magnitude: None,
            seed: 0,
        }
    }

    pub fn finetune(lr: f32, epochs: usize) -> Self {
        Self { lr, epochs, ..Self::base(AttackKind::Finetune) }
    }

    pub fn distill_hard(lr: f32, epochs: usize) -> Self {
        Self { lr, epochs, ..Self::base(AttackKind::DistillHard) }
    }

    pub fn distill_soft(lr: f32, epochs: usize) -> Self {
        Self { lr, epochs, ..Self::base(AttackKind::DistillSoft) }
    }

    pub fn pgd(radius: f64) -> Self {
        Self {
            lr: PGD_LR_DEFAULT,
            radius: Some(radius),
            ..Self::base(AttackKind::Pgd)
        }
    }

    pub fn perturbation(kind: AttackKind, magnitude: f64) -> Self {
        Self { magnitude: Some(magnitude), ..Self::base(kind) }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let fail = |m: String| Err(AttackError::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.reg_lambda >= 0.0 && self.reg_lambda.is_finite()) {
            return fail(format!("reg_lambda must be finite and >= 0, got {}", self.reg_lambda));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        match (self.kind, self.radius) {
            (AttackKind::Pgd, None) => return fail("pgd needs a radius".into()),
            (AttackKind::Pgd, Some(r)) if !(r > 0.0 && r.is_finite()) => {
                return fail(format!("pgd radius must be positive, got {r}"))
            }
            (AttackKind::Pgd, Some(_)) => {}
            (kind, Some(_)) => return fail(format!("radius only applies to pgd, not {kind}")),
            (_, None) => {}
        }
        match (self.kind.is_perturbation(), self.magnitude) {
            (true, None) => fail(format!("{} needs a magnitude", self.kind)),
            (true, Some(m)) => perturb::check_magnitude(self.kind, m),
            (false, Some(_)) => fail(format!("magnitude only applies to prune, shift and quantize, not {}", self.kind)),
            (false, None) => Ok(()),
        }
    }
}

/// What to measure after every attack epoch.
#[derive(Clone, Copy, Debug, Default)]
pub struct AttackEval<'a> {
    pub triggers: Option<&'a TriggerSet>,
    pub test: Option<&'a Dataset>,
    /// Also estimate the median smoothed trigger accuracy with this config.
    pub smoothing: Option<SmoothingConfig>,
}

/// Measurements after one attack epoch; epoch 0 is the starting point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub epoch: usize,
    pub l2_from_init: f64,
    pub l2_from_prev: f64,
    pub trigger_acc_raw: Option<f64>,
    pub trigger_acc_smoothed: Option<f64>,
    pub test_acc: Option<f64>,
    pub train_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackTrajectory {
    pub kind: AttackKind,
    pub records: Vec<AttackRecord>,
    pub final_params: ParamVector,
}

/// Cumulative and per-epoch l2 movement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct L2Row {
    pub epoch: usize,
    pub cumulative: f64,
    pub increment: f64,
}

/// Distance from the starting parameters and from the previous epoch, for
/// every epoch after the starting record.
pub fn l2_trajectory(trajectory: &AttackTrajectory) -> Vec<L2Row> {
    trajectory
        .records
        .iter()
        .filter(|r| r.epoch > 0)
        .map(|r| L2Row {
            epoch: r.epoch,
            cumulative: r.l2_from_init,
            increment: r.l2_from_prev,
        })
        .collect()
}

struct Recorder<'a> {
    layout: &'a Layout,
    eval: AttackEval<'a>,
    init: ParamVector,
    prev: ParamVector,
    records: Vec<AttackRecord>,
}

impl<'a> Recorder<'a> {
    fn new(layout: &'a Layout, eval: AttackEval<'a>, init: &ParamVector) -> Result<Self, AttackError> {
        let mut rec = Self {
            layout,
            eval,
            init: init.clone(),
            prev: init.clone(),
            records: Vec::new(),
        };
        rec.record(0, init, None)?;
        Ok(rec)
    }

    fn record(&mut self, epoch: usize, params: &ParamVector, train_loss: Option<f64>) -> Result<(), AttackError> {
        let layout = self.layout;
        let trigger_acc_raw = self
            .eval
            .triggers
            .map(|t| accuracy_in(layout, params, t.images(), t.target_labels()))
            .transpose()?;
        let trigger_acc_smoothed = match (self.eval.triggers, self.eval.smoothing) {
            (Some(t), Some(cfg)) => {
                let f = |p: &ParamVector| accuracy_in(layout, p, t.images(), t.target_labels());
                Some(smoothed_trigger_accuracy(&sample_accuracies(f, params, &cfg)?))
            }
            _ => None,
        };
        let test_acc = self
            .eval
            .test
            .map(|d| accuracy_in(layout, params, d.images(), d.labels()))
            .transpose()?;
        self.records.push(AttackRecord {
            epoch,
            l2_from_init: l2_distance(&self.init, params)?,
            l2_from_prev: l2_distance(&self.prev, params)?,
            trigger_acc_raw,
            trigger_acc_smoothed,
            test_acc,
            train_loss,
        });
        self.prev = params.clone();
        Ok(())
    }

    fn finish(self, kind: AttackKind, final_params: ParamVector) -> AttackTrajectory {
        AttackTrajectory { kind, records: self.records, final_params }
    }
}

fn check_data(layout: &Layout, data: &Dataset) -> Result<(), AttackError> {
    if data.shape() != layout.input || data.classes() > layout.classes {
        return Err(AttackError::Config(format!(
            "attack data has {} images over {} classes, model takes {} over {}",
            data.shape(),
            data.classes(),
            layout.input,
            layout.classes
        )));
    }
    Ok(())
}

fn train_attack(
    layout: &Layout,
    params: &ParamVector,
    data: &Dataset,
    labels: Labels<'_>,
    cfg: &AttackConfig,
    eval: AttackEval<'_>,
) -> Result<AttackTrajectory, AttackError> {
    let mut rec = Recorder::new(layout, eval, params)?;
    let mut theta = params.clone();
    let mut opt = OptimizerConfig::adam(cfg.lr).build(theta.len());
    for epoch in 1..=cfg.epochs {
        let seed = mix(cfg.seed ^ ATTACK_TAG, epoch as u64);
        match run_epoch(layout, &mut theta, &mut opt, data, labels, cfg.batch_size, seed, cfg.reg_lambda) {
            Ok(loss) => rec.record(epoch, &theta, Some(loss))?,
            Err(source) => {
                return Err(AttackError::Diverged {
                    epoch,
                    source,
                    partial: Box::new(rec.finish(cfg.kind, theta)),
                })
            }
        }
    }
    Ok(rec.finish(cfg.kind, theta))
}

/// Adam training on the adversary's own labelled data.
pub fn finetune_attack(
    spec: &ModelSpec,
    params: &ParamVector,
    labeled: &Dataset,
    cfg: &AttackConfig,
    eval: AttackEval<'_>,
) -> Result<AttackTrajectory, AttackError> {
    cfg.validate()?;
    if cfg.kind != AttackKind::Finetune {
        return Err(AttackError::Config(format!("finetune_attack got kind {}", cfg.kind)));
    }
    let layout = spec.layout()?;
    params.check_len(layout.param_count)?;
    check_data(&layout, labeled)?;
    train_attack(&layout, params, labeled, Labels::Hard(labeled.labels()), cfg, eval)
}

/// Softmax rows of the victim's logits on `data`.
pub fn victim_probabilities(layout: &Layout, victim: &ParamVector, data: &Dataset) -> Vec<f32> {
    let mut probs = Vec::with_capacity(data.len() * layout.classes);
    for chunk in data.images().chunks(256 * layout.input_len()) {
        probs.extend(engine::forward_with(layout, victim.as_slice(), chunk));
    }
    for row in probs.chunks_exact_mut(layout.classes) {
        engine::softmax_in_place(row);
    }
    probs
}

/// Trains a copy of the victim on labels the victim itself assigns to
/// unlabelled data: its argmax class (hard) or its full softmax (soft).
pub fn distill_attack(
    spec: &ModelSpec,
    victim: &ParamVector,
    unlabeled: &Dataset,
    cfg: &AttackConfig,
    eval: AttackEval<'_>,
) -> Result<AttackTrajectory, AttackError> {
    cfg.validate()?;
    let layout = spec.layout()?;
    victim.check_len(layout.param_count)?;
    check_data(&layout, unlabeled)?;
    match cfg.kind {
        AttackKind::DistillHard => {
            let labels = crate::nn::predict_in(&layout, victim, unlabeled.images())?;
            let relabeled = unlabeled.with_labels(labels, layout.classes);
            train_attack(&layout, victim, &relabeled, Labels::Hard(relabeled.labels()), cfg, eval)
        }
        AttackKind::DistillSoft => {
            let probs = victim_probabilities(&layout, victim, unlabeled);
            train_attack(&layout, victim, unlabeled, Labels::Soft(&probs), cfg, eval)
        }
        kind => Err(AttackError::Config(format!("distill_attack got kind {kind}"))),
    }
}

/// Runs any attack kind and reports it as a trajectory. PGD and the
/// perturbation attacks produce a single step after the starting record.
pub fn run_attack(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    cfg: &AttackConfig,
    eval: AttackEval<'_>,
) -> Result<AttackTrajectory, AttackError> {
    cfg.validate()?;
    match cfg.kind {
        AttackKind::Finetune => finetune_attack(spec, params, data, cfg, eval),
        AttackKind::DistillHard | AttackKind::DistillSoft => distill_attack(spec, params, data, cfg, eval),
        kind => {
            let layout = spec.layout()?;
            params.check_len(layout.param_count)?;
            let attacked = if kind == AttackKind::Pgd {
                pgd_parameter_attack(spec, params, data, cfg)?.params
            } else {
                perturbation_attack(spec, params, kind, cfg.magnitude.unwrap_or_default(), cfg.seed)?
            };
            let mut rec = Recorder::new(&layout, eval, params)?;
            rec.record(1, &attacked, None)?;
            Ok(rec.finish(kind, attacked))
        }
    }
}
