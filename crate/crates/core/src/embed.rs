//! Watermark embedding: ordinary training with a trigger-set phase that
//! replays the triggers under a ramp of Gaussian parameter noise.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, TriggerSet};
use crate::nn::{
    accuracy_in, l2_distance, loss_and_grad_in, Layout, ModelSpec, NnError, OptimizerConfig, OptimizerState,
    ParamVector, Targets,
};
use crate::rng::{mix, perturb, stream_rng};
use crate::train::{run_epoch, Labels};

const TRAIN_TAG: u64 = 0x7A11;
const NOISE_TAG: u64 = 0x0015E;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("invalid embed config: {0}")]
    Config(String),
    #[error("training diverged in epoch {epoch} ({phase}): {source}")]
    Diverged {
        epoch: usize,
        phase: Phase,
        #[source]
        source: NnError,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Embed,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Warmup => "warmup",
            Phase::Embed => "embed",
        })
    }
}

/// Embedding hyperparameters.
///
/// `max_noise` is the ceiling of the noise ramp: replay step `i` of `k`
/// trains at `sigma = i / k * max_noise`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedConfig {
    pub tau: f32,
    pub max_noise: f64,
    pub replay_count: usize,
    pub noise_samples: usize,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    /// `None` trains on the whole trigger set as one batch.
    pub trigger_batch_size: Option<usize>,
    /// Keep one running gradient sum across noise levels and divide it by
    /// `replay_count * noise_samples` after every level, instead of
    /// averaging each level on its own.
    pub literal_accumulation: bool,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            max_noise: 1.0,
            replay_count: 20,
            noise_samples: 100,
            warmup_epochs: 5,
            total_epochs: 100,
            batch_size: 128,
            trigger_batch_size: None,
            literal_accumulation: false,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl EmbedConfig {
    /// Small-network settings that train in seconds on one core.
    pub fn desk() -> Self {
        Self {
            tau: 0.005,
            max_noise: DESK_MAX_NOISE,
            replay_count: 5,
            noise_samples: 8,
            warmup_epochs: 2,
            total_epochs: 10,
            batch_size: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        let fail = |m: String| Err(EmbedError::Config(m));
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be a finite non-negative rate, got {}", self.tau));
        }
        if !(self.max_noise >= 0.0 && self.max_noise.is_finite()) {
            return fail(format!("max_noise must be finite and >= 0, got {}", self.max_noise));
        }
        if self.replay_count == 0 || self.noise_samples == 0 {
            return fail("replay_count and noise_samples must be at least 1".into());
        }
        if self.warmup_epochs > self.total_epochs {
            return fail(format!(
                "warmup_epochs ({}) exceeds total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            ));
        }
        if self.batch_size == 0 || self.trigger_batch_size == Some(0) {
            return fail("batch sizes must be at least 1".into());
        }
        Ok(())
    }

    /// SGD with this config's rate, momentum and weight decay.
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig::sgd(self.tau, self.momentum, self.weight_decay)
    }

    /// Noise level of replay step `i` (1-based).
    pub fn noise_level(&self, i: usize) -> f64 {
        i as f64 / self.replay_count as f64 * self.max_noise
    }
}

/// Noise ceiling used by [`EmbedConfig::desk`].
pub const DESK_MAX_NOISE: f64 = 0.1;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub trigger_acc: f64,
    pub l2_from_init: f64,
}

#[derive(Clone, Debug)]
pub struct EmbedOutcome {
    pub params: ParamVector,
    pub log: Vec<EpochRecord>,
}

/// Sum over `t` draws G ~ N(0, sigma^2 I) of the batch-mean gradient at
/// theta + G, accumulated in `f64` in draw order.
fn noise_gradient_sum(
    layout: &Layout,
    params: &ParamVector,
    images: &[f32],
    labels: &[usize],
    sigma: f64,
    t: usize,
    seed: u64,
) -> Result<Vec<f64>, NnError> {
    let grads: Vec<ParamVector> = if sigma == 0.0 {
        let (_, g) = loss_and_grad_in(layout, params, images, Targets::Hard(labels))?;
        vec![g; t]
    } else {
        (0..t as u64)
            .into_par_iter()
            .map(|j| {
                let noisy = perturb(params, sigma, &mut stream_rng(mix(seed, j), 0));
                loss_and_grad_in(layout, &noisy, images, Targets::Hard(labels)).map(|(_, g)| g)
            })
            .collect::<Result<_, _>>()?
    };
    let mut sum = vec![0.0f64; params.len()];
    for g in &grads {
        for (s, &v) in sum.iter_mut().zip(g.as_slice()) {
            *s += v as f64;
        }
    }
    Ok(sum)
}

/// Mean over `t` noise draws of the trigger-batch gradient at theta + G.
pub fn noise_averaged_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    images: &[f32],
    labels: &[usize],
    sigma: f64,
    t: usize,
    seed: u64,
) -> Result<ParamVector, EmbedError> {
    if !(sigma >= 0.0 && sigma.is_finite()) || t == 0 {
        return Err(EmbedError::Config(format!("need sigma >= 0 and t >= 1, got sigma={sigma}, t={t}")));
    }
    let layout = spec.layout()?;
    let sum = noise_gradient_sum(&layout, params, images, labels, sigma, t, seed)?;
    Ok(ParamVector::new(sum.iter().map(|&s| (s / t as f64) as f32).collect())?)
}

fn check_compatible(layout: &Layout, data: &Dataset, what: &str) -> Result<(), EmbedError> {
    if data.shape() != layout.input || data.classes() > layout.classes {
        return Err(EmbedError::Config(format!(
            "{what} has {} images over {} classes, model takes {} over {}",
            data.shape(),
            data.classes(),
            layout.input,
            layout.classes
        )));
    }
    Ok(())
}

/// Trains `params` on `train` and embeds `triggers`.
///
/// Each epoch makes one optimizer pass over `train`. After the warm-up
/// epochs, each epoch also walks the trigger batches and, per batch, takes
/// one step per noise level `sigma_i = i / k * max_noise`, `i = 1..=k`,
/// using the gradient averaged over `t` noise draws. `opt` runs at
/// `cfg.tau`; its other settings are kept.
pub fn embed_watermark(
    spec: &ModelSpec,
    params: &ParamVector,
    train: &Dataset,
    test: Option<&Dataset>,
    triggers: &TriggerSet,
    cfg: &EmbedConfig,
    opt: &mut OptimizerState,
) -> Result<EmbedOutcome, EmbedError> {
    cfg.validate()?;
    let layout = spec.layout()?;
    params.check_len(layout.param_count)?;
    check_compatible(&layout, train, "training set")?;
    check_compatible(&layout, triggers.as_dataset(), "trigger set")?;
    if let Some(test) = test {
        check_compatible(&layout, test, "test set")?;
    }
    opt.set_lr(cfg.tau);
    let init = params.clone();
    let mut theta = params.clone();
    let mut log = Vec::with_capacity(cfg.total_epochs);
    let input = layout.input_len();
    let trigger_batch = cfg.trigger_batch_size.unwrap_or(triggers.len()).min(triggers.len());

    for epoch in 1..=cfg.total_epochs {
        let phase = if epoch > cfg.warmup_epochs { Phase::Embed } else { Phase::Warmup };
        let diverged = |source| EmbedError::Diverged { epoch, phase, source };
        let train_loss = run_epoch(
            &layout,
            &mut theta,
            opt,
            train,
            Labels::Hard(train.labels()),
            cfg.batch_size,
            mix(cfg.seed ^ TRAIN_TAG, epoch as u64),
            0.0,
        )
        .map_err(diverged)?;

        if phase == Phase::Embed {
            let batches = triggers
                .images()
                .chunks(trigger_batch * input)
                .zip(triggers.target_labels().chunks(trigger_batch));
            for (b, (images, labels)) in batches.enumerate() {
                let batch_seed = mix(mix(cfg.seed ^ NOISE_TAG, epoch as u64), b as u64);
                let mut g = vec![0.0f64; theta.len()];
                for i in 1..=cfg.replay_count {
                    let sigma = cfg.noise_level(i);
                    let sum = noise_gradient_sum(
                        &layout,
                        &theta,
                        images,
                        labels,
                        sigma,
                        cfg.noise_samples,
                        mix(batch_seed, i as u64),
                    )
                    .map_err(diverged)?;
                    let scale = if cfg.literal_accumulation {
                        for (a, s) in g.iter_mut().zip(&sum) {
                            *a += s;
                        }
                        (cfg.replay_count * cfg.noise_samples) as f64
                    } else {
                        g = sum;
                        cfg.noise_samples as f64
                    };
                    for a in g.iter_mut() {
                        *a /= scale;
                    }
                    let step: Vec<f32> = g.iter().map(|&a| a as f32).collect();
                    opt.step(&mut theta, &step).map_err(diverged)?;
                }
            }
        }

        let train_acc = accuracy_in(&layout, &theta, train.images(), train.labels())?;
        let test_acc = test
            .map(|t| accuracy_in(&layout, &theta, t.images(), t.labels()))
            .transpose()?;
        let trigger_acc = accuracy_in(&layout, &theta, triggers.images(), triggers.target_labels())?;
        log.push(EpochRecord {
            epoch,
            phase,
            train_loss,
            train_acc,
            test_acc,
            trigger_acc,
            l2_from_init: l2_distance(&init, &theta)?,
        });
    }
    Ok(EmbedOutcome { params: theta, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_trigger_set, synthetic_dataset, PatchSpec, TriggerSource};
    use crate::nn::{loss_and_grad, Shape3};

    fn setup() -> (ModelSpec, ParamVector, Dataset, TriggerSet) {
        let dims = Shape3::new(8, 8, 1);
        let spec = ModelSpec::mlp(dims, &[12], 4).unwrap();
        let params = ParamVector::init(&spec, 1).unwrap();
        let train = synthetic_dataset(2, 48, 4, dims).unwrap();
        let source = TriggerSource::EmbeddedContent { base: &train, patch: PatchSpec::default() };
        let triggers = make_trigger_set(source, 3, 8, 5).unwrap();
        (spec, params, train, triggers)
    }

    fn quick() -> EmbedConfig {
        EmbedConfig {
            max_noise: 0.05,
            replay_count: 2,
            noise_samples: 3,
            warmup_epochs: 1,
            total_epochs: 3,
            batch_size: 16,
            ..EmbedConfig::desk()
        }
    }

    #[test]
    fn zero_noise_average_is_the_plain_gradient() {
        let (spec, params, _, triggers) = setup();
        let (_, plain) = loss_and_grad(&spec, &params, triggers.images(), triggers.target_labels()).unwrap();
        let avg = noise_averaged_gradient(&spec, &params, triggers.images(), triggers.target_labels(), 0.0, 7, 3)
            .unwrap();
        assert_eq!(plain, avg);
    }

    #[test]
    fn single_draw_is_one_noisy_gradient() {
        let (spec, params, _, triggers) = setup();
        let noisy = perturb(&params, 0.1, &mut stream_rng(mix(9, 0), 0));
        let (_, expected) = loss_and_grad(&spec, &noisy, triggers.images(), triggers.target_labels()).unwrap();
        let got = noise_averaged_gradient(&spec, &params, triggers.images(), triggers.target_labels(), 0.1, 1, 9)
            .unwrap();
        assert_eq!(expected, got);
    }

    #[test]
    fn config_validation() {
        assert!(EmbedConfig::default().validate().is_ok());
        assert!(EmbedConfig::desk().validate().is_ok());
        let bad = [
            EmbedConfig { replay_count: 0, ..quick() },
            EmbedConfig { noise_samples: 0, ..quick() },
            EmbedConfig { max_noise: -1.0, ..quick() },
            EmbedConfig { warmup_epochs: 4, ..quick() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn ramp_reaches_the_ceiling() {
        let c = EmbedConfig { replay_count: 4, max_noise: 0.2, ..quick() };
        let levels: Vec<f64> = (1..=4).map(|i| c.noise_level(i)).collect();
        assert_eq!(levels, vec![0.05, 0.1, 0.15000000000000002, 0.2]);
    }

    #[test]
    fn all_warmup_equals_plain_training() {
        let (spec, params, train, triggers) = setup();
        let cfg = EmbedConfig { warmup_epochs: 3, ..quick() };
        let mut opt = cfg.optimizer().build(params.len());
        let out = embed_watermark(&spec, &params, &train, None, &triggers, &cfg, &mut opt).unwrap();

        let layout = spec.layout().unwrap();
        let mut theta = params.clone();
        let mut opt = cfg.optimizer().build(params.len());
        for epoch in 1..=3u64 {
            let seed = mix(cfg.seed ^ TRAIN_TAG, epoch);
            run_epoch(&layout, &mut theta, &mut opt, &train, Labels::Hard(train.labels()), 16, seed, 0.0).unwrap();
        }
        assert_eq!(out.params, theta);
        assert!(out.log.iter().all(|r| r.phase == Phase::Warmup));
    }

    #[test]
    fn embedding_is_reproducible_and_logged() {
        let (spec, params, train, triggers) = setup();
        let cfg = quick();
        let run = || {
            let mut opt = cfg.optimizer().build(params.len());
            embed_watermark(&spec, &params, &train, Some(&train), &triggers, &cfg, &mut opt).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.params, b.params);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 3);
        assert_eq!(a.log[0].phase, Phase::Warmup);
        assert_eq!(a.log[1].phase, Phase::Embed);
        assert!(a.log.iter().all(|r| r.l2_from_init > 0.0 && r.test_acc.is_some()));
    }

    #[test]
    fn literal_mode_differs_from_the_default() {
        let (spec, params, train, triggers) = setup();
        let base = quick();
        let literal = EmbedConfig { literal_accumulation: true, ..quick() };
        let run = |cfg: &EmbedConfig| {
            let mut opt = cfg.optimizer().build(params.len());
            embed_watermark(&spec, &params, &train, None, &triggers, cfg, &mut opt).unwrap().params
        };
        assert_ne!(run(&base), run(&literal));
    }

    #[test]
    fn literal_mode_with_one_level_matches_the_default() {
        let (spec, params, train, triggers) = setup();
        let run = |literal| {
            let cfg = EmbedConfig { replay_count: 1, literal_accumulation: literal, ..quick() };
            let mut opt = cfg.optimizer().build(params.len());
            embed_watermark(&spec, &params, &train, None, &triggers, &cfg, &mut opt).unwrap().params
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn divergence_is_reported() {
        let (spec, params, train, triggers) = setup();
        let cfg = EmbedConfig { tau: 1e30, warmup_epochs: 0, ..quick() };
        let mut opt = cfg.optimizer().build(params.len());
        let err = embed_watermark(&spec, &params, &train, None, &triggers, &cfg, &mut opt).unwrap_err();
        assert!(matches!(err, EmbedError::Diverged { epoch: 1, .. }), "{err}");
    }
}
