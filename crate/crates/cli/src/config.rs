//! Experiment configuration: one TOML file per run, merged over built-in
//! defaults, with command-line flags applied last.

use std::path::{Path, PathBuf};

use certmark::attacks::{AttackConfig, AttackKind};
use certmark::data::{PatchSpec, TriggerScheme, NOISE_STD_DEFAULT, TRIGGER_COUNT_DEFAULT};
use certmark::embed::{EmbedConfig, DESK_MAX_NOISE};
use certmark::nn::{ModelSpec, Shape3};
use certmark::rng::mix;
use certmark::smoothing::SmoothingConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Generated blob images; the test set comes from an independent seed.
    Synthetic {
        n: usize,
        test_n: usize,
        classes: usize,
        height: usize,
        width: usize,
        channels: usize,
    },
    /// IDX files. Without separate test files, the last `test_count`
    /// examples of a seeded shuffle are held out.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_labels: Option<PathBuf>,
        #[serde(default = "default_test_count")]
        test_count: usize,
    },
}

fn default_test_count() -> usize {
    1000
}

impl DatasetConfig {
    pub fn label(&self) -> String {
        match self {
            DatasetConfig::Synthetic { height, width, channels, .. } => {
                format!("synthetic-{height}x{width}x{channels}")
            }
            DatasetConfig::Idx { images, .. } => images
                .parent()
                .and_then(Path::file_name)
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "idx".into()),
        }
    }

    fn absolutize(&mut self) {
        if let DatasetConfig::Idx { images, labels, test_images, test_labels, .. } = self {
            for path in [Some(images), Some(labels), test_images.as_mut(), test_labels.as_mut()].into_iter().flatten() {
                if let Ok(abs) = std::path::absolute(&*path) {
                    *path = abs;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    SmallCnn,
    Mlp { hidden: Vec<usize> },
}

impl ModelConfig {
    pub fn build(&self, input: Shape3, classes: usize) -> Result<ModelSpec, CliError> {
        match self {
            ModelConfig::SmallCnn => ModelSpec::small_cnn(input, classes),
            ModelConfig::Mlp { hidden } => ModelSpec::mlp(input, hidden, classes),
        }
        .map_err(|e| CliError::usage(format!("model: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerConfig {
    pub scheme: TriggerScheme,
    pub count: usize,
    pub target_label: usize,
    pub noise_std: f64,
    pub patch: PatchSpec,
    /// Image source for the unrelated scheme.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unrelated: Option<DatasetConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of all randomness; nested seeds are derived from it.
    pub seed: u64,
    pub out: PathBuf,
    /// Also embed a zero-noise watermark under `baseline/`.
    pub baseline: bool,
    pub radii: Vec<f64>,
    /// Noise draws for the smoothed trigger accuracy logged during attacks.
    pub attack_eval_n: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub triggers: TriggerConfig,
    pub embed: EmbedConfig,
    pub smoothing: SmoothingConfig,
    pub attacks: Vec<AttackConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("run"),
            baseline: false,
            radii: vec![0.0, 0.02, 0.05, 0.1, 0.15, 0.2],
            attack_eval_n: 100,
            dataset: DatasetConfig::Synthetic {
                n: 2000,
                test_n: 1000,
                classes: 10,
                height: 16,
                width: 16,
                channels: 1,
            },
            model: ModelConfig::SmallCnn,
            triggers: TriggerConfig {
                scheme: TriggerScheme::EmbeddedContent,
                count: TRIGGER_COUNT_DEFAULT,
                target_label: 0,
                noise_std: NOISE_STD_DEFAULT,
                patch: PatchSpec::default(),
                unrelated: None,
            },
            embed: EmbedConfig::desk(),
            smoothing: SmoothingConfig {
                sigma: DESK_MAX_NOISE,
                n: 1000,
                confidence: 0.99,
                root_seed: 0,
            },
            attacks: vec![
                AttackConfig::finetune(1e-4, 5),
                AttackConfig::finetune(1e-3, 5),
                AttackConfig::distill_hard(1e-4, 5),
                AttackConfig::distill_hard(1e-3, 5),
            ],
        }
    }
}

/// Seed-stream tags, one per consumer of the root seed.
pub mod tags {
    pub const DATA: u64 = 1;
    pub const TEST: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const TRIGGERS: u64 = 4;
    pub const INIT: u64 = 5;
    pub const EMBED: u64 = 6;
    pub const SMOOTHING: u64 = 7;
    pub const ATTACK: u64 = 8;
    pub const UNRELATED: u64 = 9;
}

/// A seed stream kept within TOML's signed 64-bit integer range.
fn derived(seed: u64, tag: u64) -> u64 {
    mix(seed, tag) & MAX_SEED
}

pub const MAX_SEED: u64 = i64::MAX as u64;

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Overlays `user` onto `base`. Tables merge key by key unless their
/// variant tag differs, in which case the user table replaces the default.
fn merge(base: &mut Table, user: Table) {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(u)) if same_variant(b, &u) => merge(b, u),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

fn same_variant(base: &Table, user: &Table) -> bool {
    ["source", "arch"]
        .iter()
        .all(|tag| user.get(*tag).is_none_or(|u| base.get(*tag) == Some(u)))
}

/// Rewrites widened `f32` values as the shortest decimal that reads back
/// to the same `f32`.
fn shorten_f32(table: &mut Table, keys: &[&str]) {
    for key in keys {
        if let Some(Value::Float(x)) = table.get_mut(*key) {
            *x = (*x as f32).to_string().parse().expect("f32 display parses");
        }
    }
}

impl ExperimentConfig {
    /// Parses `text` with every missing key taken from the defaults.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let user: Table = text.parse().map_err(|e| CliError::usage(format!("config: {e}")))?;
        let mut merged = Table::try_from(Self::default()).expect("default config serializes");
        merge(&mut merged, user);
        merged.try_into().map_err(|e: toml::de::Error| CliError::usage(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        let mut table = Table::try_from(self).expect("config serializes");
        if let Some(Value::Table(embed)) = table.get_mut("embed") {
            shorten_f32(embed, &["tau", "momentum", "weight_decay"]);
        }
        if let Some(Value::Array(attacks)) = table.get_mut("attacks") {
            for attack in attacks.iter_mut().filter_map(Value::as_table_mut) {
                shorten_f32(attack, &["lr", "reg_lambda"]);
            }
        }
        toml::to_string(&table).expect("config serializes")
    }

    /// Reads `explicit`, else `<out>/config.toml` when present, else the
    /// defaults; then applies the overrides and derives nested seeds.
    pub fn resolve(explicit: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let stored = overrides.out.clone().unwrap_or_else(|| Self::default().out).join(CONFIG_FILE);
        let path = match explicit {
            Some(p) => Some(p.to_path_buf()),
            None => stored.is_file().then_some(stored),
        };
        let mut cfg = match &path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::usage(format!("config {}: {e}", p.display())))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &overrides.out {
            cfg.out = out.clone();
        }
        cfg.dataset.absolutize();
        if let Some(u) = cfg.triggers.unrelated.as_mut() {
            u.absolutize();
        }
        cfg.derive_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    fn derive_seeds(&mut self) {
        self.embed.seed = derived(self.seed, tags::EMBED);
        self.smoothing.root_seed = derived(self.seed, tags::SMOOTHING);
        for i in 0..self.attacks.len() {
            self.attacks[i].seed = self.attack_seed(i as u64);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::usage(m));
        self.embed.validate().map_err(|e| CliError::usage(e.to_string()))?;
        self.smoothing.validate().map_err(|e| CliError::usage(e.to_string()))?;
        for attack in &self.attacks {
            attack.validate().map_err(|e| CliError::usage(e.to_string()))?;
        }
        validate_radii(&self.radii)?;
        if self.seed > MAX_SEED {
            return usage(format!("seed must be at most {MAX_SEED}"));
        }
        if self.triggers.count == 0 {
            return usage("triggers.count must be at least 1".into());
        }
        if self.triggers.scheme == TriggerScheme::Unrelated && self.triggers.unrelated.is_none() {
            return usage("the unrelated trigger scheme needs a [triggers.unrelated] dataset".into());
        }
        if let DatasetConfig::Synthetic { n, test_n, classes, .. } = self.dataset {
            if n < 2 * classes || test_n == 0 {
                return usage(format!("synthetic dataset too small: n={n}, test_n={test_n}"));
            }
        }
        if self.out.as_os_str().is_empty() {
            return usage("output directory is empty".into());
        }
        Ok(())
    }

    /// Seed for the attack in list slot `slot`.
    pub fn attack_seed(&self, slot: u64) -> u64 {
        derived(mix(self.seed, tags::ATTACK), slot)
    }
}

pub fn validate_radii(radii: &[f64]) -> Result<(), CliError> {
    if radii.is_empty() || radii.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(CliError::usage("radii must be a non-empty list of finite values >= 0"));
    }
    if radii.windows(2).any(|w| w[0] > w[1]) {
        return Err(CliError::usage("radii must be ascending"));
    }
    Ok(())
}

/// Directory name for an attack run.
pub fn attack_name(cfg: &AttackConfig) -> String {
    let mut name = match cfg.kind {
        AttackKind::Pgd => format!("pgd-r{}", cfg.radius.unwrap_or_default()),
        kind if kind.is_perturbation() => format!("{kind}-m{}", cfg.magnitude.unwrap_or_default()),
        kind => format!("{kind}-lr{}", cfg.lr),
    };
    if cfg.reg_lambda > 0.0 {
        name.push_str(&format!("-reg{}", cfg.reg_lambda));
    }
    name
}
