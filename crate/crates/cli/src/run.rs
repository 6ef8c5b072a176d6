//! Run-directory layout and the data, model and trigger set a config
//! describes.

use std::fs;
use std::path::{Path, PathBuf};

use certmark::data::{
    load_idx, load_trigger_set, make_trigger_set, save_trigger_set, split_indices, split_owner_adversary,
    synthetic_dataset, Dataset, TriggerScheme, TriggerSet, TriggerSource,
};
use certmark::nn::{load_checkpoint, save_checkpoint, ModelSpec, NnError, ParamVector, Shape3};
use certmark::rng::mix;
use serde::Serialize;

use crate::config::{tags, DatasetConfig, ExperimentConfig, CONFIG_FILE};
use crate::error::{CliError, CliResult};

pub const MODEL_FILE: &str = "model.ckpt";
pub const TRIGGERS_FILE: &str = "triggers.bin";
pub const TRAIN_LOG: &str = "train.log";
pub const REPORT_FILE: &str = "report.json";
pub const ATTACKS_DIR: &str = "attacks";
pub const BASELINE_DIR: &str = "baseline";
pub const TRAJECTORY_FILE: &str = "trajectory.log";
pub const ATTACK_FILE: &str = "attack.json";
pub const VERIFY_FILE: &str = "verify.json";
pub const TABLES_FILE: &str = "tables.json";

/// Fixed artifact names under one run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    pub fn model(&self) -> PathBuf {
        self.root.join(MODEL_FILE)
    }

    pub fn triggers(&self) -> PathBuf {
        self.root.join(TRIGGERS_FILE)
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join(TRAIN_LOG)
    }

    pub fn report(&self) -> PathBuf {
        self.root.join(REPORT_FILE)
    }

    pub fn baseline(&self) -> RunDir {
        RunDir::new(self.root.join(BASELINE_DIR))
    }

    pub fn attacks(&self) -> PathBuf {
        self.root.join(ATTACKS_DIR)
    }

    pub fn attack(&self, name: &str) -> PathBuf {
        self.attacks().join(name)
    }

    pub fn verify(&self) -> PathBuf {
        self.root.join(VERIFY_FILE)
    }
}

/// The owner's training split, the adversary's split and the test set.
pub struct Splits {
    pub owner: Dataset,
    pub adversary: Dataset,
    pub test: Dataset,
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!("dataset not found: {}", path.display())))
    }
}

fn read_idx(images: &Path, labels: &Path) -> CliResult<Dataset> {
    require_file(images)?;
    require_file(labels)?;
    load_idx(images, labels).map_err(|e| CliError::usage(format!("dataset unreadable: {e}")))
}

/// Training pool and test set of `dataset` before the owner/adversary split.
fn pool_and_test(dataset: &DatasetConfig, seed: u64) -> CliResult<(Dataset, Dataset)> {
    let data_err = |e: certmark::data::DataError| CliError::usage(format!("dataset: {e}"));
    match dataset {
        &DatasetConfig::Synthetic { n, test_n, classes, height, width, channels } => {
            let dims = Shape3::new(height, width, channels);
            let pool = synthetic_dataset(mix(seed, tags::DATA), n, classes, dims).map_err(data_err)?;
            let test = synthetic_dataset(mix(seed, tags::TEST), test_n, classes, dims).map_err(data_err)?;
            Ok((pool, test))
        }
        DatasetConfig::Idx { images, labels, test_images, test_labels, test_count } => {
            let all = read_idx(images, labels)?;
            match (test_images, test_labels) {
                (Some(ti), Some(tl)) => Ok((all, read_idx(ti, tl)?)),
                (None, None) => {
                    if *test_count == 0 || *test_count >= all.len() {
                        return Err(CliError::usage(format!(
                            "test_count {test_count} must lie between 1 and {} (the dataset size)",
                            all.len().saturating_sub(1)
                        )));
                    }
                    let (a, b) = split_indices(all.len(), mix(seed, tags::TEST));
                    let order: Vec<usize> = a.into_iter().chain(b).collect();
                    let cut = all.len() - test_count;
                    Ok((all.select(&order[..cut]), all.select(&order[cut..])))
                }
                _ => Err(CliError::usage("test_images and test_labels must be given together")),
            }
        }
    }
}

pub fn load_splits(cfg: &ExperimentConfig) -> CliResult<Splits> {
    let (pool, test) = pool_and_test(&cfg.dataset, cfg.seed)?;
    if pool.shape() != test.shape() {
        return Err(CliError::usage(format!(
            "test images are {} but training images are {}",
            test.shape(),
            pool.shape()
        )));
    }
    let (owner, adversary) = split_owner_adversary(&pool, mix(cfg.seed, tags::SPLIT));
    Ok(Splits { owner, adversary, test })
}

pub fn build_triggers(cfg: &ExperimentConfig, owner: &Dataset) -> CliResult<TriggerSet> {
    let t = &cfg.triggers;
    let unrelated = match (&t.scheme, &t.unrelated) {
        (TriggerScheme::Unrelated, Some(source)) => Some(pool_and_test(source, mix(cfg.seed, tags::UNRELATED))?.0),
        _ => None,
    };
    let source = match t.scheme {
        TriggerScheme::EmbeddedContent => TriggerSource::EmbeddedContent { base: owner, patch: t.patch },
        TriggerScheme::Noise => TriggerSource::Noise { base: owner, std: t.noise_std },
        TriggerScheme::Unrelated => TriggerSource::Unrelated {
            unrelated: unrelated.as_ref().expect("validated: unrelated source present"),
            input: owner.shape(),
            classes: owner.classes(),
        },
    };
    make_trigger_set(source, t.target_label, t.count, mix(cfg.seed, tags::TRIGGERS))
        .map_err(|e| CliError::usage(format!("triggers: {e}")))
}

/// The model spec is fixed by the trigger images and the class count.
pub fn spec_for(cfg: &ExperimentConfig, triggers: &TriggerSet) -> CliResult<ModelSpec> {
    cfg.model.build(triggers.shape(), triggers.classes())
}

pub fn init_params(cfg: &ExperimentConfig, spec: &ModelSpec) -> CliResult<ParamVector> {
    ParamVector::init(spec, mix(cfg.seed, tags::INIT)).map_err(|e| CliError::failure(e.to_string()))
}

pub fn read_triggers(path: &Path) -> CliResult<TriggerSet> {
    if !path.is_file() {
        return Err(CliError::usage(format!(
            "trigger set not found: {} (run `certmark embed` first)",
            path.display()
        )));
    }
    load_trigger_set(path).map_err(|e| CliError::failure(e.to_string()))
}

pub fn write_triggers(path: &Path, set: &TriggerSet) -> CliResult<()> {
    save_trigger_set(path, set).map_err(|e| CliError::failure(e.to_string()))
}

/// Loads a checkpoint, refusing one whose digest does not match `spec`.
pub fn read_checkpoint(path: &Path, spec: &ModelSpec) -> CliResult<ParamVector> {
    if !path.is_file() {
        return Err(CliError::usage(format!("checkpoint not found: {}", path.display())));
    }
    load_checkpoint(path, spec).map_err(|e| match e {
        NnError::DigestMismatch => {
            CliError::failure(format!("{}: refusing checkpoint: {e}", path.display()))
        }
        e => CliError::failure(format!("{}: {e}", path.display())),
    })
}

pub fn write_checkpoint(path: &Path, spec: &ModelSpec, params: &ParamVector) -> CliResult<()> {
    save_checkpoint(path, spec, params).map_err(|e| CliError::failure(format!("{}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::usage(format!("cannot create {}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    write_text(path, &text)
}

/// One JSON object per line.
pub fn write_json_lines<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let text: String = rows
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect();
    write_text(path, &text)
}
