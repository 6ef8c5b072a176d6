//! Datasets: IDX ingestion, synthetic generators, owner/adversary splits and
//! trigger-set construction.

mod idx;
mod split;
mod synthetic;
mod trigger;

use thiserror::Error;

pub use idx::{load_idx, write_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use split::{split_indices, split_owner_adversary};
pub use synthetic::synthetic_dataset;
pub use trigger::{
    decode_trigger_set, encode_trigger_set, load_trigger_set, make_trigger_set, save_trigger_set,
    PatchSpec, TriggerScheme, TriggerSet, TriggerSource, GLYPH_SIZE, NOISE_STD_DEFAULT,
    TRIGGER_COUNT_DEFAULT,
};

use crate::nn::Shape3;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated file, need {needed} bytes but found {found}")]
    Truncated {
        path: String,
        needed: usize,
        found: usize,
    },
    #[error("image file has {images} records but label file has {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("requested {requested} images but only {available} are available")]
    NotEnough { requested: usize, available: usize },
    #[error("target label {label} is not below the class count {classes}")]
    BadTarget { label: usize, classes: usize },
    #[error("cannot fit {from} images into a {to} model input")]
    Incompatible { from: Shape3, to: Shape3 },
    #[error("trigger set file: {0}")]
    Format(String),
}

/// Labelled images, NHWC, pixels in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    shape: Shape3,
    classes: usize,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<usize>,
        shape: Shape3,
        classes: usize,
    ) -> Result<Self, DataError> {
        if labels.is_empty() {
            return Err(DataError::Invalid("dataset has no examples".into()));
        }
        if shape.is_empty() || images.len() != labels.len() * shape.len() {
            return Err(DataError::Invalid(format!(
                "{} pixel values do not form {} images of {shape}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(i) = images.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(DataError::Invalid(format!(
                "pixel {i} has value {} outside [0, 1]",
                images[i]
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::Invalid(format!(
                "label {label} is not below the class count {classes}"
            )));
        }
        Ok(Self {
            images,
            labels,
            shape,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let n = self.shape.len();
        &self.images[index * n..(index + 1) * n]
    }

    /// New dataset made of the given examples, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.shape.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            images,
            labels,
            shape: self.shape,
            classes: self.classes,
        }
    }

    /// First `n` examples (all of them if `n` exceeds the length).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Copy with labels replaced, over at least `classes` classes; the caller
    /// keeps the labels below that count.
    pub(crate) fn with_labels(&self, labels: Vec<usize>, classes: usize) -> Dataset {
        debug_assert_eq!(labels.len(), self.len());
        debug_assert!(labels.iter().all(|&l| l < classes.max(self.classes)));
        Dataset {
            labels,
            classes: classes.max(self.classes),
            ..self.clone()
        }
    }

    pub fn mean_pixel(&self) -> f64 {
        self.images.iter().map(|&p| f64::from(p)).sum::<f64>() / self.images.len() as f64
    }
}
