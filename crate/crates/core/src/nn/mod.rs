//! Small deterministic neural-network engine: MLP/CNN forward pass, exact
//! backpropagation, optimizers and parameter-vector algebra.

mod checkpoint;
pub mod engine;
mod optim;
mod params;
mod spec;

use thiserror::Error;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, model_digest, save_checkpoint,
    CHECKPOINT_MAGIC,
};
pub use engine::{argmax, Targets};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use params::{l2_distance, LayerTensors, ParamVector};
pub use spec::{Layer, LayerLayout, Layout, ModelSpec, Shape3};

use crate::data::Dataset;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("parameter count mismatch: expected {expected}, got {actual}")]
    ParamCount { expected: usize, actual: usize },
    #[error("batch shape mismatch: {0}")]
    Shape(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {label} at position {index} is not a class id below {classes}")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("non-finite {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint was written for a different model spec")]
    DigestMismatch,
}

/// Images processed per forward call when scoring whole datasets.
const EVAL_CHUNK: usize = 256;

fn check_batch(layout: &Layout, params: &ParamVector, images: &[f32]) -> Result<usize, NnError> {
    params.check_len(layout.param_count)?;
    let input = layout.input_len();
    if images.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    if !images.len().is_multiple_of(input) {
        return Err(NnError::Shape(format!(
            "{} values is not a whole number of {} inputs ({} values each)",
            images.len(),
            layout.input,
            input
        )));
    }
    Ok(images.len() / input)
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<(), NnError> {
    if labels.len() != batch {
        return Err(NnError::Shape(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(NnError::Label {
            index,
            label,
            classes,
        });
    }
    Ok(())
}

/// Logits `[batch, classes]` for a batch of NHWC images.
pub fn forward(spec: &ModelSpec, params: &ParamVector, images: &[f32]) -> Result<Vec<f32>, NnError> {
    let layout = spec.layout()?;
    check_batch(&layout, params, images)?;
    Ok(engine::forward_with(&layout, params.as_slice(), images))
}

/// Mean softmax cross-entropy over the batch and its parameter gradient.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    images: &[f32],
    labels: &[usize],
) -> Result<(f32, ParamVector), NnError> {
    let layout = spec.layout()?;
    loss_and_grad_in(&layout, params, images, Targets::Hard(labels))
}

/// As [`loss_and_grad`] with a pre-resolved layout and either target kind.
pub fn loss_and_grad_in(
    layout: &Layout,
    params: &ParamVector,
    images: &[f32],
    targets: Targets<'_, f32>,
) -> Result<(f32, ParamVector), NnError> {
    let batch = check_batch(layout, params, images)?;
    match targets {
        Targets::Hard(labels) => check_labels(labels, batch, layout.classes)?,
        Targets::Soft(rows) => {
            if rows.len() != batch * layout.classes {
                return Err(NnError::Shape(format!(
                    "{} soft-target values for a batch of {batch} x {} classes",
                    rows.len(),
                    layout.classes
                )));
            }
        }
    }
    let (loss, grad) = engine::loss_and_grad_with(layout, params.as_slice(), images, targets);
    if !loss.is_finite() {
        return Err(NnError::NonFinite {
            what: "loss",
            index: 0,
        });
    }
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(NnError::NonFinite {
            what: "gradient",
            index,
        });
    }
    Ok((loss, ParamVector::from_vec_unchecked(grad)))
}

/// Argmax class per image, ties to the lowest class id.
pub fn predict_in(layout: &Layout, params: &ParamVector, images: &[f32]) -> Result<Vec<usize>, NnError> {
    check_batch(layout, params, images)?;
    let input = layout.input_len();
    let mut out = Vec::with_capacity(images.len() / input);
    for chunk in images.chunks(EVAL_CHUNK * input) {
        let logits = engine::forward_with(layout, params.as_slice(), chunk);
        out.extend(logits.chunks_exact(layout.classes).map(argmax));
    }
    Ok(out)
}

/// Fraction of examples whose argmax prediction equals the label.
pub fn accuracy_in(
    layout: &Layout,
    params: &ParamVector,
    images: &[f32],
    labels: &[usize],
) -> Result<f64, NnError> {
    let predictions = predict_in(layout, params, images)?;
    check_labels(labels, predictions.len(), layout.classes)?;
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn accuracy(spec: &ModelSpec, params: &ParamVector, dataset: &Dataset) -> Result<f64, NnError> {
    let layout = spec.layout()?;
    if dataset.shape() != layout.input {
        return Err(NnError::Shape(format!(
            "dataset images are {} but the model expects {}",
            dataset.shape(),
            layout.input
        )));
    }
    accuracy_in(&layout, params, dataset.images(), dataset.labels())
}
