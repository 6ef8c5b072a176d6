//! The flat parameter vector and its per-layer views.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::spec::{Layout, ModelSpec};
use super::NnError;

/// All trainable parameters of a model as one flat `f32` array.
///
/// Every entry is finite. Layers own contiguous slices in layer order,
/// weights first, then biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector(Vec<f32>);

impl ParamVector {
    pub fn new(values: Vec<f32>) -> Result<Self, NnError> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(NnError::NonFinite {
                what: "parameter",
                index,
            });
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    /// Fan-in scaled uniform initialization: weights ~ U(-b, b) with
    /// b = sqrt(6 / fan_in), biases zero.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self, NnError> {
        let layout = spec.layout()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0f32; layout.param_count];
        for tensor in layout.tensors() {
            let bound = (6.0 / tensor.fan_in() as f64).sqrt() as f32;
            for w in &mut values[tensor.weight_offset..tensor.weight_offset + tensor.weight_len] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    /// Mutable access for in-place updates; callers keep entries finite.
    pub(crate) fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.0
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f32>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self(values)
    }

    pub fn check_len(&self, expected: usize) -> Result<(), NnError> {
        if self.len() != expected {
            return Err(NnError::ParamCount {
                expected,
                actual: self.len(),
            });
        }
        Ok(())
    }

    /// Squared Euclidean norm accumulated in `f64`.
    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Splits the vector into per-layer weight and bias tensors.
    pub fn unflatten(&self, layout: &Layout) -> Result<Vec<LayerTensors>, NnError> {
        self.check_len(layout.param_count)?;
        Ok(layout
            .tensors()
            .map(|t| LayerTensors {
                weights: self.0[t.weight_offset..t.weight_offset + t.weight_len].to_vec(),
                bias: self.0[t.bias_offset..t.bias_offset + t.bias_len].to_vec(),
            })
            .collect())
    }

    /// Inverse of [`ParamVector::unflatten`].
    pub fn flatten(tensors: &[LayerTensors]) -> Result<Self, NnError> {
        let total = tensors.iter().map(|t| t.weights.len() + t.bias.len()).sum();
        let mut values = Vec::with_capacity(total);
        for t in tensors {
            values.extend_from_slice(&t.weights);
            values.extend_from_slice(&t.bias);
        }
        Self::new(values)
    }
}

impl AsRef<[f32]> for ParamVector {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

/// Weights and bias of one parametric layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTensors {
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Euclidean distance between two parameter vectors, accumulated in `f64`.
pub fn l2_distance(a: &ParamVector, b: &ParamVector) -> Result<f64, NnError> {
    if a.len() != b.len() {
        return Err(NnError::ParamCount {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(a
        .0
        .iter()
        .zip(&b.0)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt())
}
