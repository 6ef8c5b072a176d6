//! Architecture descriptors and the resolved parameter layout.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::NnError;

/// Height, width and channel count of an activation volume (NHWC order).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape3 {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub const fn flat(len: usize) -> Self {
        Self::new(1, 1, len)
    }

    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// One entry of the layer sequence.
///
/// Convolutions use valid padding. A dense layer consumes its input volume in
/// flattened NHWC order, so `Flatten` only changes the reported shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Dense {
        width: usize,
    },
    Conv {
        kernel: usize,
        channels: usize,
        stride: usize,
    },
    Relu,
    Flatten,
}

/// Network architecture: input volume, layer sequence and class count.
///
/// The last layer's output is the logit vector; softmax is applied by the loss.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: Shape3,
    pub layers: Vec<Layer>,
    pub classes: usize,
}

/// A layer with its shapes and its slice of the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub layer: Layer,
    pub input: Shape3,
    pub output: Shape3,
    pub weight_offset: usize,
    pub weight_len: usize,
    pub bias_offset: usize,
    pub bias_len: usize,
}

impl LayerLayout {
    pub fn has_params(&self) -> bool {
        self.weight_len + self.bias_len > 0
    }

    /// Number of inputs feeding each output unit.
    pub fn fan_in(&self) -> usize {
        match self.layer {
            Layer::Dense { .. } => self.input.len(),
            Layer::Conv { kernel, .. } => kernel * kernel * self.input.channels,
            Layer::Relu | Layer::Flatten => 0,
        }
    }
}

/// Resolved layout of a validated [`ModelSpec`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub layers: Vec<LayerLayout>,
    pub param_count: usize,
    pub input: Shape3,
    pub classes: usize,
}

impl Layout {
    pub fn input_len(&self) -> usize {
        self.input.len()
    }

    /// Layers that own parameters, in parameter-vector order.
    pub fn tensors(&self) -> impl Iterator<Item = &LayerLayout> {
        self.layers.iter().filter(|l| l.has_params())
    }
}

impl ModelSpec {
    /// Builds a spec and checks that it resolves.
    pub fn new(input: Shape3, layers: Vec<Layer>, classes: usize) -> Result<Self, NnError> {
        let spec = Self {
            input,
            layers,
            classes,
        };
        spec.layout()?;
        Ok(spec)
    }

    /// Two strided convolutions followed by a hidden dense layer.
    pub fn small_cnn(input: Shape3, classes: usize) -> Result<Self, NnError> {
        Self::new(
            input,
            vec![
                Layer::Conv {
                    kernel: 3,
                    channels: 8,
                    stride: 2,
                },
                Layer::Relu,
                Layer::Conv {
                    kernel: 3,
                    channels: 16,
                    stride: 2,
                },
                Layer::Relu,
                Layer::Flatten,
                Layer::Dense { width: 64 },
                Layer::Relu,
                Layer::Dense { width: classes },
            ],
            classes,
        )
    }

    /// Fully connected ReLU network with the given hidden widths.
    pub fn mlp(input: Shape3, hidden: &[usize], classes: usize) -> Result<Self, NnError> {
        let mut layers = vec![Layer::Flatten];
        for &width in hidden {
            layers.push(Layer::Dense { width });
            layers.push(Layer::Relu);
        }
        layers.push(Layer::Dense { width: classes });
        Self::new(input, layers, classes)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        self.layout().map(|_| ())
    }

    pub fn param_count(&self) -> Result<usize, NnError> {
        Ok(self.layout()?.param_count)
    }

    pub fn layout(&self) -> Result<Layout, NnError> {
        if self.input.is_empty() {
            return Err(NnError::InvalidSpec("input volume is empty".into()));
        }
        if self.classes < 2 {
            return Err(NnError::InvalidSpec(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        let mut shape = self.input;
        let mut offset = 0;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (index, &layer) in self.layers.iter().enumerate() {
            let (output, weight_len, bias_len) = match layer {
                Layer::Dense { width } => {
                    if width == 0 {
                        return Err(NnError::InvalidSpec(format!(
                            "layer {index}: dense width must be positive"
                        )));
                    }
                    (Shape3::flat(width), width * shape.len(), width)
                }
                Layer::Conv {
                    kernel,
                    channels,
                    stride,
                } => {
                    if kernel == 0 || channels == 0 || stride == 0 {
                        return Err(NnError::InvalidSpec(format!(
                            "layer {index}: conv kernel, channels and stride must be positive"
                        )));
                    }
                    if shape.height < kernel || shape.width < kernel {
                        return Err(NnError::InvalidSpec(format!(
                            "layer {index}: {kernel}x{kernel} kernel does not fit input {shape}"
                        )));
                    }
                    let out = Shape3::new(
                        (shape.height - kernel) / stride + 1,
                        (shape.width - kernel) / stride + 1,
                        channels,
                    );
                    (out, channels * kernel * kernel * shape.channels, channels)
                }
                Layer::Relu => (shape, 0, 0),
                Layer::Flatten => (Shape3::flat(shape.len()), 0, 0),
            };
            layers.push(LayerLayout {
                layer,
                input: shape,
                output,
                weight_offset: offset,
                weight_len,
                bias_offset: offset + weight_len,
                bias_len,
            });
            offset += weight_len + bias_len;
            shape = output;
        }
        if offset == 0 {
            return Err(NnError::InvalidSpec("network has no parameters".into()));
        }
        if shape.len() != self.classes {
            return Err(NnError::InvalidSpec(format!(
                "output has {} units but the spec declares {} classes",
                shape.len(),
                self.classes
            )));
        }
        Ok(Layout {
            layers,
            param_count: offset,
            input: self.input,
            classes: self.classes,
        })
    }

    /// SHA-256 over the canonical JSON encoding of the spec.
    pub fn digest(&self) -> [u8; 32] {
        let canonical = serde_json::to_vec(self).expect("model spec serializes");
        Sha256::digest(&canonical).into()
    }
}
