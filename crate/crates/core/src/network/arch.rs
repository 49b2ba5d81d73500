use serde::{Deserialize, Serialize};

use super::{ActivationKind, NetworkError};
use crate::tensor::{Shape3, TensorError};

/// One convolution layer: square kernels, symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub activation: ActivationKind,
}

impl ConvSpec {
    /// Output extent `floor((n + 2P - K) / S) + 1` along one axis.
    pub fn output_extent(&self, n: usize) -> Option<usize> {
        if self.stride == 0 || self.kernel == 0 {
            return None;
        }
        (n + 2 * self.padding)
            .checked_sub(self.kernel)
            .map(|span| span / self.stride + 1)
    }

    pub fn output_shape(&self, input: Shape3) -> Result<Shape3, TensorError> {
        if self.filters == 0 || self.stride == 0 || self.kernel == 0 {
            return Err(TensorError::EmptyOutput(format!(
                "filters, kernel and stride must be positive ({self:?})"
            )));
        }
        match (
            self.output_extent(input.height),
            self.output_extent(input.width),
        ) {
            (Some(h), Some(w)) => Ok(Shape3::new(h, w, self.filters)),
            _ => Err(TensorError::EmptyOutput(format!(
                "kernel {} with padding {} does not fit a {}x{} input",
                self.kernel, self.padding, input.height, input.width
            ))),
        }
    }

    /// `(filters, in_channels, K, K)`.
    pub fn kernel_shape(&self, in_channels: usize) -> [usize; 4] {
        [self.filters, in_channels, self.kernel, self.kernel]
    }

    pub fn fan_in(&self, in_channels: usize) -> usize {
        in_channels * self.kernel * self.kernel
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FcSpec {
    pub classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub name: String,
    pub input: Shape3,
    pub conv_layers: Vec<ConvSpec>,
    pub fc: FcSpec,
    pub loss: LossKind,
}

impl Architecture {
    pub fn new(
        name: impl Into<String>,
        input: Shape3,
        conv_layers: Vec<ConvSpec>,
        fc: FcSpec,
    ) -> Result<Self, NetworkError> {
        let arch = Self {
            name: name.into(),
            input,
            conv_layers,
            fc,
            loss: LossKind::CrossEntropy,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.input.is_empty() {
            return Err(NetworkError::InvalidArchitecture(format!(
                "input shape {} has a zero dimension",
                self.input
            )));
        }
        if self.fc.classes < 2 {
            return Err(NetworkError::InvalidArchitecture(format!(
                "the classifier needs at least 2 classes, got {}",
                self.fc.classes
            )));
        }
        let mut shape = self.input;
        for (i, spec) in self.conv_layers.iter().enumerate() {
            if let ActivationKind::LeakyRelu(a) = spec.activation {
                ActivationKind::leaky_relu(a)?;
            }
            shape = spec.output_shape(shape).map_err(|e| {
                NetworkError::InvalidArchitecture(format!("conv layer {}: {e}", i + 1))
            })?;
        }
        Ok(())
    }

    /// Input shape of every conv layer followed by the last layer's output
    /// shape; `len = conv_layers.len() + 1`.
    pub fn feature_shapes(&self) -> Vec<Shape3> {
        let mut shapes = Vec::with_capacity(self.conv_layers.len() + 1);
        let mut shape = self.input;
        shapes.push(shape);
        for spec in &self.conv_layers {
            shape = spec
                .output_shape(shape)
                .expect("architecture was validated");
            shapes.push(shape);
        }
        shapes
    }

    /// Shape feeding the classifier.
    pub fn fc_input_shape(&self) -> Shape3 {
        *self.feature_shapes().last().unwrap()
    }

    /// Number of scalars entering the classifier.
    pub fn fc_inputs(&self) -> usize {
        self.fc_input_shape().len()
    }

    /// Copy with every conv layer switched to `kind`.
    pub fn with_activation(&self, kind: ActivationKind) -> Self {
        let mut out = self.clone();
        for spec in &mut out.conv_layers {
            spec.activation = kind;
        }
        out
    }

    pub fn with_input(&self, input: Shape3) -> Result<Self, NetworkError> {
        let mut out = self.clone();
        out.input = input;
        out.validate()?;
        Ok(out)
    }

    pub fn with_classes(&self, classes: usize) -> Result<Self, NetworkError> {
        let mut out = self.clone();
        out.fc.classes = classes;
        out.validate()?;
        Ok(out)
    }
}
