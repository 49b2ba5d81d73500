use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Architecture, NetworkError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `(filters, in_channels, K, K)`
    pub kernels: Tensor,
    /// `(filters)`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcParams {
    /// `(classes, inputs)`
    pub weight: Tensor,
    /// `(classes)`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub conv: Vec<ConvParams>,
    pub fc: FcParams,
}

impl Parameters {
    pub fn zeros(arch: &Architecture) -> Self {
        let shapes = arch.feature_shapes();
        let conv = arch
            .conv_layers
            .iter()
            .zip(&shapes)
            .map(|(spec, input)| ConvParams {
                kernels: Tensor::zeros(&spec.kernel_shape(input.channels)),
                bias: Tensor::zeros(&[spec.filters]),
            })
            .collect();
        Self {
            conv,
            fc: FcParams {
                weight: Tensor::zeros(&[arch.fc.classes, arch.fc_inputs()]),
                bias: Tensor::zeros(&[arch.fc.classes]),
            },
        }
    }

    pub fn validate(&self, arch: &Architecture) -> Result<(), NetworkError> {
        let expected = Self::zeros(arch);
        if self.conv.len() != expected.conv.len() {
            return Err(NetworkError::ParameterMismatch(format!(
                "{} conv layers in parameters, {} in architecture",
                self.conv.len(),
                expected.conv.len()
            )));
        }
        let pairs = self
            .tensors()
            .into_iter()
            .zip(expected.tensors())
            .enumerate();
        for (i, (have, want)) in pairs {
            if have.shape() != want.shape() {
                return Err(NetworkError::ParameterMismatch(format!(
                    "tensor {i}: expected shape {:?}, got {:?}",
                    want.shape(),
                    have.shape()
                )));
            }
        }
        Ok(())
    }

    /// Conv kernels and biases layer by layer, then the classifier weight and bias.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::with_capacity(2 * self.conv.len() + 2);
        for layer in &self.conv {
            out.push(&layer.kernels);
            out.push(&layer.bias);
        }
        out.push(&self.fc.weight);
        out.push(&self.fc.bias);
        out
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All scalars in [`Parameters::tensors`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Copy with every scalar replaced from `flat` (same order as [`Parameters::to_flat`]).
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self, NetworkError> {
        if flat.len() != self.count() {
            return Err(NetworkError::ParameterMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.count()
            )));
        }
        let mut rest = flat;
        let mut take = |t: &Tensor| -> Result<Tensor, NetworkError> {
            let (head, tail) = rest.split_at(t.len());
            rest = tail;
            Ok(Tensor::new(t.shape().to_vec(), head.to_vec())?)
        };
        let mut conv = Vec::with_capacity(self.conv.len());
        for layer in &self.conv {
            conv.push(ConvParams {
                kernels: take(&layer.kernels)?,
                bias: take(&layer.bias)?,
            });
        }
        let fc = FcParams {
            weight: take(&self.fc.weight)?,
            bias: take(&self.fc.bias)?,
        };
        Ok(Self { conv, fc })
    }
}

/// Draws every weight and bias of a layer from `U(-r, r)`, `r = 1/sqrt(fan_in)`.
///
/// The stream is a seeded ChaCha8 generator, so the same seed reproduces the
/// same parameters on every platform.
pub fn init_parameters(arch: &Architecture, seed: u64) -> Parameters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
        let r = 1.0 / (fan_in as f64).sqrt();
        (0..n).map(|_| rng.random_range(-r..r)).collect()
    };
    let shapes = arch.feature_shapes();
    let conv = arch
        .conv_layers
        .iter()
        .zip(&shapes)
        .map(|(spec, input)| {
            let shape = spec.kernel_shape(input.channels);
            let fan_in = spec.fan_in(input.channels);
            ConvParams {
                kernels: Tensor::from_parts(
                    shape.to_vec(),
                    uniform(shape.iter().product(), fan_in),
                ),
                bias: Tensor::from_parts(vec![spec.filters], uniform(spec.filters, fan_in)),
            }
        })
        .collect();
    let n = arch.fc_inputs();
    let classes = arch.fc.classes;
    Parameters {
        conv,
        fc: FcParams {
            weight: Tensor::from_parts(vec![classes, n], uniform(classes * n, n)),
            bias: Tensor::from_parts(vec![classes], uniform(classes, n)),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ActivationKind, ConvSpec, FcSpec};
    use crate::tensor::Shape3;

    fn arch() -> Architecture {
        Architecture::new(
            "toy",
            Shape3::new(6, 6, 3),
            vec![ConvSpec {
                filters: 4,
                kernel: 5,
                stride: 1,
                padding: 2,
                activation: ActivationKind::Tanh,
            }],
            FcSpec { classes: 5 },
        )
        .unwrap()
    }

    #[test]
    fn seeded_initialization_is_deterministic() {
        let a = init_parameters(&arch(), 7);
        assert_eq!(a, init_parameters(&arch(), 7));
        assert_ne!(a, init_parameters(&arch(), 8));
    }

    #[test]
    fn bounds_follow_fan_in() {
        let p = init_parameters(&arch(), 1);
        let r = 1.0 / 75f64.sqrt();
        assert!(p.conv[0].kernels.max_abs() < r);
        assert!(p.conv[0].kernels.max_abs() > 0.8 * r);
        let r_fc = 1.0 / (6.0 * 6.0 * 4.0f64).sqrt();
        assert!(p.fc.weight.max_abs() < r_fc);
    }

    #[test]
    fn flat_round_trip() {
        let p = init_parameters(&arch(), 3);
        assert_eq!(p.with_flat(&p.to_flat()).unwrap(), p);
        assert!(p.with_flat(&[0.0]).is_err());
        p.validate(&arch()).unwrap();
    }
}
