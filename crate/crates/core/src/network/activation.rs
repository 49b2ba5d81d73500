use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::NetworkError;
use crate::tensor::Tensor;

/// Elementwise nonlinearity applied after a convolution.
///
/// Every kind supports computing its derivative from its output alone, which
/// is what lets gradients be pushed through a layer whose pre-activation is
/// unknown. All kinds except `Relu` are also invertible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActivationKind {
    Sigmoid,
    Tanh,
    Arctan,
    Softplus,
    Relu,
    LeakyRelu(f64),
}

impl ActivationKind {
    pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

    pub fn leaky_relu(alpha: f64) -> Result<Self, NetworkError> {
        if alpha > 0.0 && alpha < 1.0 {
            Ok(Self::LeakyRelu(alpha))
        } else {
            Err(NetworkError::InvalidActivation(format!(
                "leaky_relu slope must lie in (0, 1), got {alpha}"
            )))
        }
    }

    pub fn is_invertible(&self) -> bool {
        !matches!(self, Self::Relu)
    }

    /// All kinds, with the default leaky slope.
    pub fn all() -> [ActivationKind; 6] {
        [
            Self::Relu,
            Self::Sigmoid,
            Self::Tanh,
            Self::Arctan,
            Self::Softplus,
            Self::LeakyRelu(Self::DEFAULT_LEAKY_SLOPE),
        ]
    }

    pub fn apply(&self, z: f64) -> f64 {
        match *self {
            Self::Sigmoid => {
                if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                }
            }
            Self::Tanh => z.tanh(),
            Self::Arctan => z.atan(),
            // log(1 + e^z) without overflow
            Self::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
            Self::Relu => z.max(0.0),
            Self::LeakyRelu(a) => {
                if z < 0.0 {
                    a * z
                } else {
                    z
                }
            }
        }
    }

    /// Derivative at the pre-activation `z` (victim side, where `z` is known).
    pub fn derivative(&self, z: f64) -> f64 {
        match *self {
            Self::Sigmoid => {
                let s = self.apply(z);
                s * (1.0 - s)
            }
            Self::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Self::Arctan => 1.0 / (1.0 + z * z),
            Self::Softplus => Self::Sigmoid.apply(z),
            Self::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::LeakyRelu(a) => {
                if z < 0.0 {
                    a
                } else {
                    1.0
                }
            }
        }
    }

    /// Derivative with respect to the pre-activation, expressed through the
    /// output `x = A(z)` only.
    pub fn derivative_from_output(&self, x: f64) -> Result<f64, NetworkError> {
        self.check_range(x)?;
        Ok(match *self {
            Self::Sigmoid => x * (1.0 - x),
            Self::Tanh => 1.0 - x * x,
            Self::Arctan => {
                let t = x.tan();
                1.0 / (1.0 + t * t)
            }
            // sigma(z) with z = softplus^-1(x)
            Self::Softplus => -(-x).exp_m1(),
            Self::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::LeakyRelu(a) => {
                if x < 0.0 {
                    a
                } else {
                    1.0
                }
            }
        })
    }

    pub fn inverse(&self, x: f64) -> Result<f64, NetworkError> {
        if !self.is_invertible() {
            return Err(NetworkError::NotInvertible(*self));
        }
        self.check_range(x)?;
        Ok(match *self {
            Self::Sigmoid => (x / (1.0 - x)).ln(),
            Self::Tanh => x.atanh(),
            Self::Arctan => x.tan(),
            // log(e^x - 1) = x + log(1 - e^-x)
            Self::Softplus => x + (-(-x).exp_m1()).ln(),
            Self::LeakyRelu(a) => {
                if x < 0.0 {
                    x / a
                } else {
                    x
                }
            }
            Self::Relu => unreachable!(),
        })
    }

    fn check_range(&self, x: f64) -> Result<(), NetworkError> {
        let ok = match self {
            Self::Sigmoid => x > 0.0 && x < 1.0,
            Self::Tanh => x > -1.0 && x < 1.0,
            Self::Arctan => x > -FRAC_PI_2 && x < FRAC_PI_2,
            Self::Softplus => x > 0.0,
            Self::Relu | Self::LeakyRelu(_) => x.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(NetworkError::Domain {
                kind: *self,
                value: x,
            })
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Sigmoid => f.write_str("sigmoid"),
            Self::Tanh => f.write_str("tanh"),
            Self::Arctan => f.write_str("arctan"),
            Self::Softplus => f.write_str("softplus"),
            Self::Relu => f.write_str("relu"),
            Self::LeakyRelu(a) => write!(f, "leaky_relu({a})"),
        }
    }
}

impl FromStr for ActivationKind {
    type Err = NetworkError;

    /// Accepts `sigmoid`, `tanh`, `arctan`, `softplus`, `relu`, `leaky_relu`
    /// (slope 0.2) and `leaky_relu(<slope>)`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s {
            "sigmoid" => return Ok(Self::Sigmoid),
            "tanh" => return Ok(Self::Tanh),
            "arctan" => return Ok(Self::Arctan),
            "softplus" => return Ok(Self::Softplus),
            "relu" => return Ok(Self::Relu),
            "leaky_relu" => return Ok(Self::LeakyRelu(Self::DEFAULT_LEAKY_SLOPE)),
            _ => {}
        }
        if let Some(arg) = s
            .strip_prefix("leaky_relu(")
            .and_then(|r| r.strip_suffix(')'))
        {
            let alpha: f64 = arg.trim().parse().map_err(|_| {
                NetworkError::InvalidActivation(format!("bad leaky_relu slope in {s:?}"))
            })?;
            return Self::leaky_relu(alpha);
        }
        Err(NetworkError::InvalidActivation(format!(
            "unsupported activation {s:?}"
        )))
    }
}

impl Serialize for ActivationKind {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ActivationKind {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn activation_forward(kind: ActivationKind, z: &Tensor) -> Result<Tensor, NetworkError> {
    Ok(z.try_map(|v| kind.apply(v))?)
}

pub fn activation_derivative_from_output(
    kind: ActivationKind,
    output: &Tensor,
) -> Result<Tensor, NetworkError> {
    let data = output
        .data()
        .iter()
        .map(|&x| kind.derivative_from_output(x))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Tensor::new(output.shape().to_vec(), data)?)
}

pub fn activation_inverse(kind: ActivationKind, output: &Tensor) -> Result<Tensor, NetworkError> {
    let data = output
        .data()
        .iter()
        .map(|&x| kind.inverse(x))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Tensor::new(output.shape().to_vec(), data)?)
}
