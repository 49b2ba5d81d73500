use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::AttackError;
use crate::network::{Architecture, ConvSpec};
use crate::tensor::Shape3;

/// How the input of one conv layer is recovered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerStrategy {
    /// Solve the weight-gradient system built from `dZ`.
    GradientConstraints,
    /// Invert the activation, then solve the forward convolution system.
    ParameterConstraints,
    /// Let [`choose_strategy`] decide.
    Auto,
}

impl fmt::Display for LayerStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GradientConstraints => "g",
            Self::ParameterConstraints => "p",
            Self::Auto => "auto",
        })
    }
}

impl FromStr for LayerStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "g" | "gradient" => Ok(Self::GradientConstraints),
            "p" | "parameter" => Ok(Self::ParameterConstraints),
            "auto" => Ok(Self::Auto),
            other => Err(format!(
                "unknown layer strategy {other:?} (expected g, p or auto)"
            )),
        }
    }
}

/// Number of kernel taps that read input coordinates of stride phase `r`
/// (`i mod S = r`) and the number of such coordinates.
fn phase_counts(spec: &ConvSpec, extent: usize, r: usize) -> (usize, usize) {
    let s = spec.stride;
    let taps = (0..spec.kernel)
        .filter(|&k| (k + s * spec.padding - spec.padding) % s == r)
        .count();
    let pixels = (0..extent).filter(|i| i % s == r).count();
    (taps, pixels)
}

/// Whether every input pixel is read by at least one output position.
/// Pixels no kernel tap ever reaches cannot appear in any constraint.
fn covers(spec: &ConvSpec, extent: usize) -> bool {
    let Some(out) = spec.output_extent(extent) else {
        return false;
    };
    let mut seen = vec![false; extent];
    for o in 0..out {
        for k in 0..spec.kernel {
            if let Some(i) = (o * spec.stride + k).checked_sub(spec.padding) {
                if i < extent {
                    seen[i] = true;
                }
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Whether the weight-gradient system of one input channel has at least as
/// many equations as unknowns. With stride `S` the system splits by the
/// phase `(row mod S, col mod S)` of the pixels, and each phase has to be
/// covered on its own: `taps_y * taps_x * filters >= pixels_y * pixels_x`.
/// For `S = 1` this is `K^2 * filters >= H * W`.
pub(crate) fn gradient_equations_suffice(spec: &ConvSpec, input: Shape3) -> bool {
    (0..spec.stride).all(|ry| {
        let (ty, ny) = phase_counts(spec, input.height, ry);
        (0..spec.stride).all(|rx| {
            let (tx, nx) = phase_counts(spec, input.width, rx);
            ty * tx * spec.filters >= ny * nx
        })
    })
}

/// Picks the recovery method for one layer.
///
/// The weight-gradient system of one input channel has `K^2 * filters`
/// equations in `H * W` unknowns, so gradient constraints are chosen when
/// `K^2 * filters >= H * W` (per stride phase, see
/// [`gradient_equations_suffice`]) and every pixel is covered by some
/// receptive field. Otherwise the layer falls back to parameter
/// constraints, which need an invertible activation.
pub fn choose_strategy(
    layer: usize,
    input: Shape3,
    spec: &ConvSpec,
) -> Result<LayerStrategy, AttackError> {
    let k2f = spec.kernel * spec.kernel * spec.filters;
    if gradient_equations_suffice(spec, input)
        && covers(spec, input.height)
        && covers(spec, input.width)
    {
        return Ok(LayerStrategy::GradientConstraints);
    }
    if spec.activation.is_invertible() {
        Ok(LayerStrategy::ParameterConstraints)
    } else {
        Err(AttackError::Strategy {
            layer,
            reason: format!(
                "too few gradient equations for a {}x{} input (K^2*filters = {k2f}) and {} is not invertible",
                input.height, input.width, spec.activation
            ),
        })
    }
}

/// Expands a per-layer request into concrete strategies. An empty request
/// means `auto` everywhere; a single entry applies to all layers.
pub fn resolve_strategies(
    arch: &Architecture,
    requested: &[LayerStrategy],
) -> Result<Vec<LayerStrategy>, AttackError> {
    let n = arch.conv_layers.len();
    let expanded: Vec<LayerStrategy> = match requested.len() {
        0 => vec![LayerStrategy::Auto; n],
        1 => vec![requested[0]; n],
        m if m == n => requested.to_vec(),
        m => {
            return Err(AttackError::Strategy {
                layer: 0,
                reason: format!("{m} strategies given for {n} conv layers"),
            })
        }
    };
    let shapes = arch.feature_shapes();
    expanded
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let spec = &arch.conv_layers[i];
            match s {
                LayerStrategy::Auto => choose_strategy(i + 1, shapes[i], spec),
                LayerStrategy::ParameterConstraints if !spec.activation.is_invertible() => {
                    Err(AttackError::Strategy {
                        layer: i + 1,
                        reason: format!(
                            "parameter constraints need an invertible activation, got {}",
                            spec.activation
                        ),
                    })
                }
                other => Ok(other),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ActivationKind;

    fn spec(filters: usize, kernel: usize, activation: ActivationKind) -> ConvSpec {
        ConvSpec {
            filters,
            kernel,
            stride: 1,
            padding: 0,
            activation,
        }
    }

    #[test]
    fn filter_count_rule() {
        let s = choose_strategy(1, Shape3::new(4, 4, 3), &spec(4, 2, ActivationKind::Relu));
        assert_eq!(s.unwrap(), LayerStrategy::GradientConstraints);
        let s = choose_strategy(1, Shape3::new(64, 64, 3), &spec(6, 5, ActivationKind::Tanh));
        assert_eq!(s.unwrap(), LayerStrategy::ParameterConstraints);
        let e = choose_strategy(2, Shape3::new(64, 64, 3), &spec(6, 5, ActivationKind::Relu));
        assert!(matches!(e, Err(AttackError::Strategy { layer: 2, .. })));
    }

    #[test]
    fn uncovered_pixels_force_parameters() {
        // stride 3 with a 2-tap kernel skips every third pixel
        let s = ConvSpec {
            stride: 3,
            ..spec(64, 2, ActivationKind::Tanh)
        };
        assert_eq!(
            choose_strategy(1, Shape3::new(6, 6, 1), &s).unwrap(),
            LayerStrategy::ParameterConstraints
        );
    }

    #[test]
    fn strided_phases_need_their_own_equations() {
        // 16x16 input, K=3, S=2, P=1: even rows are read by one tap only, so
        // the (even, even) phase has 36 equations for 64 pixels
        let s = ConvSpec {
            stride: 2,
            padding: 1,
            ..spec(36, 3, ActivationKind::Tanh)
        };
        let input = Shape3::new(16, 16, 2);
        // 9 * 36 = 324 equations against 256 pixels, yet the phases decouple
        assert!(!gradient_equations_suffice(&s, input));
        let wide = ConvSpec { filters: 64, ..s };
        assert!(gradient_equations_suffice(&wide, input));
    }

    #[test]
    fn parse() {
        assert_eq!(
            "g".parse::<LayerStrategy>().unwrap(),
            LayerStrategy::GradientConstraints
        );
        assert_eq!(
            "p".parse::<LayerStrategy>().unwrap(),
            LayerStrategy::ParameterConstraints
        );
        assert!("x".parse::<LayerStrategy>().is_err());
    }
}
