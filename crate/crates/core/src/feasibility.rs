//! Constraint counting and rank analysis: how many equations each layer
//! offers against how many input values have to be recovered.

use serde::Serialize;

use crate::attack::{attack_single, gradient_equations_suffice, AttackError, AttackOptions};
use crate::network::{Architecture, ConvSpec, GradientCapture, Parameters};
use crate::tensor::{
    build_conv_operator, build_weight_gradient_operator, stack_operators, LeastSquares,
    LinearOperator, Shape3, Tensor, TensorError,
};

/// Weight constraints of one layer: `(short form, full count)`.
///
/// The short form is `((H + 2P - K) / S + 1) * filters`, one output row per
/// filter. The full count is every output element, and zero when the
/// activation cannot be inverted (the pre-activation is then unknown).
pub fn count_weight_constraints(spec: &ConvSpec, input: Shape3) -> (usize, usize) {
    let rows = spec.output_extent(input.height).unwrap_or(0);
    let cols = spec.output_extent(input.width).unwrap_or(0);
    let short = rows * spec.filters;
    let full = if spec.activation.is_invertible() {
        rows * cols * spec.filters
    } else {
        0
    };
    (short, full)
}

/// Gradient constraints of one layer: `(K^2 * filters, K^2 * filters * C)`.
pub fn count_gradient_constraints(spec: &ConvSpec, in_channels: usize) -> (usize, usize) {
    let short = spec.kernel * spec.kernel * spec.filters;
    (short, short * in_channels)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerConstraintReport {
    /// 1-based conv layer index.
    pub layer_index: usize,
    pub input_shape: Shape3,
    pub unknowns: usize,
    pub weight_constraints_short: usize,
    pub gradient_constraints_short: usize,
    pub weight_constraints_full: usize,
    pub gradient_constraints_full: usize,
    /// The gradient system of each input channel has at least as many
    /// equations as unknowns: `K^2 * filters >= H * W`, checked per stride
    /// phase.
    pub gradient_constraints_sufficient: bool,
    /// Rank of the stacked forward and weight-gradient systems.
    pub empirical_rank: Option<usize>,
    /// Rank of the weight-gradient system alone.
    pub gradient_rank: Option<usize>,
    pub feasible_for_attack: bool,
}

impl LayerConstraintReport {
    pub fn full_rank(&self) -> Option<bool> {
        self.empirical_rank.map(|r| r == self.unknowns)
    }

    pub fn gradient_full_rank(&self) -> Option<bool> {
        self.gradient_rank.map(|r| r == self.unknowns)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FcReport {
    pub inputs: usize,
    pub classes: usize,
    /// Some bias gradient is nonzero, so the classifier input can be read
    /// off the weight gradient. Known only with a capture.
    pub recoverable: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeasibilityReport {
    pub architecture: String,
    pub layers: Vec<LayerConstraintReport>,
    pub fc: FcReport,
    /// Every layer has enough constraints (and full empirical rank when
    /// measured) and the classifier input is recoverable.
    pub feasible: bool,
    /// Every layer's weight-gradient system alone is full rank; decides
    /// whether the gradient-only attack can succeed. Known only with a
    /// single-example capture.
    pub gradient_path_full_rank: Option<bool>,
    /// First blocking layer met while walking from the classifier down.
    pub blocking_layer: Option<usize>,
    pub narrative: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RankCheck {
    pub stacked_rank: usize,
    pub gradient_rank: Option<usize>,
    pub unknowns: usize,
}

fn rank_of(op: &LinearOperator, rank_tol: f64) -> Result<usize, TensorError> {
    if op.rows() == 0 {
        return Ok(0);
    }
    Ok(LeastSquares::new(op, rank_tol)?.numerical_rank())
}

/// Output gradients of every conv layer as recovered by the gradient-only
/// attack (`None` below the point where the chain stopped), plus that
/// attack's per-layer gradient ranks.
type Recovered = (Vec<Option<Tensor>>, Vec<Option<usize>>);

fn recover_output_gradients(
    arch: &Architecture,
    params: &Parameters,
    capture: &GradientCapture,
    rank_tol: f64,
) -> Result<Recovered, AttackError> {
    let opts = AttackOptions {
        rank_tol,
        ..AttackOptions::default()
    };
    let n = arch.conv_layers.len();
    let mut grad_z = vec![None; n];
    let mut ranks = vec![None; n];
    match attack_single(arch, params, capture, &opts) {
        Ok(result) => {
            let rec = &result.reconstructions[0];
            // traces of a stopped chain cover the top layers only
            let offset = n - rec.trace.len();
            for (k, (t, s)) in rec.trace.iter().zip(&rec.layers).enumerate() {
                grad_z[offset + k] = t.grad_z.clone();
                ranks[offset + k] = Some(s.numerical_rank);
            }
        }
        Err(AttackError::Unrecoverable { .. }) => {}
        Err(e) => return Err(e),
    }
    Ok((grad_z, ranks))
}

/// Adding rows never lowers the rank, so a full-rank subsystem settles the
/// stacked rank without building the (much larger) joint system.
fn stacked_rank(
    arch: &Architecture,
    params: &Parameters,
    layer: usize,
    grad_z: Option<&Tensor>,
    gradient_rank: Option<usize>,
    rank_tol: f64,
) -> Result<usize, TensorError> {
    let spec = &arch.conv_layers[layer];
    let input = arch.feature_shapes()[layer];
    let unknowns = input.len();
    if grad_z.is_some() && gradient_rank == Some(unknowns) {
        return Ok(unknowns);
    }
    let forward = if spec.activation.is_invertible() {
        let op = build_conv_operator(input, spec, &params.conv[layer].kernels)?;
        let r = rank_of(&op, rank_tol)?;
        if r == unknowns {
            return Ok(r);
        }
        Some((op, r))
    } else {
        None
    };
    let Some(gz) = grad_z else {
        return Ok(forward.map_or(0, |(_, r)| r));
    };
    let gradient = build_weight_gradient_operator(gz, input, spec)?;
    let Some((forward, _)) = forward else {
        return rank_of(&gradient, rank_tol);
    };
    let zf = vec![0.0; forward.rows()];
    let zg = vec![0.0; gradient.rows()];
    let (stacked, _) = stack_operators(&[&forward, &gradient], &[&zf, &zg])?;
    rank_of(&stacked, rank_tol)
}

/// Rank of the stacked forward and weight-gradient systems of conv layer
/// `layer_index` (1-based). The output gradient is the one an attacker
/// recovers from `capture`, and forward rows are included only when the
/// activation is invertible.
pub fn empirical_rank_check(
    arch: &Architecture,
    params: &Parameters,
    capture: &GradientCapture,
    layer_index: usize,
    rank_tol: f64,
) -> Result<RankCheck, AttackError> {
    if layer_index == 0 || layer_index > arch.conv_layers.len() {
        return Err(AttackError::Strategy {
            layer: layer_index,
            reason: format!("no such conv layer (have {})", arch.conv_layers.len()),
        });
    }
    let (grad_z, ranks) = recover_output_gradients(arch, params, capture, rank_tol)?;
    let i = layer_index - 1;
    Ok(RankCheck {
        stacked_rank: stacked_rank(arch, params, i, grad_z[i].as_ref(), ranks[i], rank_tol)?,
        gradient_rank: ranks[i],
        unknowns: arch.feature_shapes()[i].len(),
    })
}

/// Counts constraints per layer and, given parameters and a single-example
/// capture, measures the ranks of the systems an attacker would solve.
pub fn analyze(
    arch: &Architecture,
    observed: Option<(&Parameters, &GradientCapture)>,
    rank_tol: f64,
) -> Result<FeasibilityReport, AttackError> {
    arch.validate()?;
    let shapes = arch.feature_shapes();
    let n = arch.conv_layers.len();
    let mut recovered: Option<Recovered> = None;
    let mut fc_recoverable = None;
    let mut notes = Vec::new();
    if let Some((params, capture)) = observed {
        params.validate(arch)?;
        capture.validate(arch)?;
        fc_recoverable = Some(capture.fc.grad_b.data().iter().any(|&g| g != 0.0));
        if capture.batch_size == 1 {
            recovered = Some(recover_output_gradients(arch, params, capture, rank_tol)?);
        } else {
            notes.push(format!(
                "capture averages {} examples; gradient ranks are not measured",
                capture.batch_size
            ));
        }
    }

    let mut layers = Vec::with_capacity(n);
    for (i, spec) in arch.conv_layers.iter().enumerate() {
        let input = shapes[i];
        let (w_short, w_full) = count_weight_constraints(spec, input);
        let (g_short, g_full) = count_gradient_constraints(spec, input.channels);
        let unknowns = input.len();
        let (empirical_rank, gradient_rank) = match (observed, &recovered) {
            (Some((params, _)), Some((gz, ranks))) => (
                Some(stacked_rank(
                    arch,
                    params,
                    i,
                    gz[i].as_ref(),
                    ranks[i],
                    rank_tol,
                )?),
                ranks[i],
            ),
            (Some((params, _)), None) => (
                Some(stacked_rank(arch, params, i, None, None, rank_tol)?),
                None,
            ),
            _ => (None, None),
        };
        layers.push(LayerConstraintReport {
            layer_index: i + 1,
            input_shape: input,
            unknowns,
            weight_constraints_short: w_short,
            gradient_constraints_short: g_short,
            weight_constraints_full: w_full,
            gradient_constraints_full: g_full,
            gradient_constraints_sufficient: gradient_equations_suffice(spec, input),
            empirical_rank,
            gradient_rank,
            feasible_for_attack: unknowns <= w_full + g_full,
        });
    }

    let blocking = layers
        .iter()
        .rev()
        .find(|l| !l.feasible_for_attack || l.full_rank() == Some(false));
    let fc_ok = fc_recoverable != Some(false);
    let feasible = blocking.is_none() && fc_ok;
    let gradient_path_full_rank = recovered
        .as_ref()
        .map(|_| fc_ok && layers.iter().all(|l| l.gradient_full_rank() == Some(true)));
    let mut narrative = match (blocking, fc_ok) {
        (_, false) => {
            "every classifier bias gradient is zero; nothing can be recovered".to_string()
        }
        (None, true) if n == 0 => {
            "classifier input is read directly off the weight gradient".to_string()
        }
        (None, true) => "every layer has enough independent constraints".to_string(),
        (Some(l), true) => {
            if !l.feasible_for_attack {
                format!(
                    "conv layer {} blocks recovery: {} unknowns but only {} weight and {} gradient constraints",
                    l.layer_index, l.unknowns, l.weight_constraints_full, l.gradient_constraints_full
                )
            } else {
                format!(
                    "conv layer {} blocks recovery: rank {} of {} unknowns",
                    l.layer_index,
                    l.empirical_rank.unwrap_or(0),
                    l.unknowns
                )
            }
        }
    };
    for note in notes {
        narrative.push_str("; ");
        narrative.push_str(&note);
    }
    Ok(FeasibilityReport {
        architecture: arch.name.clone(),
        fc: FcReport {
            inputs: arch.fc_inputs(),
            classes: arch.fc.classes,
            recoverable: fc_recoverable,
        },
        blocking_layer: blocking.map(|l| l.layer_index),
        layers,
        feasible,
        gradient_path_full_rank,
        narrative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ActivationKind, FcSpec};

    fn spec(
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        act: ActivationKind,
    ) -> ConvSpec {
        ConvSpec {
            filters,
            kernel,
            stride,
            padding,
            activation: act,
        }
    }

    #[test]
    fn hand_counts() {
        let s = spec(12, 5, 1, 0, ActivationKind::Sigmoid);
        assert_eq!(count_weight_constraints(&s, Shape3::new(32, 32, 3)).0, 336);
        assert_eq!(count_gradient_constraints(&s, 3).0, 300);
        let r = spec(12, 5, 1, 0, ActivationKind::Relu);
        assert_eq!(count_weight_constraints(&r, Shape3::new(32, 32, 3)).1, 0);
        let one = spec(1, 4, 1, 0, ActivationKind::Tanh);
        assert_eq!(count_weight_constraints(&one, Shape3::new(4, 4, 2)).1, 1);
        assert_eq!(
            count_gradient_constraints(&spec(1, 1, 1, 0, ActivationKind::Tanh), 1),
            (1, 1)
        );
        assert_eq!(
            count_gradient_constraints(&spec(4, 3, 1, 0, ActivationKind::Tanh), 3),
            (36, 108)
        );
    }

    #[test]
    fn single_filter_layer_is_infeasible() {
        let arch = Architecture::new(
            "thin",
            Shape3::new(32, 32, 3),
            vec![spec(1, 1, 1, 0, ActivationKind::Relu)],
            FcSpec { classes: 10 },
        )
        .unwrap();
        let report = analyze(&arch, None, 1e-10).unwrap();
        assert!(!report.feasible);
        assert_eq!(report.blocking_layer, Some(1));
    }

    #[test]
    fn classifier_only() {
        let arch =
            Architecture::new("fc", Shape3::new(2, 2, 1), vec![], FcSpec { classes: 3 }).unwrap();
        let report = analyze(&arch, None, 1e-10).unwrap();
        assert!(report.feasible);
        assert!(report.layers.is_empty());
        assert_eq!(report.fc.inputs, 4);
    }
}
