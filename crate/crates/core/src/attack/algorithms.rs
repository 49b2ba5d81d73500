use serde::Serialize;

use super::primitives::{
    backprop_activation, conv_input_gradient, conv_weight_system, fc_input_gradient,
    reconstruct_fc_input, solve_conv_input_from_gradients, solve_conv_input_from_weights,
    solve_conv_input_with,
};
use super::strategy::{resolve_strategies, LayerStrategy};
use super::{AttackError, AttackOptions};
use crate::network::{
    activation_inverse, softmax, ActivationKind, Architecture, GradientCapture, Parameters,
};
use crate::tensor::{LeastSquares, LinearOperator, RankMethod, SolveReport, Tensor};

/// Rank diagnostics of one conv-layer solve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSolve {
    /// 1-based conv layer index.
    pub layer: usize,
    pub strategy: LayerStrategy,
    pub numerical_rank: usize,
    pub cols: usize,
    pub residual_norm: f64,
    pub rank_deficient: bool,
    pub rank_method: RankMethod,
}

impl LayerSolve {
    fn new(layer: usize, strategy: LayerStrategy, r: &SolveReport) -> Self {
        Self {
            layer,
            strategy,
            numerical_rank: r.numerical_rank,
            cols: r.cols,
            residual_norm: r.residual_norm,
            rank_deficient: r.rank_deficient,
            rank_method: r.rank_method,
        }
    }
}

/// Intermediate values recovered at one conv layer, all `(channels, rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Recovered layer input.
    pub input: Tensor,
    /// Recovered `dL/dZ`, when the gradient chain was followed.
    pub grad_z: Option<Tensor>,
    /// Recovered `dL/dX` of the layer input, when the gradient chain was followed.
    pub grad_input: Option<Tensor>,
}

/// One recovered example.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// `(height, width, channels)`; zeros when recovery stopped early.
    pub input: Tensor,
    pub succeeded: bool,
    /// Class the example was attributed to: the class with a negative bias
    /// gradient.
    pub label: Option<usize>,
    /// Classifier input read off the fully connected gradients.
    pub fc_input: Tensor,
    pub fc_grad_input: Option<Tensor>,
    /// Classifier row used for the division and the cross-check against the
    /// next usable row.
    pub fc_row: usize,
    pub fc_cross_check: Option<(usize, f64)>,
    /// Per conv layer in ascending order; shorter than the layer count when
    /// recovery stopped early.
    pub layers: Vec<LayerSolve>,
    /// Per conv layer in ascending order, same length as `layers`.
    pub trace: Vec<LayerTrace>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult {
    pub reconstructions: Vec<Reconstruction>,
}

impl ReconstructionResult {
    pub fn inputs(&self) -> Vec<&Tensor> {
        self.reconstructions.iter().map(|r| &r.input).collect()
    }

    pub fn succeeded(&self) -> Vec<bool> {
        self.reconstructions.iter().map(|r| r.succeeded).collect()
    }

    pub fn all_succeeded(&self) -> bool {
        !self.reconstructions.is_empty() && self.reconstructions.iter().all(|r| r.succeeded)
    }

    pub fn inferred_labels(&self) -> Vec<Option<usize>> {
        self.reconstructions.iter().map(|r| r.label).collect()
    }

    pub fn per_layer_rank(&self) -> Vec<&[LayerSolve]> {
        self.reconstructions
            .iter()
            .map(|r| r.layers.as_slice())
            .collect()
    }
}

/// A class whose bias gradient marks it as the label of some batch member.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassCandidate {
    pub class_index: usize,
    pub bias_gradient: f64,
    pub score: f64,
}

/// Classes with `db_c < -b_threshold`, strongest first.
pub fn select_class_candidates(capture: &GradientCapture, b_threshold: f64) -> Vec<ClassCandidate> {
    let mut out: Vec<ClassCandidate> = capture
        .fc
        .grad_b
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &g)| g < -b_threshold)
        .map(|(c, &g)| ClassCandidate {
            class_index: c,
            bias_gradient: g,
            score: g.abs(),
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.class_index.cmp(&b.class_index))
    });
    out
}

fn check_inputs(
    arch: &Architecture,
    params: &Parameters,
    capture: &GradientCapture,
) -> Result<(), AttackError> {
    arch.validate()?;
    params.validate(arch)?;
    capture.validate(arch)?;
    Ok(())
}

/// Zeroes relu outputs that are dead up to solver noise.
fn snap_dead(out: &Tensor, kind: ActivationKind, rel: f64) -> Tensor {
    if kind != ActivationKind::Relu {
        return out.clone();
    }
    let cut = rel * out.max_abs();
    out.try_map(|v| if v.abs() <= cut { 0.0 } else { v })
        .expect("snapping keeps values finite")
}

struct Chain<'a> {
    arch: &'a Architecture,
    params: &'a Parameters,
    capture: &'a GradientCapture,
    opts: &'a AttackOptions,
    /// Prefactorized forward operators, one per conv layer.
    weight_systems: Option<&'a [LeastSquares]>,
}

impl Chain<'_> {
    /// Walks the conv layers from the top down, starting from the classifier
    /// input and (optionally) its gradient.
    fn run(
        &self,
        strategies: &[LayerStrategy],
        fc_input: &Tensor,
        fc_grad: Option<&Tensor>,
        rec: &mut Reconstruction,
    ) {
        let shapes = self.arch.feature_shapes();
        let layers = self.arch.conv_layers.len();
        let top = shapes[layers];
        let mut out = fc_input
            .clone()
            .reshape(&top.chw())
            .expect("classifier input matches the last feature map");
        let mut grad_out = fc_grad.map(|g| g.clone().reshape(&top.chw()).expect("same shape"));
        if layers > 0
            && self.arch.conv_layers[layers - 1].activation == ActivationKind::Relu
            && snap_dead(&out, ActivationKind::Relu, self.opts.relu_snap).max_abs() == 0.0
        {
            rec.diagnostics.push(
                "every classifier input is zero (dead relu units); conv layers cannot be recovered"
                    .into(),
            );
            rec.succeeded = false;
            return;
        }
        let mut solves = Vec::with_capacity(layers);
        let mut traces = Vec::with_capacity(layers);
        for i in (0..layers).rev() {
            let spec = &self.arch.conv_layers[i];
            let p = &self.params.conv[i];
            let strategy = strategies[i];
            let step = || -> Result<(LayerSolve, LayerTrace), AttackError> {
                let out_i = snap_dead(&out, spec.activation, self.opts.relu_snap);
                let grad_z = match &grad_out {
                    Some(g) => Some(backprop_activation(g, &out_i, spec.activation)?),
                    None => None,
                };
                let (x, report) = match strategy {
                    LayerStrategy::GradientConstraints => {
                        let gz = grad_z.as_ref().ok_or_else(|| AttackError::Strategy {
                            layer: i + 1,
                            reason: "gradient constraints need the output gradient".into(),
                        })?;
                        solve_conv_input_from_gradients(
                            &self.capture.conv[i].grad_w,
                            gz,
                            spec,
                            shapes[i],
                            self.opts.rank_tol,
                        )?
                    }
                    LayerStrategy::ParameterConstraints => {
                        let z = activation_inverse(spec.activation, &out_i)?;
                        match self.weight_systems {
                            Some(systems) => {
                                solve_conv_input_with(&systems[i], &p.bias, &z, spec, shapes[i])?
                            }
                            None => solve_conv_input_from_weights(
                                &p.kernels,
                                &p.bias,
                                &z,
                                spec,
                                shapes[i],
                                self.opts.rank_tol,
                            )?,
                        }
                    }
                    LayerStrategy::Auto => unreachable!("strategies are resolved"),
                };
                let grad_input = match &grad_z {
                    Some(gz) => Some(conv_input_gradient(&p.kernels, gz, spec, shapes[i])?),
                    None => None,
                };
                Ok((
                    LayerSolve::new(i + 1, strategy, &report),
                    LayerTrace {
                        input: x,
                        grad_z,
                        grad_input,
                    },
                ))
            };
            match step() {
                Ok((solve, trace)) => {
                    if solve.rank_deficient {
                        rec.succeeded = false;
                        rec.diagnostics.push(format!(
                            "conv layer {}: rank {} of {} unknowns",
                            i + 1,
                            solve.numerical_rank,
                            solve.cols
                        ));
                    }
                    out = trace.input.clone();
                    grad_out = trace.grad_input.clone();
                    solves.push(solve);
                    traces.push(trace);
                }
                Err(e) => {
                    rec.succeeded = false;
                    rec.diagnostics.push(format!("conv layer {}: {e}", i + 1));
                    solves.reverse();
                    traces.reverse();
                    rec.layers = solves;
                    rec.trace = traces;
                    return;
                }
            }
        }
        solves.reverse();
        traces.reverse();
        rec.layers = solves;
        rec.trace = traces;
        rec.input = out.chw_to_hwc().expect("input map is three-dimensional");
    }
}

fn empty_reconstruction(arch: &Architecture, fc_input: Tensor) -> Reconstruction {
    Reconstruction {
        input: Tensor::zeros(&arch.input.hwc()),
        succeeded: true,
        label: None,
        fc_input,
        fc_grad_input: None,
        fc_row: 0,
        fc_cross_check: None,
        layers: Vec::new(),
        trace: Vec::new(),
        diagnostics: Vec::new(),
    }
}

/// Single-example reconstruction with gradient constraints at every layer.
pub fn attack_single(
    arch: &Architecture,
    params: &Parameters,
    capture: &GradientCapture,
    opts: &AttackOptions,
) -> Result<ReconstructionResult, AttackError> {
    attack_hybrid(
        arch,
        params,
        capture,
        &[LayerStrategy::GradientConstraints],
        opts,
    )
}

/// Single-example reconstruction with a per-layer choice of constraints.
///
/// `strategies` holds one entry per conv layer, or a single entry for all
/// layers, or nothing (auto everywhere).
pub fn attack_hybrid(
    arch: &Architecture,
    params: &Parameters,
    capture: &GradientCapture,
    strategies: &[LayerStrategy],
    opts: &AttackOptions,
) -> Result<ReconstructionResult, AttackError> {
    check_inputs(arch, params, capture)?;
    if capture.batch_size != 1 {
        return Err(AttackError::NotSingleExample(capture.batch_size));
    }
    let strategies = resolve_strategies(arch, strategies)?;
    let tol = opts.threshold_for(capture.fc.grad_b.data());
    let fc = reconstruct_fc_input(&capture.fc.grad_w, &capture.fc.grad_b, tol)?;
    let fc_grad = fc_input_gradient(&params.fc.weight, &capture.fc.grad_b)?;
    let mut rec = empty_reconstruction(arch, fc.input.clone());
    rec.fc_row = fc.row;
    rec.fc_cross_check = fc.cross_check;
    // only the label class has p - 1 < 0
    rec.label = capture
        .fc
        .grad_b
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &g)| g < 0.0)
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(c, _)| c);
    rec.fc_grad_input = Some(fc_grad.clone());
    let chain = Chain {
        arch,
        params,
        capture,
        opts,
        weight_systems: None,
    };
    chain.run(&strategies, &fc.input, Some(&fc_grad), &mut rec);
    Ok(ReconstructionResult {
        reconstructions: vec![rec],
    })
}

/// Mini-batch reconstruction: one example per class whose bias gradient is
/// strongly negative, each recovered through parameter constraints.
///
/// Returned reconstructions are ordered by class index. A class whose bias
/// gradient indicates more than one batch member is reported as failed,
/// since its row holds a mixture of inputs.
pub fn attack_minibatch(
    arch: &Architecture,
    params: &Parameters,
    capture: &GradientCapture,
    opts: &AttackOptions,
) -> Result<ReconstructionResult, AttackError> {
    check_inputs(arch, params, capture)?;
    if let Some((i, spec)) = arch
        .conv_layers
        .iter()
        .enumerate()
        .find(|(_, s)| !s.activation.is_invertible())
    {
        return Err(AttackError::Strategy {
            layer: i + 1,
            reason: format!(
                "mini-batch recovery needs invertible activations, got {}",
                spec.activation
            ),
        });
    }
    let grad_b = capture.fc.grad_b.data();
    let thr = opts.threshold_for(grad_b);
    let mut candidates = select_class_candidates(capture, thr);
    candidates.sort_by_key(|c| c.class_index);
    let n = arch.fc_inputs();
    let classes: Vec<usize> = candidates.iter().map(|c| c.class_index).collect();
    let mut fc_inputs: Vec<Vec<f64>> = candidates
        .iter()
        .map(|cand| {
            let c = cand.class_index;
            capture.fc.grad_w.data()[c * n..(c + 1) * n]
                .iter()
                .map(|v| v / cand.bias_gradient)
                .collect()
        })
        .collect();
    let mut unmix_note = None;
    if opts.unmix_classes && capture.batch_size > 1 && classes.len() == capture.batch_size {
        unmix_note = Some(unmix_classifier_inputs(
            params,
            capture,
            &classes,
            &mut fc_inputs,
            opts.rank_tol,
        )?);
    }

    let shapes = arch.feature_shapes();
    let systems = arch
        .conv_layers
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            conv_weight_system(&params.conv[i].kernels, spec, shapes[i], opts.rank_tol)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let strategies = vec![LayerStrategy::ParameterConstraints; arch.conv_layers.len()];
    let chain = Chain {
        arch,
        params,
        capture,
        opts,
        weight_systems: Some(&systems),
    };
    let reconstructions = candidates
        .iter()
        .zip(fc_inputs)
        .map(|(cand, row)| {
            let c = cand.class_index;
            let d = cand.bias_gradient;
            let fc_input = Tensor::from_parts(vec![n], row);
            let mut rec = empty_reconstruction(arch, fc_input.clone());
            rec.label = Some(c);
            rec.fc_row = c;
            if let Some(note) = &unmix_note {
                rec.diagnostics.push(note.clone());
            }
            if capture.batch_size > 1 {
                // db_c * B = sum_k p_kc - n_c, so -db_c * B estimates n_c
                let members = -d * capture.batch_size as f64;
                if members >= 1.5 {
                    rec.succeeded = false;
                    rec.diagnostics.push(format!(
                        "class {c} appears to be shared by about {members:.1} examples"
                    ));
                }
            }
            chain.run(&strategies, &fc_input, None, &mut rec);
            rec
        })
        .collect();
    Ok(ReconstructionResult { reconstructions })
}

const UNMIX_MAX_ITERS: usize = 50;

/// Removes the cross-example terms from per-class classifier inputs.
///
/// Row `j` of the classifier weight gradient is
/// `(1/B) * sum_k (p_kj - [j = y_k]) * x_k`. Dividing one row by its bias
/// gradient leaves every other example mixed in with weight about `p_kj`.
/// Since the classifier is known, `p_k` can be recomputed from the current
/// estimates; all `C` rows then form a linear system for the `B` inputs,
/// solved per coordinate. The two steps alternate until the inputs stop
/// changing. Returns a note for the diagnostics.
fn unmix_classifier_inputs(
    params: &Parameters,
    capture: &GradientCapture,
    labels: &[usize],
    inputs: &mut [Vec<f64>],
    rank_tol: f64,
) -> Result<String, AttackError> {
    let w = params.fc.weight.data();
    let bias = params.fc.bias.data();
    let classes = bias.len();
    let n = inputs.first().map_or(0, Vec::len);
    let b = labels.len();
    let scale = capture.batch_size as f64;
    let gw = capture.fc.grad_w.data();
    let mut rhs = vec![0.0; classes];
    for iter in 1..=UNMIX_MAX_ITERS {
        // mixing[j][k] = p_kj - [j = y_k]
        let mut mixing = vec![0.0; classes * b];
        for (k, x) in inputs.iter().enumerate() {
            let logits: Vec<f64> = (0..classes)
                .map(|j| {
                    bias[j]
                        + w[j * n..(j + 1) * n]
                            .iter()
                            .zip(x)
                            .map(|(a, v)| a * v)
                            .sum::<f64>()
                })
                .collect();
            for (j, p) in softmax(&logits).into_iter().enumerate() {
                mixing[j * b + k] = p - if labels[k] == j { 1.0 } else { 0.0 };
            }
        }
        let op = LinearOperator::from_dense(classes, b, &mixing)?;
        let system = LeastSquares::new(&op, rank_tol)?;
        if system.numerical_rank() < b {
            return Ok(format!(
                "class mixing left in place: mixing matrix has rank {} for {b} examples",
                system.numerical_rank()
            ));
        }
        let mut change = 0.0f64;
        let mut size = 0.0f64;
        let mut next = vec![vec![0.0; n]; b];
        for t in 0..n {
            for (j, r) in rhs.iter_mut().enumerate() {
                *r = scale * gw[j * n + t];
            }
            let sol = system.solve(&rhs)?.solution;
            for (k, &v) in sol.data().iter().enumerate() {
                change = change.max((v - inputs[k][t]).abs());
                size = size.max(v.abs());
                next[k][t] = v;
            }
        }
        for (dst, src) in inputs.iter_mut().zip(next) {
            *dst = src;
        }
        if change <= 1e-15 * size.max(f64::MIN_POSITIVE) {
            return Ok(format!("class mixing removed in {iter} iterations"));
        }
    }
    Ok(format!(
        "class mixing removal stopped after {UNMIX_MAX_ITERS} iterations"
    ))
}
