use super::AttackError;
use crate::network::{activation_derivative_from_output, ActivationKind, ConvSpec, NetworkError};
use crate::tensor::{
    build_conv_operator, build_weight_gradient_operator, solve_least_squares, LeastSquares, Shape3,
    SolveReport, Tensor, TensorError,
};

/// `dL/dX` of the classifier input: `W^T * db`.
pub fn fc_input_gradient(fc_weight: &Tensor, grad_b: &Tensor) -> Result<Tensor, TensorError> {
    let [classes, n] = matrix_dims(fc_weight)?;
    grad_b.expect_shape(&[classes], "classifier bias gradient")?;
    let w = fc_weight.data();
    let mut out = vec![0.0; n];
    for (j, &g) in grad_b.data().iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        for (acc, &wji) in out.iter_mut().zip(&w[j * n..(j + 1) * n]) {
            *acc += wji * g;
        }
    }
    Tensor::new(vec![n], out)
}

fn matrix_dims(t: &Tensor) -> Result<[usize; 2], TensorError> {
    match *t.shape() {
        [r, c] => Ok([r, c]),
        ref s => Err(TensorError::DimensionMismatch(format!(
            "expected a matrix, got shape {s:?}"
        ))),
    }
}

/// Classifier input recovered from one row of the weight gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct FcRecovery {
    pub input: Tensor,
    /// Row used for the division (largest `|db_j|`).
    pub row: usize,
    /// Second usable row and the largest absolute difference between the two
    /// recoveries.
    pub cross_check: Option<(usize, f64)>,
}

/// Recovers the classifier input as `dW_j / db_j`.
///
/// The weight gradient of a fully connected layer is the outer product of
/// the bias gradient and the layer input, so any row with a nonzero bias
/// gradient carries a scaled copy of the input.
pub fn reconstruct_fc_input(
    grad_w: &Tensor,
    grad_b: &Tensor,
    tol: f64,
) -> Result<FcRecovery, AttackError> {
    let [classes, n] = matrix_dims(grad_w)?;
    grad_b.expect_shape(&[classes], "classifier bias gradient")?;
    let mut rows: Vec<usize> = (0..classes)
        .filter(|&j| grad_b.data()[j].abs() > tol)
        .collect();
    if rows.is_empty() {
        return Err(AttackError::Unrecoverable { tol });
    }
    rows.sort_by(|&a, &b| {
        grad_b.data()[b]
            .abs()
            .total_cmp(&grad_b.data()[a].abs())
            .then(a.cmp(&b))
    });
    let row_input = |j: usize| -> Vec<f64> {
        let d = grad_b.data()[j];
        grad_w.data()[j * n..(j + 1) * n]
            .iter()
            .map(|v| v / d)
            .collect()
    };
    let best = row_input(rows[0]);
    let cross_check = rows.get(1).map(|&j| {
        let other = row_input(j);
        let diff = best
            .iter()
            .zip(&other)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        (j, diff)
    });
    Ok(FcRecovery {
        input: Tensor::new(vec![n], best)?,
        row: rows[0],
        cross_check,
    })
}

/// `dL/dZ = dL/dX_next * A'(Z)`, with `A'` evaluated from the layer output.
pub fn backprop_activation(
    grad_out: &Tensor,
    layer_output: &Tensor,
    kind: ActivationKind,
) -> Result<Tensor, NetworkError> {
    grad_out.expect_same_shape(layer_output)?;
    let d = activation_derivative_from_output(kind, layer_output)?;
    Ok(grad_out.zip_with(&d, |g, a| g * a)?)
}

/// `dL/dX` of a conv layer's input: the transposed forward operator applied
/// to `dL/dZ`. Returned as `(channels, rows, cols)`.
pub fn conv_input_gradient(
    kernels: &Tensor,
    grad_z: &Tensor,
    spec: &ConvSpec,
    input_shape: Shape3,
) -> Result<Tensor, TensorError> {
    let out = spec.output_shape(input_shape)?;
    grad_z.expect_shape(&out.chw(), "output gradient")?;
    let op = build_conv_operator(input_shape, spec, kernels)?;
    let gx = op.apply_transpose(grad_z.data())?;
    Tensor::new(input_shape.chw().to_vec(), gx)
}

/// Solves `G(dZ) * vec(X) = vec(dW)` for the layer input `X`.
pub fn solve_conv_input_from_gradients(
    grad_w: &Tensor,
    grad_z: &Tensor,
    spec: &ConvSpec,
    input_shape: Shape3,
    rank_tol: f64,
) -> Result<(Tensor, SolveReport), TensorError> {
    grad_w.expect_shape(&spec.kernel_shape(input_shape.channels), "weight gradient")?;
    let op = build_weight_gradient_operator(grad_z, input_shape, spec)?;
    let report = solve_least_squares(&op, grad_w.data(), rank_tol)?;
    let x = report.solution.clone().reshape(&input_shape.chw())?;
    Ok((x, report))
}

/// Factorizes the forward operator of a conv layer for repeated
/// [`solve_conv_input_with`] calls.
pub fn conv_weight_system(
    kernels: &Tensor,
    spec: &ConvSpec,
    input_shape: Shape3,
    rank_tol: f64,
) -> Result<LeastSquares, TensorError> {
    let op = build_conv_operator(input_shape, spec, kernels)?;
    LeastSquares::new(&op, rank_tol)
}

/// Solves `conv(X) = Z - b` for the layer input `X`, given the pre-activation
/// output `Z` as `(filters, rows, cols)`.
pub fn solve_conv_input_from_weights(
    kernels: &Tensor,
    bias: &Tensor,
    z: &Tensor,
    spec: &ConvSpec,
    input_shape: Shape3,
    rank_tol: f64,
) -> Result<(Tensor, SolveReport), TensorError> {
    let system = conv_weight_system(kernels, spec, input_shape, rank_tol)?;
    solve_conv_input_with(&system, bias, z, spec, input_shape)
}

/// [`solve_conv_input_from_weights`] with a prefactorized forward operator.
pub fn solve_conv_input_with(
    system: &LeastSquares,
    bias: &Tensor,
    z: &Tensor,
    spec: &ConvSpec,
    input_shape: Shape3,
) -> Result<(Tensor, SolveReport), TensorError> {
    let out = spec.output_shape(input_shape)?;
    z.expect_shape(&out.chw(), "pre-activation output")?;
    bias.expect_shape(&[spec.filters], "conv bias")?;
    if system.rows() != out.len() || system.cols() != input_shape.len() {
        return Err(TensorError::DimensionMismatch(format!(
            "forward system is {}x{}, layer needs {}x{}",
            system.rows(),
            system.cols(),
            out.len(),
            input_shape.len()
        )));
    }
    let plane = out.plane();
    let rhs: Vec<f64> = z
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v - bias.data()[i / plane])
        .collect();
    let report = system.solve(&rhs)?;
    let x = report.solution.clone().reshape(&input_shape.chw())?;
    Ok((x, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DEFAULT_RANK_TOL;

    fn spec(filters: usize, kernel: usize, stride: usize, padding: usize) -> ConvSpec {
        ConvSpec {
            filters,
            kernel,
            stride,
            padding,
            activation: ActivationKind::Tanh,
        }
    }

    #[test]
    fn fc_gradient_identity() {
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = fc_input_gradient(&w, &Tensor::from_vec(vec![1.0, -1.0]).unwrap()).unwrap();
        assert_eq!(g.data(), &[1.0, -1.0]);
        let z = fc_input_gradient(&w, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0]);
    }

    #[test]
    fn fc_input_from_outer_product() {
        let b = [2.0, -1.0];
        let x = [3.0, 4.0, 5.0];
        let w: Vec<f64> = b
            .iter()
            .flat_map(|bi| x.iter().map(move |xi| bi * xi))
            .collect();
        let rec = reconstruct_fc_input(
            &Tensor::new(vec![2, 3], w).unwrap(),
            &Tensor::from_vec(b.to_vec()).unwrap(),
            1e-12,
        )
        .unwrap();
        assert_eq!(rec.input.data(), &x);
        assert_eq!(rec.row, 0);
        assert_eq!(rec.cross_check, Some((1, 0.0)));
        assert!(matches!(
            reconstruct_fc_input(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2]), 1e-12),
            Err(AttackError::Unrecoverable { .. })
        ));
    }

    #[test]
    fn activation_backprop_examples() {
        let r = backprop_activation(
            &Tensor::from_vec(vec![5.0, 7.0]).unwrap(),
            &Tensor::from_vec(vec![0.0, 2.0]).unwrap(),
            ActivationKind::Relu,
        )
        .unwrap();
        assert_eq!(r.data(), &[0.0, 7.0]);
        let s = backprop_activation(
            &Tensor::from_vec(vec![4.0]).unwrap(),
            &Tensor::from_vec(vec![0.5]).unwrap(),
            ActivationKind::Sigmoid,
        )
        .unwrap();
        assert_eq!(s.data(), &[1.0]);
    }

    #[test]
    fn one_by_one_kernels() {
        let input = Shape3::new(2, 3, 1);
        let s = spec(1, 1, 1, 0);
        let k = Tensor::full(&[1, 1, 1, 1], 2.5);
        let gz = Tensor::full(&[1, 2, 3], 0.4);
        let gx = conv_input_gradient(&k, &gz, &s, input).unwrap();
        assert!(gx.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));

        let z = Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let (x, rep) = solve_conv_input_from_weights(
            &k,
            &Tensor::full(&[1], 0.5),
            &z,
            &s,
            input,
            DEFAULT_RANK_TOL,
        )
        .unwrap();
        assert!(!rep.rank_deficient);
        for (xi, zi) in x.data().iter().zip(z.data()) {
            assert!((xi - (zi - 0.5) / 2.5).abs() < 1e-14);
        }
    }

    #[test]
    fn single_position_gradient_system() {
        // kernel covers the whole input, so dW = g * X
        let input = Shape3::new(3, 3, 2);
        let s = spec(1, 3, 1, 0);
        let x: Vec<f64> = (0..18).map(|i| i as f64 * 0.1 - 0.4).collect();
        let g = -1.7;
        let gw = Tensor::new(vec![1, 2, 3, 3], x.iter().map(|v| v * g).collect()).unwrap();
        let gz = Tensor::full(&[1, 1, 1], g);
        let (rec, rep) =
            solve_conv_input_from_gradients(&gw, &gz, &s, input, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(rep.numerical_rank, 18);
        for (a, b) in rec.data().iter().zip(&x) {
            assert!((a - b).abs() < 1e-14);
        }
        let (_, zero) = solve_conv_input_from_gradients(
            &gw,
            &Tensor::zeros(&[1, 1, 1]),
            &s,
            input,
            DEFAULT_RANK_TOL,
        )
        .unwrap();
        assert_eq!(zero.numerical_rank, 0);
        assert!(zero.rank_deficient);
    }
}
