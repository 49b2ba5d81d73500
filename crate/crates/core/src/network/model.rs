use super::{Architecture, ConvSpec, NetworkError, Parameters};
use crate::tensor::{Shape3, Tensor};

/// Pre- and post-activation output of one conv layer, `(filters, rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations {
    pub pre: Tensor,
    pub post: Tensor,
}

/// Everything the forward pass computed for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleTrace {
    /// `(channels, rows, cols)`
    pub input: Tensor,
    pub conv: Vec<LayerActivations>,
    /// Flattened output of the last conv layer (or of the input when there
    /// are no conv layers).
    pub fc_input: Tensor,
    pub logits: Tensor,
    pub probabilities: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub examples: Vec<ExampleTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub grad_w: Tensor,
    pub grad_b: Tensor,
}

/// What a client shares after one local step: weight and bias gradients of
/// every layer, averaged over the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCapture {
    pub batch_size: usize,
    pub conv: Vec<LayerGradients>,
    pub fc: LayerGradients,
}

impl GradientCapture {
    pub fn validate(&self, arch: &Architecture) -> Result<(), NetworkError> {
        let zeros = Parameters::zeros(arch);
        if self.conv.len() != zeros.conv.len() {
            return Err(NetworkError::ParameterMismatch(format!(
                "capture has {} conv layers, architecture has {}",
                self.conv.len(),
                zeros.conv.len()
            )));
        }
        for (i, (g, p)) in self.conv.iter().zip(&zeros.conv).enumerate() {
            g.grad_w
                .expect_shape(p.kernels.shape(), &format!("conv{} weight gradient", i + 1))?;
            g.grad_b
                .expect_shape(p.bias.shape(), &format!("conv{} bias gradient", i + 1))?;
        }
        self.fc
            .grad_w
            .expect_shape(zeros.fc.weight.shape(), "fc weight gradient")?;
        self.fc
            .grad_b
            .expect_shape(zeros.fc.bias.shape(), "fc bias gradient")?;
        if self.batch_size == 0 {
            return Err(NetworkError::EmptyBatch);
        }
        Ok(())
    }
}

/// Exact single-example backward pass including the intermediate gradients
/// an attacker never sees; used as ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleGradients {
    pub loss: f64,
    /// `dL/dZ` per conv layer.
    pub grad_z: Vec<Tensor>,
    /// `dL/dX` per conv layer, where `X` is that layer's input.
    pub grad_input: Vec<Tensor>,
    /// `dL/dX` of the classifier input.
    pub fc_grad_input: Tensor,
    /// Unaveraged parameter gradients (`batch_size = 1`).
    pub capture: GradientCapture,
}

fn split_batch(arch: &Architecture, batch: &Tensor) -> Result<Vec<Tensor>, NetworkError> {
    let s = arch.input;
    let shape = batch.shape();
    if shape.len() != 4 || shape[1..] != s.hwc() {
        return Err(NetworkError::Tensor(
            crate::tensor::TensorError::DimensionMismatch(format!(
                "batch must be (B, {}, {}, {}), got {:?}",
                s.height, s.width, s.channels, shape
            )),
        ));
    }
    if shape[0] == 0 {
        return Err(NetworkError::EmptyBatch);
    }
    batch
        .data()
        .chunks(s.len())
        .map(|chunk| {
            Tensor::from_parts(s.hwc().to_vec(), chunk.to_vec())
                .hwc_to_chw()
                .map_err(NetworkError::from)
        })
        .collect()
}

pub(crate) fn conv_forward(
    input: &Tensor,
    in_shape: Shape3,
    spec: &ConvSpec,
    kernels: &Tensor,
    bias: &Tensor,
) -> Tensor {
    let out = spec
        .output_shape(in_shape)
        .expect("architecture was validated");
    let (c_in, h, w) = (in_shape.channels, in_shape.height, in_shape.width);
    let k = spec.kernel;
    let x = input.data();
    let wt = kernels.data();
    let mut z = vec![0.0; out.len()];
    for f in 0..spec.filters {
        for oy in 0..out.height {
            for ox in 0..out.width {
                let mut acc = bias.data()[f];
                for c in 0..c_in {
                    for ky in 0..k {
                        let Some(iy) = (oy * spec.stride + ky).checked_sub(spec.padding) else {
                            continue;
                        };
                        if iy >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let Some(ix) = (ox * spec.stride + kx).checked_sub(spec.padding) else {
                                continue;
                            };
                            if ix >= w {
                                continue;
                            }
                            acc +=
                                wt[((f * c_in + c) * k + ky) * k + kx] * x[(c * h + iy) * w + ix];
                        }
                    }
                }
                z[(f * out.height + oy) * out.width + ox] = acc;
            }
        }
    }
    Tensor::from_parts(out.chw().to_vec(), z)
}

/// Returns `(dL/dW, dL/db, dL/dX)` for one conv layer given `dL/dZ`.
fn conv_backward(
    input: &Tensor,
    in_shape: Shape3,
    spec: &ConvSpec,
    kernels: &Tensor,
    grad_z: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let out = spec
        .output_shape(in_shape)
        .expect("architecture was validated");
    let (c_in, h, w) = (in_shape.channels, in_shape.height, in_shape.width);
    let k = spec.kernel;
    let x = input.data();
    let wt = kernels.data();
    let gz = grad_z.data();
    let mut gw = vec![0.0; kernels.len()];
    let mut gb = vec![0.0; spec.filters];
    let mut gx = vec![0.0; input.len()];
    for f in 0..spec.filters {
        for oy in 0..out.height {
            for ox in 0..out.width {
                let g = gz[(f * out.height + oy) * out.width + ox];
                gb[f] += g;
                if g == 0.0 {
                    continue;
                }
                for c in 0..c_in {
                    for ky in 0..k {
                        let Some(iy) = (oy * spec.stride + ky).checked_sub(spec.padding) else {
                            continue;
                        };
                        if iy >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let Some(ix) = (ox * spec.stride + kx).checked_sub(spec.padding) else {
                                continue;
                            };
                            if ix >= w {
                                continue;
                            }
                            let wi = ((f * c_in + c) * k + ky) * k + kx;
                            let xi = (c * h + iy) * w + ix;
                            gw[wi] += g * x[xi];
                            gx[xi] += g * wt[wi];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(kernels.shape().to_vec(), gw),
        Tensor::from_parts(vec![spec.filters], gb),
        Tensor::from_parts(input.shape().to_vec(), gx),
    )
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn forward_example(arch: &Architecture, params: &Parameters, input: Tensor) -> ExampleTrace {
    let shapes = arch.feature_shapes();
    let mut conv = Vec::with_capacity(arch.conv_layers.len());
    let mut current = input.clone();
    for (i, spec) in arch.conv_layers.iter().enumerate() {
        let p = &params.conv[i];
        let pre = conv_forward(&current, shapes[i], spec, &p.kernels, &p.bias);
        let post = Tensor::from_parts(
            pre.shape().to_vec(),
            pre.data()
                .iter()
                .map(|&z| spec.activation.apply(z))
                .collect(),
        );
        current = post.clone();
        conv.push(LayerActivations { pre, post });
    }
    let fc_input = current.flatten();
    let n = fc_input.len();
    let w = params.fc.weight.data();
    let logits: Vec<f64> = (0..arch.fc.classes)
        .map(|j| {
            params.fc.bias.data()[j]
                + w[j * n..(j + 1) * n]
                    .iter()
                    .zip(fc_input.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        })
        .collect();
    let probabilities = softmax(&logits);
    ExampleTrace {
        input,
        conv,
        fc_input,
        logits: Tensor::from_parts(vec![arch.fc.classes], logits),
        probabilities: Tensor::from_parts(vec![arch.fc.classes], probabilities),
    }
}

/// Runs the network on a `(B, H, W, C)` batch.
pub fn forward(
    arch: &Architecture,
    params: &Parameters,
    batch: &Tensor,
) -> Result<ForwardTrace, NetworkError> {
    params.validate(arch)?;
    let inputs = split_batch(arch, batch)?;
    let examples = inputs
        .into_iter()
        .map(|x| forward_example(arch, params, x))
        .collect();
    Ok(ForwardTrace { examples })
}

/// Exact backward pass of the cross-entropy loss for one traced example.
pub fn backward_example(
    arch: &Architecture,
    params: &Parameters,
    trace: &ExampleTrace,
    label: usize,
) -> Result<ExampleGradients, NetworkError> {
    let classes = arch.fc.classes;
    if label >= classes {
        return Err(NetworkError::InvalidLabel { label, classes });
    }
    let probs = trace.probabilities.data();
    // log-softmax directly from the logits stays finite when p underflows
    let logits = trace.logits.data();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[label];

    let mut grad_logits = probs.to_vec();
    grad_logits[label] -= 1.0;
    let x = trace.fc_input.data();
    let n = x.len();
    let grad_fc_w: Vec<f64> = grad_logits
        .iter()
        .flat_map(|&g| x.iter().map(move |&xi| g * xi))
        .collect();
    let w = params.fc.weight.data();
    let mut fc_grad_input = vec![0.0; n];
    for (j, &g) in grad_logits.iter().enumerate() {
        for (acc, &wji) in fc_grad_input.iter_mut().zip(&w[j * n..(j + 1) * n]) {
            *acc += wji * g;
        }
    }
    let fc = LayerGradients {
        grad_w: Tensor::from_parts(vec![classes, n], grad_fc_w),
        grad_b: Tensor::from_parts(vec![classes], grad_logits),
    };
    let fc_grad_input = Tensor::from_parts(vec![n], fc_grad_input);

    let shapes = arch.feature_shapes();
    let layers = arch.conv_layers.len();
    let mut grad_z = vec![Tensor::zeros(&[1]); layers];
    let mut grad_input = vec![Tensor::zeros(&[1]); layers];
    let mut conv = vec![
        LayerGradients {
            grad_w: Tensor::zeros(&[1]),
            grad_b: Tensor::zeros(&[1]),
        };
        layers
    ];
    let mut upstream = fc_grad_input.data().to_vec();
    for i in (0..layers).rev() {
        let spec = &arch.conv_layers[i];
        let act = &trace.conv[i];
        let gz: Vec<f64> = upstream
            .iter()
            .zip(act.pre.data())
            .map(|(&g, &z)| g * spec.activation.derivative(z))
            .collect();
        let gz = Tensor::from_parts(act.pre.shape().to_vec(), gz);
        let input = if i == 0 {
            &trace.input
        } else {
            &trace.conv[i - 1].post
        };
        let (gw, gb, gx) = conv_backward(input, shapes[i], spec, &params.conv[i].kernels, &gz);
        upstream = gx.data().to_vec();
        grad_z[i] = gz;
        grad_input[i] = gx;
        conv[i] = LayerGradients {
            grad_w: gw,
            grad_b: gb,
        };
    }
    Ok(ExampleGradients {
        loss,
        grad_z,
        grad_input,
        fc_grad_input,
        capture: GradientCapture {
            batch_size: 1,
            conv,
            fc,
        },
    })
}

fn accumulate(into: &mut Tensor, from: &Tensor) {
    let shape = into.shape().to_vec();
    let data: Vec<f64> = into
        .data()
        .iter()
        .zip(from.data())
        .map(|(a, b)| a + b)
        .collect();
    *into = Tensor::from_parts(shape, data);
}

fn scale_in_place(t: &mut Tensor, k: f64) {
    let shape = t.shape().to_vec();
    let data = t.data().iter().map(|v| v * k).collect();
    *t = Tensor::from_parts(shape, data);
}

/// Mean cross-entropy over the batch and the batch-averaged gradients of
/// every parameter.
pub fn loss_and_gradients(
    arch: &Architecture,
    params: &Parameters,
    batch: &Tensor,
    labels: &[usize],
) -> Result<(f64, GradientCapture), NetworkError> {
    let trace = forward(arch, params, batch)?;
    let b = trace.examples.len();
    if labels.len() != b {
        return Err(NetworkError::ParameterMismatch(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    let mut total_loss = 0.0;
    let mut sum: Option<GradientCapture> = None;
    for (example, &label) in trace.examples.iter().zip(labels) {
        let g = backward_example(arch, params, example, label)?;
        total_loss += g.loss;
        match sum.as_mut() {
            None => sum = Some(g.capture),
            Some(acc) => {
                for (a, l) in acc.conv.iter_mut().zip(&g.capture.conv) {
                    accumulate(&mut a.grad_w, &l.grad_w);
                    accumulate(&mut a.grad_b, &l.grad_b);
                }
                accumulate(&mut acc.fc.grad_w, &g.capture.fc.grad_w);
                accumulate(&mut acc.fc.grad_b, &g.capture.fc.grad_b);
            }
        }
    }
    let mut capture = sum.expect("batch is nonempty");
    let inv = 1.0 / b as f64;
    for l in capture
        .conv
        .iter_mut()
        .chain(std::iter::once(&mut capture.fc))
    {
        scale_in_place(&mut l.grad_w, inv);
        scale_in_place(&mut l.grad_b, inv);
    }
    capture.batch_size = b;
    Ok((total_loss * inv, capture))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_parameters, ActivationKind, FcSpec};

    fn conv(filters: usize, kernel: usize, stride: usize, padding: usize) -> ConvSpec {
        ConvSpec {
            filters,
            kernel,
            stride,
            padding,
            activation: ActivationKind::Tanh,
        }
    }

    #[test]
    fn zero_parameters_give_uniform_softmax() {
        let arch = Architecture::new(
            "z",
            Shape3::new(4, 4, 2),
            vec![conv(3, 3, 1, 1)],
            FcSpec { classes: 4 },
        )
        .unwrap();
        let params = Parameters::zeros(&arch);
        let batch = Tensor::full(&[1, 4, 4, 2], 0.7);
        let trace = forward(&arch, &params, &batch).unwrap();
        assert!(trace.examples[0].logits.data().iter().all(|&v| v == 0.0));
        assert!(trace.examples[0]
            .probabilities
            .data()
            .iter()
            .all(|&p| (p - 0.25).abs() < 1e-15));
        let (_, cap) = loss_and_gradients(&arch, &params, &batch, &[2]).unwrap();
        assert_eq!(cap.fc.grad_b.data(), &[0.25, 0.25, -0.75, 0.25]);
    }

    #[test]
    fn one_by_one_conv() {
        let arch = Architecture::new(
            "unit",
            Shape3::new(1, 1, 1),
            vec![ConvSpec {
                activation: ActivationKind::LeakyRelu(0.5),
                ..conv(1, 1, 1, 0)
            }],
            FcSpec { classes: 2 },
        )
        .unwrap();
        let mut params = Parameters::zeros(&arch);
        params.conv[0].kernels = Tensor::full(&[1, 1, 1, 1], 2.0);
        params.conv[0].bias = Tensor::full(&[1], 1.0);
        let trace = forward(&arch, &params, &Tensor::full(&[1, 1, 1, 1], 3.0)).unwrap();
        assert_eq!(trace.examples[0].conv[0].pre.data(), &[7.0]);
    }

    #[test]
    fn batch_capture_is_mean_of_singles() {
        let arch = Architecture::new(
            "m",
            Shape3::new(5, 5, 2),
            vec![conv(3, 3, 2, 1), conv(2, 2, 1, 0)],
            FcSpec { classes: 3 },
        )
        .unwrap();
        let params = init_parameters(&arch, 11);
        let a: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..50).map(|i| (i as f64 * 0.11).cos()).collect();
        let both = Tensor::new(vec![2, 5, 5, 2], [a.clone(), b.clone()].concat()).unwrap();
        let (_, cap) = loss_and_gradients(&arch, &params, &both, &[0, 2]).unwrap();
        let (_, ca) = loss_and_gradients(
            &arch,
            &params,
            &Tensor::new(vec![1, 5, 5, 2], a).unwrap(),
            &[0],
        )
        .unwrap();
        let (_, cb) = loss_and_gradients(
            &arch,
            &params,
            &Tensor::new(vec![1, 5, 5, 2], b).unwrap(),
            &[2],
        )
        .unwrap();
        assert_eq!(cap.batch_size, 2);
        for ((m, x), y) in cap.conv.iter().zip(&ca.conv).zip(&cb.conv) {
            for i in 0..m.grad_w.len() {
                let mean = 0.5 * (x.grad_w.data()[i] + y.grad_w.data()[i]);
                assert!((m.grad_w.data()[i] - mean).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_label_and_shape() {
        let arch =
            Architecture::new("f", Shape3::new(2, 2, 1), vec![], FcSpec { classes: 2 }).unwrap();
        let params = Parameters::zeros(&arch);
        let batch = Tensor::zeros(&[1, 2, 2, 1]);
        assert!(matches!(
            loss_and_gradients(&arch, &params, &batch, &[2]),
            Err(NetworkError::InvalidLabel { .. })
        ));
        assert!(forward(&arch, &params, &Tensor::zeros(&[1, 2, 2, 3])).is_err());
    }
}
