//! Helpers shared by the integration tests: small architectures, random
//! inputs and a direct nested-loop convolution used as a reference.

#![allow(dead_code)]

use gleak::network::{ActivationKind, Architecture, ConvSpec, FcSpec};
use gleak::tensor::{Shape3, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn conv(
    filters: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    activation: ActivationKind,
) -> ConvSpec {
    ConvSpec {
        filters,
        kernel,
        stride,
        padding,
        activation,
    }
}

pub fn arch(name: &str, input: Shape3, layers: Vec<ConvSpec>, classes: usize) -> Architecture {
    Architecture::new(name, input, layers, FcSpec { classes }).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// `(B, H, W, C)` batch with pixels in `[0, 1)`.
pub fn images(rng: &mut ChaCha8Rng, s: Shape3, batch: usize) -> Tensor {
    let data = (0..batch * s.len()).map(|_| rng.random::<f64>()).collect();
    Tensor::new(vec![batch, s.height, s.width, s.channels], data).unwrap()
}

/// The `(H, W, C)` image `i` of a batch.
pub fn image(batch: &Tensor, i: usize) -> Tensor {
    let shape = batch.shape()[1..].to_vec();
    let n: usize = shape.iter().product();
    Tensor::new(shape, batch.data()[i * n..(i + 1) * n].to_vec()).unwrap()
}

/// CNN6-x layer table with a single activation everywhere.
pub fn cnn6x(act: ActivationKind) -> Architecture {
    arch(
        "cnn6-x",
        Shape3::new(32, 32, 3),
        vec![
            conv(96, 5, 2, 2, act),
            conv(48, 4, 2, 1, act),
            conv(32, 3, 1, 1, act),
            conv(32, 4, 2, 1, act),
            conv(32, 4, 2, 1, act),
            conv(3, 3, 1, 1, act),
        ],
        10,
    )
}

/// Zero-padded strided cross-correlation by definition, `(C, H, W)` in and
/// `(F, oh, ow)` out, kernels `(F, C, K, K)`.
pub fn reference_conv(x: &[f64], input: Shape3, spec: &ConvSpec, w: &[f64]) -> Vec<f64> {
    let (c_in, h, wd) = (input.channels, input.height, input.width);
    let k = spec.kernel;
    let oh = (h + 2 * spec.padding - k) / spec.stride + 1;
    let ow = (wd + 2 * spec.padding - k) / spec.stride + 1;
    let mut out = vec![0.0; spec.filters * oh * ow];
    for f in 0..spec.filters {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for c in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let xv = x[(c * h + iy as usize) * wd + ix as usize];
                            acc += w[((f * c_in + c) * k + ky) * k + kx] * xv;
                        }
                    }
                }
                out[(f * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

/// `dW[f, c, ky, kx] = sum_{oy, ox} dZ[f, oy, ox] * X[c, oy*S + ky - P, ox*S + kx - P]`.
pub fn reference_weight_gradient(
    x: &[f64],
    input: Shape3,
    spec: &ConvSpec,
    dz: &[f64],
) -> Vec<f64> {
    let (c_in, h, wd) = (input.channels, input.height, input.width);
    let k = spec.kernel;
    let oh = (h + 2 * spec.padding - k) / spec.stride + 1;
    let ow = (wd + 2 * spec.padding - k) / spec.stride + 1;
    let mut out = vec![0.0; spec.filters * c_in * k * k];
    for f in 0..spec.filters {
        for c in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += dz[(f * oh + oy) * ow + ox]
                                * x[(c * h + iy as usize) * wd + ix as usize];
                        }
                    }
                    out[((f * c_in + c) * k + ky) * k + kx] = acc;
                }
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient capture flattened in parameter order.
pub fn flat_gradients(capture: &gleak::network::GradientCapture) -> Vec<f64> {
    let mut out = Vec::new();
    for l in &capture.conv {
        out.extend_from_slice(l.grad_w.data());
        out.extend_from_slice(l.grad_b.data());
    }
    out.extend_from_slice(capture.fc.grad_w.data());
    out.extend_from_slice(capture.fc.grad_b.data());
    out
}

/// Largest relative error between the analytic gradient and central
/// differences of the loss, `|a - n| / max(|a| + |n|, 1e-8)`.
pub fn finite_difference_error(
    a: &Architecture,
    params: &gleak::network::Parameters,
    batch: &Tensor,
    labels: &[usize],
    h: f64,
) -> (usize, f64) {
    use gleak::network::loss_and_gradients;
    let (_, capture) = loss_and_gradients(a, params, batch, labels).unwrap();
    let analytic = flat_gradients(&capture);
    let flat = params.to_flat();
    assert_eq!(flat.len(), analytic.len());
    let mut worst = 0.0f64;
    for i in 0..flat.len() {
        let mut up = flat.clone();
        up[i] += h;
        let mut down = flat.clone();
        down[i] -= h;
        let lu = loss_and_gradients(a, &params.with_flat(&up).unwrap(), batch, labels)
            .unwrap()
            .0;
        let ld = loss_and_gradients(a, &params.with_flat(&down).unwrap(), batch, labels)
            .unwrap()
            .0;
        let numeric = (lu - ld) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    (flat.len(), worst)
}
