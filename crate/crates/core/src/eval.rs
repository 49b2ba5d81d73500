//! Randomized attack trials and their CSV table.
//!
//! Trial `t` of a run with seed `s` uses parameter seed `s + t` and draws its
//! images and labels from a separate ChaCha8 stream of the same seed, so any
//! row can be reproduced on its own.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{
    attack_hybrid, attack_minibatch, attack_single, AttackError, AttackOptions, LayerStrategy,
    ReconstructionResult,
};
use crate::io::IoError;
use crate::metrics::{match_pairs, mse, psnr_from_mse, DEFAULT_SUCCESS_MSE};
use crate::network::{
    init_parameters, loss_and_gradients, Architecture, GradientCapture, Parameters,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Single,
    Hybrid,
    Minibatch,
}

impl fmt::Display for AttackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Single => "single",
            Self::Hybrid => "hybrid",
            Self::Minibatch => "minibatch",
        })
    }
}

impl FromStr for AttackMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(Self::Single),
            "hybrid" => Ok(Self::Hybrid),
            "minibatch" => Ok(Self::Minibatch),
            other => Err(format!(
                "unknown mode {other:?} (expected single, hybrid or minibatch)"
            )),
        }
    }
}

/// Dispatches to the attack of the given mode. `strategies` is used by
/// hybrid mode only.
pub fn run_attack(
    mode: AttackMode,
    arch: &Architecture,
    params: &Parameters,
    capture: &GradientCapture,
    strategies: &[LayerStrategy],
    opts: &AttackOptions,
) -> Result<ReconstructionResult, AttackError> {
    match mode {
        AttackMode::Single => attack_single(arch, params, capture, opts),
        AttackMode::Hybrid => attack_hybrid(arch, params, capture, strategies, opts),
        AttackMode::Minibatch => attack_minibatch(arch, params, capture, opts),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub mode: AttackMode,
    pub trials: usize,
    pub seed: u64,
    pub batch: usize,
    pub mse_threshold: f64,
    /// When false, `time_s` is written as 0 so runs compare bit for bit.
    pub timing: bool,
    pub options: AttackOptions,
}

impl EvalConfig {
    pub fn new(mode: AttackMode, trials: usize, seed: u64) -> Self {
        Self {
            mode,
            trials,
            seed,
            batch: if mode == AttackMode::Minibatch { 8 } else { 1 },
            mse_threshold: DEFAULT_SUCCESS_MSE,
            timing: true,
            options: AttackOptions::default(),
        }
    }
}

/// One trial. `mse` averages over the batch after pairing every truth with
/// a distinct returned input (best first); truths left without a partner
/// are compared against an all-zero image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub arch: String,
    pub activation: String,
    pub mode: AttackMode,
    pub batch_size: usize,
    pub seed: u64,
    pub mse: f64,
    pub psnr_db: f64,
    pub time_s: f64,
    pub success_count: usize,
}

/// Activation column: the distinct kinds in layer order, joined by `+`.
pub fn activation_label(arch: &Architecture) -> String {
    let mut names: Vec<String> = Vec::new();
    for spec in &arch.conv_layers {
        let n = spec.activation.to_string();
        if !names.contains(&n) {
            names.push(n);
        }
    }
    names.join("+")
}

/// Random `(B, H, W, C)` batch in `[0, 1)` and labels, distinct whenever
/// `B <= classes`.
pub fn random_batch(
    arch: &Architecture,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Vec<usize>) {
    let s = arch.input;
    let data: Vec<f64> = (0..batch * s.len()).map(|_| rng.random::<f64>()).collect();
    let images = Tensor::new(vec![batch, s.height, s.width, s.channels], data)
        .expect("batch shape matches its data");
    let classes = arch.fc.classes;
    let labels = if batch <= classes {
        let mut pool: Vec<usize> = (0..classes).collect();
        for i in 0..batch {
            let j = rng.random_range(i..classes);
            pool.swap(i, j);
        }
        pool.truncate(batch);
        pool
    } else {
        (0..batch).map(|_| rng.random_range(0..classes)).collect()
    };
    (images, labels)
}

/// Splits a `(B, H, W, C)` batch into `B` images.
pub fn split_batch(batch: &Tensor) -> Vec<Tensor> {
    let shape = &batch.shape()[1..];
    let per: usize = shape.iter().product();
    batch
        .data()
        .chunks(per.max(1))
        .map(|c| Tensor::new(shape.to_vec(), c.to_vec()).expect("chunk matches image shape"))
        .collect()
}

pub fn run_trial(
    arch: &Architecture,
    cfg: &EvalConfig,
    index: usize,
) -> Result<EvalRow, AttackError> {
    let seed = cfg.seed.wrapping_add(index as u64);
    let params = init_parameters(arch, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let (images, labels) = random_batch(arch, cfg.batch, &mut rng);
    let (_, capture) = loss_and_gradients(arch, &params, &images, &labels)?;
    let truths = split_batch(&images);

    let start = Instant::now();
    let outcome = run_attack(cfg.mode, arch, &params, &capture, &[], &cfg.options);
    let elapsed = start.elapsed().as_secs_f64();
    let result = match outcome {
        Ok(r) => r,
        // a capture without any usable bias gradient recovers nothing
        Err(AttackError::Unrecoverable { .. }) => ReconstructionResult {
            reconstructions: Vec::new(),
        },
        Err(e) => return Err(e),
    };

    let recovered = result.inputs();
    let pairs = match_pairs(&recovered, &truths);
    let mut per_truth: Vec<Option<f64>> = vec![None; truths.len()];
    for &(_, j, m) in &pairs {
        per_truth[j] = Some(m);
    }
    let zero = Tensor::zeros(&arch.input.hwc());
    let total: f64 = per_truth
        .iter()
        .zip(&truths)
        .map(|(m, t)| m.unwrap_or_else(|| mse(&zero, t).expect("same shape")))
        .sum();
    let mean = total / truths.len() as f64;
    let success_count = pairs
        .iter()
        .filter(|&&(_, _, m)| m <= cfg.mse_threshold)
        .count();
    Ok(EvalRow {
        arch: arch.name.clone(),
        activation: activation_label(arch),
        mode: cfg.mode,
        batch_size: cfg.batch,
        seed,
        mse: mean,
        psnr_db: psnr_from_mse(mean, 1.0),
        time_s: if cfg.timing { elapsed } else { 0.0 },
        success_count,
    })
}

/// Runs every trial in index order.
pub fn evaluate(arch: &Architecture, cfg: &EvalConfig) -> Result<Vec<EvalRow>, AttackError> {
    (0..cfg.trials).map(|t| run_trial(arch, cfg, t)).collect()
}

pub fn write_eval_csv<W: Write>(rows: &[EvalRow], out: W) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record([
            "arch",
            "activation",
            "mode",
            "batch_size",
            "seed",
            "mse",
            "psnr_db",
            "time_s",
            "success_count",
        ])
        .map_err(csv_error)?;
    }
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush()
        .map_err(|e| IoError::Format(format!("evaluation table: {e}")))
}

pub fn parse_eval_csv(bytes: &[u8]) -> Result<Vec<EvalRow>, IoError> {
    let mut r = csv::Reader::from_reader(bytes);
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

fn csv_error(e: csv::Error) -> IoError {
    IoError::Format(format!("evaluation table: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ActivationKind, ConvSpec, FcSpec};
    use crate::tensor::Shape3;

    fn tiny() -> Architecture {
        Architecture::new(
            "tiny",
            Shape3::new(4, 4, 1),
            vec![ConvSpec {
                filters: 4,
                kernel: 3,
                stride: 1,
                padding: 1,
                activation: ActivationKind::Tanh,
            }],
            FcSpec { classes: 5 },
        )
        .unwrap()
    }

    #[test]
    fn rows_round_trip_through_csv() {
        let mut cfg = EvalConfig::new(AttackMode::Single, 2, 9);
        cfg.timing = false;
        let rows = evaluate(&tiny(), &cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].seed, 10);
        let mut bytes = Vec::new();
        write_eval_csv(&rows, &mut bytes).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with(
            "arch,activation,mode,batch_size,seed,mse,psnr_db,time_s,success_count\n"
        ));
        assert_eq!(parse_eval_csv(&bytes).unwrap(), rows);
    }

    #[test]
    fn infinite_psnr_survives_csv() {
        let row = EvalRow {
            arch: "a".into(),
            activation: "relu".into(),
            mode: AttackMode::Single,
            batch_size: 1,
            seed: 0,
            mse: 0.0,
            psnr_db: f64::INFINITY,
            time_s: 0.0,
            success_count: 1,
        };
        let mut bytes = Vec::new();
        write_eval_csv(std::slice::from_ref(&row), &mut bytes).unwrap();
        assert!(String::from_utf8_lossy(&bytes).contains(",inf,"));
        assert_eq!(parse_eval_csv(&bytes).unwrap(), vec![row]);
    }

    #[test]
    fn labels_are_distinct_when_possible() {
        let arch = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (images, labels) = random_batch(&arch, 5, &mut rng);
        assert_eq!(images.shape(), &[5, 4, 4, 1]);
        let mut sorted = labels.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        assert_eq!(split_batch(&images).len(), 5);
    }
}
