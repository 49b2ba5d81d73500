//! Closed-form reconstruction of client inputs from shared gradients.
//!
//! The classifier input is read off the fully connected gradients directly.
//! Each conv layer below it is then inverted as a linear system, either from
//! its weight gradients (gradient constraints) or from its known output and
//! parameters (parameter constraints).

mod algorithms;
mod primitives;
mod strategy;

pub use algorithms::{
    attack_hybrid, attack_minibatch, attack_single, select_class_candidates, ClassCandidate,
    LayerSolve, LayerTrace, Reconstruction, ReconstructionResult,
};
pub use primitives::{
    backprop_activation, conv_input_gradient, conv_weight_system, fc_input_gradient,
    reconstruct_fc_input, solve_conv_input_from_gradients, solve_conv_input_from_weights,
    solve_conv_input_with, FcRecovery,
};
pub(crate) use strategy::gradient_equations_suffice;
pub use strategy::{choose_strategy, resolve_strategies, LayerStrategy};

use thiserror::Error;

use crate::network::NetworkError;
use crate::tensor::{TensorError, DEFAULT_RANK_TOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(
        "classifier input is unrecoverable: every bias gradient is at most {tol:e} in magnitude"
    )]
    Unrecoverable { tol: f64 },
    #[error("conv layer {layer}: {reason}")]
    Strategy { layer: usize, reason: String },
    #[error("expected a single-example capture, got batch size {0}")]
    NotSingleExample(usize),
}

/// Knobs shared by all attack modes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackOptions {
    /// Relative singular-value cutoff for every linear solve.
    pub rank_tol: f64,
    /// Minimum magnitude of a usable bias gradient. `None` means
    /// `1e-8 * max |db|`.
    pub b_threshold: Option<f64>,
    /// Recovered relu outputs within this fraction of the layer's largest
    /// output are treated as exactly zero (dead units).
    pub relu_snap: f64,
    /// Mini-batch only: correct each class's recovered classifier input for
    /// the contributions of the other batch members.
    pub unmix_classes: bool,
}

impl Default for AttackOptions {
    fn default() -> Self {
        Self {
            rank_tol: DEFAULT_RANK_TOL,
            b_threshold: None,
            relu_snap: 1e-8,
            unmix_classes: true,
        }
    }
}

impl AttackOptions {
    pub(crate) fn threshold_for(&self, grad_b: &[f64]) -> f64 {
        self.b_threshold
            .unwrap_or_else(|| 1e-8 * grad_b.iter().fold(0.0f64, |m, v| m.max(v.abs())))
    }
}
