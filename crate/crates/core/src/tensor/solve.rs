//! Minimum-norm least squares with rank diagnostics.
//!
//! The system is first split into independent blocks (connected components of
//! the row/column incidence graph). Convolution gradient systems fall apart
//! into one block per input channel this way. Small blocks are factorized by
//! a dense SVD, which gives an exact numerical rank. Blocks too large to
//! densify go through a sparse Cholesky factorization of the normal
//! equations, where the rank is estimated from extreme singular values.

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Col, Mat, Side};
use serde::Serialize;

use super::{LinearOperator, Tensor, TensorError};

/// Singular values at or below this fraction of the largest one count as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

const DENSE_MAX_ENTRIES: usize = 30_000_000;
const DENSE_MAX_MIN_DIM: usize = 4096;
/// Bound on `max(m, n) * min(m, n)^2`, the rough cost of a dense SVD.
const DENSE_MAX_COST: f64 = 2e9;
const POWER_ITERS: usize = 60;
const INVERSE_ITERS: usize = 25;

/// How the numerical rank in a [`SolveReport`] was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMethod {
    /// Every block was factorized by SVD; the rank is exact at the tolerance.
    Svd,
    /// At least one block went through the normal equations. A deficient
    /// block is counted as one short of full rank.
    NormalEquations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub solution: Tensor,
    pub numerical_rank: usize,
    pub cols: usize,
    pub residual_norm: f64,
    pub rank_deficient: bool,
    pub rank_method: RankMethod,
}

/// Returns the minimum-norm least-squares solution of `a * x = rhs`.
pub fn solve_least_squares(
    a: &LinearOperator,
    rhs: &[f64],
    rank_tol: f64,
) -> Result<SolveReport, TensorError> {
    LeastSquares::new(a, rank_tol)?.solve(rhs)
}

/// A factorized system that can be solved for many right-hand sides.
pub struct LeastSquares {
    op: LinearOperator,
    blocks: Vec<Block>,
    factored: Vec<Factored>,
    rank: usize,
    method: RankMethod,
}

impl LeastSquares {
    pub fn new(a: &LinearOperator, rank_tol: f64) -> Result<Self, TensorError> {
        if a.rows() == 0 || a.cols() == 0 {
            return Err(TensorError::EmptySystem);
        }
        if !(rank_tol > 0.0 && rank_tol.is_finite()) {
            return Err(TensorError::InvalidTolerance(rank_tol));
        }
        if let Some(i) = a.values().iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        let blocks = split_blocks(a);
        let mut factored: Vec<Factored> = blocks
            .iter()
            .map(|blk| factor_block(a, blk))
            .collect::<Result<_, _>>()?;
        let sigma_max = factored.iter().map(Factored::sigma_max).fold(0.0, f64::max);
        let threshold = rank_tol * sigma_max;
        let mut rank = 0;
        let mut method = RankMethod::Svd;
        for f in &mut factored {
            if matches!(f, Factored::Sparse(_)) {
                method = RankMethod::NormalEquations;
            }
            rank += f.truncate(threshold, sigma_max == 0.0)?;
        }
        Ok(Self {
            op: a.clone(),
            blocks,
            factored,
            rank,
            method,
        })
    }

    pub fn numerical_rank(&self) -> usize {
        self.rank
    }

    pub fn rows(&self) -> usize {
        self.op.rows()
    }

    pub fn cols(&self) -> usize {
        self.op.cols()
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<SolveReport, TensorError> {
        let a = &self.op;
        if rhs.len() != a.rows() {
            return Err(TensorError::DimensionMismatch(format!(
                "right-hand side has {} entries for {} rows",
                rhs.len(),
                a.rows()
            )));
        }
        if let Some(i) = rhs.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        let mut x = vec![0.0; a.cols()];
        for (blk, f) in self.blocks.iter().zip(&self.factored) {
            let local_rhs: Vec<f64> = blk.rows.iter().map(|&r| rhs[r]).collect();
            for (&c, v) in blk.cols.iter().zip(f.solve(&local_rhs)) {
                x[c] = v;
            }
        }
        let ax = a.apply_unchecked(&x);
        let residual_norm = ax
            .iter()
            .zip(rhs)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt();
        let cols = a.cols();
        Ok(SolveReport {
            solution: Tensor::new(vec![cols], x)?,
            numerical_rank: self.rank,
            cols,
            residual_norm,
            rank_deficient: self.rank < cols,
            rank_method: self.method,
        })
    }
}

struct Block {
    rows: Vec<usize>,
    cols: Vec<usize>,
}

fn split_blocks(a: &LinearOperator) -> Vec<Block> {
    let mut parent: Vec<usize> = (0..a.cols()).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for r in 0..a.rows() {
        let span = a.row_span(r);
        let cols = &a.col_indices()[span];
        if let Some((&first, rest)) = cols.split_first() {
            let root = find(&mut parent, first);
            for &c in rest {
                let other = find(&mut parent, c);
                if other != root {
                    parent[other] = root;
                }
            }
        }
    }
    let mut used = vec![false; a.cols()];
    for &c in a.col_indices() {
        used[c] = true;
    }
    let mut block_of = vec![usize::MAX; a.cols()];
    let mut blocks: Vec<Block> = Vec::new();
    for (c, _) in used.iter().enumerate().filter(|(_, &u)| u) {
        let root = find(&mut parent, c);
        if block_of[root] == usize::MAX {
            block_of[root] = blocks.len();
            blocks.push(Block {
                rows: Vec::new(),
                cols: Vec::new(),
            });
        }
        blocks[block_of[root]].cols.push(c);
    }
    for r in 0..a.rows() {
        let span = a.row_span(r);
        if let Some(&first) = a.col_indices()[span].first() {
            let root = find(&mut parent, first);
            blocks[block_of[root]].rows.push(r);
        }
    }
    blocks
}

type SparseLlt = faer::sparse::linalg::solvers::Llt<usize, f64>;

enum Factored {
    Dense(DenseBlock),
    Sparse(SparseBlock),
}

struct DenseBlock {
    u: Mat<f64>,
    s: Vec<f64>,
    v: Mat<f64>,
    rank: usize,
}

struct SparseBlock {
    op: LinearOperator,
    gram: SparseColMat<usize, f64>,
    llt: Option<SparseLlt>,
    sigma_max: f64,
    sigma_min: f64,
}

impl Factored {
    fn sigma_max(&self) -> f64 {
        match self {
            Factored::Dense(d) => d.s.first().copied().unwrap_or(0.0),
            Factored::Sparse(s) => s.sigma_max,
        }
    }

    /// Fixes the block's rank at `threshold` and returns it.
    fn truncate(&mut self, threshold: f64, all_zero: bool) -> Result<usize, TensorError> {
        match self {
            Factored::Dense(d) => {
                d.rank = if all_zero {
                    0
                } else {
                    d.s.iter().take_while(|&&s| s > threshold).count()
                };
                Ok(d.rank)
            }
            Factored::Sparse(s) => {
                let n = s.op.cols();
                if all_zero {
                    s.llt = None;
                    return Ok(0);
                }
                if s.llt.is_some() && s.sigma_min > threshold {
                    return Ok(n);
                }
                // Tikhonov damping at the rank threshold suppresses the
                // directions the threshold discards, approximating the
                // minimum-norm solution.
                let lambda = threshold.powi(2).max(1e-300);
                let damped = add_diagonal(&s.gram, lambda)?;
                s.llt = damped.sp_cholesky(Side::Lower).ok();
                Ok(n.saturating_sub(1))
            }
        }
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        match self {
            Factored::Dense(d) => d.solve(rhs),
            Factored::Sparse(s) => match &s.llt {
                Some(llt) => refine(&s.op, rhs, |g| solve_with(llt, g)),
                None => vec![0.0; s.op.cols()],
            },
        }
    }
}

fn factor_block(a: &LinearOperator, blk: &Block) -> Result<Factored, TensorError> {
    let (m, n) = (blk.rows.len(), blk.cols.len());
    let mut local_col = std::collections::HashMap::with_capacity(n);
    for (j, &c) in blk.cols.iter().enumerate() {
        local_col.insert(c, j);
    }

    let small = m.min(n);
    let svd_cost = m.max(n) as f64 * (small as f64).powi(2);
    if m * n <= DENSE_MAX_ENTRIES && small <= DENSE_MAX_MIN_DIM && svd_cost <= DENSE_MAX_COST {
        let mut mat = Mat::<f64>::zeros(m, n);
        for (i, &r) in blk.rows.iter().enumerate() {
            for (c, v) in a.row(r) {
                mat[(i, local_col[&c])] = v;
            }
        }
        let svd = mat
            .thin_svd()
            .map_err(|e| TensorError::Backend(format!("svd did not converge: {e:?}")))?;
        let s = (0..svd.S().dim())
            .map(|i| svd.S().column_vector()[i])
            .collect();
        return Ok(Factored::Dense(DenseBlock {
            u: svd.U().to_owned(),
            s,
            v: svd.V().to_owned(),
            rank: 0,
        }));
    }

    let mut b = LinearOperator::builder(n);
    let mut triplets = Vec::new();
    for (i, &r) in blk.rows.iter().enumerate() {
        for (c, v) in a.row(r) {
            let j = local_col[&c];
            b.push(j, v);
            triplets.push(Triplet::new(i, j, v));
        }
        b.finish_row();
    }
    let op = b.build();
    let sparse = SparseColMat::<usize, f64>::try_new_from_triplets(m, n, &triplets)
        .map_err(|e| TensorError::Backend(format!("{e:?}")))?;
    let gram = sparse
        .transpose()
        .to_col_major()
        .map_err(|e| TensorError::Backend(format!("{e:?}")))?
        * sparse.as_ref();
    let llt = gram.sp_cholesky(Side::Lower).ok();
    let sigma_max = power_iteration(&op);
    let sigma_min = match &llt {
        Some(llt) => inverse_iteration(llt, n),
        None => 0.0,
    };
    Ok(Factored::Sparse(SparseBlock {
        op,
        gram,
        llt,
        sigma_max,
        sigma_min,
    }))
}

impl DenseBlock {
    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let coeff: Vec<f64> = (0..self.rank)
            .map(|k| {
                let proj: f64 = (0..self.u.nrows()).map(|i| self.u[(i, k)] * rhs[i]).sum();
                proj / self.s[k]
            })
            .collect();
        (0..self.v.nrows())
            .map(|j| (0..self.rank).map(|k| self.v[(j, k)] * coeff[k]).sum())
            .collect()
    }
}

fn solve_with(llt: &SparseLlt, rhs: &[f64]) -> Vec<f64> {
    let mut col = Col::<f64>::from_fn(rhs.len(), |i| rhs[i]);
    llt.solve_in_place(col.as_mut());
    (0..rhs.len()).map(|i| col[i]).collect()
}

/// Normal-equation solve followed by two rounds of iterative refinement.
fn refine(op: &LinearOperator, rhs: &[f64], solve: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let mut x = solve(&op.apply_transpose_unchecked(rhs));
    for _ in 0..2 {
        let ax = op.apply_unchecked(&x);
        let r: Vec<f64> = rhs.iter().zip(ax).map(|(b, p)| b - p).collect();
        let dx = solve(&op.apply_transpose_unchecked(&r));
        for (xi, d) in x.iter_mut().zip(dx) {
            *xi += d;
        }
    }
    x
}

fn add_diagonal(
    gram: &SparseColMat<usize, f64>,
    lambda: f64,
) -> Result<SparseColMat<usize, f64>, TensorError> {
    let n = gram.ncols();
    let mut triplets = Vec::with_capacity(gram.compute_nnz() + n);
    for j in 0..n {
        let rows = gram.row_idx_of_col_raw(j);
        let vals = gram.val_of_col(j);
        for (&i, &v) in rows.iter().zip(vals) {
            triplets.push(Triplet::new(i, j, v));
        }
        triplets.push(Triplet::new(j, j, lambda));
    }
    SparseColMat::try_new_from_triplets(n, n, &triplets)
        .map_err(|e| TensorError::Backend(format!("{e:?}")))
}

fn start_vector(n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n)
        .map(|i| 1.0 + ((i * 2654435761) % 1000) as f64 * 1e-3)
        .collect();
    normalized(v)
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Largest singular value of `op` by power iteration on `op^T op`.
fn power_iteration(op: &LinearOperator) -> f64 {
    let mut v = start_vector(op.cols());
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERS {
        let w = op.apply_transpose_unchecked(&op.apply_unchecked(&v));
        lambda = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if lambda == 0.0 {
            return 0.0;
        }
        v = normalized(w);
    }
    lambda.sqrt()
}

/// Smallest singular value by inverse iteration with the Cholesky factor.
fn inverse_iteration(llt: &SparseLlt, n: usize) -> f64 {
    let mut v = start_vector(n);
    let mut mu = f64::INFINITY;
    for _ in 0..INVERSE_ITERS {
        let w = solve_with(llt, &v);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return 0.0;
        }
        mu = 1.0 / norm;
        v = w.into_iter().map(|x| x / norm).collect();
    }
    mu.sqrt()
}
