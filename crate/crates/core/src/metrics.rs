//! Reconstruction quality: MSE, PSNR and batch success counting.

use serde::Serialize;

use crate::attack::ReconstructionResult;
use crate::tensor::{Tensor, TensorError};

/// Default MSE bound for counting a batch member as recovered, on images
/// scaled to `[0, 1]`.
pub const DEFAULT_SUCCESS_MSE: f64 = 1e-4;

/// PSNR reported for identical tensors.
pub const PSNR_EXACT: f64 = f64::INFINITY;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricRecord {
    pub mse: f64,
    /// `None` when serialized means an exact match (infinite PSNR).
    #[serde(serialize_with = "serialize_psnr")]
    pub psnr_db: f64,
    pub wall_time_s: f64,
}

fn serialize_psnr<S: serde::Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

impl MetricRecord {
    pub fn compare(
        truth: &Tensor,
        recovered: &Tensor,
        wall_time_s: f64,
    ) -> Result<Self, TensorError> {
        let mse = mse(truth, recovered)?;
        Ok(Self {
            mse,
            psnr_db: psnr_from_mse(mse, 1.0),
            wall_time_s,
        })
    }
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64, TensorError> {
    a.expect_same_shape(b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.len() as f64)
}

/// `10 log10(peak^2 / mse)`, or [`PSNR_EXACT`] when `mse = 0`.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        PSNR_EXACT
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64, TensorError> {
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(TensorError::InvalidTolerance(peak));
    }
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

/// One-to-one pairing of recovered inputs with truths, best first: all
/// (recovered, truth) pairs are ranked by MSE and taken in order while both
/// sides are still unmatched. Returns `(recovered, truth, mse)` triples in
/// ascending MSE. Pairs of different shapes are never matched.
pub fn match_pairs(recovered: &[&Tensor], truths: &[Tensor]) -> Vec<(usize, usize, f64)> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, r) in recovered.iter().enumerate() {
        for (j, t) in truths.iter().enumerate() {
            if let Ok(m) = mse(r, t) {
                pairs.push((m, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_r = vec![false; recovered.len()];
    let mut used_t = vec![false; truths.len()];
    let mut out = Vec::new();
    for (m, i, j) in pairs {
        if !used_r[i] && !used_t[j] {
            used_r[i] = true;
            used_t[j] = true;
            out.push((i, j, m));
        }
    }
    out
}

/// Number of truths matched by a recovered input within `mse_threshold`,
/// using the pairing of [`match_pairs`].
pub fn count_matches(recovered: &[&Tensor], truths: &[Tensor], mse_threshold: f64) -> usize {
    match_pairs(recovered, truths)
        .into_iter()
        .filter(|&(_, _, m)| m <= mse_threshold)
        .count()
}

/// [`count_matches`] over every input returned by an attack.
pub fn batch_success_count(
    result: &ReconstructionResult,
    truths: &[Tensor],
    mse_threshold: f64,
) -> usize {
    count_matches(&result.inputs(), truths, mse_threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&t(&[0.3, 0.4]), &t(&[0.3, 0.4])).unwrap(), 0.0);
        assert_eq!(mse(&t(&[0.0, 0.0]), &t(&[1.0, 1.0])).unwrap(), 1.0);
        assert_eq!(mse(&t(&[0.0, 1.0]), &t(&[1.0, 1.0])).unwrap(), 0.5);
        assert!(mse(&t(&[0.0]), &t(&[0.0, 1.0])).is_err());
    }

    #[test]
    fn psnr_examples() {
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
        assert_eq!(psnr_from_mse(1.0, 1.0), 0.0);
        assert_eq!(psnr(&t(&[0.5]), &t(&[0.5]), 1.0).unwrap(), PSNR_EXACT);
        assert!(psnr(&t(&[0.5]), &t(&[0.5]), 0.0).is_err());
    }

    #[test]
    fn matching() {
        let truths: Vec<Tensor> = (0..8).map(|i| t(&[i as f64, 0.0])).collect();
        let mut rec: Vec<Tensor> = truths
            .iter()
            .map(|x| x.try_map(|v| v + 1e-4).unwrap())
            .collect();
        rec.extend((0..92).map(|i| t(&[100.0 + i as f64, 3.0])));
        let refs: Vec<&Tensor> = rec.iter().collect();
        assert_eq!(count_matches(&refs, &truths, 1e-4), 8);
        assert_eq!(count_matches(&[], &truths, 1e-4), 0);
    }

    proptest! {
        #[test]
        fn psnr_decreases_with_mse(a in 1e-12f64..10.0, b in 1e-12f64..10.0) {
            prop_assume!(a < b);
            prop_assert!(psnr_from_mse(a, 1.0) > psnr_from_mse(b, 1.0));
        }

        #[test]
        fn matching_is_permutation_invariant(seed in 0u64..1000) {
            let vals: Vec<f64> = (0..6).map(|i| ((seed + i) as f64 * 0.77).sin()).collect();
            let truths: Vec<Tensor> = vals.iter().map(|&v| t(&[v])).collect();
            let rec: Vec<Tensor> = vals.iter().map(|&v| t(&[v + 0.005])).collect();
            let forward: Vec<&Tensor> = rec.iter().collect();
            let backward: Vec<&Tensor> = rec.iter().rev().collect();
            let mut truths_rev = truths.clone();
            truths_rev.reverse();
            let a = count_matches(&forward, &truths, 1e-4);
            prop_assert_eq!(a, count_matches(&backward, &truths, 1e-4));
            prop_assert_eq!(a, count_matches(&forward, &truths_rev, 1e-4));
        }
    }
}
