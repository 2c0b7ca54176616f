//! Two-stage per-prompt reward normalization with population statistics.

use serde::{Deserialize, Serialize};

use crate::error::{CocaError, Result};

pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mu_p: f64,
    pub sigma_p: f64,
    /// `(mean, std)` of each trajectory's dense rewards; empty for stage 1.
    pub per_sample: Vec<(f64, f64)>,
    pub epsilon: f64,
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(r^g - mu_p) / (sigma_p + eps)` over one prompt's terminal rewards.
pub fn normalize_stage1(rewards: &[f64]) -> Result<(Vec<f64>, NormStats)> {
    if rewards.len() < 2 {
        return Err(CocaError::TooFewSamples { needed: 2, actual: rewards.len() });
    }
    let (mu_p, sigma_p) = mean_std(rewards);
    let out = rewards.iter().map(|r| (r - mu_p) / (sigma_p + NORM_EPS)).collect();
    Ok((out, NormStats { mu_p, sigma_p, per_sample: Vec::new(), epsilon: NORM_EPS }))
}

/// Per-prompt, per-timestep normalization of a `G x T` dense reward matrix.
///
/// Prompt statistics are pooled from per-trajectory moments:
/// `mu_p = E_g[mu^g]`, `sigma_p^2 = E_g[(mu^g)^2 + (sigma^g)^2] - mu_p^2`.
pub fn normalize_stage2(dense: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, NormStats)> {
    if dense.is_empty() {
        return Err(CocaError::TooFewSamples { needed: 1, actual: 0 });
    }
    let horizon = dense[0].len();
    if horizon < 2 {
        return Err(CocaError::TooFewSamples { needed: 2, actual: horizon });
    }
    if let Some(row) = dense.iter().find(|r| r.len() != horizon) {
        return Err(CocaError::DimensionMismatch { expected: horizon, actual: row.len() });
    }
    let per_sample: Vec<(f64, f64)> = dense.iter().map(|r| mean_std(r)).collect();
    let g = per_sample.len() as f64;
    let mu_p = per_sample.iter().map(|(m, _)| m).sum::<f64>() / g;
    let second = per_sample.iter().map(|(m, s)| m * m + s * s).sum::<f64>() / g;
    let sigma_p = (second - mu_p * mu_p).max(0.0).sqrt();
    let out = dense.iter().map(|r| r.iter().map(|x| (x - mu_p) / (sigma_p + NORM_EPS)).collect()).collect();
    Ok((out, NormStats { mu_p, sigma_p, per_sample, epsilon: NORM_EPS }))
}

#[cfg(test)]
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn stage1_examples() {
        let (z, _) = normalize_stage1(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(z, vec![0.0; 3]);
        let (z, stats) = normalize_stage1(&[0.0, 2.0]).unwrap();
        assert_eq!((stats.mu_p, stats.sigma_p), (1.0, 1.0));
        assert!((z[0] + 1.0 / (1.0 + 1e-6)).abs() < 1e-15);
        assert!((z[1] - 1.0 / (1.0 + 1e-6)).abs() < 1e-15);
        assert!(normalize_stage1(&[4.0]).is_err());
    }

    #[test]
    fn stage2_worked_example() {
        let (z, stats) = normalize_stage2(&[vec![1.0, 3.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!(stats.per_sample, vec![(2.0, 1.0), (2.0, 0.0)]);
        assert_eq!(stats.mu_p, 2.0);
        assert!((stats.sigma_p - 0.5f64.sqrt()).abs() < 1e-12);
        let round5 = |x: f64| (x * 1e5).round() / 1e5;
        assert_eq!(round5(z[0][0]), -1.41421);
        assert_eq!(round5(z[0][1]), 1.41421);
        assert_eq!(z[1], vec![0.0, 0.0]);
    }

    #[test]
    fn stage2_degenerate_and_single_group() {
        let (z, _) = normalize_stage2(&[vec![0.3; 4], vec![0.3; 4]]).unwrap();
        assert!(z.iter().flatten().all(|v| *v == 0.0));

        let row = vec![1.0, 4.0, -2.0];
        let (z, stats) = normalize_stage2(std::slice::from_ref(&row)).unwrap();
        let (m, s) = mean_std(&row);
        assert!((stats.sigma_p - s).abs() < 1e-12);
        for (a, x) in z[0].iter().zip(&row) {
            assert!((a - (x - m) / (s + NORM_EPS)).abs() < 1e-12);
        }
        assert!(normalize_stage2(&[vec![1.0]]).is_err());
        assert!(normalize_stage2(&[vec![1.0, 2.0], vec![1.0]]).is_err());
    }

    proptest! {
        #[test]
        fn stage1_is_translation_invariant(rs in prop::collection::vec(-10.0f64..10.0, 2..20), c in -50.0f64..50.0) {
            let shifted: Vec<f64> = rs.iter().map(|r| r + c).collect();
            let (a, _) = normalize_stage1(&rs).unwrap();
            let (b, _) = normalize_stage1(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn stage1_zero_mean_unit_std(rs in prop::collection::vec(-10.0f64..10.0, 2..30)) {
            let (z, stats) = normalize_stage1(&rs).unwrap();
            let (m, s) = mean_std(&z);
            prop_assert!(m.abs() < 1e-9);
            if stats.sigma_p > 1e-2 {
                prop_assert!((s - 1.0).abs() < 1e-3);
            }
        }

        #[test]
        fn stage1_scale_equivariance(rs in prop::collection::vec(-10.0f64..10.0, 2..20), lambda in 0.1f64..10.0) {
            let scaled: Vec<f64> = rs.iter().map(|r| r * lambda).collect();
            let (a, st) = normalize_stage1(&rs).unwrap();
            let (b, _) = normalize_stage1(&scaled).unwrap();
            prop_assume!(st.sigma_p > 1e-3);
            let bound = 2.0 * NORM_EPS / (st.sigma_p * lambda.min(1.0));
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= bound * x.abs().max(1.0));
            }
        }
    }
}
