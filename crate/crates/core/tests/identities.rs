use coca::credit::{
    contribution_profile, redistribute, similarity_series, window_ranges, window_smooth, Method, SimilarityMetric,
    WeightOptions,
};
use coca::mdp::Trajectory;
use coca::norm::{normalize_stage1, normalize_stage2};
use coca::trainer::reward_to_go;
use coca::Context;
use proptest::prelude::*;

fn trajectory(latents: Vec<Vec<f64>>, reward: f64) -> Trajectory {
    let horizon = latents.len() - 1;
    Trajectory {
        context: Context::one_hot(0, 1).unwrap(),
        latents,
        logprobs: vec![0.0; horizon],
        terminal_reward: reward,
    }
}

fn latents_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=30, 1usize..=4)
        .prop_flat_map(|(t, d)| prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), t + 1))
}

proptest! {
    #[test]
    fn reward_to_go_rearranges_the_double_sum(
        (w, f) in (1usize..=64).prop_flat_map(|t| (
            prop::collection::vec(-1.0f64..1.0, t),
            prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), t),
        )),
        r in -4.0f64..4.0,
    ) {
        // sum_t' (w_t' r) sum_{t <= t'} f_t  versus  sum_t (sum_{t' >= t} w_t') r f_t
        let mut lhs = [0.0; 3];
        let mut prefix = [0.0; 3];
        for (wt, ft) in w.iter().zip(&f) {
            for j in 0..3 {
                prefix[j] += ft[j];
                lhs[j] += wt * r * prefix[j];
            }
        }
        let coeff = reward_to_go(&w, r);
        let mut rhs = [0.0; 3];
        for (c, ft) in coeff.iter().zip(&f) {
            for j in 0..3 {
                rhs[j] += c * ft[j];
            }
        }
        let scale: f64 = w.iter().map(|x| x.abs()).sum::<f64>() * r.abs() * f.iter().flatten().map(|x| x.abs()).sum::<f64>();
        for j in 0..3 {
            prop_assert!((lhs[j] - rhs[j]).abs() <= 1e-12 * scale.max(1.0));
        }
    }

    #[test]
    fn increments_telescope(latents in latents_strategy(), w in 1usize..=8) {
        let t = trajectory(latents, 1.0);
        let w = w.min(t.horizon());
        let sim = similarity_series(&t, SimilarityMetric::Cosine, None).unwrap();
        let (means, inc) = window_smooth(&sim, w).unwrap();
        let total: f64 = inc.iter().sum();
        prop_assert!((total - (means.last().unwrap() - sim[0])).abs() < 1e-12);
        if w == 1 {
            prop_assert!((total - (sim[t.horizon()] - sim[0])).abs() < 1e-12);
        }
    }

    #[test]
    fn windows_partition_the_steps(horizon in 1usize..=60, w in 1usize..=60) {
        let w = w.min(horizon);
        let ranges = window_ranges(horizon, w).unwrap();
        let flat: Vec<usize> = ranges.iter().flat_map(|r| r.clone()).collect();
        prop_assert_eq!(flat, (0..horizon).collect::<Vec<_>>());
        prop_assert_eq!(ranges.len(), horizon.div_ceil(w));
    }

    #[test]
    fn cosine_profile_ignores_positive_scale(latents in latents_strategy(), k in 0.01f64..100.0) {
        let a = trajectory(latents.clone(), 1.0);
        let b = trajectory(latents.iter().map(|x| x.iter().map(|v| v * k).collect()).collect(), 1.0);
        let sa = similarity_series(&a, SimilarityMetric::Cosine, None).unwrap();
        let sb = similarity_series(&b, SimilarityMetric::Cosine, None).unwrap();
        for (x, y) in sa.iter().zip(&sb) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn coca_and_uca_conserve_reward(latents in latents_strategy(), r in -5.0f64..5.0, w in 1usize..=6) {
        let t = trajectory(latents, r);
        let horizon = t.horizon();
        let w = w.min(horizon);
        let profile = contribution_profile(&t, SimilarityMetric::Cosine, w, WeightOptions::default(), None).unwrap();
        let coca = redistribute(r, horizon, Some(&profile.weights), Method::Coca, 1.0).unwrap();
        if !profile.degenerate {
            let total: f64 = coca.per_step.iter().sum();
            let scale = profile.weights.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
            prop_assert!((total - r).abs() <= 1e-9 * scale);
        }
        let uca = redistribute(r, horizon, None, Method::Uca, 1.0).unwrap();
        prop_assert!(uca.per_step.iter().all(|v| *v == r / horizon as f64));
    }

    #[test]
    fn beta_endpoints_match_pure_methods(latents in latents_strategy(), r in -5.0f64..5.0) {
        let t = trajectory(latents, r);
        let horizon = t.horizon();
        let p = contribution_profile(&t, SimilarityMetric::Cosine, 1, WeightOptions::default(), None).unwrap();
        let w = Some(p.weights.as_slice());
        let coca = redistribute(r, horizon, w, Method::Coca, 1.0).unwrap();
        let sparse = redistribute(r, horizon, None, Method::Sparse, 1.0).unwrap();
        prop_assert_eq!(redistribute(r, horizon, w, Method::BetaMix, 1.0).unwrap().per_step, coca.per_step);
        prop_assert_eq!(redistribute(r, horizon, w, Method::BetaMix, 0.0).unwrap().per_step, sparse.per_step);
    }

    #[test]
    fn stage2_scale_is_total_variance(
        m in (1usize..=8, 2usize..=12).prop_flat_map(|(g, t)| prop::collection::vec(prop::collection::vec(-10.0f64..10.0, t), g))
    ) {
        let (_, stats) = normalize_stage2(&m).unwrap();
        let flat: Vec<f64> = m.iter().flatten().copied().collect();
        let n = flat.len() as f64;
        let mean = flat.iter().sum::<f64>() / n;
        let var = flat.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        prop_assert!((stats.sigma_p * stats.sigma_p - var).abs() < 1e-9);
        prop_assert!((stats.mu_p - mean).abs() < 1e-12);
    }

    #[test]
    fn stage1_preserves_ranking(rs in prop::collection::vec(-100.0f64..100.0, 2..40)) {
        let (z, _) = normalize_stage1(&rs).unwrap();
        for i in 0..rs.len() {
            for j in 0..rs.len() {
                if rs[i] < rs[j] {
                    prop_assert!(z[i] <= z[j]);
                }
            }
        }
    }
}
