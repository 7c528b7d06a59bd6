mod common;

use common::*;
use ctmsm::estimators::EstimatorKind;
use ctmsm::intensity::{log_lik_covariate, log_lik_outcome, log_lik_treatment, log_prior_confounder, Model, World};
use ctmsm::io::{parse_trajectory_line, trajectory_to_line};
use ctmsm::msm::{exposure_integral, fit_msm, MsmParams};
use ctmsm::paths::{CovariatePath, Trajectory};
use ctmsm::posterior::{conditional_posterior_u, log_posterior_obs, marginal_loglik_obs, Priors};
use ctmsm::scenario::simulation_preset;
use ctmsm::simulator::simulate_dataset;
use ctmsm::study::{compute_metrics, ReplicationEstimate};
use ctmsm::weights::{draw_bayesian_bootstrap, stabilized_weights, truncate_weights, UPolicy, WeightedSample};
use proptest::prelude::*;

fn dataset(delta: f64, n: usize, seed: u64) -> (ctmsm::scenario::ScenarioConfig, Vec<Trajectory>) {
    let c = simulation_preset(delta);
    let d = simulate_dataset(&c, World::Observational, n, seed).unwrap();
    (c, d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn jsonl_round_trip_is_byte_identical(seed in any::<u64>(), delta in 0.0..0.5f64) {
        let (_, data) = dataset(delta, 4, seed);
        for t in &data {
            for rec in [t.clone(), t.without_u()] {
                let line = trajectory_to_line(&rec).unwrap();
                let back = parse_trajectory_line(&line, 1).unwrap();
                prop_assert_eq!(&back, &rec);
                prop_assert_eq!(trajectory_to_line(&back).unwrap(), line);
            }
        }
    }

    #[test]
    fn dose_at_agrees_with_segments(seed in any::<u64>(), probe in 0.0..1.2f64) {
        let mut g = rng(seed);
        let (path, t_max) = random_path(&mut g);
        let segs = path.segments(t_max).unwrap();
        let total: f64 = segs.iter().map(|s| s.end - s.start).sum();
        prop_assert!((total - t_max).abs() <= 1e-12 * t_max.max(1.0));
        let t = probe * t_max;
        let expected = if t > t_max {
            0.0
        } else {
            segs.iter()
                .find(|s| (s.start <= t && t < s.end) || (t == t_max && s.end == t_max))
                .map(|s| s.dose)
                .unwrap()
        };
        prop_assert_eq!(path.dose_at(t).unwrap(), expected);
    }

    #[test]
    fn exposure_is_monotone_and_continuous_in_decay(seed in any::<u64>(), a in 0.0..20.0f64, b in 0.0..20.0f64) {
        let mut g = rng(seed);
        let (path, t_max) = random_path(&mut g);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(exposure_integral(&path, t_max, hi).unwrap() <= exposure_integral(&path, t_max, lo).unwrap() + 1e-12);
        let area: f64 = path.segments(t_max).unwrap().iter().map(|s| s.dose.abs() * (s.end - s.start)).sum();
        let at_zero: f64 = path.segments(t_max).unwrap().iter().map(|s| s.dose * (s.end - s.start)).sum();
        prop_assert!((exposure_integral(&path, t_max, 1e-8).unwrap() - at_zero).abs() <= 1e-6 * area.max(1e-300));
    }

    #[test]
    fn msm_fit_ignores_weight_scale(seed in any::<u64>(), scale in 1e-3..1e3f64) {
        let (_, data) = dataset(0.3, 40, seed);
        let mut g = rng(seed);
        let w: Vec<f64> = (0..data.len()).map(|_| rand::Rng::random_range(&mut g, 0.1..4.0)).collect();
        let ws: Vec<f64> = w.iter().map(|x| x * scale).collect();
        let a = fit_msm(&data, &w, 50.0).unwrap().params;
        let b = fit_msm(&data, &ws, 50.0).unwrap().params;
        prop_assert!((a.eta1 - b.eta1).abs() <= 1e-6 * a.eta1.abs().max(1.0), "{:?} {:?}", a, b);
        prop_assert!((a.eta2 - b.eta2).abs() <= 1e-6 * a.eta2.abs().max(1.0));
        prop_assert!((a.eta3 - b.eta3).abs() <= 1e-4 * a.eta3.max(1.0));
    }

    #[test]
    fn weights_are_positive_and_finite(seed in any::<u64>(), delta in 0.0..0.6f64) {
        let (c, data) = dataset(delta, 12, seed);
        let imputed: Vec<u8> = data.iter().map(|t| 1 - t.u.unwrap()).collect();
        for policy in [UPolicy::Ignore, UPolicy::Observed, UPolicy::Imputed(imputed.clone()), UPolicy::Marginalized] {
            let s = stabilized_weights(&data, &c.obs_params, &c.exp_params, &policy).unwrap();
            prop_assert_eq!(s.weights.len(), data.len());
            prop_assert!(s.weights.iter().all(|w| *w > 0.0 && w.is_finite()));
            prop_assert!((s.pi.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn truncation_is_monotone(ws in prop::collection::vec(1e-3..1e4f64, 1..60), p in 1.0..100.0f64, q in 1.0..100.0f64) {
        let s = WeightedSample::new(ws.clone(), "test");
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        let a = truncate_weights(&s, lo).unwrap();
        let b = truncate_weights(&s, hi).unwrap();
        prop_assert!(a.max_weight() <= b.max_weight());
        for i in 0..ws.len() {
            prop_assert!(a.weights[i] <= b.weights[i] && b.weights[i] <= ws[i]);
        }
        prop_assert_eq!(truncate_weights(&s, 100.0).unwrap().weights, ws);
    }

    #[test]
    fn bayesian_bootstrap_is_a_rescaled_multinomial(seed in any::<u64>(), n in 1usize..500) {
        let pi = draw_bayesian_bootstrap(n, &mut rng(seed)).unwrap();
        prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for p in pi {
            let k = p * n as f64;
            prop_assert!(p >= 0.0 && (k - k.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn mixture_bounds_hold_per_subject(seed in any::<u64>(), delta in 0.0..0.6f64) {
        let (c, data) = dataset(delta, 5, seed);
        let th = &c.obs_params;
        let model = Model::Observational(th);
        for t in data.iter().map(Trajectory::without_u) {
            let single = [t.clone()];
            let marginal = marginal_loglik_obs(&single, th).unwrap();
            let x = exposure_integral(&t.a_path, t.t_max, th.outcome.kernel_decay).unwrap();
            let shared = marginal
                - ctmsm::intensity::log_lik_termination(&t, model).unwrap()
                - log_lik_covariate(&t, th).unwrap();
            let complete: Vec<f64> = [0u8, 1]
                .iter()
                .map(|&u| {
                    let uf = f64::from(u);
                    log_lik_treatment(&t, model, uf).unwrap() + log_lik_outcome(&t, th, uf, x).unwrap()
                })
                .collect();
            let (lo, hi) = (complete[0].min(complete[1]), complete[0].max(complete[1]));
            prop_assert!(lo - 1e-9 <= shared && shared <= hi + 1e-9, "{} not in [{}, {}]", shared, lo, hi);
            let p = conditional_posterior_u(&t, th);
            prop_assert!((0.0..=1.0).contains(&p));
            let lp: Vec<f64> = [0u8, 1].iter().map(|&u| log_prior_confounder(u, th.confounder_prob).unwrap()).collect();
            let expected = 1.0 / (1.0 + (complete[0] + lp[0] - complete[1] - lp[1]).exp());
            prop_assert!((p - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn conditional_u_is_monotone_in_the_outcome(seed in any::<u64>(), shift in 0.01..2.0f64) {
        let (c, data) = dataset(0.3, 3, seed);
        let th = &c.obs_params;
        for t in data.iter().map(Trajectory::without_u) {
            let mut up = t.clone();
            up.y += shift;
            prop_assert!(conditional_posterior_u(&up, th) >= conditional_posterior_u(&t, th));
        }
    }

    #[test]
    fn covariate_block_factorizes(seed in any::<u64>(), dl in -0.3..0.3f64, ds in -0.3..0.3f64) {
        let (c, data) = dataset(0.3, 6, seed);
        let obs: Vec<Trajectory> = data.iter().map(Trajectory::without_u).collect();
        let th = c.obs_params.clone();
        let mut moved = th.clone();
        moved.covariate.lag += dl;
        moved.covariate.sigma *= ds.exp();
        let priors = Priors::flat();
        let diff = log_posterior_obs(&obs, &moved, &priors) - log_posterior_obs(&obs, &th, &priors);
        let cov = |p: &ctmsm::params::ObsWorldParams| -> f64 {
            obs.iter().map(|t| log_lik_covariate(t, p).unwrap()).sum::<f64>() - p.covariate.sigma.ln()
        };
        prop_assert!((diff - (cov(&moved) - cov(&th))).abs() < 1e-8 * diff.abs().max(1.0));
    }

    #[test]
    fn u_free_treatment_makes_imputation_irrelevant(seed in any::<u64>()) {
        let (mut c, data) = dataset(0.0, 10, seed);
        c.obs_params.outcome.confounder = 0.0;
        let ign = stabilized_weights(&data, &c.obs_params, &c.exp_params, &UPolicy::Ignore).unwrap();
        let flipped: Vec<u8> = data.iter().map(|t| 1 - t.u.unwrap()).collect();
        let imp = stabilized_weights(&data, &c.obs_params, &c.exp_params, &UPolicy::Imputed(flipped)).unwrap();
        let mar = stabilized_weights(&data, &c.obs_params, &c.exp_params, &UPolicy::Marginalized).unwrap();
        for i in 0..data.len() {
            prop_assert!((ign.weights[i] - imp.weights[i]).abs() <= 1e-12 * ign.weights[i]);
            prop_assert!((ign.weights[i] - mar.weights[i]).abs() <= 1e-10 * ign.weights[i]);
        }
    }

    #[test]
    fn treatment_loglik_ignores_spurious_breakpoints(seed in any::<u64>(), frac in 0.01..0.99f64) {
        let (c, data) = dataset(0.3, 4, seed);
        let model = Model::Observational(&c.obs_params);
        for t in &data {
            let at = frac * t.t_max;
            if t.l_path.grid.iter().any(|&g| (g - at).abs() < 1e-9) {
                continue;
            }
            let mut pairs: Vec<(f64, f64)> = t.l_path.grid.iter().copied().zip(t.l_path.values.iter().copied()).collect();
            pairs.push((at, t.l_path.value_at(at)));
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut refined = t.clone();
            refined.l_path = CovariatePath::from_pairs(&pairs);
            for u in [0.0, 1.0] {
                let a = log_lik_treatment(t, model, u).unwrap();
                let b = log_lik_treatment(&refined, model, u).unwrap();
                prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn metrics_algebra(points in prop::collection::vec((-3.0..3.0f64, 0.0..2.0f64), 1..30), truth in -1.0..1.0f64) {
        let results: Vec<ReplicationEstimate> = points
            .iter()
            .map(|&(p, h)| ReplicationEstimate {
                point: MsmParams { eta1: 0.0, eta2: p, eta3: p + 1.0, sigma: 1.0 },
                sd: [h; 4],
                interval_95: [(p - h, p + h), (p - h, p + h), (p + 1.0 - h, p + 1.0 + h), (0.5, 1.5)],
                max_weight: None,
            })
            .collect();
        let t = MsmParams { eta1: 0.0, eta2: truth, eta3: truth + 1.0, sigma: 1.0 };
        let rows = compute_metrics("s", EstimatorKind::Naive, &results, &t).unwrap();
        let mean: f64 = points.iter().map(|p| p.0).sum::<f64>() / points.len() as f64;
        for r in &rows {
            prop_assert!((0.0..=100.0).contains(&r.cp95));
            prop_assert!(r.lci >= 0.0);
        }
        prop_assert!((rows[0].bias + truth - mean).abs() <= 1e-12);
    }
}

#[test]
fn equal_worlds_give_unit_weights() {
    let worst = weight_identity_deviation(300, 9);
    assert!(worst <= 1e-10, "{worst:e}");
    let c = equal_worlds();
    let data = simulate_dataset(&c, World::Observational, 100, 10).unwrap();
    let w = stabilized_weights(&data, &c.obs_params, &c.exp_params, &UPolicy::Ignore).unwrap();
    let weighted = fit_msm(&data, &w.weights, 50.0).unwrap().params;
    let naive = fit_msm(&data, &vec![1.0; data.len()], 50.0).unwrap().params;
    assert!((weighted.eta3 - naive.eta3).abs() < 1e-5, "{weighted:?} {naive:?}");
    assert!((weighted.eta2 - naive.eta2).abs() < 1e-5, "{weighted:?} {naive:?}");
}
