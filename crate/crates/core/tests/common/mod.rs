#![allow(dead_code)]

use ctmsm::intensity::{HistoryState, Model, Process};
use ctmsm::paths::{CovariatePath, TreatmentPath, Trajectory};
use ctmsm::scenario::{simulation_preset, ScenarioConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn simpson_step<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let diff = left + right - whole;
    if depth == 0 || diff.abs() <= 15.0 * tol {
        return left + right + diff / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Adaptive Simpson quadrature of a smooth integrand on `[a, b]`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(&f, a, b, fa, fm, fb, whole, tol, 40)
}

/// Breakpoints of `[t0, t1]` at every jump and covariate grid time.
pub fn breakpoints(a: &TreatmentPath, l: Option<&CovariatePath>, t0: f64, t1: f64) -> Vec<f64> {
    let mut cuts = vec![t0, t1];
    cuts.extend(a.jumps.iter().map(|j| j.time).filter(|&t| t > t0 && t < t1));
    if let Some(l) = l {
        cuts.extend(l.grid.iter().copied().filter(|&t| t > t0 && t < t1));
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    cuts
}

/// Exposure by quadrature on each constant-dose piece.
pub fn exposure_by_quadrature(a: &TreatmentPath, t_max: f64, eta3: f64) -> f64 {
    let cuts = breakpoints(a, None, 0.0, t_max);
    cuts.windows(2)
        .map(|w| {
            let dose = a.dose_at(0.5 * (w[0] + w[1])).unwrap();
            let tol = 1e-14 * (w[1] - w[0]).max(1e-3);
            adaptive_simpson(|t| dose * (-eta3 * (t_max - t) / t_max).exp(), w[0], w[1], tol)
        })
        .sum()
}

/// Cumulative intensity by quadrature, holding the history state at each piece's midpoint.
pub fn intensity_by_quadrature(model: Model, process: Process, traj: &Trajectory, u: f64, t_end: f64) -> f64 {
    let cuts = breakpoints(&traj.a_path, Some(&traj.l_path), 0.0, t_end);
    cuts.windows(2)
        .map(|w| {
            let mid = 0.5 * (w[0] + w[1]);
            let dose = traj.a_path.dose_at(mid).unwrap();
            let cov = traj.l_path.value_at(mid);
            let rate = |t: f64| {
                model.rate(process, &HistoryState { t, dose_left: dose, covariate: cov, baseline: &traj.z, u })
            };
            let scale = rate(mid) * (w[1] - w[0]);
            adaptive_simpson(rate, w[0], w[1], 1e-14 * scale.max(1e-12))
        })
        .sum()
}

/// Piecewise-constant path with up to 8 jumps at positive doses on `(0, t_max)`.
pub fn random_path(rng: &mut ChaCha8Rng) -> (TreatmentPath, f64) {
    let t_max = rng.random_range(0.5..20.0);
    let k = rng.random_range(0..=8);
    let mut times: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..t_max)).filter(|&t| t > 0.0).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let pairs: Vec<(f64, f64)> = times.into_iter().map(|t| (t, rng.random_range(0.5..5.0))).collect();
    (TreatmentPath::from_pairs(&pairs, t_max), t_max)
}

/// The simulation scenario with identical interventional parts in both worlds.
pub fn equal_worlds() -> ScenarioConfig {
    let mut c = simulation_preset(0.0);
    c.obs_params = c.exp_params.as_observational(&c.obs_params);
    c
}

pub fn workspace_path(rel: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

/// Largest relative error of the closed-form exposure against quadrature over `count`
/// random paths.
pub fn exposure_oracle_max_rel(seed: u64, count: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for k in 0..count {
        let (path, t_max) = random_path(&mut r);
        let eta3 = if k % 10 == 0 { 0.0 } else { r.random_range(0.01..30.0) };
        let exact = ctmsm::msm::exposure_integral(&path, t_max, eta3).unwrap();
        let quad = exposure_by_quadrature(&path, t_max, eta3);
        let rel = if quad == 0.0 { exact.abs() } else { ((exact - quad) / quad).abs() };
        worst = worst.max(rel);
    }
    worst
}

/// Exposure of `a = 3` on `[4, 12]` with `t_max = 12` and decay 4.051.
pub fn worked_exposure() -> f64 {
    let path = TreatmentPath::from_pairs(&[(4.0, 3.0)], 12.0);
    ctmsm::msm::exposure_integral(&path, 12.0, 4.051).unwrap()
}

/// Largest relative error of the exact cumulative intensities against quadrature over
/// `count` simulated subjects, cycling through both processes and both worlds.
pub fn intensity_oracle_max_rel(seed: u64, count: usize) -> f64 {
    let c = simulation_preset(0.3);
    let data = ctmsm::simulator::simulate_dataset(&c, ctmsm::intensity::World::Observational, count, seed).unwrap();
    let mut r = rng(seed ^ 0xabc);
    let mut worst: f64 = 0.0;
    for (k, traj) in data.iter().enumerate() {
        let model = if k % 2 == 0 { Model::Observational(&c.obs_params) } else { Model::Experimental(&c.exp_params) };
        let process = if (k / 2) % 2 == 0 { Process::Treatment } else { Process::Termination };
        let u = f64::from(r.random::<bool>());
        let t_end = if k % 3 == 0 { traj.t_max } else { r.random_range(0.0..traj.t_max) };
        let exact = ctmsm::intensity::cumulative_intensity(model, process, &traj.a_path, &traj.l_path, &traj.z, u, t_end).unwrap();
        let quad = intensity_by_quadrature(model, process, traj, u, t_end);
        if quad > 0.0 {
            worst = worst.max(((exact - quad) / quad).abs());
        }
    }
    worst
}

/// Absolute error of the per-subject marginal likelihood against joint enumeration of all
/// `2^3` confounder configurations.
pub fn enumeration_oracle_abs(seed: u64) -> f64 {
    use ctmsm::intensity::{log_lik_covariate, log_lik_outcome, log_lik_termination, log_lik_treatment, log_prior_confounder};
    let c = simulation_preset(0.3);
    let data: Vec<Trajectory> = ctmsm::simulator::simulate_dataset(&c, ctmsm::intensity::World::Observational, 3, seed)
        .unwrap()
        .iter()
        .map(Trajectory::without_u)
        .collect();
    let th = &c.obs_params;
    let model = Model::Observational(th);
    let mut terms = Vec::new();
    for mask in 0u8..8 {
        let mut acc = 0.0;
        for (i, t) in data.iter().enumerate() {
            let u = (mask >> i) & 1;
            let uf = f64::from(u);
            let x = ctmsm::msm::exposure_integral(&t.a_path, t.t_max, th.outcome.kernel_decay).unwrap();
            acc += log_lik_treatment(t, model, uf).unwrap()
                + log_lik_termination(t, model).unwrap()
                + log_lik_covariate(t, th).unwrap()
                + log_lik_outcome(t, th, uf, x).unwrap()
                + log_prior_confounder(u, th.confounder_prob).unwrap();
        }
        terms.push(acc);
    }
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let oracle = m + terms.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let got = ctmsm::posterior::marginal_loglik_obs(&data, th).unwrap();
    (got - oracle).abs()
}

/// Largest deviation between the analytic MSM gradient and central differences.
pub fn msm_gradient_deviation(seed: u64) -> f64 {
    let c = simulation_preset(0.3);
    let data = ctmsm::simulator::simulate_dataset(&c, ctmsm::intensity::World::Observational, 200, seed).unwrap();
    let mut r = rng(seed);
    let w: Vec<f64> = (0..data.len()).map(|_| r.random_range(0.2..3.0)).collect();
    let mut worst: f64 = 0.0;
    for p in [
        ctmsm::msm::MsmParams { eta1: 1.5, eta2: 1.0, eta3: 2.0, sigma: 0.6 },
        ctmsm::msm::MsmParams { eta1: 0.3, eta2: -0.4, eta3: 0.05, sigma: 1.3 },
        ctmsm::msm::MsmParams { eta1: 2.0, eta2: 0.2, eta3: 12.0, sigma: 2.0 },
    ] {
        worst = worst.max(ctmsm::msm::profile_objective_grad_check(&data, &w, &p).unwrap());
    }
    worst
}

/// Posterior draws of the outcome intercept with every other coordinate frozen at its
/// true value and no confounder effect on the outcome, plus the analytic normal
/// posterior `(mean, sd)` under the flat prior.
pub fn conjugate_draws(n: usize, draws: usize, seed: u64) -> (Vec<f64>, f64, f64) {
    use ctmsm::intensity::PreparedSubject;
    use ctmsm::posterior::{sample_posterior_from, Block, Priors, SamplerConfig};
    let mut c = simulation_preset(0.3);
    c.obs_params.outcome.confounder = 0.0;
    let data: Vec<Trajectory> = ctmsm::simulator::simulate_dataset(&c, ctmsm::intensity::World::Observational, n, seed)
        .unwrap()
        .iter()
        .map(Trajectory::without_u)
        .collect();
    let th = c.obs_params.clone();
    let mut rest = th.clone();
    rest.outcome.intercept = 0.0;
    let resid: Vec<f64> = data
        .iter()
        .map(|t| {
            let s = PreparedSubject::new(t);
            t.y - s.outcome_mean(&rest, 0.0, s.outcome_exposure(&rest))
        })
        .collect();
    let nf = n as f64;
    let mean = resid.iter().sum::<f64>() / nf;
    let sd = th.outcome.sigma / nf.sqrt();

    let mut cfg = SamplerConfig::for_draws(draws, 1000, 10, seed);
    cfg.frozen = Block::ALL.iter().filter(|b| **b != Block::Outcome).map(|b| b.name().to_string()).collect();
    cfg.frozen.extend(
        Block::Outcome
            .coordinates(th.p_z())
            .into_iter()
            .filter(|k| k != "intercept")
            .map(|k| format!("outcome.{k}")),
    );
    let sample = sample_posterior_from(&data, &Priors::flat(), &cfg, th, c.exp_params.clone()).unwrap();
    (sample.draws.iter().map(|d| d.theta.outcome.intercept).collect(), mean, sd)
}

/// Kolmogorov-Smirnov distance between a sample and `N(mean, sd^2)`.
pub fn ks_normal(xs: &[f64], mean: f64, sd: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    let nd = Normal::new(mean, sd).unwrap();
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = nd.cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Simulation-based calibration of `P(U = 1)` under its uniform prior with every other
/// coordinate frozen at its true value. Returns the rank of the true value among
/// `draws` posterior draws for each replication.
pub fn sbc_ranks(replications: usize, n: usize, draws: usize, seed: u64) -> Vec<usize> {
    use ctmsm::posterior::{sample_posterior_from, Block, Priors, SamplerConfig};
    use rayon::prelude::*;
    (0..replications)
        .into_par_iter()
        .map(|r| {
            let mut g = rng(ctmsm::rng::derive_seed(seed, &[r as u64]));
            let mut c = simulation_preset(0.3);
            let truth: f64 = g.random_range(0.0..1.0);
            c.obs_params.confounder_prob = truth;
            let data: Vec<Trajectory> =
                ctmsm::simulator::simulate_dataset(&c, ctmsm::intensity::World::Observational, n, g.random())
                    .unwrap()
                    .iter()
                    .map(Trajectory::without_u)
                    .collect();
            let mut cfg = SamplerConfig::for_draws(draws, 300, 5, g.random());
            cfg.frozen = Block::ALL
                .iter()
                .filter(|b| **b != Block::ConfounderProb)
                .map(|b| b.name().to_string())
                .collect();
            let sample = sample_posterior_from(&data, &Priors::flat(), &cfg, c.obs_params.clone(), c.exp_params.clone()).unwrap();
            sample.draws.iter().filter(|d| d.theta.confounder_prob < truth).count()
        })
        .collect()
}

/// Chi-square statistic of SBC ranks in `0..=draws` pooled into `bins` equal bins, with
/// the `1 - level` critical value.
pub fn rank_chi_square(ranks: &[usize], draws: usize, bins: usize, level: f64) -> (f64, f64) {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    assert_eq!((draws + 1) % bins, 0);
    let per = (draws + 1) / bins;
    let mut counts = vec![0.0; bins];
    for &r in ranks {
        counts[r / per] += 1.0;
    }
    let expected = ranks.len() as f64 / bins as f64;
    let stat = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let crit = ChiSquared::new((bins - 1) as f64).unwrap().inverse_cdf(1.0 - level);
    (stat, crit)
}

/// Largest `|w - 1|` for every confounder policy on an equal-worlds dataset.
pub fn weight_identity_deviation(n: usize, seed: u64) -> f64 {
    use ctmsm::weights::{stabilized_weights, UPolicy};
    let c = equal_worlds();
    let data = ctmsm::simulator::simulate_dataset(&c, ctmsm::intensity::World::Observational, n, seed).unwrap();
    let imputed: Vec<u8> = data.iter().map(|t| t.u.unwrap()).collect();
    let mut worst: f64 = 0.0;
    for policy in [UPolicy::Ignore, UPolicy::Observed, UPolicy::Imputed(imputed), UPolicy::Marginalized] {
        let w = stabilized_weights(&data, &c.obs_params, &c.exp_params, &policy).unwrap();
        worst = worst.max(w.weights.iter().map(|x| (x - 1.0).abs()).fold(0.0, f64::max));
    }
    worst
}
