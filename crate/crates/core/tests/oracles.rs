mod common;

use common::*;
use ctmsm::intensity::{cumulative_intensity_between, Model, Process, World};
use ctmsm::msm::{exposure_integral, fit_msm, MsmParams};
use ctmsm::paths::TreatmentPath;
use ctmsm::scenario::simulation_preset;
use ctmsm::simulator::simulate_dataset;
use rand_distr::{Distribution, StandardNormal};

#[test]
fn exposure_matches_quadrature() {
    let worst = exposure_oracle_max_rel(1, 100);
    assert!(worst <= 1e-8, "max relative error {worst:e}");
}

#[test]
fn worked_exposure_value() {
    let c = worked_exposure();
    assert!((8.28..=8.30).contains(&c), "{c}");
    assert!((0.289..=0.291).contains(&(0.035 * c)));
}

#[test]
fn exposure_without_decay_is_dose_time_area() {
    let path = TreatmentPath::from_pairs(&[(1.0, 2.0), (3.0, 0.5)], 6.0);
    let x = exposure_integral(&path, 6.0, 0.0).unwrap();
    assert!((x - (2.0 * 2.0 + 0.5 * 3.0)).abs() < 1e-12);
}

#[test]
fn cumulative_intensity_matches_quadrature() {
    let worst = intensity_oracle_max_rel(2, 100);
    assert!(worst <= 1e-8, "max relative error {worst:e}");
}

#[test]
fn cumulative_intensity_is_additive() {
    let c = simulation_preset(0.3);
    let data = simulate_dataset(&c, World::Observational, 20, 3).unwrap();
    let model = Model::Observational(&c.obs_params);
    for t in &data {
        for process in [Process::Treatment, Process::Termination] {
            let mid = 0.37 * t.t_max;
            let a = cumulative_intensity_between(model, process, &t.a_path, &t.l_path, &t.z, 1.0, 0.0, mid).unwrap();
            let b = cumulative_intensity_between(model, process, &t.a_path, &t.l_path, &t.z, 1.0, mid, t.t_max).unwrap();
            let whole =
                cumulative_intensity_between(model, process, &t.a_path, &t.l_path, &t.z, 1.0, 0.0, t.t_max).unwrap();
            assert!((a + b - whole).abs() <= 1e-12 * whole.max(1.0));
        }
    }
}

#[test]
fn marginal_loglik_matches_enumeration() {
    for seed in [4, 5, 6] {
        let err = enumeration_oracle_abs(seed);
        assert!(err <= 1e-10, "seed {seed}: {err:e}");
    }
}

#[test]
fn msm_gradient_matches_finite_differences() {
    let worst = msm_gradient_deviation(7);
    assert!(worst <= 1e-5, "{worst:e}");
}

#[test]
fn msm_fit_recovers_low_noise_parameters() {
    let c = simulation_preset(0.0);
    let mut data = simulate_dataset(&c, World::Experimental, 300, 8).unwrap();
    let truth = MsmParams { eta1: 0.7, eta2: 1.3, eta3: 3.0, sigma: 0.01 };
    let mut g = rng(8);
    for t in data.iter_mut() {
        let e: f64 = StandardNormal.sample(&mut g);
        t.y = truth.eta1 + truth.eta2 * exposure_integral(&t.a_path, t.t_max, truth.eta3).unwrap() + truth.sigma * e;
    }
    let fit = fit_msm(&data, &vec![1.0; data.len()], 50.0).unwrap();
    assert!((fit.params.eta1 - truth.eta1).abs() < 0.01, "{:?}", fit.params);
    assert!((fit.params.eta2 - truth.eta2).abs() < 0.01);
    assert!((fit.params.eta3 - truth.eta3).abs() < 0.05);
    assert!((fit.params.sigma / truth.sigma - 1.0).abs() < 0.2);
}
