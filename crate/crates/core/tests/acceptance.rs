//! Acceptance suite: prints one PASS/FAIL line per criterion (with the individual checks
//! indented above it) and fails if any criterion fails. Criterion 4 runs three studies of
//! 50 replications each and dominates the runtime.
//!
//! Output goes straight to the process stdout so it shows without `--nocapture`.

mod common;

use std::io::Write;
use std::time::Instant;

use common::*;
use ctmsm::config::StudyConfig;
use ctmsm::estimators::{true_eta, EstimatorKind};
use ctmsm::scenario::simulation_preset;
use ctmsm::study::{metrics_to_csv, run_study, write_report, MetricsRow, Parameter, StudyReport};

macro_rules! say {
    ($($arg:tt)*) => {{
        let mut out = std::io::stdout().lock();
        writeln!(out, $($arg)*).unwrap();
        out.flush().unwrap();
    }};
}

struct Check {
    ok: bool,
    detail: String,
}

fn check(ok: bool, detail: impl Into<String>) -> Check {
    Check { ok, detail: detail.into() }
}

fn report(id: &str, title: &str, started: Instant, checks: &[Check]) -> bool {
    for c in checks {
        say!("    [{}] {}", if c.ok { "ok" } else { "FAILED" }, c.detail);
    }
    let ok = checks.iter().all(|c| c.ok);
    say!(
        "{} criterion {id}: {title} ({:.1}s)",
        if ok { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    ok
}

fn criterion_1() -> bool {
    let t = Instant::now();
    let exposure = exposure_oracle_max_rel(101, 100);
    let worked = worked_exposure();
    let intensity = intensity_oracle_max_rel(102, 100);
    let enumeration = [103, 104, 105].map(enumeration_oracle_abs).into_iter().fold(0.0, f64::max);
    let gradient = msm_gradient_deviation(106);
    report(
        "1",
        "oracle suites",
        t,
        &[
            check(exposure <= 1e-8, format!("exposure vs quadrature, 100 paths: max rel error {exposure:.2e} <= 1e-8")),
            check(
                (8.28..=8.30).contains(&worked) && (0.289..=0.291).contains(&(0.035 * worked)),
                format!("worked exposure {worked:.5} in [8.28, 8.30]; 0.035 x C = {:.5} in [0.289, 0.291]", 0.035 * worked),
            ),
            check(intensity <= 1e-8, format!("cumulative intensity vs quadrature, 100 draws: max rel error {intensity:.2e} <= 1e-8")),
            check(enumeration <= 1e-10, format!("marginal log-likelihood vs enumeration, n = 3: abs error {enumeration:.2e} <= 1e-10")),
            check(gradient <= 1e-5, format!("MSM gradient vs central differences: max deviation {gradient:.2e} <= 1e-5")),
        ],
    )
}

fn criterion_2() -> bool {
    let t = Instant::now();
    let worst = weight_identity_deviation(1000, 201);
    report(
        "2",
        "weight identity under equal worlds",
        t,
        &[check(worst <= 1e-10, format!("1000 subjects, every policy: max |w - 1| = {worst:.2e} <= 1e-10"))],
    )
}

fn criterion_3() -> bool {
    let t = Instant::now();
    let (draws, mean, sd) = conjugate_draws(200, 2000, 301);
    let ks = ks_normal(&draws, mean, sd);
    let sbc_draws = 99;
    let ranks = sbc_ranks(200, 50, sbc_draws, 302);
    let (stat, crit) = rank_chi_square(&ranks, sbc_draws, 10, 0.001);
    report(
        "3",
        "sampler gate",
        t,
        &[
            check(ks <= 0.05, format!("conjugate subcase, {} draws: KS distance {ks:.4} <= 0.05", draws.len())),
            check(
                stat < crit,
                format!("SBC for P(U = 1), n = 50, 200 replications, 10 bins: chi-square {stat:.2} < {crit:.2} (0.1% level)"),
            ),
        ],
    )
}

fn row<'a>(r: &'a StudyReport, kind: EstimatorKind, p: Parameter) -> &'a MetricsRow {
    r.rows.iter().find(|m| m.estimator == kind && m.parameter == p).expect("metrics row")
}

fn mc_se(m: &MetricsRow) -> f64 {
    m.sd / (m.replications as f64).sqrt()
}

fn criterion_4() -> bool {
    let t = Instant::now();
    let mut checks = Vec::new();
    let mut reports = Vec::new();
    for label in ["0", "0.15", "0.3"] {
        let cfg = StudyConfig::load(&workspace_path(&format!("configs/acceptance-delta-{label}.json"))).unwrap();
        let started = Instant::now();
        match run_study(&cfg) {
            Ok(r) => {
                say!("  study delta = {label} ({:.0}s), true eta = {:?}", started.elapsed().as_secs_f64(), r.summary.true_eta);
                for line in metrics_to_csv(&r.rows).lines() {
                    say!("    {line}");
                }
                reports.push((label, r));
            }
            Err(e) => checks.push(check(false, format!("study delta = {label} failed: {e}"))),
        }
    }
    let params = [Parameter::Eta2, Parameter::Eta3];
    for (label, r) in &reports {
        if *label == "0" {
            for kind in [EstimatorKind::Naive, EstimatorKind::Bct] {
                for p in params {
                    let m = row(r, kind, p);
                    checks.push(check(
                        m.bias.abs() <= 3.0 * mc_se(m),
                        format!("delta = 0, {kind} {}: |bias| {:.4} <= 3 MC SE {:.4}", p.name(), m.bias.abs(), 3.0 * mc_se(m)),
                    ));
                }
            }
        }
        if *label == "0.3" {
            for p in params {
                let (b, n) = (row(r, EstimatorKind::Bct, p), row(r, EstimatorKind::Naive, p));
                checks.push(check(
                    b.bias.abs() < n.bias.abs(),
                    format!("delta = 0.3, {}: |bias BCT| {:.4} < |bias Naive| {:.4}", p.name(), b.bias.abs(), n.bias.abs()),
                ));
            }
            let b = row(r, EstimatorKind::Bct, Parameter::Eta2);
            let n = row(r, EstimatorKind::Naive, Parameter::Eta2);
            checks.push(check(b.cp95 >= 85.0, format!("delta = 0.3, BCT CP(eta2) {}% >= 85%", b.cp95)));
            checks.push(check(n.cp95 <= 60.0, format!("delta = 0.3, Naive CP(eta2) {}% <= 60%", n.cp95)));
            let summary = |kind: EstimatorKind| r.summary.estimators.iter().find(|e| e.estimator == kind).unwrap();
            let ign = summary(EstimatorKind::IptwIgnoreU);
            let trunc = summary(EstimatorKind::IptwIgnoreUTrunc95);
            checks.push(check(
                ign.replications_with_weight_over_100 >= 1,
                format!(
                    "delta = 0.3, IgnoreU max weight > 100 in {} replications (largest {:.1})",
                    ign.replications_with_weight_over_100,
                    ign.max_weight.unwrap_or(f64::NAN)
                ),
            ));
            let (iw, tw) = (ign.max_weight.unwrap_or(f64::NAN), trunc.max_weight.unwrap_or(f64::NAN));
            let (isd, tsd) = (row(r, EstimatorKind::IptwIgnoreU, Parameter::Eta2).sd, row(r, EstimatorKind::IptwIgnoreUTrunc95, Parameter::Eta2).sd);
            checks.push(check(
                tw < iw && tsd < isd,
                format!("delta = 0.3, trunc95 bounds the weights: max {tw:.1} < {iw:.1}, SD(eta2) {tsd:.4} < {isd:.4}"),
            ));
        }
        for p in params {
            let (o, b) = (row(r, EstimatorKind::IptwObservedU, p), row(r, EstimatorKind::Bct, p));
            let se = (mc_se(o).powi(2) + mc_se(b).powi(2)).sqrt();
            checks.push(check(
                (o.bias - b.bias).abs() <= 3.0 * se,
                format!(
                    "delta = {label}, {}: |bias ObservedU - bias BCT| {:.4} <= 3 MC SE {:.4}",
                    p.name(),
                    (o.bias - b.bias).abs(),
                    3.0 * se
                ),
            ));
        }
    }
    report("4", "scaled simulation study", t, &checks)
}

fn criterion_5() -> bool {
    let t = Instant::now();
    let c = simulation_preset(0.3);
    let a = true_eta(&c.exp_params, &c, 50_000, 501).unwrap();
    let b = true_eta(&c.exp_params, &c, 50_000, 502).unwrap();
    let (d2, d3) = ((a.eta2 - b.eta2).abs(), (a.eta3 - b.eta3).abs());
    report(
        "5",
        "true eta stability",
        t,
        &[
            check(d2 <= 0.05, format!("two m = 50000 runs: |delta eta2| {d2:.4} <= 0.05 ({:.4} vs {:.4})", a.eta2, b.eta2)),
            check(d3 <= 0.10, format!("two m = 50000 runs: |delta eta3| {d3:.4} <= 0.10 ({:.4} vs {:.4})", a.eta3, b.eta3)),
        ],
    )
}

fn criterion_6() -> bool {
    let t = Instant::now();
    let cfg = StudyConfig::load(&workspace_path("configs/smoke-delta-0.3.json")).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let r = run_study(&cfg).unwrap();
        write_report(&r, &cfg, d.path()).unwrap();
    }
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    report(
        "6",
        "determinism",
        t,
        &[
            check(read(&dirs[0], "metrics.csv") == read(&dirs[1], "metrics.csv"), "rerun of the smoke study: metrics CSV byte-identical"),
            check(read(&dirs[0], "summary.json") == read(&dirs[1], "summary.json"), "rerun of the smoke study: summary JSON byte-identical"),
        ],
    )
}

#[test]
fn acceptance() {
    let results = [criterion_1(), criterion_2(), criterion_3(), criterion_5(), criterion_6(), criterion_4()];
    let failed = results.iter().filter(|ok| !**ok).count();
    say!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
