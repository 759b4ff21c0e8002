//! Acceptance suite: each test drives one quantitative claim end to end at
//! its stated tolerance and prints a single PASS/FAIL line. Run with
//! `cargo test --test acceptance -- --nocapture` to see the lines.

use std::time::Instant;

use spinlat::config::{parse_config, ConfigFile, DEFAULT_CONFIG};
use spinlat::ensemble::{self, Backend, EnsembleContext};
use spinlat::estimators::{mc_covariance, mc_mean};
use spinlat::experiments::{self, defaults, ExperimentContext, ExperimentReport};
use spinlat::gaussian;
use spinlat::model::{InteractionMatrix, ModelSpec, Observable, SingleSitePotential};
use spinlat::quadrature::{
    ce_covariance_bruteforce, ce_expectation_bruteforce, QuadratureSpec,
};
use spinlat::rng::CounterRng;
use spinlat::samplers::{self, SamplerConfig};
use spinlat::transfer::{
    ce_covariance_fourier, ce_expectation_fourier, ce_site_means_fourier, FourierQuadrature,
    TransferGrid,
};

const COSINE: SingleSitePotential = SingleSitePotential::Cosine { a: 1.0, b: 2.0 };

fn default_file() -> ConfigFile {
    parse_config(DEFAULT_CONFIG).expect("default config parses")
}

fn ctx() -> ExperimentContext {
    ExperimentContext::default()
}

fn verdict_line(id: &str, pass: bool, detail: &str, secs: f64) {
    println!(
        "ACCEPTANCE {id}: {} ({detail}, {secs:.1} s)",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn assert_report(id: &str, report: &ExperimentReport, budget_s: f64, start: Instant) {
    let secs = start.elapsed().as_secs_f64();
    let detail = report
        .verdicts
        .iter()
        .map(|v| format!("{}={:.3e}", v.criterion.split(',').next().unwrap_or(""), v.observed))
        .collect::<Vec<_>>()
        .join("; ");
    let pass = report.passed() && secs < budget_s;
    verdict_line(id, pass, &detail, secs);
    for v in &report.verdicts {
        assert!(
            v.pass,
            "{id}: {} observed {:.6e}, needs {}",
            v.criterion, v.observed, v.threshold
        );
    }
    assert!(secs < budget_s, "{id}: runtime {secs:.1} s over budget {budget_s} s");
}

fn cosine_n3_spec() -> ModelSpec {
    ModelSpec::new(
        InteractionMatrix::uniform(3, 1, 0.3),
        COSINE,
        vec![0.2, -0.2, 0.2],
        0.0,
    )
    .unwrap()
}

#[test]
fn criterion_01_oracle_triangle() {
    let start = Instant::now();
    let report = experiments::oracle_check(&ctx()).expect("oracle check runs");
    assert_report("01 oracle-triangle", &report, 10.0, start);
}

/// Deterministic family of local observables on sites {0, 1, 2}: linear,
/// quadratic, and bounded nonlinear shapes with pseudo-random coefficients.
fn random_local_observables(count: usize) -> Vec<Observable> {
    let mut rng = CounterRng::new(0xfee1);
    let supports: [Vec<usize>; 6] = [
        vec![0],
        vec![1],
        vec![2],
        vec![0, 1],
        vec![1, 2],
        vec![0, 1, 2],
    ];
    (0..count)
        .map(|k| {
            let support = supports[k % supports.len()].clone();
            let a = 2.0 * rng.uniform() - 1.0;
            let b = 2.0 * rng.uniform() - 1.0;
            let c = 2.0 * rng.uniform() - 1.0;
            let sites = support.clone();
            let eval = move |x: &[f64]| {
                let mut v = 0.0;
                for (idx, &i) in sites.iter().enumerate() {
                    let xi = x[i];
                    v += match idx % 3 {
                        0 => a * xi + c * xi * xi,
                        1 => b * (1.3 * xi).cos(),
                        _ => c * xi + a * xi * xi * 0.5,
                    };
                }
                if sites.len() == 2 {
                    v += 0.5 * a * x[sites[0]] * x[sites[1]];
                }
                v
            };
            Observable::new(format!("rand[{k}]"), support, 10.0, eval)
        })
        .collect()
}

#[test]
fn criterion_02_fourier_identity_against_quadrature() {
    let start = Instant::now();
    let spec = cosine_n3_spec();
    let m = 0.1;
    let grid = TransferGrid::default();
    let fq = FourierQuadrature::default();
    let q = QuadratureSpec::default();
    let obs = random_local_observables(10);

    let mut worst_e: f64 = 0.0;
    for f in &obs {
        let fourier = ce_expectation_fourier(&spec, m, &grid, &fq, f).unwrap();
        let brute = ce_expectation_bruteforce(&spec, m, f, &q).unwrap();
        worst_e = worst_e.max((fourier - brute).abs());
    }
    let mut worst_c: f64 = 0.0;
    for pair in obs.chunks(2) {
        let (f, g) = (&pair[0], &pair[1]);
        let fourier = ce_covariance_fourier(&spec, m, &grid, &fq, f, g).unwrap();
        let brute = ce_covariance_bruteforce(&spec, m, f, g, &q).unwrap();
        worst_c = worst_c.max((fourier - brute).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_e < 1e-5 && worst_c < 1e-5 && secs < 60.0;
    verdict_line(
        "02 fourier-identity",
        pass,
        &format!("worst expectation dev {worst_e:.2e}, worst covariance dev {worst_c:.2e}"),
        secs,
    );
    assert!(worst_e < 1e-5, "expectation identity deviation {worst_e:e}");
    assert!(worst_c < 1e-5, "covariance identity deviation {worst_c:e}");
    assert!(secs < 60.0, "runtime {secs:.1} s over 60 s");
}

#[test]
fn criterion_03_observable_scaling() {
    let start = Instant::now();
    let report =
        experiments::exp_observable_scaling(&default_file(), defaults::OBSERVABLE_NS, &ctx())
            .expect("E1 runs");
    assert_report("03 observable-scaling", &report, 300.0, start);
}

#[test]
fn criterion_04_correlation_scaling() {
    let start = Instant::now();
    let report = experiments::exp_correlation_scaling(
        &default_file(),
        defaults::CORRELATION_COSINE_NS,
        defaults::CORRELATION_GAUSSIAN_NS,
        &ctx(),
    )
    .expect("E2 runs");
    assert_report("04 correlation-scaling", &report, 300.0, start);
}

#[test]
fn criterion_05_ce_spin_structure() {
    let start = Instant::now();
    let report =
        experiments::exp_ce_spin_decay(&default_file(), defaults::CE_DECAY_N_BASE, &ctx())
            .expect("E3 runs");
    assert_report("05 ce-spin-structure", &report, 120.0, start);
}

#[test]
fn criterion_06_gce_exponential_decay() {
    let start = Instant::now();
    let report = experiments::exp_gce_decay(
        &default_file(),
        defaults::GCE_DECAY_N,
        defaults::GCE_DECAY_D_MAX,
        &ctx(),
    )
    .expect("E4 runs");
    assert_report("06 gce-decay", &report, 60.0, start);
}

#[test]
fn criterion_07_g0_boundedness() {
    let start = Instant::now();
    let report = experiments::exp_g0_stability(&default_file(), defaults::G0_NS, &ctx())
        .expect("E5 runs");
    assert_report("07 g0-boundedness", &report, 300.0, start);
}

#[test]
fn criterion_08_variance_band() {
    let start = Instant::now();
    let file = default_file();
    let ectx = EnsembleContext::default();
    let m = 0.1;
    let mut ratios = Vec::new();
    for (backend, gaussian_leg) in [(Backend::ClosedForm, true), (Backend::Transfer, false)] {
        let mut values = Vec::new();
        for n in [8usize, 16, 32, 64, 128, 256, 512] {
            let mut f = file.clone();
            if gaussian_leg {
                f.potential.kind = "zero".into();
                f.potential.a = None;
                f.potential.b = None;
            }
            let spec = f.resolve_with_n(n).unwrap().spec;
            let sigma = match backend {
                Backend::ClosedForm => gaussian::sigma_of_m_closed_form(&spec, m).unwrap(),
                _ => spinlat::transfer::sigma_of_m_transfer(&spec, m, &ectx.grid).unwrap(),
            };
            let v = ensemble::total_spin_variance_per_site(&spec, sigma, backend, &ectx).unwrap();
            assert!(v > 0.0);
            values.push(v);
        }
        let max = values.iter().copied().fold(f64::MIN, f64::max);
        let min = values.iter().copied().fold(f64::MAX, f64::min);
        ratios.push(max / min);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = ratios.iter().all(|r| *r < 3.0) && secs < 60.0;
    verdict_line(
        "08 variance-band",
        pass,
        &format!(
            "max/min closed-form {:.3}, transfer {:.3}",
            ratios[0], ratios[1]
        ),
        secs,
    );
    assert!(ratios[0] < 3.0, "closed-form band ratio {}", ratios[0]);
    assert!(ratios[1] < 3.0, "transfer band ratio {}", ratios[1]);
    assert!(secs < 60.0, "runtime {secs:.1} s over 60 s");
}

#[test]
fn criterion_09_moment_scalings() {
    let start = Instant::now();
    let report = experiments::exp_moment_scaling(
        &default_file(),
        defaults::MOMENT_N,
        defaults::MOMENT_BLOCKS,
        defaults::MOMENT_SWEEPS,
        &ctx(),
    )
    .expect("E6 runs");
    assert_report("09 moment-scalings", &report, 600.0, start);
}

#[test]
fn criterion_10_sampler_correctness() {
    let start = Instant::now();

    // (a) gce MCMC vs the exact Gaussian sampler at N = 16, five summary
    // statistics within 4 combined standard errors.
    let n = 16usize;
    let field: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 0.2 } else { -0.2 }).collect();
    let spec = ModelSpec::new(
        InteractionMatrix::uniform(n, 1, 0.3),
        SingleSitePotential::Zero,
        field,
        0.4,
    )
    .unwrap();
    let sweeps = 1_000_000u64;
    let observables = vec![
        Observable::site(0),
        Observable::site(7),
        Observable::site(15),
        Observable::new("x7*x8", vec![7, 8], 1.0, |x| x[7] * x[8]),
        Observable::window_sum((0..16).collect()),
    ];
    let cfg = SamplerConfig::gce(0xabcd, sweeps);
    let run = samplers::run_gce(&spec, 0.4, &cfg, &observables).unwrap();

    let n_exact = 200_000u64;
    let mut exact_streams: Vec<Vec<f64>> = vec![Vec::with_capacity(n_exact as usize); 5];
    for seed in 0..n_exact {
        let draw = gaussian::sample_gce(&spec, 0.4, seed).unwrap();
        let x = draw.as_slice();
        for (k, obs) in observables.iter().enumerate() {
            exact_streams[k].push(obs.eval(x));
        }
    }

    let mut worst_z: f64 = 0.0;
    for k in 0..4 {
        let a = mc_mean(&run.samples[k]).unwrap();
        let b = mc_mean(&exact_streams[k]).unwrap();
        let z = (a.value - b.value).abs() / (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
        worst_z = worst_z.max(z);
    }
    // fifth statistic: the variance of the total spin
    let va = mc_covariance(&run.samples[4], &run.samples[4]).unwrap();
    let vb = mc_covariance(&exact_streams[4], &exact_streams[4]).unwrap();
    let z = (va.value - vb.value).abs() / (va.std_error.powi(2) + vb.std_error.powi(2)).sqrt();
    worst_z = worst_z.max(z);
    assert!(worst_z < 4.0, "gce MCMC vs exact sampler: worst z = {worst_z}");

    // (b) ce MCMC vs quadrature at N = 3.
    let spec3 = cosine_n3_spec();
    let m = 0.1;
    let cfg3 = SamplerConfig::ce(0x7777, 1_000_000);
    let run3 = samplers::run_ce(&spec3, m, &cfg3, &[Observable::site(0)]).unwrap();
    let est = mc_mean(&run3.samples[0]).unwrap();
    let brute =
        ce_expectation_bruteforce(&spec3, m, &Observable::site(0), &QuadratureSpec::default())
            .unwrap();
    let dev = (est.value - brute).abs();
    let tol = (3.0 * est.std_error).max(2e-3);
    assert!(dev < tol, "ce MCMC {} vs quadrature {brute} (tol {tol})", est.value);

    // (c) bit-identical ce trajectories under sigma changes.
    let shifted = spec3.with_sigma(9.0);
    let cfg_c = SamplerConfig::ce(0x3131, 2_000);
    let mut a = samplers::initialize_ce(&spec3, m).unwrap();
    let mut b = samplers::initialize_ce(&shifted, m).unwrap();
    for _ in 0..2_000 {
        samplers::ce_sweep(&spec3, m, &mut a, &cfg_c).unwrap();
        samplers::ce_sweep(&shifted, m, &mut b, &cfg_c).unwrap();
    }
    let identical = a
        .config
        .as_slice()
        .iter()
        .zip(b.config.as_slice())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    assert!(identical, "ce trajectories must not depend on sigma");

    // (d) constraint drift stays below 1e-10 under periodic reprojection.
    let spec_d = ModelSpec::uniform(64, 1, 0.3, COSINE, 0.0).unwrap();
    let cfg_d = SamplerConfig::ce(0x9999, 100_000);
    let run_d = samplers::run_ce(&spec_d, m, &cfg_d, &[]).unwrap();
    let drift = run_d.state.max_reproject_displacement;
    assert!(drift < 1e-10, "constraint drift {drift:e}");
    let final_dev = (run_d.state.config.mean() - m).abs();
    assert!(final_dev < 1e-10, "final mean deviation {final_dev:e}");

    let secs = start.elapsed().as_secs_f64();
    let pass = secs < 600.0;
    verdict_line(
        "10 sampler-correctness",
        pass,
        &format!(
            "worst two-sample z {worst_z:.2}, ce-vs-quadrature dev {dev:.2e}, drift {drift:.1e}"
        ),
        secs,
    );
    assert!(secs < 600.0, "runtime {secs:.1} s over 600 s");
}

#[test]
fn criterion_11_mean_conservation() {
    let start = Instant::now();
    let file = default_file();
    let m = 0.1;
    let grid = TransferGrid::default();
    let fq = FourierQuadrature::default();

    // transfer leg at N <= 64
    let mut worst_rel: f64 = 0.0;
    for n in [16usize, 64] {
        let spec = file.resolve_with_n(n).unwrap().spec;
        let means = ce_site_means_fourier(&spec, m, &grid, &fq).unwrap();
        let total: f64 = means.iter().sum();
        worst_rel = worst_rel.max((total - n as f64 * m).abs() / (n as f64 * m).abs());
    }
    assert!(worst_rel < 1e-6, "transfer mean conservation rel dev {worst_rel:e}");

    // MCMC leg at N = 128: the per-site means must sum to N m within
    // statistical tolerance (the pair moves conserve the sum exactly, so
    // this is machine-precision tight in practice).
    let n = 128usize;
    let spec = file.resolve_with_n(n).unwrap().spec;
    let cfg = SamplerConfig::ce(0x5150, 100_000);
    let total_obs = Observable::window_sum((0..n).collect());
    let run = samplers::run_ce(&spec, m, &cfg, &[total_obs]).unwrap();
    let sum_of_means: f64 = run.site_means().iter().sum();
    let est = mc_mean(&run.samples[0]).unwrap();
    let tol = (3.0 * est.std_error).max(1e-9);
    let dev = (sum_of_means - n as f64 * m).abs();
    assert!(dev < tol, "MCMC mean conservation dev {dev:e} (tol {tol:e})");

    let secs = start.elapsed().as_secs_f64();
    let pass = secs < 120.0;
    verdict_line(
        "11 mean-conservation",
        pass,
        &format!("transfer rel dev {worst_rel:.2e}, MCMC dev {dev:.2e}"),
        secs,
    );
    assert!(secs < 120.0, "runtime {secs:.1} s over 120 s");
}
