//! MCMC backends, valid for any interaction range and any potential in the
//! family: single-site Metropolis targeting the gce, and sum-preserving
//! pair-exchange Metropolis targeting the ce.
//!
//! Randomness is counter-based: (seed, chain id, sweep, move) determines
//! every draw, so trajectories are bit-reproducible and parallel chains
//! with distinct ids never share state. Step sizes adapt by Robbins–Monro
//! during burn-in only; the post-burn-in chain is a genuine Markov chain.

use thiserror::Error;

use crate::model::{ModelError, ModelSpec, Observable, SpinConfig};
use crate::rng::CounterRng;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("reprojection correction {displacement:e} exceeds {DRIFT_ERROR_THRESHOLD:e}; a drift this large signals a bug, not rounding")]
    DriftTooLarge { displacement: f64 },
    #[error("proposal width must be strictly positive, got {0}")]
    NonPositiveStep(f64),
    #[error("burn-in ({burn_in}) must be smaller than the sweep budget ({sweeps})")]
    BurnInTooLong { burn_in: u64, sweeps: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Reprojection corrections beyond this are treated as corruption.
pub const DRIFT_ERROR_THRESHOLD: f64 = 1e-6;

/// Random-walk tuning targets for the two move types.
pub const GCE_TARGET_ACCEPTANCE: f64 = 0.44;
pub const CE_TARGET_ACCEPTANCE: f64 = 0.30;

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub n_sweeps: u64,
    pub burn_in_sweeps: u64,
    pub thin: u64,
    pub target_acceptance: f64,
    pub seed: u64,
    pub chain_id: u64,
    /// Sweeps between hyperplane reprojections (ce chains only).
    pub reproject_every: u64,
}

impl SamplerConfig {
    /// Default burn-in: 20% of the budget, at least 1e4 when the budget
    /// allows it.
    fn default_burn_in(n_sweeps: u64) -> u64 {
        (n_sweeps / 5).max(10_000.min(n_sweeps / 2))
    }

    pub fn gce(seed: u64, n_sweeps: u64) -> Self {
        SamplerConfig {
            n_sweeps,
            burn_in_sweeps: Self::default_burn_in(n_sweeps),
            thin: 1,
            target_acceptance: GCE_TARGET_ACCEPTANCE,
            seed,
            chain_id: 0,
            reproject_every: 1_000,
        }
    }

    pub fn ce(seed: u64, n_sweeps: u64) -> Self {
        SamplerConfig {
            target_acceptance: CE_TARGET_ACCEPTANCE,
            ..Self::gce(seed, n_sweeps)
        }
    }

    fn validate(&self) -> Result<(), SamplerError> {
        if self.burn_in_sweeps >= self.n_sweeps {
            return Err(SamplerError::BurnInTooLong {
                burn_in: self.burn_in_sweeps,
                sweeps: self.n_sweeps,
            });
        }
        assert!(self.thin >= 1, "thin must be >= 1");
        assert!(
            self.target_acceptance > 0.0 && self.target_acceptance < 1.0,
            "target acceptance must lie in (0, 1)"
        );
        Ok(())
    }
}

/// Proposal widths: per-site for single-site moves, one scalar for exchanges.
#[derive(Debug, Clone)]
pub enum StepSizes {
    PerSite(Vec<f64>),
    Scalar(f64),
}

impl StepSizes {
    fn check(&self) -> Result<(), SamplerError> {
        let bad = match self {
            StepSizes::PerSite(v) => v.iter().copied().find(|h| *h <= 0.0),
            StepSizes::Scalar(h) => (*h <= 0.0).then_some(*h),
        };
        match bad {
            Some(h) => Err(SamplerError::NonPositiveStep(h)),
            None => Ok(()),
        }
    }
}

/// One chain's mutable state. Exclusively owned; run many chains with
/// distinct chain ids instead of sharing one.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub config: SpinConfig,
    step: StepSizes,
    sweep: u64,
    /// acceptance bookkeeping for the current sweep
    site_accepted: Vec<u32>,
    site_proposed: Vec<u32>,
    accepted_in_sweep: u32,
    /// cumulative post-construction totals
    pub total_accepted: u64,
    pub total_proposed: u64,
    pub last_reproject_displacement: f64,
    pub max_reproject_displacement: f64,
}

impl ChainState {
    fn new(config: SpinConfig, step: StepSizes) -> Result<Self, SamplerError> {
        step.check()?;
        let n = config.len();
        Ok(ChainState {
            config,
            step,
            sweep: 0,
            site_accepted: vec![0; n],
            site_proposed: vec![0; n],
            accepted_in_sweep: 0,
            total_accepted: 0,
            total_proposed: 0,
            last_reproject_displacement: 0.0,
            max_reproject_displacement: 0.0,
        })
    }

    pub fn sweep_index(&self) -> u64 {
        self.sweep
    }

    pub fn step_sizes(&self) -> &StepSizes {
        &self.step
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.total_proposed == 0 {
            0.0
        } else {
            self.total_accepted as f64 / self.total_proposed as f64
        }
    }
}

/// Gce chain start: all sites at zero, unit proposal widths.
pub fn initialize_gce(spec: &ModelSpec) -> ChainState {
    ChainState::new(
        SpinConfig::unconstrained(vec![0.0; spec.n()]),
        StepSizes::PerSite(vec![1.0; spec.n()]),
    )
    .expect("unit step sizes are positive")
}

/// Ce chain start: every site at m, exactly on the hyperplane.
pub fn initialize_ce(spec: &ModelSpec, m: f64) -> Result<ChainState, SamplerError> {
    ChainState::new(
        SpinConfig::with_mean(vec![m; spec.n()], m)?,
        StepSizes::Scalar(1.0),
    )
}

/// One gce sweep: N random-scan single-site Metropolis updates with
/// Gaussian proposals, acceptance min(1, exp(-delta)).
pub fn gce_sweep(spec: &ModelSpec, sigma: f64, state: &mut ChainState, cfg: &SamplerConfig) {
    let n = spec.n();
    let spec_at_sigma;
    let spec = if sigma == spec.sigma() {
        spec
    } else {
        spec_at_sigma = spec.with_sigma(sigma);
        &spec_at_sigma
    };
    let steps = match &state.step {
        StepSizes::PerSite(h) => h.clone(),
        StepSizes::Scalar(h) => vec![*h; n],
    };
    state.site_accepted.fill(0);
    state.site_proposed.fill(0);
    state.accepted_in_sweep = 0;
    let x = state.config.as_mut_slice();
    for mv in 0..n as u64 {
        let mut rng = CounterRng::for_move(cfg.seed, cfg.chain_id, state.sweep, mv);
        let i = rng.below(n);
        let proposal = x[i] + steps[i] * rng.standard_normal();
        let delta = spec.energy_delta_single(x, i, proposal);
        state.site_proposed[i] += 1;
        state.total_proposed += 1;
        if rng.uniform() < (-delta).exp() {
            x[i] = proposal;
            state.site_accepted[i] += 1;
            state.accepted_in_sweep += 1;
            state.total_accepted += 1;
        }
    }
    if state.sweep < cfg.burn_in_sweeps {
        adapt(state, cfg);
    }
    state.sweep += 1;
}

/// One ce sweep: N pair-exchange updates (x_i, x_j) -> (x_i + eta, x_j - eta)
/// with i != j uniform; the spin sum is conserved exactly by construction and
/// sigma never enters the acceptance ratio.
pub fn ce_sweep(
    spec: &ModelSpec,
    m: f64,
    state: &mut ChainState,
    cfg: &SamplerConfig,
) -> Result<(), SamplerError> {
    let n = spec.n();
    let h = match &state.step {
        StepSizes::Scalar(h) => *h,
        StepSizes::PerSite(_) => panic!("ce chains carry a scalar step size"),
    };
    state.accepted_in_sweep = 0;
    let x = state.config.as_mut_slice();
    for mv in 0..n as u64 {
        let mut rng = CounterRng::for_move(cfg.seed, cfg.chain_id, state.sweep, mv);
        let i = rng.below(n);
        let mut j = rng.below(n - 1);
        if j >= i {
            j += 1;
        }
        let eta = h * rng.standard_normal();
        let delta = spec
            .energy_delta_pair(x, i, j, eta)
            .expect("i and j are distinct");
        state.total_proposed += 1;
        if rng.uniform() < (-delta).exp() {
            x[i] += eta;
            x[j] -= eta;
            state.accepted_in_sweep += 1;
            state.total_accepted += 1;
        }
    }
    if state.sweep < cfg.burn_in_sweeps {
        adapt(state, cfg);
    }
    state.sweep += 1;
    if cfg.reproject_every > 0 && state.sweep.is_multiple_of(cfg.reproject_every) {
        reproject(state, m)?;
    }
    Ok(())
}

/// Robbins–Monro step-size update, log h += gamma_k (acc - target) with
/// gamma_k = k^-0.6. Active during burn-in only; afterwards a no-op, so the
/// production chain does not rely on diminishing adaptation.
pub fn adapt(state: &mut ChainState, cfg: &SamplerConfig) {
    if state.sweep >= cfg.burn_in_sweeps {
        return;
    }
    let gamma = ((state.sweep + 1) as f64).powf(-0.6);
    match &mut state.step {
        StepSizes::PerSite(hs) => {
            for (i, h) in hs.iter_mut().enumerate() {
                if state.site_proposed[i] > 0 {
                    let rate = state.site_accepted[i] as f64 / state.site_proposed[i] as f64;
                    *h = (h.ln() + gamma * (rate - cfg.target_acceptance)).exp();
                }
            }
        }
        StepSizes::Scalar(h) => {
            let proposed = state.config.len() as f64;
            let rate = state.accepted_in_sweep as f64 / proposed;
            *h = (h.ln() + gamma * (rate - cfg.target_acceptance)).exp();
        }
    }
}

/// Snap a ce chain back onto the hyperplane: x += (m - mean(x)) 1.
/// The correction is pure floating-point drift control; anything above
/// `DRIFT_ERROR_THRESHOLD` is reported as an error instead of silently fixed.
pub fn reproject(state: &mut ChainState, m: f64) -> Result<f64, SamplerError> {
    let displacement = (m - state.config.mean()).abs();
    if displacement > DRIFT_ERROR_THRESHOLD {
        return Err(SamplerError::DriftTooLarge { displacement });
    }
    let shift = m - state.config.mean();
    for xi in state.config.as_mut_slice() {
        *xi += shift;
    }
    state.last_reproject_displacement = displacement;
    state.max_reproject_displacement = state.max_reproject_displacement.max(displacement);
    Ok(displacement)
}

/// Post-burn-in record of a run: thinned observable streams plus per-site
/// mean accumulators.
#[derive(Debug)]
pub struct RunSummary {
    pub samples: Vec<Vec<f64>>,
    pub site_mean_sums: Vec<f64>,
    pub n_measured: u64,
    pub state: ChainState,
}

impl RunSummary {
    pub fn site_means(&self) -> Vec<f64> {
        self.site_mean_sums
            .iter()
            .map(|s| s / self.n_measured as f64)
            .collect()
    }
}

/// Drive a gce chain for the configured budget, measuring the observables
/// after every `thin`-th post-burn-in sweep.
pub fn run_gce(
    spec: &ModelSpec,
    sigma: f64,
    cfg: &SamplerConfig,
    observables: &[Observable],
) -> Result<RunSummary, SamplerError> {
    cfg.validate()?;
    let mut state = initialize_gce(spec);
    let mut summary = RunRecorder::new(spec.n(), observables.len(), cfg);
    while state.sweep_index() < cfg.n_sweeps {
        gce_sweep(spec, sigma, &mut state, cfg);
        summary.record(&state, observables, cfg);
    }
    Ok(summary.finish(state))
}

/// Drive a ce chain at mean spin m.
pub fn run_ce(
    spec: &ModelSpec,
    m: f64,
    cfg: &SamplerConfig,
    observables: &[Observable],
) -> Result<RunSummary, SamplerError> {
    cfg.validate()?;
    let mut state = initialize_ce(spec, m)?;
    let mut summary = RunRecorder::new(spec.n(), observables.len(), cfg);
    while state.sweep_index() < cfg.n_sweeps {
        ce_sweep(spec, m, &mut state, cfg)?;
        summary.record(&state, observables, cfg);
    }
    Ok(summary.finish(state))
}

struct RunRecorder {
    samples: Vec<Vec<f64>>,
    site_mean_sums: Vec<f64>,
    n_measured: u64,
}

impl RunRecorder {
    fn new(n_sites: usize, n_obs: usize, cfg: &SamplerConfig) -> Self {
        let capacity = ((cfg.n_sweeps - cfg.burn_in_sweeps) / cfg.thin + 1) as usize;
        RunRecorder {
            samples: (0..n_obs).map(|_| Vec::with_capacity(capacity)).collect(),
            site_mean_sums: vec![0.0; n_sites],
            n_measured: 0,
        }
    }

    fn record(&mut self, state: &ChainState, observables: &[Observable], cfg: &SamplerConfig) {
        let done = state.sweep_index();
        if done <= cfg.burn_in_sweeps || !(done - cfg.burn_in_sweeps - 1).is_multiple_of(cfg.thin) {
            return;
        }
        let x = state.config.as_slice();
        for (stream, obs) in self.samples.iter_mut().zip(observables) {
            stream.push(obs.eval(x));
        }
        for (acc, xi) in self.site_mean_sums.iter_mut().zip(x) {
            *acc += xi;
        }
        self.n_measured += 1;
    }

    fn finish(self, state: ChainState) -> RunSummary {
        RunSummary {
            samples: self.samples,
            site_mean_sums: self.site_mean_sums,
            n_measured: self.n_measured,
            state,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian;
    use crate::model::{InteractionMatrix, SingleSitePotential};
    use crate::quadrature::{ce_expectation_bruteforce, QuadratureSpec};

    const COSINE: SingleSitePotential = SingleSitePotential::Cosine { a: 1.0, b: 2.0 };

    fn quick_cfg(seed: u64, sweeps: u64, burn_in: u64, ce: bool) -> SamplerConfig {
        let mut cfg = if ce {
            SamplerConfig::ce(seed, sweeps)
        } else {
            SamplerConfig::gce(seed, sweeps)
        };
        cfg.burn_in_sweeps = burn_in;
        cfg
    }

    #[test]
    fn initialization_contracts() {
        let spec = ModelSpec::uniform(4, 1, 0.2, COSINE, 0.0).unwrap();
        let gce = initialize_gce(&spec);
        assert_eq!(gce.config.as_slice(), &[0.0; 4]);
        let ce = initialize_ce(&spec, 0.5).unwrap();
        assert_eq!(ce.config.as_slice(), &[0.5; 4]);
        assert_eq!(ce.config.mean(), 0.5);
    }

    #[test]
    fn zero_step_rejected() {
        let spec = ModelSpec::uniform(3, 1, 0.0, COSINE, 0.0).unwrap();
        let err = ChainState::new(
            SpinConfig::unconstrained(vec![0.0; 3]),
            StepSizes::PerSite(vec![1.0, 0.0, 1.0]),
        )
        .unwrap_err();
        assert!(matches!(err, SamplerError::NonPositiveStep(_)));
        let _ = spec;
    }

    #[test]
    fn trajectories_are_reproducible() {
        let spec = ModelSpec::uniform(5, 1, 0.2, COSINE, 0.3).unwrap();
        let cfg = quick_cfg(42, 50, 10, false);
        let mut a = initialize_gce(&spec);
        let mut b = initialize_gce(&spec);
        for _ in 0..50 {
            gce_sweep(&spec, 0.3, &mut a, &cfg);
            gce_sweep(&spec, 0.3, &mut b, &cfg);
        }
        assert_eq!(a.config.as_slice(), b.config.as_slice());

        let mut other_chain = initialize_gce(&spec);
        let cfg2 = SamplerConfig {
            chain_id: 1,
            ..cfg.clone()
        };
        for _ in 0..50 {
            gce_sweep(&spec, 0.3, &mut other_chain, &cfg2);
        }
        assert_ne!(a.config.as_slice(), other_chain.config.as_slice());
    }

    #[test]
    fn ce_trajectory_is_bit_identical_under_sigma_changes() {
        let base = ModelSpec::uniform(6, 1, 0.25, COSINE, 0.0).unwrap();
        let shifted = base.with_sigma(5.0);
        let cfg = quick_cfg(7, 200, 50, true);
        let m = 0.2;
        let mut a = initialize_ce(&base, m).unwrap();
        let mut b = initialize_ce(&shifted, m).unwrap();
        for _ in 0..200 {
            ce_sweep(&base, m, &mut a, &cfg).unwrap();
            ce_sweep(&shifted, m, &mut b, &cfg).unwrap();
        }
        let xa = a.config.as_slice();
        let xb = b.config.as_slice();
        for (va, vb) in xa.iter().zip(xb) {
            assert_eq!(va.to_bits(), vb.to_bits());
        }
    }

    #[test]
    fn adaptation_moves_steps_toward_target_and_freezes() {
        let spec = ModelSpec::uniform(3, 1, 0.0, SingleSitePotential::Zero, 0.0).unwrap();
        let cfg = quick_cfg(1, 100, 50, false);
        let mut state = initialize_gce(&spec);
        // force a full-acceptance window: rate 1.0 > target 0.44 pushes h up
        state.site_proposed = vec![10; 3];
        state.site_accepted = vec![10; 3];
        adapt(&mut state, &cfg);
        let up = match &state.step {
            StepSizes::PerSite(h) => h[0],
            _ => unreachable!(),
        };
        assert!(up > 1.0);
        // zero acceptance pushes it down
        state.site_accepted = vec![0; 3];
        adapt(&mut state, &cfg);
        let down = match &state.step {
            StepSizes::PerSite(h) => h[0],
            _ => unreachable!(),
        };
        assert!(down < up);
        // past burn-in the update is a no-op
        state.sweep = 60;
        state.site_accepted = vec![10; 3];
        let before = down;
        adapt(&mut state, &cfg);
        let after = match &state.step {
            StepSizes::PerSite(h) => h[0],
            _ => unreachable!(),
        };
        assert_eq!(before, after);
    }

    #[test]
    fn reprojection_thresholds() {
        let spec = ModelSpec::uniform(4, 1, 0.0, COSINE, 0.0).unwrap();
        let m = 0.25;
        let mut state = initialize_ce(&spec, m).unwrap();
        // already exact: zero displacement
        assert_eq!(reproject(&mut state, m).unwrap(), 0.0);
        // tiny drift is corrected
        state.config.as_mut_slice()[0] += 4.0 * 1e-12;
        let d = reproject(&mut state, m).unwrap();
        assert!(d > 0.0 && d < 2e-12);
        assert!((state.config.mean() - m).abs() < 1e-15);
        // synthetic large drift is an error
        state.config.as_mut_slice()[0] += 4.0 * 1e-5;
        assert!(matches!(
            reproject(&mut state, m),
            Err(SamplerError::DriftTooLarge { .. })
        ));
    }

    #[test]
    fn pair_delta_antisymmetry_supports_reversibility() {
        // The reverse of an exchange move has exactly the negated energy
        // change, which is what detailed balance needs.
        let spec = ModelSpec::new(
            InteractionMatrix::uniform(6, 2, 0.15),
            COSINE,
            vec![0.1, -0.2, 0.0, 0.3, -0.1, 0.2],
            0.0,
        )
        .unwrap();
        let mut rng = crate::rng::CounterRng::new(3);
        for _ in 0..100 {
            let x: Vec<f64> = (0..6).map(|_| rng.standard_normal()).collect();
            let i = rng.below(6);
            let mut j = rng.below(5);
            if j >= i {
                j += 1;
            }
            let eta = rng.standard_normal();
            let fwd = spec.energy_delta_pair(&x, i, j, eta).unwrap();
            let mut y = x.clone();
            y[i] += eta;
            y[j] -= eta;
            let rev = spec.energy_delta_pair(&y, i, j, -eta).unwrap();
            assert!((fwd + rev).abs() < 1e-10, "fwd {fwd} rev {rev}");
        }
    }

    #[test]
    fn ce_sum_invariance_between_reprojections() {
        let spec = ModelSpec::uniform(256, 1, 0.3, COSINE, 0.0).unwrap();
        let m = 0.1;
        let mut cfg = quick_cfg(11, 1_000, 200, true);
        cfg.reproject_every = 0; // disabled: measure raw drift
        let mut state = initialize_ce(&spec, m).unwrap();
        for _ in 0..1_000 {
            ce_sweep(&spec, m, &mut state, &cfg).unwrap();
        }
        let total: f64 = state.config.as_slice().iter().sum();
        assert!(
            (total - 256.0 * m).abs() < 1e-9,
            "sum drift {}",
            total - 256.0 * m
        );
    }

    #[test]
    fn gce_chain_reproduces_gaussian_moments() {
        let spec = ModelSpec::uniform(4, 1, 0.25, SingleSitePotential::Zero, 0.5).unwrap();
        let exact = gaussian::gce_moments(&spec).unwrap();
        let cfg = quick_cfg(2024, 60_000, 10_000, false);
        let obs = vec![
            Observable::site(0),
            Observable::site(2),
            Observable::new("x1*x2", vec![1, 2], 1.0, |x| x[1] * x[2]),
        ];
        let run = run_gce(&spec, 0.5, &cfg, &obs).unwrap();
        let n = run.samples[0].len() as f64;
        // crude ESS-free SE bound: batch over 100-sweep blocks
        let est = |s: &[f64]| {
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            let chunks: Vec<f64> = s
                .chunks(100)
                .map(|c| c.iter().sum::<f64>() / c.len() as f64)
                .collect();
            let bv = chunks.iter().map(|b| (b - mean) * (b - mean)).sum::<f64>()
                / (chunks.len() as f64 - 1.0);
            (mean, (bv / chunks.len() as f64).sqrt())
        };
        let (m0, se0) = est(&run.samples[0]);
        assert!(
            (m0 - exact.mean[0]).abs() < 4.0 * se0.max(1e-3),
            "site 0 mean {m0} vs {} (se {se0})",
            exact.mean[0]
        );
        let (m12, se12) = est(&run.samples[2]);
        let want = exact.covariance[(1, 2)] + exact.mean[1] * exact.mean[2];
        assert!(
            (m12 - want).abs() < 4.0 * se12.max(1e-3),
            "E[x1 x2] {m12} vs {want} (se {se12})"
        );
        assert!(n > 0.0);
        // adaptation should have landed near the target acceptance
        let rate = run.state.acceptance_rate();
        assert!(rate > 0.25 && rate < 0.65, "acceptance {rate}");
    }

    #[test]
    fn ce_chain_matches_quadrature_at_n3() {
        let spec = ModelSpec::new(
            InteractionMatrix::uniform(3, 1, 0.3),
            COSINE,
            vec![0.2, -0.2, 0.2],
            0.0,
        )
        .unwrap();
        let m = 0.1;
        let cfg = quick_cfg(5, 80_000, 10_000, true);
        let run = run_ce(&spec, m, &cfg, &[Observable::site(0)]).unwrap();
        let want =
            ce_expectation_bruteforce(&spec, m, &Observable::site(0), &QuadratureSpec::default())
                .unwrap();
        let s = &run.samples[0];
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let chunks: Vec<f64> = s
            .chunks(200)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        let bv = chunks.iter().map(|b| (b - mean) * (b - mean)).sum::<f64>()
            / (chunks.len() as f64 - 1.0);
        let se = (bv / chunks.len() as f64).sqrt();
        assert!(
            (mean - want).abs() < (3.0 * se).max(2e-3),
            "{mean} vs {want} (se {se})"
        );
        assert!(run.state.max_reproject_displacement < 1e-10);
    }
}
