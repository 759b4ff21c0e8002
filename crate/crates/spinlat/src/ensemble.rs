//! Couples the two ensembles: given m find sigma(m) and conversely, plus the
//! free energy and its Legendre transform, dispatched to the best backend
//! available for the model at hand.

use thiserror::Error;

use crate::estimators::{mc_mean, EstimatorError};
use crate::gaussian::{self, GaussianError};
use crate::model::{ModelSpec, Observable};
use crate::samplers::{run_gce, SamplerConfig, SamplerError};
use crate::transfer::{self, TransferError, TransferGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Backend {
    /// Exact linear algebra; needs psi_b = Zero.
    ClosedForm,
    /// Transfer operators; needs R <= 1.
    Transfer,
    /// Robbins–Monro iteration on MCMC mean-spin estimates; any model.
    StochasticApproximation,
}

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("backend {backend:?} not applicable here: {why}")]
    BackendInapplicable { backend: Backend, why: String },
    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    NoConvergence { iterations: u32, residual: f64 },
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

/// Outcome of a sigma-m matching run.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct MatchResult {
    pub sigma: f64,
    pub m: f64,
    pub achieved_mean: f64,
    pub residual: f64,
    pub backend: Backend,
    pub iterations: u32,
}

/// Knobs for the stochastic-approximation backend.
#[derive(Debug, Clone)]
pub struct StochasticConfig {
    /// a_0 in a_k = a_0 / (1 + k / tau); unit gain is stable because the
    /// mean-spin slope stays in a fixed band.
    pub gain: f64,
    pub gain_timescale: f64,
    pub sweeps_per_iteration: u64,
    /// Residual scale at which iteration stops (see `sigma_of_m`).
    pub tolerance: f64,
    pub max_iterations: u32,
    pub seed: u64,
}

impl Default for StochasticConfig {
    fn default() -> Self {
        StochasticConfig {
            gain: 1.0,
            gain_timescale: 10.0,
            sweeps_per_iteration: 200_000,
            tolerance: 5e-3,
            max_iterations: 60,
            seed: 0x5eed,
        }
    }
}

/// Shared backend context: the transfer grid and the stochastic knobs.
#[derive(Debug, Clone, Default)]
pub struct EnsembleContext {
    pub grid: TransferGrid,
    pub stochastic: StochasticConfig,
}

fn require_gaussian(spec: &ModelSpec, backend: Backend) -> Result<(), EnsembleError> {
    if spec.potential().is_zero() {
        Ok(())
    } else {
        Err(EnsembleError::BackendInapplicable {
            backend,
            why: "closed form needs psi_b = Zero".into(),
        })
    }
}

fn require_nearest_neighbor(spec: &ModelSpec, backend: Backend) -> Result<(), EnsembleError> {
    if spec.range() <= 1 {
        Ok(())
    } else {
        Err(EnsembleError::BackendInapplicable {
            backend,
            why: format!("transfer operators need R <= 1, got R = {}", spec.range()),
        })
    }
}

fn closed_form_mean(spec: &ModelSpec, sigma: f64) -> Result<f64, EnsembleError> {
    let gce = gaussian::gce_moments(&spec.with_sigma(sigma))?;
    Ok(gce.mean.sum() / spec.n() as f64)
}

/// Mean spin (1/N) sum_i E[X_i] at the given sigma.
pub fn mean_spin(
    spec: &ModelSpec,
    sigma: f64,
    backend: Backend,
    ctx: &EnsembleContext,
) -> Result<f64, EnsembleError> {
    match backend {
        Backend::ClosedForm => {
            require_gaussian(spec, backend)?;
            closed_form_mean(spec, sigma)
        }
        Backend::Transfer => {
            require_nearest_neighbor(spec, backend)?;
            let means = transfer::gce_site_means(spec, sigma, &ctx.grid)?;
            Ok(means.iter().sum::<f64>() / means.len() as f64)
        }
        Backend::StochasticApproximation => {
            Ok(mcmc_mean_spin(spec, sigma, &ctx.stochastic, 0)?.value)
        }
    }
}

fn mcmc_mean_spin(
    spec: &ModelSpec,
    sigma: f64,
    sc: &StochasticConfig,
    chain_id: u64,
) -> Result<crate::estimators::MomentEstimate, EnsembleError> {
    let mut cfg = SamplerConfig::gce(sc.seed, sc.sweeps_per_iteration);
    cfg.chain_id = chain_id;
    cfg.burn_in_sweeps = (sc.sweeps_per_iteration / 5).max(1).min(sc.sweeps_per_iteration - 1);
    let obs = Observable::window_mean((0..spec.n()).collect());
    let run = run_gce(spec, sigma, &cfg, std::slice::from_ref(&obs))?;
    Ok(mc_mean(&run.samples[0])?)
}

/// Solve mean_spin(sigma) = m on the requested backend.
///
/// The stochastic backend iterates sigma_{k+1} = sigma_k + a_k (m - m_hat)
/// and stops once the residual confidence interval contains zero with
/// half-width below the configured tolerance.
pub fn sigma_of_m(
    spec: &ModelSpec,
    m: f64,
    backend: Backend,
    ctx: &EnsembleContext,
) -> Result<MatchResult, EnsembleError> {
    match backend {
        Backend::ClosedForm => {
            require_gaussian(spec, backend)?;
            let sigma = gaussian::sigma_of_m_closed_form(spec, m)?;
            let achieved = closed_form_mean(spec, sigma)?;
            Ok(MatchResult {
                sigma,
                m,
                achieved_mean: achieved,
                residual: (achieved - m).abs(),
                backend,
                iterations: 0,
            })
        }
        Backend::Transfer => {
            require_nearest_neighbor(spec, backend)?;
            let sigma = transfer::sigma_of_m_transfer(spec, m, &ctx.grid)?;
            let achieved = mean_spin(spec, sigma, backend, ctx)?;
            Ok(MatchResult {
                sigma,
                m,
                achieved_mean: achieved,
                residual: (achieved - m).abs(),
                backend,
                iterations: 0,
            })
        }
        Backend::StochasticApproximation => {
            let sc = &ctx.stochastic;
            let mut sigma = m; // exact for the uncoupled zero-field model
            let mut last_residual = f64::INFINITY;
            for k in 0..sc.max_iterations {
                let est = mcmc_mean_spin(spec, sigma, sc, k as u64)?;
                let r = m - est.value;
                last_residual = r.abs();
                let half_width = 1.96 * est.std_error;
                if r.abs() <= half_width && half_width < sc.tolerance {
                    return Ok(MatchResult {
                        sigma,
                        m,
                        achieved_mean: est.value,
                        residual: r.abs(),
                        backend,
                        iterations: k + 1,
                    });
                }
                let gain = sc.gain / (1.0 + k as f64 / sc.gain_timescale);
                sigma += gain * r;
            }
            Err(EnsembleError::NoConvergence {
                iterations: sc.max_iterations,
                residual: last_residual,
            })
        }
    }
}

/// Free energy A(sigma) = (1/N) log Z(sigma) on a deterministic backend.
pub fn free_energy(
    spec: &ModelSpec,
    sigma: f64,
    backend: Backend,
    ctx: &EnsembleContext,
) -> Result<f64, EnsembleError> {
    match backend {
        Backend::ClosedForm => {
            require_gaussian(spec, backend)?;
            Ok(gaussian::free_energy(spec, sigma)?)
        }
        Backend::Transfer => {
            require_nearest_neighbor(spec, backend)?;
            Ok(transfer::gce_log_partition(spec, sigma, &ctx.grid)? / spec.n() as f64)
        }
        Backend::StochasticApproximation => Err(EnsembleError::BackendInapplicable {
            backend,
            why: "no free-energy estimator on the sampling backend".into(),
        }),
    }
}

/// Legendre transform of the free energy at m: sigma(m) m - A(sigma(m)).
pub fn legendre_transform(
    spec: &ModelSpec,
    m: f64,
    backend: Backend,
    ctx: &EnsembleContext,
) -> Result<f64, EnsembleError> {
    let matched = sigma_of_m(spec, m, backend, ctx)?;
    let a = free_energy(spec, matched.sigma, backend, ctx)?;
    Ok(matched.sigma * m - a)
}

/// var(sum X_i)/N, the second sigma-derivative of the free energy: exact row
/// sums on the closed form, a centered difference of the mean spin on the
/// transfer backend.
pub fn total_spin_variance_per_site(
    spec: &ModelSpec,
    sigma: f64,
    backend: Backend,
    ctx: &EnsembleContext,
) -> Result<f64, EnsembleError> {
    match backend {
        Backend::ClosedForm => {
            require_gaussian(spec, backend)?;
            Ok(gaussian::total_spin_variance(spec)? / spec.n() as f64)
        }
        Backend::Transfer => {
            require_nearest_neighbor(spec, backend)?;
            let h = 1e-4;
            let up = mean_spin(spec, sigma + h, backend, ctx)?;
            let down = mean_spin(spec, sigma - h, backend, ctx)?;
            Ok((up - down) / (2.0 * h))
        }
        Backend::StochasticApproximation => Err(EnsembleError::BackendInapplicable {
            backend,
            why: "use the sample variance of the spin sum instead".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SingleSitePotential;

    const COSINE: SingleSitePotential = SingleSitePotential::Cosine { a: 1.0, b: 2.0 };

    #[test]
    fn closed_form_identity_model() {
        let spec = ModelSpec::uniform(6, 1, 0.0, SingleSitePotential::Zero, 0.0).unwrap();
        let ctx = EnsembleContext::default();
        let r = sigma_of_m(&spec, 0.3, Backend::ClosedForm, &ctx).unwrap();
        assert!((r.sigma - 0.3).abs() < 1e-12);
        assert!(r.residual < 1e-10);
    }

    #[test]
    fn closed_form_rejects_cosine() {
        let spec = ModelSpec::uniform(6, 1, 0.0, COSINE, 0.0).unwrap();
        let ctx = EnsembleContext::default();
        assert!(matches!(
            sigma_of_m(&spec, 0.3, Backend::ClosedForm, &ctx),
            Err(EnsembleError::BackendInapplicable { .. })
        ));
    }

    #[test]
    fn transfer_round_trip_on_cosine_model() {
        let spec = ModelSpec::uniform(8, 1, 0.3, COSINE, 0.0).unwrap();
        let ctx = EnsembleContext::default();
        let r = sigma_of_m(&spec, 0.2, Backend::Transfer, &ctx).unwrap();
        assert!(r.residual < 1e-9, "residual {}", r.residual);
        let back = mean_spin(&spec, r.sigma, Backend::Transfer, &ctx).unwrap();
        assert!((back - 0.2).abs() < 1e-9);
        let again = sigma_of_m(&spec, back, Backend::Transfer, &ctx).unwrap();
        assert!((again.sigma - r.sigma).abs() < 1e-8);
    }

    #[test]
    fn mean_spin_is_monotone_in_sigma() {
        let spec = ModelSpec::uniform(8, 1, 0.3, COSINE, 0.0).unwrap();
        let ctx = EnsembleContext::default();
        let mut last = f64::NEG_INFINITY;
        for k in -3..=3 {
            let sigma = k as f64 * 0.6;
            let m = mean_spin(&spec, sigma, Backend::Transfer, &ctx).unwrap();
            assert!(m > last, "mean spin must increase: {m} after {last}");
            last = m;
        }
    }

    #[test]
    fn symmetric_model_has_zero_mean_at_zero_field() {
        let spec = ModelSpec::uniform(8, 1, 0.25, COSINE, 0.0).unwrap();
        let ctx = EnsembleContext::default();
        let m = mean_spin(&spec, 0.0, Backend::Transfer, &ctx).unwrap();
        assert!(m.abs() < 1e-10);
    }

    #[test]
    fn legendre_transform_gaussian_closed_form() {
        let spec = ModelSpec::uniform(5, 1, 0.0, SingleSitePotential::Zero, 0.0).unwrap();
        let ctx = EnsembleContext::default();
        for m in [-0.4, 0.0, 0.8] {
            let h = legendre_transform(&spec, m, Backend::ClosedForm, &ctx).unwrap();
            let want = m * m / 2.0 - 0.5 * (2.0 * std::f64::consts::PI).ln();
            assert!((h - want).abs() < 1e-10, "m {m}: {h} vs {want}");
        }
    }

    #[test]
    fn legendre_slope_equals_sigma_and_is_convex() {
        let spec = ModelSpec::uniform(6, 1, 0.3, COSINE, 0.0).unwrap();
        let ctx = EnsembleContext::default();
        let m = 0.25;
        let h = 1e-4;
        let hm = legendre_transform(&spec, m - h, Backend::Transfer, &ctx).unwrap();
        let h0 = legendre_transform(&spec, m, Backend::Transfer, &ctx).unwrap();
        let hp = legendre_transform(&spec, m + h, Backend::Transfer, &ctx).unwrap();
        let slope = (hp - hm) / (2.0 * h);
        let sigma = sigma_of_m(&spec, m, Backend::Transfer, &ctx).unwrap().sigma;
        assert!((slope - sigma).abs() < 1e-5, "{slope} vs {sigma}");
        // discrete convexity: midpoint below the chord
        assert!(h0 <= 0.5 * (hm + hp) + 1e-8);
    }

    #[test]
    fn variance_per_site_matches_between_backends() {
        let spec = ModelSpec::uniform(16, 1, 0.3, SingleSitePotential::Zero, 0.1).unwrap();
        let ctx = EnsembleContext::default();
        let exact =
            total_spin_variance_per_site(&spec, 0.1, Backend::ClosedForm, &ctx).unwrap();
        let fd = total_spin_variance_per_site(&spec, 0.1, Backend::Transfer, &ctx).unwrap();
        assert!((exact - fd).abs() < 1e-6, "{exact} vs {fd}");
    }

    #[test]
    fn stochastic_approximation_agrees_with_closed_form() {
        let spec = ModelSpec::uniform(8, 1, 0.25, SingleSitePotential::Zero, 0.0).unwrap();
        let mut ctx = EnsembleContext::default();
        ctx.stochastic.sweeps_per_iteration = 30_000;
        ctx.stochastic.tolerance = 8e-3;
        let m = 0.35;
        let r = sigma_of_m(&spec, m, Backend::StochasticApproximation, &ctx).unwrap();
        let exact = gaussian::sigma_of_m_closed_form(&spec, m).unwrap();
        // slope d m / d sigma ~ 1'Sigma1/N propagates the mean tolerance
        let slope = gaussian::total_spin_variance(&spec).unwrap() / 8.0;
        let tol = 3.0 * ctx.stochastic.tolerance / slope;
        assert!(
            (r.sigma - exact).abs() < tol,
            "sigma {} vs {exact} (tol {tol}, iterations {})",
            r.sigma,
            r.iterations
        );
        assert!(r.residual <= 3.0 * ctx.stochastic.tolerance);
    }
}
