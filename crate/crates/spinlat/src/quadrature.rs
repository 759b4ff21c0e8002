//! Brute-force tensor-grid integration for N <= 4 and arbitrary psi_b.
//!
//! Nothing here is fast or clever; that is the point. These routines are the
//! independent ground truth the other backends are validated against. The ce
//! integrals run over the hyperplane parametrization
//! x_N = N m - (x_1 + ... + x_{N-1}); its constant metric Jacobian sqrt(N)
//! cancels between numerator and denominator of every normalized
//! expectation, so it is omitted.

use thiserror::Error;

use crate::model::{ModelSpec, Observable};
use crate::quad::{gauss_legendre_on, Kahan};

pub const MAX_BRUTEFORCE_DIM: usize = 4;

/// Tensor-grid description: Gauss–Legendre with `nodes_per_axis` points on
/// [-half_width, half_width] per axis.
#[derive(Debug, Clone, Copy)]
pub struct QuadratureSpec {
    pub half_width: f64,
    pub nodes_per_axis: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        // Tail mass beyond |x| = 8 is < 1e-12 for this model class. The
        // cosine perturbation carries harmonics up to ~10 rad across the
        // 16-wide interval; 48 nodes per axis leave ~4e-5 errors, 96 reach
        // ~1e-12, so 96 is the default.
        QuadratureSpec {
            half_width: 8.0,
            nodes_per_axis: 96,
        }
    }
}

impl QuadratureSpec {
    pub fn new(half_width: f64, nodes_per_axis: usize) -> Self {
        assert!(half_width >= 6.0, "domain truncation below L = 6");
        assert!(nodes_per_axis >= 16, "fewer than 16 nodes per axis");
        QuadratureSpec {
            half_width,
            nodes_per_axis,
        }
    }

    /// Crude bound on the discarded Gaussian tail mass for a density whose
    /// quadratic part dominates with margin `delta` and whose means stay
    /// within `mean_bound`.
    pub fn tail_mass_bound(&self, delta: f64, mean_bound: f64) -> f64 {
        let reach = (self.half_width - mean_bound).max(0.0);
        (-0.5 * delta * reach * reach).exp()
    }
}

#[derive(Debug, Error)]
pub enum QuadratureError {
    #[error("brute-force integration supports N <= {MAX_BRUTEFORCE_DIM}, got N = {0}")]
    DimensionTooLarge(usize),
}

/// Odometer over the tensor grid; `dims = 0` visits the single empty tuple.
fn for_each_index(dims: usize, n: usize, mut body: impl FnMut(&[usize])) {
    let mut idx = vec![0usize; dims];
    loop {
        body(&idx);
        let mut d = 0;
        loop {
            if d == dims {
                return;
            }
            idx[d] += 1;
            if idx[d] < n {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

struct GridIntegrand<'a> {
    spec: &'a ModelSpec,
    nodes: Vec<f64>,
    log_weights: Vec<f64>,
    dims: usize,
    /// Some(m): ce parametrization with the last coordinate dependent.
    mean_constraint: Option<f64>,
}

impl<'a> GridIntegrand<'a> {
    fn new(spec: &'a ModelSpec, q: &QuadratureSpec, mean_constraint: Option<f64>) -> Self {
        let (nodes, weights) =
            gauss_legendre_on(q.nodes_per_axis, -q.half_width, q.half_width);
        let dims = if mean_constraint.is_some() {
            spec.n() - 1
        } else {
            spec.n()
        };
        GridIntegrand {
            spec,
            nodes,
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            dims,
            mean_constraint,
        }
    }

    /// log of (weight * density) at a grid multi-index, along with the full
    /// configuration.
    fn log_term(&self, idx: &[usize], x: &mut [f64]) -> f64 {
        let mut logw = 0.0;
        for (d, &k) in idx.iter().enumerate() {
            x[d] = self.nodes[k];
            logw += self.log_weights[k];
        }
        match self.mean_constraint {
            None => logw + self.spec.gce_log_density_unnormalized(x),
            Some(m) => {
                let partial: f64 = x[..self.dims].iter().sum();
                x[self.spec.n() - 1] = m * self.spec.n() as f64 - partial;
                // the sigma term is constant on the hyperplane and cancels
                logw - self.spec.hamiltonian(x)
            }
        }
    }

    /// Two-pass sweep: find the peak log term, then hand each point's
    /// configuration and normalized weight to the accumulator.
    fn sweep(&self, mut visit: impl FnMut(&[f64], f64)) -> SweepResult {
        let n_nodes = self.nodes.len();
        let mut x = vec![0.0; self.spec.n()];
        let mut shift = f64::NEG_INFINITY;
        for_each_index(self.dims, n_nodes, |idx| {
            shift = shift.max(self.log_term(idx, &mut x));
        });
        let mut norm = Kahan::new();
        for_each_index(self.dims, n_nodes, |idx| {
            let lt = self.log_term(idx, &mut x);
            let w = (lt - shift).exp();
            norm.add(w);
            visit(&x, w);
        });
        SweepResult {
            shift,
            norm: norm.total(),
        }
    }
}

struct SweepResult {
    shift: f64,
    norm: f64,
}

fn check_dim(spec: &ModelSpec) -> Result<(), QuadratureError> {
    if spec.n() > MAX_BRUTEFORCE_DIM {
        Err(QuadratureError::DimensionTooLarge(spec.n()))
    } else {
        Ok(())
    }
}

/// log Z of the gce at the given sigma.
pub fn gce_log_partition_bruteforce(
    spec: &ModelSpec,
    sigma: f64,
    q: &QuadratureSpec,
) -> Result<f64, QuadratureError> {
    check_dim(spec)?;
    let spec = spec.with_sigma(sigma);
    let grid = GridIntegrand::new(&spec, q, None);
    let r = grid.sweep(|_, _| {});
    Ok(r.shift + r.norm.ln())
}

/// Normalized gce expectation of f.
pub fn gce_expectation_bruteforce(
    spec: &ModelSpec,
    sigma: f64,
    f: &Observable,
    q: &QuadratureSpec,
) -> Result<f64, QuadratureError> {
    check_dim(spec)?;
    let spec = spec.with_sigma(sigma);
    let grid = GridIntegrand::new(&spec, q, None);
    let mut num = Kahan::new();
    let r = grid.sweep(|x, w| num.add(w * f.eval(x)));
    Ok(num.total() / r.norm)
}

/// Gce covariance of (f, g), centered pass for stability.
pub fn gce_covariance_bruteforce(
    spec: &ModelSpec,
    sigma: f64,
    f: &Observable,
    g: &Observable,
    q: &QuadratureSpec,
) -> Result<f64, QuadratureError> {
    check_dim(spec)?;
    let spec = spec.with_sigma(sigma);
    let grid = GridIntegrand::new(&spec, q, None);
    covariance_sweep(&grid, f, g)
}

/// Normalized ce expectation of f on the hyperplane mean(x) = m.
pub fn ce_expectation_bruteforce(
    spec: &ModelSpec,
    m: f64,
    f: &Observable,
    q: &QuadratureSpec,
) -> Result<f64, QuadratureError> {
    check_dim(spec)?;
    let grid = GridIntegrand::new(spec, q, Some(m));
    let mut num = Kahan::new();
    let r = grid.sweep(|x, w| num.add(w * f.eval(x)));
    Ok(num.total() / r.norm)
}

/// Ce covariance of (f, g).
pub fn ce_covariance_bruteforce(
    spec: &ModelSpec,
    m: f64,
    f: &Observable,
    g: &Observable,
    q: &QuadratureSpec,
) -> Result<f64, QuadratureError> {
    check_dim(spec)?;
    let grid = GridIntegrand::new(spec, q, Some(m));
    covariance_sweep(&grid, f, g)
}

fn covariance_sweep(
    grid: &GridIntegrand,
    f: &Observable,
    g: &Observable,
) -> Result<f64, QuadratureError> {
    let mut fsum = Kahan::new();
    let mut gsum = Kahan::new();
    let r = grid.sweep(|x, w| {
        fsum.add(w * f.eval(x));
        gsum.add(w * g.eval(x));
    });
    let fbar = fsum.total() / r.norm;
    let gbar = gsum.total() / r.norm;
    let mut cov = Kahan::new();
    grid.sweep(|x, w| cov.add(w * (f.eval(x) - fbar) * (g.eval(x) - gbar)));
    Ok(cov.total() / r.norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian;
    use crate::model::SingleSitePotential;

    const COSINE: SingleSitePotential = SingleSitePotential::Cosine { a: 1.0, b: 2.0 };

    fn grid() -> QuadratureSpec {
        QuadratureSpec::default()
    }

    #[test]
    fn tail_mass_bound_is_small_for_defaults() {
        let q = QuadratureSpec::default();
        // dominance margin 0.4, means within |mu| <= 1
        assert!(q.tail_mass_bound(0.4, 1.0) < 1e-4);
        assert!(q.tail_mass_bound(1.0, 0.0) < 1e-13);
    }

    #[test]
    fn dimension_gate() {
        let spec = ModelSpec::uniform(5, 1, 0.1, SingleSitePotential::Zero, 0.0).unwrap();
        assert!(matches!(
            gce_expectation_bruteforce(&spec, 0.0, &Observable::site(0), &grid()),
            Err(QuadratureError::DimensionTooLarge(5))
        ));
    }

    #[test]
    fn normalization_is_one() {
        let spec = ModelSpec::uniform(3, 1, 0.2, COSINE, 0.3).unwrap();
        let one = Observable::new("1", vec![], 0.0, |_| 1.0);
        let e = gce_expectation_bruteforce(&spec, 0.3, &one, &grid()).unwrap();
        assert!((e - 1.0).abs() < 1e-12);
        let ec = ce_expectation_bruteforce(&spec, 0.1, &one, &grid()).unwrap();
        assert!((ec - 1.0).abs() < 1e-12);
    }

    #[test]
    fn odd_observable_even_density_vanishes() {
        // s = 0, sigma = 0, even psi_b: density invariant under x -> -x.
        let spec = ModelSpec::uniform(3, 1, 0.25, COSINE, 0.0).unwrap();
        let f = Observable::new("x0+x2", vec![0, 2], 1.0, |x| x[0] + x[2]);
        let e = gce_expectation_bruteforce(&spec, 0.0, &f, &grid()).unwrap();
        assert!(e.abs() < 1e-9, "odd moment {e}");
    }

    #[test]
    fn gaussian_gce_agreement() {
        let spec = ModelSpec::new(
            crate::model::InteractionMatrix::uniform(3, 1, 0.25),
            SingleSitePotential::Zero,
            vec![0.1, -0.2, 0.05],
            0.6,
        )
        .unwrap();
        let exact = gaussian::gce_moments(&spec).unwrap();
        for i in 0..3 {
            let e = gce_expectation_bruteforce(&spec, 0.6, &Observable::site(i), &grid()).unwrap();
            assert!((e - exact.mean[i]).abs() < 1e-7, "mean {i}");
            for j in 0..3 {
                let c = gce_covariance_bruteforce(
                    &spec,
                    0.6,
                    &Observable::site(i),
                    &Observable::site(j),
                    &grid(),
                )
                .unwrap();
                assert!((c - exact.covariance[(i, j)]).abs() < 1e-7, "cov {i}{j}");
            }
        }
        let logz = gce_log_partition_bruteforce(&spec, 0.6, &grid()).unwrap();
        assert!((logz - exact.log_partition).abs() < 1e-7);
    }

    #[test]
    fn gaussian_ce_agreement() {
        let spec = ModelSpec::new(
            crate::model::InteractionMatrix::uniform(3, 1, 0.25),
            SingleSitePotential::Zero,
            vec![0.1, -0.2, 0.05],
            0.0,
        )
        .unwrap();
        let m = 0.2;
        let exact = gaussian::ce_moments(&spec, m).unwrap();
        for i in 0..3 {
            let e = ce_expectation_bruteforce(&spec, m, &Observable::site(i), &grid()).unwrap();
            assert!((e - exact.mean[i]).abs() < 1e-6, "ce mean {i}");
            for j in 0..3 {
                let c = ce_covariance_bruteforce(
                    &spec,
                    m,
                    &Observable::site(i),
                    &Observable::site(j),
                    &grid(),
                )
                .unwrap();
                assert!((c - exact.covariance[(i, j)]).abs() < 1e-6, "ce cov {i}{j}");
            }
        }
    }

    #[test]
    fn ce_two_site_symmetry() {
        let spec = ModelSpec::uniform(2, 1, 0.0, SingleSitePotential::Zero, 0.0).unwrap();
        let e = ce_expectation_bruteforce(&spec, 0.0, &Observable::site(0), &grid()).unwrap();
        assert!(e.abs() < 1e-10);
    }

    #[test]
    fn ce_mean_spin_is_constraint() {
        let spec = ModelSpec::uniform(3, 1, 0.2, COSINE, 0.7).unwrap();
        let m = 0.35;
        let f = Observable::window_mean(vec![0, 1, 2]);
        let e = ce_expectation_bruteforce(&spec, m, &f, &grid()).unwrap();
        assert!((e - m).abs() < 1e-10);

        // covariance with the conserved total vanishes for any f
        let total = Observable::window_sum(vec![0, 1, 2]);
        let fsq = Observable::new("x1^2", vec![1], 10.0, |x| x[1] * x[1]);
        let c = ce_covariance_bruteforce(&spec, m, &fsq, &total, &grid()).unwrap();
        assert!(c.abs() < 1e-8, "cov with conserved sum {c}");
    }

    #[test]
    fn exchangeable_nongaussian_ce_satisfies_remark_identity() {
        // Uncoupled Cosine sites are exchangeable under the ce, so
        // cov(X_1, X_2) = -var(X_1)/(N-1) holds beyond the Gaussian case.
        let spec = ModelSpec::uniform(3, 1, 0.0, COSINE, 0.0).unwrap();
        let m = 0.15;
        let var = ce_covariance_bruteforce(
            &spec,
            m,
            &Observable::site(0),
            &Observable::site(0),
            &grid(),
        )
        .unwrap();
        let cov = ce_covariance_bruteforce(
            &spec,
            m,
            &Observable::site(0),
            &Observable::site(1),
            &grid(),
        )
        .unwrap();
        assert!((cov + var / 2.0).abs() < 1e-6, "cov {cov} var {var}");
    }

    #[test]
    fn self_convergence_under_refinement() {
        let spec = ModelSpec::new(
            crate::model::InteractionMatrix::uniform(3, 1, 0.3),
            COSINE,
            vec![0.2, -0.2, 0.2],
            0.4,
        )
        .unwrap();
        let f = Observable::new("x0*x1", vec![0, 1], 20.0, |x| x[0] * x[1]);
        let coarse = QuadratureSpec::default();
        let fine = QuadratureSpec::new(8.0, 144);
        let a = gce_expectation_bruteforce(&spec, 0.4, &f, &coarse).unwrap();
        let b = gce_expectation_bruteforce(&spec, 0.4, &f, &fine).unwrap();
        assert!((a - b).abs() < 1e-7, "gce refinement drift {}", a - b);
        let ac = ce_expectation_bruteforce(&spec, 0.1, &f, &coarse).unwrap();
        let bc = ce_expectation_bruteforce(&spec, 0.1, &f, &fine).unwrap();
        assert!((ac - bc).abs() < 1e-6, "ce refinement drift {}", ac - bc);
    }
}
