//! Closed-form backend for the exactly solvable case psi_b = Zero.
//!
//! With a purely quadratic potential the gce is the Gaussian with precision
//! M and mean solving M mu = sigma 1 - s, and the ce is that Gaussian
//! conditioned on the mean-spin hyperplane. Everything here is exact linear
//! algebra, which makes this module the ground truth at any N.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::{InteractionMatrix, ModelError, ModelSpec, SpinConfig};
use crate::rng::CounterRng;

#[derive(Debug, Error)]
pub enum GaussianError {
    #[error("closed-form backend requires psi_b = Zero, got a non-Gaussian potential")]
    PotentialNotGaussian,
    #[error("precision matrix is not positive definite (pivot {pivot} at column {col})")]
    NotPositiveDefinite { col: usize, pivot: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Exact gce moments: mean, covariance Sigma = M^-1, and log partition.
#[derive(Debug, Clone)]
pub struct GaussianGce {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub log_partition: f64,
}

/// Exact ce moments: the gce conditioned on (1/N) sum x_i = m.
#[derive(Debug, Clone)]
pub struct GaussianCe {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

fn require_gaussian(spec: &ModelSpec) -> Result<(), GaussianError> {
    if spec.potential().is_zero() {
        Ok(())
    } else {
        Err(GaussianError::PotentialNotGaussian)
    }
}

/// Cholesky factorization M = L L^T exploiting the band structure; the
/// workhorse for solves, determinants, and sampling at any N.
pub(crate) struct BandCholesky {
    n: usize,
    r: usize,
    /// diag[d][j] = L_{j+d, j} for 0 <= d <= r.
    diag: Vec<Vec<f64>>,
}

impl BandCholesky {
    pub(crate) fn new(m: &InteractionMatrix) -> Result<Self, GaussianError> {
        let n = m.n();
        let r = m.range();
        let mut diag: Vec<Vec<f64>> = (0..=r).map(|d| vec![0.0; n.saturating_sub(d)]).collect();
        for j in 0..n {
            for i in j..(j + r + 1).min(n) {
                let mut sum = m.entry(i, j);
                let k_lo = i.saturating_sub(r);
                for k in k_lo..j {
                    if i - k <= r {
                        sum -= diag[i - k][k] * diag[j - k][k];
                    }
                }
                if i == j {
                    if sum <= 0.0 {
                        return Err(GaussianError::NotPositiveDefinite { col: j, pivot: sum });
                    }
                    diag[0][j] = sum.sqrt();
                } else {
                    diag[i - j][j] = sum / diag[0][j];
                }
            }
        }
        Ok(BandCholesky { n, r, diag })
    }

    pub(crate) fn log_det(&self) -> f64 {
        2.0 * self.diag[0].iter().map(|l| l.ln()).sum::<f64>()
    }

    /// Solve M x = b.
    // offset indexing between bands and the solution vector reads clearer
    // than iterator adapters here
    #[allow(clippy::needless_range_loop)]
    pub(crate) fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut y = b.to_vec();
        // forward: L y = b
        for i in 0..self.n {
            let lo = i.saturating_sub(self.r);
            let mut v = y[i];
            for k in lo..i {
                v -= self.diag[i - k][k] * y[k];
            }
            y[i] = v / self.diag[0][i];
        }
        // backward: L^T x = y
        for i in (0..self.n).rev() {
            let hi = (i + self.r + 1).min(self.n);
            let mut v = y[i];
            for k in (i + 1)..hi {
                v -= self.diag[k - i][i] * y[k];
            }
            y[i] = v / self.diag[0][i];
        }
        y
    }

    /// Solve L^T x = z; maps standard normals to precision-M Gaussians.
    #[allow(clippy::needless_range_loop)]
    pub(crate) fn solve_transposed(&self, z: &[f64]) -> Vec<f64> {
        let mut x = z.to_vec();
        for i in (0..self.n).rev() {
            let hi = (i + self.r + 1).min(self.n);
            let mut v = x[i];
            for k in (i + 1)..hi {
                v -= self.diag[k - i][i] * x[k];
            }
            x[i] = v / self.diag[0][i];
        }
        x
    }
}

fn rhs(spec: &ModelSpec, sigma: f64) -> Vec<f64> {
    spec.field().iter().map(|s| sigma - s).collect()
}

/// Exact gce mean, covariance, and log partition. Dense covariance; meant
/// for desk-scale N. For scalar quantities at large N use the band helpers
/// below.
pub fn gce_moments(spec: &ModelSpec) -> Result<GaussianGce, GaussianError> {
    require_gaussian(spec)?;
    let n = spec.n();
    let chol = BandCholesky::new(spec.interaction())?;
    let b = rhs(spec, spec.sigma());
    let mean = DVector::from_vec(chol.solve(&b));
    let mut covariance = DMatrix::zeros(n, n);
    let mut unit = vec![0.0; n];
    for j in 0..n {
        unit[j] = 1.0;
        let col = chol.solve(&unit);
        unit[j] = 0.0;
        for i in 0..n {
            covariance[(i, j)] = col[i];
        }
    }
    // symmetrize away roundoff so downstream linear algebra sees an exactly
    // symmetric matrix
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (covariance[(i, j)] + covariance[(j, i)]);
            covariance[(i, j)] = v;
            covariance[(j, i)] = v;
        }
    }
    let quad: f64 = b.iter().zip(mean.iter()).map(|(b, m)| b * m).sum();
    let log_partition =
        0.5 * quad + 0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() - chol.log_det());
    Ok(GaussianGce {
        mean,
        covariance,
        log_partition,
    })
}

/// Exact ce moments via the conditional-Gaussian update along the
/// constrained direction.
pub fn ce_moments(spec: &ModelSpec, m: f64) -> Result<GaussianCe, GaussianError> {
    let gce = gce_moments(spec)?;
    let n = spec.n();
    let sv = &gce.covariance * DVector::from_element(n, 1.0);
    let q: f64 = sv.sum();
    let shift = (n as f64 * m - gce.mean.sum()) / q;
    let mean = &gce.mean + &sv * shift;
    let covariance = &gce.covariance - (&sv * sv.transpose()) / q;
    Ok(GaussianCe { mean, covariance })
}

/// Free energy A(sigma) = (1/N)[ (1/2) b^T M^-1 b + (1/2) ln((2 pi)^N / det M) ]
/// with b = sigma 1 - s. Band arithmetic, valid at any N.
pub fn free_energy(spec: &ModelSpec, sigma: f64) -> Result<f64, GaussianError> {
    require_gaussian(spec)?;
    let n = spec.n() as f64;
    let chol = BandCholesky::new(spec.interaction())?;
    let b = rhs(spec, sigma);
    let x = chol.solve(&b);
    let quad: f64 = b.iter().zip(&x).map(|(b, x)| b * x).sum();
    Ok((0.5 * quad + 0.5 * (n * (2.0 * std::f64::consts::PI).ln() - chol.log_det())) / n)
}

/// The field sigma(m) = (N m + 1^T M^-1 s) / (1^T M^-1 1) under which the gce
/// mean spin equals m.
pub fn sigma_of_m_closed_form(spec: &ModelSpec, m: f64) -> Result<f64, GaussianError> {
    require_gaussian(spec)?;
    let chol = BandCholesky::new(spec.interaction())?;
    let ones = vec![1.0; spec.n()];
    let u = chol.solve(&ones);
    let w = chol.solve(spec.field());
    let numer = spec.n() as f64 * m + w.iter().sum::<f64>();
    Ok(numer / u.iter().sum::<f64>())
}

/// Row sums of the covariance, Sigma 1 = M^-1 1. Band solve, any N.
pub fn covariance_row_sums(spec: &ModelSpec) -> Result<Vec<f64>, GaussianError> {
    require_gaussian(spec)?;
    let chol = BandCholesky::new(spec.interaction())?;
    Ok(chol.solve(&vec![1.0; spec.n()]))
}

/// 1^T Sigma 1 = var of the total spin under the gce.
pub fn total_spin_variance(spec: &ModelSpec) -> Result<f64, GaussianError> {
    Ok(covariance_row_sums(spec)?.iter().sum())
}

/// One column of Sigma = M^-1 (band solve; used for decay scans at large N).
pub fn covariance_column(spec: &ModelSpec, j: usize) -> Result<Vec<f64>, GaussianError> {
    require_gaussian(spec)?;
    let chol = BandCholesky::new(spec.interaction())?;
    let mut unit = vec![0.0; spec.n()];
    unit[j] = 1.0;
    Ok(chol.solve(&unit))
}

/// Exact i.i.d. draw from the gce at the given sigma. Deterministic per seed.
pub fn sample_gce(spec: &ModelSpec, sigma: f64, seed: u64) -> Result<SpinConfig, GaussianError> {
    require_gaussian(spec)?;
    let chol = BandCholesky::new(spec.interaction())?;
    let mean = chol.solve(&rhs(spec, sigma));
    let mut rng = CounterRng::keyed(&[seed, STREAM_GCE]);
    Ok(SpinConfig::unconstrained(draw(&chol, &mean, &mut rng)))
}

/// Exact i.i.d. draw from the ce: a gce draw moved to the hyperplane along
/// Sigma 1, which is the exact conditional-Gaussian update.
pub fn sample_ce(spec: &ModelSpec, m: f64, seed: u64) -> Result<SpinConfig, GaussianError> {
    require_gaussian(spec)?;
    let chol = BandCholesky::new(spec.interaction())?;
    let mean = chol.solve(&rhs(spec, spec.sigma()));
    let sv = chol.solve(&vec![1.0; spec.n()]);
    let q: f64 = sv.iter().sum();
    let mut rng = CounterRng::keyed(&[seed, STREAM_CE]);
    let mut x = draw(&chol, &mean, &mut rng);
    let shift = (m * spec.n() as f64 - x.iter().sum::<f64>()) / q;
    for (xi, svi) in x.iter_mut().zip(&sv) {
        *xi += shift * svi;
    }
    Ok(SpinConfig::with_mean(x, m)?)
}

const STREAM_GCE: u64 = 0x6763_6531; // stream labels keep the two samplers'
const STREAM_CE: u64 = 0x6365_5f31; // draws decorrelated under equal seeds

fn draw(chol: &BandCholesky, mean: &[f64], rng: &mut CounterRng) -> Vec<f64> {
    let z: Vec<f64> = mean.iter().map(|_| rng.standard_normal()).collect();
    let mut x = chol.solve_transposed(&z);
    for (xi, mi) in x.iter_mut().zip(mean) {
        *xi += mi;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SingleSitePotential;

    fn gaussian_spec(n: usize, coupling: f64, sigma: f64) -> ModelSpec {
        ModelSpec::uniform(n, 1, coupling, SingleSitePotential::Zero, sigma).unwrap()
    }

    #[test]
    fn rejects_non_gaussian_potential() {
        let spec =
            ModelSpec::uniform(3, 1, 0.2, SingleSitePotential::Cosine { a: 1.0, b: 2.0 }, 0.0)
                .unwrap();
        assert!(matches!(
            gce_moments(&spec),
            Err(GaussianError::PotentialNotGaussian)
        ));
    }

    #[test]
    fn uncoupled_moments() {
        let spec = gaussian_spec(4, 0.0, 0.7);
        let gce = gce_moments(&spec).unwrap();
        for i in 0..4 {
            assert!((gce.mean[i] - 0.7).abs() < 1e-12);
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gce.covariance[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn coupled_mean_solves_linear_system() {
        // N=3, R=1, couplings 0.25, s=0, sigma=1: M mu = 1 has mu = (6/7, 4/7, 6/7).
        let spec = gaussian_spec(3, 0.25, 1.0);
        let gce = gce_moments(&spec).unwrap();
        let want = [6.0 / 7.0, 4.0 / 7.0, 6.0 / 7.0];
        for i in 0..3 {
            assert!((gce.mean[i] - want[i]).abs() < 1e-12);
        }
        // M Sigma = I
        let mut m = DMatrix::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                m[(i, j)] = spec.interaction().entry(i, j);
            }
        }
        let prod = m * &gce.covariance;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[(i, j)] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn field_equal_to_sigma_zeroes_mean() {
        let spec = ModelSpec::new(
            InteractionMatrix::uniform(5, 1, 0.3),
            SingleSitePotential::Zero,
            vec![0.8; 5],
            0.8,
        )
        .unwrap();
        let gce = gce_moments(&spec).unwrap();
        assert!(gce.mean.amax() < 1e-13);
    }

    #[test]
    fn ce_moments_uncoupled_matches_exchangeable_structure() {
        let n = 6;
        let spec = gaussian_spec(n, 0.0, 0.0);
        let m = 0.4;
        let ce = ce_moments(&spec, m).unwrap();
        let nf = n as f64;
        for i in 0..n {
            assert!((ce.mean[i] - m).abs() < 1e-12);
            for j in 0..n {
                let want = if i == j { 1.0 - 1.0 / nf } else { -1.0 / nf };
                assert!((ce.covariance[(i, j)] - want).abs() < 1e-12);
            }
        }
        // the Remark identity: cov(X_i, X_j) = -var(X_i)/(N-1), i != j
        let var = ce.covariance[(0, 0)];
        assert!((ce.covariance[(0, 1)] + var / (nf - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn ce_mean_sums_to_nm_and_constrained_direction_has_zero_variance() {
        let spec = ModelSpec::new(
            InteractionMatrix::uniform(7, 2, 0.15),
            SingleSitePotential::Zero,
            vec![0.3, -0.1, 0.0, 0.2, -0.4, 0.1, 0.05],
            0.6,
        )
        .unwrap();
        let m = 0.25;
        let ce = ce_moments(&spec, m).unwrap();
        assert!((ce.mean.sum() - 7.0 * m).abs() < 1e-9 * (7.0 * m).abs());
        let row_sums = &ce.covariance * DVector::from_element(7, 1.0);
        assert!(row_sums.amax() < 1e-9);
    }

    #[test]
    fn two_site_ce_covariance() {
        let spec = gaussian_spec(2, 0.0, 0.0);
        let ce = ce_moments(&spec, 0.0).unwrap();
        for (i, j, want) in [(0, 0, 0.5), (0, 1, -0.5), (1, 0, -0.5), (1, 1, 0.5)] {
            assert!((ce.covariance[(i, j)] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn free_energy_uncoupled_closed_form() {
        let spec = gaussian_spec(4, 0.0, 0.0);
        for sigma in [0.0, 0.3, -1.2] {
            let a = free_energy(&spec, sigma).unwrap();
            let want = sigma * sigma / 2.0 + 0.5 * (2.0 * std::f64::consts::PI).ln();
            assert!((a - want).abs() < 1e-12);
        }
        // dA/dsigma = mean spin
        let h = 1e-6;
        let d = (free_energy(&spec, 0.3 + h).unwrap() - free_energy(&spec, 0.3 - h).unwrap())
            / (2.0 * h);
        assert!((d - 0.3).abs() < 1e-9);
    }

    #[test]
    fn sigma_of_m_inverts_mean_spin() {
        let spec = ModelSpec::new(
            InteractionMatrix::uniform(6, 1, 0.25),
            SingleSitePotential::Zero,
            vec![0.2, -0.3, 0.1, 0.0, 0.4, -0.1],
            0.0,
        )
        .unwrap();
        let m = 2.0 / 3.0;
        let sigma = sigma_of_m_closed_form(&spec, m).unwrap();
        let gce = gce_moments(&spec.with_sigma(sigma)).unwrap();
        assert!((gce.mean.sum() / 6.0 - m).abs() < 1e-10);

        // M = I, s = 0: sigma = m; with constant field c: sigma = m + c.
        let free = gaussian_spec(3, 0.0, 0.0);
        assert!((sigma_of_m_closed_form(&free, 0.37).unwrap() - 0.37).abs() < 1e-13);
        let shifted = ModelSpec::new(
            InteractionMatrix::uniform(3, 1, 0.0),
            SingleSitePotential::Zero,
            vec![0.5; 3],
            0.0,
        )
        .unwrap();
        assert!((sigma_of_m_closed_form(&shifted, 0.37).unwrap() - 0.87).abs() < 1e-13);
    }

    #[test]
    fn band_cholesky_matches_dense_solve() {
        let inter = InteractionMatrix::from_bands(
            5,
            vec![vec![0.2, -0.1, 0.15, 0.05], vec![0.1, 0.05, -0.2]],
        )
        .unwrap();
        let chol = BandCholesky::new(&inter).unwrap();
        let b = [1.0, -2.0, 0.5, 3.0, -1.0];
        let x = chol.solve(&b);
        let mut dense = DMatrix::zeros(5, 5);
        for i in 0..5 {
            for j in 0..5 {
                dense[(i, j)] = inter.entry(i, j);
            }
        }
        let want = dense
            .clone()
            .cholesky()
            .unwrap()
            .solve(&DVector::from_row_slice(&b));
        for i in 0..5 {
            assert!((x[i] - want[i]).abs() < 1e-12);
        }
        assert!((chol.log_det() - dense.determinant().ln()).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_and_respects_constraint() {
        let spec = gaussian_spec(8, 0.2, 0.5);
        let a = sample_gce(&spec, 0.5, 99).unwrap();
        let b = sample_gce(&spec, 0.5, 99).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        let c = sample_gce(&spec, 0.5, 100).unwrap();
        assert_ne!(a.as_slice(), c.as_slice());

        let ce = sample_ce(&spec, 0.3, 7).unwrap();
        assert!((ce.mean() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn two_site_ce_samples_live_on_the_antidiagonal() {
        let spec = gaussian_spec(2, 0.0, 0.0);
        for seed in 0..20 {
            let s = sample_ce(&spec, 0.0, seed).unwrap();
            let x = s.as_slice();
            assert!((x[0] + x[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_moments_converge_to_closed_form() {
        let spec = gaussian_spec(4, 0.25, 0.4);
        let gce = gce_moments(&spec).unwrap();
        let n_draws = 40_000;
        let mut mean = [0.0; 4];
        let mut cov01 = 0.0;
        for seed in 0..n_draws {
            let s = sample_gce(&spec, 0.4, seed).unwrap();
            let x = s.as_slice();
            for i in 0..4 {
                mean[i] += x[i];
            }
            cov01 += (x[0] - gce.mean[0]) * (x[1] - gce.mean[1]);
        }
        let nf = n_draws as f64;
        for i in 0..4 {
            // SE of a site mean is sqrt(var/n) ~ 1/200
            assert!(
                (mean[i] / nf - gce.mean[i]).abs() < 4.0 * (gce.covariance[(i, i)] / nf).sqrt()
            );
        }
        let se = (1.5 / nf).sqrt(); // crude var bound for the product term
        assert!((cov01 / nf - gce.covariance[(0, 1)]).abs() < 4.0 * se);
    }
}
