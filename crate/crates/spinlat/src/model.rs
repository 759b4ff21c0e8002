//! The lattice model: single-site potentials, banded symmetric interaction,
//! external fields, and the local energy arithmetic every backend builds on.
//!
//! A spin configuration is a point x in R^N. Its energy is
//!
//!   H(x) = sum_i [ psi(x_i) + s_i x_i ] + (1/2) x^T M x,
//!
//! with psi(z) = z^2/2 + psi_b(z), unit diagonal M_ii = 1, and M banded to
//! range R. The grand canonical density is proportional to
//! exp(sigma * sum_i x_i - H(x)).

use std::sync::Arc;

use thiserror::Error;

/// Absolute tolerance on |mean(x) - m| for configurations tagged with a
/// mean-spin constraint. Far above f64 accumulation noise for N <= 1e4,
/// far below any signal.
pub const MEAN_CONSTRAINT_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("interaction not symmetric at ({i}, {j}): {upper} vs {lower}")]
    NonSymmetric { i: usize, j: usize, upper: f64, lower: f64 },
    #[error("nonzero coupling outside the band at ({i}, {j}): |i-j| > {range}")]
    OutsideBand { i: usize, j: usize, range: usize },
    #[error("row {i} not strictly diagonally dominant: off-diagonal mass {mass} >= 1")]
    NotDiagonallyDominant { i: usize, mass: f64 },
    #[error("{what} has length {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("pair move needs two distinct sites, got i = j = {0}")]
    SameSite(usize),
    #[error("mean-spin constraint violated: |mean - {target}| = {deviation:e} > {tol:e}")]
    ConstraintViolated {
        target: f64,
        deviation: f64,
        tol: f64,
    },
}

/// The bounded perturbation psi_b of the quadratic single-site potential.
///
/// The family is restricted to choices whose value and first two derivatives
/// have finite, closed-form sup norms, so validation can certify the model
/// assumptions exactly.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum SingleSitePotential {
    /// psi_b = 0: the purely Gaussian model.
    Zero,
    /// psi_b(z) = a cos(b z). With a = 1, b = 2 the full potential
    /// z^2/2 + cos(2z) is a nonconvex multi-well.
    Cosine { a: f64, b: f64 },
}

impl SingleSitePotential {
    #[inline]
    pub fn value(&self, z: f64) -> f64 {
        match *self {
            SingleSitePotential::Zero => 0.0,
            SingleSitePotential::Cosine { a, b } => a * (b * z).cos(),
        }
    }

    #[inline]
    pub fn deriv(&self, z: f64) -> f64 {
        match *self {
            SingleSitePotential::Zero => 0.0,
            SingleSitePotential::Cosine { a, b } => -a * b * (b * z).sin(),
        }
    }

    #[inline]
    pub fn second_deriv(&self, z: f64) -> f64 {
        match *self {
            SingleSitePotential::Zero => 0.0,
            SingleSitePotential::Cosine { a, b } => -a * b * b * (b * z).cos(),
        }
    }

    /// Sup norms (|psi_b|, |psi_b'|, |psi_b''|); all finite by construction.
    pub fn sup_norms(&self) -> (f64, f64, f64) {
        match *self {
            SingleSitePotential::Zero => (0.0, 0.0, 0.0),
            SingleSitePotential::Cosine { a, b } => {
                (a.abs(), (a * b).abs(), (a * b * b).abs())
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, SingleSitePotential::Zero)
    }

    /// Full single-site potential psi(z) = z^2/2 + psi_b(z).
    #[inline]
    pub fn total(&self, z: f64) -> f64 {
        0.5 * z * z + self.value(z)
    }
}

/// Symmetric banded interaction with implicit unit diagonal.
///
/// Storage is the upper band: `bands[d-1][i] = M_{i, i+d}` for
/// 1 <= d <= R. Symmetry is structural once constructed; constructors that
/// accept redundant input check it.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InteractionMatrix {
    n: usize,
    range: usize,
    bands: Vec<Vec<f64>>,
}

impl InteractionMatrix {
    /// Constant coupling c on every pair with 1 <= |i-j| <= R.
    pub fn uniform(n: usize, range: usize, coupling: f64) -> Self {
        let bands = (1..=range)
            .map(|d| vec![coupling; n.saturating_sub(d)])
            .collect();
        InteractionMatrix { n, range, bands }
    }

    /// Build from explicit upper bands; `bands[d-1]` must have length N - d.
    pub fn from_bands(n: usize, bands: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        for (k, band) in bands.iter().enumerate() {
            let expected = n.saturating_sub(k + 1);
            if band.len() != expected {
                return Err(ModelError::DimensionMismatch {
                    what: "coupling band",
                    got: band.len(),
                    expected,
                });
            }
        }
        let range = bands.len();
        Ok(InteractionMatrix { n, range, bands })
    }

    /// Build from a full matrix accessor, checking unit diagonal territory is
    /// untouched, symmetry, and bandedness.
    pub fn from_dense(
        n: usize,
        range: usize,
        entry: impl Fn(usize, usize) -> f64,
    ) -> Result<Self, ModelError> {
        for i in 0..n {
            for j in (i + 1)..n {
                let upper = entry(i, j);
                let lower = entry(j, i);
                if upper != lower {
                    return Err(ModelError::NonSymmetric { i, j, upper, lower });
                }
                if j - i > range && upper != 0.0 {
                    return Err(ModelError::OutsideBand { i, j, range });
                }
            }
        }
        let bands = (1..=range)
            .map(|d| (0..n - d).map(|i| entry(i, i + d)).collect())
            .collect();
        Ok(InteractionMatrix { n, range, bands })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn range(&self) -> usize {
        self.range
    }

    /// M_ij including the unit diagonal; zero outside the band.
    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 1.0;
        }
        let (lo, hi) = if i < j { (i, j) } else { (j, i) };
        let d = hi - lo;
        if d > self.range {
            0.0
        } else {
            self.bands[d - 1][lo]
        }
    }

    /// Off-diagonal neighbors (j, M_ij) of site i within the band.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = i.saturating_sub(self.range);
        let hi = (i + self.range).min(self.n - 1);
        (lo..=hi).filter_map(move |j| {
            if j == i {
                None
            } else {
                Some((j, self.entry(i, j)))
            }
        })
    }

    /// Interaction field (Mx)_i - x_i = sum over off-diagonal neighbors.
    #[inline]
    pub fn local_field(&self, x: &[f64], i: usize) -> f64 {
        let mut acc = 0.0;
        for (j, m) in self.neighbors(i) {
            acc += m * x[j];
        }
        acc
    }

    /// Strict diagonal dominance margin delta = min_i (1 - sum_{j != i} |M_ij|).
    pub fn dominance_margin(&self) -> f64 {
        (0..self.n)
            .map(|i| 1.0 - self.neighbors(i).map(|(_, m)| m.abs()).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Result of model validation: the dominance margin and the potential's sup
/// norms, certified positive/finite before any backend runs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ValidationReport {
    pub n: usize,
    pub range: usize,
    pub margin: f64,
    pub psi_b_sup: f64,
    pub psi_b_deriv_sup: f64,
    pub psi_b_second_deriv_sup: f64,
}

/// A fully validated model. Constructing one is the validation gate: every
/// `ModelSpec` in existence satisfies the assumptions.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelSpec {
    interaction: InteractionMatrix,
    potential: SingleSitePotential,
    field: Vec<f64>,
    sigma: f64,
}

impl ModelSpec {
    pub fn new(
        interaction: InteractionMatrix,
        potential: SingleSitePotential,
        field: Vec<f64>,
        sigma: f64,
    ) -> Result<Self, ModelError> {
        validate_parts(&interaction, &field)?;
        Ok(ModelSpec {
            interaction,
            potential,
            field,
            sigma,
        })
    }

    /// Convenience: uniform coupling, zero field.
    pub fn uniform(
        n: usize,
        range: usize,
        coupling: f64,
        potential: SingleSitePotential,
        sigma: f64,
    ) -> Result<Self, ModelError> {
        Self::new(
            InteractionMatrix::uniform(n, range, coupling),
            potential,
            vec![0.0; n],
            sigma,
        )
    }

    pub fn n(&self) -> usize {
        self.interaction.n
    }

    pub fn range(&self) -> usize {
        self.interaction.range
    }

    pub fn interaction(&self) -> &InteractionMatrix {
        &self.interaction
    }

    pub fn potential(&self) -> &SingleSitePotential {
        &self.potential
    }

    pub fn field(&self) -> &[f64] {
        &self.field
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Same model with a different external field sigma. The ce never reads
    /// sigma, so ce results are invariant under this.
    pub fn with_sigma(&self, sigma: f64) -> Self {
        let mut s = self.clone();
        s.sigma = sigma;
        s
    }

    /// Re-derive the validation report (always passes for a constructed spec).
    pub fn validation_report(&self) -> ValidationReport {
        let (v, d1, d2) = self.potential.sup_norms();
        ValidationReport {
            n: self.n(),
            range: self.range(),
            margin: self.interaction.dominance_margin(),
            psi_b_sup: v,
            psi_b_deriv_sup: d1,
            psi_b_second_deriv_sup: d2,
        }
    }

    /// H(x) via the band: sum_i [psi_b(x_i) + s_i x_i + x_i^2/2]
    /// + sum_{d<=R} sum_i M_{i,i+d} x_i x_{i+d}.
    pub fn hamiltonian(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.n(), "configuration length");
        let mut h = 0.0;
        for (i, &xi) in x.iter().enumerate() {
            h += self.potential.total(xi) + self.field[i] * xi;
        }
        for (k, band) in self.interaction.bands.iter().enumerate() {
            let d = k + 1;
            for (i, &m) in band.iter().enumerate() {
                h += m * x[i] * x[i + d];
            }
        }
        h
    }

    /// log density of the gce up to the normalization: sigma * sum x_i - H(x).
    pub fn gce_log_density_unnormalized(&self, x: &[f64]) -> f64 {
        let s: f64 = x.iter().sum();
        self.sigma * s - self.hamiltonian(x)
    }

    /// Energy change of the single-site move x_i -> new_xi, including the
    /// -sigma x_i term of the gce exponent. Touches only sites within R of i,
    /// so a Metropolis update costs O(R). Acceptance is min(1, exp(-delta)).
    pub fn energy_delta_single(&self, x: &[f64], i: usize, new_xi: f64) -> f64 {
        let old = x[i];
        let dx = new_xi - old;
        let local = self.interaction.local_field(x, i);
        self.potential.value(new_xi) - self.potential.value(old)
            + 0.5 * (new_xi * new_xi - old * old)
            + (self.field[i] - self.sigma) * dx
            + dx * local
    }

    /// Energy change of the exchange move (x_i, x_j) -> (x_i + eta, x_j - eta).
    /// The sum of spins is conserved, so the sigma term cancels exactly and
    /// never enters this code path.
    pub fn energy_delta_pair(
        &self,
        x: &[f64],
        i: usize,
        j: usize,
        eta: f64,
    ) -> Result<f64, ModelError> {
        if i == j {
            return Err(ModelError::SameSite(i));
        }
        let xi = x[i];
        let xj = x[j];
        let ni = xi + eta;
        let nj = xj - eta;
        let mut delta = self.potential.value(ni) - self.potential.value(xi)
            + self.potential.value(nj)
            - self.potential.value(xj)
            + 0.5 * (ni * ni - xi * xi + nj * nj - xj * xj)
            + self.field[i] * eta
            - self.field[j] * eta;
        // Cross terms against unchanged neighbors; the (i, j) bond, if any,
        // is counted once with both endpoints updated.
        let mij = self.interaction.entry(i, j);
        if mij != 0.0 {
            delta += mij * (ni * nj - xi * xj);
        }
        for (k, m) in self.interaction.neighbors(i) {
            if k != j {
                delta += m * eta * x[k];
            }
        }
        for (k, m) in self.interaction.neighbors(j) {
            if k != i {
                delta -= m * eta * x[k];
            }
        }
        Ok(delta)
    }

    /// Gradient of H: component i is psi_b'(x_i) + s_i + (Mx)_i.
    pub fn hamiltonian_gradient(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n(), "configuration length");
        (0..self.n())
            .map(|i| {
                self.potential.deriv(x[i])
                    + self.field[i]
                    + x[i]
                    + self.interaction.local_field(x, i)
            })
            .collect()
    }
}

/// Validate interaction and field dimensions plus strict diagonal dominance.
pub fn validate_parts(
    interaction: &InteractionMatrix,
    field: &[f64],
) -> Result<ValidationReport, ModelError> {
    if field.len() != interaction.n {
        return Err(ModelError::DimensionMismatch {
            what: "external field",
            got: field.len(),
            expected: interaction.n,
        });
    }
    for i in 0..interaction.n {
        let mass: f64 = interaction.neighbors(i).map(|(_, m)| m.abs()).sum();
        if mass >= 1.0 {
            return Err(ModelError::NotDiagonallyDominant { i, mass });
        }
    }
    Ok(ValidationReport {
        n: interaction.n,
        range: interaction.range,
        margin: interaction.dominance_margin(),
        psi_b_sup: 0.0,
        psi_b_deriv_sup: 0.0,
        psi_b_second_deriv_sup: 0.0,
    })
}

/// Validate a candidate model assembled from parts, reporting the dominance
/// margin and potential sup norms on success.
pub fn validate_model(
    interaction: &InteractionMatrix,
    potential: &SingleSitePotential,
    field: &[f64],
) -> Result<ValidationReport, ModelError> {
    let mut report = validate_parts(interaction, field)?;
    let (v, d1, d2) = potential.sup_norms();
    report.psi_b_sup = v;
    report.psi_b_deriv_sup = d1;
    report.psi_b_second_deriv_sup = d2;
    Ok(report)
}

/// Constraint tag of a spin configuration.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Constraint {
    Unconstrained,
    MeanSpin(f64),
}

/// A point x in R^N, optionally pinned to the mean-spin hyperplane.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpinConfig {
    x: Vec<f64>,
    constraint: Constraint,
}

impl SpinConfig {
    pub fn unconstrained(x: Vec<f64>) -> Self {
        SpinConfig {
            x,
            constraint: Constraint::Unconstrained,
        }
    }

    /// Tag with MeanSpin(m); fails if the mean is off by more than the
    /// constraint tolerance.
    pub fn with_mean(x: Vec<f64>, m: f64) -> Result<Self, ModelError> {
        let deviation = (mean_of(&x) - m).abs();
        if deviation > MEAN_CONSTRAINT_TOL {
            return Err(ModelError::ConstraintViolated {
                target: m,
                deviation,
                tol: MEAN_CONSTRAINT_TOL,
            });
        }
        Ok(SpinConfig {
            x,
            constraint: Constraint::MeanSpin(m),
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.x
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.x
    }

    pub fn constraint(&self) -> Constraint {
        self.constraint
    }

    pub fn mean(&self) -> f64 {
        mean_of(&self.x)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.x
    }
}

fn mean_of(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

type Evaluator = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A function of the configuration together with its declared support and a
/// sup-norm bound on its gradient. Evaluators must depend only on the
/// support coordinates.
#[derive(Clone)]
pub struct Observable {
    name: String,
    support: Vec<usize>,
    grad_sup_norm: f64,
    eval: Evaluator,
}

impl std::fmt::Debug for Observable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Observable")
            .field("name", &self.name)
            .field("support", &self.support)
            .field("grad_sup_norm", &self.grad_sup_norm)
            .finish()
    }
}

impl Observable {
    pub fn new(
        name: impl Into<String>,
        mut support: Vec<usize>,
        grad_sup_norm: f64,
        eval: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        support.sort_unstable();
        support.dedup();
        Observable {
            name: name.into(),
            support,
            grad_sup_norm,
            eval: Arc::new(eval),
        }
    }

    /// f(x) = x_i.
    pub fn site(i: usize) -> Self {
        Observable::new(format!("x[{i}]"), vec![i], 1.0, move |x| x[i])
    }

    /// f(x) = mean over a window of sites.
    pub fn window_mean(sites: Vec<usize>) -> Self {
        let w = sites.len() as f64;
        let sites_for_eval = sites.clone();
        Observable::new(
            format!("mean{sites:?}"),
            sites,
            1.0, // |grad| = 1/w per coordinate, <= 1 in sup norm
            move |x| sites_for_eval.iter().map(|&i| x[i]).sum::<f64>() / w,
        )
    }

    /// f(x) = sum over a window of sites.
    pub fn window_sum(sites: Vec<usize>) -> Self {
        let sites_for_eval = sites.clone();
        Observable::new(format!("sum{sites:?}"), sites, 1.0, move |x| {
            sites_for_eval.iter().map(|&i| x[i]).sum::<f64>()
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn grad_sup_norm(&self) -> f64 {
        self.grad_sup_norm
    }

    /// Whether the support is a contiguous run of sites.
    pub fn has_contiguous_support(&self) -> bool {
        self.support
            .windows(2)
            .all(|w| w[1] == w[0] + 1)
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }
}
