//! Turns sample streams and deterministic scans into reportable quantities:
//! means with errors and effective sample sizes, covariances, centered
//! moment ratios, exponential decay fits, and power-law fits.
//!
//! Every routine is a deterministic function of its input arrays.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { got: usize, need: usize },
    #[error("need at least {need} usable points, got {got}")]
    TooFewPoints { got: usize, need: usize },
    #[error("value at index {0} must be positive for a log fit")]
    NonPositiveValue(usize),
    #[error("sample streams have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// A Monte Carlo estimate with a batch-means standard error and an effective
/// sample size from the initial-positive-sequence truncation.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct MomentEstimate {
    pub value: f64,
    pub std_error: f64,
    pub ess: f64,
    pub n: usize,
}

/// Exponential decay fit c(d) ~ amplitude * exp(-rate * d).
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct DecayFit {
    pub rate: f64,
    pub amplitude: f64,
    pub r_squared: f64,
    pub points_used: usize,
    pub noise_floor: f64,
}

/// Power-law fit delta(N) ~ exp(intercept) * N^slope with a 95% CI on the
/// slope.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct PowerLawFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub slope_ci: (f64, f64),
}

const MIN_SAMPLES: usize = 100;
/// Autocorrelation pairs examined before conservatively truncating; chains
/// here mix in far fewer sweeps.
const MAX_ACF_PAIRS: usize = 2_000;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Batch layout: ceil(sqrt(n)) batches, trailing remainder dropped.
fn batch_layout(n: usize) -> (usize, usize) {
    let n_batches = (n as f64).sqrt().ceil() as usize;
    (n_batches, n / n_batches)
}

fn batch_means(samples: &[f64]) -> Vec<f64> {
    let (n_batches, size) = batch_layout(samples.len());
    (0..n_batches)
        .map(|b| mean(&samples[b * size..(b + 1) * size]))
        .collect()
}

/// Sample mean with batch-means SE and initial-positive-sequence ESS.
pub fn mc_mean(samples: &[f64]) -> Result<MomentEstimate, EstimatorError> {
    let n = samples.len();
    if n < MIN_SAMPLES {
        return Err(EstimatorError::TooFewSamples {
            got: n,
            need: MIN_SAMPLES,
        });
    }
    let m = mean(samples);
    let centered: Vec<f64> = samples.iter().map(|x| x - m).collect();
    let gamma0 = centered.iter().map(|c| c * c).sum::<f64>() / n as f64;
    if gamma0 == 0.0 {
        // constant stream: exact value, no uncertainty
        return Ok(MomentEstimate {
            value: m,
            std_error: 0.0,
            ess: n as f64,
            n,
        });
    }
    let batches = batch_means(samples);
    let nb = batches.len() as f64;
    let bmean = mean(&batches);
    let bvar = batches.iter().map(|b| (b - bmean) * (b - bmean)).sum::<f64>() / (nb - 1.0);
    let std_error = (bvar / nb).sqrt();

    // Geyer initial positive sequence on adjacent-lag pairs.
    let acov = |t: usize| -> f64 {
        centered[..n - t]
            .iter()
            .zip(&centered[t..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n as f64
    };
    let mut tau = -1.0;
    for k in 0..MAX_ACF_PAIRS {
        let t = 2 * k;
        if t + 1 >= n {
            break;
        }
        let pair = acov(t) + acov(t + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair / gamma0;
    }
    let ess = (n as f64 / tau.max(1.0)).min(n as f64);
    Ok(MomentEstimate {
        value: m,
        std_error,
        ess,
        n,
    })
}

/// Covariance of two streams with a jackknife-over-batches SE.
pub fn mc_covariance(f: &[f64], g: &[f64]) -> Result<MomentEstimate, EstimatorError> {
    if f.len() != g.len() {
        return Err(EstimatorError::LengthMismatch(f.len(), g.len()));
    }
    let n = f.len();
    if n < MIN_SAMPLES {
        return Err(EstimatorError::TooFewSamples {
            got: n,
            need: MIN_SAMPLES,
        });
    }
    let fbar = mean(f);
    let gbar = mean(g);
    let products: Vec<f64> = f
        .iter()
        .zip(g)
        .map(|(a, b)| (a - fbar) * (b - gbar))
        .collect();
    let full = mean(&products);
    // leave-one-batch-out estimates over the batched prefix
    let (n_batches, size) = batch_layout(n);
    let used = n_batches * size;
    let total: f64 = products[..used].iter().sum();
    let mut jack = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let batch_sum: f64 = products[b * size..(b + 1) * size].iter().sum();
        jack.push((total - batch_sum) / (used - size) as f64);
    }
    let jmean = mean(&jack);
    let nb = n_batches as f64;
    let jvar = jack.iter().map(|j| (j - jmean) * (j - jmean)).sum::<f64>() * (nb - 1.0) / nb;
    let ess = mc_mean(&products)?.ess;
    Ok(MomentEstimate {
        value: full,
        std_error: jvar.sqrt(),
        ess,
        n,
    })
}

/// Normalized moment of a centered block-sum stream: E[Y^3]/|A| for order 3,
/// E[Y^4]/|A|^2 for order 4.
pub fn moment_ratio(
    centered_block_sums: &[f64],
    block_size: usize,
    order: u32,
) -> Result<MomentEstimate, EstimatorError> {
    assert!(order == 3 || order == 4, "supported orders are 3 and 4");
    let norm = match order {
        3 => block_size as f64,
        _ => (block_size * block_size) as f64,
    };
    let powered: Vec<f64> = centered_block_sums
        .iter()
        .map(|y| y.powi(order as i32))
        .collect();
    let est = mc_mean(&powered)?;
    Ok(MomentEstimate {
        value: est.value / norm,
        std_error: est.std_error / norm,
        ess: est.ess,
        n: est.n,
    })
}

/// Ordinary least squares of y on x. Returns (slope, intercept, r^2,
/// slope standard error).
fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64, f64) {
    let n = x.len() as f64;
    let xbar = mean(x);
    let ybar = mean(y);
    let sxx: f64 = x.iter().map(|v| (v - xbar) * (v - xbar)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - xbar) * (b - ybar)).sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let syy: f64 = y.iter().map(|v| (v - ybar) * (v - ybar)).sum();
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let r = b - (intercept + slope * a);
            r * r
        })
        .sum();
    let r_squared = if syy > 0.0 { 1.0 - rss / syy } else { 1.0 };
    let se = if n > 2.0 {
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    (slope, intercept, r_squared, se)
}

/// Two-sided 97.5% Student t quantile for small residual degrees of freedom.
fn t_quantile(df: usize) -> f64 {
    const TABLE: [f64; 12] = [
        12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179,
    ];
    match df {
        0 => f64::INFINITY,
        d if d <= TABLE.len() => TABLE[d - 1],
        d if d <= 20 => 2.10,
        d if d <= 40 => 2.02,
        _ => 1.96,
    }
}

/// Least squares of log magnitude against distance, after dropping points at
/// or below the noise floor.
pub fn fit_exponential_decay(
    distances: &[f64],
    magnitudes: &[f64],
    noise_floor: f64,
) -> Result<DecayFit, EstimatorError> {
    assert_eq!(distances.len(), magnitudes.len());
    let kept: Vec<(f64, f64)> = distances
        .iter()
        .zip(magnitudes)
        .filter(|(_, c)| c.abs() > noise_floor)
        .map(|(d, c)| (*d, c.abs().ln()))
        .collect();
    if kept.len() < 3 {
        return Err(EstimatorError::TooFewPoints {
            got: kept.len(),
            need: 3,
        });
    }
    let xs: Vec<f64> = kept.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = kept.iter().map(|p| p.1).collect();
    let (slope, intercept, r_squared, _) = linear_fit(&xs, &ys);
    Ok(DecayFit {
        rate: -slope,
        amplitude: intercept.exp(),
        r_squared,
        points_used: kept.len(),
        noise_floor,
    })
}

/// Least squares of log delta against log N.
pub fn fit_power_law(ns: &[f64], deltas: &[f64]) -> Result<PowerLawFit, EstimatorError> {
    assert_eq!(ns.len(), deltas.len());
    if ns.len() < 4 {
        return Err(EstimatorError::TooFewPoints {
            got: ns.len(),
            need: 4,
        });
    }
    if let Some(i) = deltas.iter().position(|d| *d <= 0.0) {
        return Err(EstimatorError::NonPositiveValue(i));
    }
    let xs: Vec<f64> = ns.iter().map(|n| n.ln()).collect();
    let ys: Vec<f64> = deltas.iter().map(|d| d.ln()).collect();
    let (slope, intercept, r_squared, se) = linear_fit(&xs, &ys);
    let t = t_quantile(ns.len().saturating_sub(2));
    let half = if se == 0.0 { 0.0 } else { t * se };
    Ok(PowerLawFit {
        slope,
        intercept,
        r_squared,
        slope_ci: (slope - half, slope + half),
    })
}
