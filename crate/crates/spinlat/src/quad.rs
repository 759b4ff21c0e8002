//! Gauss–Legendre rules and compensated summation shared by the
//! deterministic backends.

use std::f64::consts::PI;

/// Nodes and weights of the n-point Gauss–Legendre rule on [-1, 1].
///
/// Newton iteration on the Legendre recurrence; accurate to ~1e-15 for the
/// node counts used here (n up to a few thousand).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "quadrature rule needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let half = n.div_ceil(2);
    for i in 0..half {
        // Tricomi initial guess, then Newton.
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_deriv(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() <= 1e-15 * x.abs().max(1.0) {
                let (_, d) = legendre_with_deriv(n, x);
                dp = d;
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // x from the cosine guess is the positive-side root for small i.
        nodes[i] = -x;
        weights[i] = w;
        nodes[n - 1 - i] = x;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// Gauss–Legendre rule mapped onto [a, b].
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (xs, ws) = gauss_legendre(n);
    let mid = 0.5 * (a + b);
    let scale = 0.5 * (b - a);
    (
        xs.iter().map(|x| mid + scale * x).collect(),
        ws.iter().map(|w| scale * w).collect(),
    )
}

fn legendre_with_deriv(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 1..n {
        let kf = k as f64;
        let p2 = ((2.0 * kf + 1.0) * x * p1 - kf * p0) / (kf + 1.0);
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Neumaier-compensated accumulator; summation order still matters, so
/// callers that promise thread-count independence must feed it in a fixed
/// order.
#[derive(Debug, Default, Clone, Copy)]
pub struct Kahan {
    sum: f64,
    comp: f64,
}

impl Kahan {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_interval_length() {
        for &n in &[1usize, 2, 16, 48, 161] {
            let (_, w) = gauss_legendre(n);
            let s: f64 = w.iter().sum();
            assert!((s - 2.0).abs() < 1e-12, "n={n}: weight sum {s}");
        }
    }

    #[test]
    fn integrates_polynomials_exactly() {
        // n-point rule is exact through degree 2n-1.
        let (x, w) = gauss_legendre(5);
        let int_x8: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(8)).sum();
        assert!((int_x8 - 2.0 / 9.0).abs() < 1e-14);
    }

    #[test]
    fn integrates_gaussian_on_shifted_interval() {
        let (x, w) = gauss_legendre_on(64, -8.0, 8.0);
        let z: f64 = x
            .iter()
            .zip(&w)
            .map(|(x, w)| w * (-0.5 * x * x).exp())
            .sum();
        assert!((z - (2.0 * PI).sqrt()).abs() < 1e-13);
    }

    #[test]
    fn kahan_recovers_cancellation() {
        let mut k = Kahan::new();
        k.add(1e16);
        for _ in 0..10 {
            k.add(1.0);
        }
        k.add(-1e16);
        assert_eq!(k.total(), 10.0);
    }
}
