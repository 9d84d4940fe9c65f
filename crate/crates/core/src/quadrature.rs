//! Gauss-Hermite quadrature for expectations against Gaussian increments.

use nalgebra::DMatrix;

/// Nodes and weights integrating `exp(-x^2) * f(x)` exactly for polynomials
/// of degree up to `2n - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    node_weight_pairs: Vec<(f64, f64)>,
}

impl GaussHermite {
    /// Golub-Welsch: eigenvalues of the symmetric tridiagonal companion
    /// matrix with `sqrt(k/2)` off the diagonal are the nodes; the squared
    /// first eigenvector components scaled by `sqrt(pi)` are the weights.
    pub fn new(degree: usize) -> Self {
        assert!(degree >= 1, "quadrature degree must be at least 1");
        let mut companion = DMatrix::<f64>::zeros(degree, degree);
        for k in 0..degree.saturating_sub(1) {
            let off = ((k as f64 + 1.0) * 0.5).sqrt();
            companion[(k, k + 1)] = off;
            companion[(k + 1, k)] = off;
        }
        let eigen = companion.symmetric_eigen();
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let mut node_weight_pairs: Vec<(f64, f64)> = eigen
            .eigenvalues
            .iter()
            .copied()
            .zip(
                eigen
                    .eigenvectors
                    .row(0)
                    .iter()
                    .map(|v| v * v * sqrt_pi),
            )
            .collect();
        node_weight_pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        GaussHermite { node_weight_pairs }
    }

    pub fn degree(&self) -> usize {
        self.node_weight_pairs.len()
    }

    /// Quadrature of `exp(-x^2) * integrand(x)` over the real line.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut integrand: F) -> f64 {
        self.node_weight_pairs
            .iter()
            .map(|(x, w)| integrand(*x) * w)
            .sum()
    }

    /// `E[f(Z)]` for standard normal `Z`.
    pub fn expect_standard_normal<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
        self.node_weight_pairs
            .iter()
            .map(|(x, w)| f(std::f64::consts::SQRT_2 * x) * w * inv_sqrt_pi)
            .sum()
    }

    /// Abscissas `sqrt(2) * x_i` and probabilistic weights `w_i / sqrt(pi)`,
    /// turning the rule into `E[f(Z)] = sum_i p_i f(z_i)` for `Z ~ N(0, 1)`.
    pub fn standard_normal_rule(&self) -> Vec<(f64, f64)> {
        let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
        self.node_weight_pairs
            .iter()
            .map(|(x, w)| (std::f64::consts::SQRT_2 * x, w * inv_sqrt_pi))
            .collect()
    }
}
