//! Gauss quadrature rules built via the Golub-Welsch eigenproblem.
//!
//! Nodes are the eigenvalues of the Jacobi matrix of the orthogonal-polynomial
//! recurrence, weights come from the squared first eigenvector components
//! scaled by the zeroth moment. Used by the oracle module (Gauss-Hermite for
//! Gaussian expectations) and by density-normalization checks (Gauss-Legendre
//! panels).

use nalgebra::{DMatrix, SymmetricEigen};

#[derive(Clone, Debug)]
pub struct QuadRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

fn golub_welsch(off_diag: &[f64], moment0: f64) -> QuadRule {
    let n = off_diag.len() + 1;
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for (k, &b) in off_diag.iter().enumerate() {
        jacobi[(k, k + 1)] = b;
        jacobi[(k + 1, k)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let first = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], moment0 * first * first)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    QuadRule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    }
}

/// n-point rule for ∫ f(x) e^{-x²} dx over the real line.
pub fn gauss_hermite(n: usize) -> QuadRule {
    assert!(n >= 1, "quadrature rule needs at least one node");
    let off: Vec<f64> = (1..n).map(|k| (k as f64 / 2.0).sqrt()).collect();
    golub_welsch(&off, std::f64::consts::PI.sqrt())
}

/// n-point rule for ∫_{-1}^{1} f(x) dx.
pub fn gauss_legendre(n: usize) -> QuadRule {
    assert!(n >= 1, "quadrature rule needs at least one node");
    let off: Vec<f64> = (1..n)
        .map(|k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    golub_welsch(&off, 2.0)
}

impl QuadRule {
    /// E[f(mean + sigma Z)] for standard normal Z, using a Hermite rule.
    pub fn normal_expectation(&self, mean: f64, sigma: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let scale = std::f64::consts::SQRT_2 * sigma;
        let mut acc = 0.0;
        for (&t, &w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mean + scale * t);
        }
        acc / std::f64::consts::PI.sqrt()
    }

    /// ∫_a^b f(x) dx with this Legendre rule mapped onto [a, b].
    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut acc = 0.0;
        for (&t, &w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mid + half * t);
        }
        half * acc
    }

    /// Composite integration over `panels` equal subintervals of [a, b].
    pub fn integrate_panels(
        &self,
        a: f64,
        b: f64,
        panels: usize,
        mut f: impl FnMut(f64) -> f64,
    ) -> f64 {
        assert!(panels >= 1);
        let width = (b - a) / panels as f64;
        let mut acc = 0.0;
        for p in 0..panels {
            let lo = a + p as f64 * width;
            acc += self.integrate(lo, lo + width, &mut f);
        }
        acc
    }
}
