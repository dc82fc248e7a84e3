use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use super::{Nodes, SimRng};
use crate::error::{Error, Result};
use crate::numgrid::GaussHermiteRule;

/// Multivariate normal law with a cached Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLaw {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianLaw {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::invalid("covariance does not match mean dimension"));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite Gaussian parameters"));
        }
        let sym = (&cov + cov.transpose()) * 0.5;
        let chol = sym
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("covariance is not positive definite"))?
            .l();
        let log_det: f64 = 2.0 * (0..d).map(|i| chol[(i, i)].ln()).sum::<f64>();
        let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(GaussianLaw {
            mean,
            cov: sym,
            chol,
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        self.log_pdf_at(self.mean.as_slice(), x)
    }

    /// Log density of `N(mean, cov)` at `x` with this law's covariance.
    pub fn log_pdf_at(&self, mean: &[f64], x: &[f64]) -> f64 {
        let d = self.dim();
        let mut z = vec![0.0; d];
        for r in 0..d {
            let mut s = x[r] - mean[r];
            for c in 0..r {
                s -= self.chol[(r, c)] * z[c];
            }
            z[r] = s / self.chol[(r, r)];
        }
        self.log_norm - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
    }

    pub fn nodes(&self, rule: &GaussHermiteRule) -> Nodes {
        self.nodes_at(self.mean.as_slice(), rule, 1.0)
    }

    /// Gauss–Hermite nodes of `N(mean, cov)` with weights scaled by `scale`.
    pub fn nodes_at(&self, mean: &[f64], rule: &GaussHermiteRule, scale: f64) -> Nodes {
        let d = self.dim();
        let (z, w) = rule.standard_normal(d);
        let mut out = Nodes::with_capacity(d, w.len());
        let mut p = vec![0.0; d];
        for (zj, wj) in z.iter().zip(&w) {
            for r in 0..d {
                p[r] = mean[r] + (0..=r).map(|c| self.chol[(r, c)] * zj[c]).sum::<f64>();
            }
            out.push(&p, scale * wj);
        }
        out
    }

    pub fn sample(&self, rng: &mut SimRng) -> Vec<f64> {
        self.sample_at(self.mean.as_slice(), rng)
    }

    pub fn sample_at(&self, mean: &[f64], rng: &mut SimRng) -> Vec<f64> {
        let d = self.dim();
        let e: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        (0..d)
            .map(|r| mean[r] + (0..=r).map(|c| self.chol[(r, c)] * e[c]).sum::<f64>())
            .collect()
    }
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|c| (c.re * c.re + c.im * c.im).sqrt())
        .fold(0.0, f64::max)
}

/// Solves `Omega = A Omega A' + S` through the vectorized linear system.
pub fn stationary_covariance(a: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    let kron = a.kronecker(a);
    let lhs = DMatrix::<f64>::identity(d * d, d * d) - kron;
    let rhs = DVector::from_column_slice(s.as_slice());
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::invalid("stationary covariance equation is singular"))?;
    let omega = DMatrix::from_column_slice(d, d, sol.as_slice());
    Ok((&omega + omega.transpose()) * 0.5)
}
