use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use super::{spectral_radius, stationary_covariance, BenchmarkModel, GaussianLaw, Nodes, SimRng};
use crate::error::{Error, Result};
use crate::numgrid::GaussHermiteRule;

/// Linear-Gaussian VAR: `X' = mu + A X + sigma e`, `e ~ N(0, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LgModel {
    mu: DVector<f64>,
    a: DMatrix<f64>,
    sigma: DMatrix<f64>,
    shock: Option<GaussianLaw>,
    stat_mean: DVector<f64>,
    stationary: Option<GaussianLaw>,
}

impl LgModel {
    pub fn new(mu: DVector<f64>, a: DMatrix<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        if d == 0 || a.shape() != (d, d) || sigma.nrows() != d {
            return Err(Error::invalid("LG model dimensions are inconsistent"));
        }
        if spectral_radius(&a) >= 1.0 {
            return Err(Error::invalid("autoregression has an eigenvalue outside the unit circle"));
        }
        let cov = &sigma * sigma.transpose();
        let shock = GaussianLaw::new(DVector::zeros(d), cov.clone())
            .map_err(|_| Error::invalid("shock covariance sigma sigma' is not positive definite"))?;
        let stat_mean = stationary_mean(&mu, &a)?;
        let omega = stationary_covariance(&a, &cov)?;
        let stationary = GaussianLaw::new(stat_mean.clone(), omega)?;
        Ok(LgModel {
            mu,
            a,
            sigma,
            shock: Some(shock),
            stat_mean,
            stationary: Some(stationary),
        })
    }

    /// Scalar convenience constructor.
    pub fn scalar(mu: f64, a: f64, sigma: f64) -> Result<Self> {
        LgModel::new(
            DVector::from_element(1, mu),
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, sigma),
        )
    }

    /// Noise-free recursion `X' = mu + A X`; densities are degenerate.
    pub fn noiseless(mu: DVector<f64>, a: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        if a.shape() != (d, d) || spectral_radius(&a) >= 1.0 {
            return Err(Error::invalid("noiseless VAR needs a stable square autoregression"));
        }
        let stat_mean = stationary_mean(&mu, &a)?;
        Ok(LgModel {
            mu,
            sigma: DMatrix::zeros(d, d),
            a,
            shock: None,
            stat_mean,
            stationary: None,
        })
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Shock covariance `sigma sigma'`.
    pub fn shock_cov(&self) -> DMatrix<f64> {
        &self.sigma * self.sigma.transpose()
    }

    pub fn stationary_law(&self) -> Option<&GaussianLaw> {
        self.stationary.as_ref()
    }

    pub fn stationary_mean(&self) -> &DVector<f64> {
        &self.stat_mean
    }

    pub fn mean_next(&self, x: &[f64]) -> Vec<f64> {
        let d = self.mu.len();
        (0..d)
            .map(|r| self.mu[r] + (0..d).map(|c| self.a[(r, c)] * x[c]).sum::<f64>())
            .collect()
    }

    /// Same autoregression and shocks with a different intercept.
    pub fn with_mu(&self, mu: DVector<f64>) -> Result<Self> {
        LgModel::new(mu, self.a.clone(), self.sigma.clone())
    }
}

fn stationary_mean(mu: &DVector<f64>, a: &DMatrix<f64>) -> Result<DVector<f64>> {
    let d = mu.len();
    (DMatrix::<f64>::identity(d, d) - a)
        .lu()
        .solve(mu)
        .ok_or_else(|| Error::invalid("I - A is singular"))
}

impl BenchmarkModel for LgModel {
    fn dim(&self) -> usize {
        self.mu.len()
    }

    fn cond_nodes(&self, x: &[f64], rule: &GaussHermiteRule) -> Result<Nodes> {
        let m = self.mean_next(x);
        Ok(match &self.shock {
            Some(law) => law.nodes_at(&m, rule, 1.0),
            None => {
                let mut n = Nodes::new(m.len());
                n.push(&m, 1.0);
                n
            }
        })
    }

    fn cond_log_density(&self, x_next: &[f64], x: &[f64]) -> f64 {
        let m = self.mean_next(x);
        match &self.shock {
            Some(law) => law.log_pdf_at(&m, x_next),
            None if m.as_slice() == x_next => f64::INFINITY,
            None => f64::NEG_INFINITY,
        }
    }

    fn stationary_density(&self, x: &[f64]) -> Result<f64> {
        self.stationary
            .as_ref()
            .map(|s| s.log_pdf(x).exp())
            .ok_or_else(|| Error::invalid("noiseless VAR has no stationary density"))
    }

    fn stationary_nodes(&self, rule: &GaussHermiteRule) -> Result<Nodes> {
        match &self.stationary {
            Some(s) => Ok(s.nodes(rule)),
            None => {
                let mut n = Nodes::new(self.dim());
                n.push(self.stat_mean.as_slice(), 1.0);
                Ok(n)
            }
        }
    }

    fn stationary_moments(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.dim();
        let sd = match &self.stationary {
            Some(s) => (0..d).map(|i| s.cov()[(i, i)].sqrt()).collect(),
            None => vec![0.0; d],
        };
        Ok((self.stat_mean.iter().copied().collect(), sd))
    }

    fn sample_next(&self, x: &[f64], rng: &mut SimRng) -> Vec<f64> {
        let d = self.dim();
        let mut m = self.mean_next(x);
        if self.shock.is_some() {
            let e: Vec<f64> = (0..self.sigma.ncols()).map(|_| StandardNormal.sample(rng)).collect();
            for r in 0..d {
                m[r] += (0..e.len()).map(|c| self.sigma[(r, c)] * e[c]).sum::<f64>();
            }
        }
        m
    }

    fn sample_stationary(&self, rng: &mut SimRng) -> Result<Vec<f64>> {
        match &self.stationary {
            Some(s) => Ok(s.sample(rng)),
            None => Ok(self.stat_mean.iter().copied().collect()),
        }
    }
}
