use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rand_distr::{Distribution, Gamma, Poisson};
use statrs::function::gamma::ln_gamma;

use super::{BenchmarkModel, Nodes, SimRng};
use crate::error::{Error, Result};
use crate::numgrid::{gauss_from_recurrence, GaussHermiteRule};

type Rule = Arc<(Vec<f64>, Vec<f64>)>;

/// Autoregressive gamma process: given `x`, draw `N ~ Poisson(c2 x)` and then
/// `X' ~ Gamma(shape c3 + N, scale c1)`.
#[derive(Debug)]
pub struct ArgModel {
    c1: f64,
    c2: f64,
    c3: f64,
    rules: RwLock<HashMap<(usize, usize), Rule>>,
}

impl Clone for ArgModel {
    fn clone(&self) -> Self {
        ArgModel::new(self.c1, self.c2, self.c3).expect("validated parameters")
    }
}

impl ArgModel {
    pub fn new(c1: f64, c2: f64, c3: f64) -> Result<Self> {
        if !(c1 > 0.0 && c2 > 0.0 && c3 > 0.0) || !(c1 * c2 < 1.0) {
            return Err(Error::invalid("ARG needs c1, c2, c3 > 0 and c1 c2 < 1"));
        }
        Ok(ArgModel {
            c1,
            c2,
            c3,
            rules: RwLock::new(HashMap::new()),
        })
    }

    pub fn params(&self) -> (f64, f64, f64) {
        (self.c1, self.c2, self.c3)
    }

    /// `log E[exp(s X') | x] = c1 c2 s x / (1 - s c1) - c3 log(1 - s c1)`.
    pub fn log_mgf(&self, s: f64, x: f64) -> Result<f64> {
        let limit = 1.0 / self.c1;
        if !(s < limit) {
            return Err(Error::MgfDomain { s, limit });
        }
        let d = 1.0 - s * self.c1;
        Ok(self.c1 * self.c2 * s * x / d - self.c3 * d.ln())
    }

    /// `E[exp(s X') | x]` for the exponential-affine integrand.
    pub fn mgf(&self, s: f64, x: f64) -> Result<f64> {
        self.log_mgf(s, x).map(f64::exp)
    }

    pub fn stationary_scale(&self) -> f64 {
        self.c1 / (1.0 - self.c1 * self.c2)
    }

    /// Probability-normalized generalized Gauss–Laguerre rule for
    /// `Gamma(shape, 1)` with `shape = c3 + n`.
    fn laguerre(&self, n: usize, order: usize) -> Rule {
        if let Some(r) = self.rules.read().expect("rule cache").get(&(n, order)) {
            return r.clone();
        }
        let alpha = self.c3 + n as f64 - 1.0;
        let rule = Arc::new(gamma_rule(alpha, order));
        self.rules
            .write()
            .expect("rule cache")
            .insert((n, order), rule.clone());
        rule
    }

    fn poisson_terms(&self, x: f64) -> Vec<(usize, f64)> {
        let lam = self.c2 * x.max(0.0);
        if lam == 0.0 {
            return vec![(0, 1.0)];
        }
        let sd = lam.sqrt();
        let lo = (lam - 12.0 * sd - 10.0).max(0.0).floor() as usize;
        let hi = (lam + 12.0 * sd + 30.0).ceil() as usize;
        let mut terms: Vec<(usize, f64)> = (lo..=hi)
            .map(|n| (n, (-lam + n as f64 * lam.ln() - ln_gamma(n as f64 + 1.0)).exp()))
            .filter(|(_, p)| *p > 1e-18)
            .collect();
        let total: f64 = terms.iter().map(|t| t.1).sum();
        for t in terms.iter_mut() {
            t.1 /= total;
        }
        terms
    }

    fn gamma_log_pdf(y: f64, shape: f64, scale: f64) -> f64 {
        (shape - 1.0) * y.ln() - y / scale - ln_gamma(shape) - shape * scale.ln()
    }
}

pub(crate) fn gamma_rule(alpha: f64, order: usize) -> (Vec<f64>, Vec<f64>) {
    let a: Vec<f64> = (0..order).map(|k| 2.0 * k as f64 + alpha + 1.0).collect();
    let b: Vec<f64> = (1..order).map(|k| k as f64 * (k as f64 + alpha)).collect();
    gauss_from_recurrence(&a, &b)
}

impl BenchmarkModel for ArgModel {
    fn dim(&self) -> usize {
        1
    }

    fn cond_nodes(&self, x: &[f64], rule: &GaussHermiteRule) -> Result<Nodes> {
        let order = rule.order();
        let terms = self.poisson_terms(x[0]);
        let mut out = Nodes::with_capacity(1, terms.len() * order);
        for (n, p) in terms {
            let r = self.laguerre(n, order);
            for (y, w) in r.0.iter().zip(&r.1) {
                out.push(&[self.c1 * y], p * w);
            }
        }
        Ok(out)
    }

    fn cond_log_density(&self, x_next: &[f64], x: &[f64]) -> f64 {
        let y = x_next[0];
        if !(y > 0.0) {
            return f64::NEG_INFINITY;
        }
        let terms = self.poisson_terms(x[0]);
        let w: Vec<f64> = terms.iter().map(|t| t.1).collect();
        let e: Vec<f64> = terms
            .iter()
            .map(|(n, _)| Self::gamma_log_pdf(y, self.c3 + *n as f64, self.c1))
            .collect();
        crate::numgrid::log_sum_exp_weighted(&w, &e)
    }

    fn stationary_density(&self, x: &[f64]) -> Result<f64> {
        if !(x[0] > 0.0) {
            return Ok(0.0);
        }
        Ok(Self::gamma_log_pdf(x[0], self.c3, self.stationary_scale()).exp())
    }

    fn stationary_nodes(&self, rule: &GaussHermiteRule) -> Result<Nodes> {
        let (y, w) = gamma_rule(self.c3 - 1.0, rule.order());
        let s = self.stationary_scale();
        let mut out = Nodes::with_capacity(1, y.len());
        for (yi, wi) in y.iter().zip(&w) {
            out.push(&[s * yi], *wi);
        }
        Ok(out)
    }

    fn stationary_moments(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let s = self.stationary_scale();
        Ok((vec![self.c3 * s], vec![self.c3.sqrt() * s]))
    }

    fn sample_next(&self, x: &[f64], rng: &mut SimRng) -> Vec<f64> {
        let lam = self.c2 * x[0].max(0.0);
        let n = if lam > 0.0 {
            Poisson::new(lam).expect("positive intensity").sample(rng)
        } else {
            0.0
        };
        let g = Gamma::new(self.c3 + n, self.c1).expect("positive shape");
        vec![g.sample(rng)]
    }

    fn sample_stationary(&self, rng: &mut SimRng) -> Result<Vec<f64>> {
        let g = Gamma::new(self.c3, self.stationary_scale()).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(vec![g.sample(rng)])
    }

    fn support_lower(&self) -> Vec<f64> {
        vec![0.0]
    }
}
