use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{spectral_radius, BenchmarkModel, GaussianLaw, Nodes, SimRng};
use crate::error::{Error, Result};
use crate::numgrid::GaussHermiteRule;

/// One expert of a mixture-of-experts VAR.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub a: DMatrix<f64>,
    pub omega: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Expert {
    log_weight: f64,
    intercept: DVector<f64>,
    a: DMatrix<f64>,
    innovation: GaussianLaw,
    marginal: GaussianLaw,
}

/// Gaussian mixture of experts built from a `K`-component mixture for the
/// pair `(X_t, X_{t+1})`: expert `k` forecasts `N((I - A_k) mu_k + A_k x, Sigma_k)`
/// with weight proportional to `w_k phi(x; mu_k, Omega_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel {
    components: Vec<MoeComponent>,
    experts: Vec<Expert>,
    dim: usize,
}

impl MoeModel {
    pub fn new(components: Vec<MoeComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        let dim = components[0].mean.len();
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if components.iter().any(|c| !(0.0..=1.0).contains(&c.weight)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("mixture weights must lie in [0,1] and sum to 1 (sum {total})")));
        }
        let mut components = components;
        for c in components.iter_mut() {
            c.weight /= total;
        }
        let mut experts = Vec::with_capacity(components.len());
        for (k, c) in components.iter().enumerate() {
            if c.mean.len() != dim || c.a.shape() != (dim, dim) || c.omega.shape() != (dim, dim) {
                return Err(Error::invalid(format!("component {k} has inconsistent dimensions")));
            }
            if spectral_radius(&c.a) >= 1.0 {
                return Err(Error::invalid(format!("component {k} autoregression is not stable")));
            }
            let marginal = GaussianLaw::new(c.mean.clone(), c.omega.clone())
                .map_err(|_| Error::invalid(format!("component {k} Omega is not positive definite")))?;
            let omega = marginal.cov().clone();
            let sigma = &omega - &c.a * &omega * c.a.transpose();
            let innovation = GaussianLaw::new(DVector::zeros(dim), sigma)
                .map_err(|_| Error::invalid(format!("component {k} innovation covariance is not positive definite")))?;
            let intercept = (DMatrix::<f64>::identity(dim, dim) - &c.a) * &c.mean;
            experts.push(Expert {
                log_weight: c.weight.ln(),
                intercept,
                a: c.a.clone(),
                innovation,
                marginal,
            });
        }
        Ok(MoeModel {
            components,
            experts,
            dim,
        })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[MoeComponent] {
        &self.components
    }

    /// Innovation covariance `Omega_k - A_k Omega_k A_k'`.
    pub fn innovation_cov(&self, k: usize) -> &DMatrix<f64> {
        self.experts[k].innovation.cov()
    }

    fn expert_mean(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let e = &self.experts[k];
        (0..self.dim)
            .map(|r| e.intercept[r] + (0..self.dim).map(|c| e.a[(r, c)] * x[c]).sum::<f64>())
            .collect()
    }

    /// Expert weights `w_k(x)` computed in log space.
    pub fn weights_at(&self, x: &[f64]) -> Vec<f64> {
        let logs: Vec<f64> = self
            .experts
            .iter()
            .map(|e| e.log_weight + e.marginal.log_pdf(x))
            .collect();
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = w.iter().sum();
        for v in w.iter_mut() {
            *v /= s;
        }
        w
    }

    /// Log stationary density, stable far in the tails.
    pub fn stationary_log_density(&self, x: &[f64]) -> f64 {
        let logs: Vec<f64> = self
            .experts
            .iter()
            .map(|e| e.log_weight + e.marginal.log_pdf(x))
            .collect();
        crate::numgrid::log_sum_exp_weighted(&vec![1.0; logs.len()], &logs)
    }

    pub fn params(&self) -> MoeParams {
        let mat = |m: &DMatrix<f64>| (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect();
        MoeParams {
            k: self.k(),
            weights: self.components.iter().map(|c| c.weight).collect(),
            means: self.components.iter().map(|c| c.mean.iter().copied().collect()).collect(),
            a: self.components.iter().map(|c| mat(&c.a)).collect(),
            omega: self.components.iter().map(|c| mat(&c.omega)).collect(),
        }
    }

    pub fn from_params(p: &MoeParams) -> Result<Self> {
        if p.weights.len() != p.k || p.means.len() != p.k || p.a.len() != p.k || p.omega.len() != p.k {
            return Err(Error::invalid("K does not match the number of component entries"));
        }
        let comps = (0..p.k)
            .map(|k| {
                Ok(MoeComponent {
                    weight: p.weights[k],
                    mean: DVector::from_vec(p.means[k].clone()),
                    a: matrix_from_rows(&p.a[k])?,
                    omega: matrix_from_rows(&p.omega[k])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MoeModel::new(comps)
    }
}

/// Row-major nested vectors to a matrix.
pub(crate) fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::invalid("matrix rows must be non-empty and of equal length"));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// JSON layout of mixture parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeParams {
    #[serde(rename = "K")]
    pub k: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "Omega")]
    pub omega: Vec<Vec<Vec<f64>>>,
}

impl BenchmarkModel for MoeModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn cond_nodes(&self, x: &[f64], rule: &GaussHermiteRule) -> Result<Nodes> {
        let w = self.weights_at(x);
        let per = rule.order().pow(self.dim as u32);
        let mut out = Nodes::with_capacity(self.dim, per * self.k());
        for (k, wk) in w.iter().enumerate() {
            if *wk == 0.0 {
                continue;
            }
            let m = self.expert_mean(k, x);
            let nodes = self.experts[k].innovation.nodes_at(&m, rule, *wk);
            for (p, wp) in nodes.iter() {
                out.push(p, wp);
            }
        }
        Ok(out)
    }

    fn cond_log_density(&self, x_next: &[f64], x: &[f64]) -> f64 {
        let w = self.weights_at(x);
        let terms: Vec<f64> = (0..self.k())
            .map(|k| {
                let m = self.expert_mean(k, x);
                self.experts[k].innovation.log_pdf_at(&m, x_next)
            })
            .collect();
        crate::numgrid::log_sum_exp_weighted(&w, &terms)
    }

    fn stationary_density(&self, x: &[f64]) -> Result<f64> {
        Ok(self
            .experts
            .iter()
            .map(|e| (e.log_weight + e.marginal.log_pdf(x)).exp())
            .sum())
    }

    fn stationary_nodes(&self, rule: &GaussHermiteRule) -> Result<Nodes> {
        let mut out = Nodes::new(self.dim);
        for (c, e) in self.components.iter().zip(&self.experts) {
            for (p, w) in e.marginal.nodes_at(c.mean.as_slice(), rule, c.weight).iter() {
                out.push(p, w);
            }
        }
        Ok(out)
    }

    fn stationary_moments(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.dim;
        let mean: Vec<f64> = (0..d)
            .map(|i| self.components.iter().map(|c| c.weight * c.mean[i]).sum())
            .collect();
        let sd = (0..d)
            .map(|i| {
                let second: f64 = self
                    .components
                    .iter()
                    .map(|c| c.weight * (c.omega[(i, i)] + c.mean[i] * c.mean[i]))
                    .sum();
                (second - mean[i] * mean[i]).max(0.0).sqrt()
            })
            .collect();
        Ok((mean, sd))
    }

    fn sample_next(&self, x: &[f64], rng: &mut SimRng) -> Vec<f64> {
        let k = draw_index(&self.weights_at(x), rng);
        let m = self.expert_mean(k, x);
        self.experts[k].innovation.sample_at(&m, rng)
    }

    fn sample_stationary(&self, rng: &mut SimRng) -> Result<Vec<f64>> {
        let w: Vec<f64> = self.components.iter().map(|c| c.weight).collect();
        let k = draw_index(&w, rng);
        Ok(self.experts[k].marginal.sample(rng))
    }

    fn mixture_weights(&self, x: &[f64]) -> Vec<f64> {
        self.weights_at(x)
    }
}

pub(crate) fn draw_index(weights: &[f64], rng: &mut SimRng) -> usize {
    let u: f64 = rng.gen::<f64>();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}
