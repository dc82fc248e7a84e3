use std::fmt;
use std::sync::Arc;

use super::{BenchmarkModel, Nodes, SimRng};
use crate::error::{Error, Result};
use crate::numgrid::GaussHermiteRule;

use rand::Rng;

pub type LogTilt = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Base law reweighted by `exp(log_tilt(x, x'))`, renormalized at each `x`.
///
/// Conditional laws reuse the base model's nodes, so the tilted kernel is
/// exact whenever the base quadrature is. Sampling draws from the tilted
/// node distribution.
#[derive(Clone)]
pub struct TiltedModel {
    base: Arc<dyn BenchmarkModel>,
    log_tilt: LogTilt,
    rule: GaussHermiteRule,
}

impl fmt::Debug for TiltedModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TiltedModel").field("base", &self.base).finish_non_exhaustive()
    }
}

impl TiltedModel {
    pub fn new(base: Arc<dyn BenchmarkModel>, log_tilt: LogTilt, rule: GaussHermiteRule) -> Self {
        TiltedModel { base, log_tilt, rule }
    }

    pub fn base(&self) -> &Arc<dyn BenchmarkModel> {
        &self.base
    }

    /// Log normalizer `log E^base[exp(log_tilt) | x]`.
    pub fn log_normalizer(&self, x: &[f64], rule: &GaussHermiteRule) -> Result<f64> {
        let nodes = self.base.cond_nodes(x, rule)?;
        let e: Vec<f64> = nodes.iter().map(|(p, _)| (self.log_tilt)(x, p)).collect();
        let z = crate::numgrid::log_sum_exp_weighted(nodes.weights(), &e);
        if !z.is_finite() {
            return Err(Error::domain(format!("tilt normalizer non-finite at {x:?}")));
        }
        Ok(z)
    }
}

impl BenchmarkModel for TiltedModel {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn cond_nodes(&self, x: &[f64], rule: &GaussHermiteRule) -> Result<Nodes> {
        let mut nodes = self.base.cond_nodes(x, rule)?;
        let e: Vec<f64> = nodes.iter().map(|(p, _)| (self.log_tilt)(x, p)).collect();
        let m = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(Error::domain(format!("tilt non-finite at {x:?}")));
        }
        for (w, ej) in nodes.weights_mut().iter_mut().zip(&e) {
            *w *= (ej - m).exp();
        }
        nodes.normalize();
        Ok(nodes)
    }

    fn cond_log_density(&self, x_next: &[f64], x: &[f64]) -> f64 {
        match self.log_normalizer(x, &self.rule) {
            Ok(z) => self.base.cond_log_density(x_next, x) + (self.log_tilt)(x, x_next) - z,
            Err(_) => f64::NAN,
        }
    }

    fn stationary_density(&self, _x: &[f64]) -> Result<f64> {
        Err(Error::invalid("tilted model has no closed-form stationary density"))
    }

    fn stationary_nodes(&self, _rule: &GaussHermiteRule) -> Result<Nodes> {
        Err(Error::invalid("tilted model has no closed-form stationary law"))
    }

    fn stationary_moments(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        self.base.stationary_moments()
    }

    fn sample_next(&self, x: &[f64], rng: &mut SimRng) -> Vec<f64> {
        let nodes = self.cond_nodes(x, &self.rule).expect("tilted nodes");
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (p, w) in nodes.iter() {
            acc += w;
            if u < acc {
                return p.to_vec();
            }
        }
        nodes.point(nodes.len() - 1).to_vec()
    }

    fn sample_stationary(&self, _rng: &mut SimRng) -> Result<Vec<f64>> {
        Err(Error::invalid("tilted model has no stationary sampler"))
    }

    fn support_lower(&self) -> Vec<f64> {
        self.base.support_lower()
    }
}
