//! Benchmark Markov transition laws.
//!
//! Every model exposes its conditional law at a point as a finite set of
//! weighted nodes, which is what the grid solvers consume. Gaussian pieces use
//! Gauss–Hermite nodes; the autoregressive gamma model uses a Poisson mixture
//! of generalized Gauss–Laguerre rules.

mod arg;
mod em;
mod finite;
mod gaussian;
mod lg;
mod moe;
mod regime;
mod series;
mod tails;
mod tilted;
mod utility;

use std::fmt::Debug;

use rand::SeedableRng;

pub use arg::ArgModel;
pub use em::{fit_moe_em, EmOptions, EmReport};
pub use finite::FiniteChain;
pub use gaussian::{spectral_radius, stationary_covariance, GaussianLaw};
pub use lg::LgModel;
pub use moe::{MoeComponent, MoeModel, MoeParams};
pub use regime::{RegimeModel, StateSpaceModel};
pub use series::TimeSeries;
pub use tails::{tail_regularity_check, TailReport};
pub use tilted::TiltedModel;
pub use utility::UtilityGrowth;

use crate::error::Result;
use crate::numgrid::GaussHermiteRule;

/// Random number generator used by every sampler.
pub type SimRng = rand_chacha::ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// Finite weighted point set approximating a probability law on `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Nodes {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl Nodes {
    pub fn new(dim: usize) -> Self {
        Nodes {
            dim,
            points: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn with_capacity(dim: usize, n: usize) -> Self {
        Nodes {
            dim,
            points: Vec::with_capacity(n * dim),
            weights: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, point: &[f64], weight: f64) {
        debug_assert_eq!(point.len(), self.dim);
        self.points.extend_from_slice(point);
        self.weights.push(weight);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, j: usize) -> &[f64] {
        &self.points[j * self.dim..(j + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.points.chunks(self.dim.max(1)).zip(self.weights.iter().copied())
    }

    /// Rescales weights to sum to one.
    pub fn normalize(&mut self) {
        let s: f64 = self.weights.iter().sum();
        if s > 0.0 {
            for w in self.weights.iter_mut() {
                *w /= s;
            }
        }
    }

    /// Weighted sum of `f` over the nodes.
    pub fn expect(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.iter().map(|(p, w)| w * f(p)).sum()
    }

    /// Drops nodes whose weight is below `rel` times the largest weight.
    pub fn prune(&mut self, rel: f64) {
        let max = self.weights.iter().fold(0.0f64, |m, &w| m.max(w));
        let cut = rel * max;
        let mut points = Vec::with_capacity(self.points.len());
        let mut weights = Vec::with_capacity(self.weights.len());
        for (p, w) in self.iter() {
            if w > cut {
                points.extend_from_slice(p);
                weights.push(w);
            }
        }
        self.points = points;
        self.weights = weights;
    }
}

/// A Markov transition law on `R^d`.
pub trait BenchmarkModel: Send + Sync + Debug {
    fn dim(&self) -> usize;

    /// Weighted nodes approximating the law of `X'` given `X = x`.
    fn cond_nodes(&self, x: &[f64], rule: &GaussHermiteRule) -> Result<Nodes>;

    /// Log conditional density of `x_next` given `x`.
    fn cond_log_density(&self, x_next: &[f64], x: &[f64]) -> f64;

    fn cond_density(&self, x_next: &[f64], x: &[f64]) -> f64 {
        self.cond_log_density(x_next, x).exp()
    }

    fn stationary_density(&self, x: &[f64]) -> Result<f64>;

    /// Weighted nodes approximating the stationary law.
    fn stationary_nodes(&self, rule: &GaussHermiteRule) -> Result<Nodes>;

    /// Per-dimension stationary mean and standard deviation.
    fn stationary_moments(&self) -> Result<(Vec<f64>, Vec<f64>)>;

    fn sample_next(&self, x: &[f64], rng: &mut SimRng) -> Vec<f64>;

    fn sample_stationary(&self, rng: &mut SimRng) -> Result<Vec<f64>>;

    /// State-dependent expert weights; a single weight for non-mixture models.
    fn mixture_weights(&self, _x: &[f64]) -> Vec<f64> {
        vec![1.0]
    }

    /// Lower bound of the support along each dimension.
    fn support_lower(&self) -> Vec<f64> {
        vec![f64::NEG_INFINITY; self.dim()]
    }

    /// Grid bounds spanning `span` stationary standard deviations.
    fn default_bounds(&self, span: f64) -> Result<Vec<(f64, f64)>> {
        let (m, s) = self.stationary_moments()?;
        let lower = self.support_lower();
        Ok(m.iter()
            .zip(&s)
            .zip(&lower)
            .map(|((m, s), lo)| ((m - span * s).max(*lo), m + span * s))
            .collect())
    }
}

/// `E[g(X') | X = x]` by the model's quadrature.
pub fn cond_expectation(
    model: &dyn BenchmarkModel,
    x: &[f64],
    g: impl Fn(&[f64]) -> f64,
    rule: &GaussHermiteRule,
) -> Result<f64> {
    let nodes = model.cond_nodes(x, rule)?;
    let mut acc = 0.0;
    for (p, w) in nodes.iter() {
        let v = g(p);
        if !v.is_finite() {
            return Err(crate::Error::domain(format!("integrand non-finite at {p:?}")));
        }
        acc += w * v;
    }
    Ok(acc)
}

/// Path of length `t` starting at `x0`, deterministic given `seed`.
pub fn simulate(model: &dyn BenchmarkModel, x0: &[f64], t: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if t == 0 {
        return Err(crate::Error::invalid("path length must be at least 1"));
    }
    let mut rng = rng_from_seed(seed);
    let mut path = Vec::with_capacity(t);
    path.push(x0.to_vec());
    for i in 1..t {
        let next = model.sample_next(&path[i - 1], &mut rng);
        path.push(next);
    }
    Ok(path)
}
