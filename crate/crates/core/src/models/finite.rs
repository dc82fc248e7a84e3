use nalgebra::DMatrix;

use super::moe::draw_index;
use super::{BenchmarkModel, Nodes, SimRng};
use crate::error::{Error, Result};
use crate::numgrid::GaussHermiteRule;

/// Markov chain on a finite set of points in `R^d` with row-stochastic
/// transition matrix. Conditional laws are exact, so grids placed on the
/// states give a dense oracle for the grid solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteChain {
    states: Vec<Vec<f64>>,
    p: DMatrix<f64>,
    stationary: Vec<f64>,
}

impl FiniteChain {
    pub fn new(states: Vec<Vec<f64>>, p: DMatrix<f64>) -> Result<Self> {
        let n = states.len();
        if n == 0 || p.shape() != (n, n) {
            return Err(Error::invalid("transition matrix must be square with one row per state"));
        }
        let d = states[0].len();
        if states.iter().any(|s| s.len() != d) {
            return Err(Error::invalid("states have different dimensions"));
        }
        for i in 0..n {
            let row = p.row(i);
            if row.iter().any(|v| *v < 0.0) || (row.sum() - 1.0).abs() > 1e-12 {
                return Err(Error::invalid(format!("row {i} is not a probability vector")));
            }
        }
        let stationary = stationary_distribution(&p)?;
        Ok(FiniteChain { states, p, stationary })
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    fn locate(&self, x: &[f64]) -> Option<usize> {
        self.states.iter().position(|s| {
            s.iter()
                .zip(x)
                .all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + a.abs()))
        })
    }
}

fn stationary_distribution(p: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = p.nrows();
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..100_000 {
        let mut next = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                next[j] += pi[i] * p[(i, j)];
            }
        }
        // lazy step keeps periodic chains convergent
        for j in 0..n {
            next[j] = 0.5 * (next[j] + pi[j]);
        }
        let diff = crate::numgrid::sup_diff(&next, &pi);
        pi = next;
        if diff < 1e-15 {
            break;
        }
    }
    let s: f64 = pi.iter().sum();
    Ok(pi.iter().map(|v| v / s).collect())
}

impl BenchmarkModel for FiniteChain {
    fn dim(&self) -> usize {
        self.states[0].len()
    }

    fn cond_nodes(&self, x: &[f64], _rule: &GaussHermiteRule) -> Result<Nodes> {
        let i = self
            .locate(x)
            .ok_or_else(|| Error::domain(format!("{x:?} is not a state of the chain")))?;
        let mut out = Nodes::with_capacity(self.dim(), self.states.len());
        for (j, s) in self.states.iter().enumerate() {
            if self.p[(i, j)] > 0.0 {
                out.push(s, self.p[(i, j)]);
            }
        }
        Ok(out)
    }

    fn cond_log_density(&self, x_next: &[f64], x: &[f64]) -> f64 {
        match (self.locate(x), self.locate(x_next)) {
            (Some(i), Some(j)) => self.p[(i, j)].ln(),
            _ => f64::NEG_INFINITY,
        }
    }

    fn stationary_density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.locate(x).map_or(0.0, |i| self.stationary[i]))
    }

    fn stationary_nodes(&self, _rule: &GaussHermiteRule) -> Result<Nodes> {
        let mut out = Nodes::new(self.dim());
        for (s, w) in self.states.iter().zip(&self.stationary) {
            out.push(s, *w);
        }
        Ok(out)
    }

    fn stationary_moments(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.dim();
        let mean: Vec<f64> = (0..d)
            .map(|k| self.states.iter().zip(&self.stationary).map(|(s, w)| w * s[k]).sum())
            .collect();
        let sd = (0..d)
            .map(|k| {
                self.states
                    .iter()
                    .zip(&self.stationary)
                    .map(|(s, w)| w * (s[k] - mean[k]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        Ok((mean, sd))
    }

    fn sample_next(&self, x: &[f64], rng: &mut SimRng) -> Vec<f64> {
        let i = self.locate(x).expect("chain state");
        let row: Vec<f64> = self.p.row(i).iter().copied().collect();
        self.states[draw_index(&row, rng)].clone()
    }

    fn sample_stationary(&self, rng: &mut SimRng) -> Result<Vec<f64>> {
        Ok(self.states[draw_index(&self.stationary, rng)].clone())
    }
}
