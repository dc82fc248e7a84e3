//! Transition kernels discretized on a grid.
//!
//! For every grid node the conditional law of the next state is stored as a
//! list of weighted quadrature points together with their interpolation
//! stencils, so conditional expectations of grid functions reduce to sparse
//! weighted sums.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::BenchmarkModel;
use crate::numgrid::{log_sum_exp_weighted, Extrap, GaussHermiteRule, Grid, GridFn, Interp, MAX_DENSE_POINTS};

/// Conditional quadrature of a benchmark model at every grid node.
#[derive(Debug, Clone)]
pub struct GridKernel {
    grid: Arc<Grid>,
    interp: Interp,
    extrap: Extrap,
    dim: usize,
    offsets: Vec<usize>,
    weights: Vec<f64>,
    points: Vec<f64>,
    st_off: Vec<usize>,
    st_idx: Vec<u32>,
    st_w: Vec<f64>,
}

/// Quadrature points lighter than this fraction of the heaviest are dropped.
const PRUNE_REL: f64 = 1e-20;

impl GridKernel {
    pub fn build(
        model: &dyn BenchmarkModel,
        grid: Arc<Grid>,
        rule: &GaussHermiteRule,
        interp: Interp,
        extrap: Extrap,
    ) -> Result<Self> {
        if model.dim() != grid.dims() {
            return Err(Error::invalid(format!(
                "model dimension {} differs from grid dimension {}",
                model.dim(),
                grid.dims()
            )));
        }
        let per_node: Vec<_> = (0..grid.len())
            .into_par_iter()
            .map(|i| -> Result<_> {
                let x = grid.point(i);
                let mut nodes = model.cond_nodes(&x, rule)?;
                nodes.prune(PRUNE_REL);
                let mut pts = Vec::with_capacity(nodes.len() * nodes.dim());
                let mut ws = Vec::with_capacity(nodes.len());
                let mut sts = Vec::with_capacity(nodes.len());
                for (p, w) in nodes.iter() {
                    if w <= 0.0 {
                        continue;
                    }
                    sts.push(grid.stencil(p, interp, extrap)?);
                    pts.extend_from_slice(p);
                    ws.push(w);
                }
                if ws.is_empty() {
                    return Err(Error::Numerical(format!("empty conditional law at node {x:?}")));
                }
                Ok((pts, ws, sts))
            })
            .collect::<Result<_>>()?;

        let total: usize = per_node.iter().map(|n| n.1.len()).sum();
        let mut k = GridKernel {
            dim: grid.dims(),
            grid,
            interp,
            extrap,
            offsets: Vec::with_capacity(per_node.len() + 1),
            weights: Vec::with_capacity(total),
            points: Vec::with_capacity(total * per_node.first().map_or(1, |n| n.0.len() / n.1.len().max(1))),
            st_off: Vec::with_capacity(total + 1),
            st_idx: Vec::new(),
            st_w: Vec::new(),
        };
        k.offsets.push(0);
        k.st_off.push(0);
        for (pts, ws, sts) in per_node {
            k.points.extend(pts);
            k.weights.extend(ws);
            for s in sts {
                k.st_idx.extend(s.idx.iter().map(|&j| j as u32));
                k.st_w.extend(s.w);
                k.st_off.push(k.st_idx.len());
            }
            k.offsets.push(k.weights.len());
        }
        Ok(k)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn interp(&self) -> Interp {
        self.interp
    }

    pub fn extrap(&self) -> Extrap {
        self.extrap
    }

    /// Number of grid nodes.
    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total number of stored quadrature points.
    pub fn n_pairs(&self) -> usize {
        self.weights.len()
    }

    /// Range of quadrature points belonging to node `i`.
    #[inline]
    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    #[inline]
    pub fn weight(&self, q: usize) -> f64 {
        self.weights[q]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn point(&self, q: usize) -> &[f64] {
        &self.points[q * self.dim..(q + 1) * self.dim]
    }

    /// Interpolated value of grid values at quadrature point `q`.
    #[inline]
    pub fn interp_at(&self, q: usize, values: &[f64]) -> f64 {
        let r = self.st_off[q]..self.st_off[q + 1];
        self.st_idx[r.clone()]
            .iter()
            .zip(&self.st_w[r])
            .map(|(&j, &w)| w * values[j as usize])
            .sum()
    }

    /// Grid values interpolated at every quadrature point.
    pub fn interp_all(&self, values: &[f64]) -> Vec<f64> {
        (0..self.n_pairs()).into_par_iter().map(|q| self.interp_at(q, values)).collect()
    }

    /// Evaluates `f(x_i, x'_q)` at every stored pair.
    pub fn pair_values(&self, f: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync) -> Vec<f64> {
        self.pair_values_vec(f)
    }

    /// As [`GridKernel::pair_values`] for any output type.
    pub fn pair_values_vec<T: Send>(&self, f: impl Fn(&[f64], &[f64]) -> T + Send + Sync) -> Vec<T> {
        let f = &f;
        (0..self.len())
            .into_par_iter()
            .flat_map_iter(|i| {
                let x = self.grid.point(i);
                self.range(i).map(move |q| f(&x, self.point(q))).collect::<Vec<_>>()
            })
            .collect()
    }

    /// `E[f(X') | x_i]` for grid values `f`.
    pub fn expect(&self, values: &[f64]) -> Vec<f64> {
        (0..self.len())
            .into_par_iter()
            .map(|i| self.range(i).map(|q| self.weights[q] * self.interp_at(q, values)).sum())
            .collect()
    }

    /// `E[g(x_i, X') | x_i]` for pair values `g` aligned with the stored points.
    pub fn expect_pairs(&self, pairs: &[f64]) -> Vec<f64> {
        (0..self.len())
            .into_par_iter()
            .map(|i| self.range(i).map(|q| self.weights[q] * pairs[q]).sum())
            .collect()
    }

    /// `E[mult(x_i, X') f(X') | x_i]` with a per-pair multiplier.
    pub fn expect_weighted(&self, mult: &[f64], values: &[f64]) -> Vec<f64> {
        (0..self.len())
            .into_par_iter()
            .map(|i| {
                self.range(i)
                    .map(|q| self.weights[q] * mult[q] * self.interp_at(q, values))
                    .sum()
            })
            .collect()
    }

    /// `log E[exp(f(X') + add(x_i, X')) | x_i]` in log space.
    pub fn log_expect_exp(&self, values: &[f64], add: Option<&[f64]>) -> Result<Vec<f64>> {
        (0..self.len())
            .into_par_iter()
            .map(|i| {
                let r = self.range(i);
                let e: Vec<f64> = r
                    .clone()
                    .map(|q| self.interp_at(q, values) + add.map_or(0.0, |a| a[q]))
                    .collect();
                let out = log_sum_exp_weighted(&self.weights[r], &e);
                if out.is_finite() {
                    Ok(out)
                } else {
                    Err(Error::domain(format!(
                        "conditional exponential moment is not finite at node {:?}",
                        self.grid.point(i)
                    )))
                }
            })
            .collect()
    }

    /// Dense matrix of `f -> E[mult f(X') | x_i]`, row `i` per grid node.
    pub fn dense_matrix(&self, mult: Option<&[f64]>) -> Result<DMatrix<f64>> {
        let n = self.len();
        if n > MAX_DENSE_POINTS {
            return Err(Error::invalid(format!(
                "dense operator of size {n} exceeds the limit of {MAX_DENSE_POINTS}"
            )));
        }
        let mut k = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for q in self.range(i) {
                let c = self.weights[q] * mult.map_or(1.0, |m| m[q]);
                for s in self.st_off[q]..self.st_off[q + 1] {
                    k[(i, self.st_idx[s] as usize)] += c * self.st_w[s];
                }
            }
        }
        Ok(k)
    }

    /// Indices of nodes that are not on the grid boundary.
    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| {
                self.grid
                    .multi_index(i)
                    .iter()
                    .enumerate()
                    .all(|(k, &j)| j > 0 && j + 1 < self.grid.axis(k).len())
            })
            .collect()
    }

    /// Wraps node values in a grid function with this kernel's rules.
    pub fn grid_fn(&self, values: Vec<f64>) -> Result<GridFn> {
        GridFn::new(self.grid.clone(), values, self.interp, self.extrap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{cond_expectation, LgModel};

    #[test]
    fn kernel_expectation_matches_direct_quadrature() {
        let m = LgModel::scalar(0.1, 0.5, 0.8).unwrap();
        let grid = Arc::new(Grid::uniform(&[(-4.0, 4.0)], &[41]).unwrap());
        let rule = GaussHermiteRule::new(21).unwrap();
        let k = GridKernel::build(&m, grid.clone(), &rule, Interp::Multilinear, Extrap::Linear).unwrap();
        let vals: Vec<f64> = grid.points().iter().map(|x| 2.0 - 0.3 * x[0]).collect();
        let e = k.expect(&vals);
        for (i, ei) in e.iter().enumerate() {
            let x = grid.point(i);
            let want = cond_expectation(&m, &x, |y| 2.0 - 0.3 * y[0], &rule).unwrap();
            assert!((ei - want).abs() < 1e-12);
        }
        let ones = k.expect_pairs(&vec![1.0; k.n_pairs()]);
        assert!(ones.iter().all(|s| (s - 1.0).abs() < 1e-13));
    }

    #[test]
    fn log_expect_exp_is_lognormal() {
        let m = LgModel::scalar(0.0, 0.0, 1.0).unwrap();
        let grid = Arc::new(Grid::uniform(&[(-3.0, 3.0)], &[7]).unwrap());
        let rule = GaussHermiteRule::new(31).unwrap();
        let k = GridKernel::build(&m, grid, &rule, Interp::Multilinear, Extrap::Linear).unwrap();
        let vals: Vec<f64> = k.grid().points().iter().map(|x| x[0]).collect();
        for v in k.log_expect_exp(&vals, None).unwrap() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }
}
