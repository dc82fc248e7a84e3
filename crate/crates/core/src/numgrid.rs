//! Tensor-product grids, interpolated grid functions, Gauss quadrature rules
//! and resolvent solves `(I - K)^{-1} r` for linear operators acting on grid
//! values.
//!
//! Grid points are ordered row-major: the last coordinate varies fastest.

use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest grid for which dense operator matrices are built.
pub const MAX_DENSE_POINTS: usize = 20_000;

/// Tensor-product grid with strictly increasing nodes along each axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    axes: Vec<Vec<f64>>,
    strides: Vec<usize>,
    len: usize,
}

impl Grid {
    pub fn new(axes: Vec<Vec<f64>>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::invalid("grid needs at least one dimension"));
        }
        for (k, axis) in axes.iter().enumerate() {
            if axis.len() < 2 {
                return Err(Error::invalid(format!("axis {k} needs at least 2 nodes")));
            }
            if axis.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("axis {k} has non-finite nodes")));
            }
            if axis.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::invalid(format!("axis {k} nodes are not strictly increasing")));
            }
        }
        let d = axes.len();
        let mut strides = vec![1usize; d];
        for k in (0..d.saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * axes[k + 1].len();
        }
        let len = axes.iter().map(Vec::len).product();
        Ok(Grid { axes, strides, len })
    }

    /// Evenly spaced nodes on each `[lo, hi]` interval.
    pub fn uniform(bounds: &[(f64, f64)], counts: &[usize]) -> Result<Self> {
        if bounds.len() != counts.len() {
            return Err(Error::invalid("bounds and counts differ in length"));
        }
        let axes = bounds
            .iter()
            .zip(counts)
            .map(|(&(lo, hi), &n)| {
                if !(hi > lo) || n < 2 {
                    return Err(Error::invalid(format!("bad axis [{lo}, {hi}] with {n} nodes")));
                }
                let h = (hi - lo) / (n - 1) as f64;
                Ok((0..n)
                    .map(|i| if i + 1 == n { hi } else { lo + h * i as f64 })
                    .collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Grid::new(axes)
    }

    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn axis(&self, k: usize) -> &[f64] {
        &self.axes[k]
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.axes.iter().map(|a| (a[0], a[a.len() - 1])).collect()
    }

    pub fn multi_index(&self, mut i: usize) -> Vec<usize> {
        let mut out = vec![0; self.dims()];
        for k in 0..self.dims() {
            out[k] = i / self.strides[k];
            i %= self.strides[k];
        }
        out
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        self.multi_index(i)
            .iter()
            .enumerate()
            .map(|(k, &j)| self.axes[k][j])
            .collect()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len).map(|i| self.point(i)).collect()
    }

    /// Grid with a midpoint inserted between every pair of adjacent nodes.
    pub fn refined(&self) -> Grid {
        let axes = self
            .axes
            .iter()
            .map(|a| {
                let mut out = Vec::with_capacity(2 * a.len() - 1);
                for w in a.windows(2) {
                    out.push(w[0]);
                    out.push(0.5 * (w[0] + w[1]));
                }
                out.push(a[a.len() - 1]);
                out
            })
            .collect();
        Grid::new(axes).expect("refinement keeps nodes increasing")
    }

    /// Interpolation stencil for `x` under the given rules.
    pub fn stencil(&self, x: &[f64], interp: Interp, extrap: Extrap) -> Result<Stencil> {
        if x.len() != self.dims() {
            return Err(Error::domain(format!(
                "point has {} coordinates, grid has {}",
                x.len(),
                self.dims()
            )));
        }
        let mut st = Stencil {
            idx: vec![0],
            w: vec![1.0],
        };
        for (k, &xk) in x.iter().enumerate() {
            if !xk.is_finite() {
                return Err(Error::domain(format!("non-finite coordinate {k} in {x:?}")));
            }
            let one_d = axis_weights(&self.axes[k], xk, interp, extrap);
            let stride = self.strides[k];
            let mut idx = Vec::with_capacity(st.idx.len() * one_d.len());
            let mut w = Vec::with_capacity(idx.capacity());
            for (&i0, &w0) in st.idx.iter().zip(&st.w) {
                for &(j, wj) in &one_d {
                    idx.push(i0 + j * stride);
                    w.push(w0 * wj);
                }
            }
            st = Stencil { idx, w };
        }
        Ok(st)
    }
}

fn locate(axis: &[f64], x: f64) -> usize {
    let n = axis.len();
    match axis.binary_search_by(|a| a.partial_cmp(&x).expect("finite nodes")) {
        Ok(i) => i.min(n - 2),
        Err(i) => i.saturating_sub(1).min(n - 2),
    }
}

fn axis_weights(axis: &[f64], x: f64, interp: Interp, extrap: Extrap) -> Vec<(usize, f64)> {
    let n = axis.len();
    let (lo, hi) = (axis[0], axis[n - 1]);
    if x < lo || x > hi {
        let edge = if x < lo { 0 } else { n - 1 };
        return match extrap {
            Extrap::Clamp => vec![(edge, 1.0)],
            Extrap::Linear => {
                let j = if x < lo { 0 } else { n - 2 };
                let t = (x - axis[j]) / (axis[j + 1] - axis[j]);
                vec![(j, 1.0 - t), (j + 1, t)]
            }
        };
    }
    let j = locate(axis, x);
    match interp {
        Interp::Multilinear => {
            let t = (x - axis[j]) / (axis[j + 1] - axis[j]);
            if t == 0.0 {
                vec![(j, 1.0)]
            } else if t == 1.0 {
                vec![(j + 1, 1.0)]
            } else {
                vec![(j, 1.0 - t), (j + 1, t)]
            }
        }
        Interp::Cubic => {
            if let Some(i) = axis.iter().position(|&a| a == x) {
                return vec![(i, 1.0)];
            }
            let m = n.min(4);
            let start = j.saturating_sub(1).min(n - m);
            let nodes = &axis[start..start + m];
            (0..m)
                .map(|a| {
                    let mut l = 1.0;
                    for b in 0..m {
                        if b != a {
                            l *= (x - nodes[b]) / (nodes[a] - nodes[b]);
                        }
                    }
                    (start + a, l)
                })
                .collect()
        }
    }
}

/// Interpolation scheme inside the grid bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    #[default]
    Multilinear,
    Cubic,
}

/// Rule applied to points outside the grid bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extrap {
    #[default]
    Clamp,
    Linear,
}

/// Linear functional `f -> sum_k w_k f[idx_k]` on grid values.
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil {
    pub idx: Vec<usize>,
    pub w: Vec<f64>,
}

impl Stencil {
    #[inline]
    pub fn apply(&self, values: &[f64]) -> f64 {
        self.idx.iter().zip(&self.w).map(|(&i, &w)| w * values[i]).sum()
    }
}

/// Real-valued function stored on a grid and evaluated by interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFn {
    grid: Arc<Grid>,
    values: Vec<f64>,
    pub interp: Interp,
    pub extrap: Extrap,
}

impl GridFn {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>, interp: Interp, extrap: Extrap) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid(format!(
                "{} values for a grid of {} points",
                values.len(),
                grid.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite value at node {:?}", grid.point(i))));
        }
        Ok(GridFn {
            grid,
            values,
            interp,
            extrap,
        })
    }

    pub fn constant(grid: Arc<Grid>, c: f64) -> Self {
        let n = grid.len();
        GridFn {
            grid,
            values: vec![c; n],
            interp: Interp::default(),
            extrap: Extrap::default(),
        }
    }

    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let values = (0..grid.len()).map(|i| f(&grid.point(i))).collect();
        GridFn::new(grid, values, Interp::default(), Extrap::default())
    }

    /// Same grid and rules, new node values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        GridFn::new(self.grid.clone(), values, self.interp, self.extrap)
    }

    pub fn with_rules(mut self, interp: Interp, extrap: Extrap) -> Self {
        self.interp = interp;
        self.extrap = extrap;
        self
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn stencil(&self, x: &[f64]) -> Result<Stencil> {
        self.grid.stencil(x, self.interp, self.extrap)
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        Ok(self.stencil(x)?.apply(&self.values))
    }

    pub fn sup_norm(&self) -> f64 {
        sup_norm(&self.values)
    }

    pub fn sup_diff(&self, other: &GridFn) -> f64 {
        sup_diff(&self.values, &other.values)
    }

    /// Writes `d` coordinate columns and one value column.
    pub fn write_csv<W: Write>(&self, out: W, dim_names: &[String], value_name: &str) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.grid.dims())
            .map(|k| dim_names.get(k).cloned().unwrap_or_else(|| format!("x{}", k + 1)))
            .collect();
        header.push(value_name.to_string());
        wtr.write_record(&header)?;
        for (i, v) in self.values.iter().enumerate() {
            let mut row: Vec<String> = self.grid.point(i).iter().map(|c| fmt_f64(*c)).collect();
            row.push(fmt_f64(*v));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads the format produced by [`GridFn::write_csv`].
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let ncol = rdr.headers()?.len();
        if ncol < 2 {
            return Err(Error::invalid("grid csv needs coordinate and value columns"));
        }
        let d = ncol - 1;
        let mut coords: Vec<Vec<f64>> = Vec::new();
        let mut values = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parsed: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Data {
                    row: row + 2,
                    msg: e.to_string(),
                })?;
            coords.push(parsed[..d].to_vec());
            values.push(parsed[d]);
        }
        let axes: Vec<Vec<f64>> = (0..d)
            .map(|k| {
                let mut a: Vec<f64> = coords.iter().map(|c| c[k]).collect();
                a.sort_by(|x, y| x.partial_cmp(y).expect("finite coordinate"));
                a.dedup();
                a
            })
            .collect();
        let grid = Arc::new(Grid::new(axes)?);
        if grid.len() != values.len() {
            return Err(Error::invalid("csv rows do not form a tensor grid"));
        }
        for (i, c) in coords.iter().enumerate() {
            if grid.point(i) != *c {
                return Err(Error::invalid(format!("row {} is out of grid order", i + 2)));
            }
        }
        GridFn::new(grid, values, Interp::default(), Extrap::default())
    }
}

/// Shortest decimal representation that round-trips.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// `log sum_i w_i exp(e_i)` with max subtraction; zero weights are skipped.
pub fn log_sum_exp_weighted(weights: &[f64], exponents: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for (&w, &e) in weights.iter().zip(exponents) {
        if w > 0.0 && e > m {
            m = e;
        }
    }
    if !m.is_finite() {
        return m;
    }
    let s: f64 = weights
        .iter()
        .zip(exponents)
        .filter(|(w, _)| **w > 0.0)
        .map(|(&w, &e)| w * (e - m).exp())
        .sum();
    m + s.ln()
}

/// Gauss rule for a probability measure given its three-term recurrence:
/// diagonal `a_k` and squared off-diagonal `b_k` (k = 1..n-1) of the Jacobi
/// matrix. Returns nodes and weights summing to one.
pub fn gauss_from_recurrence(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = a.len();
    assert_eq!(b.len() + 1, n.max(1));
    if n == 1 {
        return (vec![a[0]], vec![1.0]);
    }
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        jac[(i, i)] = a[i];
        if i + 1 < n {
            let s = b[i].sqrt();
            jac[(i, i + 1)] = s;
            jac[(i + 1, i)] = s;
        }
    }
    let eig = SymmetricEigen::new(jac);
    let mut nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    nodes.sort_by(|x, y| x.partial_cmp(y).expect("finite eigenvalue"));

    // Newton polish on the orthonormal recurrence; weights are Christoffel
    // numbers 1 / sum_k p_k(x)^2, which stay accurate in the tails.
    let mut weights = Vec::with_capacity(n);
    for x in nodes.iter_mut() {
        for _ in 0..3 {
            let (p, dp, _) = orthonormal_eval(a, b, *x);
            if dp == 0.0 || !dp.is_finite() {
                break;
            }
            let step = p / dp;
            if !step.is_finite() {
                break;
            }
            *x -= step;
        }
        let (_, _, christoffel) = orthonormal_eval(a, b, *x);
        weights.push(1.0 / christoffel);
    }
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    (nodes, weights)
}

/// Value and derivative of the degree-n orthonormal polynomial at `x`, plus
/// `sum_{k<n} p_k(x)^2`.
fn orthonormal_eval(a: &[f64], b: &[f64], x: f64) -> (f64, f64, f64) {
    let n = a.len();
    let (mut p_prev, mut p) = (0.0, 1.0);
    let (mut d_prev, mut d) = (0.0, 0.0);
    let mut sumsq = 1.0;
    for k in 0..n {
        let bk = if k == 0 { 0.0 } else { b[k - 1].sqrt() };
        // b_n is not part of the Jacobi matrix; any positive scale keeps the
        // root of p_n unchanged.
        let bnext = if k + 1 < n { b[k].sqrt() } else { 1.0 };
        let p_next = ((x - a[k]) * p - bk * p_prev) / bnext;
        let d_next = (p + (x - a[k]) * d - bk * d_prev) / bnext;
        p_prev = p;
        p = p_next;
        d_prev = d;
        d = d_next;
        if k + 1 < n {
            sumsq += p * p;
        }
    }
    (p, d, sumsq)
}

/// Gauss–Hermite rule for the weight `exp(-z^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermiteRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermiteRule {
    pub fn new(order: usize) -> Result<Self> {
        if order == 0 || order > 150 {
            return Err(Error::invalid(format!("Gauss-Hermite order {order} outside 1..=150")));
        }
        let a = vec![0.0; order];
        let b: Vec<f64> = (1..order).map(|k| k as f64 / 2.0).collect();
        let (mut nodes, mut weights) = gauss_from_recurrence(&a, &b);
        for i in 0..order / 2 {
            let j = order - 1 - i;
            let x = 0.5 * (nodes[j] - nodes[i]);
            let w = 0.5 * (weights[i] + weights[j]);
            nodes[i] = -x;
            nodes[j] = x;
            weights[i] = w;
            weights[j] = w;
        }
        if order % 2 == 1 {
            nodes[order / 2] = 0.0;
        }
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let total: f64 = weights.iter().sum();
        let weights = weights.iter().map(|w| w / total * sqrt_pi).collect();
        Ok(GaussHermiteRule { nodes, weights })
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Standard-normal tensor rule in `d` dimensions: points `sqrt(2) z` and
    /// probability weights.
    pub fn standard_normal(&self, d: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let n = self.order();
        let norm = std::f64::consts::PI.sqrt();
        let total = n.pow(d as u32);
        let mut points = Vec::with_capacity(total);
        let mut weights = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut z = vec![0.0; d];
            let mut w = 1.0;
            for k in (0..d).rev() {
                let j = rem % n;
                rem /= n;
                z[k] = std::f64::consts::SQRT_2 * self.nodes[j];
                w *= self.weights[j] / norm;
            }
            points.push(z);
            weights.push(w);
        }
        (points, weights)
    }

    /// Nodes and probability weights for `N(mean, L L')`.
    pub fn gaussian_nodes(&self, mean: &[f64], chol: &DMatrix<f64>) -> (Vec<Vec<f64>>, Vec<f64>) {
        let d = mean.len();
        let (std_pts, weights) = self.standard_normal(d);
        let pts = std_pts
            .into_iter()
            .map(|z| {
                (0..d)
                    .map(|r| mean[r] + (0..=r).map(|c| chol[(r, c)] * z[c]).sum::<f64>())
                    .collect()
            })
            .collect();
        (pts, weights)
    }
}

/// `E[f(X)]` for `X ~ N(mean, L L')` by tensor Gauss–Hermite quadrature.
pub fn gh_expectation(
    rule: &GaussHermiteRule,
    mean: &[f64],
    chol: &DMatrix<f64>,
    integrand: impl Fn(&[f64]) -> f64,
) -> Result<f64> {
    let d = mean.len();
    if chol.nrows() != d || chol.ncols() != d {
        return Err(Error::invalid("Cholesky factor does not match mean dimension"));
    }
    if (0..d).any(|i| !(chol[(i, i)] > 0.0)) {
        return Err(Error::invalid("Cholesky factor needs a strictly positive diagonal"));
    }
    let (pts, w) = rule.gaussian_nodes(mean, chol);
    let mut acc = 0.0;
    for (p, wi) in pts.iter().zip(&w) {
        let v = integrand(p);
        if !v.is_finite() {
            return Err(Error::domain(format!("integrand non-finite at node {p:?}")));
        }
        acc += wi * v;
    }
    Ok(acc)
}

/// Controls for [`neumann_solve`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeumannOptions {
    pub tol: f64,
    pub max_terms: usize,
    /// Consecutive non-decreasing term norms tolerated before declaring divergence.
    pub window: usize,
}

impl Default for NeumannOptions {
    fn default() -> Self {
        NeumannOptions {
            tol: 1e-12,
            max_terms: 200_000,
            window: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NeumannSolution {
    pub values: Vec<f64>,
    pub terms: usize,
    pub last_term_norm: f64,
}

/// Partial sums of `sum_n K^n rhs` until the last term is below `tol`.
pub fn neumann_solve<K>(apply_k: K, rhs: &[f64], opts: NeumannOptions) -> Result<NeumannSolution>
where
    K: Fn(&[f64]) -> Vec<f64>,
{
    let mut sum = rhs.to_vec();
    let mut term = rhs.to_vec();
    let mut norm = sup_norm(&term);
    let mut rising = 0usize;
    let mut terms = 1usize;
    while norm >= opts.tol {
        if terms >= opts.max_terms {
            return Err(Error::NonConvergence {
                iterations: terms,
                residual: norm,
            });
        }
        term = apply_k(&term);
        terms += 1;
        let next = sup_norm(&term);
        if !next.is_finite() {
            return Err(Error::Divergence(format!("term {terms} is not finite")));
        }
        if next >= norm {
            rising += 1;
            if rising >= opts.window {
                return Err(Error::Divergence(format!(
                    "term norms failed to decrease for {rising} consecutive terms (last {next:e})"
                )));
            }
        } else {
            rising = 0;
        }
        norm = next;
        for (s, t) in sum.iter_mut().zip(&term) {
            *s += t;
        }
    }
    Ok(NeumannSolution {
        values: sum,
        terms,
        last_term_norm: norm,
    })
}

/// [`neumann_solve`] on grid functions sharing one grid.
pub fn neumann_solve_fn<K>(apply_k: K, rhs: &GridFn, opts: NeumannOptions) -> Result<GridFn>
where
    K: Fn(&GridFn) -> GridFn,
{
    let sol = neumann_solve(
        |v| apply_k(&rhs.with_values(v.to_vec()).expect("finite term")).into_values(),
        rhs.values(),
        opts,
    )?;
    rhs.with_values(sol.values)
}

/// Dense matrix of a linear map on `R^n`, built column by column.
pub fn materialize<K>(apply_k: K, n: usize) -> Result<DMatrix<f64>>
where
    K: Fn(&[f64]) -> Vec<f64>,
{
    if n > MAX_DENSE_POINTS {
        return Err(Error::invalid(format!(
            "dense operator of size {n} exceeds the limit of {MAX_DENSE_POINTS}"
        )));
    }
    let mut m = DMatrix::<f64>::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = apply_k(&e);
        e[j] = 0.0;
        for i in 0..n {
            m[(i, j)] = col[i];
        }
    }
    Ok(m)
}

/// Solves `(I - K) f = rhs` by LU factorization.
pub fn dense_resolvent_solve(k: &DMatrix<f64>, rhs: &[f64]) -> Result<Vec<f64>> {
    let n = k.nrows();
    if k.ncols() != n || rhs.len() != n {
        return Err(Error::invalid("operator and right-hand side sizes differ"));
    }
    let a = DMatrix::<f64>::identity(n, n) - k;
    let b = DVector::from_column_slice(rhs);
    a.lu()
        .solve(&b)
        .map(|x| x.iter().copied().collect())
        .ok_or_else(|| Error::Numerical("I - K is singular".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn grid1(nodes: &[f64]) -> Arc<Grid> {
        Arc::new(Grid::new(vec![nodes.to_vec()]).unwrap())
    }

    #[test]
    fn grid_rejects_bad_axes() {
        assert!(Grid::new(vec![vec![0.0]]).is_err());
        assert!(Grid::new(vec![vec![0.0, 0.0]]).is_err());
        assert!(Grid::new(vec![]).is_err());
        let g = Grid::uniform(&[(0.0, 1.0), (-1.0, 1.0)], &[3, 4]).unwrap();
        assert_eq!(g.len(), 12);
        assert_eq!(g.point(5)[0], 0.5);
        assert!((g.point(5)[1] + 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(g.flat_index(&g.multi_index(7)), 7);
    }

    #[test]
    fn gh_second_moment_and_normalization() {
        let chol = DMatrix::from_element(1, 1, 1.0);
        let r5 = GaussHermiteRule::new(5).unwrap();
        assert_abs_diff_eq!(gh_expectation(&r5, &[0.0], &chol, |x| x[0] * x[0]).unwrap(), 1.0, epsilon = 1e-12);
        let r1 = GaussHermiteRule::new(1).unwrap();
        assert_abs_diff_eq!(gh_expectation(&r1, &[0.0], &chol, |_| 1.0).unwrap(), 1.0, epsilon = 1e-15);
        let r20 = GaussHermiteRule::new(20).unwrap();
        let m = gh_expectation(&r20, &[0.0], &chol, |x| x[0].exp()).unwrap();
        assert_abs_diff_eq!(m, 0.5f64.exp(), epsilon = 1e-9);
    }

    #[test]
    fn gh_rule_invariants() {
        for n in [1, 2, 5, 31, 80, 150] {
            let r = GaussHermiteRule::new(n).unwrap();
            let s: f64 = r.weights().iter().sum();
            assert!((s - std::f64::consts::PI.sqrt()).abs() < 1e-12, "order {n}");
            assert!(r.weights().iter().all(|&w| w > 0.0));
            for i in 0..n {
                assert_eq!(r.nodes()[i], -r.nodes()[n - 1 - i]);
            }
        }
    }

    fn normal_moment(k: u32) -> f64 {
        if k % 2 == 1 {
            0.0
        } else {
            (1..k).step_by(2).map(|j| j as f64).product()
        }
    }

    #[test]
    fn gh_exact_on_polynomials() {
        let chol = DMatrix::from_element(1, 1, 1.0);
        for n in [3usize, 10, 31] {
            let r = GaussHermiteRule::new(n).unwrap();
            for k in 0..(2 * n as u32) {
                let got = gh_expectation(&r, &[0.0], &chol, |x| x[0].powi(k as i32)).unwrap();
                let want = normal_moment(k);
                let scale = normal_moment(k + k % 2).max(1.0);
                assert!((got - want).abs() / scale < 1e-10, "n={n} k={k}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn gh_two_dimensional_covariance() {
        let chol = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 2.0]);
        let r = GaussHermiteRule::new(7).unwrap();
        let cov01 = gh_expectation(&r, &[1.0, -1.0], &chol, |x| (x[0] - 1.0) * (x[1] + 1.0)).unwrap();
        assert_abs_diff_eq!(cov01, 0.5, epsilon = 1e-12);
        let var1 = gh_expectation(&r, &[1.0, -1.0], &chol, |x| (x[1] + 1.0).powi(2)).unwrap();
        assert_abs_diff_eq!(var1, 4.25, epsilon = 1e-12);
    }

    #[test]
    fn gh_reports_bad_nodes() {
        let chol = DMatrix::from_element(1, 1, 1.0);
        let r = GaussHermiteRule::new(4).unwrap();
        let err = gh_expectation(&r, &[0.0], &chol, |x| if x[0] > 0.0 { f64::NAN } else { 0.0 });
        assert!(matches!(err, Err(Error::Domain(_))));
        let zero = DMatrix::from_element(1, 1, 0.0);
        assert!(gh_expectation(&r, &[0.0], &zero, |_| 1.0).is_err());
    }

    #[test]
    fn gauss_laguerre_matches_gamma_moments() {
        let alpha = 2.5;
        let n = 20;
        let a: Vec<f64> = (0..n).map(|k| 2.0 * k as f64 + alpha + 1.0).collect();
        let b: Vec<f64> = (1..n).map(|k| k as f64 * (k as f64 + alpha)).collect();
        let (x, w) = gauss_from_recurrence(&a, &b);
        let shape = alpha + 1.0;
        let mean: f64 = x.iter().zip(&w).map(|(x, w)| x * w).sum();
        let second: f64 = x.iter().zip(&w).map(|(x, w)| x * x * w).sum();
        assert_abs_diff_eq!(mean, shape, epsilon = 1e-11);
        assert_abs_diff_eq!(second, shape * (shape + 1.0), epsilon = 1e-10);
    }

    #[test]
    fn interpolation_examples() {
        let g = grid1(&[0.0, 1.0]);
        let f = GridFn::from_fn(g.clone(), |x| x[0]).unwrap();
        assert_eq!(f.eval(&[0.25]).unwrap(), 0.25);
        let c = GridFn::constant(g, 3.0);
        assert_eq!(c.eval(&[17.0]).unwrap(), 3.0);
        assert_eq!(c.eval(&[-2.5]).unwrap(), 3.0);

        let g3 = grid1(&[0.0, 1.0, 2.0]);
        let sq = GridFn::from_fn(g3, |x| x[0] * x[0]).unwrap();
        assert_eq!(sq.eval(&[0.5]).unwrap(), 0.5);
        assert!(sq.eval(&[f64::NAN]).is_err());
    }

    #[test]
    fn extrapolation_rules() {
        let g = grid1(&[0.0, 1.0, 2.0]);
        let f = GridFn::from_fn(g, |x| 2.0 * x[0] + 1.0).unwrap();
        assert_eq!(f.eval(&[5.0]).unwrap(), 5.0);
        let lin = f.clone().with_rules(Interp::Multilinear, Extrap::Linear);
        assert_abs_diff_eq!(lin.eval(&[5.0]).unwrap(), 11.0, epsilon = 1e-12);
        assert_abs_diff_eq!(lin.eval(&[-1.0]).unwrap(), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn cubic_reproduces_cubics() {
        let g = Arc::new(Grid::uniform(&[(-2.0, 2.0)], &[9]).unwrap());
        let f = GridFn::from_fn(g, |x| x[0].powi(3) - x[0])
            .unwrap()
            .with_rules(Interp::Cubic, Extrap::Clamp);
        for x in [-1.9, -0.3, 0.77, 1.95] {
            assert_abs_diff_eq!(f.eval(&[x]).unwrap(), x * x * x - x, epsilon = 1e-12);
        }
    }

    #[test]
    fn bilinear_reproduces_bilinear() {
        let g = Arc::new(Grid::uniform(&[(0.0, 1.0), (0.0, 2.0)], &[3, 5]).unwrap());
        let f = GridFn::from_fn(g, |x| 1.0 + x[0] - 2.0 * x[1] + 3.0 * x[0] * x[1]).unwrap();
        let x = [0.3, 1.7];
        assert_abs_diff_eq!(f.eval(&x).unwrap(), 1.0 + 0.3 - 3.4 + 3.0 * 0.51, epsilon = 1e-12);
    }

    #[test]
    fn csv_roundtrip() {
        let g = Arc::new(Grid::uniform(&[(0.0, 1.0), (0.0, 2.0)], &[3, 2]).unwrap());
        let f = GridFn::from_fn(g, |x| x[0] * 10.0 + x[1] / 3.0).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf, &["a".into(), "b".into()], "v").unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("a,b,v\n0.0,0.0,0.0\n0.0,2.0,"));
        let back = GridFn::read_csv(&buf[..]).unwrap();
        assert_eq!(back.values(), f.values());
        assert_eq!(back.grid().as_ref(), f.grid().as_ref());
    }

    #[test]
    fn neumann_examples() {
        let rhs = vec![1.0; 4];
        let sol = neumann_solve(|v| v.iter().map(|x| 0.5 * x).collect(), &rhs, NeumannOptions::default()).unwrap();
        assert!(sol.values.iter().all(|v| (v - 2.0).abs() < 1e-11));

        let g = vec![1.0, -2.0, 3.5];
        let sol = neumann_solve(|v| vec![0.0; v.len()], &g, NeumannOptions::default()).unwrap();
        assert_eq!(sol.values, g);

        let err = neumann_solve(|v| v.iter().map(|x| 1.01 * x).collect(), &rhs, NeumannOptions::default());
        assert!(matches!(err, Err(Error::Divergence(_))));
    }

    #[test]
    fn neumann_matches_dense() {
        let k = DMatrix::from_row_slice(3, 3, &[0.2, 0.1, 0.0, 0.05, 0.3, 0.2, 0.1, 0.1, 0.4]);
        let apply = |v: &[f64]| (&k * DVector::from_column_slice(v)).iter().copied().collect::<Vec<f64>>();
        let rhs = [1.0, -1.0, 0.5];
        let opts = NeumannOptions {
            tol: 1e-13,
            ..Default::default()
        };
        let sol = neumann_solve(apply, &rhs, opts).unwrap();
        let dense = dense_resolvent_solve(&materialize(apply, 3).unwrap(), &rhs).unwrap();
        assert!(sup_diff(&sol.values, &dense) < 10.0 * opts.tol * 10.0);
        let kf = apply(&sol.values);
        let resid: Vec<f64> = (0..3).map(|i| sol.values[i] - kf[i] - rhs[i]).collect();
        assert!(sup_norm(&resid) < 10.0 * opts.tol);
    }

    #[test]
    fn log_sum_exp_is_stable() {
        let v = log_sum_exp_weighted(&[0.5, 0.5], &[1000.0, 1000.0]);
        assert_abs_diff_eq!(v, 1000.0, epsilon = 1e-12);
        assert_eq!(log_sum_exp_weighted(&[0.0], &[1.0]), f64::NEG_INFINITY);
    }

    proptest! {
        #[test]
        fn interp_exact_at_nodes(vals in prop::collection::vec(-100.0f64..100.0, 2..12), cubic in any::<bool>()) {
            let n = vals.len();
            let g = Arc::new(Grid::uniform(&[(-1.0, 3.0)], &[n]).unwrap());
            let interp = if cubic { Interp::Cubic } else { Interp::Multilinear };
            let f = GridFn::new(g.clone(), vals.clone(), interp, Extrap::Clamp).unwrap();
            for i in 0..n {
                prop_assert_eq!(f.eval(&g.point(i)).unwrap(), vals[i]);
            }
        }

        #[test]
        fn multilinear_monotone_between_nodes(a in -50.0f64..50.0, b in -50.0f64..50.0, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let g = grid1(&[0.0, 1.0]);
            let f = GridFn::new(g, vec![a, b], Interp::Multilinear, Extrap::Clamp).unwrap();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let (flo, fhi) = (f.eval(&[lo]).unwrap(), f.eval(&[hi]).unwrap());
            if b >= a { prop_assert!(fhi >= flo - 1e-12); } else { prop_assert!(fhi <= flo + 1e-12); }
        }

        #[test]
        fn gh_is_linear(c1 in -3.0f64..3.0, c2 in -3.0f64..3.0, mean in -2.0f64..2.0, s in 0.1f64..3.0) {
            let r = GaussHermiteRule::new(12).unwrap();
            let chol = DMatrix::from_element(1, 1, s);
            let f = |x: &[f64]| x[0].sin();
            let g = |x: &[f64]| x[0] * x[0];
            let lhs = gh_expectation(&r, &[mean], &chol, |x| c1 * f(x) + c2 * g(x)).unwrap();
            let rhs = c1 * gh_expectation(&r, &[mean], &chol, f).unwrap() + c2 * gh_expectation(&r, &[mean], &chol, g).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
        }
    }
}
