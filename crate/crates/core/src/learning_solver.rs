//! Continuation values when part of the state is hidden.
//!
//! Beliefs about the hidden state are summarized by a finite-dimensional
//! statistic (a point of the simplex for hidden regimes, a filtered mean for
//! Gaussian state-space models). The recursion is solved on a grid over that
//! statistic with `eps = theta / vartheta`:
//!
//! `T f(p) = beta log sum_c p_c [E_c exp(eps (f(next) + alpha u(phi')))]^(1/eps)`,
//!
//! and `beta log sum_c p_c exp(E_c[f(next) + alpha u(phi')])` when `vartheta` is infinite.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{GaussianLaw, Nodes, RegimeModel, StateSpaceModel};
use crate::numgrid::{
    fmt_f64, log_sum_exp_weighted, neumann_solve, sup_diff, sup_norm, Extrap, GaussHermiteRule, Grid, Interp,
    NeumannOptions, Stencil,
};
use crate::robust_solver::{SolveOptions, SolveReport};

/// Utility growth as a function of the next observation.
pub type ObsUtility = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// `a0 + lambda' phi`.
pub fn obs_affine(a0: f64, lambda: Vec<f64>) -> ObsUtility {
    Arc::new(move |phi: &[f64]| a0 + lambda.iter().zip(phi).map(|(l, p)| l * p).sum::<f64>())
}

/// Preferences with separate concerns about the hidden state and the observation law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnPrefs {
    pub beta: f64,
    pub theta: f64,
    /// `None` selects the limiting recursion.
    pub vartheta: Option<f64>,
}

impl LearnPrefs {
    pub fn new(beta: f64, theta: f64, vartheta: Option<f64>) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::invalid(format!("beta must lie in (0, 1), got {beta}")));
        }
        if !(theta > 0.0) {
            return Err(Error::invalid(format!("theta must be positive, got {theta}")));
        }
        if let Some(vt) = vartheta {
            if !(vt > 0.0) {
                return Err(Error::invalid(format!("vartheta must be positive, got {vt}")));
            }
        }
        Ok(LearnPrefs { beta, theta, vartheta })
    }

    pub fn alpha(&self) -> f64 {
        -1.0 / (self.theta * (1.0 - self.beta))
    }

    /// `theta / vartheta`, zero in the limiting case.
    pub fn eps(&self) -> f64 {
        match self.vartheta {
            Some(vt) if vt.is_finite() => self.theta / vt,
            _ => 0.0,
        }
    }
}

/// Uniform lattice `{k / m}` on the probability simplex with barycentric interpolation.
///
/// Points are stored through the tail sums `s_k = m (p_k + ... + p_{N-1})`,
/// `k = 1..N-1`, which turn the simplex into a monotone cone where the
/// Freudenthal triangulation applies.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexGrid {
    n: usize,
    m: usize,
    lattice: Vec<Vec<u32>>,
    index: HashMap<Vec<u32>, usize>,
}

impl SimplexGrid {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n == 0 || (n > 1 && m == 0) {
            return Err(Error::invalid("simplex grid needs at least one regime and one subdivision"));
        }
        let mut lattice = Vec::new();
        let mut cur = Vec::with_capacity(n - 1);
        enumerate_monotone(n - 1, m as u32, &mut cur, &mut lattice);
        let index = lattice.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Ok(SimplexGrid { n, m, lattice, index })
    }

    pub fn n_regimes(&self) -> usize {
        self.n
    }

    pub fn subdivisions(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.lattice.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lattice.is_empty()
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        let s = &self.lattice[i];
        let m = self.m as f64;
        let mut p = Vec::with_capacity(self.n);
        let first = if self.n > 1 { s[0] as f64 } else { 0.0 };
        p.push(1.0 - first / m);
        for k in 1..self.n {
            let next = if k + 1 < self.n { s[k] as f64 } else { 0.0 };
            p.push((s[k - 1] as f64 - next) / m);
        }
        p
    }

    pub fn stencil(&self, p: &[f64]) -> Result<Stencil> {
        if p.len() != self.n || p.iter().any(|v| !v.is_finite() || *v < -1e-12) {
            return Err(Error::domain(format!("{p:?} is not a point of the simplex")));
        }
        if self.n == 1 {
            return Ok(Stencil {
                idx: vec![0],
                w: vec![1.0],
            });
        }
        let m = self.m as f64;
        let total: f64 = p.iter().sum();
        let mut s = vec![0.0; self.n - 1];
        let mut tail = 0.0;
        for k in (1..self.n).rev() {
            tail += p[k] / total;
            s[k - 1] = (m * tail).clamp(0.0, m);
        }
        let base: Vec<u32> = s.iter().map(|v| (v.floor() as u32).min(self.m as u32)).collect();
        let frac: Vec<f64> = s.iter().zip(&base).map(|(v, b)| v - *b as f64).collect();
        let mut order: Vec<usize> = (0..frac.len()).collect();
        order.sort_by(|&a, &b| frac[b].partial_cmp(&frac[a]).expect("finite").then(a.cmp(&b)));
        let mut vertex = base.clone();
        let mut idx = Vec::with_capacity(self.n);
        let mut w = Vec::with_capacity(self.n);
        let mut prev = 1.0;
        for (step, &k) in order.iter().enumerate() {
            let wk = prev - frac[k];
            if wk > 0.0 {
                idx.push(self.lookup(&vertex)?);
                w.push(wk);
            }
            prev = frac[k];
            vertex[k] += 1;
            if step + 1 == order.len() && prev > 0.0 {
                idx.push(self.lookup(&vertex)?);
                w.push(prev);
            }
        }
        Ok(Stencil { idx, w })
    }

    fn lookup(&self, s: &[u32]) -> Result<usize> {
        self.index
            .get(s)
            .copied()
            .ok_or_else(|| Error::Numerical(format!("simplex vertex {s:?} outside the lattice")))
    }
}

fn enumerate_monotone(len: usize, max: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if cur.len() == len {
        out.push(cur.clone());
        return;
    }
    let hi = cur.last().copied().unwrap_or(max);
    for v in (0..=hi).rev() {
        cur.push(v);
        enumerate_monotone(len, max, cur, out);
        cur.pop();
    }
}

/// Grid over the belief statistic.
#[derive(Debug, Clone, PartialEq)]
pub enum BeliefGrid {
    Simplex(SimplexGrid),
    Rect { grid: Arc<Grid>, extrap: Extrap },
}

impl BeliefGrid {
    pub fn len(&self) -> usize {
        match self {
            BeliefGrid::Simplex(s) => s.len(),
            BeliefGrid::Rect { grid, .. } => grid.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        match self {
            BeliefGrid::Simplex(s) => s.point(i),
            BeliefGrid::Rect { grid, .. } => grid.point(i),
        }
    }

    pub fn stencil(&self, p: &[f64]) -> Result<Stencil> {
        match self {
            BeliefGrid::Simplex(s) => s.stencil(p),
            BeliefGrid::Rect { grid, extrap } => grid.stencil(p, Interp::Multilinear, *extrap),
        }
    }

    /// Column names for serialization.
    pub fn coordinate_names(&self) -> Vec<String> {
        match self {
            BeliefGrid::Simplex(s) => (1..=s.n_regimes()).map(|k| format!("p{k}")).collect(),
            BeliefGrid::Rect { grid, .. } => (1..=grid.dims()).map(|k| format!("xi{k}")).collect(),
        }
    }
}

/// Values on a belief grid.
#[derive(Debug, Clone)]
pub struct BeliefFn {
    pub grid: Arc<BeliefGrid>,
    pub values: Vec<f64>,
}

impl BeliefFn {
    pub fn eval(&self, p: &[f64]) -> Result<f64> {
        Ok(self.grid.stencil(p)?.apply(&self.values))
    }

    /// Coordinate columns followed by the value column.
    pub fn write_csv<W: Write>(&self, out: W, value_name: &str) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = self.grid.coordinate_names();
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
}

/// Hidden-state model reduced to a belief recursion.
pub trait HiddenStateModel: Send + Sync {
    fn obs_dim(&self) -> usize;

    /// Law of the next observation as a mixture over hidden components given the belief:
    /// each entry is a component weight and nodes for the observation law.
    fn components(&self, belief: &[f64], rule: &GaussHermiteRule) -> Result<Vec<(f64, Nodes)>>;

    /// Belief after observing `phi`.
    fn update(&self, belief: &[f64], phi: &[f64]) -> Result<Vec<f64>>;
}

impl HiddenStateModel for RegimeModel {
    fn obs_dim(&self) -> usize {
        RegimeModel::obs_dim(self)
    }

    fn components(&self, belief: &[f64], rule: &GaussHermiteRule) -> Result<Vec<(f64, Nodes)>> {
        Ok((0..self.n_regimes())
            .filter(|&c| belief[c] > 0.0)
            .map(|c| (belief[c], self.emission(c).nodes(rule)))
            .collect())
    }

    fn update(&self, belief: &[f64], phi: &[f64]) -> Result<Vec<f64>> {
        self.filter_step(belief, phi)
    }
}

/// Steady-state filter quantities of a Gaussian state-space model.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanSteadyState {
    /// Covariance of the hidden state given current information.
    pub sigma_bar: DMatrix<f64>,
    /// Gain `B Sigma A' (A Sigma A' + Su)^{-1}` of the mean update.
    pub gain: DMatrix<f64>,
    pub iterations: usize,
}

/// Iterates the Riccati recursion to its fixed point.
pub fn kalman_steady_state(model: &StateSpaceModel, tol: f64, max_iters: usize) -> Result<KalmanSteadyState> {
    let (a, b) = (&model.a, &model.b);
    let n = b.nrows();
    let mut p = model.sw.clone();
    for it in 1..=max_iters {
        let s = a * &p * a.transpose() + &model.su;
        let s_inv = s
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("innovation covariance is singular".into()))?;
        let upd = &p - &p * a.transpose() * &s_inv * a * &p;
        let mut next = b * upd * b.transpose() + &model.sw;
        next = (&next + next.transpose()) * 0.5;
        let diff = (&next - &p).amax();
        p = next;
        if diff < tol {
            let s = a * &p * a.transpose() + &model.su;
            let s_inv = s
                .try_inverse()
                .ok_or_else(|| Error::Numerical("innovation covariance is singular".into()))?;
            let gain = b * &p * a.transpose() * s_inv;
            debug_assert_eq!(gain.nrows(), n);
            return Ok(KalmanSteadyState {
                sigma_bar: p,
                gain,
                iterations: it,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iters,
        residual: f64::NAN,
    })
}

/// Gaussian state-space model with beliefs summarized by the steady-state filtered mean.
#[derive(Debug, Clone)]
pub struct KalmanLearning {
    model: StateSpaceModel,
    steady: KalmanSteadyState,
    posterior: Option<GaussianLaw>,
    obs_noise: GaussianLaw,
}

impl KalmanLearning {
    pub fn new(model: StateSpaceModel, tol: f64) -> Result<Self> {
        let steady = kalman_steady_state(&model, tol, 1_000_000)?;
        let n = model.latent_dim();
        let posterior = if steady.sigma_bar.amax() < 1e-14 {
            None
        } else {
            Some(GaussianLaw::new(DVector::zeros(n), steady.sigma_bar.clone())?)
        };
        let obs_noise = GaussianLaw::new(DVector::zeros(model.obs_dim()), model.su.clone())
            .map_err(|_| Error::invalid("observation noise covariance must be positive definite"))?;
        Ok(KalmanLearning {
            model,
            steady,
            posterior,
            obs_noise,
        })
    }

    pub fn steady_state(&self) -> &KalmanSteadyState {
        &self.steady
    }

    /// Stationary covariance of the filtered mean.
    pub fn belief_covariance(&self) -> Result<DMatrix<f64>> {
        let a = &self.model.a;
        let innov = a * &self.steady.sigma_bar * a.transpose() + &self.model.su;
        let s = &self.steady.gain * innov * self.steady.gain.transpose();
        crate::models::stationary_covariance(&self.model.b, &s)
    }

    /// Rectangular belief grid spanning `span` stationary standard deviations.
    pub fn belief_grid(&self, nodes: usize, span: f64) -> Result<BeliefGrid> {
        let cov = self.belief_covariance()?;
        let bounds: Vec<(f64, f64)> = (0..cov.nrows())
            .map(|i| {
                let sd = cov[(i, i)].sqrt().max(1e-8);
                (-span * sd, span * sd)
            })
            .collect();
        let grid = Grid::uniform(&bounds, &vec![nodes; bounds.len()])?;
        Ok(BeliefGrid::Rect {
            grid: Arc::new(grid),
            extrap: Extrap::Linear,
        })
    }
}

impl HiddenStateModel for KalmanLearning {
    fn obs_dim(&self) -> usize {
        self.model.obs_dim()
    }

    fn components(&self, belief: &[f64], rule: &GaussHermiteRule) -> Result<Vec<(f64, Nodes)>> {
        let hidden = match &self.posterior {
            Some(law) => law.nodes_at(belief, rule, 1.0),
            None => {
                let mut n = Nodes::new(belief.len());
                n.push(belief, 1.0);
                n
            }
        };
        Ok(hidden
            .iter()
            .map(|(xi, w)| {
                let mean: Vec<f64> = (0..self.model.obs_dim())
                    .map(|r| (0..xi.len()).map(|c| self.model.a[(r, c)] * xi[c]).sum())
                    .collect();
                (w, self.obs_noise.nodes_at(&mean, rule, 1.0))
            })
            .collect())
    }

    fn update(&self, belief: &[f64], phi: &[f64]) -> Result<Vec<f64>> {
        let xi = DVector::from_column_slice(belief);
        let innov = DVector::from_column_slice(phi) - &self.model.a * &xi;
        Ok((&self.model.b * &xi + &self.steady.gain * innov).iter().copied().collect())
    }
}

/// Joint law of (component, observation, next belief) stored per belief node.
#[derive(Debug, Clone)]
struct LearnKernel {
    /// Component ranges per node.
    node_off: Vec<usize>,
    comp_w: Vec<f64>,
    /// Pair ranges per component.
    comp_off: Vec<usize>,
    w: Vec<f64>,
    u: Vec<f64>,
    st_off: Vec<usize>,
    st_idx: Vec<u32>,
    st_w: Vec<f64>,
}

impl LearnKernel {
    #[inline]
    fn next_value(&self, q: usize, values: &[f64]) -> f64 {
        let r = self.st_off[q]..self.st_off[q + 1];
        self.st_idx[r.clone()]
            .iter()
            .zip(&self.st_w[r])
            .map(|(&j, &w)| w * values[j as usize])
            .sum()
    }

    fn n_nodes(&self) -> usize {
        self.node_off.len() - 1
    }
}

/// Learning recursion discretized on a belief grid.
#[derive(Clone)]
pub struct LearningProblem {
    prefs: LearnPrefs,
    grid: Arc<BeliefGrid>,
    kernel: Arc<LearnKernel>,
}

impl std::fmt::Debug for LearningProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LearningProblem")
            .field("prefs", &self.prefs)
            .field("nodes", &self.grid.len())
            .finish_non_exhaustive()
    }
}

impl LearningProblem {
    pub fn new(
        model: &dyn HiddenStateModel,
        prefs: LearnPrefs,
        u: ObsUtility,
        grid: BeliefGrid,
        rule: &GaussHermiteRule,
    ) -> Result<Self> {
        let per_node: Vec<_> = (0..grid.len())
            .into_par_iter()
            .map(|i| -> Result<_> {
                let belief = grid.point(i);
                let comps = model.components(&belief, rule)?;
                let mut out = Vec::with_capacity(comps.len());
                for (cw, mut nodes) in comps {
                    if cw <= 0.0 {
                        continue;
                    }
                    nodes.prune(1e-20);
                    let mut pairs = Vec::with_capacity(nodes.len());
                    for (phi, w) in nodes.iter() {
                        let next = model.update(&belief, phi)?;
                        let uv = u(phi);
                        if !uv.is_finite() {
                            return Err(Error::domain(format!("utility is not finite at observation {phi:?}")));
                        }
                        pairs.push((w, uv, grid.stencil(&next)?));
                    }
                    out.push((cw, pairs));
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        let mut k = LearnKernel {
            node_off: vec![0],
            comp_w: Vec::new(),
            comp_off: vec![0],
            w: Vec::new(),
            u: Vec::new(),
            st_off: vec![0],
            st_idx: Vec::new(),
            st_w: Vec::new(),
        };
        for comps in per_node {
            for (cw, pairs) in comps {
                k.comp_w.push(cw);
                for (w, uv, st) in pairs {
                    k.w.push(w);
                    k.u.push(uv);
                    k.st_idx.extend(st.idx.iter().map(|&j| j as u32));
                    k.st_w.extend(st.w);
                    k.st_off.push(k.st_idx.len());
                }
                k.comp_off.push(k.w.len());
            }
            k.node_off.push(k.comp_w.len());
        }
        Ok(LearningProblem {
            prefs,
            grid: Arc::new(grid),
            kernel: Arc::new(k),
        })
    }

    pub fn prefs(&self) -> LearnPrefs {
        self.prefs
    }

    pub fn with_prefs(&self, prefs: LearnPrefs) -> Self {
        LearningProblem {
            prefs,
            ..self.clone()
        }
    }

    pub fn grid(&self) -> &Arc<BeliefGrid> {
        &self.grid
    }

    fn belief_fn(&self, values: Vec<f64>) -> BeliefFn {
        BeliefFn {
            grid: self.grid.clone(),
            values,
        }
    }

    fn node_value(&self, i: usize, f: &[f64], alpha: f64, eps: f64) -> Result<f64> {
        let k = &self.kernel;
        let comps = k.node_off[i]..k.node_off[i + 1];
        let mut outer = Vec::with_capacity(comps.len());
        for c in comps.clone() {
            let pairs = k.comp_off[c]..k.comp_off[c + 1];
            let inner = if eps == 0.0 {
                pairs
                    .map(|q| k.w[q] * (k.next_value(q, f) + alpha * k.u[q]))
                    .sum::<f64>()
            } else {
                let e: Vec<f64> = pairs
                    .clone()
                    .map(|q| eps * (k.next_value(q, f) + alpha * k.u[q]))
                    .collect();
                log_sum_exp_weighted(&k.w[pairs], &e) / eps
            };
            outer.push(inner);
        }
        let out = log_sum_exp_weighted(&k.comp_w[comps], &outer);
        if out.is_finite() {
            Ok(self.prefs.beta * out)
        } else {
            Err(Error::MomentCondition(format!(
                "inner exponential moment is not finite at belief {:?}",
                self.grid.point(i)
            )))
        }
    }

    /// The learning operator on node values.
    pub fn apply_values(&self, f: &[f64]) -> Result<Vec<f64>> {
        let (al, eps) = (self.prefs.alpha(), self.prefs.eps());
        (0..self.grid.len())
            .into_par_iter()
            .map(|i| self.node_value(i, f, al, eps))
            .collect()
    }

    pub fn apply_t_learn(&self, f: &BeliefFn) -> Result<BeliefFn> {
        Ok(self.belief_fn(self.apply_values(&f.values)?))
    }

    /// Single-exponential form `beta log E[exp(f(next) + alpha u)]` valid when `vartheta = theta`.
    pub fn apply_reduced(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.joint_log_expect(f, self.prefs.alpha())
            .map(|v| v.into_iter().map(|x| self.prefs.beta * x).collect())
    }

    /// `log E[exp(f(next) + c u)]` under the joint component-observation law.
    fn joint_log_expect(&self, f: &[f64], c: f64) -> Result<Vec<f64>> {
        let k = &self.kernel;
        (0..k.n_nodes())
            .into_par_iter()
            .map(|i| {
                let mut w = Vec::new();
                let mut e = Vec::new();
                for comp in k.node_off[i]..k.node_off[i + 1] {
                    for q in k.comp_off[comp]..k.comp_off[comp + 1] {
                        w.push(k.comp_w[comp] * k.w[q]);
                        e.push(k.next_value(q, f) + c * k.u[q]);
                    }
                }
                let out = log_sum_exp_weighted(&w, &e);
                if out.is_finite() {
                    Ok(out)
                } else {
                    Err(Error::MomentCondition(format!(
                        "exponential moment is not finite at belief {:?}",
                        self.grid.point(i)
                    )))
                }
            })
            .collect()
    }

    /// `E[g(next) + c u]` under the joint law.
    fn joint_expect(&self, f: &[f64], c: f64) -> Vec<f64> {
        let k = &self.kernel;
        (0..k.n_nodes())
            .into_par_iter()
            .map(|i| {
                let mut acc = 0.0;
                for comp in k.node_off[i]..k.node_off[i + 1] {
                    for q in k.comp_off[comp]..k.comp_off[comp + 1] {
                        acc += k.comp_w[comp] * k.w[q] * (k.next_value(q, f) + c * k.u[q]);
                    }
                }
                acc
            })
            .collect()
    }

    fn series_bound(&self, c: f64, opts: &SolveOptions) -> Result<(Vec<f64>, usize)> {
        let b = self.prefs.beta;
        let zeros = vec![0.0; self.grid.len()];
        let mut ell = self.joint_log_expect(&zeros, c / (1.0 - b))?;
        let mut acc: Vec<f64> = ell.iter().map(|l| (1.0 - b) * b * l).collect();
        let mut disc = b;
        let mut terms = 1;
        loop {
            if terms >= opts.bound_max_terms {
                return Err(Error::NonConvergence {
                    iterations: terms,
                    residual: sup_norm(&ell),
                });
            }
            let next = self.joint_log_expect(&ell, 0.0)?;
            disc *= b;
            terms += 1;
            let step = sup_diff(&next, &ell);
            let scale = 1.0 + sup_norm(&next);
            ell = next;
            if step <= opts.bound_tol * scale {
                for (a, l) in acc.iter_mut().zip(&ell) {
                    *a += disc * l;
                }
                break;
            }
            for (a, l) in acc.iter_mut().zip(&ell) {
                *a += (1.0 - b) * disc * l;
            }
            if disc * scale / (1.0 - b) < opts.bound_tol {
                break;
            }
        }
        Ok((acc, terms))
    }

    /// Upper bound: the standard series bound when `vartheta >= theta`, and the
    /// bound for composite `eps alpha` scaled by `1 / eps` otherwise; shifted to
    /// a grid supersolution.
    pub fn upper_bound(&self, opts: &SolveOptions) -> Result<(BeliefFn, usize, f64)> {
        let eps = self.prefs.eps();
        let al = self.prefs.alpha();
        let (mut v, terms) = if eps <= 1.0 {
            self.series_bound(al, opts)?
        } else {
            let (w, t) = self.series_bound(eps * al, opts)?;
            (w.into_iter().map(|x| x / eps).collect(), t)
        };
        let t = self.apply_values(&v)?;
        let excess = t.iter().zip(&v).fold(0.0f64, |m, (t, v)| m.max(t - v));
        let shift = if excess > 0.0 { excess / (1.0 - self.prefs.beta) } else { 0.0 };
        for x in v.iter_mut() {
            *x += shift;
        }
        Ok((self.belief_fn(v), terms, shift))
    }

    /// `(I - beta E)^{-1} beta E[alpha u]` under the joint law.
    pub fn lower_bound(&self, opts: &NeumannOptions) -> Result<BeliefFn> {
        let b = self.prefs.beta;
        let zeros = vec![0.0; self.grid.len()];
        let rhs: Vec<f64> = self.joint_expect(&zeros, self.prefs.alpha()).iter().map(|e| b * e).collect();
        let sol = neumann_solve(
            |f| self.joint_expect(f, 0.0).into_iter().map(|e| b * e).collect(),
            &rhs,
            *opts,
        )?;
        Ok(self.belief_fn(sol.values))
    }

    /// Monotone iteration from the upper bound.
    pub fn solve_v_learn(&self, opts: &SolveOptions) -> Result<(BeliefFn, SolveReport)> {
        let (upper, terms, shift) = self.upper_bound(opts)?;
        let lower = self.lower_bound(&opts.neumann)?;
        let slack = opts.slack.unwrap_or(1e-12 * (1.0 + sup_norm(&upper.values)));
        let mut v = upper.values.clone();
        let mut iterations = 0;
        let mut step = f64::INFINITY;
        let mut max_increase = f64::NEG_INFINITY;
        while step >= opts.tol {
            if iterations >= opts.max_iters {
                return Err(Error::NonConvergence {
                    iterations,
                    residual: step,
                });
            }
            let next = self.apply_values(&v)?;
            iterations += 1;
            let inc = next.iter().zip(&v).fold(f64::NEG_INFINITY, |m, (n, o)| m.max(n - o));
            max_increase = max_increase.max(inc);
            if inc > slack {
                return Err(Error::Numerical(format!(
                    "iterate increased by {inc:e} at iteration {iterations}, beyond slack {slack:e}"
                )));
            }
            step = sup_diff(&next, &v);
            v = next;
        }
        let residual = sup_diff(&self.apply_values(&v)?, &v);
        let bounds_respected = v
            .iter()
            .zip(&lower.values)
            .zip(&upper.values)
            .all(|((v, lo), hi)| *v >= lo - slack && *v <= hi + slack);
        let report = SolveReport {
            iterations,
            residual,
            last_step: step,
            monotone: max_increase <= slack,
            max_increase: max_increase.max(0.0),
            bounds_respected,
            slack,
            slack_source: if opts.slack.is_some() { "fixed" } else { "floor" }.into(),
            upper_shift: shift,
            bound_terms: terms,
            lower_probe: None,
        };
        Ok((self.belief_fn(v), report))
    }
}
