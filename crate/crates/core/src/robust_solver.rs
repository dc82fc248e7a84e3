//! Robust continuation values.
//!
//! The continuation value solves `v = T v` with
//! `T f(x) = beta log E[exp(f(X') + alpha u(x, X')) | x]`. [`RobustProblem`]
//! discretizes the operator on a grid, brackets the solution between an
//! explicit lower and upper bound and iterates downward from the upper bound.
//! [`Distortion`] turns a solved value into the worst-case change of measure
//! and the quantities derived from it.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::GridKernel;
use crate::models::{rng_from_seed, BenchmarkModel, LgModel, UtilityGrowth};
use crate::numgrid::{
    dense_resolvent_solve, neumann_solve, sup_diff, sup_norm, Extrap, GaussHermiteRule, Grid, GridFn, Interp,
    NeumannOptions,
};

/// Discount factor and robustness parameter.
///
/// Stored as the composite `(alpha, beta)` with `alpha = -1 / (theta (1 - beta))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preferences {
    beta: f64,
    alpha: f64,
}

impl Preferences {
    /// Multiplier preferences with penalty `theta`; `theta = inf` removes robustness.
    pub fn new(beta: f64, theta: f64) -> Result<Self> {
        check_beta(beta)?;
        if !(theta > 0.0) {
            return Err(Error::invalid(format!("theta must be positive, got {theta}")));
        }
        Ok(Preferences {
            beta,
            alpha: -1.0 / (theta * (1.0 - beta)),
        })
    }

    /// Raw composite `(alpha, beta)`; any finite `alpha` is accepted.
    pub fn from_alpha(alpha: f64, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        if !alpha.is_finite() {
            return Err(Error::invalid("alpha must be finite"));
        }
        Ok(Preferences { beta, alpha })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Inverse of the composite map; infinite when `alpha = 0`.
    pub fn theta(&self) -> f64 {
        if self.alpha == 0.0 {
            f64::INFINITY
        } else {
            -1.0 / (self.alpha * (1.0 - self.beta))
        }
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        Preferences::from_alpha(alpha, self.beta)
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("beta must lie in (0, 1), got {beta}")))
    }
}

/// Grid construction and quadrature settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    /// Nodes per dimension unless `counts` is given.
    pub nodes: usize,
    pub counts: Option<Vec<usize>>,
    /// Half-width in stationary standard deviations.
    pub span: f64,
    pub bounds: Option<Vec<[f64; 2]>>,
    pub quad_order: usize,
    pub interp: Interp,
    pub extrap: Extrap,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            nodes: 61,
            counts: None,
            span: 5.0,
            bounds: None,
            quad_order: 31,
            interp: Interp::Multilinear,
            extrap: Extrap::Clamp,
        }
    }
}

impl GridSpec {
    pub fn build(&self, model: &dyn BenchmarkModel) -> Result<Arc<Grid>> {
        let d = model.dim();
        let bounds: Vec<(f64, f64)> = match &self.bounds {
            Some(b) if b.len() == d => b.iter().map(|p| (p[0], p[1])).collect(),
            Some(b) => {
                return Err(Error::invalid(format!("{} grid bounds given for dimension {d}", b.len())));
            }
            None => model.default_bounds(self.span)?,
        };
        let counts = match &self.counts {
            Some(c) if c.len() == d => c.clone(),
            Some(c) => {
                return Err(Error::invalid(format!("{} node counts given for dimension {d}", c.len())));
            }
            None => vec![self.nodes; d],
        };
        Ok(Arc::new(Grid::uniform(&bounds, &counts)?))
    }

    pub fn rule(&self) -> Result<GaussHermiteRule> {
        GaussHermiteRule::new(self.quad_order)
    }
}

/// Iteration controls for [`RobustProblem::solve_v`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iters: usize,
    /// Fixed monotonicity slack; estimated from a refined-grid pilot when absent.
    pub slack: Option<f64>,
    /// Also iterate upward from the lower bound and compare limits.
    pub probe_lower: bool,
    /// Stopping tolerance for the upper-bound series increments.
    pub bound_tol: f64,
    pub bound_max_terms: usize,
    pub neumann: NeumannOptions,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-9,
            max_iters: 10_000,
            slack: None,
            probe_lower: false,
            bound_tol: 1e-13,
            bound_max_terms: 100_000,
            neumann: NeumannOptions::default(),
        }
    }
}

/// Pilot refinements are skipped when the refined kernel would exceed this many pairs.
const PILOT_PAIR_LIMIT: usize = 4_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub iterations: usize,
    /// Sup distance between the limits reached from above and from below.
    pub sup_diff: f64,
    pub agrees: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// `||T v - v||` at the returned solution.
    pub residual: f64,
    pub last_step: f64,
    pub monotone: bool,
    pub max_increase: f64,
    pub bounds_respected: bool,
    pub slack: f64,
    pub slack_source: String,
    /// Constant added to the series bound to make it a grid supersolution.
    pub upper_shift: f64,
    pub bound_terms: usize,
    pub lower_probe: Option<ProbeReport>,
}

/// Series upper bound together with its diagnostics.
#[derive(Debug, Clone)]
pub struct UpperBound {
    pub v: GridFn,
    pub terms: usize,
    pub shift: f64,
}

/// The robust recursion discretized on a grid.
#[derive(Debug, Clone)]
pub struct RobustProblem {
    model: Arc<dyn BenchmarkModel>,
    prefs: Preferences,
    u: UtilityGrowth,
    rule: GaussHermiteRule,
    kernel: Arc<GridKernel>,
    u_pairs: Arc<Vec<f64>>,
}

impl RobustProblem {
    pub fn new(model: Arc<dyn BenchmarkModel>, prefs: Preferences, u: UtilityGrowth, spec: &GridSpec) -> Result<Self> {
        let grid = spec.build(model.as_ref())?;
        let rule = spec.rule()?;
        RobustProblem::on_grid(model, prefs, u, grid, &rule, spec.interp, spec.extrap)
    }

    pub fn on_grid(
        model: Arc<dyn BenchmarkModel>,
        prefs: Preferences,
        u: UtilityGrowth,
        grid: Arc<Grid>,
        rule: &GaussHermiteRule,
        interp: Interp,
        extrap: Extrap,
    ) -> Result<Self> {
        if let Some(d) = u.affine_dim() {
            if d != model.dim() {
                return Err(Error::invalid(format!(
                    "utility has dimension {d}, model has dimension {}",
                    model.dim()
                )));
            }
        }
        let kernel = Arc::new(GridKernel::build(model.as_ref(), grid, rule, interp, extrap)?);
        let u_pairs = kernel.pair_values(|x, y| u.eval(x, y));
        if let Some(q) = u_pairs.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("utility is not finite at {:?}", kernel.point(q))));
        }
        Ok(RobustProblem {
            model,
            prefs,
            u,
            rule: rule.clone(),
            kernel,
            u_pairs: Arc::new(u_pairs),
        })
    }

    /// Same grid and utility with different preferences.
    pub fn with_prefs(&self, prefs: Preferences) -> Self {
        RobustProblem {
            prefs,
            ..self.clone()
        }
    }

    /// Same grid, preferences and utility under another benchmark model.
    pub fn with_model(&self, model: Arc<dyn BenchmarkModel>) -> Result<Self> {
        RobustProblem::on_grid(
            model,
            self.prefs,
            self.u.clone(),
            self.kernel.grid().clone(),
            &self.rule,
            self.kernel.interp(),
            self.kernel.extrap(),
        )
    }

    pub fn model(&self) -> &Arc<dyn BenchmarkModel> {
        &self.model
    }

    pub fn prefs(&self) -> Preferences {
        self.prefs
    }

    pub fn utility(&self) -> &UtilityGrowth {
        &self.u
    }

    pub fn rule(&self) -> &GaussHermiteRule {
        &self.rule
    }

    pub fn kernel(&self) -> &Arc<GridKernel> {
        &self.kernel
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.kernel.grid()
    }

    /// Utility at every stored (node, quadrature point) pair.
    pub fn u_pairs(&self) -> &[f64] {
        &self.u_pairs
    }

    fn scaled_u(&self, c: f64) -> Vec<f64> {
        self.u_pairs.iter().map(|u| c * u).collect()
    }

    fn check_fn(&self, f: &GridFn) -> Result<()> {
        if f.grid().as_ref() != self.grid().as_ref() {
            return Err(Error::invalid("grid function lives on a different grid"));
        }
        Ok(())
    }

    pub fn grid_fn(&self, values: Vec<f64>) -> Result<GridFn> {
        self.kernel.grid_fn(values)
    }

    /// `T f` on node values.
    pub fn apply_t_values(&self, f: &[f64]) -> Result<Vec<f64>> {
        let au = self.scaled_u(self.prefs.alpha);
        self.apply_with(&au, f)
    }

    fn apply_with(&self, au: &[f64], f: &[f64]) -> Result<Vec<f64>> {
        if let Some(i) = f.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("iterate is not finite at node {:?}", self.grid().point(i))));
        }
        let b = self.prefs.beta;
        Ok(self.kernel.log_expect_exp(f, Some(au))?.into_iter().map(|l| b * l).collect())
    }

    pub fn apply_t(&self, f: &GridFn) -> Result<GridFn> {
        self.check_fn(f)?;
        self.grid_fn(self.apply_t_values(f.values())?)
    }

    /// Series bound `(1 - beta) sum_i beta^(i+1) log E[exp(alpha u / (1 - beta)) at horizon i | x]`,
    /// shifted if needed so that `T vbar <= vbar` holds on the grid.
    pub fn upper_bound_v(&self, opts: &SolveOptions) -> Result<UpperBound> {
        let b = self.prefs.beta;
        let c = self.prefs.alpha / (1.0 - b);
        let zeros = vec![0.0; self.kernel.len()];
        let cu = self.scaled_u(c);
        let moment_err = |e: Error| match e {
            Error::Domain(msg) => {
                Error::MomentCondition(format!("exponential moment of the scaled utility diverges: {msg}"))
            }
            other => other,
        };
        let mut ell = self.kernel.log_expect_exp(&zeros, Some(&cu)).map_err(moment_err)?;
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
            let next = self.kernel.log_expect_exp(&ell, None).map_err(moment_err)?;
            disc *= b;
            terms += 1;
            let step = sup_diff(&next, &ell);
            let scale = 1.0 + sup_norm(&next);
            ell = next;
            if step <= opts.bound_tol * scale {
                // remaining horizons repeat the current term
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
        let t = self.apply_t_values(&acc)?;
        let excess = t.iter().zip(&acc).fold(0.0f64, |m, (t, v)| m.max(t - v));
        let shift = if excess > 0.0 { excess / (1.0 - b) } else { 0.0 };
        for a in acc.iter_mut() {
            *a += shift;
        }
        Ok(UpperBound {
            v: self.grid_fn(acc)?,
            terms,
            shift,
        })
    }

    /// `(I - beta E)^{-1} beta E[alpha u]`.
    pub fn lower_bound_v(&self, opts: &SolveOptions) -> Result<GridFn> {
        let b = self.prefs.beta;
        let rhs: Vec<f64> = self
            .kernel
            .expect_pairs(&self.scaled_u(self.prefs.alpha))
            .into_iter()
            .map(|e| b * e)
            .collect();
        let sol = neumann_solve(
            |f| self.kernel.expect(f).into_iter().map(|e| b * e).collect(),
            &rhs,
            opts.neumann,
        )?;
        self.grid_fn(sol.values)
    }

    /// Interpolation slack from comparing upper bounds on this grid and a refined one.
    pub fn pilot_slack(&self, opts: &SolveOptions, vbar: &GridFn) -> Result<(f64, String)> {
        let floor = 1e-12 * (1.0 + vbar.sup_norm());
        let fine_grid = Arc::new(self.grid().refined());
        let per_node = self.kernel.n_pairs() as f64 / self.kernel.len() as f64;
        if fine_grid.len() as f64 * per_node > PILOT_PAIR_LIMIT as f64 {
            return Ok((floor.max(100.0 * opts.tol), "floor".into()));
        }
        let fine = RobustProblem::on_grid(
            self.model.clone(),
            self.prefs,
            self.u.clone(),
            fine_grid.clone(),
            &self.rule,
            self.kernel.interp(),
            self.kernel.extrap(),
        )?;
        let fine_bar = fine.upper_bound_v(opts)?;
        let mut err = 0.0f64;
        for (i, fv) in fine_bar.v.values().iter().enumerate() {
            err = err.max((vbar.eval(&fine_grid.point(i))? - fv).abs());
        }
        Ok(((10.0 * err).max(floor), "pilot".into()))
    }

    /// Monotone iteration from the upper bound.
    pub fn solve_v(&self, opts: &SolveOptions) -> Result<(GridFn, SolveReport)> {
        let upper = self.upper_bound_v(opts)?;
        let lower = self.lower_bound_v(opts)?;
        let (slack, slack_source) = match opts.slack {
            Some(s) => (s, "fixed".to_string()),
            None => self.pilot_slack(opts, &upper.v)?,
        };
        let au = self.scaled_u(self.prefs.alpha);
        let mut v = upper.v.values().to_vec();
        let mut max_increase = f64::NEG_INFINITY;
        let mut iterations = 0;
        let mut step = f64::INFINITY;
        while step >= opts.tol {
            if iterations >= opts.max_iters {
                return Err(Error::NonConvergence {
                    iterations,
                    residual: step,
                });
            }
            let next = self.apply_with(&au, &v)?;
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
        let tv = self.apply_with(&au, &v)?;
        let residual = sup_diff(&tv, &v);
        let bounds_respected = v
            .iter()
            .zip(lower.values())
            .zip(upper.v.values())
            .all(|((v, lo), hi)| *v >= lo - slack && *v <= hi + slack);
        let lower_probe = if opts.probe_lower {
            Some(self.probe_from_below(&au, lower.values().to_vec(), &v, opts)?)
        } else {
            None
        };
        let report = SolveReport {
            iterations,
            residual,
            last_step: step,
            monotone: max_increase <= slack,
            max_increase: max_increase.max(0.0),
            bounds_respected,
            slack,
            slack_source,
            upper_shift: upper.shift,
            bound_terms: upper.terms,
            lower_probe,
        };
        Ok((self.grid_fn(v)?, report))
    }

    fn probe_from_below(&self, au: &[f64], mut w: Vec<f64>, v: &[f64], opts: &SolveOptions) -> Result<ProbeReport> {
        let mut iterations = 0;
        let mut step = f64::INFINITY;
        while step >= opts.tol && iterations < opts.max_iters {
            let next = self.apply_with(au, &w)?;
            step = sup_diff(&next, &w);
            w = next;
            iterations += 1;
        }
        let d = sup_diff(&w, v);
        Ok(ProbeReport {
            iterations,
            sup_diff: d,
            agrees: d < 10.0 * opts.tol / (1.0 - self.prefs.beta),
        })
    }
}

/// Closed-form affine solution of the linear-Gaussian case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LgClosedForm {
    pub a: f64,
    pub b: Vec<f64>,
    /// Mean of the shock intercept under the worst-case law.
    pub mu_star: Vec<f64>,
}

impl LgClosedForm {
    pub fn value(&self, x: &[f64]) -> f64 {
        self.a + self.b.iter().zip(x).map(|(b, x)| b * x).sum::<f64>()
    }
}

/// `v(x) = a + b'x` for affine utility under a linear-Gaussian benchmark.
pub fn lg_closed_form(model: &LgModel, prefs: Preferences, u: &UtilityGrowth) -> Result<LgClosedForm> {
    let UtilityGrowth::Affine { a0, lambda0, lambda1 } = u else {
        return Err(Error::invalid("closed form needs affine utility"));
    };
    let d = model.mu().len();
    if lambda0.len() != d {
        return Err(Error::invalid("utility coefficients do not match the model dimension"));
    }
    let (al, be) = (prefs.alpha(), prefs.beta());
    let l0 = DVector::from_column_slice(lambda0);
    let l1 = DVector::from_column_slice(lambda1);
    let at = model.a().transpose();
    let lhs = DMatrix::<f64>::identity(d, d) - &at * be;
    let b = lhs
        .lu()
        .solve(&((&l0 + &at * &l1) * (al * be)))
        .ok_or_else(|| Error::Numerical("I - beta A' is singular".into()))?;
    let g = &l1 * al + &b;
    let cov = model.shock_cov();
    let shift = &cov * &g;
    let a = be / (1.0 - be) * (al * a0 + g.dot(model.mu()) + 0.5 * g.dot(&shift));
    Ok(LgClosedForm {
        a,
        b: b.iter().copied().collect(),
        mu_star: (model.mu() + shift).iter().copied().collect(),
    })
}

/// Worst-case change of measure `m(x, x') = exp(v(x') + alpha u(x, x') - v(x) / beta)`.
#[derive(Debug, Clone)]
pub struct Distortion {
    problem: RobustProblem,
    v: GridFn,
    log_m: Vec<f64>,
    m: Vec<f64>,
}

/// Continuation entropy and its consistency diagnostics.
#[derive(Debug, Clone)]
pub struct EntropyReport {
    pub gamma: GridFn,
    pub chi: GridFn,
    pub terms: usize,
    /// Sup residual of the entropy recursion over interior nodes.
    pub recursion_residual: f64,
    /// Sup distance to a dense linear solve, when the grid is small enough.
    pub dense_diff: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusEstimate {
    pub radius: f64,
    pub iterations: usize,
    pub unstable: bool,
}

/// Largest grid size for which the entropy solve is cross-checked densely.
const DENSE_CHECK_LIMIT: usize = 2_000;

impl Distortion {
    pub fn new(problem: &RobustProblem, v: GridFn) -> Result<Self> {
        problem.check_fn(&v)?;
        let k = problem.kernel();
        let vp = k.interp_all(v.values());
        let (al, be) = (problem.prefs.alpha, problem.prefs.beta);
        let mut log_m = vec![0.0; k.n_pairs()];
        for i in 0..k.len() {
            let vi = v.values()[i] / be;
            for q in k.range(i) {
                log_m[q] = vp[q] + al * problem.u_pairs[q] - vi;
            }
        }
        let m = log_m.iter().map(|l| l.exp()).collect();
        Ok(Distortion {
            problem: problem.clone(),
            v,
            log_m,
            m,
        })
    }

    pub fn problem(&self) -> &RobustProblem {
        &self.problem
    }

    pub fn value(&self) -> &GridFn {
        &self.v
    }

    /// `log m` at every stored pair.
    pub fn log_m(&self) -> &[f64] {
        &self.log_m
    }

    pub fn m(&self) -> &[f64] {
        &self.m
    }

    /// `m(x, x')` at arbitrary points, via interpolated `v`.
    pub fn eval(&self, x: &[f64], x_next: &[f64]) -> Result<f64> {
        self.log_eval(x, x_next).map(f64::exp)
    }

    pub fn log_eval(&self, x: &[f64], x_next: &[f64]) -> Result<f64> {
        let p = &self.problem.prefs;
        Ok(self.v.eval(x_next)? + p.alpha * self.problem.u.eval(x, x_next) - self.v.eval(x)? / p.beta)
    }

    /// `E[m | x]` at each node.
    pub fn normalization(&self) -> Vec<f64> {
        self.problem.kernel.expect_pairs(&self.m)
    }

    /// Worst-case expectation `E[m f(X') | x]` of grid values.
    pub fn expect_v(&self, values: &[f64]) -> Vec<f64> {
        self.problem.kernel.expect_weighted(&self.m, values)
    }

    /// Worst-case expectation of pair values.
    pub fn expect_v_pairs(&self, pairs: &[f64]) -> Vec<f64> {
        let prod: Vec<f64> = pairs.iter().zip(&self.m).map(|(g, m)| g * m).collect();
        self.problem.kernel.expect_pairs(&prod)
    }

    /// `f -> beta E_v[f]`.
    pub fn apply_d(&self, values: &[f64]) -> Vec<f64> {
        let b = self.problem.prefs.beta;
        self.expect_v(values).into_iter().map(|e| b * e).collect()
    }

    /// Discounted conditional entropy `beta E_v[log m | x]`.
    pub fn chi(&self) -> Vec<f64> {
        let b = self.problem.prefs.beta;
        self.expect_v_pairs(&self.log_m).into_iter().map(|e| b * e).collect()
    }

    /// Solves `(I - beta E_v) Gamma = chi` and checks the recursion.
    pub fn continuation_entropy(&self, opts: &NeumannOptions) -> Result<EntropyReport> {
        let chi = self.chi();
        let sol = neumann_solve(|f| self.apply_d(f), &chi, *opts).map_err(|e| match e {
            Error::Divergence(msg) => Error::Divergence(format!(
                "entropy series diverged, the worst-case operator is not stable on this grid: {msg}"
            )),
            other => other,
        })?;
        let gamma = sol.values;
        let b = self.problem.prefs.beta;
        let k = &self.problem.kernel;
        let gp = k.interp_all(&gamma);
        let pairs: Vec<f64> = gp
            .iter()
            .zip(&self.log_m)
            .zip(&self.m)
            .map(|((g, l), m)| m * (g + l))
            .collect();
        let rec = k.expect_pairs(&pairs);
        let recursion_residual = k
            .interior_nodes()
            .into_iter()
            .map(|i| (gamma[i] - b * rec[i]).abs())
            .fold(0.0, f64::max);
        let dense_diff = if k.len() <= DENSE_CHECK_LIMIT {
            let dense = self.dense_entropy(&chi)?;
            Some(sup_diff(&dense, &gamma))
        } else {
            None
        };
        Ok(EntropyReport {
            gamma: self.problem.grid_fn(gamma)?,
            chi: self.problem.grid_fn(chi)?,
            terms: sol.terms,
            recursion_residual,
            dense_diff,
        })
    }

    /// `(I - beta E_v)^{-1} rhs` by a dense LU solve.
    pub fn dense_resolvent(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let k = self.problem.kernel.dense_matrix(Some(&self.m))? * self.problem.prefs.beta;
        dense_resolvent_solve(&k, rhs)
    }

    fn dense_entropy(&self, chi: &[f64]) -> Result<Vec<f64>> {
        self.dense_resolvent(chi)
    }

    /// Power-iteration estimate of the spectral radius of `beta E_v` on the grid.
    pub fn subgradient_radius(&self, iters: usize) -> RadiusEstimate {
        let grid = self.problem.grid();
        let (lo, hi) = (grid.axis(0)[0], *grid.axis(0).last().expect("non-empty axis"));
        let mut h: Vec<f64> = (0..grid.len())
            .map(|i| 1.0 + (grid.point(i)[0] - lo) / (hi - lo))
            .collect();
        let mut radius = 0.0;
        let mut done = 0;
        for it in 0..iters.max(1) {
            let norm = sup_norm(&h);
            if norm == 0.0 {
                radius = 0.0;
                break;
            }
            for x in h.iter_mut() {
                *x /= norm;
            }
            let next = self.apply_d(&h);
            radius = sup_norm(&next);
            h = next;
            done = it + 1;
        }
        RadiusEstimate {
            radius,
            iterations: done,
            unstable: radius >= 1.0,
        }
    }
}

/// Monte Carlo Luxemburg norm of a pair function under the stationary pair law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrliczReport {
    pub norm: f64,
    /// Norm estimated from the first half of the sample.
    pub half_sample_norm: f64,
    /// Fitted exponent `k` in `-log P(|f| > t) ~ t^k` over the upper tail.
    pub tail_exponent: f64,
    pub infinite_flag: bool,
}

/// `inf { c : E exp(|f / c|^r) <= 2 }` estimated from stationary pairs.
pub fn orlicz_norm_mc(
    model: &dyn BenchmarkModel,
    f: impl Fn(&[f64], &[f64]) -> f64,
    r: f64,
    samples: usize,
    seed: u64,
) -> Result<OrliczReport> {
    if !(r >= 1.0) {
        return Err(Error::invalid(format!("Orlicz exponent must be at least 1, got {r}")));
    }
    if samples < 100 {
        return Err(Error::invalid("at least 100 samples are needed"));
    }
    let mut rng = rng_from_seed(seed);
    let mut vals = Vec::with_capacity(samples);
    for _ in 0..samples {
        let x = model.sample_stationary(&mut rng)?;
        let y = model.sample_next(&x, &mut rng);
        let v = f(&x, &y).abs();
        if !v.is_finite() {
            return Err(Error::domain(format!("function is not finite at ({x:?}, {y:?})")));
        }
        vals.push(v);
    }
    let norm = luxemburg(&vals, r);
    let half_sample_norm = luxemburg(&vals[..samples / 2], r);
    let tail_exponent = tail_exponent(&vals);
    let infinite_flag = norm > 0.0 && tail_exponent < (1.0 + r) / 2.0 - 0.1;
    Ok(OrliczReport {
        norm,
        half_sample_norm,
        tail_exponent,
        infinite_flag,
    })
}

fn log_mean_exp_pow(vals: &[f64], c: f64, r: f64) -> f64 {
    let e: Vec<f64> = vals.iter().map(|v| (v / c).powf(r)).collect();
    let m = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + (e.iter().map(|x| (x - m).exp()).sum::<f64>() / vals.len() as f64).ln()
}

fn luxemburg(vals: &[f64], r: f64) -> f64 {
    let top = vals.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return 0.0;
    }
    let target = 2f64.ln();
    let mut lo = 0.0;
    let mut hi = top;
    while log_mean_exp_pow(vals, hi, r) > target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= 0.0 || log_mean_exp_pow(vals, mid, r) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    hi
}

/// Slope of `log(-log S(t))` against `log t` between the 1% and 0.01% upper quantiles.
fn tail_exponent(vals: &[f64]) -> f64 {
    let mut s = vals.to_vec();
    s.sort_by(|a, b| b.partial_cmp(a).expect("finite values"));
    let n = s.len() as f64;
    let pts: Vec<(f64, f64)> = [1e-2, 3e-3, 1e-3, 3e-4, 1e-4]
        .iter()
        .filter(|p| *p * n >= 5.0)
        .filter_map(|&p| {
            let k = (p * n).round() as usize;
            let t = s[k.min(s.len() - 1)];
            (t > 0.0).then(|| (t.ln(), (-(p as f64).ln()).ln()))
        })
        .collect();
    if pts.len() < 2 {
        return f64::INFINITY;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return f64::INFINITY;
    }
    pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx
}

/// Evaluates `v` at every node in parallel; handy for oracle comparisons.
pub fn tabulate(grid: &Arc<Grid>, f: impl Fn(&[f64]) -> f64 + Sync) -> Vec<f64> {
    (0..grid.len()).into_par_iter().map(|i| f(&grid.point(i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ArgModel;
    use approx::assert_abs_diff_eq;

    fn lg_problem(a: f64, nodes: usize) -> (LgModel, RobustProblem) {
        let m = LgModel::scalar(0.0, a, 1.0).unwrap();
        let prefs = Preferences::from_alpha(-1.0, 0.5).unwrap();
        let u = UtilityGrowth::affine(0.0, vec![0.0], vec![1.0]).unwrap();
        let spec = GridSpec {
            nodes,
            extrap: Extrap::Linear,
            ..GridSpec::default()
        };
        let p = RobustProblem::new(Arc::new(m.clone()), prefs, u, &spec).unwrap();
        (m, p)
    }

    #[test]
    fn preferences_bijection() {
        let p = Preferences::new(0.9, 2.0).unwrap();
        assert_abs_diff_eq!(p.alpha(), -5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.theta(), 2.0, epsilon = 1e-12);
        assert!(Preferences::new(1.0, 2.0).is_err());
        assert!(Preferences::new(0.5, 0.0).is_err());
        assert_eq!(Preferences::new(0.5, f64::INFINITY).unwrap().alpha(), 0.0);
    }

    #[test]
    fn closed_form_examples() {
        let u = UtilityGrowth::affine(0.0, vec![0.0], vec![1.0]).unwrap();
        let p = Preferences::from_alpha(-1.0, 0.5).unwrap();
        let iid = lg_closed_form(&LgModel::scalar(0.0, 0.0, 1.0).unwrap(), p, &u).unwrap();
        assert_abs_diff_eq!(iid.a, 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(iid.b[0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(iid.mu_star[0], -1.0, epsilon = 1e-14);
        let ar = lg_closed_form(&LgModel::scalar(0.0, 0.5, 1.0).unwrap(), p, &u).unwrap();
        assert_abs_diff_eq!(ar.a, 8.0 / 9.0, epsilon = 1e-14);
        assert_abs_diff_eq!(ar.b[0], -1.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(ar.mu_star[0], -4.0 / 3.0, epsilon = 1e-14);
        let none = lg_closed_form(&LgModel::scalar(0.3, 0.5, 1.0).unwrap(), p.with_alpha(0.0).unwrap(), &u).unwrap();
        assert_eq!((none.a, none.b[0], none.mu_star[0]), (0.0, 0.0, 0.3));
    }

    #[test]
    fn operator_examples() {
        let (_, p) = lg_problem(0.0, 21);
        let half = GridFn::constant(p.grid().clone(), 0.5);
        for v in p.apply_t(&half).unwrap().values() {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-12);
        }
        let zero = p.with_prefs(p.prefs().with_alpha(0.0).unwrap());
        let z = GridFn::constant(p.grid().clone(), 0.0);
        assert!(zero.apply_t(&z).unwrap().sup_norm() < 1e-14);
    }

    #[test]
    fn bounds_in_iid_case() {
        let (_, p) = lg_problem(0.0, 21);
        let opts = SolveOptions::default();
        let up = p.upper_bound_v(&opts).unwrap();
        // beta log E[exp(alpha X' / (1 - beta))] = 0.5 * 0.5 * 4
        for v in up.v.values() {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-10);
        }
        let lo = p.lower_bound_v(&opts).unwrap();
        for v in lo.values() {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn solves_lg_examples() {
        for a in [0.0, 0.5] {
            let (m, p) = lg_problem(a, 61);
            let (v, rep) = p.solve_v(&SolveOptions::default()).unwrap();
            let cf = lg_closed_form(&m, p.prefs(), p.utility()).unwrap();
            let sd = (1.0 / (1.0 - a * a)).sqrt();
            for (i, x) in p.grid().points().iter().enumerate() {
                if x[0].abs() <= 3.0 * sd {
                    assert!((v.values()[i] - cf.value(x)).abs() < 1e-5, "{a} {x:?} {} {}", v.values()[i], cf.value(x));
                }
            }
            assert!(rep.monotone && rep.bounds_respected && rep.residual < 1e-9, "{rep:?}");
        }
    }

    #[test]
    fn distortion_and_entropy_for_ar_example() {
        let (_, p) = lg_problem(0.5, 61);
        let (v, _) = p.solve_v(&SolveOptions::default()).unwrap();
        let d = Distortion::new(&p, v).unwrap();
        for n in d.normalization() {
            assert_abs_diff_eq!(n, 1.0, epsilon = 1e-6);
        }
        let ent = d.continuation_entropy(&NeumannOptions::default()).unwrap();
        let sd = (4.0f64 / 3.0).sqrt();
        for (i, x) in p.grid().points().iter().enumerate() {
            if x[0].abs() <= 3.0 * sd {
                assert_abs_diff_eq!(ent.gamma.values()[i], 8.0 / 9.0, epsilon = 1e-6);
                assert_abs_diff_eq!(ent.chi.values()[i], 4.0 / 9.0, epsilon = 1e-6);
            }
        }
        assert!(ent.dense_diff.unwrap() < 1e-8);
        assert!(ent.recursion_residual < 1e-5);
        let r = d.subgradient_radius(200);
        assert!(r.radius > 0.0 && r.radius < 1.0);
    }

    #[test]
    fn iid_distortion_value() {
        let (_, p) = lg_problem(0.0, 61);
        let (v, _) = p.solve_v(&SolveOptions::default()).unwrap();
        let d = Distortion::new(&p, v).unwrap();
        assert_abs_diff_eq!(d.eval(&[0.3], &[0.0]).unwrap(), (-0.5f64).exp(), epsilon = 1e-9);
    }

    #[test]
    fn no_robustness_gives_unit_distortion() {
        let (_, p) = lg_problem(0.5, 31);
        let p = p.with_prefs(p.prefs().with_alpha(0.0).unwrap());
        let (v, _) = p.solve_v(&SolveOptions::default()).unwrap();
        assert!(v.sup_norm() < 1e-12);
        let d = Distortion::new(&p, v).unwrap();
        assert!(d.m().iter().all(|m| (m - 1.0).abs() < 1e-12));
        let ent = d.continuation_entropy(&NeumannOptions::default()).unwrap();
        assert!(ent.gamma.sup_norm() < 1e-12);
        assert_abs_diff_eq!(d.subgradient_radius(100).radius, 0.5, epsilon = 1e-8);
    }

    fn arg_problem() -> RobustProblem {
        let m = ArgModel::new(0.5, 1.0, 1.0).unwrap();
        let prefs = Preferences::from_alpha(-0.1, 0.9).unwrap();
        let u = UtilityGrowth::affine(0.0, vec![1.0], vec![0.0]).unwrap();
        let spec = GridSpec {
            extrap: Extrap::Linear,
            ..GridSpec::default()
        };
        RobustProblem::new(Arc::new(m), prefs, u, &spec).unwrap()
    }

    fn arg_roots() -> [(f64, f64); 2] {
        let (c1, c2, c3, al, be): (f64, f64, f64, f64, f64) = (0.5, 1.0, 1.0, -0.1, 0.9);
        let k = 1.0 - be * c1 * (c2 - al);
        let disc = (k * k - 4.0 * al * be * c1).sqrt();
        [(k - disc) / (2.0 * c1), (k + disc) / (2.0 * c1)].map(|b| (-be * c3 * (1.0 - b * c1).ln() / (1.0 - be), b))
    }

    #[test]
    fn arg_selects_the_stable_root() {
        let p = arg_problem();
        let [(a_lo, b_lo), (a_hi, b_hi)] = arg_roots();
        assert_abs_diff_eq!(b_lo, -0.15457, epsilon = 1e-5);
        assert_abs_diff_eq!(b_hi, 1.16457, epsilon = 1e-5);
        assert_abs_diff_eq!(a_lo, -0.670, epsilon = 1e-3);
        let (v, rep) = p.solve_v(&SolveOptions::default()).unwrap();
        assert!(rep.residual < 1e-9, "{rep:?}");
        for (i, x) in p.grid().points().iter().enumerate() {
            assert!((v.values()[i] - (a_lo + b_lo * x[0])).abs() < 1e-6);
        }
        let stable = Distortion::new(&p, v).unwrap().subgradient_radius(300);
        assert!(stable.radius < 1.0, "{stable:?}");
        let other = p.grid_fn(tabulate(p.grid(), |x| a_hi + b_hi * x[0])).unwrap();
        let unstable = Distortion::new(&p, other).unwrap().subgradient_radius(300);
        assert!(unstable.radius >= 1.0, "{unstable:?}");
    }

    #[test]
    fn orlicz_examples() {
        let m = LgModel::scalar(0.0, 0.0, 1.0).unwrap();
        let zero = orlicz_norm_mc(&m, |_, _| 0.0, 2.0, 1000, 1).unwrap();
        assert_eq!(zero.norm, 0.0);
        assert!(!zero.infinite_flag);
        let g = orlicz_norm_mc(&m, |_, y| y[0], 2.0, 400_000, 2).unwrap();
        assert!((g.norm - (8.0f64 / 3.0).sqrt()).abs() < 0.03, "{g:?}");
        assert!(!g.infinite_flag, "{g:?}");
        let arg = ArgModel::new(0.5, 1.0, 1.0).unwrap();
        let heavy = orlicz_norm_mc(&arg, |x, _| x[0], 1.5, 400_000, 3).unwrap();
        assert!(heavy.infinite_flag, "{heavy:?}");
    }
}
