//! Dynamic discrete choice with type-I extreme-value shocks on a continuous state.
//!
//! `v(x) = log sum_d exp(u_d(x) + beta E[f(X') | x, d]) + gamma_EM`.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::GridKernel;
use crate::models::{BenchmarkModel, LgModel};
use crate::numgrid::{fmt_f64, log_sum_exp_weighted, neumann_solve, sup_diff, sup_norm, Grid, GridFn};
use crate::robust_solver::{GridSpec, SolveOptions, SolveReport};

/// Euler–Mascheroni constant, the mean of a standard Gumbel shock.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

pub type StateUtility = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// One choice: its flow utility and the Gaussian law of the next state.
#[derive(Clone)]
pub struct DdcAction {
    pub name: String,
    pub utility: StateUtility,
    pub kernel: LgModel,
}

impl std::fmt::Debug for DdcAction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DdcAction")
            .field("name", &self.name)
            .field("kernel", &self.kernel)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub struct DdcModel {
    actions: Vec<DdcAction>,
    beta: f64,
}

impl DdcModel {
    pub fn new(actions: Vec<DdcAction>, beta: f64) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::invalid("a choice model needs at least one action"));
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::invalid(format!("beta must lie in (0, 1), got {beta}")));
        }
        let d = actions[0].kernel.dim();
        if actions.iter().any(|a| a.kernel.dim() != d) {
            return Err(Error::invalid("all action kernels must share the state dimension"));
        }
        Ok(DdcModel { actions, beta })
    }

    pub fn actions(&self) -> &[DdcAction] {
        &self.actions
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn dim(&self) -> usize {
        self.actions[0].kernel.dim()
    }

    /// Smallest box covering every action's default bounds.
    pub fn default_bounds(&self, span: f64) -> Result<Vec<(f64, f64)>> {
        let mut out: Option<Vec<(f64, f64)>> = None;
        for a in &self.actions {
            let b = a.kernel.default_bounds(span)?;
            out = Some(match out {
                None => b,
                Some(o) => o.iter().zip(&b).map(|(p, q)| (p.0.min(q.0), p.1.max(q.1))).collect(),
            });
        }
        Ok(out.expect("at least one action"))
    }
}

/// Serializable description of an action: affine utility and a Gaussian VAR kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdcActionSpec {
    pub name: String,
    #[serde(default)]
    pub a0: f64,
    #[serde(default)]
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    /// Row-major autoregression; zero for a renewal action.
    pub a: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdcSpec {
    pub beta: f64,
    pub actions: Vec<DdcActionSpec>,
}

fn matrix(rows: &[Vec<f64>], d: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid(format!("{what} must be {d} x {d}")));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

impl DdcSpec {
    pub fn build(&self) -> Result<DdcModel> {
        let actions = self
            .actions
            .iter()
            .map(|s| {
                let d = s.mu.len();
                if !s.lambda.is_empty() && s.lambda.len() != d {
                    return Err(Error::invalid(format!("action {}: utility slope has the wrong length", s.name)));
                }
                let kernel = LgModel::new(
                    DVector::from_column_slice(&s.mu),
                    matrix(&s.a, d, "autoregression")?,
                    matrix(&s.sigma, d, "shock loading")?,
                )?;
                let (a0, lambda) = (s.a0, s.lambda.clone());
                let utility: StateUtility =
                    Arc::new(move |x: &[f64]| a0 + lambda.iter().zip(x).map(|(l, x)| l * x).sum::<f64>());
                Ok(DdcAction {
                    name: s.name.clone(),
                    utility,
                    kernel,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        DdcModel::new(actions, self.beta)
    }
}

/// Conditional choice probabilities, one column of node values per action.
#[derive(Debug, Clone)]
pub struct Ccp {
    pub grid: Arc<Grid>,
    pub names: Vec<String>,
    pub probs: Vec<Vec<f64>>,
}

impl Ccp {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=self.grid.dims()).map(|k| format!("x{k}")).collect();
        header.extend(self.names.iter().map(|n| format!("p_{n}")));
        wtr.write_record(&header)?;
        for i in 0..self.grid.len() {
            let mut row: Vec<String> = self.grid.point(i).iter().map(|c| fmt_f64(*c)).collect();
            row.extend(self.probs.iter().map(|p| fmt_f64(p[i])));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Softmax whose left-to-right sum is exactly one in floating point.
fn softmax_exact(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    let top = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0);
    for _ in 0..8 {
        let total: f64 = p.iter().sum();
        if total == 1.0 {
            break;
        }
        p[top] += 1.0 - total;
    }
    p
}

/// Stationary law of the mixed kernel `D^{-1} sum_d M(.|x, d)`.
#[derive(Debug, Clone)]
pub struct StationaryReport {
    pub density: GridFn,
    pub iterations: usize,
    /// `min Q(x_j|x_i) / nu(x_j)` over nodes where the renewal density is non-negligible.
    pub minorization_ratio: f64,
    pub doeblin_holds: bool,
}

/// Choice model discretized on a grid.
#[derive(Debug, Clone)]
pub struct DdcProblem {
    model: DdcModel,
    grid: Arc<Grid>,
    kernels: Vec<GridKernel>,
    /// Flow utility at the nodes, per action.
    u: Vec<Vec<f64>>,
}

impl DdcProblem {
    pub fn new(model: DdcModel, spec: &GridSpec) -> Result<Self> {
        let d = model.dim();
        let bounds: Vec<(f64, f64)> = match &spec.bounds {
            Some(b) if b.len() == d => b.iter().map(|p| (p[0], p[1])).collect(),
            Some(b) => return Err(Error::invalid(format!("{} grid bounds given for dimension {d}", b.len()))),
            None => model.default_bounds(spec.span)?,
        };
        let counts = spec.counts.clone().unwrap_or_else(|| vec![spec.nodes; d]);
        let grid = Arc::new(Grid::uniform(&bounds, &counts)?);
        Self::on_grid(model, grid, spec)
    }

    pub fn on_grid(model: DdcModel, grid: Arc<Grid>, spec: &GridSpec) -> Result<Self> {
        let rule = spec.rule()?;
        let kernels = model
            .actions
            .iter()
            .map(|a| GridKernel::build(&a.kernel, grid.clone(), &rule, spec.interp, spec.extrap))
            .collect::<Result<Vec<_>>>()?;
        let points = grid.points();
        let u = model
            .actions
            .iter()
            .map(|a| {
                points
                    .iter()
                    .map(|x| {
                        let v = (a.utility)(x);
                        if v.is_finite() {
                            Ok(v)
                        } else {
                            Err(Error::domain(format!("utility of action {} is not finite at {x:?}", a.name)))
                        }
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DdcProblem { model, grid, kernels, u })
    }

    pub fn model(&self) -> &DdcModel {
        &self.model
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn kernels(&self) -> &[GridKernel] {
        &self.kernels
    }

    /// Flow utilities at the nodes, per action.
    pub fn flow_utilities(&self) -> &[Vec<f64>] {
        &self.u
    }

    pub fn grid_fn(&self, values: Vec<f64>) -> Result<GridFn> {
        self.kernels[0].grid_fn(values)
    }

    /// `u_d + beta E[f | x, d]` at every node, per action.
    pub fn choice_values(&self, f: &[f64]) -> Result<Vec<Vec<f64>>> {
        let b = self.model.beta;
        self.kernels
            .iter()
            .zip(&self.u)
            .enumerate()
            .map(|(d, (k, u))| {
                let e = k.expect(f);
                e.iter()
                    .zip(u)
                    .enumerate()
                    .map(|(i, (e, u))| {
                        if e.is_finite() {
                            Ok(u + b * e)
                        } else {
                            Err(Error::domain(format!(
                                "expected continuation is not finite at node {:?} for action {}",
                                self.grid.point(i),
                                self.model.actions[d].name
                            )))
                        }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn apply_values(&self, f: &[f64]) -> Result<Vec<f64>> {
        let z = self.choice_values(f)?;
        let ones = vec![1.0; z.len()];
        Ok((0..self.grid.len())
            .into_par_iter()
            .map(|i| {
                let zi: Vec<f64> = z.iter().map(|zd| zd[i]).collect();
                log_sum_exp_weighted(&ones, &zi) + EULER_GAMMA
            })
            .collect())
    }

    pub fn apply_bellman(&self, f: &GridFn) -> Result<GridFn> {
        self.grid_fn(self.apply_values(f.values())?)
    }

    /// `log D^{-1} sum_d E[exp(f(X')) | x, d]`.
    fn mixed_log_expect(&self, f: &[f64], add: Option<&[Vec<f64>]>) -> Result<Vec<f64>> {
        let per: Vec<Vec<f64>> = self
            .kernels
            .iter()
            .map(|k| k.log_expect_exp(f, None))
            .collect::<Result<_>>()?;
        let w = vec![1.0 / per.len() as f64; per.len()];
        Ok((0..self.grid.len())
            .map(|i| {
                let e: Vec<f64> = per
                    .iter()
                    .enumerate()
                    .map(|(d, p)| p[i] + add.map_or(0.0, |a| a[d][i]))
                    .collect();
                log_sum_exp_weighted(&w, &e)
            })
            .collect())
    }

    /// Series bound built from `U = D^{-1} sum_d exp(u_d / (1 - beta))` under the
    /// mixed kernel, shifted to a grid supersolution.
    pub fn upper_bound(&self, opts: &SolveOptions) -> Result<(Vec<f64>, usize, f64)> {
        let b = self.model.beta;
        let nd = self.model.n_actions() as f64;
        let w = vec![1.0 / nd; self.u.len()];
        let mut ell: Vec<f64> = (0..self.grid.len())
            .map(|i| {
                let e: Vec<f64> = self.u.iter().map(|u| u[i] / (1.0 - b)).collect();
                log_sum_exp_weighted(&w, &e)
            })
            .collect();
        let mut acc: Vec<f64> = ell.iter().map(|l| (1.0 - b) * l).collect();
        let mut disc = 1.0;
        let mut terms = 1;
        loop {
            if terms >= opts.bound_max_terms {
                return Err(Error::NonConvergence {
                    iterations: terms,
                    residual: sup_norm(&ell),
                });
            }
            let next = self.mixed_log_expect(&ell, None)?;
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::MomentCondition(
                    "exponential moment of discounted utility is not finite".into(),
                ));
            }
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
        let c = (nd.ln() + EULER_GAMMA) / (1.0 - b);
        let mut v: Vec<f64> = acc.into_iter().map(|a| a + c).collect();
        let t = self.apply_values(&v)?;
        let excess = t.iter().zip(&v).fold(0.0f64, |m, (t, v)| m.max(t - v));
        let shift = if excess > 0.0 { excess / (1.0 - b) } else { 0.0 };
        v.iter_mut().for_each(|x| *x += shift);
        Ok((v, terms, shift))
    }

    /// `(I - beta Q)^{-1}(mean_d u_d + log D + gamma_EM)` with the mixed kernel `Q`.
    pub fn lower_bound(&self, opts: &SolveOptions) -> Result<Vec<f64>> {
        let b = self.model.beta;
        let nd = self.model.n_actions() as f64;
        let rhs: Vec<f64> = (0..self.grid.len())
            .map(|i| self.u.iter().map(|u| u[i]).sum::<f64>() / nd + nd.ln() + EULER_GAMMA)
            .collect();
        let sol = neumann_solve(
            |f| {
                let mut out = vec![0.0; f.len()];
                for k in &self.kernels {
                    for (o, e) in out.iter_mut().zip(k.expect(f)) {
                        *o += b * e / nd;
                    }
                }
                out
            },
            &rhs,
            opts.neumann,
        )?;
        Ok(sol.values)
    }

    pub fn ccp(&self, v: &[f64]) -> Result<Ccp> {
        let z = self.choice_values(v)?;
        let nd = z.len();
        let mut probs = vec![vec![0.0; self.grid.len()]; nd];
        for i in 0..self.grid.len() {
            let zi: Vec<f64> = z.iter().map(|zd| zd[i]).collect();
            for (d, p) in softmax_exact(&zi).into_iter().enumerate() {
                probs[d][i] = p;
            }
        }
        Ok(Ccp {
            grid: self.grid.clone(),
            names: self.model.actions.iter().map(|a| a.name.clone()).collect(),
            probs,
        })
    }

    pub fn solve_ddc(&self, opts: &SolveOptions) -> Result<(GridFn, Ccp, SolveReport)> {
        let (upper, terms, shift) = self.upper_bound(opts)?;
        let lower = self.lower_bound(opts)?;
        let slack = opts.slack.unwrap_or(1e-12 * (1.0 + sup_norm(&upper)));
        let mut v = upper.clone();
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
            .zip(&lower)
            .zip(&upper)
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
        let ccp = self.ccp(&v)?;
        Ok((self.grid_fn(v)?, ccp, report))
    }

    /// Stationary density of the mixed kernel by power iteration on the grid,
    /// with trapezoid cell weights.
    pub fn renewal_stationary(&self, renewal_action: usize, tol: f64, max_iters: usize) -> Result<StationaryReport> {
        let action = self
            .model
            .actions
            .get(renewal_action)
            .ok_or_else(|| Error::invalid(format!("no action with index {renewal_action}")))?;
        if action.kernel.a().iter().any(|v| *v != 0.0) {
            return Err(Error::invalid(format!(
                "action {} has a state-dependent transition law",
                action.name
            )));
        }
        let n = self.grid.len();
        let nd = self.model.n_actions() as f64;
        let cell = trapezoid_weights(&self.grid);
        let points = self.grid.points();
        let x0 = &points[0];
        let nu: Vec<f64> = points.iter().map(|y| action.kernel.cond_density(y, x0)).collect();
        let rows: Vec<Vec<f64>> = points
            .par_iter()
            .map(|x| {
                points
                    .iter()
                    .map(|y| {
                        self.model
                            .actions
                            .iter()
                            .map(|a| a.kernel.cond_density(y, x))
                            .sum::<f64>()
                            / nd
                    })
                    .collect()
            })
            .collect();
        let nu_max = nu.iter().cloned().fold(0.0, f64::max);
        let mut ratio = f64::INFINITY;
        for row in &rows {
            for (q, nu_j) in row.iter().zip(&nu) {
                if *nu_j > 1e-10 * nu_max {
                    ratio = ratio.min(q / nu_j);
                }
            }
        }
        let mut p = DMatrix::<f64>::zeros(n, n);
        for (i, row) in rows.iter().enumerate() {
            let mass: f64 = row.iter().zip(&cell).map(|(q, c)| q * c).sum();
            if !(mass > 0.0) {
                return Err(Error::Numerical(format!("no transition mass on the grid from {:?}", points[i])));
            }
            for j in 0..n {
                p[(i, j)] = row[j] * cell[j] / mass;
            }
        }
        let pt = p.transpose();
        let mut pi = DVector::from_element(n, 1.0 / n as f64);
        for it in 1..=max_iters {
            let next = &pt * &pi;
            let diff = (&next - &pi).amax();
            pi = next;
            if diff < tol {
                let total: f64 = pi.sum();
                let density: Vec<f64> = pi.iter().zip(&cell).map(|(m, c)| m / total / c).collect();
                return Ok(StationaryReport {
                    density: self.grid_fn(density)?,
                    iterations: it,
                    minorization_ratio: ratio,
                    doeblin_holds: ratio >= 1.0 / nd - 1e-12,
                });
            }
        }
        Err(Error::NonConvergence {
            iterations: max_iters,
            residual: f64::NAN,
        })
    }
}

/// Product trapezoid weights of a tensor grid.
pub fn trapezoid_weights(grid: &Grid) -> Vec<f64> {
    let axis_w: Vec<Vec<f64>> = grid
        .axes()
        .iter()
        .map(|a| {
            (0..a.len())
                .map(|i| {
                    let left = if i > 0 { a[i] - a[i - 1] } else { 0.0 };
                    let right = if i + 1 < a.len() { a[i + 1] - a[i] } else { 0.0 };
                    0.5 * (left + right)
                })
                .collect()
        })
        .collect();
    (0..grid.len())
        .map(|i| {
            grid.multi_index(i)
                .iter()
                .enumerate()
                .map(|(k, &j)| axis_w[k][j])
                .product()
        })
        .collect()
}
