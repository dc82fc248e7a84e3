//! Scores of alternative benchmark models, first-order value corrections and
//! local Lipschitz diagnostics.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::GridKernel;
use crate::models::{BenchmarkModel, LgModel};
use crate::numgrid::{log_sum_exp_weighted, sup_diff, sup_norm, Grid, GridFn, Interp, Extrap};
use crate::robust_solver::{Distortion, LgClosedForm, RobustProblem, SolveOptions};

/// Default truncation of the correction series.
pub const SERIES_TOL: f64 = 1e-10;
pub const SERIES_MAX_TERMS: usize = 200;

/// Log-likelihood ratio of an alternative model, its centered score and cumulant,
/// stored on the kernel's (node, quadrature point) pairs.
#[derive(Debug, Clone)]
pub struct ScorePair {
    kernel: Arc<GridKernel>,
    pub ell: Vec<f64>,
    pub eta: Vec<f64>,
    /// `log E[exp(eta) | x]` per node.
    pub kappa: Vec<f64>,
}

impl ScorePair {
    pub fn kernel(&self) -> &Arc<GridKernel> {
        &self.kernel
    }

    /// `E[eta | x]` per node; zero up to rounding by construction.
    pub fn centering(&self) -> Vec<f64> {
        self.kernel.expect_pairs(&self.eta)
    }

    /// The same score multiplied by `s`.
    pub fn scaled(&self, s: f64) -> ScorePair {
        let ell: Vec<f64> = self.ell.iter().map(|l| s * l).collect();
        let eta: Vec<f64> = self.eta.iter().map(|e| s * e).collect();
        let kappa = cumulant(&self.kernel, &eta);
        ScorePair {
            kernel: self.kernel.clone(),
            ell,
            eta,
            kappa,
        }
    }
}

fn cumulant(k: &GridKernel, eta: &[f64]) -> Vec<f64> {
    (0..k.len())
        .into_par_iter()
        .map(|i| {
            let r = k.range(i);
            log_sum_exp_weighted(&k.weights()[r.clone()], &eta[r])
        })
        .collect()
}

/// Score of `qhat` relative to `q` on the pairs of `kernel`, which must be built from `q`.
pub fn score_from_models(kernel: Arc<GridKernel>, q: &dyn BenchmarkModel, qhat: &dyn BenchmarkModel) -> Result<ScorePair> {
    let ell = kernel.pair_values(|x, y| qhat.cond_log_density(y, x) - q.cond_log_density(y, x));
    if let Some(pos) = ell.iter().position(|l| !l.is_finite()) {
        let node = (0..kernel.len()).find(|&i| kernel.range(i).contains(&pos)).unwrap_or(0);
        return Err(Error::AbsoluteContinuity(format!(
            "density ratio is zero or undefined at state {:?}, next state {:?}",
            kernel.grid().point(node),
            kernel.point(pos)
        )));
    }
    let mean = kernel.expect_pairs(&ell);
    let mut eta = ell.clone();
    for (i, m) in mean.iter().enumerate() {
        for q in kernel.range(i) {
            eta[q] -= m;
        }
    }
    let kappa = cumulant(&kernel, &eta);
    Ok(ScorePair { kernel, ell, eta, kappa })
}

#[derive(Debug, Clone)]
pub struct FirstOrder {
    pub correction: GridFn,
    pub terms: usize,
    pub last_term_norm: f64,
}

/// `sum_{n >= 1} (beta E_v)^n eta`: the first term integrates the pair score,
/// later terms iterate `beta E_v` on the previous term.
pub fn first_order_v(dist: &Distortion, score: &ScorePair, max_terms: usize) -> Result<FirstOrder> {
    if score.eta.len() != dist.m().len() {
        return Err(Error::invalid("score and distortion live on different kernels"));
    }
    let b = dist.problem().prefs().beta();
    let mut term: Vec<f64> = dist.expect_v_pairs(&score.eta).into_iter().map(|e| b * e).collect();
    let mut acc = term.clone();
    let mut terms = 1;
    let mut norm = sup_norm(&term);
    let mut prev = f64::INFINITY;
    while norm >= SERIES_TOL && terms < max_terms {
        term = dist.apply_d(&term);
        terms += 1;
        prev = norm;
        norm = sup_norm(&term);
        for (a, t) in acc.iter_mut().zip(&term) {
            *a += t;
        }
    }
    if norm >= SERIES_TOL && norm >= prev {
        return Err(Error::Divergence(format!(
            "correction terms stopped decaying after {terms} terms (last norm {norm:e})"
        )));
    }
    Ok(FirstOrder {
        correction: dist.problem().grid_fn(acc)?,
        terms,
        last_term_norm: norm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEntry {
    /// `||T_hat v - v||`.
    pub operator_gap: f64,
    /// `||v_hat - v||`.
    pub value_gap: f64,
    pub ratio: f64,
    /// Share of nodes where both gaps have the same sign.
    pub sign_agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub entries: Vec<LipschitzEntry>,
    pub max_ratio: f64,
    pub min_ratio: f64,
    pub blowup: bool,
}

/// Ratio above which the probe flags a blow-up.
const BLOWUP_RATIO: f64 = 1e3;

/// Compares the one-step gap `T_hat v - v` with the solved gap `v_hat - v` for each alternative model.
pub fn lipschitz_probe(
    problem: &RobustProblem,
    v: &GridFn,
    perturbations: &[Arc<dyn BenchmarkModel>],
    opts: &SolveOptions,
) -> Result<LipschitzReport> {
    let mut entries = Vec::with_capacity(perturbations.len());
    // gaps at the level of the solver tolerance count as zero
    let noise = 10.0 * opts.tol / (1.0 - problem.prefs().beta());
    for q in perturbations {
        let alt = problem.with_model(q.clone())?;
        let tv = alt.apply_t_values(v.values())?;
        let (vhat, _) = alt.solve_v(opts)?;
        let op: Vec<f64> = tv.iter().zip(v.values()).map(|(a, b)| a - b).collect();
        let dv: Vec<f64> = vhat.values().iter().zip(v.values()).map(|(a, b)| a - b).collect();
        let (operator_gap, value_gap) = (sup_norm(&op), sup_norm(&dv));
        let ratio = if operator_gap <= noise && value_gap <= noise {
            1.0
        } else {
            value_gap / operator_gap
        };
        let tiny = 1e-12 * (1.0 + v.sup_norm());
        let agree = op
            .iter()
            .zip(&dv)
            .filter(|(a, b)| (a.abs() < tiny || b.abs() < tiny) || a.signum() == b.signum())
            .count();
        entries.push(LipschitzEntry {
            operator_gap,
            value_gap,
            ratio,
            sign_agreement: agree as f64 / op.len().max(1) as f64,
        });
    }
    let max_ratio = entries.iter().map(|e| e.ratio).fold(f64::NEG_INFINITY, f64::max);
    let min_ratio = entries.iter().map(|e| e.ratio).fold(f64::INFINITY, f64::min);
    let blowup = entries
        .iter()
        .any(|e| !e.ratio.is_finite() || e.ratio > BLOWUP_RATIO || e.ratio < 1.0 / BLOWUP_RATIO);
    Ok(LipschitzReport {
        entries,
        max_ratio,
        min_ratio,
        blowup,
    })
}

/// Gaussian AR(1) log-volatility `h' = rho h + sigma w`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogVolAr1 {
    pub rho: f64,
    pub sigma: f64,
}

impl LogVolAr1 {
    /// `E[exp(-h_{t+i}) | h_t = h]`.
    pub fn expected_inverse_variance(&self, h: f64, i: usize) -> f64 {
        let r = self.rho;
        let var = if (r * r - 1.0).abs() < 1e-14 {
            self.sigma * self.sigma * i as f64
        } else {
            self.sigma * self.sigma * (1.0 - r.powi(2 * i as i32)) / (1.0 - r * r)
        };
        (-r.powi(i as i32) * h + 0.5 * var).exp()
    }
}

/// First-order value of the linear-Gaussian model when shocks are scaled by
/// `exp(h / 2)`, tabulated on a grid over `(x, h)` with `h` last.
pub fn sv_perturbation(
    closed: &LgClosedForm,
    lg: &LgModel,
    h: &LogVolAr1,
    beta: f64,
    grid: Arc<Grid>,
    max_terms: usize,
) -> Result<GridFn> {
    let d = lg.dim();
    if grid.dims() != d + 1 {
        return Err(Error::invalid(format!(
            "grid must have {} dimensions (state then log-volatility)",
            d + 1
        )));
    }
    let shift: Vec<f64> = closed.mu_star.iter().zip(lg.mu().iter()).map(|(s, m)| s - m).collect();
    let cov: DMatrix<f64> = lg.shock_cov();
    let inv = cov
        .try_inverse()
        .ok_or_else(|| Error::Numerical("shock covariance is singular".into()))?;
    let dv = nalgebra::DVector::from_column_slice(&shift);
    let quad = (dv.transpose() * inv * &dv)[(0, 0)];
    let values = grid
        .points()
        .par_iter()
        .map(|z| {
            let h0 = z[d];
            let mut sum = 0.0;
            let mut disc = 1.0;
            for i in 0..max_terms {
                let term = disc * (h.expected_inverse_variance(h0, i) - 1.0);
                sum += term;
                disc *= beta;
                if term.abs() < 1e-14 * (1.0 + sum.abs()) && disc < 1e-12 {
                    return Ok(closed.value(&z[..d]) - 0.5 * beta * sum * quad);
                }
            }
            Err(Error::NonConvergence {
                iterations: max_terms,
                residual: disc,
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    GridFn::new(grid, values, Interp::Multilinear, Extrap::Linear)
}

/// Sup distance between two first-order corrections; convenience for order checks.
pub fn remainder(exact: &GridFn, base: &GridFn, approx: &GridFn) -> f64 {
    let diff: Vec<f64> = exact.values().iter().zip(base.values()).map(|(a, b)| a - b).collect();
    sup_diff(&diff, approx.values())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::UtilityGrowth;
    use crate::robust_solver::{lg_closed_form, GridSpec, Preferences};

    fn iid(mu: f64) -> Arc<dyn BenchmarkModel> {
        Arc::new(LgModel::scalar(mu, 0.0, 1.0).unwrap())
    }

    fn problem(model: Arc<dyn BenchmarkModel>) -> RobustProblem {
        RobustProblem::new(
            model,
            Preferences::from_alpha(-1.0, 0.5).unwrap(),
            UtilityGrowth::affine(0.0, vec![0.0], vec![1.0]).unwrap(),
            &GridSpec {
                nodes: 41,
                extrap: Extrap::Linear,
                ..GridSpec::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn identical_models_have_zero_score() {
        let p = problem(iid(0.0));
        let s = score_from_models(p.kernel().clone(), p.model().as_ref(), iid(0.0).as_ref()).unwrap();
        assert!(s.ell.iter().chain(&s.eta).chain(&s.kappa).all(|v| *v == 0.0));
        let (v, _) = p.solve_v(&SolveOptions::default()).unwrap();
        let d = Distortion::new(&p, v).unwrap();
        let fo = first_order_v(&d, &s, SERIES_MAX_TERMS).unwrap();
        assert!(fo.correction.values().iter().all(|c| *c == 0.0));
    }

    #[test]
    fn gaussian_mean_shift_score() {
        let eps = 0.1;
        let p = problem(iid(0.0));
        let s = score_from_models(p.kernel().clone(), p.model().as_ref(), iid(eps).as_ref()).unwrap();
        let k = p.kernel();
        for i in 0..k.len() {
            for q in k.range(i) {
                assert!((s.eta[q] - eps * k.point(q)[0]).abs() < 1e-10);
            }
            assert!((s.kappa[i] - eps * eps / 2.0).abs() < 1e-10);
        }
        assert!(sup_norm(&s.centering()) < 1e-8);
    }

    #[test]
    fn first_order_is_exact_for_iid_mean_shift() {
        let eps = 0.1;
        let p = problem(iid(0.0));
        let (v, _) = p.solve_v(&SolveOptions::default()).unwrap();
        let d = Distortion::new(&p, v.clone()).unwrap();
        let s = score_from_models(p.kernel().clone(), p.model().as_ref(), iid(eps).as_ref()).unwrap();
        let fo = first_order_v(&d, &s, SERIES_MAX_TERMS).unwrap();
        let (vhat, _) = p.with_model(iid(eps)).unwrap().solve_v(&SolveOptions::default()).unwrap();
        for ((c, a), b) in fo.correction.values().iter().zip(vhat.values()).zip(v.values()) {
            assert!((c + eps).abs() < 1e-8);
            assert!((a - b - c).abs() < 1e-8);
        }
    }

    #[test]
    fn lipschitz_ratios_are_bounded() {
        let p = problem(iid(0.0));
        let (v, _) = p.solve_v(&SolveOptions::default()).unwrap();
        let same = lipschitz_probe(&p, &v, &[iid(0.0)], &SolveOptions::default()).unwrap();
        assert_eq!(same.entries[0].ratio, 1.0);
        let alts: Vec<_> = [0.05, 0.1, 0.2].iter().map(|e| iid(*e)).collect();
        let r = lipschitz_probe(&p, &v, &alts, &SolveOptions::default()).unwrap();
        assert!(!r.blowup && r.max_ratio / r.min_ratio < 1.01, "{r:?}");
        assert!(r.entries.iter().all(|e| e.sign_agreement == 1.0));
    }

    #[test]
    fn volatility_correction() {
        let lg = LgModel::scalar(0.0, 0.5, 1.0).unwrap();
        let prefs = Preferences::from_alpha(-1.0, 0.5).unwrap();
        let u = UtilityGrowth::affine(0.0, vec![0.0], vec![1.0]).unwrap();
        let cf = lg_closed_form(&lg, prefs, &u).unwrap();
        let grid = Arc::new(Grid::uniform(&[(-2.0, 2.0), (-1.0, 1.0)], &[5, 9]).unwrap());
        let quad = (cf.mu_star[0] - 0.0).powi(2);

        let flat = sv_perturbation(&cf, &lg, &LogVolAr1 { rho: 0.0, sigma: 0.0 }, 0.5, grid.clone(), 1000).unwrap();
        for (i, z) in grid.points().iter().enumerate() {
            if z[1] == 0.0 {
                assert!((flat.values()[i] - cf.value(&z[..1])).abs() < 1e-14);
            }
        }
        let fixed = sv_perturbation(&cf, &lg, &LogVolAr1 { rho: 1.0, sigma: 0.0 }, 0.5, grid.clone(), 1000).unwrap();
        for (i, z) in grid.points().iter().enumerate() {
            let want = cf.value(&z[..1]) - 0.5 / (2.0 * 0.5) * ((-z[1]).exp() - 1.0) * quad;
            assert!((fixed.values()[i] - want).abs() < 1e-12);
        }
        let sv = sv_perturbation(&cf, &lg, &LogVolAr1 { rho: 0.9, sigma: 0.2 }, 0.5, grid.clone(), 1000).unwrap();
        for xi in 0..5 {
            let col: Vec<f64> = (0..9).map(|j| sv.values()[xi * 9 + j]).collect();
            assert!(col.windows(2).all(|w| w[1] > w[0]));
        }
    }
}
