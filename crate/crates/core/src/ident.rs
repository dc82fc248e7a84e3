//! Derivatives of the Euler moment map in the preference parameters, the
//! local identification matrix, and the observational-equivalence
//! construction across robustness parameters.

use std::sync::Arc;

use nalgebra::{Matrix2, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{BenchmarkModel, TiltedModel};
use crate::numgrid::{neumann_solve, sup_diff, GaussHermiteRule, GridFn, NeumannOptions};
use crate::robust_solver::{Distortion, Preferences, SolveOptions};

pub type PairVector = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;

/// Vector of payoffs `g(x, x')`, typically gross returns deflated by consumption growth.
#[derive(Clone)]
pub struct MomentSpec {
    dim: usize,
    g: PairVector,
}

impl std::fmt::Debug for MomentSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MomentSpec").field("dim", &self.dim).finish_non_exhaustive()
    }
}

impl MomentSpec {
    pub fn new(dim: usize, g: PairVector) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("moment vector needs at least one component"));
        }
        Ok(MomentSpec { dim, g })
    }

    /// Components `exp(c_k + a_k' x + b_k' x')`.
    pub fn log_affine(c: Vec<f64>, a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> Result<Self> {
        if a.len() != c.len() || b.len() != c.len() {
            return Err(Error::invalid("log-affine payoff coefficients have inconsistent lengths"));
        }
        let dim = c.len();
        MomentSpec::new(
            dim,
            Arc::new(move |x, y| {
                (0..c.len())
                    .map(|k| {
                        let lin: f64 = a[k].iter().zip(x).map(|(a, x)| a * x).sum::<f64>()
                            + b[k].iter().zip(y).map(|(b, y)| b * y).sum::<f64>();
                        (c[k] + lin).exp()
                    })
                    .collect()
            }),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        (self.g)(x, y)
    }
}

/// Derivatives of `rho(alpha, beta; x)` at the solved value, one grid function per moment.
#[derive(Debug, Clone)]
pub struct RhoDerivatives {
    pub d_alpha: Vec<GridFn>,
    pub d_beta: Vec<GridFn>,
    /// Moment residual `E_v[beta g] - 1`.
    pub rho: Vec<GridFn>,
    pub dv_alpha: GridFn,
    pub dv_beta: GridFn,
    pub terms: usize,
    /// Sup distance of the value derivatives to a dense solve, on small grids.
    pub dense_diff: Option<f64>,
}

const DENSE_CHECK_LIMIT: usize = 2_000;

pub fn rho_derivatives(dist: &Distortion, g: &MomentSpec, opts: &NeumannOptions) -> Result<RhoDerivatives> {
    let p = dist.problem();
    let b = p.prefs().beta();
    let k = p.kernel();
    let v = dist.value().values();
    let rhs_a: Vec<f64> = dist.expect_v_pairs(p.u_pairs()).iter().map(|e| b * e).collect();
    let rhs_b: Vec<f64> = v.iter().map(|x| x / b).collect();
    let sa = neumann_solve(|f| dist.apply_d(f), &rhs_a, *opts)?;
    let sb = neumann_solve(|f| dist.apply_d(f), &rhs_b, *opts)?;
    let dense_diff = if k.len() <= DENSE_CHECK_LIMIT {
        let da = dist.dense_resolvent(&rhs_a)?;
        let db = dist.dense_resolvent(&rhs_b)?;
        Some(sup_diff(&da, &sa.values).max(sup_diff(&db, &sb.values)))
    } else {
        None
    };
    let gp: Vec<Vec<f64>> = {
        let all = k.pair_values_vec(|x, y| g.eval(x, y));
        (0..g.dim()).map(|c| all.iter().map(|row| row[c]).collect()).collect()
    };
    if gp.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::domain("payoff is not finite on the quadrature support"));
    }
    let ap = k.interp_all(&sa.values);
    let bp = k.interp_all(&sb.values);
    let u = p.u_pairs();
    let mut d_alpha = Vec::with_capacity(g.dim());
    let mut d_beta = Vec::with_capacity(g.dim());
    let mut rho = Vec::with_capacity(g.dim());
    for gc in &gp {
        let resid: Vec<f64> = gc.iter().map(|x| b * x - 1.0).collect();
        let pa: Vec<f64> = resid.iter().zip(u).zip(&ap).map(|((r, u), a)| r * (u + a)).collect();
        let pb: Vec<f64> = resid.iter().zip(&bp).map(|(r, d)| r * d).collect();
        d_alpha.push(p.grid_fn(dist.expect_v_pairs(&pa))?);
        d_beta.push(p.grid_fn(dist.expect_v_pairs(&pb).into_iter().map(|e| e + 1.0 / b).collect())?);
        rho.push(p.grid_fn(dist.expect_v_pairs(&resid))?);
    }
    Ok(RhoDerivatives {
        d_alpha,
        d_beta,
        rho,
        dv_alpha: p.grid_fn(sa.values)?,
        dv_beta: p.grid_fn(sb.values)?,
        terms: sa.terms.max(sb.terms),
        dense_diff,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentMatrix {
    pub matrix: [[f64; 2]; 2],
    /// Ascending.
    pub eigenvalues: [f64; 2],
    pub positive_definite: bool,
}

/// Relative eigenvalue threshold for positive definiteness.
pub const PD_THRESHOLD: f64 = 1e-8;

/// Stationary second-moment matrix of the two derivative vectors.
pub fn local_ident_matrix(model: &dyn BenchmarkModel, d: &RhoDerivatives, rule: &GaussHermiteRule) -> Result<IdentMatrix> {
    let nodes = model.stationary_nodes(rule)?;
    let mut m = [[0.0; 2]; 2];
    for (x, w) in nodes.iter() {
        for (da, db) in d.d_alpha.iter().zip(&d.d_beta) {
            let (a, b) = (da.eval(x)?, db.eval(x)?);
            m[0][0] += w * a * a;
            m[0][1] += w * a * b;
            m[1][1] += w * b * b;
        }
    }
    m[1][0] = m[0][1];
    let eig = SymmetricEigen::new(Matrix2::new(m[0][0], m[0][1], m[1][0], m[1][1])).eigenvalues;
    let (lo, hi) = if eig[0] <= eig[1] { (eig[0], eig[1]) } else { (eig[1], eig[0]) };
    Ok(IdentMatrix {
        matrix: m,
        eigenvalues: [lo, hi],
        positive_definite: hi > 0.0 && lo > PD_THRESHOLD * hi,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnderidentReport {
    pub theta0: f64,
    pub theta_alt: f64,
    /// Composite `alpha0 - alpha(theta_alt)` of the auxiliary recursion.
    pub alpha_shift: f64,
    /// Sup over grid and quadrature pairs of `|m_theta dQ_theta/dQ - m|`.
    pub discrepancy: f64,
    /// Sup distance between the value under the alternative benchmark and `v0 - w`.
    pub value_gap: f64,
    pub passes: bool,
}

/// Pass threshold for the change-of-measure discrepancy.
pub const UNDERIDENT_TOL: f64 = 1e-6;

/// Builds the alternative benchmark that, paired with robustness `theta_alt`,
/// reproduces the worst-case model of `dist`, and measures how closely it does.
pub fn underident_construct_check(dist: &Distortion, theta_alt: f64, opts: &SolveOptions) -> Result<UnderidentReport> {
    let p0 = dist.problem();
    let prefs0 = p0.prefs();
    let beta = prefs0.beta();
    let alt_prefs = Preferences::new(beta, theta_alt)?;
    let shift = prefs0.alpha() - alt_prefs.alpha();
    if shift == 0.0 {
        return Ok(UnderidentReport {
            theta0: prefs0.theta(),
            theta_alt,
            alpha_shift: 0.0,
            discrepancy: 0.0,
            value_gap: 0.0,
            passes: true,
        });
    }
    let aux = p0.with_prefs(Preferences::from_alpha(shift, beta)?);
    let (w, _) = aux.solve_v(opts)?;
    let w_tilt = w.clone();
    let u = p0.utility().clone();
    let tilt = move |x: &[f64], y: &[f64]| -> f64 {
        match (w_tilt.eval(y), w_tilt.eval(x)) {
            (Ok(wy), Ok(wx)) => wy + shift * u.eval(x, y) - wx / beta,
            _ => f64::NAN,
        }
    };
    let q_alt = TiltedModel::new(p0.model().clone(), Arc::new(tilt), p0.rule().clone());
    let alt = p0.with_model(Arc::new(q_alt))?.with_prefs(alt_prefs);
    let (v_alt, _) = alt.solve_v(opts)?;

    let k = p0.kernel();
    let up = p0.u_pairs();
    let (wv, vv) = (w.values(), v_alt.values());
    let (wp, vp) = (k.interp_all(wv), k.interp_all(vv));
    let mut discrepancy = 0.0f64;
    for i in 0..k.len() {
        let r = k.range(i);
        let log_tilt: Vec<f64> = r.clone().map(|q| wp[q] + shift * up[q] - wv[i] / beta).collect();
        let log_z = crate::numgrid::log_sum_exp_weighted(&k.weights()[r.clone()], &log_tilt);
        for (j, q) in r.enumerate() {
            let log_m_alt = vp[q] + alt_prefs.alpha() * up[q] - vv[i] / beta;
            let composite = (log_m_alt + log_tilt[j] - log_z).exp();
            discrepancy = discrepancy.max((composite - dist.m()[q]).abs());
        }
    }
    let target: Vec<f64> = dist.value().values().iter().zip(wv).map(|(v, w)| v - w).collect();
    let value_gap = sup_diff(vv, &target);
    Ok(UnderidentReport {
        theta0: prefs0.theta(),
        theta_alt,
        alpha_shift: shift,
        discrepancy,
        value_gap,
        passes: discrepancy < UNDERIDENT_TOL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{LgModel, UtilityGrowth};
    use crate::numgrid::Extrap;
    use crate::robust_solver::{GridSpec, RobustProblem};

    fn iid_dist() -> Distortion {
        let p = RobustProblem::new(
            Arc::new(LgModel::scalar(0.0, 0.0, 1.0).unwrap()),
            Preferences::from_alpha(-1.0, 0.5).unwrap(),
            UtilityGrowth::affine(0.0, vec![0.0], vec![1.0]).unwrap(),
            &GridSpec {
                nodes: 41,
                extrap: Extrap::Linear,
                ..GridSpec::default()
            },
        )
        .unwrap();
        let (v, _) = p.solve_v(&SolveOptions::default()).unwrap();
        Distortion::new(&p, v).unwrap()
    }

    fn affine_g(c0: f64, c1: f64) -> MomentSpec {
        MomentSpec::new(1, Arc::new(move |_x, y| vec![c0 + c1 * y[0]])).unwrap()
    }

    #[test]
    fn zero_residual_payoff() {
        let d = iid_dist();
        let r = rho_derivatives(&d, &affine_g(2.0, 0.0), &NeumannOptions::default()).unwrap();
        assert!(r.d_alpha[0].values().iter().all(|x| x.abs() < 1e-12));
        assert!(r.d_beta[0].values().iter().all(|x| (x - 2.0).abs() < 1e-12));
        let m = local_ident_matrix(d.problem().model().as_ref(), &r, &GaussHermiteRule::new(20).unwrap()).unwrap();
        assert!(!m.positive_definite);
    }

    #[test]
    fn iid_geometric_sums() {
        let d = iid_dist();
        let (c0, c1, b) = (1.5, 0.3, 0.5);
        let r = rho_derivatives(&d, &affine_g(c0, c1), &NeumannOptions::default()).unwrap();
        assert!(r.dense_diff.unwrap() < 1e-8);
        let want_a = -2.0 * (b * c0 - 1.0) + 3.0 * b * c1;
        let want_b = 2.0 * (b * c0 - 1.0 - b * c1) + 1.0 / b;
        for (a, bb) in r.d_alpha[0].values().iter().zip(r.d_beta[0].values()) {
            assert!((a - want_a).abs() < 1e-8, "{a} {want_a}");
            assert!((bb - want_b).abs() < 1e-8, "{bb} {want_b}");
        }
        // linear in the payoff
        let two = MomentSpec::new(2, Arc::new(move |_x, y| vec![c0 + c1 * y[0], 2.0 * (c0 + c1 * y[0])])).unwrap();
        let r2 = rho_derivatives(&d, &two, &NeumannOptions::default()).unwrap();
        let r3 = rho_derivatives(&d, &affine_g(2.0 * c0, 2.0 * c1), &NeumannOptions::default()).unwrap();
        assert!(r2.d_alpha[1].sup_diff(&r3.d_alpha[0]) < 1e-12);
        let m = local_ident_matrix(d.problem().model().as_ref(), &r2, &GaussHermiteRule::new(20).unwrap()).unwrap();
        assert_eq!(m.matrix[0][1], m.matrix[1][0]);
        assert!(m.eigenvalues[0] > -1e-10);
    }

    #[test]
    fn underident_on_iid_example() {
        let d = iid_dist();
        let theta0 = d.problem().prefs().theta();
        let same = underident_construct_check(&d, theta0, &SolveOptions::default()).unwrap();
        assert_eq!(same.discrepancy, 0.0);
        let r = underident_construct_check(&d, 2.0 * theta0, &SolveOptions::default()).unwrap();
        assert!(r.passes && r.value_gap < 1e-8, "{r:?}");
    }
}
