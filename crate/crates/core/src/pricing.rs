//! Asset-pricing and detection outputs of a solved robust problem: Euler
//! residuals, earnings-strip term structures, realized distortion series,
//! Chernoff entropy and detection-error probabilities.

use std::io::Write;

use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ident::MomentSpec;
use crate::models::SimRng;
use crate::numgrid::{fmt_f64, log_sum_exp_weighted, GaussHermiteRule, GridFn};
use crate::robust_solver::Distortion;

/// Quarterly log growth to percent per annum.
pub const ANNUALIZE: f64 = 400.0;

/// Log growth `c0 + cx' x + cy' x'` over one period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineGrowth {
    #[serde(default)]
    pub c0: f64,
    #[serde(default)]
    pub cx: Vec<f64>,
    #[serde(default)]
    pub cy: Vec<f64>,
}

impl AffineGrowth {
    pub fn new(c0: f64, cx: Vec<f64>, cy: Vec<f64>) -> Self {
        AffineGrowth { c0, cx, cy }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        self.c0
            + self.cx.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            + self.cy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn scaled(&self, s: f64) -> Self {
        AffineGrowth {
            c0: s * self.c0,
            cx: self.cx.iter().map(|v| s * v).collect(),
            cy: self.cy.iter().map(|v| s * v).collect(),
        }
    }

    fn minus(&self, other: &AffineGrowth) -> Self {
        let sub = |a: &[f64], b: &[f64]| -> Vec<f64> {
            (0..a.len().max(b.len()))
                .map(|i| a.get(i).copied().unwrap_or(0.0) - b.get(i).copied().unwrap_or(0.0))
                .collect()
        };
        AffineGrowth {
            c0: self.c0 - other.c0,
            cx: sub(&self.cx, &other.cx),
            cy: sub(&self.cy, &other.cy),
        }
    }
}

/// Consumption and earnings growth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthSpec {
    pub consumption: AffineGrowth,
    pub earnings: AffineGrowth,
}

/// `E[m beta exp(-gc) R_k | x] - 1` per payoff.
pub fn euler_residual(dist: &Distortion, gc: &AffineGrowth, returns: &MomentSpec) -> Result<Vec<GridFn>> {
    let p = dist.problem();
    let b = p.prefs().beta();
    let k = p.kernel();
    let pairs = k.pair_values_vec(|x, y| {
        let sdf = b * (-gc.eval(x, y)).exp();
        returns.eval(x, y).into_iter().map(|r| sdf * r).collect::<Vec<f64>>()
    });
    (0..returns.dim())
        .map(|c| {
            let col: Vec<f64> = pairs.iter().map(|r| r[c]).collect();
            p.grid_fn(dist.expect_v_pairs(&col).into_iter().map(|e| e - 1.0).collect())
        })
        .collect()
}

/// One-period risk-free rate `1 / E_v[beta exp(-gc) | x]`.
pub fn risk_free(dist: &Distortion, gc: &AffineGrowth) -> Result<GridFn> {
    let p = dist.problem();
    let b = p.prefs().beta();
    let pairs = p.kernel().pair_values(|x, y| b * (-gc.eval(x, y)).exp());
    p.grid_fn(dist.expect_v_pairs(&pairs).into_iter().map(|e| 1.0 / e).collect())
}

/// Return priced exactly by the worst-case discount factor: `exp(gc) / (beta m)`.
pub fn exactly_priced_return(dist: &Distortion, gc: &AffineGrowth) -> MomentSpec {
    let d = dist.clone();
    let gc = gc.clone();
    let b = dist.problem().prefs().beta();
    MomentSpec::new(
        1,
        std::sync::Arc::new(move |x, y| {
            let lm = d.log_eval(x, y).unwrap_or(f64::NAN);
            vec![(gc.eval(x, y) - lm).exp() / b]
        }),
    )
    .expect("one component")
}

/// Excess log returns on earnings strips by horizon.
#[derive(Debug, Clone)]
pub struct TermStructure {
    /// Horizons `0..=tau_max`.
    pub excess: Vec<GridFn>,
}

impl TermStructure {
    /// Excess return divided by the horizon; zero at horizon 0.
    pub fn per_period(&self, tau: usize) -> Vec<f64> {
        let e = self.excess[tau].values();
        if tau == 0 {
            vec![0.0; e.len()]
        } else {
            e.iter().map(|v| v / tau as f64).collect()
        }
    }

    /// Horizon column followed by one column per evaluation state.
    pub fn write_csv<W: Write>(&self, out: W, states: &[Vec<f64>]) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["horizon".to_string()];
        header.extend((1..=states.len()).map(|k| format!("state{k}")));
        wtr.write_record(&header)?;
        for (tau, f) in self.excess.iter().enumerate() {
            let mut row = vec![tau.to_string()];
            for s in states {
                row.push(fmt_f64(f.eval(s)?));
            }
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// `log E[exp(sum_{j < tau} h(X_j, X_{j+1})) | x]` for `tau = 0..=tau_max`, under
/// the benchmark or the worst-case law.
fn log_multiplicative(dist: &Distortion, h: &AffineGrowth, worst: bool, tau_max: usize) -> Result<Vec<Vec<f64>>> {
    let k = dist.problem().kernel();
    let mut add = k.pair_values(|x, y| h.eval(x, y));
    if worst {
        for (a, l) in add.iter_mut().zip(dist.log_m()) {
            *a += l;
        }
    }
    let mut out = vec![vec![0.0; k.len()]];
    for _ in 0..tau_max {
        let next = k.log_expect_exp(out.last().expect("non-empty"), Some(&add))?;
        out.push(next);
    }
    Ok(out)
}

/// `log E[E_tau/E_0] - log E_v[(C_0/C_tau)(E_tau/E_0)] + log E_v[C_0/C_tau]`; the discount
/// factors `beta^tau` of the last two terms cancel.
pub fn strip_term_structure(dist: &Distortion, growth: &GrowthSpec, tau_max: usize) -> Result<TermStructure> {
    let neg_c = growth.consumption.scaled(-1.0);
    let net = growth.earnings.minus(&growth.consumption);
    let a = log_multiplicative(dist, &growth.earnings, false, tau_max)?;
    let b = log_multiplicative(dist, &net, true, tau_max)?;
    let c = log_multiplicative(dist, &neg_c, true, tau_max)?;
    let excess = (0..=tau_max)
        .map(|t| {
            let vals = (0..a[t].len()).map(|i| a[t][i] - b[t][i] + c[t][i]).collect();
            dist.problem().grid_fn(vals)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TermStructure { excess })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub date: String,
    /// `m(x_t, x_{t+1})`.
    pub m: f64,
    /// `(E[gc | x_t] - E_v[gc | x_t]) * 400`.
    pub spread_pct_pa: f64,
    pub gamma: f64,
    pub weight_entropy: f64,
}

/// One row per observed transition, dated by its starting observation.
pub fn realized_series(
    dist: &Distortion,
    gamma: &GridFn,
    gc: &AffineGrowth,
    dates: &[String],
    data: &[Vec<f64>],
    rule: &GaussHermiteRule,
) -> Result<Vec<SeriesRow>> {
    let p = dist.problem();
    let model = p.model();
    let d = model.dim();
    if dates.len() != data.len() {
        return Err(Error::invalid("dates and observations differ in length"));
    }
    for (row, x) in data.iter().enumerate() {
        if x.len() != d {
            return Err(Error::Data {
                row: row + 1,
                msg: format!("expected {d} state columns, found {}", x.len()),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data {
                row: row + 1,
                msg: "non-finite value".into(),
            });
        }
    }
    (0..data.len().saturating_sub(1))
        .into_par_iter()
        .map(|t| {
            let (x, y) = (&data[t], &data[t + 1]);
            let nodes = model.cond_nodes(x, rule)?;
            let (mut eq, mut ev) = (0.0, 0.0);
            for (z, w) in nodes.iter() {
                let g = gc.eval(x, z);
                eq += w * g;
                ev += w * dist.eval(x, z)? * g;
            }
            let weights = model.mixture_weights(x);
            let weight_entropy = -weights
                .iter()
                .filter(|w| **w > 0.0)
                .map(|w| w * w.ln())
                .sum::<f64>();
            Ok(SeriesRow {
                date: dates[t].clone(),
                m: dist.eval(x, y)?,
                spread_pct_pa: (eq - ev) * ANNUALIZE,
                gamma: gamma.eval(x)?,
                weight_entropy: weight_entropy.max(0.0),
            })
        })
        .collect()
}

pub fn write_series_csv<W: Write>(rows: &[SeriesRow], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["date", "m", "spread_pct_pa", "gamma", "weight_entropy"])?;
    for r in rows {
        wtr.write_record([
            r.date.clone(),
            fmt_f64(r.m),
            fmt_f64(r.spread_pct_pa),
            fmt_f64(r.gamma),
            fmt_f64(r.weight_entropy),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// One-period Chernoff entropy under the stationary pair law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChernoffReport {
    pub value: f64,
    pub s_star: f64,
    /// `(s, log E[m^s])` on the search grid.
    pub objective: Vec<(f64, f64)>,
    pub convex: bool,
    pub horizon: String,
}

/// `-min_{s in (0,1)} log E[m^s]` with pairs drawn from the stationary law and the benchmark transition.
pub fn chernoff_entropy(dist: &Distortion, s_grid: usize, rule: &GaussHermiteRule) -> Result<ChernoffReport> {
    let model = dist.problem().model();
    let stat = model.stationary_nodes(rule)?;
    let mut w = Vec::new();
    let mut lm = Vec::new();
    for (x, wx) in stat.iter() {
        let nodes = model.cond_nodes(x, rule)?;
        for (y, wy) in nodes.iter() {
            w.push(wx * wy);
            lm.push(dist.log_eval(x, y)?);
        }
    }
    let f = |s: f64| -> f64 {
        let e: Vec<f64> = lm.iter().map(|l| s * l).collect();
        log_sum_exp_weighted(&w, &e)
    };
    let n = s_grid.max(3);
    let objective: Vec<(f64, f64)> = (1..=n)
        .map(|k| {
            let s = k as f64 / (n + 1) as f64;
            (s, f(s))
        })
        .collect();
    let convex = objective
        .windows(3)
        .all(|t| t[0].1 + t[2].1 - 2.0 * t[1].1 >= -1e-12 * (1.0 + t[1].1.abs()));
    let best = (0..n)
        .min_by(|&a, &b| objective[a].1.total_cmp(&objective[b].1))
        .expect("non-empty");
    let lo = if best == 0 { 0.0 } else { objective[best - 1].0 };
    let hi = if best + 1 == n { 1.0 } else { objective[best + 1].0 };
    let (s_star, fmin) = golden_min(f, lo, hi, 1e-10);
    let (s_star, fmin) = if fmin <= objective[best].1 {
        (s_star, fmin)
    } else {
        objective[best]
    };
    Ok(ChernoffReport {
        value: (-fmin).max(0.0),
        s_star,
        objective,
        convex,
        horizon: "one-period, stationary pair law".into(),
    })
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    let s = 0.5 * (a + b);
    (s, f(s))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub probability: f64,
    pub std_error: f64,
    /// Probability of choosing the worst case when the benchmark generated the data.
    pub error_benchmark: f64,
    /// Probability of choosing the benchmark when the worst case generated the data.
    pub error_worst: f64,
    /// Effective sample size of the worst-case reweighting, as a share of replications.
    pub ess_share: f64,
    pub low_ess: bool,
    pub horizon: usize,
    pub reps: usize,
}

/// Detection-error probability for samples of length `horizon`.
///
/// Paths are simulated under the benchmark from its stationary law; worst-case
/// error rates are obtained by reweighting the same paths with the product of
/// `m` along each path. Replication `r` uses stream `r` of the seeded generator.
pub fn detection_error(dist: &Distortion, horizon: usize, reps: usize, seed: u64) -> Result<DetectionReport> {
    if horizon == 0 || reps == 0 {
        return Err(Error::invalid("detection error needs a positive horizon and replication count"));
    }
    let model = dist.problem().model();
    let draws: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = SimRng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let mut x = model.sample_stationary(&mut rng)?;
            let mut llr = 0.0;
            for _ in 0..horizon {
                let y = model.sample_next(&x, &mut rng);
                llr += dist.log_eval(&x, &y)?;
                x = y;
            }
            Ok(llr)
        })
        .collect::<Result<_>>()?;
    let n = reps as f64;
    let picks_worst: Vec<f64> = draws.iter().map(|l| if *l > 0.0 { 1.0 } else { 0.0 }).collect();
    let e_bench = picks_worst.iter().sum::<f64>() / n;
    let var_bench = e_bench * (1.0 - e_bench) / n;

    let lmax = draws.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let wts: Vec<f64> = draws.iter().map(|l| (l - lmax).exp()).collect();
    let sw: f64 = wts.iter().sum();
    let sw2: f64 = wts.iter().map(|w| w * w).sum();
    let e_worst = wts.iter().zip(&picks_worst).map(|(w, p)| w * (1.0 - p)).sum::<f64>() / sw;
    let var_worst = wts
        .iter()
        .zip(&picks_worst)
        .map(|(w, p)| (w * ((1.0 - p) - e_worst)).powi(2))
        .sum::<f64>()
        / (sw * sw);
    let ess_share = sw * sw / sw2 / n;
    Ok(DetectionReport {
        probability: 0.5 * (e_bench + e_worst),
        std_error: 0.5 * (var_bench + var_worst).sqrt(),
        error_benchmark: e_bench,
        error_worst: e_worst,
        ess_share,
        low_ess: ess_share < 0.1,
        horizon,
        reps,
    })
}
