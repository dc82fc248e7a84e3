use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{rng_from_seed, spectral_radius, GaussianLaw, MoeComponent, MoeModel, SimRng};
use crate::error::{Error, Result};

/// Controls for [`fit_moe_em`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmOptions {
    /// Stop when the relative log-likelihood gain drops below this.
    pub tol: f64,
    pub max_iter: usize,
    pub restarts: usize,
    pub seed: u64,
    /// Covariance eigenvalue floor as a fraction of the average data variance.
    pub floor_rel: f64,
    /// Largest admissible eigenvalue modulus of each autoregression.
    pub max_radius: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            tol: 1e-8,
            max_iter: 500,
            restarts: 5,
            seed: 0,
            floor_rel: 1e-6,
            max_radius: 0.995,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmReport {
    pub loglik: f64,
    pub iterations: usize,
    pub loglik_trace: Vec<f64>,
    pub restarts_run: usize,
    pub restarts_failed: usize,
}

#[derive(Debug, Clone)]
struct Params {
    w: Vec<f64>,
    mu: Vec<DVector<f64>>,
    a: Vec<DMatrix<f64>>,
    omega: Vec<DMatrix<f64>>,
}

struct Pairs {
    d: usize,
    z: Vec<DVector<f64>>,
}

/// Fits a `K`-expert mixture to consecutive pairs of `data` by EM.
pub fn fit_moe_em(data: &[Vec<f64>], k: usize, opts: EmOptions) -> Result<(MoeModel, EmReport)> {
    if k == 0 {
        return Err(Error::invalid("K must be positive"));
    }
    let d = data.first().map_or(0, Vec::len);
    if d == 0 {
        return Err(Error::invalid("empty data"));
    }
    for (row, x) in data.iter().enumerate() {
        if x.len() != d || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data {
                row,
                msg: "row has the wrong width or a non-finite value".into(),
            });
        }
    }
    if data.len() < 10 * k * d + 1 {
        return Err(Error::invalid(format!(
            "need at least {} observations for K={k}, d={d}",
            10 * k * d + 1
        )));
    }
    let n = data.len() as f64;
    let mut var_sum = 0.0;
    for j in 0..d {
        let m = data.iter().map(|x| x[j]).sum::<f64>() / n;
        let v = data.iter().map(|x| (x[j] - m).powi(2)).sum::<f64>() / n;
        if !(v > 0.0) {
            return Err(Error::invalid(format!("column {j} is constant: covariance would be singular")));
        }
        var_sum += v;
    }
    let floor = opts.floor_rel * var_sum / d as f64;
    let pairs = Pairs {
        d,
        z: data
            .windows(2)
            .map(|w| DVector::from_iterator(2 * d, w[0].iter().chain(&w[1]).copied()))
            .collect(),
    };

    let mut best: Option<(Params, EmReport)> = None;
    let mut failed = 0;
    let mut rng = rng_from_seed(opts.seed);
    for _ in 0..opts.restarts.max(1) {
        let init = kmeans_pp(&pairs, k, &mut rng);
        let start = match m_step(&pairs, &init, floor, opts.max_radius) {
            Ok(p) => p,
            Err(_) => {
                failed += 1;
                continue;
            }
        };
        match run_em(&pairs, start, floor, &opts) {
            Ok((p, trace)) => {
                let ll = *trace.last().expect("non-empty trace");
                if best.as_ref().map_or(true, |(_, r)| ll > r.loglik) {
                    best = Some((
                        p,
                        EmReport {
                            loglik: ll,
                            iterations: trace.len() - 1,
                            loglik_trace: trace,
                            restarts_run: 0,
                            restarts_failed: 0,
                        },
                    ));
                }
            }
            Err(_) => failed += 1,
        }
    }
    let (params, mut report) =
        best.ok_or_else(|| Error::Numerical(format!("all {} EM restarts degenerated", opts.restarts.max(1))))?;
    report.restarts_run = opts.restarts.max(1);
    report.restarts_failed = failed;
    let comps = (0..k)
        .map(|j| MoeComponent {
            weight: params.w[j],
            mean: params.mu[j].clone(),
            a: params.a[j].clone(),
            omega: params.omega[j].clone(),
        })
        .collect();
    Ok((MoeModel::new(comps)?, report))
}

fn joint_laws(p: &Params) -> Result<Vec<GaussianLaw>> {
    (0..p.w.len())
        .map(|j| {
            let d = p.mu[j].len();
            let om = &p.omega[j];
            let cross = &p.a[j] * om;
            let mut c = DMatrix::<f64>::zeros(2 * d, 2 * d);
            c.view_mut((0, 0), (d, d)).copy_from(om);
            c.view_mut((d, d), (d, d)).copy_from(om);
            c.view_mut((d, 0), (d, d)).copy_from(&cross);
            c.view_mut((0, d), (d, d)).copy_from(&cross.transpose());
            let mean = DVector::from_iterator(2 * d, p.mu[j].iter().chain(p.mu[j].iter()).copied());
            GaussianLaw::new(mean, c)
        })
        .collect()
}

/// Responsibilities and the observed-data log-likelihood.
fn e_step(pairs: &Pairs, p: &Params) -> Result<(Vec<Vec<f64>>, f64)> {
    let laws = joint_laws(p)?;
    let logw: Vec<f64> = p.w.iter().map(|w| w.ln()).collect();
    let rows: Vec<(Vec<f64>, f64)> = pairs
        .z
        .par_iter()
        .map(|z| {
            let l: Vec<f64> = laws
                .iter()
                .zip(&logw)
                .map(|(law, lw)| lw + law.log_pdf(z.as_slice()))
                .collect();
            let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = l.iter().map(|v| (v - m).exp()).sum();
            let r = l.iter().map(|v| (v - m).exp() / s).collect();
            (r, m + s.ln())
        })
        .collect();
    let ll = rows.iter().map(|r| r.1).sum();
    Ok((rows.into_iter().map(|r| r.0).collect(), ll))
}

fn m_step(pairs: &Pairs, resp: &[Vec<f64>], floor: f64, max_radius: f64) -> Result<Params> {
    let d = pairs.d;
    let k = resp[0].len();
    let n = resp.len() as f64;
    let mut out = Params {
        w: Vec::with_capacity(k),
        mu: Vec::with_capacity(k),
        a: Vec::with_capacity(k),
        omega: Vec::with_capacity(k),
    };
    for j in 0..k {
        let nk: f64 = resp.iter().map(|r| r[j]).sum();
        if nk < (2 * d + 1) as f64 {
            return Err(Error::Numerical(format!("component {j} lost its support")));
        }
        let mut mu = DVector::<f64>::zeros(d);
        for (z, r) in pairs.z.iter().zip(resp) {
            for i in 0..d {
                mu[i] += r[j] * (z[i] + z[d + i]);
            }
        }
        mu /= 2.0 * nk;
        let mut s00 = DMatrix::<f64>::zeros(d, d);
        let mut s11 = DMatrix::<f64>::zeros(d, d);
        let mut s10 = DMatrix::<f64>::zeros(d, d);
        for (z, r) in pairs.z.iter().zip(resp) {
            let x0 = z.rows(0, d) - &mu;
            let x1 = z.rows(d, d) - &mu;
            s00 += r[j] * &x0 * x0.transpose();
            s11 += r[j] * &x1 * x1.transpose();
            s10 += r[j] * &x1 * x0.transpose();
        }
        let omega = (s00 + s11) / (2.0 * nk);
        let omega = (&omega + omega.transpose()) * 0.5;
        let min_eig = SymmetricEigen::new(omega.clone()).eigenvalues.min();
        if !(min_eig >= floor) {
            return Err(Error::Numerical(format!("component {j} covariance fell below the floor")));
        }
        let inv = omega
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("singular component covariance".into()))?;
        let a = project_stable(&(s10 / nk * inv), &omega, max_radius);
        out.w.push(nk / n);
        out.mu.push(mu);
        out.a.push(a);
        out.omega.push(omega);
    }
    Ok(out)
}

/// Shrinks `a` until its spectral radius is admissible and the innovation
/// covariance `omega - a omega a'` is positive definite.
fn project_stable(a: &DMatrix<f64>, omega: &DMatrix<f64>, max_radius: f64) -> DMatrix<f64> {
    let mut a = a.clone();
    let r = spectral_radius(&a);
    if r > max_radius {
        a *= max_radius / r;
    }
    for _ in 0..200 {
        let s = omega - &a * omega * a.transpose();
        if s.clone().cholesky().is_some() {
            break;
        }
        a *= 0.95;
    }
    a
}

fn blend(old: &Params, new: &Params, t: f64, max_radius: f64) -> Params {
    let k = old.w.len();
    let omega: Vec<DMatrix<f64>> = (0..k).map(|j| &old.omega[j] * (1.0 - t) + &new.omega[j] * t).collect();
    Params {
        w: (0..k).map(|j| old.w[j] * (1.0 - t) + new.w[j] * t).collect(),
        mu: (0..k).map(|j| &old.mu[j] * (1.0 - t) + &new.mu[j] * t).collect(),
        a: (0..k)
            .map(|j| project_stable(&(&old.a[j] * (1.0 - t) + &new.a[j] * t), &omega[j], max_radius))
            .collect(),
        omega,
    }
}

fn run_em(pairs: &Pairs, start: Params, floor: f64, opts: &EmOptions) -> Result<(Params, Vec<f64>)> {
    let mut p = start;
    let (mut resp, mut ll) = e_step(pairs, &p)?;
    let mut trace = vec![ll];
    for _ in 0..opts.max_iter {
        let cand = m_step(pairs, &resp, floor, opts.max_radius)?;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let trial = if t == 1.0 { cand.clone() } else { blend(&p, &cand, t, opts.max_radius) };
            if let Ok((r, l)) = e_step(pairs, &trial) {
                if l >= ll {
                    accepted = Some((trial, r, l));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((np, nr, nl)) = accepted else { break };
        assert!(nl >= ll, "EM log-likelihood decreased");
        let gain = (nl - ll) / ll.abs().max(1.0);
        p = np;
        resp = nr;
        ll = nl;
        trace.push(ll);
        if gain < opts.tol {
            break;
        }
    }
    Ok((p, trace))
}

/// k-means++ seeding followed by a few Lloyd steps; returns hard assignments.
fn kmeans_pp(pairs: &Pairs, k: usize, rng: &mut SimRng) -> Vec<Vec<f64>> {
    let z = &pairs.z;
    let n = z.len();
    let mut centers: Vec<DVector<f64>> = vec![z[rng.gen_range(0..n)].clone()];
    let mut dist: Vec<f64> = z.iter().map(|p| (p - &centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut pick = n - 1;
        for (i, d) in dist.iter().enumerate() {
            if u < *d {
                pick = i;
                break;
            }
            u -= d;
        }
        centers.push(z[pick].clone());
        for (i, p) in z.iter().enumerate() {
            dist[i] = dist[i].min((p - &centers[centers.len() - 1]).norm_squared());
        }
    }
    let mut assign = vec![0usize; n];
    for _ in 0..10 {
        for (i, p) in z.iter().enumerate() {
            assign[i] = (0..k)
                .min_by(|&a, &b| {
                    (p - &centers[a])
                        .norm_squared()
                        .partial_cmp(&(p - &centers[b]).norm_squared())
                        .expect("finite distance")
                })
                .expect("k > 0");
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&DVector<f64>> = z.iter().zip(&assign).filter(|(_, a)| **a == c).map(|(p, _)| p).collect();
            if !members.is_empty() {
                *center = members.iter().fold(DVector::zeros(2 * pairs.d), |acc, p| acc + *p) / members.len() as f64;
            }
        }
    }
    assign
        .iter()
        .map(|&a| (0..k).map(|c| if c == a { 1.0 } else { 0.0 }).collect())
        .collect()
}
