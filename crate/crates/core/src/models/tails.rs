use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use super::{rng_from_seed, BenchmarkModel, MoeModel};
use crate::error::Result;

/// Gaussian envelope constants for a stationary mixture density:
/// `c_lower exp(-|x-m|^2 / (2 s_lower^2)) <= f0(x) <= c_upper exp(-|x-m|^2 / (2 s_upper^2))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub center: Vec<f64>,
    pub s_lower: f64,
    pub s_upper: f64,
    pub c_lower: f64,
    pub c_upper: f64,
    pub points: usize,
    pub passed: bool,
}

/// Probe dilation factors applied to sampled deviations from the center.
const SHELLS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];

/// Monte Carlo check that the stationary log density sits between two
/// Gaussian envelopes, with extremes attained away from the outer shell.
pub fn tail_regularity_check(model: &MoeModel, samples: usize, seed: u64) -> Result<TailReport> {
    let (center, _) = model.stationary_moments()?;
    let eig: Vec<(f64, f64)> = model
        .components()
        .iter()
        .map(|c| {
            let e = SymmetricEigen::new(c.omega.clone()).eigenvalues;
            (e.min(), e.max())
        })
        .collect();
    let inflate = if model.k() == 1 { 1.0 } else { 1.05 };
    let s_lower = eig.iter().map(|e| e.0).fold(0.0, f64::max).sqrt() / inflate;
    let s_upper = eig.iter().map(|e| e.1).fold(0.0, f64::max).sqrt() * inflate;

    let mut rng = rng_from_seed(seed);
    let mut g_lo: Vec<Vec<f64>> = vec![Vec::new(); SHELLS.len()];
    let mut g_hi: Vec<Vec<f64>> = vec![Vec::new(); SHELLS.len()];
    for _ in 0..samples.max(1) {
        let x = model.sample_stationary(&mut rng)?;
        for (s, &f) in SHELLS.iter().enumerate() {
            let p: Vec<f64> = x.iter().zip(&center).map(|(xi, m)| m + f * (xi - m)).collect();
            let r2: f64 = p.iter().zip(&center).map(|(a, b)| (a - b).powi(2)).sum();
            let lf = log_stationary(model, &p);
            g_lo[s].push(lf + r2 / (2.0 * s_lower * s_lower));
            g_hi[s].push(lf + r2 / (2.0 * s_upper * s_upper));
        }
    }
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let last = SHELLS.len() - 1;
    let inner_lo = g_lo[..last].iter().map(|v| min(v)).fold(f64::INFINITY, f64::min);
    let inner_hi = g_hi[..last].iter().map(|v| max(v)).fold(f64::NEG_INFINITY, f64::max);
    let outer_lo = min(&g_lo[last]);
    let outer_hi = max(&g_hi[last]);
    let tol = |v: f64| 1e-9 * (1.0 + v.abs());
    let lo = inner_lo.min(outer_lo);
    let hi = inner_hi.max(outer_hi);
    let passed = lo.is_finite()
        && hi.is_finite()
        && outer_lo >= inner_lo - tol(inner_lo)
        && outer_hi <= inner_hi + tol(inner_hi);
    Ok(TailReport {
        center,
        s_lower,
        s_upper,
        c_lower: lo.exp(),
        c_upper: hi.exp(),
        points: samples.max(1) * SHELLS.len(),
        passed,
    })
}

fn log_stationary(model: &MoeModel, x: &[f64]) -> f64 {
    model.stationary_log_density(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::MoeComponent;
    use nalgebra::{DMatrix, DVector};

    fn comp(w: f64, mu: f64, a: f64, om: f64) -> MoeComponent {
        MoeComponent {
            weight: w,
            mean: DVector::from_element(1, mu),
            a: DMatrix::from_element(1, 1, a),
            omega: DMatrix::from_element(1, 1, om),
        }
    }

    #[test]
    fn single_gaussian_passes_with_its_stddev() {
        let m = MoeModel::new(vec![comp(1.0, 0.7, 0.5, 2.0)]).unwrap();
        let r = tail_regularity_check(&m, 500, 1).unwrap();
        assert!(r.passed);
        assert_eq!(r.s_lower, 2f64.sqrt());
        assert_eq!(r.s_upper, 2f64.sqrt());
        let norm = 1.0 / (2.0 * std::f64::consts::PI * 2.0).sqrt();
        assert!((r.c_lower / norm - 1.0).abs() < 1e-9 && (r.c_upper / norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn two_component_mixture_passes_and_is_reproducible() {
        let m = MoeModel::new(vec![comp(0.3, -2.0, 0.5, 0.5), comp(0.7, 1.0, 0.2, 1.5)]).unwrap();
        let a = tail_regularity_check(&m, 2000, 9).unwrap();
        let b = tail_regularity_check(&m, 2000, 9).unwrap();
        assert!(a.passed);
        assert!(a.c_lower > 0.0 && a.c_upper.is_finite());
        assert_eq!(a, b);
    }
}
