use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

pub type PairFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Utility-growth functional `u(x, x')`.
#[derive(Clone)]
pub enum UtilityGrowth {
    /// `a0 + lambda0' x + lambda1' x'`.
    Affine {
        a0: f64,
        lambda0: Vec<f64>,
        lambda1: Vec<f64>,
    },
    Custom(PairFn),
}

impl fmt::Debug for UtilityGrowth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UtilityGrowth::Affine { a0, lambda0, lambda1 } => f
                .debug_struct("Affine")
                .field("a0", a0)
                .field("lambda0", lambda0)
                .field("lambda1", lambda1)
                .finish(),
            UtilityGrowth::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl UtilityGrowth {
    pub fn affine(a0: f64, lambda0: Vec<f64>, lambda1: Vec<f64>) -> Result<Self> {
        if lambda0.len() != lambda1.len() {
            return Err(Error::invalid("lambda0 and lambda1 differ in length"));
        }
        if !a0.is_finite() || lambda0.iter().chain(&lambda1).any(|v| !v.is_finite()) {
            return Err(Error::invalid("utility coefficients must be finite"));
        }
        Ok(UtilityGrowth::Affine { a0, lambda0, lambda1 })
    }

    pub fn zero(d: usize) -> Self {
        UtilityGrowth::Affine {
            a0: 0.0,
            lambda0: vec![0.0; d],
            lambda1: vec![0.0; d],
        }
    }

    pub fn custom(f: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        UtilityGrowth::Custom(Arc::new(f))
    }

    #[inline]
    pub fn eval(&self, x: &[f64], x_next: &[f64]) -> f64 {
        match self {
            UtilityGrowth::Affine { a0, lambda0, lambda1 } => {
                a0 + lambda0.iter().zip(x).map(|(l, v)| l * v).sum::<f64>()
                    + lambda1.iter().zip(x_next).map(|(l, v)| l * v).sum::<f64>()
            }
            UtilityGrowth::Custom(f) => f(x, x_next),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, UtilityGrowth::Affine { a0, lambda0, lambda1 }
            if *a0 == 0.0 && lambda0.iter().chain(lambda1).all(|v| *v == 0.0))
    }

    /// Dimension implied by affine coefficients.
    pub fn affine_dim(&self) -> Option<usize> {
        match self {
            UtilityGrowth::Affine { lambda0, .. } => Some(lambda0.len()),
            UtilityGrowth::Custom(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_evaluation() {
        let u = UtilityGrowth::affine(0.5, vec![1.0, 0.0], vec![0.0, 2.0]).unwrap();
        assert_eq!(u.eval(&[1.0, 9.0], &[9.0, 3.0]), 7.5);
        assert!(UtilityGrowth::zero(2).is_zero());
        assert!(UtilityGrowth::affine(0.0, vec![1.0], vec![]).is_err());
        let c = UtilityGrowth::custom(|x, y| x[0] * y[0]);
        assert_eq!(c.eval(&[2.0], &[3.0]), 6.0);
    }
}
