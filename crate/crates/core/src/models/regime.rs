use nalgebra::{DMatrix, SymmetricEigen};

use super::{spectral_radius, GaussianLaw};
use crate::error::{Error, Result};

/// Hidden Markov regime chain with Gaussian emissions for the observable.
///
/// `lambda[(i, j)]` is the probability of moving to regime `i` from regime
/// `j`, so columns sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeModel {
    lambda: DMatrix<f64>,
    emissions: Vec<GaussianLaw>,
}

impl RegimeModel {
    pub fn new(lambda: DMatrix<f64>, emissions: Vec<GaussianLaw>) -> Result<Self> {
        let n = emissions.len();
        if n == 0 || lambda.shape() != (n, n) {
            return Err(Error::invalid("transition matrix must be N x N with one emission per regime"));
        }
        for j in 0..n {
            let col = lambda.column(j);
            if col.iter().any(|v| *v < 0.0) || (col.sum() - 1.0).abs() > 1e-12 {
                return Err(Error::invalid(format!("column {j} of the regime transition matrix is not a probability vector")));
            }
        }
        let m = emissions[0].dim();
        if emissions.iter().any(|e| e.dim() != m) {
            return Err(Error::invalid("emissions have different dimensions"));
        }
        Ok(RegimeModel { lambda, emissions })
    }

    pub fn n_regimes(&self) -> usize {
        self.emissions.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.emissions[0].dim()
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    pub fn emission(&self, i: usize) -> &GaussianLaw {
        &self.emissions[i]
    }

    pub fn emission_log_densities(&self, phi: &[f64]) -> Vec<f64> {
        self.emissions.iter().map(|e| e.log_pdf(phi)).collect()
    }

    /// Filtered belief update `Lambda (q ⊙ xi) / 1'(q ⊙ xi)`.
    pub fn filter_step(&self, xi: &[f64], phi: &[f64]) -> Result<Vec<f64>> {
        let logq = self.emission_log_densities(phi);
        self.filter_step_log(xi, &logq)
    }

    /// Filter update from emission log densities.
    pub fn filter_step_log(&self, xi: &[f64], log_q: &[f64]) -> Result<Vec<f64>> {
        let n = self.n_regimes();
        if xi.len() != n {
            return Err(Error::invalid("belief has the wrong number of coordinates"));
        }
        let m = log_q
            .iter()
            .zip(xi)
            .filter(|(_, p)| **p > 0.0)
            .map(|(l, _)| *l)
            .fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(Error::FilterDegeneracy(
                "all emission densities vanish at the observation".into(),
            ));
        }
        let post: Vec<f64> = log_q.iter().zip(xi).map(|(l, p)| p * (l - m).exp()).collect();
        let s: f64 = post.iter().sum();
        let post: Vec<f64> = post.iter().map(|v| v / s).collect();
        let mut out: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| self.lambda[(i, j)] * post[j]).sum::<f64>().max(0.0))
            .collect();
        close_simplex(&mut out);
        Ok(out)
    }
}

/// Renormalizes onto the simplex so that the left-to-right sum is exactly 1.
///
/// The rounding residue lands on the last coordinate: for `h` in `[0, 1]`,
/// `h + (1 - h)` rounds to 1 in round-to-nearest.
pub(crate) fn close_simplex(p: &mut [f64]) {
    let s: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v /= s;
    }
    let Some((last, head)) = p.split_last_mut() else {
        return;
    };
    let mut h: f64 = head.iter().sum();
    while h > 1.0 {
        let big = head
            .iter_mut()
            .max_by(|a, b| a.total_cmp(b))
            .expect("head sums above 1 so it is nonempty");
        *big = (*big - (h - 1.0)).max(0.0);
        h = head.iter().sum();
    }
    *last = 1.0 - h;
}

/// Linear Gaussian state-space model
/// `phi' = A xi + u`, `xi' = B xi + w`, `u ~ N(0, Su)`, `w ~ N(0, Sw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub su: DMatrix<f64>,
    pub sw: DMatrix<f64>,
}

impl StateSpaceModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, su: DMatrix<f64>, sw: DMatrix<f64>) -> Result<Self> {
        let (m, k) = a.shape();
        if b.shape() != (k, k) || su.shape() != (m, m) || sw.shape() != (k, k) {
            return Err(Error::invalid("state-space matrices have inconsistent shapes"));
        }
        if spectral_radius(&b) >= 1.0 {
            return Err(Error::invalid("latent autoregression is not stable"));
        }
        for (name, s) in [("Su", &su), ("Sw", &sw)] {
            if (s - s.transpose()).amax() > 1e-12 {
                return Err(Error::invalid(format!("{name} is not symmetric")));
            }
            let min = SymmetricEigen::new(s.clone()).eigenvalues.min();
            if min < -1e-12 {
                return Err(Error::invalid(format!("{name} is not positive semidefinite")));
            }
        }
        Ok(StateSpaceModel { a, b, su, sw })
    }

    pub fn scalar(a: f64, b: f64, su: f64, sw: f64) -> Result<Self> {
        let m = |v| DMatrix::from_element(1, 1, v);
        StateSpaceModel::new(m(a), m(b), m(su), m(sw))
    }

    pub fn obs_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.a.ncols()
    }
}
