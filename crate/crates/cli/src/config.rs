//! TOML run configuration. Every section rejects unknown keys.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use robust_value::ddc_solver::DdcSpec;
use robust_value::models::{
    fit_moe_em, ArgModel, BenchmarkModel, EmOptions, FiniteChain, GaussianLaw, LgModel, MoeModel, MoeParams,
    RegimeModel, StateSpaceModel, TimeSeries, UtilityGrowth,
};
use robust_value::pricing::{AffineGrowth, GrowthSpec};
use robust_value::robust_solver::{GridSpec, Preferences, SolveOptions};

use crate::CliError;

/// Quarterly discount factor of an annual 0.98.
pub fn default_beta() -> f64 {
    0.98f64.powf(0.25)
}

pub fn default_theta() -> f64 {
    7.367
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing)]
    pub threads: Option<usize>,
    #[serde(default, skip_serializing)]
    pub output: Option<PathBuf>,
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub preferences: PrefsConfig,
    pub utility: Option<UtilityConfig>,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub solve: SolveOptions,
    pub detection: Option<DetectionConfig>,
    pub series: Option<SeriesConfig>,
    pub term: Option<TermConfig>,
    pub perturb: Option<PerturbConfig>,
    pub ident: Option<IdentConfig>,
    pub ddc: Option<DdcConfig>,
    pub learn: Option<LearnConfig>,
    pub fit: Option<FitConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrefsConfig {
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub theta: Option<f64>,
    /// Alternative to `theta`.
    pub alpha: Option<f64>,
    /// Robustness to the prior over hidden states; `learn` only.
    pub vartheta: Option<f64>,
}

impl Default for PrefsConfig {
    fn default() -> Self {
        PrefsConfig {
            beta: default_beta(),
            theta: None,
            alpha: None,
            vartheta: None,
        }
    }
}

impl PrefsConfig {
    pub fn build(&self) -> Result<Preferences, CliError> {
        let p = match (self.theta, self.alpha) {
            (Some(_), Some(_)) => return Err(CliError::config("preferences: give theta or alpha, not both")),
            (None, Some(a)) => Preferences::from_alpha(a, self.beta),
            (t, None) => Preferences::new(self.beta, t.unwrap_or_else(default_theta)),
        };
        p.map_err(|e| CliError::config(format!("preferences: {e}")))
    }

    /// `theta`, recovered from `alpha` when only that was given.
    pub fn theta(&self) -> Result<f64, CliError> {
        Ok(self.build()?.theta())
    }
}

/// `u(x, x') = a0 + lambda0' x + lambda1' x'`; missing coefficients are zero.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityConfig {
    #[serde(default)]
    pub a0: f64,
    #[serde(default)]
    pub lambda0: Vec<f64>,
    #[serde(default)]
    pub lambda1: Vec<f64>,
}

fn padded(v: &[f64], d: usize, what: &str) -> Result<Vec<f64>, CliError> {
    if v.len() > d {
        return Err(CliError::config(format!("{what} has {} entries for a {d}-dimensional state", v.len())));
    }
    let mut out = v.to_vec();
    out.resize(d, 0.0);
    Ok(out)
}

impl UtilityConfig {
    pub fn build(&self, d: usize) -> Result<UtilityGrowth, CliError> {
        UtilityGrowth::affine(
            self.a0,
            padded(&self.lambda0, d, "utility.lambda0")?,
            padded(&self.lambda1, d, "utility.lambda1")?,
        )
        .map_err(|e| CliError::config(format!("utility: {e}")))
    }

    /// The same coefficients read as log consumption growth.
    pub fn as_growth(&self) -> AffineGrowth {
        AffineGrowth::new(self.a0, self.lambda0.clone(), self.lambda1.clone())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// `X' = mu + A X + sigma W`.
    Lg {
        mu: Vec<f64>,
        a: Vec<Vec<f64>>,
        sigma: Vec<Vec<f64>>,
    },
    /// Scalar autoregressive gamma process.
    Arg { c1: f64, c2: f64, c3: f64 },
    /// Mixture of experts from a JSON parameter file or inline parameters.
    Moe {
        file: Option<PathBuf>,
        params: Option<MoeParams>,
    },
    /// Mixture of experts fitted by EM to a state CSV before use.
    MoeFit {
        data: PathBuf,
        k: usize,
        #[serde(default)]
        em: EmOptions,
    },
    Finite {
        states: Vec<Vec<f64>>,
        transition: Vec<Vec<f64>>,
    },
}

pub fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, CliError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(CliError::config(format!("{what} must be a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn core<T>(what: &str, r: robust_value::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::config(format!("{what}: {e}")))
}

impl ModelConfig {
    pub fn build(&self, base: &Path, seed: u64) -> Result<Arc<dyn BenchmarkModel>, CliError> {
        Ok(match self {
            ModelConfig::Lg { mu, a, sigma } => Arc::new(core(
                "model",
                LgModel::new(
                    DVector::from_vec(mu.clone()),
                    matrix(a, "model.a")?,
                    matrix(sigma, "model.sigma")?,
                ),
            )?),
            ModelConfig::Arg { c1, c2, c3 } => Arc::new(core("model", ArgModel::new(*c1, *c2, *c3))?),
            ModelConfig::Moe { file, params } => {
                let p = match (file, params) {
                    (Some(f), None) => {
                        let path = base.join(f);
                        let text = std::fs::read_to_string(&path)
                            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
                        serde_json::from_str::<MoeParams>(&text)
                            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
                    }
                    (None, Some(p)) => p.clone(),
                    _ => return Err(CliError::config("model: moe needs exactly one of file or params")),
                };
                Arc::new(core("model", MoeModel::from_params(&p))?)
            }
            ModelConfig::MoeFit { data, k, em } => {
                let ts = read_series(&base.join(data))?;
                let opts = EmOptions { seed, ..*em };
                let (m, _) = fit_moe_em(&ts.rows, *k, opts).map_err(CliError::Core)?;
                Arc::new(m)
            }
            ModelConfig::Finite { states, transition } => Arc::new(core(
                "model",
                FiniteChain::new(states.clone(), matrix(transition, "model.transition")?),
            )?),
        })
    }
}

pub fn read_series(path: &Path) -> Result<TimeSeries, CliError> {
    let f = std::fs::File::open(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    TimeSeries::read_csv(f).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionConfig {
    #[serde(default = "default_horizons")]
    pub horizons: Vec<usize>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_s_grid")]
    pub s_grid: usize,
}

fn default_horizons() -> Vec<usize> {
    vec![1, 4, 40, 200]
}

fn default_reps() -> usize {
    10_000
}

fn default_s_grid() -> usize {
    49
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesConfig {
    pub data: PathBuf,
    /// Defaults to the utility coefficients.
    pub consumption: Option<AffineGrowth>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermConfig {
    pub tau_max: usize,
    pub growth: GrowthSpec,
    /// Evaluation states; defaults to the stationary mean.
    pub states: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbConfig {
    pub alternatives: Vec<ModelConfig>,
    #[serde(default = "default_max_terms")]
    pub max_terms: usize,
}

fn default_max_terms() -> usize {
    robust_value::perturb::SERIES_MAX_TERMS
}

/// Log-affine payoffs `exp(c_k + a_k' x + b_k' x')`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentConfig {
    pub c: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentConfig {
    pub moments: Option<MomentConfig>,
    /// Alternative robustness parameters checked for observational equivalence.
    #[serde(default)]
    pub theta_alt: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdcConfig {
    /// JSON file holding the model.
    pub file: Option<PathBuf>,
    pub model: Option<DdcSpec>,
    /// Action with a state-independent kernel, for the stationary-law diagnostic.
    pub renewal_action: Option<usize>,
}

impl DdcConfig {
    pub fn spec(&self, base: &Path) -> Result<DdcSpec, CliError> {
        match (&self.file, &self.model) {
            (Some(f), None) => {
                let path = base.join(f);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
            }
            (None, Some(m)) => Ok(m.clone()),
            _ => Err(CliError::config("ddc: give exactly one of file or model")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum HiddenConfig {
    /// Finite-state regimes with Gaussian emissions; beliefs on a simplex lattice.
    Regime {
        transition: Vec<Vec<f64>>,
        means: Vec<Vec<f64>>,
        covs: Vec<Vec<Vec<f64>>>,
        #[serde(default = "default_subdivisions")]
        subdivisions: usize,
    },
    /// Linear Gaussian state space filtered by the steady-state Kalman gain.
    Kalman {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        su: Vec<Vec<f64>>,
        sw: Vec<Vec<f64>>,
        #[serde(default = "default_belief_nodes")]
        nodes: usize,
        #[serde(default = "default_belief_span")]
        span: f64,
    },
}

fn default_subdivisions() -> usize {
    100
}

fn default_belief_nodes() -> usize {
    41
}

fn default_belief_span() -> f64 {
    4.0
}

impl HiddenConfig {
    pub fn regime(&self) -> Result<Option<(RegimeModel, usize)>, CliError> {
        let HiddenConfig::Regime {
            transition,
            means,
            covs,
            subdivisions,
        } = self
        else {
            return Ok(None);
        };
        if means.len() != covs.len() {
            return Err(CliError::config("learn.model: means and covs differ in length"));
        }
        let emissions = means
            .iter()
            .zip(covs)
            .map(|(m, c)| core("learn.model", GaussianLaw::new(DVector::from_vec(m.clone()), matrix(c, "learn.model.covs")?)))
            .collect::<Result<Vec<_>, _>>()?;
        let model = core("learn.model", RegimeModel::new(matrix(transition, "learn.model.transition")?, emissions))?;
        Ok(Some((model, *subdivisions)))
    }

    pub fn state_space(&self) -> Result<Option<(StateSpaceModel, usize, f64)>, CliError> {
        let HiddenConfig::Kalman {
            a,
            b,
            su,
            sw,
            nodes,
            span,
        } = self
        else {
            return Ok(None);
        };
        let m = core(
            "learn.model",
            StateSpaceModel::new(
                matrix(a, "learn.model.a")?,
                matrix(b, "learn.model.b")?,
                matrix(su, "learn.model.su")?,
                matrix(sw, "learn.model.sw")?,
            ),
        )?;
        Ok(Some((m, *nodes, *span)))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnConfig {
    pub model: HiddenConfig,
    /// Utility `a0 + lambda' phi'` of the next observation.
    #[serde(default)]
    pub a0: f64,
    pub lambda: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub data: PathBuf,
    pub k: usize,
    #[serde(default)]
    pub em: EmOptions,
    /// Simulated draws for the tail-regularity diagnostic; zero skips it.
    #[serde(default = "default_tail_samples")]
    pub tail_samples: usize,
}

fn default_tail_samples() -> usize {
    20_000
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(e.to_string()))
    }

    pub fn model_config(&self) -> Result<&ModelConfig, CliError> {
        self.model.as_ref().ok_or_else(|| CliError::config("missing [model] section"))
    }

    pub fn utility(&self, d: usize) -> Result<UtilityGrowth, CliError> {
        self.utility.clone().unwrap_or_default().build(d)
    }

    pub fn section<'a, T>(&self, s: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
        s.as_ref().ok_or_else(|| CliError::config(format!("missing [{name}] section")))
    }
}
