//! Command implementations. Each command validates its configuration before
//! computing anything and stages every output file until it succeeds.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use serde_json::{json, Value};

use robust_value::ddc_solver::DdcProblem;
use robust_value::ident::{local_ident_matrix, rho_derivatives, underident_construct_check, MomentSpec};
use robust_value::learning_solver::{
    obs_affine, BeliefGrid, HiddenStateModel, KalmanLearning, LearnPrefs, LearningProblem, SimplexGrid,
};
use robust_value::models::{fit_moe_em, tail_regularity_check, BenchmarkModel, EmOptions, LgModel};
use robust_value::numgrid::{sup_norm, GridFn};
use robust_value::perturb::{first_order_v, lipschitz_probe, remainder, score_from_models, SERIES_TOL};
use robust_value::pricing::{
    chernoff_entropy, detection_error, realized_series, strip_term_structure, write_series_csv,
};
use robust_value::robust_solver::{lg_closed_form, Distortion, RobustProblem, SolveReport};

use crate::config::{matrix, ModelConfig, RunConfig};
use crate::output::Staging;
use crate::{CliError, Command};

/// Runs a parsed command and returns the names of the files it wrote.
pub fn run(cmd: &Command) -> Result<Vec<String>, CliError> {
    let ctx = Context::load(cmd)?;
    let mut out = Staging::new(&ctx.out)?;
    match cmd {
        Command::Solve(_) => solve(&ctx, &mut out)?,
        Command::Series(_) => series(&ctx, &mut out)?,
        Command::Term(_) => term(&ctx, &mut out)?,
        Command::Perturb(_) => perturb(&ctx, &mut out)?,
        Command::Ident(_) => ident(&ctx, &mut out)?,
        Command::Ddc(_) => ddc(&ctx, &mut out)?,
        Command::Learn(_) => learn(&ctx, &mut out)?,
        Command::Fit(_) => fit(&ctx, &mut out)?,
    }
    out.write_json("metadata.json", &ctx.metadata())?;
    out.commit()
}

pub struct Context {
    pub command: &'static str,
    pub cfg: RunConfig,
    /// Directory of the configuration file; relative data paths resolve against it.
    pub base: PathBuf,
    pub seed: u64,
    pub out: PathBuf,
}

impl Context {
    fn load(cmd: &Command) -> Result<Self, CliError> {
        let common = cmd.common();
        let text = std::fs::read_to_string(&common.config)
            .map_err(|e| CliError::config(format!("{}: {e}", common.config.display())))?;
        let mut cfg = RunConfig::parse(&text)?;
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        let out = common
            .out
            .clone()
            .or_else(|| cfg.output.clone())
            .ok_or_else(|| CliError::config("no output directory (use --out or `output`)"))?;
        if let Some(n) = common.threads.or(cfg.threads) {
            if n == 0 {
                return Err(CliError::config("threads must be positive"));
            }
            // a pool may already exist when several commands share a process
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        let base = common
            .config
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Context {
            command: cmd.name(),
            seed: cfg.seed,
            cfg,
            base,
            out,
        })
    }

    fn metadata(&self) -> Value {
        json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "core_version": robust_value::VERSION,
            "seed": self.seed,
            "tolerances": {
                "solve": self.cfg.solve.tol,
                "neumann": self.cfg.solve.neumann.tol,
                "max_iters": self.cfg.solve.max_iters,
            },
            "config": self.cfg,
        })
    }

    fn model(&self) -> Result<Arc<dyn BenchmarkModel>, CliError> {
        self.cfg.model_config()?.build(&self.base, self.seed)
    }
}

fn dim_names(d: usize) -> Vec<String> {
    (1..=d).map(|k| format!("x{k}")).collect()
}

fn write_grid_fn(out: &mut Staging, name: &str, f: &GridFn, value: &str) -> Result<(), CliError> {
    let names = dim_names(f.grid().dims());
    out.write(name, |w| Ok(f.write_csv(w, &names, value)?))
}

struct Solved {
    problem: RobustProblem,
    report: SolveReport,
    dist: Distortion,
}

fn solve_base(ctx: &Context) -> Result<Solved, CliError> {
    let model = ctx.model()?;
    let prefs = ctx.cfg.preferences.build()?;
    let u = ctx.cfg.utility(model.dim())?;
    let problem = RobustProblem::new(model, prefs, u, &ctx.cfg.grid)?;
    let (v, report) = problem.solve_v(&ctx.cfg.solve)?;
    let dist = Distortion::new(&problem, v)?;
    Ok(Solved { problem, report, dist })
}

#[derive(Serialize)]
struct ClosedFormCheck {
    a: f64,
    b: Vec<f64>,
    mu_star: Vec<f64>,
    sup_error: f64,
}

fn closed_form_check(ctx: &Context, s: &Solved) -> Result<Option<ClosedFormCheck>, CliError> {
    let Some(ModelConfig::Lg { mu, a, sigma }) = &ctx.cfg.model else {
        return Ok(None);
    };
    let lg = LgModel::new(
        nalgebra::DVector::from_vec(mu.clone()),
        matrix(a, "model.a")?,
        matrix(sigma, "model.sigma")?,
    )?;
    let Ok(cf) = lg_closed_form(&lg, s.problem.prefs(), s.problem.utility()) else {
        return Ok(None);
    };
    let v = s.dist.value();
    let sup_error = v
        .grid()
        .points()
        .iter()
        .zip(v.values())
        .map(|(x, val)| (cf.value(x) - val).abs())
        .fold(0.0, f64::max);
    Ok(Some(ClosedFormCheck {
        a: cf.a,
        b: cf.b.clone(),
        mu_star: cf.mu_star.clone(),
        sup_error,
    }))
}

fn solve(ctx: &Context, out: &mut Staging) -> Result<(), CliError> {
    let s = solve_base(ctx)?;
    let ent = s.dist.continuation_entropy(&ctx.cfg.solve.neumann)?;
    let norm_err = s.dist.normalization().iter().map(|e| (e - 1.0).abs()).fold(0.0, f64::max);
    let radius = s.dist.subgradient_radius(200);
    let pricing = match &ctx.cfg.detection {
        None => Value::Null,
        Some(d) => {
            let chernoff = chernoff_entropy(&s.dist, d.s_grid, s.problem.rule())?;
            let detection = d
                .horizons
                .iter()
                .map(|t| detection_error(&s.dist, *t, d.reps, ctx.seed))
                .collect::<robust_value::Result<Vec<_>>>()?;
            json!({ "chernoff": chernoff, "detection": detection })
        }
    };
    write_grid_fn(out, "v.csv", s.dist.value(), "v")?;
    write_grid_fn(out, "gamma.csv", &ent.gamma, "gamma")?;
    let report = json!({
        "solve": s.report,
        "preferences": {
            "beta": s.problem.prefs().beta(),
            "theta": s.problem.prefs().theta(),
            "alpha": s.problem.prefs().alpha(),
        },
        "normalization_max_error": norm_err,
        "radius": radius,
        "entropy": {
            "terms": ent.terms,
            "recursion_residual": ent.recursion_residual,
            "dense_diff": ent.dense_diff,
        },
        "closed_form": closed_form_check(ctx, &s)?,
        "pricing": pricing,
    });
    out.write_json("report.json", &report)
}

fn series(ctx: &Context, out: &mut Staging) -> Result<(), CliError> {
    let sc = ctx.cfg.section(&ctx.cfg.series, "series")?;
    let data = crate::config::read_series(&ctx.base.join(&sc.data))?;
    let s = solve_base(ctx)?;
    if data.dim() != s.problem.model().dim() {
        return Err(CliError::Data(format!(
            "{} has {} state columns, the model has {}",
            sc.data.display(),
            data.dim(),
            s.problem.model().dim()
        )));
    }
    let gc = sc
        .consumption
        .clone()
        .unwrap_or_else(|| ctx.cfg.utility.clone().unwrap_or_default().as_growth());
    let ent = s.dist.continuation_entropy(&ctx.cfg.solve.neumann)?;
    let rows = realized_series(&s.dist, &ent.gamma, &gc, &data.dates, &data.rows, s.problem.rule())?;
    out.write("series.csv", |w| Ok(write_series_csv(&rows, w)?))?;
    out.write_json("report.json", &json!({ "solve": s.report, "rows": rows.len() }))
}

fn term(ctx: &Context, out: &mut Staging) -> Result<(), CliError> {
    let tc = ctx.cfg.section(&ctx.cfg.term, "term")?;
    let s = solve_base(ctx)?;
    let states = match &tc.states {
        Some(st) => st.clone(),
        None => vec![s.problem.model().stationary_moments()?.0],
    };
    let d = s.problem.model().dim();
    if let Some(bad) = states.iter().position(|x| x.len() != d) {
        return Err(CliError::config(format!("term.states[{bad}] does not have {d} coordinates")));
    }
    let ts = strip_term_structure(&s.dist, &tc.growth, tc.tau_max)?;
    out.write("term.csv", |w| Ok(ts.write_csv(w, &states)?))?;
    let per_period: Vec<Vec<f64>> = (0..=tc.tau_max)
        .map(|tau| {
            let f = ts.excess[tau].with_values(ts.per_period(tau))?;
            states.iter().map(|x| f.eval(x)).collect()
        })
        .collect::<robust_value::Result<_>>()?;
    out.write_json(
        "report.json",
        &json!({ "solve": s.report, "states": states, "per_period": per_period }),
    )
}

fn perturb(ctx: &Context, out: &mut Staging) -> Result<(), CliError> {
    let pc = ctx.cfg.section(&ctx.cfg.perturb, "perturb")?;
    let alts = pc
        .alternatives
        .iter()
        .map(|m| m.build(&ctx.base, ctx.seed))
        .collect::<Result<Vec<_>, _>>()?;
    if alts.is_empty() {
        return Err(CliError::config("perturb.alternatives is empty"));
    }
    let s = solve_base(ctx)?;
    let mut entries = Vec::new();
    for (k, alt) in alts.iter().enumerate() {
        let score = score_from_models(s.problem.kernel().clone(), s.problem.model().as_ref(), alt.as_ref())?;
        let fo = first_order_v(&s.dist, &score, pc.max_terms)?;
        let (vhat, _) = s.problem.with_model(alt.clone())?.solve_v(&ctx.cfg.solve)?;
        entries.push(json!({
            "correction_norm": fo.correction.sup_norm(),
            "terms": fo.terms,
            "last_term_norm": fo.last_term_norm,
            "truncated": fo.last_term_norm >= SERIES_TOL,
            "score_centering": sup_norm(&score.centering()),
            "exact_change_norm": vhat.sup_diff(s.dist.value()),
            "remainder": remainder(&vhat, s.dist.value(), &fo.correction),
        }));
        write_grid_fn(out, &format!("first_order_{}.csv", k + 1), &fo.correction, "correction")?;
    }
    let lip = lipschitz_probe(&s.problem, s.dist.value(), &alts, &ctx.cfg.solve)?;
    out.write_json(
        "report.json",
        &json!({ "solve": s.report, "alternatives": entries, "lipschitz": lip }),
    )
}

fn ident(ctx: &Context, out: &mut Staging) -> Result<(), CliError> {
    let ic = ctx.cfg.section(&ctx.cfg.ident, "ident")?;
    let moments = ic
        .moments
        .as_ref()
        .map(|m| MomentSpec::log_affine(m.c.clone(), m.a.clone(), m.b.clone()))
        .transpose()
        .map_err(|e| CliError::config(format!("ident.moments: {e}")))?;
    if let Some(bad) = ic.theta_alt.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(CliError::config(format!("ident.theta_alt entry {bad} is not a positive number")));
    }
    let s = solve_base(ctx)?;
    let local = match &moments {
        None => Value::Null,
        Some(g) => {
            let rho = rho_derivatives(&s.dist, g, &ctx.cfg.solve.neumann)?;
            let m = local_ident_matrix(s.problem.model().as_ref(), &rho, s.problem.rule())?;
            json!({
                "matrix": m,
                "moment_residual_sup": rho.rho.iter().map(GridFn::sup_norm).collect::<Vec<_>>(),
                "terms": rho.terms,
                "dense_diff": rho.dense_diff,
            })
        }
    };
    let ladder = ic
        .theta_alt
        .iter()
        .map(|t| underident_construct_check(&s.dist, *t, &ctx.cfg.solve))
        .collect::<robust_value::Result<Vec<_>>>()?;
    out.write_json(
        "report.json",
        &json!({ "solve": s.report, "local": local, "underidentification": ladder }),
    )
}

fn ddc(ctx: &Context, out: &mut Staging) -> Result<(), CliError> {
    let dc = ctx.cfg.section(&ctx.cfg.ddc, "ddc")?;
    let model = dc.spec(&ctx.base)?.build().map_err(|e| CliError::config(format!("ddc: {e}")))?;
    if let Some(r) = dc.renewal_action {
        if r >= model.n_actions() {
            return Err(CliError::config(format!("ddc.renewal_action {r} is out of range")));
        }
    }
    let problem = DdcProblem::new(model, &ctx.cfg.grid)?;
    let (v, ccp, report) = problem.solve_ddc(&ctx.cfg.solve)?;
    let stationary = match dc.renewal_action {
        None => Value::Null,
        Some(r) => {
            let st = problem.renewal_stationary(r, 1e-12, 100_000)?;
            write_grid_fn(out, "stationary.csv", &st.density, "density")?;
            json!({
                "iterations": st.iterations,
                "minorization_ratio": st.minorization_ratio,
                "doeblin_holds": st.doeblin_holds,
            })
        }
    };
    write_grid_fn(out, "v.csv", &v, "v")?;
    out.write("ccp.csv", |w| Ok(ccp.write_csv(w)?))?;
    out.write_json("report.json", &json!({ "solve": report, "stationary": stationary }))
}

fn learn(ctx: &Context, out: &mut Staging) -> Result<(), CliError> {
    let lc = ctx.cfg.section(&ctx.cfg.learn, "learn")?;
    let p = &ctx.cfg.preferences;
    let prefs = LearnPrefs::new(p.beta, p.theta()?, p.vartheta).map_err(|e| CliError::config(format!("preferences: {e}")))?;
    let rule = ctx.cfg.grid.rule()?;
    let u = obs_affine(lc.a0, lc.lambda.clone());
    let (model, grid, extra): (Box<dyn HiddenStateModel>, BeliefGrid, Value) =
        if let Some((m, subdivisions)) = lc.model.regime()? {
            let g = BeliefGrid::Simplex(SimplexGrid::new(m.n_regimes(), subdivisions)?);
            (Box::new(m), g, Value::Null)
        } else if let Some((m, nodes, span)) = lc.model.state_space()? {
            let k = KalmanLearning::new(m, ctx.cfg.solve.tol.min(1e-12))?;
            let g = k.belief_grid(nodes, span)?;
            let ss = k.steady_state();
            let extra = json!({
                "sigma_bar": ss.sigma_bar.iter().collect::<Vec<_>>(),
                "gain": ss.gain.iter().collect::<Vec<_>>(),
                "riccati_iterations": ss.iterations,
            });
            (Box::new(k), g, extra)
        } else {
            unreachable!("hidden-state model is either regime or kalman")
        };
    if lc.lambda.len() != model.obs_dim() {
        return Err(CliError::config(format!(
            "learn.lambda has {} entries for {}-dimensional observations",
            lc.lambda.len(),
            model.obs_dim()
        )));
    }
    let problem = LearningProblem::new(model.as_ref(), prefs, u, grid, &rule)?;
    let (v, report) = problem.solve_v_learn(&ctx.cfg.solve)?;
    out.write("v.csv", |w| Ok(v.write_csv(w, "v")?))?;
    out.write_json(
        "report.json",
        &json!({ "solve": report, "preferences": prefs, "kalman": extra }),
    )
}

fn fit(ctx: &Context, out: &mut Staging) -> Result<(), CliError> {
    let fc = ctx.cfg.section(&ctx.cfg.fit, "fit")?;
    let data = crate::config::read_series(&ctx.base.join(&fc.data))?;
    let opts = EmOptions { seed: ctx.seed, ..fc.em };
    let (model, report) = fit_moe_em(&data.rows, fc.k, opts)?;
    let tails = if fc.tail_samples > 0 {
        serde_json::to_value(tail_regularity_check(&model, fc.tail_samples, ctx.seed)?)
            .map_err(|e| CliError::Io(e.to_string()))?
    } else {
        Value::Null
    };
    out.write_json("model.json", &model.params())?;
    out.write_json(
        "report.json",
        &json!({ "em": report, "observations": data.len(), "variables": data.names, "tails": tails }),
    )
}
