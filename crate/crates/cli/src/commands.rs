//! One function per subcommand. Each returns the report plus the tables to
//! write beside it; the caller owns all file output.

use fbsvie::bsvie::{m_identity_gap, m_property_residual};
use fbsvie::coefficients::{builtin_family, BoxSet, ControlProcess};
use fbsvie::control::{
    adapted_projection, directional_derivative_adjoint, directional_derivative_variational,
    eval_cost, fd_directional_derivative, mp_gradient, projected_gradient_optimize,
    solve_adjoint_bundle, solve_state, stationarity_residual, ControlProblem, ProblemKind,
};
use fbsvie::duality::{
    eval_duality_pair, eval_forward_backward_duality, random_forward_backward_instance,
    random_instance,
};
use fbsvie::lattice::{AdaptedProcess, NodeField, ScenarioTree, TerminalProcess, TimeGrid};
use serde::Serialize;
use serde_json::json;

use crate::config::{ConfigError, Direction, RunConfig};
use crate::report::{CheckRecord, RunReport, SeriesRow, SolverRecord, Table};

/// Why a command stopped. `Config` maps to exit status 2, the rest to 1.
#[derive(Debug)]
pub enum Failure {
    Config(ConfigError),
    Solver(fbsvie::Error),
    /// The run finished but its report does not pass.
    Check(String),
    Io(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<fbsvie::Error> for Failure {
    fn from(e: fbsvie::Error) -> Self {
        use fbsvie::Error as E;
        match e {
            E::MalformedParams { key, reason } => {
                Failure::Config(ConfigError::new(format!("problem.params.{key}"), reason))
            }
            E::UnknownFamily(_) => Failure::Config(ConfigError::new("problem.family", e.to_string())),
            E::InvalidControlSet(_) | E::ControlOutsideSet { .. } | E::Dimension { .. } => {
                Failure::Config(ConfigError::new("problem", e.to_string()))
            }
            E::KindMismatch(_) => Failure::Config(ConfigError::new("problem.kind", e.to_string())),
            E::InvalidGrid(_) => Failure::Config(ConfigError::new("grid", e.to_string())),
            other => Failure::Solver(other),
        }
    }
}

pub struct Outcome {
    pub report: RunReport,
    pub tables: Vec<Table>,
}

fn tree_of(cfg: &RunConfig) -> Result<ScenarioTree, Failure> {
    Ok(ScenarioTree::new(TimeGrid::new(cfg.grid.horizon, cfg.grid.steps)?))
}

fn problem_of(cfg: &RunConfig) -> Result<ControlProblem, Failure> {
    let pc = cfg
        .problem
        .as_ref()
        .ok_or_else(|| ConfigError::new("problem", "this command needs a `problem` section"))?;
    let coeffs = builtin_family(&pc.family, &pc.params)?;
    let grid = TimeGrid::new(cfg.grid.horizon, cfg.grid.steps)?;
    Ok(ControlProblem::new(pc.kind, coeffs, grid, cfg.solver)?)
}

fn start_control(cfg: &RunConfig, p: &ControlProblem) -> Result<ControlProcess, Failure> {
    let init = &cfg.problem.as_ref().expect("checked by problem_of").control;
    let set = p.coeffs().control_set();
    let l = set.dim();
    if let Some(seed) = init.random_seed {
        return Ok(ControlProcess::random(p.tree(), set, seed));
    }
    let value = init.constant.clone().unwrap_or_else(|| vec![0.0; l]);
    if value.len() != l {
        return Err(ConfigError::new(
            "problem.control.constant",
            format!("expected {l} components, got {}", value.len()),
        )
        .into());
    }
    ControlProcess::constant(p.tree(), &value, set).map_err(|_| {
        ConfigError::new("problem.control.constant", "lies outside the control set").into()
    })
}

fn moments(f: &NodeField) -> (Vec<f64>, Vec<f64>) {
    let mean = f.mean();
    let w = f.width() as f64;
    let var = (0..f.dim())
        .map(|c| (0..f.width()).map(|v| (f.at(v)[c] - mean[c]).powi(2)).sum::<f64>() / w)
        .collect();
    (mean, var)
}

/// `mean_{name}{c}` and `var_{name}{c}` rows for every slice.
fn moment_rows(tree: &ScenarioTree, name: &str, slices: &[NodeField]) -> Vec<SeriesRow> {
    let mut rows = Vec::new();
    for (k, f) in slices.iter().enumerate() {
        let (mean, var) = moments(f);
        for (c, (m, v)) in mean.iter().zip(&var).enumerate() {
            for (stat, value) in [("mean", *m), ("var", *v)] {
                rows.push(SeriesRow {
                    time: tree.time(k),
                    statistic: format!("{stat}_{name}{c}"),
                    value,
                });
            }
        }
    }
    rows
}

fn terminal_summary(rows: &[SeriesRow], horizon: f64) -> serde_json::Value {
    let last: serde_json::Map<_, _> = rows
        .iter()
        .filter(|r| r.time == horizon)
        .map(|r| (r.statistic.clone(), json!(r.value)))
        .collect();
    serde_json::Value::Object(last)
}

pub fn solve_forward(cfg: &RunConfig) -> Result<Outcome, Failure> {
    let p = problem_of(cfg)?;
    let u = start_control(cfg, &p)?;
    let x = fbsvie::fsvie::solve_fsvie(p.coeffs(), p.tree(), &u)?.x;
    let rows = moment_rows(p.tree(), "x", x.slices());
    let mut report = RunReport::new("solve-forward", cfg);
    report.summary = json!({ "terminal": terminal_summary(&rows, p.tree().time(p.tree().steps())) });
    Ok(Outcome {
        report,
        tables: vec![Table::rows("forward.csv", rows)],
    })
}

pub fn solve_bsvie(cfg: &RunConfig) -> Result<Outcome, Failure> {
    let p = problem_of(cfg)?;
    let u = start_control(cfg, &p)?;
    let s = solve_state(&p, &u)?;
    let tree = p.tree();
    let rows = moment_rows(tree, "y", s.y.slices());
    let mut report = RunReport::new("solve-bsvie", cfg);
    report.solvers.push(SolverRecord::from_stats("state_bsvie", &s.stats));
    let mut summary = json!({
        "initial": terminal_summary(&rows, 0.0),
        "cost": eval_cost(&p, &u)?,
    });
    // only C2 states carry Z below the diagonal
    if p.kind() == ProblemKind::C2 {
        summary["m_property_residual"] = json!(m_property_residual(tree, &s.y, &s.z));
        summary["m_identity_gap"] = json!(m_identity_gap(tree, &s.y, &s.z));
    }
    report.summary = summary;
    Ok(Outcome {
        report,
        tables: vec![Table::rows("bsvie.csv", rows)],
    })
}

fn scale_terminal(t: &TerminalProcess, s: f64) -> TerminalProcess {
    TerminalProcess::from_fn(t.dim(), t.len(), t.leaf_level(), |k, leaf, out| {
        for (o, v) in out.iter_mut().zip(t.slice(k).at(leaf)) {
            *o = s * v;
        }
    })
}

pub fn check_duality(cfg: &RunConfig) -> Result<Outcome, Failure> {
    let tree = tree_of(cfg)?;
    let d = &cfg.duality;
    let mut report = RunReport::new("check-duality", cfg);
    for k in 0..d.instances {
        let seed = d.seed.wrapping_add(k as u64);
        let (mut data, mut adj) = random_instance(&tree, d.dim, d.bound, seed);
        data.psi = scale_terminal(&data.psi, d.data_scale);
        adj.alpha = adj.alpha.scaled(d.data_scale);
        adj.beta = adj.beta.scaled(d.data_scale);
        let pair = eval_duality_pair(&tree, &data, &adj, &cfg.solver)?;
        report
            .checks
            .push(CheckRecord::new(format!("duality[{k}]"), pair.lhs, pair.rhs, d.tolerance));
        report.solvers.push(SolverRecord {
            name: format!("duality[{k}].xi"),
            iterations: pair.xi_sweeps,
            residual_trail: Vec::new(),
            equation_residual: pair.xi_residual,
        });

        let (a0, c0, phi, psi) = random_forward_backward_instance(&tree, d.dim, d.bound, seed);
        let phi = phi.scaled(d.data_scale);
        let psi = scale_terminal(&psi, d.data_scale);
        let fb = eval_forward_backward_duality(&tree, &a0, &c0, &phi, &psi, &cfg.solver)?;
        report.checks.push(CheckRecord::new(
            format!("forward_backward[{k}]"),
            fb.lhs,
            fb.rhs,
            d.tolerance,
        ));
    }
    finish_checks(report)
}

fn finish_checks(mut report: RunReport) -> Result<Outcome, Failure> {
    report.pass = report.failed_checks() == 0;
    Ok(Outcome {
        report,
        tables: Vec::new(),
    })
}

/// The control set shrunk by a third towards 0. Points drawn from it keep
/// `ū ± ε(v − ū)` admissible for `ε ≤ 1`, so every difference is central.
fn inner_box(set: &BoxSet) -> BoxSet {
    let third = |v: &[f64]| v.iter().map(|x| x / 3.0).collect();
    BoxSet::new(third(set.lo()), third(set.hi())).expect("a box containing 0 shrinks to a box")
}

pub fn check_gradient(cfg: &RunConfig) -> Result<Outcome, Failure> {
    let p = problem_of(cfg)?;
    let g = &cfg.gradient;
    let inner = inner_box(p.coeffs().control_set());
    let mut report = RunReport::new("check-gradient", cfg);
    let mut ratios = Vec::new();
    for k in 0..g.pairs {
        let seed = g.seed.wrapping_add(2 * k as u64);
        let u = ControlProcess::random(p.tree(), &inner, seed);
        let v = match g.direction {
            Direction::Random => ControlProcess::random(p.tree(), &inner, seed + 1),
            Direction::Zero => u.clone(),
        };
        let var = directional_derivative_variational(&p, &u, &v)?;
        let adj = directional_derivative_adjoint(&p, &u, &v)?;
        report
            .checks
            .push(CheckRecord::new(format!("variational_vs_adjoint[{k}]"), var, adj, g.tolerance));
        let mut fds = Vec::with_capacity(g.eps.len());
        for &eps in &g.eps {
            let fd = fd_directional_derivative(&p, &u, &v, eps)?;
            fds.push(fd);
            report.checks.push(CheckRecord::new(
                format!("fd_vs_variational[{k}](eps={eps})"),
                fd,
                var,
                g.fd_tolerance,
            ));
        }
        if let [e1, e2, ..] = g.eps[..] {
            // central differences carry an ε² error term; cancel it
            let (d1, d2) = (fds[0], fds[1]);
            let extrapolated = (e1 * e1 * d2 - e2 * e2 * d1) / (e1 * e1 - e2 * e2);
            report.checks.push(CheckRecord::new(
                format!("richardson_vs_variational[{k}]"),
                extrapolated,
                var,
                g.fd_tolerance,
            ));
            let (r1, r2) = ((d1 - var).abs(), (d2 - var).abs());
            // below the noise floor the ratio says nothing
            ratios.push((r2 > 1e-10 * (var.abs() + 1.0)).then(|| r1 / r2));
        }
    }
    if !ratios.is_empty() {
        report.summary = json!({ "fd_error_ratios": ratios });
    }
    finish_checks(report)
}

#[derive(Serialize)]
struct HistoryRow {
    iter: usize,
    cost: f64,
    residual: f64,
}

#[derive(Serialize)]
struct ControlRow {
    time: f64,
    node: usize,
    component: usize,
    value: f64,
}

fn control_rows(tree: &ScenarioTree, u: &AdaptedProcess) -> Vec<ControlRow> {
    let mut rows = Vec::new();
    for (s, f) in u.slices().iter().enumerate() {
        for node in 0..f.width() {
            for (component, value) in f.at(node).iter().enumerate() {
                rows.push(ControlRow {
                    time: tree.time(s),
                    node,
                    component,
                    value: *value,
                });
            }
        }
    }
    rows
}

pub fn optimize(cfg: &RunConfig) -> Result<Outcome, Failure> {
    let p = problem_of(cfg)?;
    let start = start_control(cfg, &p)?;
    let res = projected_gradient_optimize(&p, &start, &cfg.optimize)?;
    let bundle = solve_adjoint_bundle(&p, &res.control)?;
    let ga = adapted_projection(&mp_gradient(&p, &bundle));
    let last = res.history.last().expect("the optimizer records every iterate");
    let mut report = RunReport::new("optimize", cfg);
    report.pass = res.converged;
    report.summary = json!({
        "converged": res.converged,
        "iterations": last.iter,
        "cost": last.cost,
        "residual": stationarity_residual(&p, &res.control, &ga),
    });
    report.history = res.history.clone();
    let history = res
        .history
        .iter()
        .map(|r| HistoryRow {
            iter: r.iter,
            cost: r.cost,
            residual: r.residual,
        })
        .collect();
    Ok(Outcome {
        report,
        tables: vec![
            Table::rows("history.csv", history),
            Table::rows("control.csv", control_rows(p.tree(), res.control.values())),
        ],
    })
}
