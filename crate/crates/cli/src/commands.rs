//! Subcommand implementations. Each returns an [`Outcome`]; the driver in
//! `lib.rs` turns it into files and an envelope.

use std::path::Path as FsPath;

use rough_young::field::{
    drift_field, linear_scalar_field, separable_field, Domain, FnField, HolderProfile, RoughField, SpaceFn, TimeFn,
};
use rough_young::fk::{
    feynman_kac_solve, fd_reference_solve, CoeffSpec, DiffusionConfig, EigenV, FdGrid, MCConfig, Route, Terminal,
    VFunction, VLattice, VOptions,
};
use rough_young::flow::{jacobian_path, solve_rough_ode, FlowOptions, FlowSolution, Scheme};
use rough_young::gaussian::{
    chain_report, concentration_check, covariance_check, empirical_sup_increment, fbm_path, rect_increment_moment_check,
    stream_rng, ChainConstants, FbsSampler, HurstVector, SheetSample,
};
use rough_young::io::{load_field, path_from_csv, CsvTable, GridData};
use rough_young::numeric::{fit_loglog, norm};
use rough_young::path::Path;
use rough_young::sewing::{
    nonlinear_young_integral, right_endpoint_integral, sew_levels, symmetric_integral_approx, ConditionMode,
    QuadSpec, RightYoungGerm, SewingOptions, YoungGerm,
};
use rough_young::transport::{solve_transport, transport_residual, InitialDatum, ResidualOptions, TransportProblem};
use rough_young::Error;
use serde_json::json;

use crate::config::{parse_axis, Endpoint, FkArgs, FlowArgs, IntegrateArgs, RouteArg, SheetArgs, SheetCheck, TransportArgs};
use crate::envelope::Verdict;
use crate::plot::{PlotData, PlotKind};

/// Failure of a command, split by exit status.
#[derive(Debug, Clone, PartialEq)]
pub enum CmdError {
    /// Malformed input: exit 2.
    Usage(String),
    /// The numerical module failed: exit 1.
    Module(Error),
}

impl CmdError {
    pub fn kind(&self) -> String {
        match self {
            CmdError::Usage(_) => "usage".into(),
            CmdError::Module(e) => format!("{e:?}").split(['(', ' ', '{']).next().unwrap_or("module").to_lowercase(),
        }
    }

    pub fn message(&self) -> String {
        match self {
            CmdError::Usage(m) => m.clone(),
            CmdError::Module(e) => e.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Usage(_) => 2,
            CmdError::Module(_) => 1,
        }
    }
}

impl From<Error> for CmdError {
    fn from(e: Error) -> Self {
        match e {
            Error::Parse(m) => CmdError::Usage(m),
            e => CmdError::Module(e),
        }
    }
}

pub type CmdResult<T> = Result<T, CmdError>;

fn usage<T>(msg: impl Into<String>) -> CmdResult<T> {
    Err(CmdError::Usage(msg.into()))
}

/// What a command produced.
#[derive(Debug, Default)]
pub struct Outcome {
    pub outputs: serde_json::Value,
    pub verdicts: Vec<Verdict>,
    /// Rendered CSV tables by file name, written in order.
    pub tables: Vec<(String, String)>,
    pub plot: Option<PlotData>,
}

/// Shared run settings.
#[derive(Debug, Clone, Copy)]
pub struct Ctx {
    pub seed: u64,
    pub tol: Option<f64>,
}

// ---------------------------------------------------------------------------
// Builtins
// ---------------------------------------------------------------------------

pub const BUILTIN_FIELDS: &[&str] = &["linear", "drift", "rotation", "fbm-linear", "fbm-sin", "smooth-sin", "zero", "zero2"];

/// fBm driver on `[-0.5, 1.5]` used by the rough builtins.
pub fn builtin_fbm_driver(seed: u64) -> rough_young::Result<TimeFn> {
    let p = fbm_path(0.8, 1 << 15, 2.0, seed, 0, 0.78)?;
    let times: Vec<f64> = p.times().iter().map(|t| t - 0.5).collect();
    TimeFn::sampled(Path::scalar(times, p.values().to_vec(), p.gamma())?)
}

fn zero_field(d: usize) -> rough_young::Result<RoughField> {
    let f = FnField::new(d, 1, |_, _, o| o[0] = 0.0)
        .with_gradient(|_, _, o| o.iter_mut().for_each(|v| *v = 0.0))
        .with_hessian(|_, _, o| o.iter_mut().for_each(|v| *v = 0.0));
    Ok(RoughField::from_fn(f, HolderProfile::new(1.0, 1.0, 0.0)?, Domain::cube((-4.0, 4.0), d, 50.0)?)?.with_label("zero"))
}

pub fn builtin_field(name: &str, seed: u64) -> CmdResult<RoughField> {
    let smooth = HolderProfile::new(1.0, 1.0, 0.0)?;
    let rough = HolderProfile::new(0.78, 1.0, 0.0)?;
    let wide = |d| Domain::cube((-4.0, 4.0), d, 50.0);
    let f = match name {
        "linear" => linear_scalar_field(TimeFn::Identity, 1, smooth, wide(1)?)?,
        "drift" => drift_field(TimeFn::Identity, vec![1.0, 0.5], 2, smooth, wide(2)?)?,
        "rotation" => separable_field(TimeFn::Identity, SpaceFn::Rotation, 2, smooth, wide(2)?)?,
        "fbm-linear" => linear_scalar_field(builtin_fbm_driver(seed)?, 1, rough, Domain::cube((-0.5, 1.5), 1, 50.0)?)?,
        "fbm-sin" => separable_field(builtin_fbm_driver(seed)?, SpaceFn::Sin, 1, rough, Domain::cube((-0.5, 1.5), 1, 50.0)?)?,
        "smooth-sin" => separable_field(smooth_sin_driver(), SpaceFn::Sin1, 1, smooth, wide(1)?)?,
        "zero" => zero_field(1)?,
        "zero2" => zero_field(2)?,
        _ => return usage(format!("unknown builtin field '{name}' (known: {})", BUILTIN_FIELDS.join(", "))),
    };
    Ok(f.with_label(name))
}

/// Time factor of the `smooth-sin` potential.
pub fn smooth_sin_driver() -> TimeFn {
    TimeFn::Sin { amp: 0.5, freq: 3.0, phase: 0.0 }
}

/// `builtin:<name>` or a JSON field document.
pub fn resolve_field(spec: &str, seed: u64) -> CmdResult<RoughField> {
    match spec.strip_prefix("builtin:") {
        Some(name) => builtin_field(name, seed),
        None => {
            let p = FsPath::new(spec);
            if !p.exists() {
                return usage(format!("field document '{spec}' not found"));
            }
            Ok(load_field(p)?)
        }
    }
}

/// `builtin:identity`, `builtin:fbm:<H>` or a CSV path file.
pub fn resolve_path(spec: &str, a: f64, b: f64, gamma: f64, seed: u64) -> CmdResult<Path> {
    if !(a < b) {
        return usage("path needs a < b");
    }
    match spec.strip_prefix("builtin:") {
        Some("identity") => Ok(Path::from_fn(a, b, 1, 1, 1.0, |t| vec![t])?),
        Some(other) => {
            let h: f64 = other
                .strip_prefix("fbm:")
                .and_then(|h| h.parse().ok())
                .ok_or_else(|| CmdError::Usage(format!("unknown builtin path '{other}' (known: identity, fbm:<H>)")))?;
            let p = fbm_path(h, 1 << 14, b - a, seed, 1, (h - 0.02).max(0.01))?;
            let times: Vec<f64> = p.times().iter().map(|t| t + a).collect();
            Ok(Path::scalar(times, p.values().to_vec(), p.gamma())?)
        }
        None => {
            let text = std::fs::read_to_string(spec).map_err(|e| CmdError::Usage(format!("{spec}: {e}")))?;
            Ok(path_from_csv(&text, gamma)?)
        }
    }
}

fn axes_from(grid: &[String]) -> CmdResult<Vec<Vec<f64>>> {
    if grid.is_empty() {
        return usage("grid needs at least one axis");
    }
    grid.iter().map(|g| parse_axis(g).map_err(CmdError::Usage)).collect()
}

/// Row-major tensor product of the axes.
pub fn tensor_points(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![]];
    for a in axes {
        pts = pts.into_iter().flat_map(|p| a.iter().map(move |v| [p.clone(), vec![*v]].concat())).collect();
    }
    pts
}

fn raster_row(x: &[f64], y_default: f64, u: f64) -> [f64; 3] {
    [x[0], x.get(1).copied().unwrap_or(y_default), u]
}

// ---------------------------------------------------------------------------
// integrate
// ---------------------------------------------------------------------------

/// Default sewing tolerance of `integrate`.
pub const DEFAULT_INTEGRATE_TOL: f64 = 1e-6;

pub fn integrate(args: &IntegrateArgs, ctx: Ctx) -> CmdResult<Outcome> {
    let field = resolve_field(&args.field, ctx.seed)?;
    let path = resolve_path(&args.path, args.a, args.b, args.gamma, ctx.seed)?;
    if path.start() > args.a || path.end() < args.b {
        return usage(format!("path covers [{}, {}], not [{}, {}]", path.start(), path.end(), args.a, args.b));
    }
    let tol = ctx.tol.unwrap_or(DEFAULT_INTEGRATE_TOL);
    let res = match (args.levels, args.endpoint) {
        (Some(l), Endpoint::Left) => sew_levels(&YoungGerm { field: &field, path: &path }, args.a, args.b, l)?,
        (Some(l), Endpoint::Right) => sew_levels(&RightYoungGerm { field: &field, path: &path }, args.a, args.b, l)?,
        (None, e) => {
            let opts = SewingOptions::with_tol(tol);
            let run = if e == Endpoint::Left { nonlinear_young_integral } else { right_endpoint_integral };
            run(&field, &path, args.a, args.b, &opts, ConditionMode::Strict)?
        }
    };
    let levels: Vec<(usize, f64)> = res.refinement_trace.iter().map(|t| (t.level, t.value[0])).collect();
    let plot = PlotData::convergence(&levels);
    let mut table = CsvTable::new(&["level", "mesh", "value", "diff"]).comment(format!("integral of {} along {}", args.field, args.path));
    for (t, row) in res.refinement_trace.iter().zip(&plot.rows) {
        table.push(vec![t.level as f64, t.mesh, row[1], row[2]]);
    }
    let symmetric = match args.symmetric_eps {
        Some(eps) => Some(symmetric_integral_approx(&field, &path, args.a, args.b, eps, QuadSpec::default())?),
        None => None,
    };
    let mut verdicts = Vec::new();
    if args.levels.is_none() {
        verdicts.push(Verdict::at_most("error_estimate", res.error_estimate, tol));
    }
    Ok(Outcome {
        outputs: json!({
            "value": res.value,
            "error_estimate": res.error_estimate,
            "tolerance": tol,
            "theoretical_bound": res.theoretical_bound,
            "trace": res.refinement_trace.iter().map(|t| json!([t.mesh, t.value])).collect::<Vec<_>>(),
            "symmetric": symmetric.map(|v| json!({"epsilon": args.symmetric_eps, "value": v})),
            "warnings": res.warnings,
        }),
        verdicts,
        tables: vec![("integrate_trace.csv".into(), table.render())],
        plot: Some(plot),
    })
}

// ---------------------------------------------------------------------------
// flow
// ---------------------------------------------------------------------------

/// Guaranteed convergence order of a flow scheme on a field with profile
/// `(tau, lambda)`. The second-order step gains `tau (1 + 2 lambda) - 1` only
/// for single-driver fields; with several non-commuting drivers the missing
/// area terms keep it at the Euler order.
pub fn scheme_order(scheme: Scheme, tau: f64, lambda: f64) -> f64 {
    match scheme {
        Scheme::Euler | Scheme::SecondOrder => tau * (1.0 + lambda) - 1.0,
    }
}

/// Richardson estimate of the end-point error of a `steps`-cell solve:
/// `|phi_N - phi_2N| / (1 - 2^-order)`.
pub fn leg_tolerance(
    field: &RoughField,
    x0: &[f64],
    t0: f64,
    t1: f64,
    steps: usize,
    opts: &FlowOptions,
) -> rough_young::Result<(FlowSolution, f64)> {
    let coarse = solve_rough_ode(field, x0, t0, t1, steps, opts)?;
    let fine = solve_rough_ode(field, x0, t0, t1, 2 * steps, opts)?;
    let diff = distance(coarse.end_state(), fine.end_state());
    let p = field.profile();
    let order = scheme_order(opts.scheme, p.tau, p.lambda).max(0.05);
    let floor = 1e-12 * (1.0 + norm(x0));
    Ok((coarse, (diff / (1.0 - 2f64.powf(-order))).max(floor)))
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn flow(args: &FlowArgs, ctx: Ctx) -> CmdResult<Outcome> {
    let field = resolve_field(&args.field, ctx.seed)?;
    if args.x0.len() != field.dim_in() {
        return usage(format!("x0 has {} entries, the field is {}-d", args.x0.len(), field.dim_in()));
    }
    let opts = FlowOptions { scheme: args.scheme.into(), ..FlowOptions::default() };
    let (sol, estimate) = leg_tolerance(&field, &args.x0, args.t0, args.t_end, args.steps, &opts)?;
    let leg_tol = ctx.tol.unwrap_or(estimate);
    let mut verdicts = Vec::new();
    let mut out = json!({
        "end_state": sol.end_state(),
        "step_count": sol.step_count,
        "a_priori_bound": sol.a_priori_bound,
        "achieved_sup": sol.achieved_sup,
        "achieved_holder": sol.achieved_holder,
        "leg_error_estimate": estimate,
        "leg_tolerance": leg_tol,
        "warnings": sol.warnings,
    });
    if args.inverse_check {
        let back = solve_rough_ode(&field, sol.end_state(), args.t_end, args.t0, args.steps, &opts)?;
        let gap = distance(back.end_state(), &args.x0);
        out["inverse_gap"] = json!(gap);
        verdicts.push(Verdict::at_most("inverse_round_trip", gap, 2.0 * leg_tol));
    }
    if let Some(s) = args.composition_check {
        let mid = args.t0 + s;
        let end = mid + args.t_end - args.t0;
        let one = solve_rough_ode(&field, &args.x0, args.t0, end, args.steps, &opts)?;
        let first = solve_rough_ode(&field, &args.x0, args.t0, mid, args.steps, &opts)?;
        let second = solve_rough_ode(&field, first.end_state(), mid, end, args.steps, &opts)?;
        let gap = distance(one.end_state(), second.end_state());
        out["composition_gap"] = json!(gap);
        verdicts.push(Verdict::at_most("composition", gap, 2.0 * leg_tol));
    }
    let d = sol.dim;
    let mut cols: Vec<String> = vec!["t".into()];
    cols.extend((0..d).map(|i| format!("phi_{i}")));
    let jac = if args.jacobian { Some(jacobian_path(&field, &sol, opts.scheme)?) } else { None };
    if let Some(j) = &jac {
        cols.extend((0..d * d).map(|k| format!("grad_{}{}", k / d, k % d)));
        cols.push("J".into());
        let jmax = j.dets.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        out["jacobian"] = json!({
            "inverse_defect": j.inverse_defect(),
            "det_defect": j.det_defect(),
            "exp_div_defect": j.exp_div_defect(),
            "final_det": j.dets.last(),
        });
        // The exponential stepper preserves the group identities exactly;
        // the Euler linearisation only to O(sum |A_k|^2).
        if opts.scheme == Scheme::SecondOrder {
            verdicts.push(Verdict::at_most("grad_phi_times_M", j.inverse_defect(), 1e-6));
            verdicts.push(Verdict::at_most("det_equals_J", j.det_defect(), 1e-6 * jmax));
            verdicts.push(Verdict::at_most("J_equals_exp_div", j.exp_div_defect(), 1e-6 * jmax));
        }
    }
    let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
    let mut table = CsvTable::new(&col_refs).comment(format!("trajectory of {} from {:?}", args.field, args.x0));
    for k in 0..sol.times.len() {
        let mut row = vec![sol.times[k]];
        row.extend_from_slice(sol.state(k));
        if let Some(j) = &jac {
            row.extend_from_slice(&j.matrices[k]);
            row.push(j.dets[k]);
        }
        table.push(row);
    }
    Ok(Outcome { outputs: out, verdicts, tables: vec![("flow_trajectory.csv".into(), table.render())], plot: None })
}

// ---------------------------------------------------------------------------
// transport
// ---------------------------------------------------------------------------

pub fn transport(args: &TransportArgs, ctx: Ctx) -> CmdResult<Outcome> {
    let field = resolve_field(&args.field, ctx.seed)?;
    let axes = axes_from(&args.grid)?;
    if axes.len() != field.dim_in() {
        return usage(format!("grid has {} axes, the field is {}-d", axes.len(), field.dim_in()));
    }
    let h = InitialDatum::builtin(args.h.strip_prefix("builtin:").unwrap_or(&args.h)).map_err(|e| CmdError::Usage(e.to_string()))?;
    let nodes = tensor_points(&axes);
    let problem = TransportProblem::new(field, h, args.t0, nodes.clone())?
        .with_flow(FlowOptions { scheme: args.scheme.into(), ..FlowOptions::default() });
    let sol = solve_transport(&problem, args.t, args.steps)?;
    let mut plot = PlotData::new(PlotKind::Raster);
    let d = axes.len();
    let mut cols: Vec<String> = (0..d).map(|i| format!("x_{i}")).collect();
    cols.push("u".into());
    let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
    let mut table = CsvTable::new(&col_refs).comment(format!("u({}, x) for {}", args.t, args.field));
    for (x, u) in nodes.iter().zip(&sol.values) {
        plot.rows.push(raster_row(x, args.t, *u));
        table.push([x.clone(), vec![*u]].concat());
    }
    let mut out = json!({
        "t": args.t,
        "nodes": nodes.len(),
        "valid": sol.valid.iter().filter(|v| **v).count(),
    });
    let mut verdicts = Vec::new();
    if let Some(x) = &args.residual_at {
        let opts = ResidualOptions { level: args.residual_level, steps_per_unit: args.steps, hx: None };
        let r = transport_residual(&problem, x, args.t, &opts)?;
        out["residual"] = serde_json::to_value(r).expect("plain numbers");
        if let Some(tol) = ctx.tol {
            verdicts.push(Verdict::at_most("residual", r.residual.abs(), tol));
        }
    }
    Ok(Outcome { outputs: out, verdicts, tables: vec![("transport_values.csv".into(), table.render())], plot: Some(plot) })
}

// ---------------------------------------------------------------------------
// fk
// ---------------------------------------------------------------------------

pub fn parse_coeffs(spec: &str) -> CmdResult<CoeffSpec> {
    let text = if spec.trim_start().starts_with('{') {
        spec.to_string()
    } else {
        std::fs::read_to_string(spec).map_err(|e| CmdError::Usage(format!("{spec}: {e}")))?
    };
    serde_json::from_str(&text).map_err(|e| CmdError::Usage(format!("coefficients: {e}")))
}

/// Relative gap allowed between Monte Carlo and the reference solver, on
/// top of three standard errors.
pub const FD_RELATIVE_TOL: f64 = 0.02;

pub fn fk(args: &FkArgs, ctx: Ctx) -> CmdResult<Outcome> {
    let field = resolve_field(&args.field, ctx.seed)?;
    if field.dim_out() != 1 {
        return usage("the potential must be a scalar field");
    }
    let d = field.dim_in();
    let spec = parse_coeffs(&args.coeffs)?;
    let cfg = DiffusionConfig::from_spec(&spec, d)?;
    let terminal = Terminal::builtin(args.terminal.strip_prefix("builtin:").unwrap_or(&args.terminal))
        .map_err(|e| CmdError::Usage(e.to_string()))?;
    let axes = axes_from(&args.grid)?;
    if axes.len() != d {
        return usage(format!("grid has {} axes, the field is {}-d", axes.len(), d));
    }
    let points = tensor_points(&axes);
    let grid: Vec<(f64, Vec<f64>)> = points.iter().map(|x| (args.r, x.clone())).collect();
    let mc = MCConfig { n_paths: args.paths, n_steps: args.steps, seed: ctx.seed, antithetic: args.antithetic };
    let v: Option<Box<dyn VFunction>> = match args.route {
        RouteArg::Pathwise => None,
        RouteArg::Ito => Some(ito_v(args, &field, &cfg, &points, ctx.seed)?),
    };
    let route = match &v {
        None => Route::Pathwise,
        Some(v) => Route::ItoTrick(v.as_ref()),
    };
    let sol = feynman_kac_solve(&field, &cfg, &terminal, args.t_end, &grid, &mc, route)?;
    let fd = if args.fd_check {
        let cells = if d == 1 { 800 } else { 160 };
        let g = FdGrid::padded(&points, &cfg, args.r, args.t_end, cells, 400)?;
        Some(fd_reference_solve(Some(&field), &cfg, &terminal, args.r, args.t_end, &g)?)
    } else {
        None
    };
    let mut cols: Vec<String> = (0..d).map(|i| format!("x_{i}")).collect();
    cols.extend(["u", "stderr", "u_fd"].map(String::from));
    let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
    let mut table = CsvTable::new(&col_refs)
        .comment(format!("u({}, x), {} paths, {} steps, seed {}", args.r, args.paths, args.steps, ctx.seed));
    let mut plot = PlotData::new(PlotKind::Raster);
    let mut verdicts = Vec::new();
    let mut rows = Vec::new();
    for e in &sol.points {
        let u_fd = match &fd {
            Some(f) => Some(f.value_at(&e.x)?),
            None => None,
        };
        if let Some(u) = u_fd {
            let tol = (FD_RELATIVE_TOL * u.abs()).max(3.0 * e.stderr);
            verdicts.push(Verdict::at_most(format!("fd_gap{:?}", e.x), (e.u - u).abs(), tol));
        }
        table.push([e.x.clone(), vec![e.u, e.stderr, u_fd.unwrap_or(f64::NAN)]].concat());
        plot.rows.push(raster_row(&e.x, args.r, e.u));
        rows.push(json!({"x": e.x, "u": e.u, "stderr": e.stderr, "u_fd": u_fd,
            "overflow_fraction": e.overflow_fraction, "mean_integral": e.mean_integral, "warnings": e.warnings}));
    }
    Ok(Outcome {
        outputs: json!({"points": rows, "paths": args.paths, "steps": args.steps, "route": args.route}),
        verdicts,
        tables: vec![("fk_points.csv".into(), table.render())],
        plot: Some(plot),
    })
}

/// `v` for the Itô-trick route: closed form for `smooth-sin` under
/// `a = I`, otherwise a nested Monte-Carlo lattice over the reachable box.
fn ito_v(args: &FkArgs, field: &RoughField, cfg: &DiffusionConfig, points: &[Vec<f64>], seed: u64) -> CmdResult<Box<dyn VFunction>> {
    let spec = parse_coeffs(&args.coeffs)?;
    if args.field == "builtin:smooth-sin" && spec.a == rough_young::fk::DiffusivitySpec::Identity {
        return Ok(Box::new(EigenV::sine(smooth_sin_driver(), 1.0, args.t_end)));
    }
    let span = args.t_end - args.r;
    let pad = 6.0 * (cfg.lambda_max * span).sqrt() + cfg.kappa_b * (1.0 + points.iter().map(|p| norm(p)).fold(0.0, f64::max)) * span;
    let mut axes = vec![rough_young::path::uniform_grid(args.r, args.t_end, 16)];
    for j in 0..cfg.d {
        let lo = points.iter().map(|p| p[j]).fold(f64::INFINITY, f64::min) - pad;
        let hi = points.iter().map(|p| p[j]).fold(f64::NEG_INFINITY, f64::max) + pad;
        axes.push(rough_young::path::uniform_grid(lo, hi, 32));
    }
    Ok(Box::new(VLattice::build(field, cfg, axes, args.t_end, &VOptions { seed, ..VOptions::default() })?))
}

// ---------------------------------------------------------------------------
// sheet
// ---------------------------------------------------------------------------

/// Side lengths (in cells) `1, 2, 4, ...` along `axis` for boxes anchored at
/// a quarter of each axis, other sides a quarter of the axis.
pub fn increment_boxes(sample: &SheetSample, axis: usize) -> Vec<(Vec<f64>, Vec<f64>, f64)> {
    let shape = sample.shape();
    let anchor: Vec<usize> = shape.iter().map(|n| (n - 1) / 4).collect();
    let other: Vec<usize> = shape.iter().map(|n| ((n - 1) / 4).max(1)).collect();
    let mut out = Vec::new();
    let mut side = 1;
    while anchor[axis] + side < shape[axis] && side <= (shape[axis] - 1) / 2 {
        let lo: Vec<f64> = (0..shape.len()).map(|a| sample.axes[a][anchor[a]]).collect();
        let hi: Vec<f64> = (0..shape.len())
            .map(|a| sample.axes[a][anchor[a] + if a == axis { side } else { other[a] }])
            .collect();
        out.push((lo.clone(), hi.clone(), hi[axis] - lo[axis]));
        side *= 2;
    }
    out
}

/// Fitted log-log slope of `E |box increment|^2` against the side length on
/// `axis`, with per-box reports.
pub fn increment_slope(samples: &[SheetSample], axis: usize) -> rough_young::Result<(f64, Vec<(f64, f64, f64)>)> {
    let boxes = increment_boxes(&samples[0], axis);
    let mut sides = Vec::new();
    let mut moments = Vec::new();
    let mut rows = Vec::new();
    for (lo, hi, side) in boxes {
        let r = rect_increment_moment_check(samples, &lo, &hi)?;
        sides.push(side);
        moments.push(r.empirical);
        rows.push((side, r.empirical, r.target));
    }
    Ok((fit_loglog(&sides, &moments)?.slope, rows))
}

fn random_node<R: rand::Rng>(axes: &[Vec<f64>], rng: &mut R) -> Vec<f64> {
    loop {
        let x: Vec<f64> = axes.iter().map(|a| a[rng.random_range(0..a.len())]).collect();
        if x.iter().all(|v| *v != 0.0) {
            return x;
        }
    }
}

/// `count` random pairs of grid nodes off the coordinate planes.
pub fn random_node_pairs(axes: &[Vec<f64>], count: usize, seed: u64, stream: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = stream_rng(seed, stream);
    (0..count).map(|_| (random_node(axes, &mut rng), random_node(axes, &mut rng))).collect()
}

pub fn sheet(args: &SheetArgs, ctx: Ctx) -> CmdResult<Outcome> {
    let axes = axes_from(&args.grid)?;
    if axes.len() != args.hurst.len() {
        return usage("hurst needs one entry per grid axis");
    }
    if args.draws == 0 {
        return usage("draws must be positive");
    }
    let hurst = HurstVector::new(args.hurst.clone())?;
    let sampler = FbsSampler::new(hurst.clone(), axes.clone())?;
    let samples = sampler.sample_many(ctx.seed, args.draws);
    let first = GridData::new(axes.clone(), 1, samples[0].values.clone())?;
    let mut tables = vec![("sheet_sample.csv".to_string(), first.to_csv())];
    let mut verdicts = Vec::new();
    let mut plot = None;
    let mut out = json!({"draws": args.draws, "shape": samples[0].shape(), "hurst": args.hurst});
    match args.check {
        None => {}
        Some(SheetCheck::Covariance) => {
            let mut t = CsvTable::new(&["pair", "empirical", "target", "stderr", "z"]);
            let mut worst = 0.0_f64;
            for (k, (x, y)) in random_node_pairs(&axes, 10, ctx.seed, 1 << 32).into_iter().enumerate() {
                let r = covariance_check(&samples, &x, &y)?;
                worst = worst.max(r.z.abs());
                t.push(vec![k as f64, r.empirical, r.target, r.stderr, r.z]);
            }
            verdicts.push(Verdict::at_most("covariance_max_abs_z", worst, 4.0));
            tables.push(("sheet_covariance.csv".into(), t.render()));
        }
        Some(SheetCheck::Increment) => {
            let mut t = CsvTable::new(&["axis", "side", "empirical", "target"]);
            for (a, h) in args.hurst.iter().enumerate() {
                let (slope, rows) = increment_slope(&samples, a)?;
                rows.iter().for_each(|(s, e, tg)| t.push(vec![a as f64, *s, *e, *tg]));
                verdicts.push(Verdict::at_most(format!("increment_slope_axis_{a}"), (slope - 2.0 * h).abs(), 0.1)
                    .with_detail(format!("slope {slope:.4}, target {:.4}", 2.0 * h)));
            }
            tables.push(("sheet_increments.csv".into(), t.render()));
        }
        Some(SheetCheck::Concentration) => {
            let sups = sups(&samples, &args.delta, args.radius)?;
            let rep = concentration_check(&sups, args.delta.iter().product(), &[1.0, 2.0, 3.0])?;
            let mut p = PlotData::new(PlotKind::Tail);
            let mut excess = f64::NEG_INFINITY;
            for i in 0..rep.r_values.len() {
                p.rows.push([rep.r_values[i], rep.frequencies[i], rep.bounds[i]]);
                excess = excess.max(rep.frequencies[i] - rep.bounds[i] - 3.0 * rep.half_widths[i]);
            }
            verdicts.push(Verdict::at_most("concentration_excess", excess, 0.0));
            out["concentration"] = serde_json::to_value(&rep).expect("plain numbers");
            plot = Some(p);
        }
        Some(SheetCheck::Chaining) => {
            let rep = chain_report(&samples, &args.delta, &[args.radius], ChainConstants::default())?;
            out["chaining"] = serde_json::to_value(&rep).expect("plain numbers");
        }
    }
    Ok(Outcome { outputs: out, verdicts, tables, plot })
}

pub fn sups(samples: &[SheetSample], delta: &[f64], radius: f64) -> rough_young::Result<Vec<f64>> {
    use rayon::prelude::*;
    samples.par_iter().map(|s| empirical_sup_increment(s, delta, radius).map(|r| r.value)).collect()
}
