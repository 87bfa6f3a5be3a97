//! The acceptance battery. Each criterion draws from its own range of random
//! streams (`1000 * id + i`), writes `acceptance/cNN_<name>.csv` and
//! contributes verdicts prefixed `cNN_`.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use rough_young::field::{
    drift_field, linear_field, linear_scalar_field, separable_field, Domain, HolderProfile, RoughField, SpaceFn, TimeFn,
};
use rough_young::fk::{
    cross_route_study, diffusion_expectation, fd_reference_solve, feynman_kac_solve, grid_w_integral, simulate_diffusion,
    CoeffSpec, DiffusionConfig, DiffusivitySpec, DriftSpec, EigenV, FdGrid, MCConfig, Route, Terminal,
};
use rough_young::flow::{jacobian_path, solve_rough_ode, FlowOptions, Scheme};
use rough_young::gaussian::{concentration_check, covariance_check, fbm_path, stream_rng, FbsSampler, HurstVector, SheetSample};
use rough_young::io::{fmt_f64, CsvTable, FieldSpec};
use rough_young::numeric::{fit_loglog, pairwise_sum};
use rough_young::path::{uniform_grid, Path};
use rough_young::sewing::{
    nonlinear_young_integral, sew_level_range, sew_levels, symmetric_integral_approx, ConditionMode, QuadSpec,
    SewingOptions, YoungGerm,
};
use rough_young::transport::{solve_transport, transport_residual, InitialDatum, ResidualOptions, TransportProblem};
use serde_json::json;

use crate::commands::{
    builtin_field, distance, increment_slope, leg_tolerance, random_node_pairs, smooth_sin_driver, sups, tensor_points,
    CmdResult, Ctx, Outcome,
};
use crate::config::SuiteArgs;
use crate::envelope::Verdict;

type Res<T> = CmdResult<T>;

/// One criterion: id, short name, runner.
pub struct Criterion {
    pub id: u32,
    pub name: &'static str,
    run: fn(u64) -> Res<Report>,
}

/// What a criterion produced.
pub struct Report {
    pub verdicts: Vec<Verdict>,
    pub table: CsvTable,
}

pub const CRITERIA: &[Criterion] = &[
    Criterion { id: 1, name: "young_reduction", run: c01_young_reduction },
    Criterion { id: 2, name: "sewing_order", run: c02_sewing_order },
    Criterion { id: 3, name: "additivity", run: c03_additivity },
    Criterion { id: 4, name: "flow_closed_form", run: c04_flow_closed_form },
    Criterion { id: 5, name: "flow_identities", run: c05_flow_identities },
    Criterion { id: 6, name: "jacobian_difference_quotient", run: c06_jacobian_quotient },
    Criterion { id: 7, name: "transport", run: c07_transport },
    Criterion { id: 8, name: "fk_sanity", run: c08_fk_sanity },
    Criterion { id: 9, name: "fk_vs_fd", run: c09_fk_vs_fd },
    Criterion { id: 10, name: "cross_route", run: c10_cross_route },
    Criterion { id: 11, name: "sheet_covariance", run: c11_sheet_covariance },
    Criterion { id: 12, name: "concentration", run: c12_concentration },
    Criterion { id: 13, name: "symmetric_integral", run: c13_symmetric },
    Criterion { id: 14, name: "determinism", run: c14_determinism },
];

pub fn run(args: &SuiteArgs, ctx: Ctx) -> CmdResult<Outcome> {
    if let Some(only) = &args.only {
        if let Some(bad) = only.iter().find(|i| !CRITERIA.iter().any(|c| c.id == **i)) {
            return Err(crate::commands::CmdError::Usage(format!("no criterion {bad} (known: 1-{})", CRITERIA.len())));
        }
    }
    let selected = CRITERIA.iter().filter(|c| args.only.as_ref().is_none_or(|o| o.contains(&c.id)));
    let mut outcome = Outcome::default();
    let mut summary = String::from("# rough-young acceptance summary\n# id,name,pass,value,tolerance\n");
    let mut rows = Vec::new();
    for c in selected {
        let start = Instant::now();
        let rep = (c.run)(ctx.seed)?;
        let secs = start.elapsed().as_secs_f64();
        let pass = rep.verdicts.iter().all(|v| v.pass);
        // Headline: the first failing check, else the first.
        let head = rep.verdicts.iter().find(|v| !v.pass).or(rep.verdicts.first());
        let (value, tol) = head.map_or((f64::NAN, f64::NAN), |v| (v.value, v.tolerance));
        let _ = writeln!(summary, "{},{},{},{},{}", c.id, c.name, pass, fmt_f64(value), fmt_f64(tol));
        eprintln!("c{:02} {:<30} {} ({secs:.1} s)", c.id, c.name, if pass { "pass" } else { "FAIL" });
        rows.push(json!({"id": c.id, "name": c.name, "pass": pass, "seconds": secs, "checks": rep.verdicts}));
        outcome
            .tables
            .push((format!("acceptance/c{:02}_{}.csv", c.id, c.name), rep.table.render()));
        outcome.verdicts.extend(rep.verdicts.into_iter().map(|mut v| {
            v.name = format!("c{:02}_{}", c.id, v.name);
            v
        }));
    }
    outcome.tables.push(("acceptance/acceptance_summary.csv".into(), summary));
    outcome.outputs = json!({"suite": "acceptance", "seed": ctx.seed, "criteria": rows});
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// Shared pieces
// ---------------------------------------------------------------------------

fn stream(id: u64, i: u64) -> u64 {
    1000 * id + i
}

fn rough() -> HolderProfile {
    HolderProfile::new(0.78, 1.0, 0.0).expect("valid profile")
}

fn smooth() -> HolderProfile {
    HolderProfile::new(1.0, 1.0, 0.0).expect("valid profile")
}

/// fBm sample on `[a, b]` with exponent `h - 0.02`.
fn fbm_on(h: f64, n: usize, a: f64, b: f64, seed: u64, stream: u64) -> Res<Path> {
    let p = fbm_path(h, n, b - a, seed, stream, h - 0.02)?;
    let times: Vec<f64> = p.times().iter().map(|t| t + a).collect();
    Ok(Path::scalar(times, p.values().to_vec(), p.gamma())?)
}

fn driver(p: &Path) -> Res<TimeFn> {
    Ok(TimeFn::sampled(p.clone())?)
}

fn unit_box(d: usize) -> Res<Domain> {
    Ok(Domain::cube((0.0, 1.0), d, 50.0)?)
}

fn max(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(0.0, f64::max)
}

fn rms_columns(rows: &[Vec<f64>]) -> Vec<f64> {
    (0..rows[0].len())
        .map(|k| (pairwise_sum(&rows.iter().map(|r| r[k] * r[k]).collect::<Vec<_>>()) / rows.len() as f64).sqrt())
        .collect()
}

// ---------------------------------------------------------------------------
// Integration
// ---------------------------------------------------------------------------

fn c01_young_reduction(seed: u64) -> Res<Report> {
    let n = 1usize << 14;
    let mut table = CsvTable::new(&["instance", "sewing", "classical", "gap"]).comment("W = g(t) x, g ~ fBm(0.8), phi ~ fBm(0.7)");
    let mut worst = 0.0_f64;
    for i in 0..20u64 {
        let g = fbm_path(0.8, n, 1.0, seed, stream(1, 2 * i), 0.78)?;
        let phi = fbm_path(0.7, n, 1.0, seed, stream(1, 2 * i + 1), 0.68)?;
        let field = linear_scalar_field(driver(&g)?, 1, rough(), unit_box(1)?)?;
        let sewn = sew_levels(&YoungGerm { field: &field, path: &phi }, 0.0, 1.0, 14)?.scalar();
        let (gv, pv) = (g.values(), phi.values());
        let mut classical = 0.0;
        for k in 0..n {
            classical += pv[k] * (gv[k + 1] - gv[k]);
        }
        let gap = (sewn - classical).abs();
        worst = worst.max(gap);
        table.push(vec![i as f64, sewn, classical, gap]);
    }
    Ok(Report { verdicts: vec![Verdict::at_most("max_gap", worst, 1e-6)], table })
}

fn c02_sewing_order(seed: u64) -> Res<Report> {
    let profile = HolderProfile::new(0.8, 1.0, 0.0)?;
    let (first, last) = (6, 14);
    let diffs: Vec<Vec<f64>> = (0..16u64)
        .into_par_iter()
        .map(|i| {
            let g = fbm_on(0.8, 1 << 16, 0.0, 1.0, seed, stream(2, 2 * i))?;
            let p = fbm_on(0.7, 1 << 16, 0.0, 1.0, seed, stream(2, 2 * i + 1))?;
            let phi = Path::scalar(p.times().to_vec(), p.values().to_vec(), 0.7)?;
            let field = separable_field(driver(&g)?, SpaceFn::Sin1, 1, profile, unit_box(1)?)?;
            let r = sew_level_range(&YoungGerm { field: &field, path: &phi }, 0.0, 1.0, first, last)?;
            Ok(r.differences().into_iter().map(|(_, d)| d).collect())
        })
        .collect::<Res<_>>()?;
    let rms = rms_columns(&diffs);
    let meshes: Vec<f64> = (first + 1..=last).map(|k| 0.5f64.powi(k as i32)).collect();
    let fit = fit_loglog(&meshes, &rms)?;
    let mut table = CsvTable::new(&["level", "mesh", "rms_diff"]).comment(format!(
        "slope {}, r_squared {}",
        fmt_f64(fit.slope),
        fmt_f64(fit.r_squared)
    ));
    for (k, (m, r)) in meshes.iter().zip(&rms).enumerate() {
        table.push(vec![(first + 1 + k) as f64, *m, *r]);
    }
    let target = 0.8 + 0.7 - 1.0 - 0.05;
    Ok(Report {
        verdicts: vec![
            Verdict::at_least("slope", fit.slope, target),
            Verdict::at_least("r_squared", fit.r_squared, 0.9),
        ],
        table,
    })
}

fn c03_additivity(seed: u64) -> Res<Report> {
    let tol = 1e-4;
    let opts = SewingOptions { tol, max_levels: 24, min_levels: 4 };
    let phi = fbm_path(0.7, 1 << 12, 1.0, seed, stream(3, 0), 0.68)?;
    let g = driver(&fbm_path(0.8, 1 << 14, 1.0, seed, stream(3, 1), 0.78)?)?;
    let families = [
        ("linear", linear_scalar_field(g.clone(), 1, rough(), unit_box(1)?)?),
        ("sin", separable_field(g, SpaceFn::Sin1, 1, rough(), unit_box(1)?)?),
    ];
    let mut table = CsvTable::new(&["family", "a", "c", "b", "defect"]).comment(format!("sewing tolerance {}", fmt_f64(tol)));
    let mut verdicts = Vec::new();
    for (f, (name, field)) in families.iter().enumerate() {
        let mut rng = stream_rng(seed, stream(3, 10 + f as u64));
        let triples: Vec<[f64; 3]> = (0..50)
            .map(|_| {
                let mut t = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
                t.sort_by(f64::total_cmp);
                [t[0], t[1], t[2]]
            })
            .collect();
        let integral = |a: f64, b: f64| nonlinear_young_integral(field, &phi, a, b, &opts, ConditionMode::Strict).map(|r| r.scalar());
        let mut failures = 0;
        let mut worst = 0.0_f64;
        for [a, c, b] in triples {
            let defect = (integral(a, b)? - integral(a, c)? - integral(c, b)?).abs();
            failures += usize::from(defect > 2.0 * tol);
            worst = worst.max(defect);
            table.push(vec![f as f64, a, c, b, defect]);
        }
        verdicts.push(
            Verdict::at_most(format!("{name}_failures"), failures as f64, 0.0)
                .with_detail(format!("worst defect {worst:.3e}, allowed {:.1e}", 2.0 * tol)),
        );
    }
    Ok(Report { verdicts, table })
}

fn c13_symmetric(seed: u64) -> Res<Report> {
    let eps: Vec<f64> = (2..=6).map(|k| 0.5f64.powi(k)).collect();
    let quad = QuadSpec { panels: 1 << 14, order: 4 };
    let young_opts = SewingOptions { tol: 1e-6, max_levels: 24, min_levels: 4 };
    let gaps: Vec<Vec<f64>> = (0..8u64)
        .map(|i| {
            let g = fbm_on(0.8, 1 << 14, -0.25, 1.25, seed, stream(13, 2 * i))?;
            let phi = fbm_path(0.7, 1 << 14, 1.0, seed, stream(13, 2 * i + 1), 0.68)?;
            let field = separable_field(driver(&g)?, SpaceFn::Sin1, 1, rough(), Domain::cube((-0.25, 1.25), 1, 50.0)?)?;
            let young = nonlinear_young_integral(&field, &phi, 0.0, 1.0, &young_opts, ConditionMode::Strict)?.scalar();
            eps.iter()
                .map(|e| Ok((symmetric_integral_approx(&field, &phi, 0.0, 1.0, *e, quad)?[0] - young).abs()))
                .collect()
        })
        .collect::<Res<_>>()?;
    let rms = rms_columns(&gaps);
    let fit = fit_loglog(&eps, &rms)?;
    let mut table = CsvTable::new(&["epsilon", "rms_gap"]).comment(format!("rate {}", fmt_f64(fit.slope)));
    eps.iter().zip(&rms).for_each(|(e, r)| table.push(vec![*e, *r]));
    let rate = Verdict { pass: fit.slope > 0.0, ..Verdict::at_least("rate", fit.slope, 0.0) };
    Ok(Report { verdicts: vec![rate], table })
}

// ---------------------------------------------------------------------------
// Flows
// ---------------------------------------------------------------------------

fn c04_flow_closed_form(seed: u64) -> Res<Report> {
    let n = 1usize << 14;
    let mut table =
        CsvTable::new(&["instance", "x0", "exact", "second_order", "gap", "euler_gap"]).comment("W = g(t) x, g ~ fBm(0.8)");
    let mut worst = 0.0_f64;
    for i in 0..5u64 {
        let g = fbm_path(0.8, n, 1.0, seed, stream(4, i), 0.78)?;
        let field = linear_field(driver(&g)?, 1, rough(), unit_box(1)?)?;
        let x0 = 0.5 + 0.25 * i as f64;
        let exact = x0 * (g.values()[n] - g.values()[0]).exp();
        let second = solve_rough_ode(&field, &[x0], 0.0, 1.0, n, &FlowOptions::second_order())?.end_state()[0];
        let euler = solve_rough_ode(&field, &[x0], 0.0, 1.0, n, &FlowOptions::default())?.end_state()[0];
        let gap = (second - exact).abs();
        worst = worst.max(gap);
        table.push(vec![i as f64, x0, exact, second, gap, (euler - exact).abs()]);
    }
    Ok(Report { verdicts: vec![Verdict::at_most("max_gap", worst, 1e-4)], table })
}

/// `g1(t) sin(x) + g2(t) (-x_2, x_1)` on the plane.
fn planar_field(seed: u64, id: u64, i: u64) -> Res<RoughField> {
    let g1 = driver(&fbm_path(0.8, 1 << 14, 1.0, seed, stream(id, 2 * i), 0.78)?)?;
    let g2 = driver(&fbm_path(0.8, 1 << 14, 1.0, seed, stream(id, 2 * i + 1), 0.78)?)?;
    Ok(separable_field(g1, SpaceFn::Sin, 2, rough(), unit_box(2)?)?
        .sum(&separable_field(g2, SpaceFn::Rotation, 2, rough(), unit_box(2)?)?)?)
}

fn c05_flow_identities(seed: u64) -> Res<Report> {
    let steps = 4096;
    let opts = FlowOptions::second_order();
    let mut table = CsvTable::new(&[
        "instance", "leg_tol", "composition_gap", "inverse_gap", "inverse_defect", "det_defect", "exp_div_defect",
    ]);
    let mut rng = stream_rng(seed, stream(5, 999));
    let (mut comp, mut inv, mut m_defect, mut det, mut expdiv) = (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64);
    for i in 0..20u64 {
        let field = planar_field(seed, 5, i)?;
        let x0 = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let mid = rng.random_range(0.25..0.75);
        let (one, leg_tol) = leg_tolerance(&field, &x0, 0.0, 1.0, steps, &opts)?;
        let first = solve_rough_ode(&field, &x0, 0.0, mid, steps, &opts)?;
        let second = solve_rough_ode(&field, first.end_state(), mid, 1.0, steps, &opts)?;
        let back = solve_rough_ode(&field, one.end_state(), 1.0, 0.0, steps, &opts)?;
        let c_gap = distance(one.end_state(), second.end_state());
        let i_gap = distance(back.end_state(), &x0);
        let jac = jacobian_path(&field, &one, Scheme::SecondOrder)?;
        let jmax = max(jac.dets.iter().map(|d| d.abs())).max(1.0);
        let row = [leg_tol, c_gap, i_gap, jac.inverse_defect(), jac.det_defect(), jac.exp_div_defect()];
        comp = comp.max(c_gap / (2.0 * leg_tol));
        inv = inv.max(i_gap / (2.0 * leg_tol));
        m_defect = m_defect.max(row[3]);
        det = det.max(row[4] / jmax);
        expdiv = expdiv.max(row[5] / jmax);
        table.push([vec![i as f64], row.to_vec()].concat());
    }
    // Divergence-free: the rotation alone.
    let mut div_free = 0.0_f64;
    for i in 0..5u64 {
        let g = driver(&fbm_path(0.8, 1 << 14, 1.0, seed, stream(5, 100 + i), 0.78)?)?;
        let field = separable_field(g, SpaceFn::Rotation, 2, rough(), unit_box(2)?)?;
        let sol = solve_rough_ode(&field, &[0.6, -0.3], 0.0, 1.0, steps, &opts)?;
        let jac = jacobian_path(&field, &sol, Scheme::SecondOrder)?;
        div_free = div_free.max(max(jac.dets.iter().map(|d| (d - 1.0).abs())));
    }
    table = table.comment(format!("divergence-free max |J - 1| {}", fmt_f64(div_free)));
    Ok(Report {
        verdicts: vec![
            Verdict::at_most("composition_over_2_leg_tol", comp, 1.0),
            Verdict::at_most("inverse_over_2_leg_tol", inv, 1.0),
            Verdict::at_most("grad_phi_times_m", m_defect, 1e-6),
            Verdict::at_most("det_equals_j", det, 1e-6),
            Verdict::at_most("j_equals_exp_div", expdiv, 1e-6),
            Verdict::at_most("divergence_free_j", div_free, 1e-6),
        ],
        table,
    })
}

fn c06_jacobian_quotient(seed: u64) -> Res<Report> {
    let (steps, h) = (4096, 1e-4);
    let opts = FlowOptions::default();
    let mut table = CsvTable::new(&["instance", "direction", "max_gap"]).comment(format!("h = {}", fmt_f64(h)));
    let mut worst = 0.0_f64;
    for i in 0..5u64 {
        let field = planar_field(seed, 6, i)?;
        let x0 = [0.3 - 0.1 * i as f64, 0.2 + 0.05 * i as f64];
        let base = solve_rough_ode(&field, &x0, 0.0, 1.0, steps, &opts)?;
        let jac = jacobian_path(&field, &base, Scheme::Euler)?;
        for e in 0..2 {
            let mut x1 = x0;
            x1[e] += h;
            let bumped = solve_rough_ode(&field, &x1, 0.0, 1.0, steps, &opts)?;
            let gap = max((0..base.times.len()).map(|k| {
                let m = &jac.matrices[k];
                let q: Vec<f64> = (0..2).map(|r| (bumped.state(k)[r] - base.state(k)[r]) / h - m[r * 2 + e]).collect();
                q.iter().map(|v| v * v).sum::<f64>().sqrt()
            }));
            worst = worst.max(gap);
            table.push(vec![i as f64, e as f64, gap]);
        }
    }
    Ok(Report { verdicts: vec![Verdict::at_most("max_gap", worst, 10.0 * h)], table })
}

fn c07_transport(seed: u64) -> Res<Report> {
    let mut table = CsvTable::new(&["case", "x_or_level", "value", "reference", "gap"]);
    let mut verdicts = Vec::new();

    let b = [1.0, 0.5];
    let drift = drift_field(TimeFn::Identity, b.to_vec(), 2, smooth(), Domain::cube((-1.0, 2.0), 2, 50.0)?)?;
    let nodes = tensor_points(&[uniform_grid(-1.0, 1.0, 8), uniform_grid(-1.0, 1.0, 8)]);
    let h = InitialDatum::gaussian();
    let sol = solve_transport(&TransportProblem::new(drift, h.clone(), 0.0, nodes.clone())?, 1.0, 64)?;
    let mut worst = 0.0_f64;
    for (x, u) in nodes.iter().zip(&sol.values) {
        let exact = h.eval(&[x[0] - b[0], x[1] - b[1]]);
        worst = worst.max((u - exact).abs());
    }
    table.push(vec![0.0, f64::NAN, f64::NAN, f64::NAN, worst]);
    verdicts.push(Verdict::at_most("constant_drift", worst, 1e-12));

    let g = fbm_path(0.8, 1 << 14, 1.0, seed, stream(7, 0), 0.78)?;
    let dg = g.values()[1 << 14] - g.values()[0];
    let linear = linear_field(driver(&g)?, 1, rough(), unit_box(1)?)?;
    let grid: Vec<Vec<f64>> = uniform_grid(-2.0, 2.0, 16).into_iter().map(|x| vec![x]).collect();
    let problem = TransportProblem::new(linear, h.clone(), 0.0, grid.clone())?.with_flow(FlowOptions::second_order());
    let sol = solve_transport(&problem, 1.0, 1 << 14)?;
    let mut worst = 0.0_f64;
    for (x, u) in grid.iter().zip(&sol.values) {
        let exact = h.eval(&[x[0] * (-dg).exp()]);
        worst = worst.max((u - exact).abs());
        table.push(vec![1.0, x[0], *u, exact, (u - exact).abs()]);
    }
    verdicts.push(Verdict::at_most("linear_closed_form", worst, 1e-5));

    let rough_field = builtin_field("fbm-sin", seed)?;
    let problem = TransportProblem::new(rough_field, h, 0.0, vec![vec![0.3]])?;
    let mut residuals = Vec::new();
    for level in 3..=7u32 {
        let opts = ResidualOptions { level, steps_per_unit: 1 << 14, hx: Some(1e-4) };
        let r = transport_residual(&problem, &[0.3], 1.0, &opts)?.residual.abs();
        table.push(vec![2.0, level as f64, r, f64::NAN, f64::NAN]);
        residuals.push(r);
    }
    let increases = residuals.windows(2).filter(|w| !(w[1] < w[0])).count();
    verdicts.push(Verdict::at_most("residual_non_decreasing_steps", increases as f64, 0.0));
    Ok(Report { verdicts, table: table.comment("case 0 constant drift, 1 linear field, 2 rough residual by level") })
}

// ---------------------------------------------------------------------------
// Feynman-Kac
// ---------------------------------------------------------------------------

fn c08_fk_sanity(seed: u64) -> Res<Report> {
    let mut table = CsvTable::new(&["case", "value", "reference", "stderr_or_gap"]);
    let zero = builtin_field("zero2", seed)?;
    let cfg = DiffusionConfig::brownian(2);
    let square = Terminal::builtin("square")?;
    let x = vec![0.5, -0.3];
    let mc = MCConfig::new(100_000, 16, seed ^ stream(8, 0));
    let est = &feynman_kac_solve(&zero, &cfg, &square, 1.0, &[(0.0, x.clone())], &mc, Route::Pathwise)?.points[0];
    let exact = x.iter().map(|v| v * v).sum::<f64>() + 2.0;
    table.push(vec![0.0, est.u, exact, est.stderr]);

    let g = fbm_path(0.8, 1 << 10, 1.0, seed, stream(8, 1), 0.78)?;
    let dg = g.values()[1 << 10] - g.values()[0];
    let flat = drift_field(driver(&g)?, vec![1.0], 1, rough(), unit_box(1)?)?;
    let cfg1 = DiffusionConfig::brownian(1);
    let mc1 = MCConfig::new(2000, 64, seed ^ stream(8, 2));
    let paths = simulate_diffusion(&cfg1, 0.0, &[0.4], 1.0, &mc1)?;
    let per_path = max(paths.iter().map(|p| grid_w_integral(&flat, p).map(|i| (i - dg).abs())).collect::<rough_young::Result<Vec<_>>>()?);
    let u = feynman_kac_solve(&flat, &cfg1, &square, 1.0, &[(0.0, vec![0.4])], &mc1, Route::Pathwise)?.points[0].u;
    let (eu, _) = diffusion_expectation(&cfg1, &square, 0.0, &[0.4], 1.0, &mc1)?;
    let factor_gap = (u - dg.exp() * eu).abs() / u.abs();
    table.push(vec![1.0, u, dg.exp() * eu, factor_gap]);
    Ok(Report {
        verdicts: vec![
            Verdict::at_most("zero_potential_gap_over_stderr", (est.u - exact).abs() / est.stderr, 4.0),
            Verdict::at_most("space_free_per_path", per_path, 1e-12),
            Verdict::at_most("space_free_factorisation", factor_gap, 1e-12),
        ],
        table: table.comment("case 0 W = 0 in 2-d, 1 space-free potential"),
    })
}

fn c09_fk_vs_fd(seed: u64) -> Res<Report> {
    let spec = json!({
        "kind": "sheet",
        "profile": {"tau": 0.78, "lambda": 0.68},
        "params": {"hurst": [0.8, 0.7], "axes": [[-0.25, 0.75, 65], [-6.25, 6.25, 201]], "seed": seed},
        "mollify": {"epsilon": 0.25, "nodes": 9, "tabulate": [129, 481]},
    });
    let field = FieldSpec::from_json(&spec.to_string())?.build(std::path::Path::new("."))?;
    let coeffs = CoeffSpec {
        a: DiffusivitySpec::SinModulated { base: 1.0, amp: 0.2 },
        b: DriftSpec::ClampedLinear { k: 0.1, clip: 3.0 },
    };
    let cfg = DiffusionConfig::from_spec(&coeffs, 1)?;
    let terminal = Terminal::builtin("gaussian")?;
    let t_end = 0.5;
    let points: Vec<Vec<f64>> = vec![vec![-0.5], vec![0.0], vec![0.5]];
    let grid: Vec<(f64, Vec<f64>)> = points.iter().map(|x| (0.0, x.clone())).collect();
    let mc = MCConfig::new(200_000, 256, seed ^ stream(9, 0));
    let sol = feynman_kac_solve(&field, &cfg, &terminal, t_end, &grid, &mc, Route::Pathwise)?;
    let fd = fd_reference_solve(Some(&field), &cfg, &terminal, 0.0, t_end, &FdGrid::padded(&points, &cfg, 0.0, t_end, 800, 800)?)?;
    let mut table = CsvTable::new(&["x", "u_mc", "stderr", "u_fd", "gap", "allowed"]);
    let mut worst = 0.0_f64;
    for e in &sol.points {
        let u_fd = fd.value_at(&e.x)?;
        let gap = (e.u - u_fd).abs();
        let allowed = (0.02 * u_fd.abs()).max(3.0 * e.stderr);
        worst = worst.max(gap / allowed);
        table.push(vec![e.x[0], e.u, e.stderr, u_fd, gap, allowed]);
    }
    Ok(Report { verdicts: vec![Verdict::at_most("gap_over_allowed", worst, 1.0)], table })
}

fn c10_cross_route(seed: u64) -> Res<Report> {
    let field = builtin_field("smooth-sin", seed)?;
    let cfg = DiffusionConfig::brownian(1);
    let v = EigenV::sine(smooth_sin_driver(), 1.0, 1.0);
    let rep = cross_route_study(&field, &cfg, &v, 0.0, &[0.3], 1.0, 1000, 8, 6, seed ^ stream(10, 0))?;
    let mut table = CsvTable::new(&["steps", "rms_gap"]).comment(format!("order {}", fmt_f64(rep.order)));
    rep.steps.iter().zip(&rep.rms).for_each(|(s, r)| table.push(vec![*s as f64, *r]));
    Ok(Report { verdicts: vec![Verdict::at_least("order", rep.order, 0.4)], table })
}

// ---------------------------------------------------------------------------
// Sheets
// ---------------------------------------------------------------------------

fn draws(hurst: &[f64], n: usize, count: u64, seed: u64, id: u64) -> Res<Vec<SheetSample>> {
    let axes = vec![uniform_grid(0.0, 1.0, n - 1); hurst.len()];
    let sampler = FbsSampler::new(HurstVector::new(hurst.to_vec())?, axes)?;
    Ok((0..count).into_par_iter().map(|i| sampler.sample(seed, stream(id, i))).collect())
}

fn c11_sheet_covariance(seed: u64) -> Res<Report> {
    let hurst = [0.3, 0.8];
    let samples = draws(&hurst, 33, 2000, seed, 11)?;
    let mut table = CsvTable::new(&["kind", "index", "empirical", "target", "z_or_side"]);
    let mut worst_z = 0.0_f64;
    for (k, (x, y)) in random_node_pairs(&samples[0].axes, 10, seed, stream(11, 999)).into_iter().enumerate() {
        let r = covariance_check(&samples, &x, &y)?;
        worst_z = worst_z.max(r.z.abs());
        table.push(vec![0.0, k as f64, r.empirical, r.target, r.z]);
    }
    let mut verdicts = vec![Verdict::at_most("covariance_max_abs_z", worst_z, 4.0)];
    for (a, h) in hurst.iter().enumerate() {
        let (slope, rows) = increment_slope(&samples, a)?;
        rows.iter().for_each(|(s, e, t)| table.push(vec![1.0 + a as f64, 0.0, *e, *t, *s]));
        verdicts.push(
            Verdict::at_most(format!("increment_slope_axis_{a}"), (slope - 2.0 * h).abs(), 0.1)
                .with_detail(format!("slope {slope:.4}, target {:.4}", 2.0 * h)),
        );
    }
    Ok(Report { verdicts, table: table.comment("kind 0 covariance pairs, 1 and 2 increments on axis 0 and 1") })
}

fn c12_concentration(seed: u64) -> Res<Report> {
    let samples = draws(&[0.5, 0.5], 33, 1000, seed, 12)?;
    let delta = [0.5, 0.5];
    let rep = concentration_check(&sups(&samples, &delta, 1.0)?, delta.iter().product(), &[1.0, 2.0, 3.0])?;
    let mut table = CsvTable::new(&["r", "frequency", "bound", "half_width"]);
    let mut excess = f64::NEG_INFINITY;
    for i in 0..rep.r_values.len() {
        table.push(vec![rep.r_values[i], rep.frequencies[i], rep.bounds[i], rep.half_widths[i]]);
        excess = excess.max(rep.frequencies[i] - rep.bounds[i] - 3.0 * rep.half_widths[i]);
    }
    Ok(Report { verdicts: vec![Verdict::at_most("excess_over_bound", excess, 0.0)], table })
}

// ---------------------------------------------------------------------------
// Determinism
// ---------------------------------------------------------------------------

fn c14_determinism(seed: u64) -> Res<Report> {
    let mut table = CsvTable::new(&["criterion", "bytes", "identical"]);
    let mut mismatches = 0;
    for c in CRITERIA.iter().filter(|c| matches!(c.id, 1 | 4 | 8)) {
        let a = (c.run)(seed)?.table.render();
        let b = (c.run)(seed)?.table.render();
        mismatches += usize::from(a != b);
        table.push(vec![c.id as f64, a.len() as f64, f64::from(u8::from(a == b))]);
    }
    Ok(Report { verdicts: vec![Verdict::at_most("rerun_mismatches", mismatches as f64, 0.0)], table })
}
