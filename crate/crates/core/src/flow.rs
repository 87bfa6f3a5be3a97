//! Rough ODEs `phi_t = x + int_{t0}^t W(ds, phi_s)` and the flow they generate:
//! trajectories, flow maps, inverses, Jacobian dynamics and chain-rule checks.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::field::{estimate_seminorms, FnField, RoughField, SeminormGrid};
use crate::numeric::{norm, pairwise_sum};
use crate::path::{uniform_grid, Path};
use crate::sewing::{sew, FnGerm, SewingOptions};

/// One-step germ used by the trajectory solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// `phi_{k+1} = phi_k + W(t_{k+1}, phi_k) - W(t_k, phi_k)`.
    #[default]
    Euler,
    /// Adds `1/2 grad W(D, phi_k) W(D, phi_k)` to the Euler step and uses
    /// matrix exponentials for the linear Jacobian equations. Differs from the
    /// Euler germ by `O(|D|^{2 tau})`, so it has the same limit; requires a
    /// field with gradient.
    SecondOrder,
}

/// Constants `(C, kappa)` of the a-priori sup bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub c: f64,
    pub kappa: f64,
}

impl Default for BoundConstants {
    fn default() -> Self {
        Self { c: 1.0, kappa: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowOptions {
    pub scheme: Scheme,
    pub constants: BoundConstants,
    /// Field seminorm used in the a-priori bound; estimated on a grid over
    /// the field's domain when absent.
    pub field_norm: Option<f64>,
    /// Trajectories exceeding `blowup_factor * a_priori_bound` fail.
    pub blowup_factor: f64,
    /// Constant `A` in the step rule `D = (2 A ||W||)^{-1/(tau lambda)}`;
    /// `None` disables the cap.
    pub step_rule: Option<f64>,
    /// Reject fields with `tau (1 + lambda) <= 1`.
    pub strict: bool,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            scheme: Scheme::Euler,
            constants: BoundConstants::default(),
            field_norm: None,
            blowup_factor: 1e3,
            step_rule: None,
            strict: true,
        }
    }
}

impl FlowOptions {
    pub fn second_order() -> Self {
        Self { scheme: Scheme::SecondOrder, ..Self::default() }
    }
}

/// A computed trajectory. Times are stored in integration order, so they
/// decrease for backward problems.
#[derive(Debug, Clone, Serialize)]
pub struct FlowSolution {
    pub times: Vec<f64>,
    /// Row-major states, `states[k * dim + i]`.
    pub states: Vec<f64>,
    pub dim: usize,
    pub field_ref: String,
    pub step_count: usize,
    pub a_priori_bound: f64,
    pub achieved_sup: f64,
    /// Grid `tau`-Hölder norm of the trajectory (at most 257 strided nodes).
    pub achieved_holder: f64,
    pub warnings: Vec<String>,
}

impl FlowSolution {
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn end_state(&self) -> &[f64] {
        self.state(self.times.len() - 1)
    }

    pub fn start_time(&self) -> f64 {
        self.times[0]
    }

    pub fn end_time(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Trajectory as an increasing-time [`Path`] with exponent `gamma`.
    pub fn path(&self, gamma: f64) -> Result<Path> {
        if self.times.len() < 2 {
            return arg("a zero-length trajectory has no path");
        }
        if self.times[1] > self.times[0] {
            return Path::new(self.times.clone(), self.states.clone(), self.dim, gamma);
        }
        let n = self.times.len();
        let times: Vec<f64> = self.times.iter().rev().copied().collect();
        let mut states = Vec::with_capacity(self.states.len());
        for k in (0..n).rev() {
            states.extend_from_slice(self.state(k));
        }
        Path::new(times, states, self.dim, gamma)
    }
}

/// `C exp(kappa ||W||^{(1 - tau + tau lambda) / (tau lambda)}) (1 v |x0|)`.
pub fn a_priori_sup_bound(field_norm: f64, x0_norm: f64, _horizon: f64, tau: f64, lambda: f64, k: BoundConstants) -> f64 {
    let p = (1.0 - tau + tau * lambda) / (tau * lambda);
    k.c * (k.kappa * field_norm.powf(p)).exp() * x0_norm.max(1.0)
}

/// Largest step allowed by `A ||W|| D^{tau lambda} = 1/2`.
pub fn max_step(field_norm: f64, tau: f64, lambda: f64, a: f64) -> f64 {
    if field_norm <= 0.0 {
        return f64::INFINITY;
    }
    (2.0 * a * field_norm).powf(-1.0 / (tau * lambda))
}

/// Fits `(C, kappa)` so that the bound covers every training sample
/// `(field_norm, |x0|, achieved_sup)`: `kappa` is the non-negative least
/// squares slope of `log(sup / (1 v |x0|))` against the norm power, and `C`
/// is lifted until no sample exceeds the bound, then padded by `margin`.
pub fn fit_bound_constants(samples: &[(f64, f64, f64)], tau: f64, lambda: f64, margin: f64) -> Result<BoundConstants> {
    if samples.len() < 2 {
        return arg("need at least two samples to fit bound constants");
    }
    let p = (1.0 - tau + tau * lambda) / (tau * lambda);
    let xs: Vec<f64> = samples.iter().map(|s| s.0.powf(p)).collect();
    let ys: Vec<f64> = samples.iter().map(|s| (s.2 / s.1.max(1.0)).ln()).collect();
    let kappa = crate::numeric::fit_line(&xs, &ys).map(|f| f.slope.max(0.0)).unwrap_or(0.0);
    let log_c = xs.iter().zip(&ys).map(|(x, y)| y - kappa * x).fold(f64::NEG_INFINITY, f64::max);
    Ok(BoundConstants { c: log_c.exp() * margin, kappa })
}

/// Grid estimate of `||W||` over the field's domain (time and rectangle
/// seminorms).
pub fn field_norm_estimate(field: &RoughField, nt: usize, nx: usize) -> Result<f64> {
    let dom = field.domain();
    let grid = SeminormGrid::uniform(dom.t.0, dom.t.1, nt, &dom.lo, &dom.hi, nx);
    let r = estimate_seminorms(field, &grid)?;
    Ok(r.rect_seminorm + r.time_seminorm)
}

fn check_flow_field(field: &RoughField, x0: &[f64], strict: bool) -> Result<Vec<String>> {
    let d = field.dim_in();
    if field.dim_out() != d || x0.len() != d {
        return arg(format!(
            "flow needs W: R^{d} -> R^{d} and a {d}-d start point (got out={}, x0={})",
            field.dim_out(),
            x0.len()
        ));
    }
    let p = field.profile();
    let mut warnings = vec![];
    if p.tau * (1.0 + p.lambda) <= 1.0 {
        let msg = format!("tau(1+lambda) = {} is not > 1", p.tau * (1.0 + p.lambda));
        if strict {
            return Err(Error::Precondition(msg));
        }
        warnings.push(msg);
    }
    if p.beta + p.lambda > 1.0 {
        warnings.push(format!("beta + lambda = {} exceeds 1", p.beta + p.lambda));
    }
    Ok(warnings)
}

struct Stepper<'a> {
    field: &'a RoughField,
    scheme: Scheme,
    d: usize,
    w0: Vec<f64>,
    w1: Vec<f64>,
    g0: Vec<f64>,
    g1: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(field: &'a RoughField, scheme: Scheme) -> Result<Self> {
        let d = field.dim_in();
        if scheme == Scheme::SecondOrder && !field.has_gradient() {
            return Err(Error::Capability("second-order scheme needs a field gradient"));
        }
        Ok(Self { field, scheme, d, w0: vec![0.0; d], w1: vec![0.0; d], g0: vec![0.0; d * d], g1: vec![0.0; d * d] })
    }

    /// Advances `x` from time `s` to time `t` (either direction).
    fn step(&mut self, s: f64, t: f64, x: &mut [f64]) -> Result<()> {
        self.field.eval_into(t, x, &mut self.w1)?;
        self.field.eval_into(s, x, &mut self.w0)?;
        let d = self.d;
        if self.scheme == Scheme::SecondOrder {
            self.field.gradient_into(t, x, &mut self.g1)?;
            self.field.gradient_into(s, x, &mut self.g0)?;
            for i in 0..d {
                let mut corr = 0.0;
                for j in 0..d {
                    corr += (self.g1[i * d + j] - self.g0[i * d + j]) * (self.w1[j] - self.w0[j]);
                }
                x[i] += self.w1[i] - self.w0[i] + 0.5 * corr;
            }
        } else {
            for i in 0..d {
                x[i] += self.w1[i] - self.w0[i];
            }
        }
        Ok(())
    }
}

/// Solves the rough ODE from `(t0, x0)` to time `t_end` (either direction)
/// on a uniform grid of `steps` cells.
pub fn solve_rough_ode(
    field: &RoughField,
    x0: &[f64],
    t0: f64,
    t_end: f64,
    steps: usize,
    opts: &FlowOptions,
) -> Result<FlowSolution> {
    let warnings = check_flow_field(field, x0, opts.strict)?;
    let p = *field.profile();
    let w_norm = match opts.field_norm {
        Some(v) => v,
        None => field_norm_estimate(field, 9, 9)?,
    };
    let bound = a_priori_sup_bound(w_norm, norm(x0), (t_end - t0).abs(), p.tau, p.lambda, opts.constants);
    let d = x0.len();
    if t_end == t0 {
        return Ok(FlowSolution {
            times: vec![t0],
            states: x0.to_vec(),
            dim: d,
            field_ref: field.label().to_string(),
            step_count: 0,
            a_priori_bound: bound,
            achieved_sup: norm(x0),
            achieved_holder: 0.0,
            warnings,
        });
    }
    if steps < 2 {
        return arg("solve_rough_ode needs at least 2 steps");
    }
    let mut steps = steps;
    if let Some(a) = opts.step_rule {
        let cap = max_step(w_norm, p.tau, p.lambda, a);
        let needed = ((t_end - t0).abs() / cap).ceil();
        if needed > (1u64 << 24) as f64 {
            return arg(format!("step rule asks for {needed} steps"));
        }
        steps = steps.max(needed as usize);
    }
    let times = uniform_grid(t0, t_end, steps);
    let mut states = Vec::with_capacity((steps + 1) * d);
    states.extend_from_slice(x0);
    let mut x = x0.to_vec();
    let mut stepper = Stepper::new(field, opts.scheme)?;
    let guard = opts.blowup_factor * bound;
    let mut sup = norm(x0);
    for k in 0..steps {
        stepper.step(times[k], times[k + 1], &mut x)?;
        let n = norm(&x);
        if !n.is_finite() || n > guard {
            return Err(Error::Divergence { t: times[k + 1], norm: n, guard });
        }
        sup = sup.max(n);
        states.extend_from_slice(&x);
    }
    let mut sol = FlowSolution {
        times,
        states,
        dim: d,
        field_ref: field.label().to_string(),
        step_count: steps,
        a_priori_bound: bound,
        achieved_sup: sup,
        achieved_holder: 0.0,
        warnings,
    };
    sol.achieved_holder = holder_on_subgrid(&sol, p.tau, 256)?;
    Ok(sol)
}

/// Grid Hölder norm over at most `max_cells + 1` equally strided nodes.
pub fn holder_on_subgrid(sol: &FlowSolution, exponent: f64, max_cells: usize) -> Result<f64> {
    let n = sol.times.len();
    let stride = (n - 1).div_ceil(max_cells).max(1);
    let mut idx: Vec<usize> = (0..n).step_by(stride).collect();
    if *idx.last().expect("non-empty") != n - 1 {
        idx.push(n - 1);
    }
    let mut times: Vec<f64> = idx.iter().map(|&k| sol.times[k]).collect();
    let mut states: Vec<f64> = idx.iter().flat_map(|&k| sol.state(k).to_vec()).collect();
    if times[1] < times[0] {
        times.reverse();
        states = states.chunks(sol.dim).rev().flatten().copied().collect();
    }
    Ok(Path::new(times, states, sol.dim, 1.0)?.holder_norm_with(exponent))
}

/// `max_k |phi_k - x - int_{t0}^{t_k} W(ds, phi_s)|`, with the integral taken
/// as cumulative Riemann sums on the trajectory grid refined `2^refine` times
/// (the trajectory is read off-grid by linear interpolation).
pub fn ode_residual(field: &RoughField, sol: &FlowSolution, refine: u32) -> Result<f64> {
    let d = sol.dim;
    let n = sol.times.len();
    if n < 2 {
        return Ok(0.0);
    }
    let path = sol.path(1.0)?;
    let sub = 1usize << refine;
    let cells: Vec<Result<Vec<f64>>> = (0..n - 1)
        .into_par_iter()
        .map(|k| {
            let (s, t) = (sol.times[k], sol.times[k + 1]);
            let mut acc = vec![vec![0.0; sub]; d];
            let mut x = vec![0.0; d];
            for j in 0..sub {
                let a = s + (t - s) * j as f64 / sub as f64;
                let b = if j + 1 == sub { t } else { s + (t - s) * (j + 1) as f64 / sub as f64 };
                path.eval_into(a, &mut x)?;
                let hi = field.eval(b, &x)?;
                let lo = field.eval(a, &x)?;
                for i in 0..d {
                    acc[i][j] = hi[i] - lo[i];
                }
            }
            Ok(acc.iter().map(|c| pairwise_sum(c)).collect())
        })
        .collect();
    let mut integral = vec![0.0; d];
    let mut worst = 0.0_f64;
    for (k, c) in cells.into_iter().enumerate() {
        let c = c?;
        for i in 0..d {
            integral[i] += c[i];
        }
        let r: Vec<f64> = (0..d).map(|i| sol.state(k + 1)[i] - sol.state(0)[i] - integral[i]).collect();
        worst = worst.max(norm(&r));
    }
    Ok(worst)
}

/// Slow reference: Picard iterates `phi^{n+1} = x + int W(ds, phi^n)` on the
/// grid, each integral sewn per cell. Returns the last iterate and the sup
/// distances between successive iterates.
pub fn picard_solve(
    field: &RoughField,
    x0: &[f64],
    t0: f64,
    t_end: f64,
    steps: usize,
    iterations: usize,
    sewing: &SewingOptions,
) -> Result<(FlowSolution, Vec<f64>)> {
    check_flow_field(field, x0, true)?;
    if steps < 2 || t0 == t_end {
        return arg("picard_solve needs steps >= 2 and t0 != t_end");
    }
    let d = x0.len();
    let times = uniform_grid(t0, t_end, steps);
    let mut states: Vec<f64> = times.iter().flat_map(|_| x0.to_vec()).collect();
    let mut diffs = Vec::with_capacity(iterations);
    let sign = if t_end > t0 { 1.0 } else { -1.0 };
    for _ in 0..iterations {
        let cur = FlowSolution {
            times: times.clone(),
            states: states.clone(),
            dim: d,
            field_ref: String::new(),
            step_count: steps,
            a_priori_bound: 0.0,
            achieved_sup: 0.0,
            achieved_holder: 0.0,
            warnings: vec![],
        };
        let path = cur.path(1.0)?;
        let eps = field.profile().young_exponent(field.profile().tau) - 1.0;
        let cells: Vec<Result<Vec<f64>>> = times
            .par_windows(2)
            .map(|w| {
                let (a, b) = if sign > 0.0 { (w[0], w[1]) } else { (w[1], w[0]) };
                let germ = FnGerm::new(d, eps, |s, t, o: &mut [f64]| {
                    let x = path.eval(s).expect("inside path");
                    let hi = field.eval(t, &x).expect("inside domain");
                    let lo = field.eval(s, &x).expect("inside domain");
                    o.iter_mut().enumerate().for_each(|(i, v)| *v = hi[i] - lo[i]);
                });
                let v = sew(&germ, a, b, sewing)?.value;
                Ok(v.into_iter().map(|x| sign * x).collect())
            })
            .collect();
        let mut next = Vec::with_capacity(states.len());
        next.extend_from_slice(x0);
        let mut acc = x0.to_vec();
        for c in cells {
            let c = c?;
            acc.iter_mut().zip(&c).for_each(|(a, v)| *a += v);
            next.extend_from_slice(&acc);
        }
        let diff = next.chunks(d).zip(states.chunks(d)).map(|(a, b)| {
            norm(&a.iter().zip(b).map(|(p, q)| p - q).collect::<Vec<_>>())
        });
        diffs.push(diff.fold(0.0, f64::max));
        states = next;
    }
    let sup = states.chunks(d).map(norm).fold(0.0, f64::max);
    Ok((
        FlowSolution {
            times,
            states,
            dim: d,
            field_ref: field.label().to_string(),
            step_count: steps,
            a_priori_bound: f64::NAN,
            achieved_sup: sup,
            achieved_holder: f64::NAN,
            warnings: vec![],
        },
        diffs,
    ))
}

/// Trajectories from a set of start points on a shared time grid.
#[derive(Debug, Clone, Serialize)]
pub struct FlowMap {
    pub initial_points: Vec<Vec<f64>>,
    pub trajectories: Vec<FlowSolution>,
    pub times: Vec<f64>,
    /// Smallest pairwise distance between end states.
    pub min_separation: f64,
    pub injective: bool,
}

impl FlowMap {
    pub fn end_points(&self) -> Vec<Vec<f64>> {
        self.trajectories.iter().map(|s| s.end_state().to_vec()).collect()
    }
}

/// Solves from every grid point in parallel and checks that distinct start
/// points stay distinct (tolerance `1e-8 * domain size`).
pub fn flow_map(
    field: &RoughField,
    grid: &[Vec<f64>],
    t0: f64,
    t: f64,
    steps: usize,
    opts: &FlowOptions,
) -> Result<FlowMap> {
    if grid.is_empty() {
        return arg("flow_map needs at least one start point");
    }
    let mut o = *opts;
    if o.field_norm.is_none() {
        o.field_norm = Some(field_norm_estimate(field, 9, 9)?);
    }
    let trajectories: Vec<FlowSolution> = grid
        .par_iter()
        .map(|x| solve_rough_ode(field, x, t0, t, steps, &o))
        .collect::<Result<_>>()?;
    let dom = field.domain();
    let size = dom.lo.iter().zip(&dom.hi).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt();
    let ends: Vec<&[f64]> = trajectories.iter().map(|s| s.end_state()).collect();
    let mut min_sep = f64::INFINITY;
    let mut injective = true;
    for i in 0..ends.len() {
        for j in (i + 1)..ends.len() {
            let dist = norm(&ends[i].iter().zip(ends[j]).map(|(a, b)| a - b).collect::<Vec<_>>());
            let start = norm(&grid[i].iter().zip(&grid[j]).map(|(a, b)| a - b).collect::<Vec<_>>());
            min_sep = min_sep.min(dist);
            if start > 0.0 && dist <= 1e-8 * size {
                injective = false;
            }
        }
    }
    Ok(FlowMap {
        initial_points: grid.to_vec(),
        times: trajectories[0].times.clone(),
        trajectories,
        min_separation: min_sep,
        injective,
    })
}

/// `phi(t, .)^{-1}(x)`: integrates from `(t, x)` back to `t0`.
pub fn inverse_flow(field: &RoughField, x: &[f64], t0: f64, t: f64, steps: usize, opts: &FlowOptions) -> Result<Vec<f64>> {
    Ok(solve_rough_ode(field, x, t, t0, steps, opts)?.end_state().to_vec())
}

/// `grad phi`, its inverse `M` and `J = det grad phi` along a trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct JacobianPath {
    pub times: Vec<f64>,
    pub dim: usize,
    /// Row-major `d x d` matrices.
    pub matrices: Vec<Vec<f64>>,
    pub inverses: Vec<Vec<f64>>,
    pub dets: Vec<f64>,
    /// Running `int Div W(ds, phi_s)`.
    pub div_integral: Vec<f64>,
}

impl JacobianPath {
    /// `max_k |grad phi_k M_k - I|` (Frobenius).
    pub fn inverse_defect(&self) -> f64 {
        let d = self.dim;
        self.matrices
            .iter()
            .zip(&self.inverses)
            .map(|(g, m)| {
                let p = DMatrix::from_row_slice(d, d, g) * DMatrix::from_row_slice(d, d, m);
                (p - DMatrix::identity(d, d)).norm()
            })
            .fold(0.0, f64::max)
    }

    /// `max_k |det(grad phi_k) - J_k|`.
    pub fn det_defect(&self) -> f64 {
        let d = self.dim;
        self.matrices
            .iter()
            .zip(&self.dets)
            .map(|(g, j)| (DMatrix::from_row_slice(d, d, g).determinant() - j).abs())
            .fold(0.0, f64::max)
    }

    /// `max_k |J_k - exp(int_0^{t_k} Div W(ds, phi_s))|`.
    pub fn exp_div_defect(&self) -> f64 {
        self.dets
            .iter()
            .zip(&self.div_integral)
            .map(|(j, s)| (j - s.exp()).abs())
            .fold(0.0, f64::max)
    }
}

/// Solves the three linear equations for `grad phi`, `M` and `J` along the
/// trajectory's own grid, driven by `A_k = grad W(t_{k+1}, phi_k) - grad W(t_k, phi_k)`.
pub fn jacobian_path(field: &RoughField, flow: &FlowSolution, scheme: Scheme) -> Result<JacobianPath> {
    if !field.has_gradient() {
        return Err(Error::Capability("jacobian_path needs a field gradient"));
    }
    let d = flow.dim;
    let n = flow.times.len();
    let id = DMatrix::<f64>::identity(d, d);
    let mut g = id.clone();
    let mut m = id.clone();
    let mut j = 1.0;
    let mut div = 0.0;
    let mut out = JacobianPath {
        times: flow.times.clone(),
        dim: d,
        matrices: Vec::with_capacity(n),
        inverses: Vec::with_capacity(n),
        dets: Vec::with_capacity(n),
        div_integral: Vec::with_capacity(n),
    };
    let push = |out: &mut JacobianPath, g: &DMatrix<f64>, m: &DMatrix<f64>, j: f64, div: f64| {
        out.matrices.push(g.transpose().as_slice().to_vec());
        out.inverses.push(m.transpose().as_slice().to_vec());
        out.dets.push(j);
        out.div_integral.push(div);
    };
    push(&mut out, &g, &m, j, div);
    let mut g0 = vec![0.0; d * d];
    let mut g1 = vec![0.0; d * d];
    for k in 0..n.saturating_sub(1) {
        let x = flow.state(k);
        field.gradient_into(flow.times[k + 1], x, &mut g1)?;
        field.gradient_into(flow.times[k], x, &mut g0)?;
        let a = DMatrix::from_row_slice(d, d, &g1) - DMatrix::from_row_slice(d, d, &g0);
        let tr = a.trace();
        match scheme {
            Scheme::Euler => {
                g = (&id + &a) * &g;
                m = &m * (&id - &a);
                j *= 1.0 + tr;
            }
            Scheme::SecondOrder => {
                g = a.clone().exp() * &g;
                m = &m * (-a).exp();
                j *= tr.exp();
            }
        }
        div += tr;
        push(&mut out, &g, &m, j, div);
    }
    Ok(out)
}

/// The scalar field `Div W(t, x) = sum_i d_i W_i(t, x)` of a field with gradient.
pub fn divergence_field(field: &RoughField) -> Result<RoughField> {
    if !field.has_gradient() || field.dim_in() != field.dim_out() {
        return Err(Error::Capability("divergence needs a square field with gradient"));
    }
    let d = field.dim_in();
    let inner = field.inner().clone();
    let f = FnField::new(d, 1, move |t, x, o| {
        let mut g = vec![0.0; d * d];
        inner.gradient(t, x, &mut g);
        o[0] = (0..d).map(|i| g[i * d + i]).sum();
    });
    RoughField::from_fn(f, *field.profile(), field.domain().clone()).map(|f| f.with_label(format!("div({})", field.label())))
}

/// Estimate of the Lagrangian compressibility constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompressibilityReport {
    /// `max |J|` over all samples and times.
    pub l_estimate: f64,
    /// Smallest `kappa` with `|J(t)| <= exp(kappa |t - t0|^tau)` on every sample.
    pub kappa: f64,
    /// `exp(kappa |t|^tau)` at the largest elapsed time.
    pub bound: f64,
}

/// `L = max |J(-t, x)|` from Jacobian paths of backward flows.
pub fn lagrangian_compressibility(jacobians: &[JacobianPath], tau: f64) -> Result<CompressibilityReport> {
    if jacobians.is_empty() {
        return arg("lagrangian_compressibility needs at least one sample");
    }
    let mut l = 0.0_f64;
    let mut kappa = 0.0_f64;
    let mut horizon = 0.0_f64;
    for jp in jacobians {
        let t0 = jp.times[0];
        for (t, j) in jp.times.iter().zip(&jp.dets) {
            l = l.max(j.abs());
            let el = (t - t0).abs();
            horizon = horizon.max(el);
            if el > 0.0 && j.abs() > 0.0 {
                kappa = kappa.max(j.abs().ln() / el.powf(tau));
            }
        }
    }
    Ok(CompressibilityReport { l_estimate: l, kappa, bound: (kappa * horizon.powf(tau)).exp() })
}

/// Terms of the chain rule `int g dF(t, x_t) = int g F(dt, x_t) + int g grad F(t, x_t) W(dt, phi_t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChainRuleReport {
    pub lhs: f64,
    pub rhs_time: f64,
    pub rhs_space: f64,
    pub residual: f64,
}

/// Chain-rule check along a flow trajectory `x = phi` over `[a, b]`, all three
/// integrals sewn with `opts`. `F` is a scalar field with gradient and `g` a
/// scalar weight path.
pub fn chain_rule_residual(
    f: &RoughField,
    g: &Path,
    field: &RoughField,
    flow: &FlowSolution,
    a: f64,
    b: f64,
    opts: &SewingOptions,
) -> Result<ChainRuleReport> {
    if f.dim_out() != 1 || !f.has_gradient() || g.dim() != 1 {
        return arg("chain rule needs a scalar F with gradient and a scalar weight g");
    }
    let tau = field.profile().tau;
    let pf = f.profile();
    if pf.tau + pf.lambda * tau <= 1.0 {
        return Err(Error::Precondition(format!("tau_F + lambda_F tau = {} is not > 1", pf.tau + pf.lambda * tau)));
    }
    if g.gamma() + pf.tau <= 1.0 {
        return Err(Error::Precondition(format!("tau_g + tau_F = {} is not > 1", g.gamma() + pf.tau)));
    }
    let x = flow.path(tau)?;
    let d = x.dim();
    let eps = (pf.tau + pf.lambda * tau).min(g.gamma() + pf.tau) - 1.0;
    let fv = |t: f64, y: &[f64]| f.eval(t, y).map(|v| v[0]);
    let lhs_germ = FnGerm::new(1, eps, |s, t, o: &mut [f64]| {
        let xs = x.eval(s).expect("on path");
        let xt = x.eval(t).expect("on path");
        o[0] = g.eval1(s).expect("on path") * (fv(t, &xt).expect("in domain") - fv(s, &xs).expect("in domain"));
    });
    let time_germ = FnGerm::new(1, eps, |s, t, o: &mut [f64]| {
        let xs = x.eval(s).expect("on path");
        o[0] = g.eval1(s).expect("on path") * (fv(t, &xs).expect("in domain") - fv(s, &xs).expect("in domain"));
    });
    let space_germ = FnGerm::new(1, eps, |s, t, o: &mut [f64]| {
        let xs = x.eval(s).expect("on path");
        let grad = f.gradient(s, &xs).expect("in domain");
        let hi = field.eval(t, &xs).expect("in domain");
        let lo = field.eval(s, &xs).expect("in domain");
        o[0] = g.eval1(s).expect("on path") * (0..d).map(|i| grad[i] * (hi[i] - lo[i])).sum::<f64>();
    });
    // Validate the evaluation window once so the germs never panic.
    for t in [a, b] {
        let xt = x.eval(t)?;
        f.eval(t, &xt)?;
        field.eval(t, &xt)?;
        g.eval1(t)?;
    }
    let lhs = sew(&lhs_germ, a, b, opts)?.scalar();
    let rhs_time = sew(&time_germ, a, b, opts)?.scalar();
    let rhs_space = sew(&space_germ, a, b, opts)?.scalar();
    Ok(ChainRuleReport { lhs, rhs_time, rhs_space, residual: lhs - rhs_time - rhs_space })
}

/// Gap between two trajectories and the exponential stability bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityGap {
    pub gap: f64,
    pub bound: f64,
    /// `||grad W||` estimate used in `A`.
    pub grad_norm: f64,
    pub a_const: f64,
}

/// `max(sup |dW(s,x) - dW(t,x) - dW(s,y) + dW(t,y)| / (|t-s|^tau |x-y|^lambda),
///      sup |dW(s,x) - dW(t,x)| / |t-s|^tau)` over grid points, entrywise in `dW = grad W`.
pub fn gradient_seminorm(field: &RoughField, times: &[f64], points: &[Vec<f64>]) -> Result<f64> {
    if !field.has_gradient() {
        return Err(Error::Capability("gradient seminorm needs a field gradient"));
    }
    let p = field.profile();
    let grads: Vec<Vec<Vec<f64>>> = times
        .iter()
        .map(|&t| points.iter().map(|x| field.gradient(t, x)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let mut best = 0.0_f64;
    for i in 0..times.len() {
        for k in (i + 1)..times.len() {
            let dt = (times[k] - times[i]).abs().powf(p.tau);
            for a in 0..points.len() {
                let da: Vec<f64> = grads[k][a].iter().zip(&grads[i][a]).map(|(u, v)| u - v).collect();
                best = best.max(norm(&da) / dt);
                for b in (a + 1)..points.len() {
                    let dx = norm(&points[a].iter().zip(&points[b]).map(|(u, v)| u - v).collect::<Vec<_>>());
                    let r: Vec<f64> = (0..da.len()).map(|q| da[q] - (grads[k][b][q] - grads[i][b][q])).collect();
                    best = best.max(norm(&r) / (dt * dx.powf(p.lambda)));
                }
            }
        }
    }
    Ok(best)
}

/// Solves from `x0` and `y0` and compares `sup |x_t - y_t|` with
/// `2^{kappa T A^{1/tau}} |x0 - y0|`, `A = kappa ||grad W|| (1 + rho T^{lambda tau})`,
/// `rho = (||x||_tau + ||y||_tau)^lambda`.
#[allow(clippy::too_many_arguments)]
pub fn stability_gap(
    field: &RoughField,
    x0: &[f64],
    y0: &[f64],
    t0: f64,
    t_end: f64,
    steps: usize,
    kappa: f64,
    opts: &FlowOptions,
) -> Result<StabilityGap> {
    let xs = solve_rough_ode(field, x0, t0, t_end, steps, opts)?;
    let ys = solve_rough_ode(field, y0, t0, t_end, steps, opts)?;
    let gap = xs.states.chunks(xs.dim).zip(ys.states.chunks(ys.dim)).map(|(a, b)| {
        norm(&a.iter().zip(b).map(|(p, q)| p - q).collect::<Vec<_>>())
    });
    let gap = gap.fold(0.0, f64::max);
    let p = field.profile();
    let lo: Vec<f64> = (0..xs.dim)
        .map(|i| xs.states.iter().chain(&ys.states).skip(i).step_by(xs.dim).fold(f64::INFINITY, |m, v| m.min(*v)))
        .collect();
    let hi: Vec<f64> = (0..xs.dim)
        .map(|i| xs.states.iter().chain(&ys.states).skip(i).step_by(xs.dim).fold(f64::NEG_INFINITY, |m, v| m.max(*v)))
        .collect();
    let grid = SeminormGrid::uniform(t0.min(t_end), t0.max(t_end), 9, &lo.iter().map(|v| v - 0.1).collect::<Vec<_>>(), &hi.iter().map(|v| v + 0.1).collect::<Vec<_>>(), 5);
    let grad_norm = gradient_seminorm(field, &grid.times, &grid.points)?;
    let horizon = (t_end - t0).abs();
    let rho = (xs.achieved_holder + ys.achieved_holder).powf(p.lambda);
    let a_const = kappa * grad_norm * (1.0 + rho * horizon.powf(p.lambda * p.tau));
    let dist0 = norm(&x0.iter().zip(y0).map(|(a, b)| a - b).collect::<Vec<_>>());
    let bound = 2f64.powf(kappa * horizon * a_const.powf(1.0 / p.tau)) * dist0;
    Ok(StabilityGap { gap, bound, grad_norm, a_const })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{drift_field, linear_field, separable_field, Domain, HolderProfile, SpaceFn, TimeFn};
    use approx::assert_abs_diff_eq;

    fn smooth() -> HolderProfile {
        HolderProfile::new(1.0, 1.0, 0.0).unwrap()
    }

    fn sin_driver() -> TimeFn {
        TimeFn::Sin { amp: 0.7, freq: 3.0, phase: 0.2 }
    }

    #[test]
    fn constant_drift_is_exact() {
        let f = drift_field(TimeFn::Identity, vec![0.5, -1.0], 2, smooth(), Domain::cube((-1.0, 2.0), 2, 5.0).unwrap()).unwrap();
        let s = solve_rough_ode(&f, &[0.1, 0.2], 0.0, 1.5, 8, &FlowOptions::default()).unwrap();
        let e = s.end_state();
        assert_abs_diff_eq!(e[0], 0.85, epsilon = 1e-14);
        assert_abs_diff_eq!(e[1], -1.3, epsilon = 1e-14);
        let back = solve_rough_ode(&f, &[0.1, 0.2], 0.0, -1.0, 8, &FlowOptions::default()).unwrap();
        assert_abs_diff_eq!(back.end_state()[0], -0.4, epsilon = 1e-14);
        assert!(back.path(1.0).unwrap().times()[0] == -1.0);
    }

    #[test]
    fn linear_field_converges_to_exponential() {
        let f = separable_field(sin_driver(), SpaceFn::Coord, 1, smooth(), Domain::cube((0.0, 1.0), 1, 10.0).unwrap()).unwrap();
        let g = |t: f64| 0.7 * (3.0 * t + 0.2).sin();
        let exact = 1.3 * (g(1.0) - g(0.0)).exp();
        let mut errs = vec![];
        for n in [64, 128, 256, 512] {
            let s = solve_rough_ode(&f, &[1.3], 0.0, 1.0, n, &FlowOptions::default()).unwrap();
            errs.push((s.end_state()[0] - exact).abs());
        }
        for w in errs.windows(2) {
            assert!(w[1] < 0.6 * w[0], "{errs:?}");
        }
        let s = solve_rough_ode(&f, &[1.3], 0.0, 1.0, 512, &FlowOptions::second_order()).unwrap();
        assert!((s.end_state()[0] - exact).abs() < 1e-5);
    }

    #[test]
    fn strict_mode_and_warnings() {
        let p = HolderProfile::new(0.5, 0.9, 0.0).unwrap();
        let f = separable_field(TimeFn::Identity, SpaceFn::Sin1, 1, p, Domain::cube((0.0, 1.0), 1, 5.0).unwrap()).unwrap();
        assert!(matches!(solve_rough_ode(&f, &[0.0], 0.0, 1.0, 4, &FlowOptions::default()), Err(Error::Precondition(_))));
        let o = FlowOptions { strict: false, ..FlowOptions::default() };
        assert_eq!(solve_rough_ode(&f, &[0.0], 0.0, 1.0, 4, &o).unwrap().warnings.len(), 1);
        assert!(solve_rough_ode(&f, &[0.0], 0.0, 1.0, 1, &o).is_err());
    }

    #[test]
    fn blow_up_guard() {
        let f = separable_field(TimeFn::Poly(vec![0.0, 50.0]), SpaceFn::Coord, 1, smooth(), Domain::cube((0.0, 1.0), 1, 1e30).unwrap()).unwrap();
        let o = FlowOptions { field_norm: Some(0.0), ..FlowOptions::default() };
        let r = solve_rough_ode(&f, &[1.0], 0.0, 1.0, 4, &o);
        assert!(matches!(r, Err(Error::Divergence { .. })), "{r:?}");
    }

    #[test]
    fn a_priori_bound_shape() {
        let k = BoundConstants { c: 2.0, kappa: 0.5 };
        assert_eq!(a_priori_sup_bound(0.0, 0.3, 1.0, 0.8, 1.0, k), 2.0);
        let b1 = a_priori_sup_bound(1.5, 2.0, 1.0, 0.8, 1.0, k);
        let b2 = a_priori_sup_bound(1.5, 4.0, 1.0, 0.8, 1.0, k);
        assert_abs_diff_eq!(b2, 2.0 * b1, epsilon = 1e-12);
        assert!(max_step(0.0, 0.8, 1.0, 1.0).is_infinite());
        assert_abs_diff_eq!(max_step(2.0, 0.5, 1.0, 1.0), 1.0 / 16.0, epsilon = 1e-15);
    }

    #[test]
    fn residual_against_refined_sums() {
        let f = separable_field(sin_driver(), SpaceFn::Sin1, 1, smooth(), Domain::cube((0.0, 1.0), 1, 5.0).unwrap()).unwrap();
        let coarse = solve_rough_ode(&f, &[0.4], 0.0, 1.0, 64, &FlowOptions::default()).unwrap();
        let fine = solve_rough_ode(&f, &[0.4], 0.0, 1.0, 1024, &FlowOptions::default()).unwrap();
        let rc = ode_residual(&f, &coarse, 4).unwrap();
        let rf = ode_residual(&f, &fine, 4).unwrap();
        assert!(rf < rc / 4.0, "{rc} {rf}");
        assert_eq!(ode_residual(&f, &fine, 0).unwrap() < 1e-13, true);
    }

    #[test]
    fn picard_agrees_with_stepper() {
        let f = separable_field(sin_driver(), SpaceFn::Sin1, 1, smooth(), Domain::cube((0.0, 1.0), 1, 5.0).unwrap()).unwrap();
        let (pic, diffs) = picard_solve(&f, &[0.4], 0.0, 1.0, 256, 20, &SewingOptions { tol: 1e-7, max_levels: 20, min_levels: 4 }).unwrap();
        assert!(diffs.last().unwrap() < &1e-9, "{diffs:?}");
        let fine = solve_rough_ode(&f, &[0.4], 0.0, 1.0, 1 << 14, &FlowOptions::second_order()).unwrap();
        assert_abs_diff_eq!(pic.end_state()[0], fine.end_state()[0], epsilon = 1e-4);
    }

    #[test]
    fn identity_map_at_start_time_and_round_trip() {
        let f = separable_field(sin_driver(), SpaceFn::Coord, 1, smooth(), Domain::cube((0.0, 1.0), 1, 10.0).unwrap()).unwrap();
        let grid: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.5 - 1.0]).collect();
        let m = flow_map(&f, &grid, 0.3, 0.3, 16, &FlowOptions::default()).unwrap();
        assert_eq!(m.end_points(), grid);
        let m = flow_map(&f, &grid, 0.0, 1.0, 256, &FlowOptions::second_order()).unwrap();
        assert!(m.injective);
        for (x, y) in grid.iter().zip(m.end_points()) {
            let back = inverse_flow(&f, &y, 0.0, 1.0, 256, &FlowOptions::second_order()).unwrap();
            assert_abs_diff_eq!(back[0], x[0], epsilon = 1e-6);
        }
        assert_eq!(inverse_flow(&f, &[0.7], 0.4, 0.4, 8, &FlowOptions::default()).unwrap(), vec![0.7]);
    }

    #[test]
    fn scalar_jacobian_closed_form() {
        let f = separable_field(sin_driver(), SpaceFn::Coord, 1, smooth(), Domain::cube((0.0, 1.0), 1, 10.0).unwrap()).unwrap();
        let s = solve_rough_ode(&f, &[0.9], 0.0, 1.0, 1024, &FlowOptions::second_order()).unwrap();
        let jp = jacobian_path(&f, &s, Scheme::SecondOrder).unwrap();
        let g = |t: f64| 0.7 * (3.0 * t + 0.2).sin();
        for (k, t) in jp.times.iter().enumerate() {
            let e = (g(*t) - g(0.0)).exp();
            assert_abs_diff_eq!(jp.matrices[k][0], e, epsilon = 1e-12);
            assert_abs_diff_eq!(jp.inverses[k][0], 1.0 / e, epsilon = 1e-12);
            assert_abs_diff_eq!(jp.dets[k], e, epsilon = 1e-12);
        }
        assert!(jp.inverse_defect() < 1e-12 && jp.det_defect() < 1e-12 && jp.exp_div_defect() < 1e-12);
    }

    #[test]
    fn constant_drift_jacobian_is_identity() {
        let f = drift_field(TimeFn::Identity, vec![0.5, -1.0], 2, smooth(), Domain::cube((0.0, 1.0), 2, 5.0).unwrap()).unwrap();
        let s = solve_rough_ode(&f, &[0.1, 0.2], 0.0, 1.0, 16, &FlowOptions::default()).unwrap();
        let jp = jacobian_path(&f, &s, Scheme::Euler).unwrap();
        assert!(jp.matrices.iter().all(|m| m == &vec![1.0, 0.0, 0.0, 1.0]));
        assert!(jp.dets.iter().all(|j| *j == 1.0));
        let rep = lagrangian_compressibility(&[jp], 1.0).unwrap();
        assert_eq!(rep.l_estimate, 1.0);
    }

    #[test]
    fn rotation_field_preserves_volume() {
        let f = separable_field(sin_driver(), SpaceFn::Rotation, 2, smooth(), Domain::cube((0.0, 1.0), 2, 5.0).unwrap()).unwrap();
        let s = solve_rough_ode(&f, &[0.3, -0.8], 0.0, 1.0, 512, &FlowOptions::second_order()).unwrap();
        let jp = jacobian_path(&f, &s, Scheme::SecondOrder).unwrap();
        assert!(jp.dets.iter().all(|j| (j - 1.0).abs() < 1e-12));
        assert!(jp.inverse_defect() < 1e-10);
    }

    #[test]
    fn linear_stability_gap_scales() {
        let f = linear_field(sin_driver(), 2, smooth(), Domain::cube((0.0, 1.0), 2, 5.0).unwrap()).unwrap();
        let mut ratios = vec![];
        for h in [1e-4, 1e-3, 1e-2, 1e-1, 1.0] {
            let r = stability_gap(&f, &[0.2, 0.1], &[0.2 + h, 0.1], 0.0, 1.0, 256, 1.0, &FlowOptions::default()).unwrap();
            assert!(r.gap <= r.bound);
            ratios.push(r.gap / h);
        }
        for r in &ratios {
            assert_abs_diff_eq!(*r / ratios[0], 1.0, epsilon = 1e-8);
        }
        let r = stability_gap(&f, &[0.2, 0.1], &[0.2, 0.1], 0.0, 1.0, 16, 1.0, &FlowOptions::default()).unwrap();
        assert_eq!(r.gap, 0.0);
    }

    #[test]
    fn chain_rule_identities() {
        let f = separable_field(sin_driver(), SpaceFn::Sin1, 1, smooth(), Domain::cube((0.0, 1.0), 1, 5.0).unwrap()).unwrap();
        let s = solve_rough_ode(&f, &[0.4], 0.0, 1.0, 4096, &FlowOptions::second_order()).unwrap();
        let ones = Path::from_fn(0.0, 1.0, 4, 1, 1.0, |_| vec![1.0]).unwrap();
        let opts = SewingOptions { tol: 1e-5, max_levels: 20, min_levels: 4 };
        let fx = separable_field(TimeFn::Poly(vec![1.0]), SpaceFn::Coord, 1, smooth(), Domain::cube((0.0, 1.0), 1, 5.0).unwrap()).unwrap();
        let r = chain_rule_residual(&fx, &ones, &f, &s, 0.0, 1.0, &opts).unwrap();
        assert_abs_diff_eq!(r.lhs, s.end_state()[0] - 0.4, epsilon = 1e-12);
        assert_eq!(r.rhs_time, 0.0);
        assert!(r.residual.abs() < 1e-3, "{r:?}");
        let ft = drift_field(TimeFn::Identity, vec![1.0], 1, smooth(), Domain::cube((0.0, 1.0), 1, 5.0).unwrap()).unwrap();
        let r = chain_rule_residual(&ft, &ones, &f, &s, 0.0, 1.0, &opts).unwrap();
        assert_abs_diff_eq!(r.lhs, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.residual, 0.0, epsilon = 1e-12);
    }
}
