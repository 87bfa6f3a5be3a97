//! The sewing map for two-point germs and the nonlinear Young integral
//! `int W(ds, phi_s)` built on it.
//!
//! A germ `mu(s, t)` whose three-point defect
//! `mu(s,t) - mu(s,c) - mu(c,t)` is `O(|t-s|^{1+eps})` has a unique additive
//! functional close to it; it is the limit of the Riemann sums
//! `sum_i mu(t_i, t_{i+1})`. The engine refines dyadically and reports the
//! whole refinement trace so convergence orders can be fitted downstream.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{arg, Error, Result};
use crate::field::{estimate_seminorms, RoughField, SeminormGrid};
use crate::numeric::{gauss_legendre, norm, pairwise_sum};
use crate::path::{uniform_grid, Path};

/// A two-point function `mu(s, t)` with values in `R^dim`.
pub trait Germ: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, s: f64, t: f64, out: &mut [f64]) -> Result<()>;
    /// Declared exponent `eps > 0` of the three-point defect.
    fn regularity(&self) -> f64;
    /// Constant `K` in the defect bound, when known.
    fn defect_constant(&self) -> Option<f64> {
        None
    }
}

/// Germ given by a closure.
pub struct FnGerm<F> {
    dim: usize,
    eps: f64,
    k: Option<f64>,
    f: F,
}

impl<F> FnGerm<F>
where
    F: Fn(f64, f64, &mut [f64]) + Sync,
{
    pub fn new(dim: usize, eps: f64, f: F) -> Self {
        Self { dim, eps, k: None, f }
    }

    pub fn with_defect_constant(mut self, k: f64) -> Self {
        self.k = Some(k);
        self
    }
}

impl<F> Germ for FnGerm<F>
where
    F: Fn(f64, f64, &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, s: f64, t: f64, out: &mut [f64]) -> Result<()> {
        (self.f)(s, t, out);
        Ok(())
    }
    fn regularity(&self) -> f64 {
        self.eps
    }
    fn defect_constant(&self) -> Option<f64> {
        self.k
    }
}

/// Sum of two germs.
pub struct SumGerm<'a>(pub &'a dyn Germ, pub &'a dyn Germ);

impl Germ for SumGerm<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn eval(&self, s: f64, t: f64, out: &mut [f64]) -> Result<()> {
        let mut tmp = vec![0.0; out.len()];
        self.0.eval(s, t, out)?;
        self.1.eval(s, t, &mut tmp)?;
        out.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
        Ok(())
    }
    fn regularity(&self) -> f64 {
        self.0.regularity().min(self.1.regularity())
    }
}

/// Left-point germ `W(t, phi_s) - W(s, phi_s)` of the nonlinear Young integral.
pub struct YoungGerm<'a> {
    pub field: &'a RoughField,
    pub path: &'a Path,
}

impl Germ for YoungGerm<'_> {
    fn dim(&self) -> usize {
        self.field.dim_out()
    }
    fn eval(&self, s: f64, t: f64, out: &mut [f64]) -> Result<()> {
        let mut x = [0.0; 8];
        let x = &mut x[..self.path.dim()];
        self.path.eval_into(s, x)?;
        let mut lo = [0.0; 8];
        let lo = &mut lo[..out.len().min(8)];
        if out.len() > 8 {
            let a = self.field.eval(t, x)?;
            let b = self.field.eval(s, x)?;
            out.iter_mut().enumerate().for_each(|(i, o)| *o = a[i] - b[i]);
            return Ok(());
        }
        self.field.eval_into(t, x, out)?;
        self.field.eval_into(s, x, lo)?;
        out.iter_mut().zip(lo.iter()).for_each(|(o, l)| *o -= l);
        Ok(())
    }
    fn regularity(&self) -> f64 {
        self.field.profile().young_exponent(self.path.gamma()) - 1.0
    }
}

/// Right-point germ `W(t, phi_t) - W(s, phi_t)`.
pub struct RightYoungGerm<'a> {
    pub field: &'a RoughField,
    pub path: &'a Path,
}

impl Germ for RightYoungGerm<'_> {
    fn dim(&self) -> usize {
        self.field.dim_out()
    }
    fn eval(&self, s: f64, t: f64, out: &mut [f64]) -> Result<()> {
        let x = self.path.eval(t)?;
        let a = self.field.eval(t, &x)?;
        let b = self.field.eval(s, &x)?;
        out.iter_mut().enumerate().for_each(|(i, o)| *o = a[i] - b[i]);
        Ok(())
    }
    fn regularity(&self) -> f64 {
        self.field.profile().young_exponent(self.path.gamma()) - 1.0
    }
}

/// Strictly increasing partition `a = t_0 < .. < t_m = b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    points: Vec<f64>,
}

impl Partition {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 || points.windows(2).any(|w| !(w[1] > w[0])) {
            return arg("partition needs >= 2 strictly increasing points");
        }
        Ok(Self { points })
    }

    pub fn uniform(a: f64, b: f64, cells: usize) -> Result<Self> {
        if !(a < b) || cells == 0 {
            return arg("uniform partition needs a < b and >= 1 cell");
        }
        Self::new(uniform_grid(a, b, cells))
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn cells(&self) -> usize {
        self.points.len() - 1
    }

    pub fn mesh(&self) -> f64 {
        self.points.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }
}

const PARALLEL_CELLS: usize = 4096;

/// Exact sum `sum_i mu(t_i, t_{i+1})` over the partition, reduced with a
/// fixed pairwise tree per component.
pub fn riemann_sum(germ: &dyn Germ, partition: &Partition) -> Result<Vec<f64>> {
    let dim = germ.dim();
    let pts = partition.points();
    let m = partition.cells();
    let mut cells = vec![0.0; m * dim];
    if m >= PARALLEL_CELLS {
        cells
            .par_chunks_mut(dim)
            .enumerate()
            .try_for_each(|(i, out)| germ.eval(pts[i], pts[i + 1], out))?;
    } else {
        for (i, out) in cells.chunks_mut(dim).enumerate() {
            germ.eval(pts[i], pts[i + 1], out)?;
        }
    }
    Ok((0..dim)
        .map(|c| {
            let col: Vec<f64> = (0..m).map(|i| cells[i * dim + c]).collect();
            pairwise_sum(&col)
        })
        .collect())
}

/// Controls of the dyadic refinement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct SewingOptions {
    /// Target accuracy: refinement stops once the geometric tail estimate
    /// `e_k rho / (1 - rho)` is below this, where `rho = 2^{-min(eps, 1)}`
    /// and `e_k = max(d_k, rho d_{k-1}, rho^2 d_{k-2})` is an envelope of the
    /// last three successive differences.
    pub tol: f64,
    /// Highest level `k` (with `2^k` cells) attempted.
    pub max_levels: usize,
    /// Levels that must complete before the stopping test applies.
    pub min_levels: usize,
}

impl Default for SewingOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_levels: 22, min_levels: 4 }
    }
}

impl SewingOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

/// One refinement level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub level: usize,
    pub mesh: f64,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SewingResult {
    pub value: Vec<f64>,
    pub refinement_trace: Vec<TraceEntry>,
    /// Tail estimate `e rho / (1 - rho)` for adaptive runs (see
    /// [`SewingOptions::tol`]); the last difference for fixed-level runs.
    pub error_estimate: f64,
    /// `K (1 - 2^{-eps})^{-1} |b - a|^{1 + eps}` when `K` is known.
    pub theoretical_bound: Option<f64>,
    pub warnings: Vec<String>,
}

impl SewingResult {
    /// Scalar value (first component).
    pub fn scalar(&self) -> f64 {
        self.value[0]
    }

    /// Successive differences `|J_{k+1} - J_k|` with the finer mesh.
    pub fn differences(&self) -> Vec<(f64, f64)> {
        self.refinement_trace
            .windows(2)
            .map(|w| (w[1].mesh, distance(&w[1].value, &w[0].value)))
            .collect()
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn sewing_bound(germ: &dyn Germ, a: f64, b: f64) -> Option<f64> {
    let eps = germ.regularity();
    germ.defect_constant()
        .map(|k| k / (1.0 - 2f64.powf(-eps)) * (b - a).powf(1.0 + eps))
}

/// Dyadic sewing of `germ` over `[a, b]`: level `k` uses `2^k` uniform cells.
pub fn sew(germ: &dyn Germ, a: f64, b: f64, opts: &SewingOptions) -> Result<SewingResult> {
    if !(a < b) {
        return arg(format!("sewing needs a < b, got [{a}, {b}]"));
    }
    if !(opts.tol > 0.0) {
        return arg("sewing tolerance must be positive");
    }
    let eps = germ.regularity();
    let rho = 2f64.powf(-eps.clamp(0.05, 1.0));
    let tail = rho / (1.0 - rho);
    let mut trace: Vec<TraceEntry> = Vec::new();
    let mut diffs: Vec<f64> = Vec::new();
    for level in 0..=opts.max_levels {
        let part = Partition::uniform(a, b, 1 << level)?;
        let value = riemann_sum(germ, &part)?;
        if let Some(prev) = trace.last() {
            diffs.push(distance(&value, &prev.value));
        }
        trace.push(TraceEntry { level, mesh: part.mesh(), value });
        if level >= opts.min_levels && diffs.len() >= 3 {
            let envelope = diffs.iter().rev().take(3).enumerate().map(|(j, d)| d * rho.powi(j as i32)).fold(0.0, f64::max);
            if envelope * tail < opts.tol {
                return Ok(SewingResult {
                    value: trace.last().expect("non-empty").value.clone(),
                    error_estimate: envelope * tail,
                    theoretical_bound: sewing_bound(germ, a, b),
                    refinement_trace: trace,
                    warnings: vec![],
                });
            }
        }
    }
    let last_diff = diffs.last().copied().unwrap_or(f64::INFINITY);
    Err(Error::Convergence {
        levels: opts.max_levels,
        last_diff,
        trace: trace.iter().map(|e| (e.mesh, e.value[0])).collect(),
    })
}

/// Runs levels `0..=levels` without a stopping rule; used for order studies
/// and fixed-resolution comparisons.
pub fn sew_levels(germ: &dyn Germ, a: f64, b: f64, levels: usize) -> Result<SewingResult> {
    sew_level_range(germ, a, b, 0, levels)
}

/// Like [`sew_levels`] but only evaluates levels `first..=last`.
pub fn sew_level_range(germ: &dyn Germ, a: f64, b: f64, first: usize, last: usize) -> Result<SewingResult> {
    if !(a < b) || first > last {
        return arg("sew_levels needs a < b and first <= last");
    }
    let mut trace = Vec::with_capacity(last - first + 1);
    for level in first..=last {
        let part = Partition::uniform(a, b, 1 << level)?;
        trace.push(TraceEntry { level, mesh: part.mesh(), value: riemann_sum(germ, &part)? });
    }
    let n = trace.len();
    let error_estimate = if n >= 2 { distance(&trace[n - 1].value, &trace[n - 2].value) } else { 0.0 };
    Ok(SewingResult {
        value: trace[n - 1].value.clone(),
        error_estimate,
        theoretical_bound: sewing_bound(germ, a, b),
        refinement_trace: trace,
        warnings: vec![],
    })
}

/// Empirical defect constant `sup |mu(s,t) - mu(s,c) - mu(c,t)| / |t-s|^{1+eps}`
/// over all triples of a uniform grid with `n + 1` points.
pub fn germ_defect(germ: &dyn Germ, a: f64, b: f64, n: usize) -> Result<f64> {
    let pts = uniform_grid(a, b, n);
    let eps = germ.regularity();
    let dim = germ.dim();
    let (mut st, mut sc, mut ct) = (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
    let mut worst = 0.0_f64;
    for i in 0..pts.len() {
        for k in (i + 2)..pts.len() {
            germ.eval(pts[i], pts[k], &mut st)?;
            for j in (i + 1)..k {
                germ.eval(pts[i], pts[j], &mut sc)?;
                germ.eval(pts[j], pts[k], &mut ct)?;
                let defect: Vec<f64> = (0..dim).map(|q| st[q] - sc[q] - ct[q]).collect();
                worst = worst.max(norm(&defect) / (pts[k] - pts[i]).powf(1.0 + eps));
            }
        }
    }
    Ok(worst)
}

/// How to treat a violated exponent condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    #[default]
    Strict,
    /// Record a warning and integrate anyway (for empirical studies).
    Warn,
}

fn check_condition(field: &RoughField, path: &Path, mode: ConditionMode) -> Result<Vec<String>> {
    if field.dim_in() != path.dim() {
        return arg(format!("field takes {}-d points but path is {}-d", field.dim_in(), path.dim()));
    }
    match (field.profile().check_young(path.gamma()), mode) {
        (Ok(()), _) => Ok(vec![]),
        (Err(e), ConditionMode::Strict) => Err(e),
        (Err(e), ConditionMode::Warn) => Ok(vec![e.to_string()]),
    }
}

/// `int_a^b W(ds, phi_s)` by sewing the left-point germ.
pub fn nonlinear_young_integral(
    field: &RoughField,
    path: &Path,
    a: f64,
    b: f64,
    opts: &SewingOptions,
    mode: ConditionMode,
) -> Result<SewingResult> {
    let warnings = check_condition(field, path, mode)?;
    let mut r = sew(&YoungGerm { field, path }, a, b, opts)?;
    r.warnings = warnings;
    Ok(r)
}

/// Same integral from the right-point germ `W(t, phi_t) - W(s, phi_t)`.
pub fn right_endpoint_integral(
    field: &RoughField,
    path: &Path,
    a: f64,
    b: f64,
    opts: &SewingOptions,
    mode: ConditionMode,
) -> Result<SewingResult> {
    let warnings = check_condition(field, path, mode)?;
    let mut r = sew(&RightYoungGerm { field, path }, a, b, opts)?;
    r.warnings = warnings;
    Ok(r)
}

/// Composite Gauss-Legendre rule: `panels` equal panels, `order` nodes each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct QuadSpec {
    pub panels: usize,
    pub order: usize,
}

impl Default for QuadSpec {
    fn default() -> Self {
        Self { panels: 1024, order: 4 }
    }
}

/// `(2 eps)^{-1} int_a^b (W(s + eps, phi_s) - W(s - eps, phi_s)) ds` by quadrature.
pub fn symmetric_integral_approx(
    field: &RoughField,
    path: &Path,
    a: f64,
    b: f64,
    epsilon: f64,
    quad: QuadSpec,
) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) || !(a < b) {
        return arg("symmetric integral needs eps > 0 and a < b");
    }
    let dom = field.domain();
    if a - epsilon < dom.t.0 - 1e-12 || b + epsilon > dom.t.1 + 1e-12 {
        return Err(Error::OutOfDomain { t: if a - epsilon < dom.t.0 { a - epsilon } else { b + epsilon }, x: vec![] });
    }
    let (nodes, weights) = gauss_legendre(quad.order);
    let k = field.dim_out();
    let h = (b - a) / quad.panels as f64;
    let panels: Vec<Result<Vec<f64>>> = (0..quad.panels)
        .into_par_iter()
        .map(|p| {
            let mid = a + (p as f64 + 0.5) * h;
            let mut acc = vec![0.0; k];
            for (u, w) in nodes.iter().zip(&weights) {
                let s = mid + 0.5 * h * u;
                let x = path.eval(s)?;
                let hi = field.eval(s + epsilon, &x)?;
                let lo = field.eval(s - epsilon, &x)?;
                for c in 0..k {
                    acc[c] += w * 0.5 * h * (hi[c] - lo[c]);
                }
            }
            Ok(acc)
        })
        .collect();
    let panels: Vec<Vec<f64>> = panels.into_iter().collect::<Result<_>>()?;
    Ok((0..k)
        .map(|c| pairwise_sum(&panels.iter().map(|v| v[c]).collect::<Vec<_>>()) / (2.0 * epsilon))
        .collect())
}

/// Values of `t -> int_a^t W(ds, phi_s)` on `n + 1` uniform points, assembled
/// from per-cell sewing by additivity.
pub fn indefinite_integral(field: &RoughField, path: &Path, a: f64, b: f64, n: usize, opts: &SewingOptions) -> Result<Path> {
    field.profile().check_young(path.gamma())?;
    let times = uniform_grid(a, b, n);
    let k = field.dim_out();
    let cells: Vec<Result<Vec<f64>>> = times
        .par_windows(2)
        .map(|w| sew(&YoungGerm { field, path }, w[0], w[1], opts).map(|r| r.value))
        .collect();
    let mut values = vec![0.0; k];
    let mut acc = vec![0.0; k];
    for c in cells {
        let c = c?;
        acc.iter_mut().zip(&c).for_each(|(a, v)| *a += v);
        values.extend_from_slice(&acc);
    }
    Path::new(times, values, k, field.profile().tau)
}

/// Observed gap between two integrals and the bound it is compared with.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub observed_gap: f64,
    pub bound: f64,
    pub holds: bool,
    /// Grid estimate of the field seminorm entering the bound.
    pub seminorm: f64,
}

/// Free constants and discretisation for the stability bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityConfig {
    /// Multiplier of the sewing term.
    pub constant: f64,
    pub grid_times: usize,
    pub grid_points: usize,
    pub sewing: SewingOptions,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self { constant: 10.0, grid_times: 17, grid_points: 9, sewing: SewingOptions::default() }
    }
}

fn path_box(paths: &[&Path]) -> (Vec<f64>, Vec<f64>) {
    let d = paths[0].dim();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for p in paths {
        for k in 0..p.len() {
            for (j, v) in p.node(k).iter().enumerate() {
                lo[j] = lo[j].min(*v);
                hi[j] = hi[j].max(*v);
            }
        }
    }
    for j in 0..d {
        if hi[j] - lo[j] < 1e-9 {
            lo[j] -= 0.5;
            hi[j] += 0.5;
        }
    }
    (lo, hi)
}

/// Dependence of the integral on the field: compares
/// `|int W_1(ds, phi) - int W_2(ds, phi)|` with the two-term bound
/// `|W_1(b,phi_a) - W_1(a,phi_a) - W_2(b,phi_a) + W_2(a,phi_a)|
///   + c [W_1 - W_2] ||phi||_gamma |b - a|^{tau + lambda gamma}`.
pub fn integral_stability_in_w(
    w1: &RoughField,
    w2: &RoughField,
    path: &Path,
    a: f64,
    b: f64,
    cfg: &StabilityConfig,
) -> Result<StabilityReport> {
    let i1 = nonlinear_young_integral(w1, path, a, b, &cfg.sewing, ConditionMode::Strict)?;
    let i2 = nonlinear_young_integral(w2, path, a, b, &cfg.sewing, ConditionMode::Strict)?;
    let gap = distance(&i1.value, &i2.value);
    let diff = w1.difference(w2)?;
    let phi_a = path.eval(a)?;
    let first = diff.time_space_increment(b, a, &phi_a, &phi_a)?; // zero by construction
    debug_assert!(first.iter().all(|v| *v == 0.0));
    let head: Vec<f64> = {
        let x = diff.eval(b, &phi_a)?;
        let y = diff.eval(a, &phi_a)?;
        x.iter().zip(&y).map(|(p, q)| p - q).collect()
    };
    let (lo, hi) = path_box(&[path]);
    let grid = SeminormGrid::uniform(a, b, cfg.grid_times, &lo, &hi, cfg.grid_points);
    let semi = estimate_seminorms(&diff, &grid)?.rect_seminorm;
    let p = w1.profile();
    let bound = norm(&head)
        + cfg.constant
            * semi
            * (1.0 + path.sup_norm().powf(p.beta))
            * path.holder_norm()
            * (b - a).powf(p.young_exponent(path.gamma()));
    Ok(StabilityReport { observed_gap: gap, bound, holds: gap <= bound, seminorm: semi })
}

/// Dependence of the integral on the path: compares the gap with
/// `C_1 [W] ||d||^lambda |v-u|^tau + c C_2 [W] ||d||^{lambda(1-theta)} |v-u|^{tau + theta lambda gamma}`
/// where `d = phi^1 - phi^2`, `C_1 = 1 + ||phi^1||^beta + ||phi^2||^beta` and
/// `C_2 = 2^{1-theta} C_1 (||phi^1||_gamma^lambda + ||phi^2||_gamma^lambda)^theta`.
pub fn integral_stability_in_phi(
    field: &RoughField,
    phi1: &Path,
    phi2: &Path,
    theta: f64,
    u: f64,
    v: f64,
    cfg: &StabilityConfig,
) -> Result<StabilityReport> {
    let p = *field.profile();
    let gamma = phi1.gamma().min(phi2.gamma());
    if !(theta > 0.0 && theta < 1.0) || p.tau + theta * p.lambda * gamma <= 1.0 {
        return Err(Error::Precondition(format!(
            "need theta in (0,1) with tau + theta*lambda*gamma > 1 (theta={theta})"
        )));
    }
    let i1 = nonlinear_young_integral(field, phi1, u, v, &cfg.sewing, ConditionMode::Strict)?;
    let i2 = nonlinear_young_integral(field, phi2, u, v, &cfg.sewing, ConditionMode::Strict)?;
    let gap = distance(&i1.value, &i2.value);
    let (lo, hi) = path_box(&[phi1, phi2]);
    let grid = SeminormGrid::uniform(u, v, cfg.grid_times, &lo, &hi, cfg.grid_points);
    let semi = estimate_seminorms(field, &grid)?.rect_seminorm;
    let dsup = phi1.sup_distance(phi2)?;
    let c1 = 1.0 + phi1.sup_norm().powf(p.beta) + phi2.sup_norm().powf(p.beta);
    let c2 = 2f64.powf(1.0 - theta)
        * c1
        * (phi1.holder_norm().powf(p.lambda) + phi2.holder_norm().powf(p.lambda)).powf(theta);
    let len = v - u;
    let bound = c1 * semi * dsup.powf(p.lambda) * len.powf(p.tau)
        + cfg.constant * c2 * semi * dsup.powf(p.lambda * (1.0 - theta)) * len.powf(p.tau + theta * p.lambda * gamma);
    Ok(StabilityReport { observed_gap: gap, bound, holds: gap <= bound, seminorm: semi })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{separable_field, Domain, HolderProfile, SpaceFn, TimeFn};
    use approx::assert_abs_diff_eq;

    fn unit_domain(r: f64) -> Domain {
        Domain::cube((0.0, 1.0), 1, r).unwrap()
    }

    #[test]
    fn telescoping_sums() {
        let g = FnGerm::new(1, 1.0, |s, t, o: &mut [f64]| o[0] = t - s);
        for m in [1, 3, 10] {
            let p = Partition::uniform(0.0, 1.0, m).unwrap();
            assert_abs_diff_eq!(riemann_sum(&g, &p).unwrap()[0], 1.0, epsilon = 1e-15);
        }
        let g = FnGerm::new(1, 1.0, |s: f64, t: f64, o: &mut [f64]| o[0] = t.cos() - s.cos());
        let p = Partition::new(vec![0.0, 0.1, 0.7, 1.3]).unwrap();
        assert_abs_diff_eq!(riemann_sum(&g, &p).unwrap()[0], 1.3f64.cos() - 1.0, epsilon = 1e-15);
    }

    #[test]
    fn left_riemann_sum_of_identity_integrand() {
        // phi_s (g(t) - g(s)) with g(t) = t, phi_s = s: sum_i (i/m)(1/m) = (m-1)/(2m).
        let g = FnGerm::new(1, 1.0, |s, t, o: &mut [f64]| o[0] = s * (t - s));
        for m in [1usize, 2, 5, 64] {
            let p = Partition::uniform(0.0, 1.0, m).unwrap();
            let expect = (m as f64 - 1.0) / (2.0 * m as f64);
            assert_abs_diff_eq!(riemann_sum(&g, &p).unwrap()[0], expect, epsilon = 1e-14);
        }
    }

    #[test]
    fn additive_germ_is_exact_at_level_zero() {
        let g = FnGerm::new(1, 1.0, |s: f64, t: f64, o: &mut [f64]| o[0] = t.exp() - s.exp());
        let r = sew(&g, 0.0, 1.0, &SewingOptions::with_tol(1e-12)).unwrap();
        assert_eq!(r.refinement_trace[0].value[0], 1f64.exp() - 1.0);
        assert_abs_diff_eq!(r.scalar(), 1f64.exp() - 1.0, epsilon = 1e-14);
        assert!(r.refinement_trace.len() >= 5, "at least four levels before stopping");
    }

    #[test]
    fn young_case_and_smooth_nonlinear_case() {
        let g = FnGerm::new(1, 1.0, |s, t, o: &mut [f64]| o[0] = s * (t - s));
        let r = sew(&g, 0.0, 1.0, &SewingOptions::with_tol(1e-5)).unwrap();
        assert_abs_diff_eq!(r.scalar(), 0.5, epsilon = 2e-5);
        // W(t,x) = t x^2 along phi_s = s: int s^2 ds = 1/3.
        let g = FnGerm::new(1, 1.0, |s, t, o: &mut [f64]| o[0] = (t - s) * s * s);
        let r = sew(&g, 0.0, 1.0, &SewingOptions::with_tol(1e-5)).unwrap();
        assert_abs_diff_eq!(r.scalar(), 1.0 / 3.0, epsilon = 2e-5);
    }

    #[test]
    fn non_convergence_reports_trace() {
        // Germ with no sewing regularity: sums oscillate forever.
        let g = FnGerm::new(1, 0.5, |s: f64, t: f64, o: &mut [f64]| o[0] = (t - s).sqrt());
        let err = sew(&g, 0.0, 1.0, &SewingOptions { tol: 1e-6, max_levels: 8, min_levels: 4 }).unwrap_err();
        match err {
            Error::Convergence { levels, trace, .. } => {
                assert_eq!(levels, 8);
                assert_eq!(trace.len(), 9);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn integral_along_constant_path_is_field_increment() {
        let f = separable_field(TimeFn::Sin { amp: 1.0, freq: 3.0, phase: 0.0 }, SpaceFn::Sin1, 1, HolderProfile::new(1.0, 1.0, 0.0).unwrap(), unit_domain(2.0))
            .unwrap();
        let p = Path::from_fn(0.0, 1.0, 8, 1, 1.0, |_| vec![0.4]).unwrap();
        let r = nonlinear_young_integral(&f, &p, 0.0, 1.0, &SewingOptions::with_tol(1e-12), ConditionMode::Strict).unwrap();
        let exact = 3f64.sin() * 0.4f64.sin();
        assert_eq!(r.refinement_trace[0].value[0], exact);
        assert_abs_diff_eq!(r.scalar(), exact, epsilon = 1e-14);
        let rr = right_endpoint_integral(&f, &p, 0.0, 1.0, &SewingOptions::with_tol(1e-12), ConditionMode::Strict).unwrap();
        assert_abs_diff_eq!(rr.scalar(), exact, epsilon = 1e-14);
    }

    #[test]
    fn bilinear_field_left_and_right() {
        let f = separable_field(TimeFn::Identity, SpaceFn::Coord, 1, HolderProfile::new(1.0, 1.0, 0.0).unwrap(), unit_domain(2.0)).unwrap();
        let p = Path::from_fn(0.0, 1.0, 1024, 1, 1.0, |s| vec![s]).unwrap();
        let opts = SewingOptions::with_tol(1e-6);
        let l = nonlinear_young_integral(&f, &p, 0.0, 1.0, &opts, ConditionMode::Strict).unwrap();
        let r = right_endpoint_integral(&f, &p, 0.0, 1.0, &opts, ConditionMode::Strict).unwrap();
        assert_abs_diff_eq!(l.scalar(), 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(r.scalar(), 0.5, epsilon = 1e-6);
        assert!((l.scalar() - r.scalar()).abs() <= 2.0 * opts.tol);
    }

    #[test]
    fn strict_mode_rejects_low_regularity() {
        let f = separable_field(TimeFn::Identity, SpaceFn::Coord, 1, HolderProfile::new(0.4, 0.5, 0.0).unwrap(), unit_domain(2.0)).unwrap();
        let p = Path::from_fn(0.0, 1.0, 16, 1, 0.5, |s| vec![s]).unwrap();
        let opts = SewingOptions::with_tol(1e-4);
        assert!(matches!(
            nonlinear_young_integral(&f, &p, 0.0, 1.0, &opts, ConditionMode::Strict),
            Err(Error::Precondition(_))
        ));
        let r = nonlinear_young_integral(&f, &p, 0.0, 1.0, &opts, ConditionMode::Warn).unwrap();
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn symmetric_integral_of_space_free_field() {
        let f = crate::field::drift_field(TimeFn::Identity, vec![2.5], 1, HolderProfile::new(1.0, 1.0, 0.0).unwrap(), Domain::cube((-1.0, 2.0), 1, 2.0).unwrap())
            .unwrap();
        let p = Path::from_fn(0.0, 1.0, 64, 1, 1.0, |s| vec![s.sin()]).unwrap();
        for eps in [0.5, 0.1, 0.01] {
            let v = symmetric_integral_approx(&f, &p, 0.0, 1.0, eps, QuadSpec::default()).unwrap()[0];
            assert_abs_diff_eq!(v, 2.5, epsilon = 1e-12);
        }
        assert!(symmetric_integral_approx(&f, &p, 0.0, 1.0, 1.5, QuadSpec::default()).is_err());
    }

    #[test]
    fn symmetric_integral_bilinear_closed_form() {
        // W = t x, phi_s = s: the eps-average is int s ds exactly for every eps.
        let f = separable_field(TimeFn::Identity, SpaceFn::Coord, 1, HolderProfile::new(1.0, 1.0, 0.0).unwrap(), Domain::cube((-1.0, 2.0), 1, 2.0).unwrap())
            .unwrap();
        let p = Path::from_fn(0.0, 1.0, 64, 1, 1.0, |s| vec![s]).unwrap();
        let v = symmetric_integral_approx(&f, &p, 0.0, 1.0, 0.25, QuadSpec { panels: 16, order: 4 }).unwrap()[0];
        assert_abs_diff_eq!(v, 0.5, epsilon = 1e-13);
    }

    #[test]
    fn sewing_estimate_with_known_constant() {
        // mu(s,t) = s (t - s): defect mu(s,t)-mu(s,c)-mu(c,t) = (s - c)(t - c), so
        // |defect| <= |t-s|^2 / 4 and K = 1/4 with eps = 1.
        let g = FnGerm::new(1, 1.0, |s, t, o: &mut [f64]| o[0] = s * (t - s)).with_defect_constant(0.25);
        assert!(germ_defect(&g, 0.0, 1.0, 24).unwrap() <= 0.25 + 1e-12);
        for (s, t) in [(0.0, 1.0), (0.2, 0.3), (0.5, 0.9)] {
            let r = sew(&g, s, t, &SewingOptions::with_tol(1e-6)).unwrap();
            let exact = 0.5 * (t * t - s * s);
            let mu = s * (t - s);
            assert!((exact - mu).abs() <= r.theoretical_bound.unwrap() + 1e-12);
            assert!((r.scalar() - mu).abs() <= r.theoretical_bound.unwrap() + 2e-6);
        }
    }

    #[test]
    fn linearity_of_sewing() {
        let g1 = FnGerm::new(1, 1.0, |s: f64, t, o: &mut [f64]| o[0] = s.sin() * (t - s));
        let g2 = FnGerm::new(1, 1.0, |s: f64, t: f64, o: &mut [f64]| o[0] = s * s * (t.exp() - s.exp()));
        let tol = 1e-5;
        let opts = SewingOptions::with_tol(tol);
        let a = sew(&g1, 0.0, 1.0, &opts).unwrap().scalar();
        let b = sew(&g2, 0.0, 1.0, &opts).unwrap().scalar();
        let c = sew(&SumGerm(&g1, &g2), 0.0, 1.0, &opts).unwrap().scalar();
        assert!((c - a - b).abs() <= 2.0 * tol);
    }
}
