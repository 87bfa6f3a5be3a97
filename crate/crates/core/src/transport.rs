//! Rough transport `d_t u + d_t W . grad u = 0`, solved by characteristics:
//! `u(t, x) = h(psi(t, x))` with `psi(t, .)` the inverse flow.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{arg, Error, Result};
use crate::field::RoughField;
use crate::flow::{field_norm_estimate, inverse_flow, solve_rough_ode, FlowOptions};
use crate::numeric::pairwise_sum;

type ScalarMap = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GradMap = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Initial datum `h` with its gradient.
#[derive(Clone)]
pub struct InitialDatum {
    pub label: String,
    f: ScalarMap,
    grad: GradMap,
}

impl std::fmt::Debug for InitialDatum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "InitialDatum({})", self.label)
    }
}

impl InitialDatum {
    pub fn new(
        label: impl Into<String>,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self { label: label.into(), f: Arc::new(f), grad: Arc::new(grad) }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        (self.grad)(x, &mut g);
        g
    }

    /// `exp(-|x|^2)`.
    pub fn gaussian() -> Self {
        Self::new(
            "gaussian",
            |x| (-x.iter().map(|v| v * v).sum::<f64>()).exp(),
            |x, g| {
                let e = (-x.iter().map(|v| v * v).sum::<f64>()).exp();
                g.iter_mut().zip(x).for_each(|(gi, xi)| *gi = -2.0 * xi * e);
            },
        )
    }

    /// `sum_i sin(x_i)`.
    pub fn sines() -> Self {
        Self::new("sines", |x| x.iter().map(|v| v.sin()).sum(), |x, g| {
            g.iter_mut().zip(x).for_each(|(gi, xi)| *gi = xi.cos())
        })
    }

    /// Constant `c`.
    pub fn constant(c: f64) -> Self {
        Self::new("constant", move |_| c, |_, g| g.iter_mut().for_each(|v| *v = 0.0))
    }

    /// Looks up `gaussian`, `sines` or `constant`.
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "gaussian" => Ok(Self::gaussian()),
            "sines" => Ok(Self::sines()),
            "constant" => Ok(Self::constant(1.0)),
            _ => arg(format!("unknown initial datum '{name}'")),
        }
    }

    /// Max central-difference mismatch of the declared gradient at `points`.
    pub fn gradient_defect(&self, points: &[Vec<f64>], h: f64) -> f64 {
        let mut worst = 0.0_f64;
        for x in points {
            let g = self.gradient(x);
            for j in 0..x.len() {
                let mut p = x.clone();
                let mut m = x.clone();
                p[j] += h;
                m[j] -= h;
                worst = worst.max(((self.eval(&p) - self.eval(&m)) / (2.0 * h) - g[j]).abs());
            }
        }
        worst
    }
}

#[derive(Debug, Clone)]
pub struct TransportProblem {
    pub field: RoughField,
    pub h: InitialDatum,
    /// Time at which `u = h`.
    pub t0: f64,
    pub grid: Vec<Vec<f64>>,
    pub flow: FlowOptions,
}

impl TransportProblem {
    pub fn new(field: RoughField, h: InitialDatum, t0: f64, grid: Vec<Vec<f64>>) -> Result<Self> {
        if field.dim_in() != field.dim_out() {
            return arg("transport needs a vector field W: R^d -> R^d");
        }
        if grid.iter().any(|x| x.len() != field.dim_in()) || grid.is_empty() {
            return arg("transport grid points must match the field dimension");
        }
        if !field.has_gradient() {
            return Err(Error::Capability("transport needs a field gradient"));
        }
        let mut flow = FlowOptions::default();
        flow.field_norm = Some(field_norm_estimate(&field, 9, 9)?);
        Ok(Self { field, h, t0, grid, flow })
    }

    pub fn with_flow(mut self, flow: FlowOptions) -> Self {
        let norm = self.flow.field_norm;
        self.flow = flow;
        if self.flow.field_norm.is_none() {
            self.flow.field_norm = norm;
        }
        self
    }

    /// `u(t, x) = h(psi(t, x))`, `None` when the backward characteristic
    /// leaves the field's box.
    pub fn value_at(&self, t: f64, x: &[f64], steps: usize) -> Result<Option<f64>> {
        Ok(self.backward(t, x, steps)?.map(|p| self.h.eval(&p)))
    }

    fn backward(&self, t: f64, x: &[f64], steps: usize) -> Result<Option<Vec<f64>>> {
        if t == self.t0 {
            return Ok(Some(x.to_vec()));
        }
        match inverse_flow(&self.field, x, self.t0, t, steps.max(2), &self.flow) {
            Ok(p) => Ok(Some(p)),
            Err(Error::OutOfDomain { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TransportSolution {
    pub t: f64,
    pub grid: Vec<Vec<f64>>,
    /// `u(t, x)` per grid node, `NaN` where invalid.
    pub values: Vec<f64>,
    /// `psi(t, x)` per grid node, empty where invalid.
    pub backward: Vec<Vec<f64>>,
    pub valid: Vec<bool>,
}

/// Solves to time `t` on the problem grid with `steps` flow steps.
pub fn solve_transport(problem: &TransportProblem, t: f64, steps: usize) -> Result<TransportSolution> {
    let rows: Vec<Option<Vec<f64>>> = problem
        .grid
        .par_iter()
        .map(|x| problem.backward(t, x, steps))
        .collect::<Result<_>>()?;
    let valid: Vec<bool> = rows.iter().map(Option::is_some).collect();
    let values = rows.iter().map(|r| r.as_ref().map_or(f64::NAN, |p| problem.h.eval(p))).collect();
    let backward = rows.into_iter().map(Option::unwrap_or_default).collect();
    Ok(TransportSolution { t, grid: problem.grid.clone(), values, backward, valid })
}

/// `max_x |u(t, phi(t, x)) - h(x)|` over grid nodes whose forward and
/// backward characteristics stay in the box.
pub fn characteristics_defect(problem: &TransportProblem, t: f64, steps: usize) -> Result<f64> {
    let defects: Vec<Option<f64>> = problem
        .grid
        .par_iter()
        .map(|x| {
            let fwd = match solve_rough_ode(&problem.field, x, problem.t0, t, steps, &problem.flow) {
                Ok(s) => s.end_state().to_vec(),
                Err(Error::OutOfDomain { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            Ok(problem.value_at(t, &fwd, steps)?.map(|u| (u - problem.h.eval(x)).abs()))
        })
        .collect::<Result<_>>()?;
    Ok(defects.into_iter().flatten().fold(0.0, f64::max))
}

/// Discretisation of the residual check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualOptions {
    /// Cells `2^level` of the sewing partition of `[t0, t]`.
    pub level: u32,
    /// Flow steps per unit time (at least 2 per solve).
    pub steps_per_unit: usize,
    /// Central-difference spacing for `grad u`; `None` uses box size / 256.
    pub hx: Option<f64>,
}

impl Default for ResidualOptions {
    fn default() -> Self {
        Self { level: 6, steps_per_unit: 1024, hx: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualReport {
    pub u: f64,
    pub h: f64,
    pub integral: f64,
    pub residual: f64,
}

/// `u(t,x) - h(x) + int_{t0}^t grad u(s, x) W(ds, x)`, the integral as the
/// Riemann sum of the germ `grad u(s, x) (W(s', x) - W(s, x))` on `2^level`
/// cells with `grad u` by central differences.
pub fn transport_residual(problem: &TransportProblem, x: &[f64], t: f64, opts: &ResidualOptions) -> Result<ResidualReport> {
    let d = x.len();
    if d != problem.field.dim_in() {
        return arg("residual point has the wrong dimension");
    }
    let dom = problem.field.domain();
    let hx = opts.hx.unwrap_or_else(|| {
        dom.lo.iter().zip(&dom.hi).map(|(a, b)| b - a).fold(f64::INFINITY, f64::min) / 256.0
    });
    if !(hx > 0.0) || x.iter().zip(dom.lo.iter().zip(&dom.hi)).any(|(v, (a, b))| v - hx < *a || v + hx > *b) {
        return arg("central differences for grad u leave the field box");
    }
    let n = 1usize << opts.level;
    let span = t - problem.t0;
    let steps_for = |s: f64| ((((s - problem.t0).abs()) * opts.steps_per_unit as f64).round() as usize).max(2);
    let value = |s: f64, y: &[f64]| -> Result<f64> {
        problem
            .value_at(s, y, steps_for(s))?
            .ok_or_else(|| Error::Argument("characteristic leaves the box near the residual point".into()))
    };
    let cells: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|k| {
            let s = problem.t0 + span * k as f64 / n as f64;
            let s1 = if k + 1 == n { t } else { problem.t0 + span * (k + 1) as f64 / n as f64 };
            let mut grad = vec![0.0; d];
            for j in 0..d {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[j] += hx;
                m[j] -= hx;
                grad[j] = (value(s, &p)? - value(s, &m)?) / (2.0 * hx);
            }
            let hi = problem.field.eval(s1, x)?;
            let lo = problem.field.eval(s, x)?;
            Ok((0..d).map(|j| grad[j] * (hi[j] - lo[j])).sum())
        })
        .collect::<Result<_>>()?;
    let integral = pairwise_sum(&cells);
    let u = value(t, x)?;
    let h = problem.h.eval(x);
    Ok(ResidualReport { u, h, integral, residual: u - h + integral })
}

/// Max grid discrepancy between solutions with `steps` and `2 steps`, for
/// each entry of `steps`. Invalid nodes in either solution are skipped.
pub fn uniqueness_probe(problem: &TransportProblem, t: f64, steps: &[usize]) -> Result<Vec<f64>> {
    steps
        .iter()
        .map(|&n| {
            let a = solve_transport(problem, t, n)?;
            let b = solve_transport(problem, t, 2 * n)?;
            Ok(a.values
                .iter()
                .zip(&b.values)
                .filter(|(u, v)| u.is_finite() && v.is_finite())
                .map(|(u, v)| (u - v).abs())
                .fold(0.0, f64::max))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{drift_field, separable_field, Domain, HolderProfile, SpaceFn, TimeFn};
    use crate::flow::Scheme;
    use approx::assert_abs_diff_eq;

    fn smooth() -> HolderProfile {
        HolderProfile::new(1.0, 1.0, 0.0).unwrap()
    }

    fn grid1(n: usize, r: f64) -> Vec<Vec<f64>> {
        (0..n).map(|i| vec![-r + 2.0 * r * i as f64 / (n - 1) as f64]).collect()
    }

    #[test]
    fn constant_drift_is_classical_transport() {
        let f = drift_field(TimeFn::Identity, vec![0.7], 1, smooth(), Domain::cube((0.0, 1.0), 1, 5.0).unwrap()).unwrap();
        let p = TransportProblem::new(f, InitialDatum::gaussian(), 0.0, grid1(9, 2.0)).unwrap();
        let s = solve_transport(&p, 1.0, 8).unwrap();
        for (x, u) in p.grid.iter().zip(&s.values) {
            assert_abs_diff_eq!(*u, (-(x[0] - 0.7) * (x[0] - 0.7)).exp(), epsilon = 1e-15);
        }
        let s0 = solve_transport(&p, 0.0, 8).unwrap();
        for (x, u) in p.grid.iter().zip(&s0.values) {
            assert_eq!(*u, p.h.eval(x));
        }
        assert!(uniqueness_probe(&p, 1.0, &[4, 8]).unwrap().iter().all(|d| *d < 1e-14));
    }

    #[test]
    fn invalid_nodes_are_marked() {
        let f = drift_field(TimeFn::Identity, vec![3.0], 1, smooth(), Domain::cube((0.0, 1.0), 1, 2.0).unwrap()).unwrap();
        let p = TransportProblem::new(f, InitialDatum::sines(), 0.0, grid1(5, 2.0)).unwrap();
        let s = solve_transport(&p, 1.0, 8).unwrap();
        assert_eq!(s.valid, vec![false, false, false, true, true]);
        assert!(s.values[0].is_nan());
    }

    #[test]
    fn linear_field_closed_form_and_max_principle() {
        let g = TimeFn::Sin { amp: 0.6, freq: 2.0, phase: 0.0 };
        let f = separable_field(g.clone(), SpaceFn::Coord, 1, smooth(), Domain::cube((0.0, 1.0), 1, 10.0).unwrap()).unwrap();
        let p = TransportProblem::new(f, InitialDatum::gaussian(), 0.0, grid1(11, 2.0))
            .unwrap()
            .with_flow(FlowOptions { scheme: Scheme::SecondOrder, ..FlowOptions::default() });
        let s = solve_transport(&p, 1.0, 4096).unwrap();
        let dg = g.eval(1.0) - g.eval(0.0);
        for (x, u) in p.grid.iter().zip(&s.values) {
            let y = x[0] * (-dg).exp();
            assert_abs_diff_eq!(*u, (-y * y).exp(), epsilon = 1e-6);
            assert!(*u >= 0.0 && *u <= 1.0);
        }
        assert!(characteristics_defect(&p, 1.0, 4096).unwrap() < 1e-6);
        let probe = uniqueness_probe(&p, 1.0, &[16, 32, 64]).unwrap();
        assert!(probe[1] < probe[0] && probe[2] < probe[1], "{probe:?}");
    }

    #[test]
    fn residual_of_constant_datum_vanishes() {
        let f = separable_field(TimeFn::Sin { amp: 1.0, freq: 2.0, phase: 0.0 }, SpaceFn::Sin, 1, smooth(), Domain::cube((0.0, 1.0), 1, 4.0).unwrap())
            .unwrap();
        let p = TransportProblem::new(f, InitialDatum::constant(2.0), 0.0, grid1(3, 1.0)).unwrap();
        let r = transport_residual(&p, &[0.3], 1.0, &ResidualOptions { level: 4, steps_per_unit: 64, hx: None }).unwrap();
        assert_eq!(r.integral, 0.0);
        assert_eq!(r.residual, 0.0);
    }

    #[test]
    fn residual_decays_for_smooth_driver() {
        let f = separable_field(TimeFn::Sin { amp: 1.0, freq: 2.0, phase: 0.0 }, SpaceFn::Sin, 1, smooth(), Domain::cube((0.0, 1.0), 1, 4.0).unwrap())
            .unwrap();
        let p = TransportProblem::new(f, InitialDatum::gaussian(), 0.0, grid1(3, 1.0))
            .unwrap()
            .with_flow(FlowOptions { scheme: Scheme::SecondOrder, ..FlowOptions::default() });
        let res: Vec<f64> = (3..7)
            .map(|l| {
                let o = ResidualOptions { level: l, steps_per_unit: 4096, hx: Some(1e-4) };
                transport_residual(&p, &[0.3], 1.0, &o).unwrap().residual.abs()
            })
            .collect();
        for w in res.windows(2) {
            assert!(w[1] < w[0], "{res:?}");
        }
    }

    #[test]
    fn datum_gradients_match_differences() {
        let pts = grid1(7, 1.5);
        for h in [InitialDatum::gaussian(), InitialDatum::sines(), InitialDatum::constant(3.0)] {
            assert!(h.gradient_defect(&pts, 1e-5) < 1e-8);
        }
        assert!(InitialDatum::builtin("nope").is_err());
    }
}
