//! Jointly Hölder fields `W(t, x)`: evaluation, grid seminorm estimates,
//! space-time mollification and rectangle increments.

use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::numeric::{gauss_legendre, gl9, norm};
use crate::path::Path;

/// Regularity exponents of a field: time exponent `tau`, space exponent
/// `lambda`, growth exponent `beta`, and optionally the exponent `gamma` of
/// the paths it will be integrated along.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HolderProfile {
    pub tau: f64,
    pub lambda: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub gamma: Option<f64>,
}

impl HolderProfile {
    pub fn new(tau: f64, lambda: f64, beta: f64) -> Result<Self> {
        let p = Self { tau, lambda, beta, gamma: None };
        p.validate()?;
        Ok(p)
    }

    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        self.gamma = Some(gamma);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return arg(format!("tau={} outside (0,1]", self.tau));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return arg(format!("lambda={} outside (0,1]", self.lambda));
        }
        if !(self.beta >= 0.0) {
            return arg(format!("beta={} is negative", self.beta));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g <= 1.0) {
                return arg(format!("gamma={g} outside (0,1]"));
            }
        }
        Ok(())
    }

    /// `tau + lambda * gamma`, the Young exponent along a `gamma`-path.
    pub fn young_exponent(&self, gamma: f64) -> f64 {
        self.tau + self.lambda * gamma
    }

    /// Checks `tau + lambda * gamma > 1`.
    pub fn check_young(&self, gamma: f64) -> Result<()> {
        let e = self.young_exponent(gamma);
        if e > 1.0 {
            Ok(())
        } else {
            Err(Error::Precondition(format!(
                "tau + lambda*gamma = {} + {}*{} = {e} is not > 1",
                self.tau, self.lambda, gamma
            )))
        }
    }
}

/// Time interval times a spatial box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub t: (f64, f64),
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Domain {
    pub fn new(t: (f64, f64), lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if !(t.0 < t.1) || lo.len() != hi.len() || lo.is_empty() || lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return arg(format!("degenerate domain t={t:?} lo={lo:?} hi={hi:?}"));
        }
        Ok(Self { t, lo, hi })
    }

    /// Cube `[t0,t1] x [-r, r]^d`.
    pub fn cube(t: (f64, f64), d: usize, r: f64) -> Result<Self> {
        Self::new(t, vec![-r; d], vec![r; d])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, t: f64, x: &[f64]) -> bool {
        let slack = |a: f64, b: f64| 1e-12 * (1.0 + a.abs().max(b.abs()));
        let st = slack(self.t.0, self.t.1);
        t >= self.t.0 - st
            && t <= self.t.1 + st
            && x.len() == self.lo.len()
            && x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| {
                let s = slack(*a, *b);
                *v >= a - s && *v <= b + s
            })
    }

    /// Domain shrunk by `eps` on every side in time and space.
    pub fn shrink(&self, eps: f64) -> Result<Self> {
        Self::new(
            (self.t.0 + eps, self.t.1 - eps),
            self.lo.iter().map(|v| v + eps).collect(),
            self.hi.iter().map(|v| v - eps).collect(),
        )
    }
}

/// A deterministic map `(t, x) -> W(t, x)` with optional spatial derivatives.
///
/// Gradients are written row-major with `out[i * dim_in + j] = d_j W_i`;
/// Hessians (scalar fields only) as `out[j * dim_in + k] = d_j d_k W`.
pub trait FieldFn: Send + Sync {
    fn dim_in(&self) -> usize;
    fn dim_out(&self) -> usize;
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]);
    fn has_gradient(&self) -> bool {
        false
    }
    fn gradient(&self, _t: f64, _x: &[f64], _out: &mut [f64]) {
        unreachable!("gradient called on a field without one")
    }
    fn has_hessian(&self) -> bool {
        false
    }
    fn hessian(&self, _t: f64, _x: &[f64], _out: &mut [f64]) {
        unreachable!("hessian called on a field without one")
    }
}

/// A rough field with its declared regularity and domain.
#[derive(Clone)]
pub struct RoughField {
    inner: Arc<dyn FieldFn>,
    profile: HolderProfile,
    domain: Domain,
    label: String,
}

impl std::fmt::Debug for RoughField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RoughField")
            .field("label", &self.label)
            .field("dim_in", &self.dim_in())
            .field("dim_out", &self.dim_out())
            .field("profile", &self.profile)
            .field("domain", &self.domain)
            .finish()
    }
}

impl RoughField {
    pub fn new(inner: Arc<dyn FieldFn>, profile: HolderProfile, domain: Domain) -> Result<Self> {
        profile.validate()?;
        if inner.dim_in() != domain.dim() {
            return arg(format!(
                "field dimension {} does not match domain dimension {}",
                inner.dim_in(),
                domain.dim()
            ));
        }
        if inner.dim_out() == 0 {
            return arg("field output dimension must be positive");
        }
        Ok(Self { inner, profile, domain, label: String::from("field") })
    }

    pub fn from_fn<F: FieldFn + 'static>(f: F, profile: HolderProfile, domain: Domain) -> Result<Self> {
        Self::new(Arc::new(f), profile, domain)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn with_profile(mut self, profile: HolderProfile) -> Result<Self> {
        profile.validate()?;
        self.profile = profile;
        Ok(self)
    }

    pub fn label(&self) -> &str {
        &self.label
    }
    pub fn profile(&self) -> &HolderProfile {
        &self.profile
    }
    pub fn domain(&self) -> &Domain {
        &self.domain
    }
    pub fn dim_in(&self) -> usize {
        self.inner.dim_in()
    }
    pub fn dim_out(&self) -> usize {
        self.inner.dim_out()
    }
    pub fn has_gradient(&self) -> bool {
        self.inner.has_gradient()
    }
    pub fn has_hessian(&self) -> bool {
        self.inner.has_hessian()
    }
    pub fn inner(&self) -> &Arc<dyn FieldFn> {
        &self.inner
    }

    fn check(&self, t: f64, x: &[f64]) -> Result<()> {
        if self.domain.contains(t, x) {
            Ok(())
        } else {
            Err(Error::OutOfDomain { t, x: x.to_vec() })
        }
    }

    pub fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.check(t, x)?;
        self.inner.eval(t, x, out);
        Ok(())
    }

    /// `W(t, x)`.
    pub fn eval(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim_out()];
        self.eval_into(t, x, &mut out)?;
        Ok(out)
    }

    /// First component of `W(t, x)`; the value for scalar fields.
    pub fn eval_scalar(&self, t: f64, x: &[f64]) -> Result<f64> {
        if self.dim_out() == 1 {
            let mut out = [0.0];
            self.eval_into(t, x, &mut out)?;
            Ok(out[0])
        } else {
            Ok(self.eval(t, x)?[0])
        }
    }

    pub fn gradient_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        if !self.has_gradient() {
            return Err(Error::Capability("spatial gradient"));
        }
        self.check(t, x)?;
        self.inner.gradient(t, x, out);
        Ok(())
    }

    pub fn gradient(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim_out() * self.dim_in()];
        self.gradient_into(t, x, &mut out)?;
        Ok(out)
    }

    pub fn hessian_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        if !self.has_hessian() {
            return Err(Error::Capability("second spatial derivatives"));
        }
        self.check(t, x)?;
        self.inner.hessian(t, x, out);
        Ok(())
    }

    pub fn hessian(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim_in();
        let mut out = vec![0.0; d * d];
        self.hessian_into(t, x, &mut out)?;
        Ok(out)
    }

    /// Four-point combination `W(s,x) - W(t,x) - W(s,y) + W(t,y)`.
    pub fn time_space_increment(&self, s: f64, t: f64, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let a = self.eval(s, x)?;
        let b = self.eval(t, x)?;
        let c = self.eval(s, y)?;
        let d = self.eval(t, y)?;
        Ok((0..a.len()).map(|i| a[i] - b[i] - c[i] + d[i]).collect())
    }

    /// The d-fold rectangle increment `W(t, [x, y])` by inclusion-exclusion over
    /// the `2^d` corners; a corner takes `x_j` on the axes in the subset and
    /// `y_j` elsewhere, with sign `(-1)^{#substituted}`.
    pub fn rect_increment(&self, t: f64, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim_in();
        if x.len() != d || y.len() != d {
            return arg("rectangle corners have wrong dimension");
        }
        let mut acc = vec![0.0; self.dim_out()];
        let mut corner = vec![0.0; d];
        let mut buf = vec![0.0; self.dim_out()];
        for mask in 0u32..(1u32 << d) {
            for j in 0..d {
                corner[j] = if mask >> j & 1 == 1 { x[j] } else { y[j] };
            }
            self.eval_into(t, &corner, &mut buf)?;
            let sign = if mask.count_ones() % 2 == 0 { 1.0 } else { -1.0 };
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += sign * b;
            }
        }
        Ok(acc)
    }

    /// Mollified field `(W * eta_eps)(t, x)` computed with a tensor
    /// Gauss-Legendre rule of `nodes` points per axis over the bump's support.
    pub fn mollify(&self, epsilon: f64, nodes: usize) -> Result<RoughField> {
        if !(epsilon > 0.0) {
            return arg("mollification scale must be positive");
        }
        if nodes < 3 {
            return arg(format!("mollifier quadrature needs >= 3 nodes per axis, got {nodes}"));
        }
        let domain = self.domain.shrink(epsilon)?;
        let m = Mollified::new(self.clone(), epsilon, nodes);
        Ok(RoughField {
            inner: Arc::new(m),
            profile: self.profile,
            domain,
            label: format!("{}*eta_{epsilon}", self.label),
        })
    }

    /// Samples the field on a tensor grid (time axis first) and returns the
    /// multilinear interpolant.
    pub fn tabulate(&self, axes: Vec<Vec<f64>>) -> Result<RoughField> {
        let d = self.dim_in();
        if axes.len() != d + 1 {
            return arg("tabulation needs one time axis plus one axis per spatial dimension");
        }
        let shape: Vec<usize> = axes.iter().map(|a| a.len()).collect();
        let total: usize = shape.iter().product();
        let k = self.dim_out();
        let rows: Vec<Result<Vec<f64>>> = (0..total)
            .into_par_iter()
            .map(|flat| {
                let mut rem = flat;
                let mut idx = vec![0usize; d + 1];
                for ax in (0..=d).rev() {
                    idx[ax] = rem % shape[ax];
                    rem /= shape[ax];
                }
                let x: Vec<f64> = (0..d).map(|j| axes[j + 1][idx[j + 1]]).collect();
                self.eval(axes[0][idx[0]], &x)
            })
            .collect();
        let mut values = Vec::with_capacity(total * k);
        for r in rows {
            values.extend(r?);
        }
        let grid = GridField::new(axes, values, k)?;
        let domain = grid.domain();
        Ok(RoughField {
            inner: Arc::new(grid),
            profile: self.profile,
            domain,
            label: format!("tab({})", self.label),
        })
    }

    /// Pointwise sum of two fields on the intersection of their domains.
    pub fn sum(&self, other: &RoughField) -> Result<RoughField> {
        self.combination(other, 1.0, 1.0)
    }

    /// `self - other`.
    pub fn difference(&self, other: &RoughField) -> Result<RoughField> {
        self.combination(other, 1.0, -1.0)
    }

    /// `c * self`.
    pub fn scaled(&self, c: f64) -> RoughField {
        RoughField {
            inner: Arc::new(SumField(self.inner.clone(), self.inner.clone(), c, 0.0)),
            profile: self.profile,
            domain: self.domain.clone(),
            label: format!("{c}*{}", self.label),
        }
    }

    fn combination(&self, other: &RoughField, c0: f64, c1: f64) -> Result<RoughField> {
        if self.dim_in() != other.dim_in() || self.dim_out() != other.dim_out() {
            return arg("summed fields must share dimensions");
        }
        let a = &self.domain;
        let b = &other.domain;
        let domain = Domain::new(
            (a.t.0.max(b.t.0), a.t.1.min(b.t.1)),
            a.lo.iter().zip(&b.lo).map(|(x, y)| x.max(*y)).collect(),
            a.hi.iter().zip(&b.hi).map(|(x, y)| x.min(*y)).collect(),
        )?;
        let profile = HolderProfile {
            tau: self.profile.tau.min(other.profile.tau),
            lambda: self.profile.lambda.min(other.profile.lambda),
            beta: self.profile.beta.max(other.profile.beta),
            gamma: self.profile.gamma,
        };
        Ok(RoughField {
            inner: Arc::new(SumField(self.inner.clone(), other.inner.clone(), c0, c1)),
            profile,
            domain,
            label: format!("{c0}*{}+{c1}*{}", self.label, other.label),
        })
    }
}

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

/// Scalar functions of time used as drivers.
#[derive(Clone)]
pub enum TimeFn {
    /// `g(t) = t`.
    Identity,
    /// `g(t) = sum_k c_k t^k`.
    Poly(Vec<f64>),
    /// `g(t) = amp * sin(freq * t + phase)`.
    Sin { amp: f64, freq: f64, phase: f64 },
    /// Piecewise-linear interpolation of a sampled scalar path.
    Sampled(Arc<Path>),
}

impl TimeFn {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TimeFn::Identity => t,
            TimeFn::Poly(c) => c.iter().rev().fold(0.0, |acc, ck| acc * t + ck),
            TimeFn::Sin { amp, freq, phase } => amp * (freq * t + phase).sin(),
            TimeFn::Sampled(p) => {
                let t = t.clamp(p.start(), p.end());
                p.eval1(t).expect("clamped into range")
            }
        }
    }

    pub fn sampled(path: Path) -> Result<Self> {
        if path.dim() != 1 {
            return arg("sampled time function must be scalar");
        }
        Ok(TimeFn::Sampled(Arc::new(path)))
    }
}

/// Spatial shapes `h(x)` combined with a time function in separable fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceFn {
    /// Vector `h_i(x) = x_i`.
    Identity,
    /// Vector `h_i(x) = sin(x_i)`.
    Sin,
    /// Scalar `sin(x_1)`.
    Sin1,
    /// Scalar `cos(x_1)`.
    Cos1,
    /// Scalar `x_1`.
    Coord,
    /// Scalar `sum_i x_i`.
    CoordSum,
    /// Scalar `|x|^2`.
    Square,
    /// Scalar `|x_1|^p`.
    AbsPow(f64),
    /// Vector rotation `(-x_2, x_1)` (d = 2).
    Rotation,
    /// Scalar `x_1 * x_2` (d >= 2).
    Product,
}

impl SpaceFn {
    pub fn dim_out(&self, d: usize) -> usize {
        match self {
            SpaceFn::Identity | SpaceFn::Sin => d,
            SpaceFn::Rotation => 2,
            _ => 1,
        }
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        match *self {
            SpaceFn::Identity => out.copy_from_slice(x),
            SpaceFn::Sin => out.iter_mut().zip(x).for_each(|(o, v)| *o = v.sin()),
            SpaceFn::Sin1 => out[0] = x[0].sin(),
            SpaceFn::Cos1 => out[0] = x[0].cos(),
            SpaceFn::Coord => out[0] = x[0],
            SpaceFn::CoordSum => out[0] = x.iter().sum(),
            SpaceFn::Square => out[0] = x.iter().map(|v| v * v).sum(),
            SpaceFn::AbsPow(p) => out[0] = x[0].abs().powf(p),
            SpaceFn::Rotation => {
                out[0] = -x[1];
                out[1] = x[0];
            }
            SpaceFn::Product => out[0] = x[0] * x[1],
        }
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        out.iter_mut().for_each(|v| *v = 0.0);
        match *self {
            SpaceFn::Identity => (0..d).for_each(|i| out[i * d + i] = 1.0),
            SpaceFn::Sin => (0..d).for_each(|i| out[i * d + i] = x[i].cos()),
            SpaceFn::Sin1 => out[0] = x[0].cos(),
            SpaceFn::Cos1 => out[0] = -x[0].sin(),
            SpaceFn::Coord => out[0] = 1.0,
            SpaceFn::CoordSum => out.iter_mut().for_each(|v| *v = 1.0),
            SpaceFn::Square => (0..d).for_each(|j| out[j] = 2.0 * x[j]),
            SpaceFn::AbsPow(p) => out[0] = p * x[0].signum() * x[0].abs().powf(p - 1.0),
            SpaceFn::Rotation => {
                out[1] = -1.0;
                out[d] = 1.0;
            }
            SpaceFn::Product => {
                out[0] = x[1];
                out[1] = x[0];
            }
        }
    }

    /// Hessian for scalar shapes; `false` when not available.
    fn hessian(&self, x: &[f64], out: &mut [f64]) -> bool {
        let d = x.len();
        out.iter_mut().for_each(|v| *v = 0.0);
        match *self {
            SpaceFn::Sin1 => out[0] = -x[0].sin(),
            SpaceFn::Cos1 => out[0] = -x[0].cos(),
            SpaceFn::Coord | SpaceFn::CoordSum => {}
            SpaceFn::Square => (0..d).for_each(|j| out[j * d + j] = 2.0),
            SpaceFn::AbsPow(p) => out[0] = p * (p - 1.0) * x[0].abs().powf(p - 2.0),
            SpaceFn::Product => {
                out[1] = 1.0;
                out[d] = 1.0;
            }
            _ => return false,
        }
        true
    }

    fn is_scalar(&self) -> bool {
        !matches!(self, SpaceFn::Identity | SpaceFn::Sin | SpaceFn::Rotation)
    }
}

/// `W(t, x) = g(t) h(x)`.
pub struct SeparableField {
    pub g: TimeFn,
    pub h: SpaceFn,
    pub dim: usize,
}

impl FieldFn for SeparableField {
    fn dim_in(&self) -> usize {
        self.dim
    }
    fn dim_out(&self) -> usize {
        self.h.dim_out(self.dim)
    }
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.h.eval(x, out);
        let g = self.g.eval(t);
        out.iter_mut().for_each(|v| *v *= g);
    }
    fn has_gradient(&self) -> bool {
        true
    }
    fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.h.gradient(x, out);
        let g = self.g.eval(t);
        out.iter_mut().for_each(|v| *v *= g);
    }
    fn has_hessian(&self) -> bool {
        self.h.is_scalar() && !matches!(self.h, SpaceFn::AbsPow(_))
            || matches!(self.h, SpaceFn::AbsPow(p) if p >= 2.0)
    }
    fn hessian(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let ok = self.h.hessian(x, out);
        debug_assert!(ok);
        let g = self.g.eval(t);
        out.iter_mut().for_each(|v| *v *= g);
    }
}

/// State-independent drift `W(t, x) = g(t) b`.
pub struct DriftField {
    pub g: TimeFn,
    pub b: Vec<f64>,
    pub dim: usize,
}

impl FieldFn for DriftField {
    fn dim_in(&self) -> usize {
        self.dim
    }
    fn dim_out(&self) -> usize {
        self.b.len()
    }
    fn eval(&self, t: f64, _x: &[f64], out: &mut [f64]) {
        let g = self.g.eval(t);
        out.iter_mut().zip(&self.b).for_each(|(o, b)| *o = g * b);
    }
    fn has_gradient(&self) -> bool {
        true
    }
    fn gradient(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
    fn has_hessian(&self) -> bool {
        self.b.len() == 1
    }
    fn hessian(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
}

type EvalFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

/// Field defined by closures; derivatives are optional.
pub struct FnField {
    dim_in: usize,
    dim_out: usize,
    eval: Box<EvalFn>,
    grad: Option<Box<EvalFn>>,
    hess: Option<Box<EvalFn>>,
}

impl FnField {
    pub fn new<F>(dim_in: usize, dim_out: usize, eval: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self { dim_in, dim_out, eval: Box::new(eval), grad: None, hess: None }
    }

    pub fn with_gradient<F>(mut self, grad: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.grad = Some(Box::new(grad));
        self
    }

    pub fn with_hessian<F>(mut self, hess: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.hess = Some(Box::new(hess));
        self
    }
}

impl FieldFn for FnField {
    fn dim_in(&self) -> usize {
        self.dim_in
    }
    fn dim_out(&self) -> usize {
        self.dim_out
    }
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.eval)(t, x, out)
    }
    fn has_gradient(&self) -> bool {
        self.grad.is_some()
    }
    fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.grad.as_ref().expect("checked by has_gradient"))(t, x, out)
    }
    fn has_hessian(&self) -> bool {
        self.hess.is_some()
    }
    fn hessian(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.hess.as_ref().expect("checked by has_hessian"))(t, x, out)
    }
}

/// `c0 * W_0 + c1 * W_1`.
struct SumField(Arc<dyn FieldFn>, Arc<dyn FieldFn>, f64, f64);

impl SumField {
    fn combine(&self, out: &mut [f64], tmp: &[f64]) {
        out.iter_mut().zip(tmp).for_each(|(a, b)| *a = self.2 * *a + self.3 * b);
    }
}

impl FieldFn for SumField {
    fn dim_in(&self) -> usize {
        self.0.dim_in()
    }
    fn dim_out(&self) -> usize {
        self.0.dim_out()
    }
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let mut tmp = vec![0.0; out.len()];
        self.0.eval(t, x, out);
        self.1.eval(t, x, &mut tmp);
        self.combine(out, &tmp);
    }
    fn has_gradient(&self) -> bool {
        self.0.has_gradient() && self.1.has_gradient()
    }
    fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let mut tmp = vec![0.0; out.len()];
        self.0.gradient(t, x, out);
        self.1.gradient(t, x, &mut tmp);
        self.combine(out, &tmp);
    }
    fn has_hessian(&self) -> bool {
        self.0.has_hessian() && self.1.has_hessian()
    }
    fn hessian(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let mut tmp = vec![0.0; out.len()];
        self.0.hessian(t, x, out);
        self.1.hessian(t, x, &mut tmp);
        self.combine(out, &tmp);
    }
}

// ---------------------------------------------------------------------------
// Grid fields
// ---------------------------------------------------------------------------

/// Field sampled on a tensor grid `(t, x_1, .., x_d)` and extended off-grid
/// by multilinear interpolation.
#[derive(Debug, Clone)]
pub struct GridField {
    axes: Vec<Vec<f64>>,
    values: Vec<f64>,
    dim_out: usize,
    strides: Vec<usize>,
    /// `(start, spacing)` for evenly spaced axes.
    uniform: Vec<Option<(f64, f64)>>,
}

impl GridField {
    /// `values` is row-major over the axes, then over output components.
    pub fn new(axes: Vec<Vec<f64>>, values: Vec<f64>, dim_out: usize) -> Result<Self> {
        if axes.len() < 2 {
            return arg("grid field needs a time axis and at least one space axis");
        }
        for (i, a) in axes.iter().enumerate() {
            if a.len() < 2 || a.windows(2).any(|w| !(w[1] > w[0])) {
                return arg(format!("grid axis {i} must have >= 2 strictly increasing points"));
            }
        }
        let total: usize = axes.iter().map(|a| a.len()).product();
        if values.len() != total * dim_out {
            return arg(format!("grid has {} values, expected {}", values.len(), total * dim_out));
        }
        let mut strides = vec![dim_out; axes.len()];
        for ax in (0..axes.len() - 1).rev() {
            strides[ax] = strides[ax + 1] * axes[ax + 1].len();
        }
        let uniform = axes
            .iter()
            .map(|a| {
                let h = (a[a.len() - 1] - a[0]) / (a.len() - 1) as f64;
                let even = a.windows(2).all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h);
                even.then_some((a[0], h))
            })
            .collect();
        Ok(Self { axes, values, dim_out, strides, uniform })
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn domain(&self) -> Domain {
        let first = |a: &Vec<f64>| a[0];
        let last = |a: &Vec<f64>| a[a.len() - 1];
        Domain {
            t: (first(&self.axes[0]), last(&self.axes[0])),
            lo: self.axes[1..].iter().map(first).collect(),
            hi: self.axes[1..].iter().map(last).collect(),
        }
    }

    /// Stored sample at a multi-index.
    pub fn node(&self, idx: &[usize]) -> &[f64] {
        let off: usize = idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum();
        &self.values[off..off + self.dim_out]
    }

    fn cell(axis: &[f64], uniform: Option<(f64, f64)>, v: f64) -> (usize, f64, f64) {
        let n = axis.len();
        let k = match uniform {
            Some((a0, h)) => {
                let mut k = (((v - a0) / h).floor().max(0.0) as usize).min(n - 2);
                if k > 0 && axis[k] > v {
                    k -= 1;
                } else if k + 2 < n && axis[k + 1] <= v {
                    k += 1;
                }
                k
            }
            None => axis.partition_point(|&a| a <= v).saturating_sub(1).min(n - 2),
        };
        let h = axis[k + 1] - axis[k];
        (k, ((v - axis[k]) / h).clamp(0.0, 1.0), h)
    }

    fn interpolate(&self, t: f64, x: &[f64], out: &mut [f64], deriv_axis: Option<usize>) {
        let na = self.axes.len();
        let mut cells = [(0usize, 0.0f64, 1.0f64); 8];
        let coords = std::iter::once(t).chain(x.iter().copied());
        for (ax, v) in coords.enumerate() {
            cells[ax] = Self::cell(&self.axes[ax], self.uniform[ax], v);
        }
        out.iter_mut().for_each(|o| *o = 0.0);
        for mask in 0u32..(1u32 << na) {
            let mut w = 1.0;
            let mut off = 0;
            for (ax, &(k, frac, h)) in cells.iter().enumerate().take(na) {
                let hi = mask >> ax & 1 == 1;
                off += (k + hi as usize) * self.strides[ax];
                w *= if deriv_axis == Some(ax) {
                    if hi { 1.0 / h } else { -1.0 / h }
                } else if hi {
                    frac
                } else {
                    1.0 - frac
                };
            }
            if w != 0.0 {
                for c in 0..self.dim_out {
                    out[c] += w * self.values[off + c];
                }
            }
        }
    }
}

impl FieldFn for GridField {
    fn dim_in(&self) -> usize {
        self.axes.len() - 1
    }
    fn dim_out(&self) -> usize {
        self.dim_out
    }
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.interpolate(t, x, out, None)
    }
    fn has_gradient(&self) -> bool {
        true
    }
    fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        let mut col = vec![0.0; self.dim_out];
        for j in 0..d {
            self.interpolate(t, x, &mut col, Some(j + 1));
            for i in 0..self.dim_out {
                out[i * d + j] = col[i];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Mollification
// ---------------------------------------------------------------------------

/// `exp(1 / (|u|^2 - 1))` on the open unit ball, zero outside.
fn bump_profile(r2: f64) -> f64 {
    if r2 >= 1.0 {
        0.0
    } else {
        (1.0 / (r2 - 1.0)).exp()
    }
}

/// Normalising constant `c_n` of the bump in `n` variables, computed once per
/// dimension by radial quadrature and cached.
pub fn bump_constant(n: usize) -> f64 {
    static CACHE: OnceLock<Vec<f64>> = OnceLock::new();
    let table = CACHE.get_or_init(|| {
        (0..=8)
            .map(|n| {
                if n == 0 {
                    return 1.0;
                }
                // Surface area of the unit sphere S^{n-1}.
                let nf = n as f64;
                let area = 2.0 * std::f64::consts::PI.powf(nf / 2.0) / gamma_fn(nf / 2.0);
                let radial = crate::numeric::composite_gl(
                    |r| r.powi(n as i32 - 1) * bump_profile(r * r),
                    0.0,
                    1.0,
                    64,
                    16,
                );
                1.0 / (area * radial)
            })
            .collect()
    });
    table[n]
}

fn gamma_fn(x: f64) -> f64 {
    // Lanczos approximation (g = 7, n = 9).
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return std::f64::consts::PI / ((std::f64::consts::PI * x).sin() * gamma_fn(1.0 - x));
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    (2.0 * std::f64::consts::PI).sqrt() * t.powf(x + 0.5) * (-t).exp() * a
}

/// Tensor quadrature mass of the normalised bump in `n` variables using
/// `nodes` Gauss-Legendre points per axis (before any renormalisation).
pub fn bump_quadrature_mass(n: usize, nodes: usize) -> f64 {
    let (x, w) = gauss_legendre(nodes);
    let c = bump_constant(n);
    let mut idx = vec![0usize; n];
    let mut total = 0.0;
    loop {
        let r2: f64 = idx.iter().map(|&i| x[i] * x[i]).sum();
        let wt: f64 = idx.iter().map(|&i| w[i]).product();
        total += wt * c * bump_profile(r2);
        if !advance(&mut idx, nodes) {
            break;
        }
    }
    total
}

fn advance(idx: &mut [usize], n: usize) -> bool {
    for v in idx.iter_mut().rev() {
        *v += 1;
        if *v < n {
            return true;
        }
        *v = 0;
    }
    false
}

struct QuadNode {
    /// Offset `eps * u` in (t, x) space.
    offset: Vec<f64>,
    weight: f64,
    /// Weight for d/dx_j, already divided by eps.
    grad: Vec<f64>,
    /// Weight for d^2/dx_j dx_k, already divided by eps^2.
    hess: Vec<f64>,
}

struct Mollified {
    base: RoughField,
    nodes: Vec<QuadNode>,
}

impl Mollified {
    fn new(base: RoughField, eps: f64, per_axis: usize) -> Self {
        let d = base.dim_in();
        let n = d + 1;
        let owned;
        let (x, w) = if per_axis == 9 {
            gl9()
        } else {
            owned = gauss_legendre(per_axis);
            &owned
        };
        let c = bump_constant(n);
        let mut idx = vec![0usize; n];
        let mut nodes = Vec::new();
        let mut mass = 0.0;
        loop {
            let u: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
            let r2: f64 = u.iter().map(|v| v * v).sum();
            let wt: f64 = idx.iter().map(|&i| w[i]).product();
            let eta = c * bump_profile(r2);
            if eta > 0.0 {
                let q = r2 - 1.0;
                // Spatial derivatives of eta at u (time is coordinate 0).
                let grad: Vec<f64> = (0..d).map(|j| wt * eta * (-2.0 * u[j + 1] / (q * q)) / eps).collect();
                let mut hess = vec![0.0; d * d];
                for j in 0..d {
                    for k in 0..d {
                        let (uj, uk) = (u[j + 1], u[k + 1]);
                        let delta = if j == k { 1.0 } else { 0.0 };
                        let h = 4.0 * uj * uk / q.powi(4) - 2.0 * delta / (q * q) + 8.0 * uj * uk / q.powi(3);
                        hess[j * d + k] = wt * eta * h / (eps * eps);
                    }
                }
                mass += wt * eta;
                nodes.push(QuadNode { offset: u.iter().map(|v| eps * v).collect(), weight: wt * eta, grad, hess });
            }
            if !advance(&mut idx, per_axis) {
                break;
            }
        }
        for nd in &mut nodes {
            nd.weight /= mass;
            nd.grad.iter_mut().for_each(|g| *g /= mass);
            nd.hess.iter_mut().for_each(|h| *h /= mass);
        }
        // Calibrate derivative weights so the discrete rule differentiates
        // constants, affine and quadratic functions exactly.
        let mut h0 = vec![0.0; d * d];
        for nd in &nodes {
            h0.iter_mut().zip(&nd.hess).for_each(|(a, h)| *a += h);
        }
        for nd in &mut nodes {
            let w = nd.weight;
            nd.hess.iter_mut().zip(&h0).for_each(|(h, a)| *h -= w * a);
        }
        let mut g1 = vec![0.0; d];
        let mut h2 = vec![0.0; d * d];
        for nd in &nodes {
            for j in 0..d {
                g1[j] -= nd.grad[j] * nd.offset[j + 1];
                for k in 0..d {
                    let m = nd.offset[j + 1] * nd.offset[k + 1];
                    h2[j * d + k] += nd.hess[j * d + k] * if j == k { 0.5 * m } else { m };
                }
            }
        }
        for nd in &mut nodes {
            nd.grad.iter_mut().zip(&g1).for_each(|(g, s)| *g /= s);
            nd.hess.iter_mut().zip(&h2).for_each(|(h, s)| *h /= s);
        }
        Self { base, nodes }
    }

    fn accumulate(&self, t: f64, x: &[f64], mut f: impl FnMut(&QuadNode, &[f64])) {
        let d = x.len();
        let mut y = vec![0.0; d];
        let mut val = vec![0.0; self.base.dim_out()];
        for nd in &self.nodes {
            for j in 0..d {
                y[j] = x[j] - nd.offset[j + 1];
            }
            self.base.inner().eval(t - nd.offset[0], &y, &mut val);
            f(nd, &val);
        }
    }
}

impl FieldFn for Mollified {
    fn dim_in(&self) -> usize {
        self.base.dim_in()
    }
    fn dim_out(&self) -> usize {
        self.base.dim_out()
    }
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        self.accumulate(t, x, |nd, v| {
            for (o, vi) in out.iter_mut().zip(v) {
                *o += nd.weight * vi;
            }
        });
    }
    fn has_gradient(&self) -> bool {
        true
    }
    fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        out.iter_mut().for_each(|o| *o = 0.0);
        self.accumulate(t, x, |nd, v| {
            for (i, vi) in v.iter().enumerate() {
                for j in 0..d {
                    out[i * d + j] += nd.grad[j] * vi;
                }
            }
        });
    }
    fn has_hessian(&self) -> bool {
        self.base.dim_out() == 1
    }
    fn hessian(&self, t: f64, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        self.accumulate(t, x, |nd, v| {
            for (o, h) in out.iter_mut().zip(&nd.hess) {
                *o += h * v[0];
            }
        });
    }
}

// ---------------------------------------------------------------------------
// Seminorm estimation
// ---------------------------------------------------------------------------

/// Discretisation used for a seminorm estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeminormGrid {
    pub times: Vec<f64>,
    pub points: Vec<Vec<f64>>,
}

impl SeminormGrid {
    /// Uniform times on `[a, b]` and a uniform tensor grid on the box `[lo, hi]`.
    pub fn uniform(a: f64, b: f64, nt: usize, lo: &[f64], hi: &[f64], nx: usize) -> Self {
        let times = crate::path::uniform_grid(a, b, nt - 1);
        let d = lo.len();
        let axes: Vec<Vec<f64>> = (0..d).map(|j| crate::path::uniform_grid(lo[j], hi[j], nx - 1)).collect();
        let mut points = Vec::new();
        let mut idx = vec![0usize; d];
        loop {
            points.push((0..d).map(|j| axes[j][idx[j]]).collect());
            if !advance(&mut idx, nx) {
                break;
            }
        }
        Self { times, points }
    }
}

/// Grid estimates of the three suprema in the field's Hölder norm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HolderReport {
    pub rect_seminorm: f64,
    pub time_seminorm: f64,
    pub space_seminorm: f64,
    pub grid: SeminormGrid,
    /// `(s, t, x, y)` attaining each sup, in the order rect, time, space.
    pub argmax_witnesses: [Option<(f64, f64, Vec<f64>, Vec<f64>)>; 3],
}

impl HolderReport {
    pub fn total(&self) -> f64 {
        self.rect_seminorm + self.time_seminorm + self.space_seminorm
    }
}

type Witness = Option<(usize, usize, usize, usize)>;

fn better(a: (f64, Witness), b: (f64, Witness)) -> (f64, Witness) {
    // Ties resolve to the lexicographically smaller witness so the result does
    // not depend on the parallel schedule.
    match a.0.total_cmp(&b.0) {
        std::cmp::Ordering::Greater => a,
        std::cmp::Ordering::Less => b,
        std::cmp::Ordering::Equal => {
            if a.1 <= b.1 || b.1.is_none() {
                a
            } else {
                b
            }
        }
    }
}

/// Evaluates the three suprema over all grid pairs with the field's declared
/// `(tau, lambda, beta)`.
pub fn estimate_seminorms(field: &RoughField, grid: &SeminormGrid) -> Result<HolderReport> {
    let nt = grid.times.len();
    let nx = grid.points.len();
    if nt < 2 || nx < 2 {
        return arg("seminorm grid needs >= 2 time points and >= 2 space points");
    }
    let HolderProfile { tau, lambda, beta, .. } = *field.profile();
    let k = field.dim_out();
    let mut vals = vec![0.0; nt * nx * k];
    for (i, &t) in grid.times.iter().enumerate() {
        for (j, x) in grid.points.iter().enumerate() {
            field.eval_into(t, x, &mut vals[(i * nx + j) * k..(i * nx + j + 1) * k])?;
        }
    }
    let v = |i: usize, j: usize| &vals[(i * nx + j) * k..(i * nx + j + 1) * k];
    let xnorm: Vec<f64> = grid.points.iter().map(|x| norm(x)).collect();
    let dist = |j: usize, l: usize| {
        grid.points[j].iter().zip(&grid.points[l]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    };

    let rect = (0..nt)
        .into_par_iter()
        .map(|i| {
            let mut best: (f64, Witness) = (0.0, None);
            for i2 in (i + 1)..nt {
                let dt = (grid.times[i2] - grid.times[i]).powf(tau);
                for j in 0..nx {
                    for l in (j + 1)..nx {
                        let dx = dist(j, l);
                        if dx == 0.0 {
                            continue;
                        }
                        let (a, b, c, e) = (v(i, j), v(i2, j), v(i, l), v(i2, l));
                        let num = (0..k).map(|q| (a[q] - b[q] - c[q] + e[q]).powi(2)).sum::<f64>().sqrt();
                        let den = (1.0 + xnorm[j] + xnorm[l]).powf(beta) * dt * dx.powf(lambda);
                        best = better(best, (num / den, Some((i, i2, j, l))));
                    }
                }
            }
            best
        })
        .reduce(|| (0.0, None), better);

    let time = (0..nt)
        .into_par_iter()
        .map(|i| {
            let mut best: (f64, Witness) = (0.0, None);
            for i2 in (i + 1)..nt {
                let dt = (grid.times[i2] - grid.times[i]).powf(tau);
                for j in 0..nx {
                    let (a, b) = (v(i, j), v(i2, j));
                    let num = (0..k).map(|q| (a[q] - b[q]).powi(2)).sum::<f64>().sqrt();
                    let den = (1.0 + xnorm[j]).powf(beta + lambda) * dt;
                    best = better(best, (num / den, Some((i, i2, j, j))));
                }
            }
            best
        })
        .reduce(|| (0.0, None), better);

    let space = (0..nt)
        .into_par_iter()
        .map(|i| {
            let mut best: (f64, Witness) = (0.0, None);
            for j in 0..nx {
                for l in (j + 1)..nx {
                    let dx = dist(j, l);
                    if dx == 0.0 {
                        continue;
                    }
                    let (a, b) = (v(i, j), v(i, l));
                    let num = (0..k).map(|q| (a[q] - b[q]).powi(2)).sum::<f64>().sqrt();
                    let den = (1.0 + xnorm[j] + xnorm[l]).powf(beta) * dx.powf(lambda);
                    best = better(best, (num / den, Some((i, i, j, l))));
                }
            }
            best
        })
        .reduce(|| (0.0, None), better);

    let witness = |w: Witness| {
        w.map(|(i, i2, j, l)| (grid.times[i], grid.times[i2], grid.points[j].clone(), grid.points[l].clone()))
    };
    Ok(HolderReport {
        rect_seminorm: rect.0,
        time_seminorm: time.0,
        space_seminorm: space.0,
        grid: grid.clone(),
        argmax_witnesses: [witness(rect.1), witness(time.1), witness(space.1)],
    })
}

/// Weighted growth sup `sup_{t,x} |f(t,x)| / (1 + |x|^beta)` over a grid,
/// used for the gradient seminorms of smooth approximations.
pub fn growth_sup<F>(grid: &SeminormGrid, beta: f64, f: F) -> Result<f64>
where
    F: Fn(f64, &[f64]) -> Result<f64> + Sync,
{
    let rows: Vec<Result<f64>> = grid
        .times
        .par_iter()
        .map(|&t| {
            let mut m = 0.0_f64;
            for x in &grid.points {
                m = m.max(f(t, x)?.abs() / (1.0 + norm(x).powf(beta)));
            }
            Ok(m)
        })
        .collect();
    rows.into_iter().try_fold(0.0_f64, |m, r| Ok(m.max(r?)))
}

// ---------------------------------------------------------------------------
// Builtin constructors
// ---------------------------------------------------------------------------

/// `W(t, x) = g(t) x` (vector, `dim_out = d`).
pub fn linear_field(g: TimeFn, d: usize, profile: HolderProfile, domain: Domain) -> Result<RoughField> {
    RoughField::from_fn(SeparableField { g, h: SpaceFn::Identity, dim: d }, profile, domain)
        .map(|f| f.with_label("linear"))
}

/// `W(t, x) = g(t) (x_1 + .. + x_d)` (scalar).
pub fn linear_scalar_field(g: TimeFn, d: usize, profile: HolderProfile, domain: Domain) -> Result<RoughField> {
    RoughField::from_fn(SeparableField { g, h: SpaceFn::CoordSum, dim: d }, profile, domain)
        .map(|f| f.with_label("linear-scalar"))
}

/// `W(t, x) = g(t) b`.
pub fn drift_field(g: TimeFn, b: Vec<f64>, d: usize, profile: HolderProfile, domain: Domain) -> Result<RoughField> {
    RoughField::from_fn(DriftField { g, b, dim: d }, profile, domain).map(|f| f.with_label("drift"))
}

/// `W(t, x) = g(t) h(x)`.
pub fn separable_field(g: TimeFn, h: SpaceFn, d: usize, profile: HolderProfile, domain: Domain) -> Result<RoughField> {
    if matches!(h, SpaceFn::Rotation | SpaceFn::Product) && d < 2 {
        return arg("rotation and product shapes need d >= 2");
    }
    RoughField::from_fn(SeparableField { g, h, dim: d }, profile, domain).map(|f| f.with_label("separable"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn profile(tau: f64, lambda: f64) -> HolderProfile {
        HolderProfile::new(tau, lambda, 0.0).unwrap()
    }

    fn t_x1(tau: f64) -> RoughField {
        separable_field(TimeFn::Identity, SpaceFn::Coord, 1, profile(tau, 1.0), Domain::cube((0.0, 1.0), 1, 1.0).unwrap())
            .unwrap()
    }

    #[test]
    fn linear_field_closed_form() {
        let f = linear_scalar_field(
            TimeFn::Poly(vec![0.0, 0.0, 1.0]),
            2,
            profile(1.0, 1.0),
            Domain::cube((0.0, 3.0), 2, 2.0).unwrap(),
        )
        .unwrap();
        assert_eq!(f.eval(2.0, &[1.0, 1.0]).unwrap(), vec![8.0]);
    }

    #[test]
    fn eval_is_pure_and_checks_domain() {
        let f = t_x1(1.0);
        let a = f.eval(0.0, &[0.3]).unwrap();
        let b = f.eval(0.0, &[0.3]).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert!(matches!(f.eval(2.0, &[0.0]), Err(Error::OutOfDomain { .. })));
        assert!(matches!(f.eval(0.5, &[1.5]), Err(Error::OutOfDomain { .. })));
    }

    #[test]
    fn seminorm_of_bilinear_field() {
        let f = separable_field(TimeFn::Identity, SpaceFn::Coord, 1, profile(1.0, 1.0), Domain::cube((0.0, 1.0), 1, 1.0).unwrap())
            .unwrap();
        let grid = SeminormGrid { times: vec![0.0, 0.5, 1.0], points: vec![vec![0.0], vec![0.5], vec![1.0]] };
        let r = estimate_seminorms(&f, &grid).unwrap();
        assert_abs_diff_eq!(r.rect_seminorm, 1.0, epsilon = 1e-14);
                // Time weight (1 + |x|)^{beta + lambda} halves the increment at x = 1.
        assert_abs_diff_eq!(r.time_seminorm, 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(r.space_seminorm, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn seminorm_with_half_time_exponent_attained_at_full_interval() {
        let f = t_x1(0.5);
        let grid = SeminormGrid { times: vec![0.0, 0.25, 0.5, 1.0], points: vec![vec![0.0], vec![0.5], vec![1.0]] };
        let r = estimate_seminorms(&f, &grid).unwrap();
        // Brute force: |dt| |dx| / (|dt|^0.5 |dx|) = |dt|^0.5, max at dt = 1.
        assert_abs_diff_eq!(r.rect_seminorm, 1.0, epsilon = 1e-14);
        let w = r.argmax_witnesses[0].clone().unwrap();
        assert_eq!((w.0, w.1), (0.0, 1.0));
    }

    #[test]
    fn constant_field_has_zero_seminorms() {
        let f = drift_field(TimeFn::Poly(vec![2.0]), vec![2.0], 1, profile(1.0, 1.0), Domain::cube((0.0, 1.0), 1, 1.0).unwrap())
            .unwrap();
        let grid = SeminormGrid::uniform(0.0, 1.0, 5, &[-1.0], &[1.0], 5);
        let r = estimate_seminorms(&f, &grid).unwrap();
        assert_eq!(r.total(), 0.0);
    }

    #[test]
    fn degenerate_grid_rejected() {
        let f = t_x1(1.0);
        let grid = SeminormGrid { times: vec![0.0], points: vec![vec![0.0], vec![1.0]] };
        assert!(matches!(estimate_seminorms(&f, &grid), Err(Error::Argument(_))));
    }

    #[test]
    fn rect_increments() {
        let f = separable_field(TimeFn::Poly(vec![1.0]), SpaceFn::Product, 2, profile(1.0, 1.0), Domain::cube((0.0, 1.0), 2, 3.0).unwrap())
            .unwrap();
        let inc = f.rect_increment(0.5, &[0.2, -1.0], &[1.5, 2.0]).unwrap()[0];
        assert_abs_diff_eq!(inc, (1.5 - 0.2) * (2.0 + 1.0), epsilon = 1e-14);
        assert_eq!(f.rect_increment(0.5, &[0.2, 0.3], &[0.2, 0.3]).unwrap()[0], 0.0);
        let g = t_x1(1.0);
        assert_abs_diff_eq!(g.rect_increment(0.5, &[0.1], &[0.7]).unwrap()[0], 0.5 * 0.6, epsilon = 1e-15);
    }

    #[test]
    fn time_space_increments() {
        let f = separable_field(TimeFn::Poly(vec![0.0, 0.0, 1.0]), SpaceFn::Sin1, 1, profile(1.0, 1.0), Domain::cube((0.0, 1.0), 1, 2.0).unwrap())
            .unwrap();
        let v = f.time_space_increment(0.2, 0.7, &[0.3], &[1.1]).unwrap()[0];
        assert_abs_diff_eq!(v, (0.04 - 0.49) * (0.3f64.sin() - 1.1f64.sin()), epsilon = 1e-14);
        assert_eq!(f.time_space_increment(0.4, 0.4, &[0.3], &[1.1]).unwrap()[0], 0.0);
        assert_eq!(f.time_space_increment(0.2, 0.4, &[0.3], &[0.3]).unwrap()[0], 0.0);
        let additive = FnField::new(1, 1, |t, x, o| o[0] = t + x[0]);
        let a = RoughField::from_fn(additive, profile(1.0, 1.0), Domain::cube((0.0, 1.0), 1, 2.0).unwrap()).unwrap();
        assert_abs_diff_eq!(a.time_space_increment(0.1, 0.9, &[-1.0], &[1.7]).unwrap()[0], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn bump_normalisation() {
        for n in 1..=3 {
            assert_abs_diff_eq!(bump_quadrature_mass(n, 64), 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn mollifying_constant_and_affine_fields() {
        let dom = Domain::cube((0.0, 1.0), 1, 2.0).unwrap();
        let c = drift_field(TimeFn::Poly(vec![1.0]), vec![3.5], 1, profile(1.0, 1.0), dom.clone()).unwrap();
        let m = c.mollify(0.1, 9).unwrap();
        assert_abs_diff_eq!(m.eval_scalar(0.5, &[0.2]).unwrap(), 3.5, epsilon = 1e-13);
        let a = separable_field(TimeFn::Poly(vec![1.0]), SpaceFn::Coord, 1, profile(1.0, 1.0), dom).unwrap();
        let m = a.mollify(0.1, 9).unwrap();
        assert_abs_diff_eq!(m.eval_scalar(0.5, &[0.37]).unwrap(), 0.37, epsilon = 1e-13);
        assert_abs_diff_eq!(m.gradient(0.5, &[0.37]).unwrap()[0], 1.0, epsilon = 1e-12);
        assert!(a.mollify(0.1, 2).is_err());
        assert!(m.eval(0.05, &[0.0]).is_err(), "domain shrinks by epsilon");
    }

    #[test]
    fn grid_field_reproduces_nodes() {
        let axes = vec![vec![0.0, 0.5, 1.0], vec![-1.0, 0.0, 2.0]];
        let values: Vec<f64> = (0..9).map(|i| i as f64 * 0.7 - 1.0).collect();
        let g = GridField::new(axes.clone(), values.clone(), 1).unwrap();
        let f = RoughField::from_fn(g, profile(0.5, 0.5), Domain::new((0.0, 1.0), vec![-1.0], vec![2.0]).unwrap()).unwrap();
        for (i, t) in axes[0].iter().enumerate() {
            for (j, x) in axes[1].iter().enumerate() {
                assert_eq!(f.eval_scalar(*t, &[*x]).unwrap(), values[i * 3 + j]);
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let f = separable_field(TimeFn::Sin { amp: 1.0, freq: 2.0, phase: 0.1 }, SpaceFn::Sin, 2, profile(1.0, 1.0), Domain::cube((0.0, 1.0), 2, 3.0).unwrap())
            .unwrap();
        let mut errs = vec![];
        let hs = [1e-2, 5e-3, 2.5e-3];
        for &h in &hs {
            let mut m = 0.0_f64;
            for &x in &[[0.1, 0.2], [-1.0, 0.7], [2.0, -2.0]] {
                let g = f.gradient(0.3, &x).unwrap();
                for j in 0..2 {
                    let mut xp = x;
                    let mut xm = x;
                    xp[j] += h;
                    xm[j] -= h;
                    let fp = f.eval(0.3, &xp).unwrap();
                    let fm = f.eval(0.3, &xm).unwrap();
                    for i in 0..2 {
                        m = m.max(((fp[i] - fm[i]) / (2.0 * h) - g[i * 2 + j]).abs());
                    }
                }
            }
            errs.push(m);
        }
        let fit = crate::numeric::fit_loglog(&hs, &errs).unwrap();
        assert!(fit.slope >= 1.0, "slope {}", fit.slope);
    }
}
