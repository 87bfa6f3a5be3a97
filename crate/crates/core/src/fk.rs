//! Monte-Carlo Feynman-Kac for `d_t u + L u + u d_t W = 0`, `u(T) = u_T`,
//! with `L = 1/2 a^{ij} d_ij + b^i d_i`, plus a finite-difference reference.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::field::{GridField, RoughField, TimeFn};
use crate::gaussian::stream_rng;
use crate::numeric::{adaptive_gk, fit_loglog, mean_stderr, pairwise_sum, LinearFit};
use crate::path::{uniform_grid, Path};
use crate::sewing::{nonlinear_young_integral, ConditionMode, SewingOptions, SewingResult};

/// Spectral square root of a symmetric positive-definite `d x d` matrix
/// (row-major).
pub fn sqrt_spd(a: &[f64], d: usize) -> Result<Vec<f64>> {
    if a.len() != d * d {
        return arg("matrix has the wrong size");
    }
    if d == 1 {
        return if a[0] > 0.0 {
            Ok(vec![a[0].sqrt()])
        } else {
            Err(Error::Numerical(format!("matrix is not positive definite: smallest eigenvalue {}", a[0])))
        };
    }
    let m = DMatrix::from_row_slice(d, d, a);
    let scale = m.amax().max(f64::MIN_POSITIVE);
    if (&m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::Numerical("matrix is not symmetric".into()));
    }
    let eig = SymmetricEigen::new(m);
    let min = eig.eigenvalues.min();
    if !(min > 0.0) {
        return Err(Error::Numerical(format!("matrix is not positive definite: smallest eigenvalue {min}")));
    }
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt)) * eig.eigenvectors.transpose();
    Ok((0..d * d).map(|k| 0.5 * (root[(k / d, k % d)] + root[(k % d, k / d)])).collect())
}

type MatFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Coefficients of `L` with declared ellipticity and growth constants.
#[derive(Clone)]
pub struct DiffusionConfig {
    pub d: usize,
    a: MatFn,
    b: MatFn,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub kappa_b: f64,
    /// `sigma` when `a` is constant.
    sigma_const: Option<Vec<f64>>,
    pub label: String,
}

impl std::fmt::Debug for DiffusionConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffusionConfig")
            .field("label", &self.label)
            .field("d", &self.d)
            .field("lambda_min", &self.lambda_min)
            .field("lambda_max", &self.lambda_max)
            .field("kappa_b", &self.kappa_b)
            .finish()
    }
}

impl DiffusionConfig {
    pub fn new(
        d: usize,
        a: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        b: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        lambda_min: f64,
        lambda_max: f64,
        kappa_b: f64,
    ) -> Result<Self> {
        if d == 0 || !(lambda_min > 0.0) || lambda_max < lambda_min || !(kappa_b >= 0.0) {
            return arg("diffusion needs d >= 1, 0 < lambda_min <= Lambda and kappa_b >= 0");
        }
        Ok(Self {
            d,
            a: Arc::new(a),
            b: Arc::new(b),
            lambda_min,
            lambda_max,
            kappa_b,
            sigma_const: None,
            label: "custom".into(),
        })
    }

    /// Constant `a` (row-major) and drift `b`.
    pub fn constant(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let d = b.len();
        let sigma = sqrt_spd(&a, d)?;
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &a)).eigenvalues;
        let a2 = a.clone();
        let b2 = b.clone();
        let mut cfg = Self::new(
            d,
            move |_, _, out| out.copy_from_slice(&a2),
            move |_, _, out| out.copy_from_slice(&b2),
            eig.min(),
            eig.max(),
            b.iter().map(|v| v * v).sum::<f64>().sqrt(),
        )?;
        cfg.sigma_const = Some(sigma);
        cfg.label = "constant".into();
        Ok(cfg)
    }

    /// `L = 1/2 Laplacian`.
    pub fn brownian(d: usize) -> Self {
        let mut a = vec![0.0; d * d];
        (0..d).for_each(|i| a[i * d + i] = 1.0);
        let mut c = Self::constant(a, vec![0.0; d]).expect("identity is SPD");
        c.label = "brownian".into();
        c
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn a_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.a)(t, x, out)
    }

    pub fn b_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.b)(t, x, out)
    }

    pub fn sigma_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        if let Some(s) = &self.sigma_const {
            out.copy_from_slice(s);
            return Ok(());
        }
        let d = self.d;
        (self.a)(t, x, out);
        let diagonal = (0..d * d).all(|k| k / d == k % d || out[k] == 0.0);
        if diagonal {
            for i in 0..d {
                let v = out[i * d + i];
                if !(v > 0.0) {
                    return Err(Error::Numerical(format!("matrix is not positive definite: smallest eigenvalue {v}")));
                }
                out[i * d + i] = v.sqrt();
            }
            return Ok(());
        }
        let a = out.to_vec();
        out.copy_from_slice(&sqrt_spd(&a, d)?);
        Ok(())
    }

    /// Checks ellipticity, `sigma sigma^T = a` and the growth and Lipschitz
    /// bounds of `b` on the given points.
    pub fn check(&self, points: &[(f64, Vec<f64>)], seed: u64) -> Result<()> {
        let d = self.d;
        let mut rng = stream_rng(seed, 0);
        let mut a = vec![0.0; d * d];
        let mut s = vec![0.0; d * d];
        let mut b = vec![0.0; d];
        let mut b2 = vec![0.0; d];
        for (k, (t, x)) in points.iter().enumerate() {
            if x.len() != d {
                return arg("check point has the wrong dimension");
            }
            self.a_into(*t, x, &mut a);
            self.sigma_into(*t, x, &mut s)?;
            for i in 0..d {
                for j in 0..d {
                    let ss: f64 = (0..d).map(|k| s[i * d + k] * s[j * d + k]).sum();
                    if (ss - a[i * d + j]).abs() > 1e-10 * (1.0 + a[i * d + j].abs()) {
                        return Err(Error::Precondition(format!("sigma sigma^T differs from a at t={t}, x={x:?}")));
                    }
                }
            }
            for _ in 0..4 {
                let xi: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let n2: f64 = xi.iter().map(|v| v * v).sum();
                let q: f64 = (0..d).map(|i| (0..d).map(|j| xi[i] * a[i * d + j] * xi[j]).sum::<f64>()).sum();
                if q < self.lambda_min * n2 * (1.0 - 1e-12) || q > self.lambda_max * n2 * (1.0 + 1e-12) {
                    return Err(Error::Precondition(format!("ellipticity bounds fail at t={t}, x={x:?}")));
                }
            }
            self.b_into(*t, x, &mut b);
            let xn = crate::numeric::norm(x);
            if crate::numeric::norm(&b) > self.kappa_b * (1.0 + xn) * (1.0 + 1e-12) {
                return Err(Error::Precondition(format!("drift growth bound fails at t={t}, x={x:?}")));
            }
            let (t2, y) = &points[(k + 1) % points.len()];
            if *t2 == *t {
                self.b_into(*t, y, &mut b2);
                let db: Vec<f64> = b.iter().zip(&b2).map(|(p, q)| p - q).collect();
                let dx: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
                if crate::numeric::norm(&db) > self.kappa_b * crate::numeric::norm(&dx) * (1.0 + 1e-12) + 1e-14 {
                    return Err(Error::Precondition(format!("drift Lipschitz bound fails between {x:?} and {y:?}")));
                }
            }
        }
        Ok(())
    }

    /// Coefficients from a declarative spec.
    pub fn from_spec(spec: &CoeffSpec, d: usize) -> Result<Self> {
        let mut eye = vec![0.0; d * d];
        (0..d).for_each(|i| eye[i * d + i] = 1.0);
        let b_fn: (MatFn, f64) = match spec.b {
            DriftSpec::Zero => (Arc::new(|_, _, o: &mut [f64]| o.iter_mut().for_each(|v| *v = 0.0)), 0.0),
            DriftSpec::Linear { k } => (Arc::new(move |_, x: &[f64], o: &mut [f64]| {
                o.iter_mut().zip(x).for_each(|(v, xi)| *v = k * xi)
            }), k.abs()),
            DriftSpec::ClampedLinear { k, clip } => {
                if !(clip > 0.0) {
                    return arg("drift clip must be positive");
                }
                (Arc::new(move |_, x: &[f64], o: &mut [f64]| {
                    o.iter_mut().zip(x).for_each(|(v, xi)| *v = k * xi.clamp(-clip, clip))
                }), k.abs())
            }
        };
        let (a_fn, lo, hi, constant): (MatFn, f64, f64, Option<Vec<f64>>) = match spec.a {
            DiffusivitySpec::Identity => {
                let e = eye.clone();
                (Arc::new(move |_, _, o: &mut [f64]| o.copy_from_slice(&e)), 1.0, 1.0, Some(eye.clone()))
            }
            DiffusivitySpec::Scalar { value } => {
                if !(value > 0.0) {
                    return arg("scalar diffusivity must be positive");
                }
                let e: Vec<f64> = eye.iter().map(|v| v * value).collect();
                let s: Vec<f64> = eye.iter().map(|v| v * value.sqrt()).collect();
                (Arc::new(move |_, _, o: &mut [f64]| o.copy_from_slice(&e)), value, value, Some(s))
            }
            DiffusivitySpec::SinModulated { base, amp } => {
                if !(base > amp.abs()) {
                    return arg("sin-modulated diffusivity needs base > |amp|");
                }
                (Arc::new(move |_, x: &[f64], o: &mut [f64]| {
                    o.iter_mut().for_each(|v| *v = 0.0);
                    for i in 0..x.len() {
                        o[i * x.len() + i] = base + amp * x[i].sin();
                    }
                }), base - amp.abs(), base + amp.abs(), None)
            }
        };
        let sigma_const = match (spec.a, constant) {
            (DiffusivitySpec::Identity, Some(e)) => Some(e),
            (_, c) => c,
        };
        Ok(Self {
            d,
            a: a_fn,
            b: b_fn.0,
            lambda_min: lo,
            lambda_max: hi,
            kappa_b: b_fn.1,
            sigma_const,
            label: format!("{spec:?}"),
        })
    }
}

/// Declarative diffusion coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoeffSpec {
    pub a: DiffusivitySpec,
    pub b: DriftSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiffusivitySpec {
    Identity,
    /// `a = value I`.
    Scalar { value: f64 },
    /// `a = diag(base + amp sin x_i)`.
    SinModulated { base: f64, amp: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftSpec {
    Zero,
    /// `b = k x`.
    Linear { k: f64 },
    /// `b_i = k clamp(x_i, -clip, clip)`.
    ClampedLinear { k: f64, clip: f64 },
}

/// Monte-Carlo settings; `seed` and the path index fix every draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MCConfig {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub antithetic: bool,
}

impl MCConfig {
    pub fn new(n_paths: usize, n_steps: usize, seed: u64) -> Self {
        Self { n_paths, n_steps, seed, antithetic: false }
    }

    fn validate(&self) -> Result<()> {
        if self.n_paths == 0 || self.n_steps == 0 {
            return arg("n_paths and n_steps must be >= 1");
        }
        if self.antithetic && self.n_paths % 2 == 1 {
            return arg("antithetic sampling needs an even path count");
        }
        Ok(())
    }
}

/// Brownian increments `N(0, dt I)` for path `index`, laid out step-major.
/// Antithetic pairs share a stream with opposite signs.
pub fn brownian_increments(seed: u64, index: u64, antithetic: bool, n_steps: usize, d: usize, dt: f64) -> Vec<f64> {
    let (stream, sign) = if antithetic { (index / 2, if index % 2 == 0 { 1.0 } else { -1.0 }) } else { (index, 1.0) };
    let mut rng = stream_rng(seed, stream);
    let s = sign * dt.sqrt();
    (0..n_steps * d).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Sums consecutive groups of `factor` steps.
pub fn coarsen_increments(inc: &[f64], d: usize, factor: usize) -> Vec<f64> {
    let n = inc.len() / d;
    let m = n / factor;
    let mut out = vec![0.0; m * d];
    for k in 0..m {
        for f in 0..factor {
            for j in 0..d {
                out[k * d + j] += inc[(k * factor + f) * d + j];
            }
        }
    }
    out
}

/// One Euler-Maruyama path with its driving increments.
#[derive(Debug, Clone, Serialize)]
pub struct DiffusionPath {
    pub times: Vec<f64>,
    /// States, step-major.
    pub states: Vec<f64>,
    pub increments: Vec<f64>,
    pub dim: usize,
}

impl DiffusionPath {
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn end_state(&self) -> &[f64] {
        self.state(self.times.len() - 1)
    }

    /// Piecewise-linear interpolation with Hölder exponent `gamma`.
    pub fn to_path(&self, gamma: f64) -> Result<Path> {
        Path::new(self.times.clone(), self.states.clone(), self.dim, gamma)
    }
}

/// Euler-Maruyama from `(r, x)` to `t_end` driven by `increments`.
pub fn euler_maruyama(cfg: &DiffusionConfig, r: f64, x: &[f64], t_end: f64, increments: Vec<f64>) -> Result<DiffusionPath> {
    let d = cfg.d;
    if x.len() != d || increments.len() % d != 0 || increments.is_empty() {
        return arg("start point or increments do not match the diffusion dimension");
    }
    if !(r < t_end) {
        return arg("diffusion needs r < T");
    }
    let n = increments.len() / d;
    let times = uniform_grid(r, t_end, n);
    let mut states = Vec::with_capacity((n + 1) * d);
    states.extend_from_slice(x);
    let mut cur = x.to_vec();
    let mut sigma = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    for k in 0..n {
        let dt = times[k + 1] - times[k];
        cfg.sigma_into(times[k], &cur, &mut sigma)?;
        cfg.b_into(times[k], &cur, &mut b);
        let db = &increments[k * d..(k + 1) * d];
        for i in 0..d {
            let noise: f64 = (0..d).map(|j| sigma[i * d + j] * db[j]).sum();
            cur[i] += b[i] * dt + noise;
        }
        states.extend_from_slice(&cur);
    }
    Ok(DiffusionPath { times, states, increments, dim: d })
}

/// Paths `0..n_paths` from `(r, x)`, in parallel.
pub fn simulate_diffusion(cfg: &DiffusionConfig, r: f64, x: &[f64], t_end: f64, mc: &MCConfig) -> Result<Vec<DiffusionPath>> {
    mc.validate()?;
    let dt = (t_end - r) / mc.n_steps as f64;
    (0..mc.n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let inc = brownian_increments(mc.seed, i, mc.antithetic, mc.n_steps, cfg.d, dt);
            euler_maruyama(cfg, r, x, t_end, inc)
        })
        .collect()
}

/// `int W(ds, X_s)` by sewing along the interpolated path. The path is given
/// Hölder exponent `1/2 - margin`, so strict mode demands
/// `tau + lambda (1/2 - margin) > 1`.
pub fn pathwise_w_integral(
    field: &RoughField,
    path: &DiffusionPath,
    opts: &SewingOptions,
    mode: ConditionMode,
    margin: f64,
) -> Result<SewingResult> {
    if field.dim_out() != 1 {
        return arg("the potential field must be scalar");
    }
    let p = path.to_path(0.5 - margin)?;
    nonlinear_young_integral(field, &p, p.start(), p.end(), opts, mode)
}

/// Left-point sum `sum W(t_{k+1}, X_k) - W(t_k, X_k)` on the simulation grid.
pub fn grid_w_integral(field: &RoughField, path: &DiffusionPath) -> Result<f64> {
    let mut acc = Vec::with_capacity(path.times.len() - 1);
    for k in 0..path.times.len() - 1 {
        let x = path.state(k);
        acc.push(field.eval_scalar(path.times[k + 1], x)? - field.eval_scalar(path.times[k], x)?);
    }
    Ok(pairwise_sum(&acc))
}

/// The auxiliary solution `v` of `(d_t + L_0) v = -d_t W`, `v(T) = -W(T)`,
/// and its gradient.
pub trait VFunction: Sync {
    fn dim(&self) -> usize;
    fn value(&self, t: f64, x: &[f64]) -> Result<f64>;
    fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()>;
}

/// Closed-form `v` for `W = g(t) h(x)` with `L_0 h = -mu h`:
/// `v(r, x) = (-g(r) + mu int_r^T g(s) e^{-mu (s - r)} ds) h(x)`.
pub struct EigenV {
    pub g: TimeFn,
    pub mu: f64,
    pub t_end: f64,
    h: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    grad_h: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
    dim: usize,
}

impl EigenV {
    pub fn new(
        g: TimeFn,
        mu: f64,
        t_end: f64,
        dim: usize,
        h: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad_h: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self { g, mu, t_end, h: Arc::new(h), grad_h: Arc::new(grad_h), dim }
    }

    /// `W = g(t) sin(x_1)` under `a = alpha I` in one dimension (`mu = alpha / 2`).
    pub fn sine(g: TimeFn, alpha: f64, t_end: f64) -> Self {
        Self::new(g, 0.5 * alpha, t_end, 1, |x| x[0].sin(), |x, o| o[0] = x[0].cos())
    }

    pub fn coefficient(&self, r: f64) -> Result<f64> {
        if r >= self.t_end {
            return Ok(-self.g.eval(self.t_end));
        }
        let mu = self.mu;
        let g = &self.g;
        let tail = adaptive_gk(|s| g.eval(s) * (-mu * (s - r)).exp(), r, self.t_end, 1e-13, 1 << 14)?;
        Ok(-g.eval(r) + mu * tail)
    }
}

impl VFunction for EigenV {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, t: f64, x: &[f64]) -> Result<f64> {
        Ok(self.coefficient(t)? * (self.h)(x))
    }
    fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let c = self.coefficient(t)?;
        (self.grad_h)(x, out);
        out.iter_mut().for_each(|v| *v *= c);
        Ok(())
    }
}

/// Inner Monte-Carlo settings for `v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VOptions {
    pub inner_paths: usize,
    pub steps: usize,
    pub seed: u64,
    /// Central-difference spacing for `grad v`.
    pub fd_step: f64,
}

impl Default for VOptions {
    fn default() -> Self {
        Self { inner_paths: 2000, steps: 64, seed: 0, fd_step: 1e-3 }
    }
}

fn l0_w(field: &RoughField, cfg: &DiffusionConfig, t: f64, x: &[f64], a: &mut [f64], hess: &mut [f64]) -> Result<f64> {
    cfg.a_into(t, x, a);
    field.hessian_into(t, x, hess)?;
    Ok(0.5 * a.iter().zip(hess.iter()).map(|(p, q)| p * q).sum::<f64>())
}

/// `v(r, x) = -W(r, x) - E int_r^T L_0 W(s, phi_s) ds` with `phi` the driftless
/// diffusion, and `grad v` by central differences with common draws.
pub fn solve_v(field: &RoughField, cfg: &DiffusionConfig, r: f64, x: &[f64], t_end: f64, opts: &VOptions) -> Result<(f64, Vec<f64>)> {
    if !field.has_hessian() {
        return Err(Error::Capability("solve_v needs second spatial derivatives of the field"));
    }
    if field.dim_out() != 1 || field.dim_in() != cfg.d || x.len() != cfg.d {
        return arg("solve_v needs a scalar field matching the diffusion dimension");
    }
    if opts.inner_paths == 0 || opts.steps == 0 || !(opts.fd_step > 0.0) {
        return arg("inner paths, steps and fd_step must be positive");
    }
    let d = cfg.d;
    let mut starts = vec![x.to_vec()];
    for j in 0..d {
        let mut p = x.to_vec();
        let mut m = x.to_vec();
        p[j] += opts.fd_step;
        m[j] -= opts.fd_step;
        starts.push(p);
        starts.push(m);
    }
    let est: Vec<f64> = starts
        .iter()
        .map(|s| v_estimate(field, cfg, r, s, t_end, opts))
        .collect::<Result<_>>()?;
    let grad = (0..d).map(|j| (est[1 + 2 * j] - est[2 + 2 * j]) / (2.0 * opts.fd_step)).collect();
    Ok((est[0], grad))
}

fn v_estimate(field: &RoughField, cfg: &DiffusionConfig, r: f64, x: &[f64], t_end: f64, opts: &VOptions) -> Result<f64> {
    let w = field.eval_scalar(r, x)?;
    if r >= t_end {
        return Ok(-w);
    }
    let d = cfg.d;
    let dt = (t_end - r) / opts.steps as f64;
    let vals: Vec<f64> = (0..opts.inner_paths as u64)
        .into_par_iter()
        .map(|i| {
            let inc = brownian_increments(opts.seed, i, false, opts.steps, d, dt);
            let mut cur = x.to_vec();
            let mut sigma = vec![0.0; d * d];
            let mut a = vec![0.0; d * d];
            let mut hess = vec![0.0; d * d];
            let mut acc = Vec::with_capacity(opts.steps);
            for k in 0..opts.steps {
                let t = r + k as f64 * dt;
                // Left-point trapezoid on the inner grid.
                acc.push(l0_w(field, cfg, t, &cur, &mut a, &mut hess)? * dt);
                cfg.sigma_into(t, &cur, &mut sigma)?;
                let db = &inc[k * d..(k + 1) * d];
                for p in 0..d {
                    cur[p] += (0..d).map(|q| sigma[p * d + q] * db[q]).sum::<f64>();
                }
            }
            Ok(pairwise_sum(&acc))
        })
        .collect::<Result<_>>()?;
    Ok(-w - pairwise_sum(&vals) / vals.len() as f64)
}

/// `v` and `grad v` tabulated by nested Monte Carlo on a space-time lattice
/// and interpolated multilinearly.
pub struct VLattice {
    grid: GridField,
    dim: usize,
}

impl VLattice {
    /// `axes` are the time axis followed by one axis per spatial dimension.
    pub fn build(field: &RoughField, cfg: &DiffusionConfig, axes: Vec<Vec<f64>>, t_end: f64, opts: &VOptions) -> Result<Self> {
        let d = cfg.d;
        if axes.len() != d + 1 {
            return arg("lattice needs a time axis plus one axis per dimension");
        }
        let shape: Vec<usize> = axes.iter().map(Vec::len).collect();
        let total: usize = shape.iter().product();
        let mut values = Vec::with_capacity(total * (d + 1));
        for flat in 0..total {
            let mut rem = flat;
            let mut idx = vec![0usize; d + 1];
            for a in (0..=d).rev() {
                idx[a] = rem % shape[a];
                rem /= shape[a];
            }
            let x: Vec<f64> = (0..d).map(|j| axes[j + 1][idx[j + 1]]).collect();
            let node_opts = VOptions { seed: opts.seed.wrapping_add(flat as u64), ..*opts };
            let (v, g) = solve_v(field, cfg, axes[0][idx[0]], &x, t_end, &node_opts)?;
            values.push(v);
            values.extend(g);
        }
        Ok(Self { grid: GridField::new(axes, values, d + 1)?, dim: d })
    }

    fn lookup(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let dom = self.grid.domain();
        if !dom.contains(t, x) {
            return arg(format!("v lattice does not cover t={t}, x={x:?}"));
        }
        let mut out = vec![0.0; self.dim + 1];
        crate::field::FieldFn::eval(&self.grid, t, x, &mut out);
        Ok(out)
    }
}

impl VFunction for VLattice {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, t: f64, x: &[f64]) -> Result<f64> {
        Ok(self.lookup(t, x)?[0])
    }
    fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&self.lookup(t, x)?[1..]);
        Ok(())
    }
}

/// `v(r, x) - v(t, X_t) + int b . grad v ds + int (sigma^T grad v) . dB` along
/// the path, the stochastic integral as an Itô sum over the recorded increments.
pub fn ito_trick_integral(cfg: &DiffusionConfig, path: &DiffusionPath, v: &dyn VFunction) -> Result<f64> {
    let d = cfg.d;
    if v.dim() != d || path.dim != d {
        return arg("v and the path must match the diffusion dimension");
    }
    let n = path.times.len() - 1;
    let mut grad = vec![0.0; d];
    let mut b = vec![0.0; d];
    let mut sigma = vec![0.0; d * d];
    let mut terms = Vec::with_capacity(n);
    for k in 0..n {
        let (t, x) = (path.times[k], path.state(k));
        let dt = path.times[k + 1] - t;
        v.gradient(t, x, &mut grad)?;
        cfg.b_into(t, x, &mut b);
        cfg.sigma_into(t, x, &mut sigma)?;
        let db = &path.increments[k * d..(k + 1) * d];
        let drift: f64 = b.iter().zip(&grad).map(|(p, q)| p * q).sum::<f64>() * dt;
        let mut noise = 0.0;
        for j in 0..d {
            noise += (0..d).map(|i| sigma[i * d + j] * grad[i]).sum::<f64>() * db[j];
        }
        terms.push(drift + noise);
    }
    let x0 = path.state(0);
    Ok(v.value(path.times[0], x0)? - v.value(path.times[n], path.end_state())? + pairwise_sum(&terms))
}

/// Terminal data `u_T` with declared growth `|u_T(x)| <= C e^{C |x|^alpha0}`.
#[derive(Clone)]
pub struct Terminal {
    pub label: String,
    pub alpha0: f64,
    f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
}

impl std::fmt::Debug for Terminal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Terminal({}, alpha0={})", self.label, self.alpha0)
    }
}

impl Terminal {
    pub fn new(label: impl Into<String>, alpha0: f64, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Result<Self> {
        if !(alpha0 < 2.0) {
            return Err(Error::Precondition(format!("terminal growth exponent {alpha0} must be < 2")));
        }
        Ok(Self { label: label.into(), alpha0, f: Arc::new(f) })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }

    /// `one`, `first` (`x_1`), `square` (`|x|^2`), `gaussian` (`exp(-|x|^2/2)`),
    /// `sin` (`sin x_1`), `cos` (`cos x_1`).
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "one" => Self::new(name, 0.0, |_| 1.0),
            "first" => Self::new(name, 0.0, |x| x[0]),
            "square" => Self::new(name, 0.0, |x| x.iter().map(|v| v * v).sum()),
            "gaussian" => Self::new(name, 0.0, |x| (-0.5 * x.iter().map(|v| v * v).sum::<f64>()).exp()),
            "sin" => Self::new(name, 0.0, |x| x[0].sin()),
            "cos" => Self::new(name, 0.0, |x| x[0].cos()),
            _ => arg(format!("unknown terminal function '{name}'")),
        }
    }
}

/// How `int W(ds, X_s)` is evaluated inside the solver.
#[derive(Clone, Copy)]
pub enum Route<'a> {
    /// Left-point sum on the simulation grid.
    Pathwise,
    ItoTrick(&'a dyn VFunction),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FkEstimate {
    pub r: f64,
    pub x: Vec<f64>,
    pub u: f64,
    pub stderr: f64,
    /// Largest log-weight, factored out before averaging.
    pub log_scale: f64,
    pub mean_integral: f64,
    /// Fraction of paths whose weight overflows `exp`.
    pub overflow_fraction: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FKSolution {
    pub points: Vec<FkEstimate>,
    pub mc: MCConfig,
    pub t_end: f64,
}

fn mc_stats(values: &[f64], antithetic: bool) -> (f64, f64) {
    if antithetic {
        let pairs: Vec<f64> = values.chunks(2).map(|c| 0.5 * (c[0] + c[1])).collect();
        mean_stderr(&pairs)
    } else {
        mean_stderr(values)
    }
}

/// `u(r, x) = E[u_T(X_T) exp(int_r^T W(ds, X_s))]` at each `(r, x)`.
pub fn feynman_kac_solve(
    field: &RoughField,
    cfg: &DiffusionConfig,
    terminal: &Terminal,
    t_end: f64,
    grid: &[(f64, Vec<f64>)],
    mc: &MCConfig,
    route: Route<'_>,
) -> Result<FKSolution> {
    mc.validate()?;
    if field.dim_out() != 1 || field.dim_in() != cfg.d {
        return arg("the potential must be a scalar field on the diffusion's space");
    }
    let mut points = Vec::with_capacity(grid.len());
    for (r, x) in grid {
        let dt = (t_end - r) / mc.n_steps as f64;
        let rows: Vec<(f64, f64)> = (0..mc.n_paths as u64)
            .into_par_iter()
            .map(|i| {
                let inc = brownian_increments(mc.seed, i, mc.antithetic, mc.n_steps, cfg.d, dt);
                let path = euler_maruyama(cfg, *r, x, t_end, inc)?;
                let integral = match route {
                    Route::Pathwise => grid_w_integral(field, &path)?,
                    Route::ItoTrick(v) => ito_trick_integral(cfg, &path, v)?,
                };
                Ok((terminal.eval(path.end_state()), integral))
            })
            .collect::<Result<_>>()?;
        points.push(weighted_estimate(*r, x, &rows, mc.antithetic));
    }
    Ok(FKSolution { points, mc: *mc, t_end })
}

fn weighted_estimate(r: f64, x: &[f64], rows: &[(f64, f64)], antithetic: bool) -> FkEstimate {
    let n = rows.len() as f64;
    let overflow = rows.iter().filter(|(_, i)| !(i.is_finite() && *i < 709.0)).count();
    let m = rows.iter().map(|(_, i)| *i).filter(|i| i.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    let m = if m.is_finite() { m.max(0.0) } else { 0.0 };
    let scaled: Vec<f64> = rows.iter().map(|(u, i)| u * (i - m).exp()).collect();
    let (mean, se) = mc_stats(&scaled, antithetic);
    let scale = m.exp();
    let integrals: Vec<f64> = rows.iter().map(|(_, i)| *i).collect();
    let mut warnings = Vec::new();
    let frac = overflow as f64 / n;
    if frac > 1e-3 {
        warnings.push(format!("exponential weights overflow on {:.3}% of paths", 100.0 * frac));
    }
    FkEstimate {
        r,
        x: x.to_vec(),
        u: scale * mean,
        stderr: scale * se,
        log_scale: m,
        mean_integral: pairwise_sum(&integrals) / n,
        overflow_fraction: frac,
        warnings,
    }
}

/// `E u_T(X_T)` on the same draws as [`feynman_kac_solve`].
pub fn diffusion_expectation(cfg: &DiffusionConfig, terminal: &Terminal, r: f64, x: &[f64], t_end: f64, mc: &MCConfig) -> Result<(f64, f64)> {
    mc.validate()?;
    let dt = (t_end - r) / mc.n_steps as f64;
    let vals: Vec<f64> = (0..mc.n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let inc = brownian_increments(mc.seed, i, mc.antithetic, mc.n_steps, cfg.d, dt);
            Ok(terminal.eval(euler_maruyama(cfg, r, x, t_end, inc)?.end_state()))
        })
        .collect::<Result<_>>()?;
    Ok(mc_stats(&vals, mc.antithetic))
}

/// RMS gap between the two routes at each refinement level.
#[derive(Debug, Clone, Serialize)]
pub struct CrossRouteReport {
    pub steps: Vec<usize>,
    pub rms: Vec<f64>,
    pub fit: LinearFit,
    /// Slope of `log rms` against `log dt`.
    pub order: f64,
}

/// Pathwise against Itô-trick integrals on common Brownian draws, with the
/// finest increments summed down to `base_steps * 2^k`, `k < levels`.
pub fn cross_route_study(
    field: &RoughField,
    cfg: &DiffusionConfig,
    v: &dyn VFunction,
    r: f64,
    x: &[f64],
    t_end: f64,
    n_paths: usize,
    base_steps: usize,
    levels: u32,
    seed: u64,
) -> Result<CrossRouteReport> {
    if levels < 2 || base_steps == 0 || n_paths == 0 {
        return arg("cross-route study needs >= 2 levels, base_steps >= 1 and paths");
    }
    let fine = base_steps << (levels - 1);
    let dt = (t_end - r) / fine as f64;
    let d = cfg.d;
    let per_path: Vec<Vec<f64>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let inc = brownian_increments(seed, i, false, fine, d, dt);
            (0..levels)
                .map(|k| {
                    let factor = 1usize << (levels - 1 - k);
                    let p = euler_maruyama(cfg, r, x, t_end, coarsen_increments(&inc, d, factor))?;
                    Ok((grid_w_integral(field, &p)? - ito_trick_integral(cfg, &p, v)?).powi(2))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let steps: Vec<usize> = (0..levels).map(|k| base_steps << k).collect();
    let rms: Vec<f64> = (0..levels as usize)
        .map(|k| (pairwise_sum(&per_path.iter().map(|row| row[k]).collect::<Vec<_>>()) / n_paths as f64).sqrt())
        .collect();
    let dts: Vec<f64> = steps.iter().map(|s| (t_end - r) / *s as f64).collect();
    let fit = fit_loglog(&dts, &rms)?;
    Ok(CrossRouteReport { steps, rms, order: fit.slope, fit })
}

// ---------------------------------------------------------------------------
// Finite-difference reference
// ---------------------------------------------------------------------------

/// Space-time grid of the reference solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Cells per axis.
    pub cells: Vec<usize>,
    pub time_steps: usize,
    /// Implicitness: 0.5 is Crank-Nicolson, 1 is backward Euler.
    pub theta: f64,
}

impl FdGrid {
    /// Box around `points` padded by three standard deviations of the
    /// diffusion over `[r, T]` plus the worst-case drift displacement.
    pub fn padded(points: &[Vec<f64>], cfg: &DiffusionConfig, r: f64, t_end: f64, cells: usize, time_steps: usize) -> Result<Self> {
        let d = cfg.d;
        if points.is_empty() || points.iter().any(|p| p.len() != d) {
            return arg("padding needs points of the diffusion dimension");
        }
        let span = t_end - r;
        let reach = points.iter().map(|p| crate::numeric::norm(p)).fold(0.0, f64::max);
        let pad = 3.0 * (cfg.lambda_max * span).sqrt() + cfg.kappa_b * (1.0 + reach) * span;
        let lo = (0..d).map(|j| points.iter().map(|p| p[j]).fold(f64::INFINITY, f64::min) - pad).collect();
        let hi = (0..d).map(|j| points.iter().map(|p| p[j]).fold(f64::NEG_INFINITY, f64::max) + pad).collect();
        Ok(Self { lo, hi, cells: vec![cells; d], time_steps, theta: 0.5 })
    }
}

/// Reference solution at time `r` on the spatial grid.
#[derive(Debug, Clone, Serialize)]
pub struct FdSolution {
    pub r: f64,
    pub axes: Vec<Vec<f64>>,
    /// Row-major over the axes.
    pub values: Vec<f64>,
}

impl FdSolution {
    /// Multilinear interpolation of the solution at `x`.
    pub fn value_at(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.axes.len() {
            return arg("point dimension does not match the reference grid");
        }
        let mut cells = Vec::new();
        for (a, v) in self.axes.iter().zip(x) {
            if *v < a[0] || *v > a[a.len() - 1] {
                return arg(format!("{v} lies outside the reference grid"));
            }
            let k = a.partition_point(|p| p <= v).saturating_sub(1).min(a.len() - 2);
            cells.push((k, (v - a[k]) / (a[k + 1] - a[k])));
        }
        let d = x.len();
        let mut out = 0.0;
        for mask in 0..(1usize << d) {
            let mut flat = 0;
            let mut w = 1.0;
            for (j, &(k, f)) in cells.iter().enumerate() {
                let hi = mask >> j & 1 == 1;
                flat = flat * self.axes[j].len() + k + hi as usize;
                w *= if hi { f } else { 1.0 - f };
            }
            out += w * self.values[flat];
        }
        Ok(out)
    }
}

/// Backward theta-scheme for `d_t u + L u + u d_t W = 0` from `u(T) = u_T` to
/// time `r`, with the potential applied as `exp(W(t_{n+1}) - W(t_n))` each
/// step and frozen terminal values on the boundary. Two-dimensional problems
/// use Lie splitting between the axes and need diagonal `a`. The first two
/// steps are fully implicit.
pub fn fd_reference_solve(
    field: Option<&RoughField>,
    cfg: &DiffusionConfig,
    terminal: &Terminal,
    r: f64,
    t_end: f64,
    grid: &FdGrid,
) -> Result<FdSolution> {
    let d = cfg.d;
    if !(d == 1 || d == 2) {
        return arg("the reference solver handles 1-d and 2-d problems only");
    }
    if grid.lo.len() != d || grid.hi.len() != d || grid.cells.len() != d || grid.cells.iter().any(|c| *c < 4) {
        return arg("reference grid needs >= 4 cells per axis in each dimension");
    }
    if !(r < t_end) || grid.time_steps == 0 || !(0.5..=1.0).contains(&grid.theta) {
        return arg("reference solve needs r < T, time steps and theta in [0.5, 1]");
    }
    if let Some(f) = field {
        if f.dim_out() != 1 || f.dim_in() != d {
            return arg("the potential must be a scalar field on the diffusion's space");
        }
    }
    let axes: Vec<Vec<f64>> = (0..d).map(|j| uniform_grid(grid.lo[j], grid.hi[j], grid.cells[j])).collect();
    let shape: Vec<usize> = axes.iter().map(Vec::len).collect();
    let total: usize = shape.iter().product();
    let point = |flat: usize| -> Vec<f64> {
        if d == 1 {
            vec![axes[0][flat]]
        } else {
            vec![axes[0][flat / shape[1]], axes[1][flat % shape[1]]]
        }
    };
    let mut u: Vec<f64> = (0..total).map(|k| terminal.eval(&point(k))).collect();
    let boundary: Vec<bool> = (0..total)
        .map(|k| {
            if d == 1 {
                k == 0 || k == total - 1
            } else {
                let (i, j) = (k / shape[1], k % shape[1]);
                i == 0 || j == 0 || i == shape[0] - 1 || j == shape[1] - 1
            }
        })
        .collect();
    let frozen = u.clone();
    let times = uniform_grid(r, t_end, grid.time_steps);
    let mut a = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    for n in (0..grid.time_steps).rev() {
        let (t0, t1) = (times[n], times[n + 1]);
        let dt = t1 - t0;
        let theta = if grid.time_steps - n <= 2 { 1.0 } else { grid.theta };
        if let Some(f) = field {
            let factors: Vec<f64> = (0..total)
                .into_par_iter()
                .map(|k| {
                    let x = point(k);
                    Ok((f.eval_scalar(t1, &x)? - f.eval_scalar(t0, &x)?).exp())
                })
                .collect::<Result<_>>()?;
            for k in 0..total {
                if !boundary[k] {
                    u[k] *= factors[k];
                }
            }
        }
        let tm = 0.5 * (t0 + t1);
        for axis in 0..d {
            let h = axes[axis][1] - axes[axis][0];
            let (len, stride, lines) = if d == 1 {
                (shape[0], 1, 1)
            } else if axis == 0 {
                (shape[0], shape[1], shape[1])
            } else {
                (shape[1], 1, shape[0])
            };
            for line in 0..lines {
                let base = if d == 1 { 0 } else if axis == 0 { line } else { line * shape[1] };
                let idx: Vec<usize> = (0..len).map(|i| base + i * stride).collect();
                let mut lower = vec![0.0; len];
                let mut diag = vec![1.0; len];
                let mut upper = vec![0.0; len];
                let mut rhs = vec![0.0; len];
                for i in 0..len {
                    let k = idx[i];
                    if boundary[k] {
                        rhs[i] = frozen[k];
                        continue;
                    }
                    let x = point(k);
                    cfg.a_into(tm, &x, &mut a);
                    if d == 2 && (a[1].abs() > 1e-14 || a[2].abs() > 1e-14) {
                        return Err(Error::Capability("reference solver needs diagonal a in two dimensions"));
                    }
                    cfg.b_into(tm, &x, &mut b);
                    let diff = 0.5 * a[axis * d + axis] / (h * h);
                    let adv = b[axis] / (2.0 * h);
                    let (cl, cc, cu) = (diff - adv, -2.0 * diff, diff + adv);
                    lower[i] = -theta * dt * cl;
                    diag[i] = 1.0 - theta * dt * cc;
                    upper[i] = -theta * dt * cu;
                    let e = (1.0 - theta) * dt;
                    rhs[i] = u[k] + e * (cl * u[idx[i - 1]] + cc * u[k] + cu * u[idx[i + 1]]);
                }
                let sol = thomas(&lower, &diag, &upper, &rhs)?;
                for i in 0..len {
                    u[idx[i]] = sol[i];
                }
            }
        }
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("reference solution is not finite".into()));
    }
    Ok(FdSolution { r, axes, values: u })
}

fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut x = vec![0.0; n];
    let mut piv = diag[0];
    if piv.abs() < 1e-14 {
        return Err(Error::Numerical("tridiagonal solve hit a zero pivot".into()));
    }
    c[0] = upper[0] / piv;
    x[0] = rhs[0] / piv;
    for i in 1..n {
        piv = diag[i] - lower[i] * c[i - 1];
        if piv.abs() < 1e-14 || !piv.is_finite() {
            return Err(Error::Numerical(format!("tridiagonal solve hit a zero pivot at row {i}")));
        }
        c[i] = upper[i] / piv;
        x[i] = (rhs[i] - lower[i] * x[i - 1]) / piv;
    }
    for i in (0..n - 1).rev() {
        x[i] -= c[i] * x[i + 1];
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Exponential moments
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ExpMomentReport {
    pub gammas: Vec<f64>,
    pub path_counts: Vec<usize>,
    /// `E exp(gamma sup |X|^2)` per gamma, per path count.
    pub sup_moments: Vec<Vec<f64>>,
    /// `E exp(gamma int W(ds, X_s))` per gamma, per path count.
    pub w_moments: Vec<Vec<f64>>,
    /// Per gamma: estimates keep growing by more than 10% with each doubling.
    pub sup_unstable: Vec<bool>,
    pub w_unstable: Vec<bool>,
}

fn growing(xs: &[f64]) -> bool {
    xs.iter().any(|v| !v.is_finite()) || xs.windows(2).all(|w| w[1] > 1.1 * w[0])
}

/// Empirical exponential moments on `n, 2n, 4n` paths (nested prefixes of the
/// same draws).
pub fn exp_moment_probe(
    cfg: &DiffusionConfig,
    field: &RoughField,
    r: f64,
    x: &[f64],
    t_end: f64,
    mc: &MCConfig,
    gammas: &[f64],
) -> Result<ExpMomentReport> {
    let big = MCConfig { n_paths: 4 * mc.n_paths, ..*mc };
    big.validate()?;
    let dt = (t_end - r) / mc.n_steps as f64;
    let rows: Vec<(f64, f64)> = (0..big.n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let inc = brownian_increments(mc.seed, i, mc.antithetic, mc.n_steps, cfg.d, dt);
            let p = euler_maruyama(cfg, r, x, t_end, inc)?;
            let sup = (0..p.times.len()).map(|k| p.state(k).iter().map(|v| v * v).sum::<f64>()).fold(0.0, f64::max);
            Ok((sup, grid_w_integral(field, &p)?))
        })
        .collect::<Result<_>>()?;
    let counts = vec![mc.n_paths, 2 * mc.n_paths, 4 * mc.n_paths];
    let moment = |g: f64, n: usize, pick: fn(&(f64, f64)) -> f64| -> f64 {
        let v: Vec<f64> = rows[..n].iter().map(|row| (g * pick(row)).exp()).collect();
        pairwise_sum(&v) / n as f64
    };
    let mut sup_m = Vec::new();
    let mut w_m = Vec::new();
    for &g in gammas {
        sup_m.push(counts.iter().map(|&n| moment(g, n, |p| p.0)).collect::<Vec<_>>());
        w_m.push(counts.iter().map(|&n| moment(g, n, |p| p.1)).collect::<Vec<_>>());
    }
    Ok(ExpMomentReport {
        gammas: gammas.to_vec(),
        path_counts: counts,
        sup_unstable: sup_m.iter().map(|m| growing(m)).collect(),
        w_unstable: w_m.iter().map(|m| growing(m)).collect(),
        sup_moments: sup_m,
        w_moments: w_m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{separable_field, Domain, FnField, HolderProfile, SpaceFn};
    use approx::assert_abs_diff_eq;

    fn smooth() -> HolderProfile {
        HolderProfile::new(1.0, 1.0, 0.0).unwrap()
    }

    fn space_free(c: f64, d: usize) -> RoughField {
        RoughField::from_fn(
            FnField::new(d, 1, move |t, _, o| o[0] = c * t).with_gradient(|_, _, o| o.iter_mut().for_each(|v| *v = 0.0)),
            smooth(),
            Domain::cube((0.0, 2.0), d, 50.0).unwrap(),
        )
        .unwrap()
    }

    fn zero(d: usize) -> RoughField {
        space_free(0.0, d)
    }

    #[test]
    fn spd_roots() {
        assert_eq!(sqrt_spd(&[4.0, 0.0, 0.0, 9.0], 2).unwrap(), vec![2.0, 0.0, 0.0, 3.0]);
        let a = [2.0, 0.5, 0.1, 0.5, 1.5, -0.2, 0.1, -0.2, 1.0];
        let s = sqrt_spd(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| s[i * 3 + k] * s[j * 3 + k]).sum();
                assert_abs_diff_eq!(v, a[i * 3 + j], epsilon = 1e-12);
            }
        }
        assert!(matches!(sqrt_spd(&[1.0, 2.0, 2.0, 1.0], 2), Err(Error::Numerical(m)) if m.contains("-1")));
    }

    #[test]
    fn deterministic_drift_is_exact() {
        let cfg = DiffusionConfig::new(1, |_, _, o| o[0] = 1e-300, |_, _, o| o[0] = 0.7, 1e-300, 1e-300, 0.7).unwrap();
        let p = euler_maruyama(&cfg, 0.0, &[1.0], 2.0, vec![0.3; 8]).unwrap();
        assert_abs_diff_eq!(p.end_state()[0], 1.0 + 0.7 * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn brownian_endpoint_statistics() {
        let cfg = DiffusionConfig::brownian(2);
        let paths = simulate_diffusion(&cfg, 0.0, &[0.0, 0.0], 1.0, &MCConfig::new(20000, 4, 1)).unwrap();
        for j in 0..2 {
            let xs: Vec<f64> = paths.iter().map(|p| p.end_state()[j]).collect();
            let (m, se) = mean_stderr(&xs);
            assert!(m.abs() < 4.0 * se);
            let sq: Vec<f64> = xs.iter().map(|v| v * v).collect();
            let (v, se) = mean_stderr(&sq);
            assert!((v - 1.0).abs() < 4.0 * se, "{v}");
        }
    }

    #[test]
    fn ou_stationary_variance() {
        let spec = CoeffSpec { a: DiffusivitySpec::Scalar { value: 2.0 }, b: DriftSpec::Linear { k: -1.0 } };
        let cfg = DiffusionConfig::from_spec(&spec, 1).unwrap();
        let paths = simulate_diffusion(&cfg, 0.0, &[0.0], 5.0, &MCConfig::new(20000, 500, 2)).unwrap();
        let sq: Vec<f64> = paths.iter().map(|p| p.end_state()[0].powi(2)).collect();
        let (v, se) = mean_stderr(&sq);
        // Euler stationary variance 1/(1 - dt/2) for dt = 0.01.
        assert!((v - 1.0 / (1.0 - 0.005)).abs() < 4.0 * se, "{v} {se}");
    }

    #[test]
    fn config_checks() {
        let spec = CoeffSpec { a: DiffusivitySpec::SinModulated { base: 1.0, amp: 0.2 }, b: DriftSpec::ClampedLinear { k: 0.1, clip: 3.0 } };
        let cfg = DiffusionConfig::from_spec(&spec, 1).unwrap();
        let pts: Vec<(f64, Vec<f64>)> = (0..40).map(|k| (0.0, vec![-5.0 + 0.25 * k as f64])).collect();
        cfg.check(&pts, 3).unwrap();
        let bad = DiffusionConfig::new(1, |_, _, o| o[0] = 1.0, |_, x, o| o[0] = x[0] * x[0], 0.5, 2.0, 1.0).unwrap();
        assert!(matches!(bad.check(&pts, 3), Err(Error::Precondition(_))));
    }

    #[test]
    fn space_free_integrals() {
        let cfg = DiffusionConfig::brownian(1);
        let f = space_free(1.5, 1);
        let p = euler_maruyama(&cfg, 0.25, &[0.0], 1.0, brownian_increments(9, 0, false, 64, 1, 0.75 / 64.0)).unwrap();
        assert_abs_diff_eq!(grid_w_integral(&f, &p).unwrap(), 1.5 * 0.75, epsilon = 1e-13);
        let s = pathwise_w_integral(&f, &p, &SewingOptions::with_tol(1e-10), ConditionMode::Strict, 0.02).unwrap();
        assert_abs_diff_eq!(s.scalar(), 1.5 * 0.75, epsilon = 1e-12);
        let v = EigenV::new(TimeFn::Poly(vec![0.0, 1.5]), 0.0, 1.0, 1, |_| 1.0, |_, o| o[0] = 0.0);
        assert_abs_diff_eq!(ito_trick_integral(&cfg, &p, &v).unwrap(), 1.5 * 0.75, epsilon = 1e-12);
    }

    #[test]
    fn strict_mode_rejects_rough_time() {
        let cfg = DiffusionConfig::brownian(1);
        let f = space_free(1.0, 1).with_profile(HolderProfile::new(0.6, 0.7, 0.0).unwrap()).unwrap();
        let p = euler_maruyama(&cfg, 0.0, &[0.0], 1.0, brownian_increments(1, 0, false, 16, 1, 1.0 / 16.0)).unwrap();
        assert!(pathwise_w_integral(&f, &p, &SewingOptions::default(), ConditionMode::Strict, 0.02).is_err());
        assert!(pathwise_w_integral(&f, &p, &SewingOptions::default(), ConditionMode::Warn, 0.02).is_ok());
    }

    #[test]
    fn linear_field_cancels_term_by_term() {
        let cfg = DiffusionConfig::brownian(1);
        // W = x gives v = -x: the endpoint terms and the Itô sum cancel.
        let v = EigenV::new(TimeFn::Poly(vec![1.0]), 0.0, 1.0, 1, |x| x[0], |_, o| o[0] = 1.0);
        for i in 0..5 {
            let p = euler_maruyama(&cfg, 0.0, &[0.4], 1.0, brownian_increments(5, i, false, 100, 1, 0.01)).unwrap();
            assert_abs_diff_eq!(ito_trick_integral(&cfg, &p, &v).unwrap(), 0.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn solve_v_examples() {
        let cfg = DiffusionConfig::brownian(2);
        let opts = VOptions { inner_paths: 4000, steps: 16, seed: 3, fd_step: 1e-2 };
        let sq = separable_field(TimeFn::Poly(vec![1.0]), SpaceFn::Square, 2, smooth(), Domain::cube((0.0, 1.0), 2, 20.0).unwrap()).unwrap();
        let (v, g) = solve_v(&sq, &cfg, 0.25, &[0.5, -1.0], 1.0, &opts).unwrap();
        assert_abs_diff_eq!(v, -(0.25 + 1.0) - 2.0 * 0.75, epsilon = 1e-10);
        assert_abs_diff_eq!(g[0], -1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(g[1], 2.0, epsilon = 1e-8);
        let lin = separable_field(TimeFn::Poly(vec![1.0]), SpaceFn::Coord, 2, smooth(), Domain::cube((0.0, 1.0), 2, 20.0).unwrap()).unwrap();
        let (v, g) = solve_v(&lin, &cfg, 0.0, &[0.3, 0.1], 1.0, &opts).unwrap();
        assert_abs_diff_eq!(v, -0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(g[0], -1.0, epsilon = 1e-9);
        let rough = RoughField::from_fn(FnField::new(2, 1, |t, x, o| o[0] = t * x[0]), smooth(), Domain::cube((0.0, 1.0), 2, 5.0).unwrap()).unwrap();
        assert!(matches!(solve_v(&rough, &cfg, 0.0, &[0.0, 0.0], 1.0, &opts), Err(Error::Capability(_))));
    }

    #[test]
    fn eigen_v_matches_nested_mc() {
        let cfg = DiffusionConfig::brownian(1);
        let g = TimeFn::Sin { amp: 1.0, freq: 3.0, phase: 0.2 };
        let f = separable_field(g.clone(), SpaceFn::Sin1, 1, smooth(), Domain::cube((0.0, 1.0), 1, 20.0).unwrap()).unwrap();
        let exact = EigenV::sine(g, 1.0, 1.0);
        let opts = VOptions { inner_paths: 20000, steps: 128, seed: 4, fd_step: 1e-2 };
        let (v, grad) = solve_v(&f, &cfg, 0.2, &[0.7], 1.0, &opts).unwrap();
        let mut eg = [0.0];
        exact.gradient(0.2, &[0.7], &mut eg).unwrap();
        assert!((v - exact.value(0.2, &[0.7]).unwrap()).abs() < 0.01, "{v}");
        assert!((grad[0] - eg[0]).abs() < 0.02, "{grad:?} {eg:?}");
    }

    #[test]
    fn heat_martingale_and_reduction() {
        let cfg = DiffusionConfig::brownian(2);
        let mc = MCConfig::new(4000, 8, 11);
        let first = Terminal::builtin("first").unwrap();
        let sol = feynman_kac_solve(&zero(2), &cfg, &first, 1.0, &[(0.0, vec![0.3, 0.0])], &mc, Route::Pathwise).unwrap();
        let e = &sol.points[0];
        assert!((e.u - 0.3).abs() < 4.0 * e.stderr);
        let (m, se) = diffusion_expectation(&cfg, &first, 0.0, &[0.3, 0.0], 1.0, &mc).unwrap();
        assert_eq!(m.to_bits(), e.u.to_bits());
        assert_eq!(se.to_bits(), e.stderr.to_bits());
    }

    #[test]
    fn space_free_potential_factorises() {
        let cfg = DiffusionConfig::brownian(1);
        let mc = MCConfig::new(2000, 16, 12);
        let t = Terminal::builtin("square").unwrap();
        let g = &[(0.5, vec![0.2])];
        let a = feynman_kac_solve(&space_free(0.8, 1), &cfg, &t, 1.0, g, &mc, Route::Pathwise).unwrap();
        let b = feynman_kac_solve(&zero(1), &cfg, &t, 1.0, g, &mc, Route::Pathwise).unwrap();
        assert_abs_diff_eq!(a.points[0].u, (0.8f64 * 0.5).exp() * b.points[0].u, epsilon = 1e-12);
    }

    #[test]
    fn antithetic_pairs_cancel_linear_terminal() {
        let cfg = DiffusionConfig::brownian(1);
        let mc = MCConfig { antithetic: true, ..MCConfig::new(1000, 4, 13) };
        let sol = feynman_kac_solve(&zero(1), &cfg, &Terminal::builtin("first").unwrap(), 1.0, &[(0.0, vec![0.5])], &mc, Route::Pathwise).unwrap();
        assert_abs_diff_eq!(sol.points[0].u, 0.5, epsilon = 1e-13);
        assert!(MCConfig { antithetic: true, ..MCConfig::new(3, 4, 1) }.validate().is_err());
    }

    #[test]
    fn overflow_is_flagged() {
        let cfg = DiffusionConfig::brownian(1);
        let sol = feynman_kac_solve(&space_free(2000.0, 1), &cfg, &Terminal::builtin("one").unwrap(), 1.0, &[(0.0, vec![0.0])], &MCConfig::new(10, 4, 1), Route::Pathwise)
            .unwrap();
        let e = &sol.points[0];
        assert_eq!(e.log_scale, 2000.0);
        assert!(e.u.is_infinite());
        assert_eq!(e.warnings.len(), 1);
    }

    #[test]
    fn fd_heat_eigenfunction() {
        let cfg = DiffusionConfig::brownian(1);
        let grid = FdGrid { lo: vec![-std::f64::consts::PI], hi: vec![std::f64::consts::PI], cells: vec![200], time_steps: 200, theta: 0.5 };
        let sol = fd_reference_solve(None, &cfg, &Terminal::builtin("sin").unwrap(), 0.0, 1.0, &grid).unwrap();
        for x in [-1.0, 0.3, 1.2] {
            assert_abs_diff_eq!(sol.value_at(&[x]).unwrap(), (-0.5f64).exp() * f64::sin(x), epsilon = 2e-4);
        }
    }

    #[test]
    fn fd_two_dimensional_gaussian_convolution() {
        let cfg = DiffusionConfig::constant(vec![1.0, 0.0, 0.0, 0.5], vec![0.0, 0.0]).unwrap();
        let grid = FdGrid { lo: vec![-6.0, -6.0], hi: vec![6.0, 6.0], cells: vec![120, 120], time_steps: 100, theta: 0.5 };
        let sol = fd_reference_solve(None, &cfg, &Terminal::builtin("gaussian").unwrap(), 0.0, 1.0, &grid).unwrap();
        // exp(-x^2/2) under variance s: (1+s)^{-1/2} exp(-x^2 / (2 (1+s))).
        let exact = |x: f64, y: f64| (-x * x / 4.0).exp() / 2f64.sqrt() * (-y * y / 3.0).exp() / 1.5f64.sqrt();
        for p in [[0.0, 0.0], [0.5, -1.0], [1.5, 0.7]] {
            assert_abs_diff_eq!(sol.value_at(&p).unwrap(), exact(p[0], p[1]), epsilon = 2e-3);
        }
    }

    #[test]
    fn fd_matches_mc_with_potential() {
        let cfg = DiffusionConfig::brownian(1);
        let f = separable_field(TimeFn::Sin { amp: 0.5, freq: 4.0, phase: 0.0 }, SpaceFn::Cos1, 1, smooth(), Domain::cube((0.0, 1.0), 1, 20.0).unwrap()).unwrap();
        let term = Terminal::builtin("gaussian").unwrap();
        let grid = FdGrid::padded(&[vec![0.0]], &cfg, 0.0, 1.0, 400, 400).unwrap();
        let fd = fd_reference_solve(Some(&f), &cfg, &term, 0.0, 1.0, &grid).unwrap();
        let mc = feynman_kac_solve(&f, &cfg, &term, 1.0, &[(0.0, vec![0.0])], &MCConfig::new(40000, 200, 5), Route::Pathwise).unwrap();
        let e = &mc.points[0];
        let u = fd.value_at(&[0.0]).unwrap();
        assert!((e.u - u).abs() < (0.01 * u).max(4.0 * e.stderr), "{} {} {}", e.u, u, e.stderr);
    }

    #[test]
    fn cross_route_converges() {
        let cfg = DiffusionConfig::brownian(1);
        let g = TimeFn::Sin { amp: 1.0, freq: 3.0, phase: 0.0 };
        let f = separable_field(g.clone(), SpaceFn::Sin1, 1, smooth(), Domain::cube((0.0, 1.0), 1, 20.0).unwrap()).unwrap();
        let v = EigenV::sine(g, 1.0, 1.0);
        let rep = cross_route_study(&f, &cfg, &v, 0.0, &[0.3], 1.0, 200, 8, 4, 7).unwrap();
        assert!(rep.rms.windows(2).all(|w| w[1] < w[0]), "{rep:?}");
        assert!(rep.order > 0.4, "{rep:?}");
    }

    #[test]
    fn exp_moments_for_space_free_field() {
        let cfg = DiffusionConfig::brownian(1);
        let rep = exp_moment_probe(&cfg, &space_free(0.5, 1), 0.0, &[0.0], 1.0, &MCConfig::new(200, 16, 3), &[0.1, 1.0]).unwrap();
        for (k, g) in [0.1, 1.0].iter().enumerate() {
            for m in &rep.w_moments[k] {
                assert_abs_diff_eq!(*m, (g * 0.5f64).exp(), epsilon = 1e-12);
            }
            assert!(!rep.w_unstable[k]);
        }
        assert!(!rep.sup_unstable[0]);
    }

    #[test]
    fn v_lattice_interpolates() {
        let cfg = DiffusionConfig::brownian(1);
        let f = separable_field(TimeFn::Poly(vec![1.0]), SpaceFn::Coord, 1, smooth(), Domain::cube((0.0, 1.0), 1, 20.0).unwrap()).unwrap();
        let opts = VOptions { inner_paths: 10, steps: 4, seed: 0, fd_step: 1e-2 };
        let lat = VLattice::build(&f, &cfg, vec![uniform_grid(0.0, 1.0, 2), uniform_grid(-2.0, 2.0, 4)], 1.0, &opts).unwrap();
        assert_abs_diff_eq!(lat.value(0.3, &[0.7]).unwrap(), -0.7, epsilon = 1e-12);
        assert!(matches!(lat.value(0.3, &[3.0]), Err(Error::Argument(_))));
    }
}
