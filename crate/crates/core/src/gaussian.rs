//! Fractional Brownian motion and sheets, plus empirical checks of increment
//! moments, sup-of-increment growth, chaining bounds and concentration.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::Serialize;

use crate::error::{arg, Error, Result};
use crate::field::{Domain, GridField, HolderProfile, RoughField};
use crate::numeric::{adaptive_gk, mean_stderr};
use crate::path::{uniform_grid, Path};

/// Seeded generator for draw number `stream`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `R_H(s, t) = (|s|^{2H} + |t|^{2H} - |s - t|^{2H}) / 2`.
pub fn fbm_covariance(h: f64, s: f64, t: f64) -> f64 {
    0.5 * (s.abs().powf(2.0 * h) + t.abs().powf(2.0 * h) - (s - t).abs().powf(2.0 * h))
}

/// Hurst exponents, one per axis, each in `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HurstVector(Vec<f64>);

impl HurstVector {
    pub fn new(h: Vec<f64>) -> Result<Self> {
        if h.is_empty() || h.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
            return arg(format!("Hurst exponents must lie in (0,1), got {h:?}"));
        }
        Ok(Self(h))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `prod_i R_{H_i}(x_i, y_i)`.
    pub fn covariance(&self, x: &[f64], y: &[f64]) -> f64 {
        self.0.iter().zip(x.iter().zip(y)).map(|(h, (a, b))| fbm_covariance(*h, *a, *b)).product()
    }

    /// `prod_i |x_i - y_i|^{2 H_i}`.
    pub fn rect_variance(&self, x: &[f64], y: &[f64]) -> f64 {
        self.0.iter().zip(x.iter().zip(y)).map(|(h, (a, b))| (a - b).abs().powf(2.0 * h)).product()
    }
}

// ---------------------------------------------------------------------------
// fBm paths by circulant embedding
// ---------------------------------------------------------------------------

/// Exact fBm sampler on a uniform grid of `n` steps over `[0, t_end]`
/// (Davies-Harte circulant embedding of fractional Gaussian noise).
pub struct FbmGenerator {
    h: f64,
    n: usize,
    t_end: f64,
    sqrt_eig: Vec<f64>,
    fft: Arc<dyn rustfft::Fft<f64>>,
}

impl FbmGenerator {
    pub fn new(h: f64, n: usize, t_end: f64) -> Result<Self> {
        if !(h > 0.0 && h < 1.0) || n < 2 || !(t_end > 0.0) {
            return arg("fBm generator needs H in (0,1), n >= 2, t_end > 0");
        }
        let m = 2 * n;
        let gamma = |k: f64| 0.5 * ((k + 1.0).powf(2.0 * h) - 2.0 * k.powf(2.0 * h) + (k - 1.0).abs().powf(2.0 * h));
        let mut c: Vec<Complex<f64>> = (0..m)
            .map(|j| {
                let k = if j <= n { j } else { m - j };
                Complex::new(gamma(k as f64), 0.0)
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(m);
        fft.process(&mut c);
        let top = c.iter().map(|z| z.re).fold(0.0, f64::max);
        let mut sqrt_eig = Vec::with_capacity(m);
        for z in &c {
            if z.re < -1e-9 * top {
                return Err(Error::Numerical(format!("circulant embedding has negative eigenvalue {}", z.re)));
            }
            sqrt_eig.push((z.re.max(0.0) / m as f64).sqrt());
        }
        Ok(Self { h, n, t_end, sqrt_eig, fft })
    }

    pub fn hurst(&self) -> f64 {
        self.h
    }

    /// Two independent paths from one FFT (real and imaginary parts), as
    /// values at the `n + 1` grid times, starting at 0.
    pub fn sample_pair(&self, seed: u64, stream: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = stream_rng(seed, stream);
        let mut y: Vec<Complex<f64>> = self
            .sqrt_eig
            .iter()
            .map(|s| {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                Complex::new(s * a, s * b)
            })
            .collect();
        self.fft.process(&mut y);
        let scale = (self.t_end / self.n as f64).powf(self.h);
        let mut re = Vec::with_capacity(self.n + 1);
        let mut im = Vec::with_capacity(self.n + 1);
        let (mut a, mut b) = (0.0, 0.0);
        re.push(0.0);
        im.push(0.0);
        for z in &y[..self.n] {
            a += scale * z.re;
            b += scale * z.im;
            re.push(a);
            im.push(b);
        }
        (re, im)
    }

    /// One path as a [`Path`] with Hölder exponent `gamma`.
    pub fn path(&self, seed: u64, stream: u64, gamma: f64) -> Result<Path> {
        let (v, _) = self.sample_pair(seed, stream);
        Path::scalar(uniform_grid(0.0, self.t_end, self.n), v, gamma)
    }
}

/// Convenience: fBm path with `n` steps on `[0, t_end]`, exponent `gamma`.
pub fn fbm_path(h: f64, n: usize, t_end: f64, seed: u64, stream: u64, gamma: f64) -> Result<Path> {
    FbmGenerator::new(h, n, t_end)?.path(seed, stream, gamma)
}

// ---------------------------------------------------------------------------
// Sheets
// ---------------------------------------------------------------------------

struct AxisFactor {
    /// Position of each node in the factor (`None` for the zero node).
    map: Vec<Option<usize>>,
    chol: DMatrix<f64>,
}

impl AxisFactor {
    fn new(h: f64, nodes: &[f64]) -> Result<Self> {
        let mut sorted = nodes.to_vec();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Numerical("sheet axis has duplicate nodes".into()));
        }
        let mut map = Vec::with_capacity(nodes.len());
        let mut nz = Vec::new();
        for &x in nodes {
            if x == 0.0 {
                map.push(None);
            } else {
                map.push(Some(nz.len()));
                nz.push(x);
            }
        }
        let k = nz.len();
        if k == 0 {
            return Err(Error::Numerical("sheet axis has no nonzero node".into()));
        }
        let cov = DMatrix::from_fn(k, k, |i, j| fbm_covariance(h, nz[i], nz[j]));
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::Numerical("axis covariance is not positive definite".into()))?
            .unpack();
        Ok(Self { map, chol })
    }

    fn size(&self) -> usize {
        self.chol.nrows()
    }
}

/// Reusable exact sampler for a fractional Brownian sheet on a tensor grid.
pub struct FbsSampler {
    hurst: HurstVector,
    axes: Vec<Vec<f64>>,
    factors: Vec<AxisFactor>,
}

/// One sheet draw on a tensor grid; `values` is row-major with the last axis
/// fastest.
#[derive(Debug, Clone, Serialize)]
pub struct SheetSample {
    pub axes: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub hurst: HurstVector,
    pub seed: u64,
    pub stream: u64,
}

impl FbsSampler {
    pub fn new(hurst: HurstVector, axes: Vec<Vec<f64>>) -> Result<Self> {
        if axes.len() != hurst.len() {
            return arg("one axis per Hurst exponent");
        }
        let total: usize = axes.iter().map(Vec::len).product();
        if total > 1_000_000 {
            return arg(format!("sheet grid has {total} nodes, above the 1e6 limit"));
        }
        let factors = hurst
            .as_slice()
            .iter()
            .zip(&axes)
            .map(|(h, a)| AxisFactor::new(*h, a))
            .collect::<Result<_>>()?;
        Ok(Self { hurst, axes, factors })
    }

    pub fn sample(&self, seed: u64, stream: u64) -> SheetSample {
        let mut rng = stream_rng(seed, stream);
        let shape: Vec<usize> = self.factors.iter().map(AxisFactor::size).collect();
        let total: usize = shape.iter().product();
        let mut z: Vec<f64> = (0..total).map(|_| rng.sample(StandardNormal)).collect();
        // Apply the lower factor of each axis along its fibres.
        let mut buf = Vec::new();
        for (a, f) in self.factors.iter().enumerate() {
            let n = shape[a];
            let inner: usize = shape[a + 1..].iter().product();
            let outer: usize = shape[..a].iter().product();
            buf.resize(n, 0.0);
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    for r in 0..n {
                        let mut acc = 0.0;
                        for c in 0..=r {
                            acc += f.chol[(r, c)] * z[base + c * inner];
                        }
                        buf[r] = acc;
                    }
                    for r in 0..n {
                        z[base + r * inner] = buf[r];
                    }
                }
            }
        }
        // Implant zeros on the coordinate hyperplanes.
        let full: Vec<usize> = self.axes.iter().map(Vec::len).collect();
        let total_full: usize = full.iter().product();
        let mut values = vec![0.0; total_full];
        let mut idx = vec![0usize; full.len()];
        for v in values.iter_mut() {
            let mut flat = 0usize;
            let mut zero = false;
            for (a, &i) in idx.iter().enumerate() {
                match self.factors[a].map[i] {
                    Some(p) => flat = flat * shape[a] + p,
                    None => zero = true,
                }
            }
            if !zero {
                *v = z[flat];
            }
            for a in (0..full.len()).rev() {
                idx[a] += 1;
                if idx[a] < full[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        SheetSample { axes: self.axes.clone(), values, hurst: self.hurst.clone(), seed, stream }
    }

    /// Draws `count` samples on streams `0..count`, in parallel.
    pub fn sample_many(&self, seed: u64, count: usize) -> Vec<SheetSample> {
        (0..count as u64).into_par_iter().map(|s| self.sample(seed, s)).collect()
    }
}

/// Single exact draw; see [`FbsSampler`] for repeated draws.
pub fn sample_fbs(hurst: HurstVector, axes: Vec<Vec<f64>>, seed: u64) -> Result<SheetSample> {
    Ok(FbsSampler::new(hurst, axes)?.sample(seed, 0))
}

impl SheetSample {
    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(Vec::len).collect()
    }

    fn flat(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.axes).fold(0, |f, (i, a)| f * a.len() + i)
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.values[self.flat(idx)]
    }

    /// Grid index of each coordinate of `x` (must be a node).
    pub fn locate(&self, x: &[f64]) -> Result<Vec<usize>> {
        if x.len() != self.axes.len() {
            return arg("point dimension does not match the sheet");
        }
        x.iter()
            .zip(&self.axes)
            .map(|(v, a)| {
                a.iter()
                    .position(|n| (n - v).abs() <= 1e-12 * (1.0 + v.abs()))
                    .ok_or_else(|| Error::Argument(format!("{v} is not a grid node")))
            })
            .collect()
    }

    /// `W(x)` at a grid node.
    pub fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.at(&self.locate(x)?))
    }

    /// `W(box[x, y])` between grid nodes.
    pub fn rect_increment(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let (i, j) = (self.locate(x)?, self.locate(y)?);
        Ok(rect_from_idx(&self.values, &self.shape(), &i, &j))
    }

    /// The sheet as a field with axis 0 as time and the rest as space,
    /// extended by multilinear interpolation.
    pub fn to_field(&self, profile: HolderProfile) -> Result<RoughField> {
        if self.axes.len() < 2 {
            return arg("a field needs a time axis and at least one space axis");
        }
        let mut axes = self.axes.clone();
        let mut values = self.values.clone();
        // Grid fields need increasing axes.
        for a in 0..axes.len() {
            if axes[a].windows(2).any(|w| w[1] <= w[0]) {
                let mut order: Vec<usize> = (0..axes[a].len()).collect();
                order.sort_by(|p, q| axes[a][*p].total_cmp(&axes[a][*q]));
                let shape: Vec<usize> = axes.iter().map(Vec::len).collect();
                let inner: usize = shape[a + 1..].iter().product();
                let outer: usize = shape[..a].iter().product();
                let n = shape[a];
                let mut out = values.clone();
                for o in 0..outer {
                    for (r, &src) in order.iter().enumerate() {
                        for i in 0..inner {
                            out[(o * n + r) * inner + i] = values[(o * n + src) * inner + i];
                        }
                    }
                }
                values = out;
                axes[a] = order.iter().map(|&k| axes[a][k]).collect();
            }
        }
        let domain = Domain::new(
            (axes[0][0], *axes[0].last().expect("non-empty")),
            axes[1..].iter().map(|a| a[0]).collect(),
            axes[1..].iter().map(|a| *a.last().expect("non-empty")).collect(),
        )?;
        let grid = GridField::new(axes, values, 1)?;
        Ok(RoughField::from_fn(grid, profile, domain)?.with_label(format!("fbs(seed={},stream={})", self.seed, self.stream)))
    }
}

fn rect_from_idx(values: &[f64], shape: &[usize], lo: &[usize], hi: &[usize]) -> f64 {
    let d = shape.len();
    let mut total = 0.0;
    for mask in 0..(1usize << d) {
        let mut flat = 0usize;
        for a in 0..d {
            let i = if mask & (1 << a) != 0 { hi[a] } else { lo[a] };
            flat = flat * shape[a] + i;
        }
        // Corner with all `hi` coordinates has sign +1.
        let sign = if (d - mask.count_ones() as usize) % 2 == 0 { 1.0 } else { -1.0 };
        total += sign * values[flat];
    }
    total
}

/// Empirical moment compared with its closed-form target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentReport {
    pub empirical: f64,
    pub target: f64,
    pub stderr: f64,
    /// `(empirical - target) / stderr` (0 when both sides vanish).
    pub z: f64,
}

fn moment_report(xs: &[f64], target: f64) -> MomentReport {
    let (m, se) = mean_stderr(xs);
    let z = if se > 0.0 { (m - target) / se } else if m == target { 0.0 } else { f64::INFINITY };
    MomentReport { empirical: m, target, stderr: se, z }
}

/// `E |W(box[x, y])|^2` over the samples against `prod |x_i - y_i|^{2 H_i}`.
pub fn rect_increment_moment_check(samples: &[SheetSample], x: &[f64], y: &[f64]) -> Result<MomentReport> {
    let first = samples.first().ok_or_else(|| Error::Argument("no samples".into()))?;
    let sq: Vec<f64> = samples
        .iter()
        .map(|s| s.rect_increment(x, y).map(|v| v * v))
        .collect::<Result<_>>()?;
    Ok(moment_report(&sq, first.hurst.rect_variance(x, y)))
}

/// `E W(x) W(y)` over the samples against `prod R_{H_i}(x_i, y_i)`.
pub fn covariance_check(samples: &[SheetSample], x: &[f64], y: &[f64]) -> Result<MomentReport> {
    let first = samples.first().ok_or_else(|| Error::Argument("no samples".into()))?;
    let (ix, iy) = (first.locate(x)?, first.locate(y)?);
    let prods: Vec<f64> = samples.iter().map(|s| s.at(&ix) * s.at(&iy)).collect();
    Ok(moment_report(&prods, first.hurst.covariance(x, y)))
}

/// Result of a sup-of-increments scan.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupReport {
    pub value: f64,
    /// Admissible non-degenerate box pairs scanned.
    pub pairs: usize,
    pub warning: Option<String>,
}

/// `sup |W(box[x, y])|` over grid pairs with `|x_i - y_i| <= caps_i` and
/// `|x_i|, |y_i| <= radius_i`, scanning every admissible pair.
pub fn sup_increment_coords(axes: &[Vec<f64>], values: &[f64], caps: &[f64], radius: &[f64]) -> Result<SupReport> {
    let d = axes.len();
    if caps.len() != d || radius.len() != d {
        return arg("caps and radius need one entry per axis");
    }
    let shape: Vec<usize> = axes.iter().map(Vec::len).collect();
    let mut pairs: Vec<Vec<(usize, usize)>> = Vec::with_capacity(d);
    for a in 0..d {
        let tol = 1e-12;
        let inside: Vec<usize> = (0..shape[a]).filter(|&i| axes[a][i].abs() <= radius[a] + tol).collect();
        if inside.is_empty() {
            return arg(format!("no grid node within radius on axis {a}"));
        }
        let mut p = Vec::new();
        for (ii, &i) in inside.iter().enumerate() {
            for &j in &inside[ii + 1..] {
                if (axes[a][j] - axes[a][i]).abs() <= caps[a] + tol {
                    p.push((i, j));
                }
            }
        }
        pairs.push(p);
    }
    let count: usize = pairs.iter().map(Vec::len).product();
    if count == 0 {
        return Ok(SupReport { value: 0.0, pairs: 0, warning: Some("only degenerate pairs are admissible".into()) });
    }
    let value = pairs[0]
        .par_iter()
        .map(|&first| {
            let mut lo = vec![0usize; d];
            let mut hi = vec![0usize; d];
            let mut best = 0.0_f64;
            let mut idx = vec![0usize; d];
            lo[0] = first.0;
            hi[0] = first.1;
            loop {
                for a in 1..d {
                    lo[a] = pairs[a][idx[a]].0;
                    hi[a] = pairs[a][idx[a]].1;
                }
                best = best.max(rect_from_idx(values, &shape, &lo, &hi).abs());
                let mut a = d;
                loop {
                    if a == 1 {
                        return best;
                    }
                    a -= 1;
                    idx[a] += 1;
                    if idx[a] < pairs[a].len() {
                        break;
                    }
                    idx[a] = 0;
                }
            }
        })
        .reduce(|| 0.0, f64::max);
    Ok(SupReport { value, pairs: count, warning: None })
}

/// `W*(delta, R)` in the metrics `d_i(x, y) = |x - y|^{H_i}`: caps
/// `|x_i - y_i| <= delta_i^{1/H_i}`, radius `|x_i| <= R^{1/H_i}`.
pub fn empirical_sup_increment(sample: &SheetSample, delta: &[f64], r: f64) -> Result<SupReport> {
    let h = sample.hurst.as_slice();
    if delta.len() != h.len() || delta.iter().any(|v| !(*v > 0.0)) || !(r > 0.0) {
        return arg("delta needs one positive entry per axis and R > 0");
    }
    let caps: Vec<f64> = delta.iter().zip(h).map(|(d, h)| d.powf(1.0 / h)).collect();
    let radius: Vec<f64> = h.iter().map(|h| r.powf(1.0 / h)).collect();
    sup_increment_coords(&sample.axes, &sample.values, &caps, &radius)
}

/// Implied constants of the chaining bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChainConstants {
    pub c1: f64,
    pub c2: f64,
}

impl Default for ChainConstants {
    fn default() -> Self {
        Self { c1: 1.0, c2: 1.0 }
    }
}

/// `omega(delta) = delta log^{1/2}(1 / a) + int_0^a u^H / (u log^{1/2}(1/u)) du`
/// with `a = delta^{1/H}`; the integral is taken after `u = exp(-v^2)`,
/// where it becomes `2 int_{v0}^inf exp(-H v^2) dv`.
pub fn omega_tilde(h: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta <= 1.0) || !(h > 0.0 && h < 1.0) {
        return arg("omega_tilde needs delta in (0,1] and H in (0,1)");
    }
    let a = delta.powf(1.0 / h);
    let v0 = (1.0 / a).ln().max(0.0).sqrt();
    // exp(-H v^2) < 1e-300 beyond this point.
    let v1 = v0 + (700.0 / h).sqrt();
    let tail = adaptive_gk(|v| 2.0 * (-h * v * v).exp(), v0, v1, 1e-13, 4096)?;
    Ok(delta * (1.0 / a).ln().max(0.0).sqrt() + tail)
}

/// `c1 prod delta_i log^{1/2}(prod 2 R^{1/H_i}) + c2 sum_i (prod_{j != i} delta_j) omega_i(delta_i)`.
pub fn chaining_bound(delta: &[f64], r: f64, hurst: &HurstVector, k: ChainConstants) -> Result<f64> {
    let h = hurst.as_slice();
    if delta.len() != h.len() || !(r > 0.0) {
        return arg("delta needs one entry per Hurst exponent and R > 0");
    }
    let prod: f64 = delta.iter().product();
    let log_term: f64 = h.iter().map(|hi| (2.0 * r.powf(1.0 / hi)).ln()).sum();
    let mut tail = 0.0;
    for i in 0..h.len() {
        let others: f64 = delta.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| v).product();
        tail += others * omega_tilde(h[i], delta[i])?;
    }
    Ok(k.c1 * prod * log_term.max(0.0).sqrt() + k.c2 * tail)
}

/// `W*` statistics across radii.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainReport {
    pub delta: Vec<f64>,
    pub radii: Vec<f64>,
    /// Mean of `W*(delta, R)` per radius.
    pub empirical_sup: Vec<f64>,
    pub bound_value: Vec<f64>,
    /// `sigma(delta, R) = prod delta_i`.
    pub sigma_val: f64,
    /// `mean W* / (prod delta_i sqrt(log(R / prod delta_i)))` per radius.
    pub ratio_history: Vec<f64>,
}

pub fn chain_report(samples: &[SheetSample], delta: &[f64], radii: &[f64], k: ChainConstants) -> Result<ChainReport> {
    let first = samples.first().ok_or_else(|| Error::Argument("no samples".into()))?;
    let sigma: f64 = delta.iter().product();
    let mut emp = Vec::new();
    let mut bounds = Vec::new();
    let mut ratios = Vec::new();
    for &r in radii {
        let sups: Vec<f64> = samples
            .par_iter()
            .map(|s| empirical_sup_increment(s, delta, r).map(|x| x.value))
            .collect::<Result<_>>()?;
        let m = crate::numeric::mean(&sups);
        emp.push(m);
        bounds.push(chaining_bound(delta, r, &first.hurst, k)?);
        ratios.push(m / (sigma * (r / sigma).ln().max(f64::MIN_POSITIVE).sqrt()));
    }
    Ok(ChainReport {
        delta: delta.to_vec(),
        radii: radii.to_vec(),
        empirical_sup: emp,
        bound_value: bounds,
        sigma_val: sigma,
        ratio_history: ratios,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcentrationReport {
    pub r_values: Vec<f64>,
    pub frequencies: Vec<f64>,
    pub bounds: Vec<f64>,
    /// 95% Wald half-widths of the frequencies.
    pub half_widths: Vec<f64>,
    pub mean: f64,
    pub sigma: f64,
    pub draws: usize,
    pub pass: bool,
}

/// Exceedance frequencies of `|W* - mean| / sigma > r` against `2 exp(-r^2/2)`;
/// passes iff every frequency is within the bound plus three half-widths.
pub fn concentration_check(sups: &[f64], sigma: f64, r_values: &[f64]) -> Result<ConcentrationReport> {
    if sups.len() < 500 {
        return arg(format!("concentration check needs >= 500 draws, got {}", sups.len()));
    }
    if !(sigma > 0.0) {
        return arg("sigma must be positive");
    }
    let n = sups.len() as f64;
    let m = crate::numeric::mean(sups);
    let mut freq = Vec::new();
    let mut bounds = Vec::new();
    let mut hw = Vec::new();
    let mut pass = true;
    for &r in r_values {
        let p = sups.iter().filter(|s| ((*s - m) / sigma).abs() > r).count() as f64 / n;
        let b = 2.0 * (-r * r / 2.0).exp();
        let h = 1.96 * (p * (1.0 - p) / n).sqrt();
        pass &= p <= b + 3.0 * h;
        freq.push(p);
        bounds.push(b);
        hw.push(h);
    }
    Ok(ConcentrationReport {
        r_values: r_values.to_vec(),
        frequencies: freq,
        bounds,
        half_widths: hw,
        mean: m,
        sigma,
        draws: sups.len(),
        pass,
    })
}

/// Ball average `M_k(t)` with normalised Lebesgue weights: the mean of the
/// grid values in the box with metric radii `D_i 2^{-k_i}` (coordinate
/// radii `(D_i 2^{-k_i})^{1/H_i}`). An empty box falls back to the nearest
/// node and returns a warning.
pub fn mk_average(sample: &SheetSample, radii: &[f64], k: &[u32], t: &[f64]) -> Result<(f64, Option<String>)> {
    let d = sample.axes.len();
    if radii.len() != d || k.len() != d || t.len() != d {
        return arg("mk_average needs one radius, level and coordinate per axis");
    }
    let h = sample.hurst.as_slice();
    let ranges: Vec<Vec<usize>> = (0..d)
        .map(|a| {
            let rad = (radii[a] * 2f64.powi(-(k[a] as i32))).powf(1.0 / h[a]);
            (0..sample.axes[a].len()).filter(|&i| (sample.axes[a][i] - t[a]).abs() <= rad + 1e-12).collect()
        })
        .collect();
    if ranges.iter().any(Vec::is_empty) {
        let idx: Vec<usize> = (0..d)
            .map(|a| {
                (0..sample.axes[a].len())
                    .min_by(|p, q| (sample.axes[a][*p] - t[a]).abs().total_cmp(&(sample.axes[a][*q] - t[a]).abs()))
                    .expect("non-empty axis")
            })
            .collect();
        return Ok((sample.at(&idx), Some("ball contains no grid node; nearest node used".into())));
    }
    let mut idx = vec![0usize; d];
    let mut vals = Vec::new();
    loop {
        let node: Vec<usize> = (0..d).map(|a| ranges[a][idx[a]]).collect();
        vals.push(sample.at(&node));
        let mut a = d;
        loop {
            if a == 0 {
                return Ok((crate::numeric::pairwise_sum(&vals) / vals.len() as f64, None));
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < ranges[a].len() {
                break;
            }
            idx[a] = 0;
        }
    }
}

/// `M_k(box[s, t])`: alternating sum of ball averages over the box corners.
pub fn mk_rect_increment(sample: &SheetSample, radii: &[f64], k: &[u32], s: &[f64], t: &[f64]) -> Result<f64> {
    let d = s.len();
    let mut total = 0.0;
    for mask in 0..(1usize << d) {
        let corner: Vec<f64> = (0..d).map(|a| if mask & (1 << a) != 0 { t[a] } else { s[a] }).collect();
        let sign = if (d - mask.count_ones() as usize) % 2 == 0 { 1.0 } else { -1.0 };
        total += sign * mk_average(sample, radii, k, &corner)?.0;
    }
    Ok(total)
}
