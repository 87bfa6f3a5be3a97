//! Hölder paths stored on a time grid and read off-grid by piecewise-linear
//! interpolation.

use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{arg, Error, Result};

/// A path `t -> phi_t` in `R^dim` sampled on a strictly increasing grid.
#[derive(Debug, Clone)]
pub struct Path {
    times: Vec<f64>,
    values: Vec<f64>,
    dim: usize,
    gamma: f64,
    uniform_step: Option<f64>,
    holder: OnceLock<f64>,
}

impl Path {
    /// `values` is row-major: `values[k * dim + i]` is coordinate `i` at `times[k]`.
    pub fn new(times: Vec<f64>, values: Vec<f64>, dim: usize, gamma: f64) -> Result<Self> {
        if dim == 0 {
            return arg("path dimension must be positive");
        }
        if times.len() < 2 {
            return arg("a path needs at least two time points");
        }
        if values.len() != times.len() * dim {
            return arg(format!(
                "path has {} values for {} times in dimension {}",
                values.len(),
                times.len(),
                dim
            ));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return arg(format!("path exponent gamma={gamma} outside (0,1]"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return arg("path times must be strictly increasing");
        }
        if values.iter().chain(&times).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite path sample".into()));
        }
        let n = times.len();
        let h = (times[n - 1] - times[0]) / (n - 1) as f64;
        let uniform = times
            .iter()
            .enumerate()
            .all(|(k, t)| (t - (times[0] + k as f64 * h)).abs() <= 1e-12 * (1.0 + t.abs()));
        Ok(Self {
            times,
            values,
            dim,
            gamma,
            uniform_step: uniform.then_some(h),
            holder: OnceLock::new(),
        })
    }

    /// Scalar path from samples.
    pub fn scalar(times: Vec<f64>, values: Vec<f64>, gamma: f64) -> Result<Self> {
        Self::new(times, values, 1, gamma)
    }

    /// Samples `f` on a uniform grid of `n + 1` points over `[a, b]`.
    pub fn from_fn<F: Fn(f64) -> Vec<f64>>(a: f64, b: f64, n: usize, dim: usize, gamma: f64, f: F) -> Result<Self> {
        if n == 0 || !(b > a) {
            return arg("from_fn needs a < b and n >= 1");
        }
        let times = uniform_grid(a, b, n);
        let mut values = Vec::with_capacity((n + 1) * dim);
        for &t in &times {
            let v = f(t);
            if v.len() != dim {
                return arg("closure returned wrong dimension");
            }
            values.extend(v);
        }
        Self::new(times, values, dim, gamma)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn times(&self) -> &[f64] {
        &self.times
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn start(&self) -> f64 {
        self.times[0]
    }
    pub fn end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }
    pub fn len(&self) -> usize {
        self.times.len()
    }
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Sample at grid index `k`.
    pub fn node(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let n = self.times.len();
        let k = match self.uniform_step {
            Some(h) => (((t - self.times[0]) / h).floor().max(0.0) as usize).min(n - 2),
            None => self.times.partition_point(|&s| s <= t).saturating_sub(1).min(n - 2),
        };
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        (k, ((t - t0) / (t1 - t0)).clamp(0.0, 1.0))
    }

    /// Piecewise-linear evaluation; `t` must lie in the sampled range (a
    /// relative slack of 1e-12 absorbs rounding in grid arithmetic).
    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let slack = 1e-12 * (1.0 + self.end().abs().max(self.start().abs()));
        if !(t >= self.start() - slack && t <= self.end() + slack) {
            return Err(Error::OutOfDomain { t, x: vec![] });
        }
        let (k, w) = self.locate(t);
        let (p0, p1) = (self.node(k), self.node(k + 1));
        for i in 0..self.dim {
            out[i] = if w == 0.0 { p0[i] } else if w == 1.0 { p1[i] } else { p0[i] + w * (p1[i] - p0[i]) };
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }

    /// Scalar convenience for `dim == 1`.
    pub fn eval1(&self, t: f64) -> Result<f64> {
        let mut out = [0.0];
        self.eval_into(t, &mut out)?;
        Ok(out[0])
    }

    /// Max Euclidean norm over the grid.
    pub fn sup_norm(&self) -> f64 {
        (0..self.len())
            .map(|k| crate::numeric::norm(self.node(k)))
            .fold(0.0, f64::max)
    }

    /// Grid Hölder seminorm `sup |phi_t - phi_s| / |t - s|^gamma`, cached.
    pub fn holder_norm(&self) -> f64 {
        *self.holder.get_or_init(|| self.holder_norm_with(self.gamma))
    }

    /// Grid Hölder seminorm for an arbitrary exponent (not cached).
    pub fn holder_norm_with(&self, exponent: f64) -> f64 {
        let n = self.len();
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut m = 0.0_f64;
                let pi = self.node(i);
                for j in (i + 1)..n {
                    let pj = self.node(j);
                    let d: f64 = pi.iter().zip(pj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                    m = m.max(d / (self.times[j] - self.times[i]).powf(exponent));
                }
                m
            })
            .reduce(|| 0.0, f64::max)
    }

    /// Sup distance to another path over this path's grid.
    pub fn sup_distance(&self, other: &Path) -> Result<f64> {
        let mut buf = vec![0.0; other.dim];
        let mut m = 0.0_f64;
        for k in 0..self.len() {
            other.eval_into(self.times[k], &mut buf)?;
            let d = crate::numeric::norm(
                &self.node(k).iter().zip(&buf).map(|(a, b)| a - b).collect::<Vec<_>>(),
            );
            m = m.max(d);
        }
        Ok(m)
    }

    /// Adds a constant vector to every sample.
    pub fn shifted(&self, shift: &[f64]) -> Result<Path> {
        if shift.len() != self.dim {
            return arg("shift dimension mismatch");
        }
        let values = self
            .values
            .chunks(self.dim)
            .flat_map(|row| row.iter().zip(shift).map(|(a, b)| a + b).collect::<Vec<_>>())
            .collect();
        Path::new(self.times.clone(), values, self.dim, self.gamma)
    }

    /// Restriction to the sub-grid of points in `[a, b]`, with the endpoints
    /// inserted by interpolation when they are not grid nodes.
    pub fn restrict(&self, a: f64, b: f64) -> Result<Path> {
        if !(a < b) {
            return arg("restrict needs a < b");
        }
        let mut times = vec![a];
        let mut values = self.eval(a)?;
        for (k, &t) in self.times.iter().enumerate() {
            if t > a && t < b {
                times.push(t);
                values.extend_from_slice(self.node(k));
            }
        }
        times.push(b);
        values.extend(self.eval(b)?);
        Path::new(times, values, self.dim, self.gamma)
    }
}

/// `n + 1` equispaced points from `a` to `b` (endpoints exact).
pub fn uniform_grid(a: f64, b: f64, n: usize) -> Vec<f64> {
    let h = (b - a) / n as f64;
    (0..=n)
        .map(|k| if k == n { b } else { a + k as f64 * h })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn linear_interpolation_is_exact_at_nodes_and_between() {
        let p = Path::from_fn(0.0, 1.0, 4, 1, 1.0, |t| vec![t * t]).unwrap();
        assert_eq!(p.eval1(0.5).unwrap(), 0.25);
        assert_abs_diff_eq!(p.eval1(0.125).unwrap(), 0.5 * 0.0625, epsilon = 1e-15);
        assert!(p.eval1(1.5).is_err());
    }

    #[test]
    fn holder_norm_of_linear_path_is_slope() {
        let p = Path::from_fn(0.0, 2.0, 16, 1, 1.0, |t| vec![3.0 * t]).unwrap();
        assert_abs_diff_eq!(p.holder_norm(), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn nonuniform_grid_lookup() {
        let p = Path::scalar(vec![0.0, 0.1, 0.5, 1.0], vec![0.0, 1.0, 2.0, 4.0], 1.0).unwrap();
        assert_abs_diff_eq!(p.eval1(0.3).unwrap(), 1.5, epsilon = 1e-14);
        assert_abs_diff_eq!(p.eval1(0.75).unwrap(), 3.0, epsilon = 1e-14);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Path::scalar(vec![0.0, 0.0], vec![1.0, 1.0], 0.5).is_err());
        assert!(Path::scalar(vec![0.0, 1.0], vec![1.0], 0.5).is_err());
        assert!(Path::scalar(vec![0.0, 1.0], vec![1.0, 2.0], 1.5).is_err());
    }
}
