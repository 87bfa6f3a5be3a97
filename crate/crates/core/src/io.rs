//! Field specifications, grid array files and CSV output.
//!
//! Grid files store a tensor-grid array row-major over the axes, then over
//! output components. The CSV form carries `#`-prefixed header rows:
//!
//! ```text
//! # rough-young grid
//! # shape,3,5
//! # dim_out,1
//! # axis,0,0.0,0.5,1.0
//! # axis,1,-1.0,-0.5,0.0,0.5,1.0
//! 0.0
//! ...
//! ```
//!
//! The binary form is `RYGRID01`, then little-endian `u32` axis count,
//! `u32` components, `u64` length per axis, the axis coordinates and the
//! values as `f64`.

use std::fmt::Write as _;
use std::path::{Path as FsPath, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::field::{drift_field, linear_field, linear_scalar_field, separable_field, Domain, FnField, GridField, HolderProfile, RoughField, SpaceFn, TimeFn};
use crate::gaussian::{fbm_path, sample_fbs, HurstVector};
use crate::path::Path;

/// Formats with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

/// Rows of numbers under `#`-prefixed header lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CsvTable {
    pub comments: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn new(columns: &[&str]) -> Self {
        Self { comments: vec![], columns: columns.iter().map(|c| c.to_string()).collect(), rows: vec![] }
    }

    pub fn comment(mut self, c: impl Into<String>) -> Self {
        self.comments.push(c.into());
        self
    }

    pub fn push(&mut self, row: Vec<f64>) {
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.comments {
            let _ = writeln!(s, "# {c}");
        }
        if !self.columns.is_empty() {
            let _ = writeln!(s, "# {}", self.columns.join(","));
        }
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|v| fmt_f64(*v)).collect();
            let _ = writeln!(s, "{}", cells.join(","));
        }
        s
    }

    pub fn write(&self, path: &FsPath) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }
}

/// Tensor-grid array.
#[derive(Debug, Clone, PartialEq)]
pub struct GridData {
    pub axes: Vec<Vec<f64>>,
    pub dim_out: usize,
    pub values: Vec<f64>,
}

impl GridData {
    pub fn new(axes: Vec<Vec<f64>>, dim_out: usize, values: Vec<f64>) -> Result<Self> {
        let total: usize = axes.iter().map(Vec::len).product();
        if axes.is_empty() || dim_out == 0 || values.len() != total * dim_out {
            return arg(format!("grid needs {} values, got {}", total * dim_out, values.len()));
        }
        Ok(Self { axes, dim_out, values })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("# rough-young grid\n");
        let shape: Vec<String> = self.axes.iter().map(|a| a.len().to_string()).collect();
        let _ = writeln!(s, "# shape,{}", shape.join(","));
        let _ = writeln!(s, "# dim_out,{}", self.dim_out);
        for (i, a) in self.axes.iter().enumerate() {
            let v: Vec<String> = a.iter().map(|x| fmt_f64(*x)).collect();
            let _ = writeln!(s, "# axis,{i},{}", v.join(","));
        }
        for row in self.values.chunks(self.dim_out) {
            let v: Vec<String> = row.iter().map(|x| fmt_f64(*x)).collect();
            let _ = writeln!(s, "{}", v.join(","));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Parse(format!("grid csv: {m}"));
        let mut shape: Option<Vec<usize>> = None;
        let mut dim_out = 1usize;
        let mut axes: Vec<(usize, Vec<f64>)> = vec![];
        let mut values = vec![];
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(h) = line.strip_prefix('#') {
                let parts: Vec<&str> = h.trim().split(',').map(str::trim).collect();
                match parts[0] {
                    "shape" => {
                        shape = Some(parts[1..].iter().map(|p| p.parse().map_err(|_| bad("bad shape"))).collect::<Result<_>>()?)
                    }
                    "dim_out" => dim_out = parts.get(1).and_then(|p| p.parse().ok()).ok_or_else(|| bad("bad dim_out"))?,
                    "axis" => {
                        let i: usize = parts.get(1).and_then(|p| p.parse().ok()).ok_or_else(|| bad("bad axis index"))?;
                        let v = parts[2..].iter().map(|p| p.parse().map_err(|_| bad("bad axis value"))).collect::<Result<_>>()?;
                        axes.push((i, v));
                    }
                    _ => {}
                }
                continue;
            }
            for p in line.split(',') {
                values.push(p.trim().parse::<f64>().map_err(|_| bad(&format!("bad value on line {}", ln + 1)))?);
            }
        }
        let shape = shape.ok_or_else(|| bad("missing shape row"))?;
        axes.sort_by_key(|(i, _)| *i);
        if axes.len() != shape.len() || axes.iter().enumerate().any(|(k, (i, a))| *i != k || a.len() != shape[k]) {
            return Err(bad("axis rows do not match the shape"));
        }
        Self::new(axes.into_iter().map(|(_, a)| a).collect(), dim_out, values).map_err(|e| bad(&e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = b"RYGRID01".to_vec();
        b.extend((self.axes.len() as u32).to_le_bytes());
        b.extend((self.dim_out as u32).to_le_bytes());
        for a in &self.axes {
            b.extend((a.len() as u64).to_le_bytes());
        }
        for v in self.axes.iter().flatten().chain(&self.values) {
            b.extend(v.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Parse(format!("grid binary: {m}"));
        if b.len() < 16 || &b[..8] != b"RYGRID01" {
            return Err(bad("missing RYGRID01 header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes")) as usize;
        let (nd, dim_out) = (u32_at(8), u32_at(12));
        let mut off = 16;
        let mut shape = vec![];
        for _ in 0..nd {
            let s = b.get(off..off + 8).ok_or_else(|| bad("truncated shape"))?;
            shape.push(u64::from_le_bytes(s.try_into().expect("8 bytes")) as usize);
            off += 8;
        }
        let total: usize = shape.iter().sum::<usize>() + shape.iter().product::<usize>() * dim_out;
        if b.len() != off + 8 * total {
            return Err(bad("length does not match the shape"));
        }
        let floats: Vec<f64> = b[off..].chunks(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let mut axes = vec![];
        let mut k = 0;
        for s in &shape {
            axes.push(floats[k..k + s].to_vec());
            k += s;
        }
        Self::new(axes, dim_out, floats[k..].to_vec()).map_err(|e| bad(&e.to_string()))
    }

    /// Reads `.bin` files as binary and anything else as CSV.
    pub fn load(path: &FsPath) -> Result<Self> {
        let io = |e: std::io::Error| Error::Io(format!("{}: {e}", path.display()));
        if path.extension().is_some_and(|e| e == "bin") {
            Self::from_bytes(&std::fs::read(path).map_err(io)?)
        } else {
            Self::from_csv(&std::fs::read_to_string(path).map_err(io)?)
        }
    }

    pub fn save(&self, path: &FsPath) -> Result<()> {
        let res = if path.extension().is_some_and(|e| e == "bin") {
            std::fs::write(path, self.to_bytes())
        } else {
            std::fs::write(path, self.to_csv())
        };
        res.map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }
}

/// Reads a path from rows `t,x_1,..,x_d` (`#` lines skipped).
pub fn path_from_csv(text: &str, gamma: f64) -> Result<Path> {
    let mut times = vec![];
    let mut values = vec![];
    let mut dim = None;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let row: Vec<f64> = line
            .split(',')
            .map(|p| p.trim().parse().map_err(|_| Error::Parse(format!("path csv: bad number in '{line}'"))))
            .collect::<Result<_>>()?;
        if row.len() < 2 || dim.is_some_and(|d| d != row.len() - 1) {
            return Err(Error::Parse("path csv rows need t and a fixed number of coordinates".into()));
        }
        dim = Some(row.len() - 1);
        times.push(row[0]);
        values.extend_from_slice(&row[1..]);
    }
    Path::new(times, values, dim.ok_or_else(|| Error::Parse("path csv is empty".into()))?, gamma)
}

/// Scalar drivers `g(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeSpec {
    Identity,
    Poly { coeffs: Vec<f64> },
    Sin { amp: f64, freq: f64, #[serde(default)] phase: f64 },
    /// fBm sample on `[start, start + length]` with `steps` steps.
    Fbm {
        hurst: f64,
        steps: usize,
        #[serde(default)]
        start: f64,
        length: f64,
        seed: u64,
        #[serde(default)]
        stream: u64,
    },
}

impl TimeSpec {
    pub fn build(&self) -> Result<TimeFn> {
        Ok(match self {
            TimeSpec::Identity => TimeFn::Identity,
            TimeSpec::Poly { coeffs } => TimeFn::Poly(coeffs.clone()),
            TimeSpec::Sin { amp, freq, phase } => TimeFn::Sin { amp: *amp, freq: *freq, phase: *phase },
            TimeSpec::Fbm { hurst, steps, start, length, seed, stream } => {
                let p = fbm_path(*hurst, *steps, *length, *seed, *stream, (hurst - 0.02).max(0.01))?;
                let times: Vec<f64> = p.times().iter().map(|t| t + start).collect();
                TimeFn::sampled(Path::scalar(times, p.values().to_vec(), p.gamma())?)?
            }
        })
    }
}

/// Space-time mollification settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MollifySpec {
    pub epsilon: f64,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    /// Optional tabulation of the mollified field: points per time axis and
    /// per space axis.
    #[serde(default)]
    pub tabulate: Option<(usize, usize)>,
}

fn default_nodes() -> usize {
    9
}

/// JSON field document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    /// `linear`, `separable`, `drift`, `grid`, `sheet` or `analytic:<name>`.
    pub kind: String,
    pub profile: HolderProfile,
    #[serde(default)]
    pub domain: Option<Domain>,
    #[serde(default)]
    pub params: serde_json::Value,
    #[serde(default)]
    pub mollify: Option<MollifySpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LinearParams {
    dim: usize,
    g: TimeSpec,
    #[serde(default)]
    scalar: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SeparableParams {
    dim: usize,
    g: TimeSpec,
    h: SpaceFn,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DriftParams {
    g: TimeSpec,
    b: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridParams {
    file: PathBuf,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SheetParams {
    hurst: Vec<f64>,
    /// Per axis `[lo, hi, points]`; axis 0 is time.
    axes: Vec<(f64, f64, usize)>,
    seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DimParams {
    #[serde(default = "one")]
    dim: usize,
}

fn one() -> usize {
    1
}

fn params<T: for<'de> Deserialize<'de>>(v: &serde_json::Value, kind: &str) -> Result<T> {
    let v = if v.is_null() { serde_json::json!({}) } else { v.clone() };
    serde_json::from_value(v).map_err(|e| Error::Parse(format!("params for '{kind}': {e}")))
}

impl FieldSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("field spec: {e}")))
    }

    /// Builds the field; relative grid files resolve against `base`.
    pub fn build(&self, base: &FsPath) -> Result<RoughField> {
        let need_domain = || self.domain.clone().ok_or_else(|| Error::Parse(format!("field kind '{}' needs a domain", self.kind)));
        let field = match self.kind.as_str() {
            "linear" => {
                let p: LinearParams = params(&self.params, "linear")?;
                if p.scalar {
                    linear_scalar_field(p.g.build()?, p.dim, self.profile, need_domain()?)?
                } else {
                    linear_field(p.g.build()?, p.dim, self.profile, need_domain()?)?
                }
            }
            "separable" => {
                let p: SeparableParams = params(&self.params, "separable")?;
                separable_field(p.g.build()?, p.h, p.dim, self.profile, need_domain()?)?
            }
            "drift" => {
                let p: DriftParams = params(&self.params, "drift")?;
                let d = p.b.len();
                drift_field(p.g.build()?, p.b, d, self.profile, need_domain()?)?
            }
            "grid" => {
                let p: GridParams = params(&self.params, "grid")?;
                let file = if p.file.is_absolute() { p.file } else { base.join(p.file) };
                let g = GridData::load(&file)?;
                let grid = GridField::new(g.axes, g.values, g.dim_out)?;
                let domain = grid.domain();
                RoughField::from_fn(grid, self.profile, domain)?.with_label(format!("grid({})", file.display()))
            }
            "sheet" => {
                let p: SheetParams = params(&self.params, "sheet")?;
                let axes = p.axes.iter().map(|(a, b, n)| crate::path::uniform_grid(*a, *b, n.saturating_sub(1).max(1))).collect();
                sample_fbs(HurstVector::new(p.hurst)?, axes, p.seed)?.to_field(self.profile)?
            }
            k => match k.strip_prefix("analytic:") {
                Some(name) => analytic(name, &self.params, self.profile, need_domain()?)?,
                None => return Err(Error::Parse(format!("unknown field kind '{k}'"))),
            },
        };
        match self.mollify {
            None => Ok(field),
            Some(m) => {
                let smooth = field.mollify(m.epsilon, m.nodes)?;
                match m.tabulate {
                    None => Ok(smooth),
                    Some((nt, nx)) => {
                        let dom = smooth.domain().clone();
                        let mut axes = vec![crate::path::uniform_grid(dom.t.0, dom.t.1, nt.max(2) - 1)];
                        for (lo, hi) in dom.lo.iter().zip(&dom.hi) {
                            axes.push(crate::path::uniform_grid(*lo, *hi, nx.max(2) - 1));
                        }
                        smooth.tabulate(axes)
                    }
                }
            }
        }
    }
}

/// Reads and builds a field document, resolving files next to it.
pub fn load_field(path: &FsPath) -> Result<RoughField> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    FieldSpec::from_json(&text)?.build(path.parent().unwrap_or(FsPath::new(".")))
}

fn analytic(name: &str, p: &serde_json::Value, profile: HolderProfile, domain: Domain) -> Result<RoughField> {
    let f = match name {
        // t (-x_2, x_1): divergence-free rotation.
        "rotation" => FnField::new(2, 2, |t, x, o| {
            o[0] = -t * x[1];
            o[1] = t * x[0];
        })
        .with_gradient(|t, _, o| o.copy_from_slice(&[0.0, -t, t, 0.0])),
        "zero" => {
            let d = params::<DimParams>(p, "analytic:zero")?.dim;
            FnField::new(d, 1, |_, _, o| o[0] = 0.0)
                .with_gradient(|_, _, o| o.iter_mut().for_each(|v| *v = 0.0))
                .with_hessian(|_, _, o| o.iter_mut().for_each(|v| *v = 0.0))
        }
        _ => return Err(Error::Parse(format!("unknown analytic field '{name}' (known: rotation, zero)"))),
    };
    Ok(RoughField::from_fn(f, profile, domain)?.with_label(name))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits() {
        assert_eq!(fmt_f64(0.5), "5.0000000000000000e-1");
        assert_eq!(fmt_f64(0.1).parse::<f64>().unwrap(), 0.1);
        assert_eq!(fmt_f64(f64::NAN), "NaN");
    }

    #[test]
    fn grid_round_trips() {
        let g = GridData::new(vec![vec![0.0, 0.5], vec![-1.0, 0.0, 1.0 / 3.0]], 2, (0..12).map(|k| k as f64 / 7.0).collect()).unwrap();
        assert_eq!(GridData::from_csv(&g.to_csv()).unwrap(), g);
        assert_eq!(GridData::from_bytes(&g.to_bytes()).unwrap(), g);
        assert!(GridData::from_bytes(&g.to_bytes()[..30]).is_err());
        assert!(GridData::from_csv("# shape,2\n1\n2\n").is_err());
    }

    #[test]
    fn spec_builds_linear_field() {
        let s = r#"{"kind":"linear","profile":{"tau":1,"lambda":1},
                   "domain":{"t":[0,1],"lo":[-2],"hi":[2]},
                   "params":{"dim":1,"g":{"kind":"identity"},"scalar":true}}"#;
        let f = FieldSpec::from_json(s).unwrap().build(FsPath::new(".")).unwrap();
        assert_eq!(f.eval_scalar(0.5, &[1.5]).unwrap(), 0.75);
        assert!(FieldSpec::from_json(r#"{"kind":"linear","profile":{"tau":1,"lambda":1},"extra":1}"#).is_err());
        let bad = r#"{"kind":"linear","profile":{"tau":1,"lambda":1},"domain":{"t":[0,1],"lo":[-2],"hi":[2]},"params":{"dim":1}}"#;
        assert!(matches!(FieldSpec::from_json(bad).unwrap().build(FsPath::new(".")), Err(Error::Parse(_))));
    }

    #[test]
    fn path_csv() {
        let p = path_from_csv("# t,x\n0,0\n0.5,1\n1,0\n", 0.5).unwrap();
        assert_eq!(p.eval1(0.25).unwrap(), 0.5);
        assert!(path_from_csv("0,1\n1,2,3\n", 0.5).is_err());
    }
}
