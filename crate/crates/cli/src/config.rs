//! Experiment configuration shared by the command line and JSON config files.
//!
//! Every subcommand's argument block is both a clap parser and a serde type,
//! so `{"task": {"integrate": {"b": 2}}}` and `rough-young integrate --b 2`
//! describe the same run.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

pub const DEFAULT_SEED: u64 = 42;

fn default_seed() -> u64 {
    DEFAULT_SEED
}

/// A complete, reproducible run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Output directory for the envelope and CSV tables.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Tolerance override; each task documents how it is used.
    #[serde(default)]
    pub tol: Option<f64>,
    pub task: Task,
}

impl ExperimentConfig {
    pub fn new(task: Task) -> Self {
        Self { seed: DEFAULT_SEED, out: None, tol: None, task }
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        if text.trim().is_empty() {
            return Err("config is empty".into());
        }
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Directory that receives outputs.
    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("rough-young-out"))
    }
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Nonlinear Young integral of a field along a path.
    Integrate(IntegrateArgs),
    /// Rough ODE trajectory with optional Jacobian and round-trip checks.
    Flow(FlowArgs),
    /// Transport equation solved along backward characteristics.
    Transport(TransportArgs),
    /// Monte-Carlo Feynman-Kac solution with a rough potential.
    Fk(FkArgs),
    /// Fractional Brownian sheet samples and statistical checks.
    Sheet(SheetArgs),
    /// Named test batteries.
    Suite(SuiteArgs),
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Integrate(_) => "integrate",
            Task::Flow(_) => "flow",
            Task::Transport(_) => "transport",
            Task::Fk(_) => "fk",
            Task::Sheet(_) => "sheet",
            Task::Suite(_) => "suite",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeArg {
    Euler,
    SecondOrder,
}

impl From<SchemeArg> for rough_young::flow::Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Euler => Self::Euler,
            SchemeArg::SecondOrder => Self::SecondOrder,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteArg {
    Pathwise,
    Ito,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SheetCheck {
    Covariance,
    Increment,
    Concentration,
    Chaining,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteName {
    Acceptance,
}

#[derive(Debug, Clone, PartialEq, Parser, Serialize, Deserialize)]
#[command(allow_negative_numbers = true)]
#[serde(default, deny_unknown_fields)]
pub struct IntegrateArgs {
    /// `builtin:<name>` or a JSON field document.
    #[arg(long, default_value = "builtin:linear")]
    pub field: String,
    /// `builtin:identity`, `builtin:fbm:<H>` or a CSV file of `t,x...` rows.
    #[arg(long, default_value = "builtin:identity")]
    pub path: String,
    /// Hölder exponent assigned to CSV paths.
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.0)]
    pub a: f64,
    #[arg(long, default_value_t = 1.0)]
    pub b: f64,
    /// Fixed number of dyadic levels instead of the adaptive stop.
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long, value_enum, default_value_t = Endpoint::Left)]
    pub endpoint: Endpoint,
    /// Also evaluate the symmetric approximation at this epsilon.
    #[arg(long)]
    pub symmetric_eps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Parser, Serialize, Deserialize)]
#[command(allow_negative_numbers = true)]
#[serde(default, deny_unknown_fields)]
pub struct FlowArgs {
    #[arg(long, default_value = "builtin:fbm-sin")]
    pub field: String,
    /// Start point, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0.5")]
    pub x0: Vec<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub t0: f64,
    #[arg(long = "T", alias = "t-end", default_value_t = 1.0)]
    #[serde(rename = "T")]
    pub t_end: f64,
    #[arg(long, default_value_t = 4096)]
    pub steps: usize,
    #[arg(long, value_enum, default_value_t = SchemeArg::Euler)]
    pub scheme: SchemeArg,
    /// Solve for the Jacobian, its inverse and determinant.
    #[arg(long)]
    pub jacobian: bool,
    /// Integrate back from the end point and compare with `x0`.
    #[arg(long)]
    pub inverse_check: bool,
    /// Compare one leg to `t0 + s + T` with a restart at `t0 + s`.
    #[arg(long)]
    pub composition_check: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Parser, Serialize, Deserialize)]
#[command(allow_negative_numbers = true)]
#[serde(default, deny_unknown_fields)]
pub struct TransportArgs {
    #[arg(long, default_value = "builtin:fbm-sin")]
    pub field: String,
    /// Initial datum: gaussian, sines or constant.
    #[arg(long, default_value = "gaussian")]
    pub h: String,
    #[arg(long, default_value_t = 0.0)]
    pub t0: f64,
    #[arg(long, default_value_t = 1.0)]
    pub t: f64,
    /// One `lo:hi:points` block per axis, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-2:2:65")]
    pub grid: Vec<String>,
    #[arg(long, default_value_t = 4096)]
    pub steps: usize,
    #[arg(long, value_enum, default_value_t = SchemeArg::Euler)]
    pub scheme: SchemeArg,
    /// Evaluate the equation residual at this point.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub residual_at: Option<Vec<f64>>,
    /// Dyadic level of the residual's time partition.
    #[arg(long, default_value_t = 6)]
    pub residual_level: u32,
}

#[derive(Debug, Clone, PartialEq, Parser, Serialize, Deserialize)]
#[command(allow_negative_numbers = true)]
#[serde(default, deny_unknown_fields)]
pub struct FkArgs {
    #[arg(long, default_value = "builtin:zero")]
    pub field: String,
    /// Coefficient spec as inline JSON or a file.
    #[arg(long, default_value = r#"{"a":{"kind":"identity"},"b":{"kind":"zero"}}"#)]
    pub coeffs: String,
    /// Terminal condition: one, first, square, gaussian, sin or cos.
    #[arg(long, default_value = "square")]
    pub terminal: String,
    /// One `lo:hi:points` block per axis, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-1:1:3")]
    pub grid: Vec<String>,
    #[arg(long, default_value_t = 0.0)]
    pub r: f64,
    #[arg(long = "T", alias = "t-end", default_value_t = 1.0)]
    #[serde(rename = "T")]
    pub t_end: f64,
    #[arg(long, default_value_t = 10000)]
    pub paths: usize,
    #[arg(long, default_value_t = 64)]
    pub steps: usize,
    #[arg(long)]
    pub antithetic: bool,
    #[arg(long, value_enum, default_value_t = RouteArg::Pathwise)]
    pub route: RouteArg,
    /// Compare against the finite-difference reference.
    #[arg(long)]
    pub fd_check: bool,
}

#[derive(Debug, Clone, PartialEq, Parser, Serialize, Deserialize)]
#[command(allow_negative_numbers = true)]
#[serde(default, deny_unknown_fields)]
pub struct SheetArgs {
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0.5,0.5")]
    pub hurst: Vec<f64>,
    /// One `lo:hi:points` block per axis, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0:1:17,0:1:17")]
    pub grid: Vec<String>,
    #[arg(long, default_value_t = 200)]
    pub draws: usize,
    #[arg(long, value_enum)]
    pub check: Option<SheetCheck>,
    /// Metric cap per axis for the sup statistics.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0.5,0.5")]
    pub delta: Vec<f64>,
    #[arg(long = "R", default_value_t = 1.0)]
    #[serde(rename = "R")]
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Parser, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteArgs {
    #[arg(value_enum, default_value_t = SuiteName::Acceptance)]
    pub name: SuiteName,
    /// Run only these criteria.
    #[arg(long, value_delimiter = ',')]
    pub only: Option<Vec<u32>>,
}

macro_rules! parsed_default {
    ($($t:ty => $name:literal),*) => {
        $(impl Default for $t {
            fn default() -> Self {
                <$t>::parse_from([$name])
            }
        })*
    };
}

parsed_default!(
    IntegrateArgs => "integrate",
    FlowArgs => "flow",
    TransportArgs => "transport",
    FkArgs => "fk",
    SheetArgs => "sheet",
    SuiteArgs => "suite"
);

/// Parses `lo:hi:points` into an evenly spaced axis.
pub fn parse_axis(spec: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || format!("axis '{spec}' is not lo:hi:points");
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if n == 1 && lo == hi {
        return Ok(vec![lo]);
    }
    if n < 2 || !(hi > lo) {
        return Err(format!("axis '{spec}' needs lo < hi and at least 2 points"));
    }
    Ok(rough_young::path::uniform_grid(lo, hi, n - 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_cli_defaults() {
        let a = IntegrateArgs::default();
        assert_eq!(a.field, "builtin:linear");
        assert_eq!(a.b, 1.0);
        let f: FlowArgs = serde_json::from_str("{}").unwrap();
        assert_eq!(f, FlowArgs::default());
        assert_eq!(f.x0, vec![0.5]);
    }

    #[test]
    fn config_round_trip() {
        let mut cfg = ExperimentConfig::new(Task::Fk(FkArgs { t_end: 0.1 + 0.2, ..FkArgs::default() }));
        cfg.tol = Some(1.0 / 3.0);
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"task":{"integrate":{"bogus":1}}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"task":{"integrate":{}},"extra":0}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"task":{"nope":{}}}"#).is_err());
        assert!(ExperimentConfig::from_json("  ").is_err());
        assert!(ExperimentConfig::from_json("{}").is_err());
    }

    #[test]
    fn axes() {
        assert_eq!(parse_axis("0:1:3").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(parse_axis("0.3:0.3:1").unwrap(), vec![0.3]);
        assert!(parse_axis("0:1").is_err());
        assert!(parse_axis("1:0:4").is_err());
    }
}
