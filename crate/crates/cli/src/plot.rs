//! Plot-ready tables extracted from result envelopes.

use clap::ValueEnum;
use rough_young::io::CsvTable;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::envelope::ResultEnvelope;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    /// `(level, value, diff)` per refinement level.
    Convergence,
    /// `(x, y, u)` per grid node.
    Raster,
    /// `(r, frequency, bound)` per threshold.
    Tail,
}

impl PlotKind {
    pub fn name(self) -> &'static str {
        match self {
            PlotKind::Convergence => "convergence",
            PlotKind::Raster => "raster",
            PlotKind::Tail => "tail",
        }
    }

    pub fn columns(self) -> [&'static str; 3] {
        match self {
            PlotKind::Convergence => ["level", "value", "diff"],
            PlotKind::Raster => ["x", "y", "u"],
            PlotKind::Tail => ["r", "frequency", "bound"],
        }
    }
}

/// Three-column plot rows of one kind.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotData {
    pub kind: PlotKind,
    pub rows: Vec<[f64; 3]>,
}

impl PlotData {
    pub fn new(kind: PlotKind) -> Self {
        Self { kind, rows: Vec::new() }
    }

    /// Convergence rows from a refinement trace; the first diff is `NaN`.
    pub fn convergence(levels: &[(usize, f64)]) -> Self {
        let mut p = Self::new(PlotKind::Convergence);
        let mut prev: Option<f64> = None;
        for &(level, value) in levels {
            p.rows.push([level as f64, value, prev.map_or(f64::NAN, |q| (value - q).abs())]);
            prev = Some(value);
        }
        p
    }

    pub fn to_value(&self) -> serde_json::Value {
        json!({ "kind": self.kind, "columns": self.kind.columns(), "rows": self.rows })
    }
}

/// The envelope's plot rows as a CSV table of the requested kind.
pub fn emit_plot_data(envelope: &ResultEnvelope, kind: PlotKind) -> Result<CsvTable, String> {
    let plot = envelope
        .outputs
        .get("plot")
        .ok_or_else(|| format!("'{}' envelope carries no plot data", envelope.command))?;
    let found: PlotKind = serde_json::from_value(plot["kind"].clone()).map_err(|e| format!("plot kind: {e}"))?;
    if found != kind {
        return Err(format!("envelope holds {} data, not {}", found.name(), kind.name()));
    }
    let rows = plot["rows"].as_array().ok_or("plot rows missing")?;
    let mut table = CsvTable::new(&kind.columns()).comment(format!("rough-young {} {}", envelope.command, kind.name()));
    for r in rows {
        let cells = r.as_array().ok_or("plot row is not an array")?;
        // Non-finite values travel as JSON null.
        table.push(cells.iter().map(|c| c.as_f64().unwrap_or(f64::NAN)).collect());
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn envelope_with(p: &PlotData) -> ResultEnvelope {
        let mut env = ResultEnvelope::new("integrate", None);
        env.outputs = json!({ "plot": p.to_value() });
        env
    }

    #[test]
    fn convergence_rows_follow_the_trace() {
        let levels: Vec<(usize, f64)> = (0..8).map(|k| (k, 1.0 - 0.5f64.powi(k as i32))).collect();
        let env = envelope_with(&PlotData::convergence(&levels));
        let t = emit_plot_data(&env, PlotKind::Convergence).unwrap();
        assert_eq!(t.rows.len(), 8);
        assert!(t.rows[0][2].is_nan());
        assert_eq!(t.rows[3][2], 0.125);
        assert!(t.render().starts_with("# rough-young integrate convergence\n# level,value,diff\n"));
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let env = envelope_with(&PlotData::new(PlotKind::Raster));
        assert!(emit_plot_data(&env, PlotKind::Tail).is_err());
        assert!(emit_plot_data(&ResultEnvelope::new("flow", None), PlotKind::Raster).is_err());
    }
}
