//! Report and series emission.
//!
//! `report.json` carries everything needed to audit and reproduce a run:
//! the effective configuration echo, versions, seed, per-mode results,
//! audits with pass flags, fits, and iteration traces. `series.csv` is the
//! plain norm history with a fixed header; identical spec and seed produce
//! byte-identical bytes, which the integration tests pin down.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use pkin::solvers::IterationTrace;
use pkin::transport::NormSample;
use pkin::Result;
use serde_json::{json, Map, Value};

use crate::config::RunSpec;

/// Exact column header of `series.csv`.
pub const SERIES_HEADER: &str = "t,weighted_sup_norm,l2_norm,boundary_norm,mass_moment";

/// One named audit outcome destined for the report.
#[derive(Debug, Clone)]
pub struct AuditItem {
    pub name: String,
    pub pass: bool,
    pub detail: Value,
}

impl AuditItem {
    pub fn new(name: &str, pass: bool, detail: Value) -> Self {
        AuditItem {
            name: name.into(),
            pass,
            detail,
        }
    }
}

/// Everything a mode hands back for emission.
#[derive(Debug, Clone, Default)]
pub struct ModeOutput {
    pub results: Value,
    pub audits: Vec<AuditItem>,
    pub fits: Value,
    pub traces: Value,
    pub series: Vec<NormSample>,
}

impl ModeOutput {
    pub fn all_audits_pass(&self) -> bool {
        self.audits.iter().all(|a| a.pass)
    }
}

/// Serializes an iteration trace.
pub fn trace_json(trace: &IterationTrace) -> Value {
    json!({
        "iterations": trace.iterations(),
        "weighted_sup": trace.weighted_sup,
        "boundary_sup": trace.boundary_sup,
        "diff": trace.diff,
        "seconds": trace.seconds,
        "anchored_mass": trace.anchored_mass,
        "observed_ratio": trace.observed_ratio(),
        "warnings": trace.warnings,
    })
}

/// Renders one norm sample row in the fixed column order.
fn series_row(s: &NormSample) -> String {
    format!(
        "{},{:e},{:e},{:e},{:e}\n",
        s.t, s.weighted_sup, s.l2, s.boundary, s.mass
    )
}

/// Writes `series.csv`. An empty sample list still writes the header so the
/// bundle shape is uniform across modes.
pub fn write_series(path: &Path, rows: &[NormSample]) -> Result<()> {
    let mut text = String::with_capacity(64 * (rows.len() + 1));
    text.push_str(SERIES_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&series_row(row));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Reads a `series.csv` back into (t, named column) arrays.
pub fn read_series(path: &Path) -> Result<(Vec<f64>, Vec<NormSample>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != SERIES_HEADER {
        return Err(pkin::error::Error::config(format!(
            "{}: unexpected series header '{header}'",
            path.display()
        )));
    }
    let mut ts = Vec::new();
    let mut samples = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 5 {
            return Err(pkin::error::Error::config(format!(
                "{}: row {} has {} columns, expected 5",
                path.display(),
                idx + 2,
                cells.len()
            )));
        }
        let mut values = [0.0f64; 5];
        for (slot, cell) in values.iter_mut().zip(&cells) {
            *slot = cell.parse().map_err(|_| {
                pkin::error::Error::config(format!(
                    "{}: row {} holds a non-numeric cell '{cell}'",
                    path.display(),
                    idx + 2
                ))
            })?;
        }
        ts.push(values[0]);
        samples.push(NormSample {
            t: values[0],
            weighted_sup: values[1],
            l2: values[2],
            boundary: values[3],
            mass: values[4],
        });
    }
    Ok((ts, samples))
}

/// Assembles and writes the full output bundle; returns whether every audit
/// passed.
pub fn write_bundle(spec: &RunSpec, mode: &str, output: &ModeOutput) -> Result<bool> {
    let out = &spec.run.out;
    fs::create_dir_all(out)?;
    let mut config_echo = Map::new();
    for (key, value) in spec.entries() {
        config_echo.insert(key, Value::String(value));
    }
    let audits: Vec<Value> = output
        .audits
        .iter()
        .map(|a| json!({"name": a.name, "pass": a.pass, "detail": a.detail}))
        .collect();
    let report = json!({
        "format": 1,
        "tool": {"name": "pkin", "version": env!("CARGO_PKG_VERSION")},
        "mode": mode,
        "seed": spec.run.seed,
        "config": Value::Object(config_echo),
        "results": output.results,
        "audits": audits,
        "audits_pass": output.all_audits_pass(),
        "fits": output.fits,
        "traces": output.traces,
    });
    let mut text = serde_json::to_string_pretty(&report)
        .map_err(|e| pkin::error::Error::config(format!("report serialization: {e}")))?;
    text.push('\n');
    fs::write(out.join("report.json"), text)?;
    write_series(&out.join("series.csv"), &output.series)?;
    fs::write(out.join("effective.cfg"), spec.render())?;
    Ok(output.all_audits_pass())
}

/// Formats a float for log lines without locale surprises.
pub fn compact(v: f64) -> String {
    let mut s = String::new();
    let _ = write!(s, "{v:.6e}");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_round_trips_through_the_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("series.csv");
        let rows = vec![
            NormSample {
                t: 0.0,
                weighted_sup: 1.25e-3,
                l2: 0.5,
                boundary: 1e-300,
                mass: -3.5e-17,
            },
            NormSample {
                t: 0.125,
                weighted_sup: 0.0,
                l2: 2.0,
                boundary: 7.0,
                mass: 0.0,
            },
        ];
        write_series(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(
            text.starts_with(&format!("{SERIES_HEADER}\n")),
            "header must match exactly"
        );
        assert!(!text.contains('\r'), "line endings must be bare newlines");
        let (ts, samples) = read_series(&path).unwrap();
        assert_eq!(ts, vec![0.0, 0.125]);
        for (a, b) in samples.iter().zip(&rows) {
            assert_eq!(a.weighted_sup, b.weighted_sup, "csv must round-trip exactly");
            assert_eq!(a.mass, b.mass);
        }
    }
}
