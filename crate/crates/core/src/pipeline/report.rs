use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::metrics::Psnr;

/// Column order of CSV metrics output.
pub const CSV_COLUMNS: [&str; 9] =
    ["run_id", "error_rate", "delta", "n_frames", "strategy", "recall", "precision", "nmse", "psnr"];

/// One evaluated configuration. `None` marks an undefined metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub error_rate: f64,
    pub delta: f64,
    pub n_frames: usize,
    pub strategy: String,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub nmse: Option<f64>,
    pub psnr: Option<Psnr>,
}

/// What the pipeline decided for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub true_rate: f64,
    pub estimated_rate: f64,
    pub strategy: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_digest: String,
    pub rows: Vec<MetricsRow>,
    pub seeds: Vec<SeedSummary>,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

impl ReportFormat {
    /// Format implied by a file extension, defaulting to JSON.
    pub fn for_path(path: &Path) -> Self {
        if path.extension().is_some_and(|e| e == "csv") {
            Self::Csv
        } else {
            Self::Json
        }
    }
}

/// Canonical JSON: keys sorted, floats with six decimals, two-space indent.
pub fn to_canonical_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("report types serialize");
    let mut out = String::new();
    write_value(&v, 0, &mut out);
    out.push('\n');
    out
}

fn write_value(v: &Value, indent: usize, out: &mut String) {
    match v {
        Value::Null | Value::Bool(_) | Value::String(_) => out.push_str(&v.to_string()),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => write!(out, "{u}").unwrap(),
            (None, Some(i)) => write!(out, "{i}").unwrap(),
            _ => out.push_str(&fixed(n.as_f64().unwrap_or(f64::NAN))),
        },
        Value::Array(items) if items.is_empty() => out.push_str("[]"),
        Value::Array(items) => {
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                pad(indent + 1, out);
                write_value(item, indent + 1, out);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            pad(indent, out);
            out.push(']');
        }
        Value::Object(map) if map.is_empty() => out.push_str("{}"),
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, k) in keys.iter().enumerate() {
                pad(indent + 1, out);
                write!(out, "{}: ", Value::String((*k).clone())).unwrap();
                write_value(&map[*k], indent + 1, out);
                out.push_str(if i + 1 < keys.len() { ",\n" } else { "\n" });
            }
            pad(indent, out);
            out.push('}');
        }
    }
}

fn pad(indent: usize, out: &mut String) {
    for _ in 0..indent {
        out.push_str("  ");
    }
}

fn fixed(v: f64) -> String {
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".into()
    } else {
        s
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), fixed)
}

/// Header plus one line per row in [`CSV_COLUMNS`] order.
pub fn rows_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let psnr = match r.psnr {
            None => "undefined".into(),
            Some(Psnr::Infinite) => "inf".into(),
            Some(Psnr::Db(db)) => fixed(db),
        };
        let fields = [
            r.run_id.clone(),
            fixed(r.error_rate),
            fixed(r.delta),
            r.n_frames.to_string(),
            r.strategy.clone(),
            opt(r.recall),
            opt(r.precision),
            opt(r.nmse),
            psnr,
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn render_report(report: &RunReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => to_canonical_json(report),
        ReportFormat::Csv => rows_to_csv(&report.rows),
    }
}

pub fn emit_report(report: &RunReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_report(report, format)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunReport {
        RunReport {
            config_digest: "abc".into(),
            rows: vec![MetricsRow {
                run_id: "r-s0".into(),
                error_rate: 0.0001,
                delta: 0.7,
                n_frames: 9,
                strategy: "mlp".into(),
                recall: Some(2.0 / 3.0),
                precision: None,
                nmse: Some(0.0123456789),
                psnr: Some(Psnr::Infinite),
            }],
            seeds: vec![],
            artifacts: vec![PathBuf::from("a/b.pgm")],
        }
    }

    #[test]
    fn json_is_canonical_and_parses() {
        let r = sample();
        let a = render_report(&r, ReportFormat::Json);
        assert_eq!(a, render_report(&r.clone(), ReportFormat::Json));
        assert!(a.contains("\"recall\": 0.666667"));
        assert!(a.contains("\"error_rate\": 0.000100"));
        let v: Value = serde_json::from_str(&a).unwrap();
        let row = &v["rows"][0];
        assert_eq!(row["nmse"].as_f64().unwrap(), 0.012346);
        assert_eq!(row["n_frames"].as_u64().unwrap(), 9);
        assert!(row["precision"].is_null());
        assert_eq!(row["psnr"], "infinite");
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn csv_layout() {
        assert_eq!(rows_to_csv(&[]), CSV_COLUMNS.join(",") + "\n");
        let csv = rows_to_csv(&sample().rows);
        let line = csv.lines().nth(1).unwrap();
        assert_eq!(line, "r-s0,0.000100,0.700000,9,mlp,0.666667,undefined,0.012346,inf");
    }

    #[test]
    fn emit_writes_and_reports_bad_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        emit_report(&sample(), ReportFormat::for_path(&p), &p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("run_id,"));
        assert!(emit_report(&sample(), ReportFormat::Json, dir.path().join("missing/r.json")).is_err());
    }
}
