//! CSV and JSON encodings of curve points.
//!
//! Floats are written with 9 significant digits in both formats, so a CSV and a JSON file
//! from the same run carry identical values. Non-finite values appear as `inf`, `-inf` or
//! `NaN` (JSON strings in the JSON encoding).

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde_json::{json, Map, Value};

use super::run::CurvePoint;
use crate::error::{Error, Result};

pub const CSV_COLUMNS: [&str; 8] = [
    "method",
    "sweep_name",
    "sweep_value",
    "rmse_m",
    "peb_m",
    "peb_trace_m2",
    "trials",
    "failures",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::Config(format!(
                "unknown output format `{other}` (expected csv or json)"
            ))),
        }
    }
}

/// `v` with 9 significant digits.
pub fn format_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.8e}")
    } else {
        format!("{v}")
    }
}

fn rounded(v: f64) -> f64 {
    format_float(v).parse().unwrap_or(v)
}

fn parse_float(s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::invalid(format!("not a number: `{s}`")))
}

pub fn to_csv(points: &[CurvePoint]) -> String {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            p.method,
            p.sweep_name,
            format_float(p.sweep_value),
            format_float(p.rmse_m),
            format_float(p.peb_m),
            format_float(p.peb_trace_m2),
            p.trials,
            p.failures
        );
    }
    out
}

fn json_float(v: f64) -> Value {
    let r = rounded(v);
    if r.is_finite() {
        json!(r)
    } else {
        json!(format_float(r))
    }
}

pub fn to_json(points: &[CurvePoint]) -> Result<String> {
    let rows: Vec<Value> = points
        .iter()
        .map(|p| {
            let mut m = Map::new();
            m.insert("method".into(), json!(p.method));
            m.insert("sweep_name".into(), json!(p.sweep_name));
            m.insert("sweep_value".into(), json_float(p.sweep_value));
            m.insert("rmse_m".into(), json_float(p.rmse_m));
            m.insert("peb_m".into(), json_float(p.peb_m));
            m.insert("peb_trace_m2".into(), json_float(p.peb_trace_m2));
            m.insert("trials".into(), json!(p.trials));
            m.insert("failures".into(), json!(p.failures));
            Value::Object(m)
        })
        .collect();
    let mut text = serde_json::to_string_pretty(&Value::Array(rows))?;
    text.push('\n');
    Ok(text)
}

/// Reads CSV written by [`to_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<CurvePoint>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::invalid("missing CSV header"))?;
    if header != CSV_COLUMNS.join(",") {
        return Err(Error::invalid(format!("unexpected CSV header `{header}`")));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != CSV_COLUMNS.len() {
                return Err(Error::invalid(format!("expected 8 fields in `{line}`")));
            }
            let count = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::invalid(format!("not a count: `{s}`")))
            };
            Ok(CurvePoint {
                method: f[0].to_string(),
                sweep_name: f[1].to_string(),
                sweep_value: parse_float(f[2])?,
                rmse_m: parse_float(f[3])?,
                peb_m: parse_float(f[4])?,
                peb_trace_m2: parse_float(f[5])?,
                trials: count(f[6])?,
                failures: count(f[7])?,
            })
        })
        .collect()
}

/// Reads JSON written by [`to_json`].
pub fn parse_json(text: &str) -> Result<Vec<CurvePoint>> {
    let rows: Vec<Map<String, Value>> = serde_json::from_str(text)?;
    rows.into_iter()
        .map(|r| {
            let float = |k: &str| -> Result<f64> {
                match r.get(k) {
                    Some(Value::Number(n)) => n
                        .as_f64()
                        .ok_or_else(|| Error::invalid(format!("bad `{k}`"))),
                    Some(Value::String(s)) => parse_float(s),
                    _ => Err(Error::invalid(format!("missing `{k}`"))),
                }
            };
            let text = |k: &str| -> Result<String> {
                r.get(k)
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .ok_or_else(|| Error::invalid(format!("missing `{k}`")))
            };
            let count = |k: &str| -> Result<usize> {
                r.get(k)
                    .and_then(Value::as_u64)
                    .map(|v| v as usize)
                    .ok_or_else(|| Error::invalid(format!("missing `{k}`")))
            };
            Ok(CurvePoint {
                method: text("method")?,
                sweep_name: text("sweep_name")?,
                sweep_value: float("sweep_value")?,
                rmse_m: float("rmse_m")?,
                peb_m: float("peb_m")?,
                peb_trace_m2: float("peb_trace_m2")?,
                trials: count("trials")?,
                failures: count("failures")?,
            })
        })
        .collect()
}

pub fn render(points: &[CurvePoint], format: OutputFormat) -> Result<String> {
    match format {
        OutputFormat::Csv => Ok(to_csv(points)),
        OutputFormat::Json => to_json(points),
    }
}

pub fn emit_results(points: &[CurvePoint], path: &Path, format: OutputFormat) -> Result<()> {
    let text = render(points, format)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
