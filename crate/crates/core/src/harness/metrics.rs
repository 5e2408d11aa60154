//! Metrics records and their CSV / JSON-lines serialization.
//!
//! CSV columns, in order: `step, objective_value, oracle_grad_norm_sq,
//! u_tracking_mse, eps_sq_mean, wall_clock_ms`. Absent values are empty
//! fields in CSV and `null` in JSON lines. Floats use the shortest
//! round-tripping decimal form (`0.5`, `1e-20`), independent of locale.

use std::fmt;
use std::io::{BufRead, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub objective_value: Option<f64>,
    pub oracle_grad_norm_sq: Option<f64>,
    /// Mean over points of the squared gap between the statistic and its
    /// exact target.
    pub u_tracking_mse: Option<f64>,
    pub eps_sq_mean: Option<f64>,
    pub wall_clock_ms: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MetricsFormat {
    #[default]
    Csv,
    Jsonl,
}

impl FromStr for MetricsFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "jsonl" => Ok(Self::Jsonl),
            _ => Err(Error::Config(format!("unknown metrics format {s:?}"))),
        }
    }
}

impl fmt::Display for MetricsFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Csv => "csv",
            Self::Jsonl => "jsonl",
        })
    }
}

impl MetricsFormat {
    /// Guesses the format from a file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Self::Jsonl,
            _ => Self::Csv,
        }
    }
}

const COLUMNS: [&str; 6] = [
    "step",
    "objective_value",
    "oracle_grad_norm_sq",
    "u_tracking_mse",
    "eps_sq_mean",
    "wall_clock_ms",
];

pub fn write_metrics<W: Write>(
    records: &[MetricsRecord],
    out: W,
    format: MetricsFormat,
) -> Result<()> {
    match format {
        MetricsFormat::Csv => {
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_writer(out);
            w.write_record(COLUMNS)
                .map_err(|e| Error::Parse(e.to_string()))?;
            for r in records {
                w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
            }
            w.flush().map_err(|e| Error::Parse(e.to_string()))?;
        }
        MetricsFormat::Jsonl => {
            let mut out = out;
            for r in records {
                let line = serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?;
                writeln!(out, "{line}").map_err(|e| Error::Parse(e.to_string()))?;
            }
        }
    }
    Ok(())
}

pub fn read_metrics<R: Read>(input: R, format: MetricsFormat) -> Result<Vec<MetricsRecord>> {
    match format {
        MetricsFormat::Csv => {
            let mut r = csv::ReaderBuilder::new()
                .has_headers(true)
                .from_reader(input);
            let header = r
                .headers()
                .map_err(|e| Error::Parse(e.to_string()))?
                .clone();
            if header.iter().ne(COLUMNS) {
                return Err(Error::Parse(format!(
                    "unexpected metrics header {header:?}"
                )));
            }
            r.deserialize()
                .map(|rec| rec.map_err(|e| Error::Parse(e.to_string())))
                .collect()
        }
        MetricsFormat::Jsonl => std::io::BufReader::new(input)
            .lines()
            .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
            .map(|l| {
                let l = l.map_err(|e| Error::Parse(e.to_string()))?;
                serde_json::from_str(&l).map_err(|e| Error::Parse(e.to_string()))
            })
            .collect(),
    }
}

/// Writes `records` to `path`; I/O failures carry the path.
pub fn emit_metrics(records: &[MetricsRecord], path: &Path, format: MetricsFormat) -> Result<()> {
    let mut buf = Vec::new();
    write_metrics(records, &mut buf, format)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_metrics(path: &Path, format: MetricsFormat) -> Result<Vec<MetricsRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_metrics(f, format)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(step: usize, v: f64) -> MetricsRecord {
        MetricsRecord {
            step,
            objective_value: Some(v),
            oracle_grad_norm_sq: Some(0.5),
            u_tracking_mse: None,
            eps_sq_mean: Some(1e-20),
            wall_clock_ms: None,
        }
    }

    #[test]
    fn empty_records() {
        let mut buf = Vec::new();
        write_metrics(&[], &mut buf, MetricsFormat::Csv).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "step,objective_value,oracle_grad_norm_sq,u_tracking_mse,eps_sq_mean,wall_clock_ms\n"
        );
        let mut buf = Vec::new();
        write_metrics(&[], &mut buf, MetricsFormat::Jsonl).unwrap();
        assert!(buf.is_empty());
        assert!(read_metrics(&buf[..], MetricsFormat::Jsonl)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn decimal_format() {
        let mut buf = Vec::new();
        write_metrics(&[rec(3, -0.125)], &mut buf, MetricsFormat::Csv).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "3,-0.125,0.5,,1e-20,");
        let mut buf = Vec::new();
        write_metrics(&[rec(3, -0.125)], &mut buf, MetricsFormat::Jsonl).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .contains("\"oracle_grad_norm_sq\":0.5"));
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_metrics(Path::new("/nonexistent/m.csv"), MetricsFormat::Csv).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("/nonexistent/m.csv"));
    }

    proptest! {
        #[test]
        fn round_trip(values in proptest::collection::vec((any::<u32>(), -1e300f64..1e300, proptest::option::of(0.0f64..1e-5)), 0..20)) {
            let records: Vec<MetricsRecord> = values
                .into_iter()
                .map(|(s, v, o)| MetricsRecord {
                    step: s as usize,
                    objective_value: Some(v),
                    oracle_grad_norm_sq: o,
                    u_tracking_mse: o.map(|x| x * 3.0),
                    eps_sq_mean: None,
                    wall_clock_ms: Some(v.abs()),
                })
                .collect();
            for format in [MetricsFormat::Csv, MetricsFormat::Jsonl] {
                let mut buf = Vec::new();
                write_metrics(&records, &mut buf, format).unwrap();
                prop_assert_eq!(&read_metrics(&buf[..], format).unwrap(), &records);
            }
        }
    }
}
