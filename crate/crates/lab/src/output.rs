//! Run configuration echo and CSV artifacts.
//!
//! Every CSV starts with an optional `# generated-unix <secs>` line, then one
//! `# {json}` line carrying the [`RunConfig`], then the column header. Floats
//! are written with 17 significant digits so they round-trip exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

/// Everything that determines a run's output. Thread count is deliberately
/// absent: it never changes results.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunConfig {
    pub subcommand: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub law: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replicas: Option<u64>,
    pub params: BTreeMap<String, Value>,
    pub outputs: Vec<String>,
    pub tolerances: BTreeMap<String, f64>,
}

impl RunConfig {
    pub fn new(subcommand: &str) -> Self {
        RunConfig { subcommand: subcommand.to_string(), ..Default::default() }
    }

    pub fn param(mut self, key: &str, value: impl Serialize) -> Self {
        self.params.insert(key.to_string(), serde_json::to_value(value).expect("serializable parameter"));
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config always serializes")
    }
}

/// Lossless decimal rendering of a float.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".to_string()
    } else if x > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Field {
    Int(i64),
    Float(f64),
    Text(String),
}

impl From<f64> for Field {
    fn from(x: f64) -> Self {
        Field::Float(x)
    }
}

impl From<u64> for Field {
    fn from(x: u64) -> Self {
        Field::Int(x as i64)
    }
}

impl From<usize> for Field {
    fn from(x: usize) -> Self {
        Field::Int(x as i64)
    }
}

impl From<i64> for Field {
    fn from(x: i64) -> Self {
        Field::Int(x)
    }
}

impl From<bool> for Field {
    fn from(x: bool) -> Self {
        Field::Int(x as i64)
    }
}

impl From<&str> for Field {
    fn from(x: &str) -> Self {
        Field::Text(x.to_string())
    }
}

impl From<String> for Field {
    fn from(x: String) -> Self {
        Field::Text(x)
    }
}

impl Field {
    fn render(&self) -> String {
        match self {
            Field::Int(i) => i.to_string(),
            Field::Float(x) => fmt_f64(*x),
            Field::Text(s) => s.clone(),
        }
    }
}

pub struct CsvSink {
    inner: csv::Writer<Box<dyn Write>>,
}

impl CsvSink {
    /// Open `path` (stdout when `None`) and write the header block.
    pub fn open(path: Option<&Path>, config: &RunConfig, timestamp: bool, columns: &[&str]) -> io::Result<Self> {
        let mut raw: Box<dyn Write> = match path {
            Some(p) => Box::new(BufWriter::new(File::create(p)?)),
            None => Box::new(BufWriter::new(io::stdout())),
        };
        if timestamp {
            let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
            writeln!(raw, "# generated-unix {secs}")?;
        }
        writeln!(raw, "# {}", config.to_json())?;
        let mut inner = csv::Writer::from_writer(raw);
        inner.write_record(columns)?;
        Ok(CsvSink { inner })
    }

    pub fn row(&mut self, fields: &[Field]) -> io::Result<()> {
        self.inner.write_record(fields.iter().map(Field::render))?;
        Ok(())
    }

    pub fn finish(mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, 2.0f64.sqrt(), -1e-300, 123456.789] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
        }
        assert_eq!(fmt_f64(f64::NAN), "NaN");
    }

    #[test]
    fn header_block_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        let cfg = RunConfig::new("simulate").param("n", 3);
        let mut sink = CsvSink::open(Some(&path), &cfg, false, &["a", "b"]).unwrap();
        sink.row(&[1u64.into(), 0.5.into()]).unwrap();
        sink.finish().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# {\"subcommand\":\"simulate\""));
        assert_eq!(lines[1], "a,b");
        assert_eq!(lines[2], "1,5.0000000000000000e-1");
    }
}
