//! Result sets and their CSV / JSON persistence.

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{LabError, Result};

pub const RESULT_VERSION: u32 = 1;

/// Version of the code that produced a result set.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// One cell of a record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Num(f64),
    Text(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Num(x) => Some(*x),
            Value::Text(_) => None,
        }
    }

    fn to_csv(&self) -> String {
        match self {
            Value::Int(i) => i.to_string(),
            Value::Num(x) => format_f64(*x),
            Value::Text(s) => s.clone(),
        }
    }

    fn from_csv(s: &str) -> Value {
        if let Ok(i) = s.parse::<i64>() {
            Value::Int(i)
        } else if let Ok(x) = s.parse::<f64>() {
            Value::Num(x)
        } else {
            Value::Text(s.to_string())
        }
    }
}

/// A flat row keyed by column name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Record(pub BTreeMap<String, Value>);

impl Record {
    pub fn new() -> Self {
        Record::default()
    }

    pub fn int(mut self, key: &str, v: impl Into<i64>) -> Self {
        self.0.insert(key.into(), Value::Int(v.into()));
        self
    }

    pub fn num(mut self, key: &str, v: f64) -> Self {
        self.0.insert(key.into(), Value::Num(v));
        self
    }

    pub fn text(mut self, key: &str, v: impl Into<String>) -> Self {
        self.0.insert(key.into(), Value::Text(v.into()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.0.get(key)
    }

    pub fn f64(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(Value::as_f64)
    }
}

/// Records plus the summaries derived from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultSet {
    pub version: u32,
    pub code_version: String,
    pub config: ExperimentConfig,
    pub records: Vec<Record>,
    pub summaries: BTreeMap<String, f64>,
}

impl ResultSet {
    pub fn new(config: ExperimentConfig) -> Self {
        ResultSet {
            version: RESULT_VERSION,
            code_version: CODE_VERSION.to_string(),
            config,
            records: Vec::new(),
            summaries: BTreeMap::new(),
        }
    }

    pub fn summary(&self, key: &str) -> Option<f64> {
        self.summaries.get(key).copied()
    }

    /// Column names in first-appearance order.
    pub fn columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = Vec::new();
        for r in &self.records {
            for k in r.0.keys() {
                if !cols.contains(k) {
                    cols.push(k.clone());
                }
            }
        }
        cols
    }

    pub fn records_csv(&self) -> Result<String> {
        let cols = self.columns();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&cols)?;
        for r in &self.records {
            w.write_record(cols.iter().map(|c| r.get(c).map(Value::to_csv).unwrap_or_default()))?;
        }
        let bytes = w.into_inner().map_err(|e| LabError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        to_json_string(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(LabError::InvalidParameter(format!("unknown format {other}"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CsvMeta {
    version: u32,
    code_version: String,
    config: ExperimentConfig,
    summaries: BTreeMap<String, f64>,
}

/// Path of the metadata sidecar written next to CSV records.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    s.into()
}

/// Writes `rs` as a single JSON document, or as CSV records with a JSON
/// sidecar holding the config and summaries.
pub fn persist(rs: &ResultSet, path: &Path, format: Format) -> Result<()> {
    match format {
        Format::Json => std::fs::write(path, rs.to_json()?)?,
        Format::Csv => {
            std::fs::write(path, rs.records_csv()?)?;
            let meta = CsvMeta {
                version: rs.version,
                code_version: rs.code_version.clone(),
                config: rs.config.clone(),
                summaries: rs.summaries.clone(),
            };
            std::fs::write(meta_path(path), to_json_string(&meta)?)?;
        }
    }
    Ok(())
}

/// Loads a result set; the format follows the file extension (`.json`
/// or anything else for CSV).
pub fn load(path: &Path) -> Result<ResultSet> {
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        check_version(&raw)?;
        return Ok(serde_json::from_value(raw)?);
    }
    let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(meta_path(path))?)?;
    check_version(&raw)?;
    let meta: CsvMeta = serde_json::from_value(raw)?;
    let mut rdr = csv::Reader::from_path(path)?;
    let cols: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let mut r = Record::new();
        for (c, v) in cols.iter().zip(row.iter()) {
            if !v.is_empty() {
                r.0.insert(c.clone(), Value::from_csv(v));
            }
        }
        records.push(r);
    }
    Ok(ResultSet {
        version: meta.version,
        code_version: meta.code_version,
        config: meta.config,
        records,
        summaries: meta.summaries,
    })
}

fn check_version(raw: &serde_json::Value) -> Result<()> {
    let found = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != RESULT_VERSION {
        return Err(LabError::SchemaVersion { expected: RESULT_VERSION, found });
    }
    Ok(())
}

/// `x` with 17 significant digits, which round-trips every `f64`.
pub fn format_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

struct SigFigs;

impl serde_json::ser::Formatter for SigFigs {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(format_f64(value).as_bytes())
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

/// Compact JSON with every float printed to 17 significant digits.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SigFigs);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(out).expect("json output is utf-8"))
}
