//! Output envelope `{"config", "result"}` and its JSON/CSV renderings.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::ValueEnum;
use serde::Serialize;
use serde_json::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

/// Everything needed to rerun a command; serialized into every output.
#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub subcommand: String,
    pub seed: u64,
    pub arith: haarfactor::Arith,
    pub format: Format,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub params: Value,
}

#[derive(Serialize)]
pub struct Envelope<'a> {
    pub config: &'a RunConfig,
    pub result: &'a Value,
}

/// A rectangular table used for CSV output when the generic flattening would be awkward.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// `key,value` rows with dotted paths into the result.
fn flatten(prefix: &str, v: &Value, rows: &mut Vec<Vec<String>>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&p, x, rows);
            }
        }
        Value::Array(a) => {
            for (i, x) in a.iter().enumerate() {
                flatten(&format!("{prefix}.{i}"), x, rows);
            }
        }
        Value::String(s) => rows.push(vec![prefix.to_string(), s.clone()]),
        other => rows.push(vec![prefix.to_string(), other.to_string()]),
    }
}

pub fn render(config: &RunConfig, result: &Value, table: Option<Table>) -> Result<Vec<u8>> {
    match config.format {
        Format::Json => {
            let mut s = serde_json::to_vec_pretty(&Envelope { config, result })?;
            s.push(b'\n');
            Ok(s)
        }
        Format::Csv => {
            let table = table.unwrap_or_else(|| {
                let mut rows = Vec::new();
                flatten("", result, &mut rows);
                Table { header: vec!["key".into(), "value".into()], rows }
            });
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(&table.header)?;
            for r in &table.rows {
                w.write_record(r)?;
            }
            Ok(w.into_inner().context("flushing csv")?)
        }
    }
}

pub fn emit(config: &RunConfig, result: &Value, table: Option<Table>) -> Result<()> {
    let bytes = render(config, result, table)?;
    match &config.out {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(&bytes)?;
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct ErrorEnvelope<'a> {
    config: &'a RunConfig,
    error: &'a Value,
}

/// Failure envelope `{"config", "error"}`; always JSON.
pub fn emit_error(config: &RunConfig, error: &Value) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(&ErrorEnvelope { config, error })?;
    bytes.push(b'\n');
    match &config.out {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(&bytes)?;
            Ok(())
        }
    }
}
