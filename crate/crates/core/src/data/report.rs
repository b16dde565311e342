//! CSV and JSON report emission. Rows are sorted by their keys and floats are
//! printed with six significant digits so identical reports are byte-identical.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::sig6;

pub const REPORT_HEADER: &str = "method,noise_kind,noise_level,seed,n_queries,k,retrieval_rate";
pub const ABLATION_HEADER: &str =
    "ablation_key,method,noise_kind,noise_level,seed,n_queries,k,retrieval_rate";

/// One self-retrieval cell: a method evaluated at one noise level and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub method: String,
    pub noise_kind: String,
    pub noise_level: f64,
    pub seed: u64,
    pub n_queries: usize,
    pub k: usize,
    pub retrieval_rate: f64,
}

impl RateRow {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.method
            .cmp(&other.method)
            .then_with(|| self.noise_kind.cmp(&other.noise_kind))
            .then_with(|| self.noise_level.total_cmp(&other.noise_level))
            .then_with(|| self.seed.cmp(&other.seed))
    }
}

/// A rate row tagged with the ablated factor and the hash of the resolved
/// configuration that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation_key: String,
    #[serde(flatten)]
    pub row: RateRow,
    pub config_hash: String,
}

fn csv_err(e: csv::Error) -> Error {
    Error::format("report csv", "row", e.to_string())
}

fn rate_fields(r: &RateRow) -> [String; 7] {
    [
        r.method.clone(),
        r.noise_kind.clone(),
        sig6(r.noise_level),
        r.seed.to_string(),
        r.n_queries.to_string(),
        r.k.to_string(),
        sig6(r.retrieval_rate),
    ]
}

fn render(header: &str, records: impl Iterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header.split(',')).map_err(csv_err)?;
    for rec in records {
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

pub fn render_report_csv(rows: &[RateRow]) -> Result<String> {
    let mut sorted: Vec<&RateRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.key_cmp(b));
    render(REPORT_HEADER, sorted.into_iter().map(|r| rate_fields(r).to_vec()))
}

pub fn render_ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut sorted: Vec<&AblationRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        a.ablation_key
            .cmp(&b.ablation_key)
            .then_with(|| a.row.key_cmp(&b.row))
    });
    render(
        ABLATION_HEADER,
        sorted.into_iter().map(|r| {
            let mut rec = vec![r.ablation_key.clone()];
            rec.extend(rate_fields(&r.row));
            rec
        }),
    )
}

/// Path of the JSON file that carries the resolved configuration for a CSV.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    let mut name = csv.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    csv.with_file_name(name)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn pretty(value: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Writes the CSV and, next to it, `<name>.config.json` holding `config`.
pub fn write_report_csv(rows: &[RateRow], config: &impl Serialize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_text(path, &render_report_csv(rows)?)?;
    write_text(&sidecar_path(path), &pretty(config)?)
}

pub fn write_ablation_csv(
    rows: &[AblationRow],
    config: &impl Serialize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    write_text(path, &render_ablation_csv(rows)?)?;
    write_text(&sidecar_path(path), &pretty(config)?)
}

pub fn write_diag_json(diag: &impl Serialize, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &pretty(diag)?)
}

/// Parses a report CSV produced by [`render_report_csv`].
pub fn parse_report_csv(text: &str) -> Result<Vec<RateRow>> {
    let header = text.lines().next().unwrap_or_default();
    if header != REPORT_HEADER {
        return Err(Error::format(
            "report csv",
            "header",
            format!("expected {REPORT_HEADER:?}, got {header:?}"),
        ));
    }
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}
