//! JSON-lines and CSV files exchanged between commands.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cascade_sim::SyntheticRequest;
use crate::error::{Error, Result};
use crate::revenue_model::{LogRevenueModel, RevenueCurve};
use crate::stage::Stage;

#[derive(Debug, Serialize, Deserialize)]
struct CurveRecord {
    request_key: String,
    stage_id: Stage,
    points: Vec<(u32, f64)>,
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(&r).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_traffic(path: &Path, requests: &[SyntheticRequest]) -> Result<()> {
    write_jsonl(path, requests)
}

pub fn read_traffic(path: &Path) -> Result<Vec<SyntheticRequest>> {
    read_jsonl(path)
}

pub fn write_curves(path: &Path, curves: &[RevenueCurve]) -> Result<()> {
    write_jsonl(
        path,
        curves.iter().map(|c| CurveRecord {
            request_key: c.request_key().to_string(),
            stage_id: c.stage(),
            points: c.points().collect(),
        }),
    )
}

pub fn read_curves(path: &Path) -> Result<Vec<RevenueCurve>> {
    let records: Vec<CurveRecord> = read_jsonl(path)?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            RevenueCurve::from_points(r.request_key, r.stage_id, &r.points).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn write_models(path: &Path, models: &[LogRevenueModel]) -> Result<()> {
    write_jsonl(path, models)
}

pub fn read_models(path: &Path) -> Result<Vec<LogRevenueModel>> {
    let raw: Vec<LogRevenueModel> = read_jsonl(path)?;
    raw.into_iter()
        .enumerate()
        .map(|(i, m)| {
            LogRevenueModel::new(m.request_key, m.stage, m.r_coeff, m.b_offset).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Writes `header` then one line per row.
pub fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for row in rows {
        writeln!(w, "{row}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
