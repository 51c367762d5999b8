use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::warn;

use super::RawEvent;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputFormat {
    Csv,
    Jsonl,
}

impl InputFormat {
    /// Guesses from the file extension; anything but `.jsonl`/`.json` is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") | Some("ndjson") => InputFormat::Jsonl,
            _ => InputFormat::Csv,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub events: Vec<RawEvent>,
    /// Rows dropped for an empty id, a bad timestamp or a broken record.
    pub skipped: usize,
    /// Subset of `skipped` whose timestamp could not be parsed.
    pub bad_timestamps: usize,
    pub rows: usize,
}

const COLUMNS: [&str; 3] = ["session_id", "timestamp", "item_id"];

/// Reads `session_id,timestamp,item_id` events in file order.
///
/// Rows with an empty id or an unparseable timestamp are skipped with a
/// warning; more than 10% bad timestamps is an error.
pub fn ingest(path: &Path, format: InputFormat) -> Result<IngestReport> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let report = match format {
        InputFormat::Csv => ingest_csv(file, path)?,
        InputFormat::Jsonl => ingest_jsonl(file, path)?,
    };
    if report.bad_timestamps * 10 > report.rows {
        return Err(Error::TooManyMalformed {
            skipped: report.bad_timestamps,
            total: report.rows,
        });
    }
    if report.skipped > 0 {
        warn!("{}: skipped {} of {} rows", path.display(), report.skipped, report.rows);
    }
    Ok(report)
}

enum Row {
    Ok(RawEvent),
    EmptyField,
    BadTimestamp,
}

fn parse_timestamp(raw: &str) -> Option<u64> {
    let raw = raw.trim();
    raw.parse::<u64>().ok().or_else(|| {
        // tolerate integral floats such as "1400000000000.0"
        raw.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite() && *v >= 0.0 && v.fract() == 0.0 && *v < u64::MAX as f64)
            .map(|v| v as u64)
    })
}

fn make_row(session: &str, ts: &str, item: &str) -> Row {
    let (session, item) = (session.trim(), item.trim());
    if session.is_empty() || item.is_empty() {
        return Row::EmptyField;
    }
    match parse_timestamp(ts) {
        Some(timestamp) => Row::Ok(RawEvent {
            session_id: session.to_string(),
            timestamp,
            item_id: item.to_string(),
        }),
        None => Row::BadTimestamp,
    }
}

fn push(report: &mut IngestReport, row: Row, line: usize, path: &Path) {
    report.rows += 1;
    match row {
        Row::Ok(e) => report.events.push(e),
        Row::EmptyField => {
            warn!("{}:{line}: empty session_id or item_id", path.display());
            report.skipped += 1;
        }
        Row::BadTimestamp => {
            warn!("{}:{line}: unparseable timestamp", path.display());
            report.skipped += 1;
            report.bad_timestamps += 1;
        }
    }
}

fn ingest_csv(file: File, path: &Path) -> Result<IngestReport> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let headers = reader
        .headers()
        .map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?
        .clone();
    let mut pos = [0usize; 3];
    for (slot, col) in pos.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == col)
            .ok_or_else(|| Error::MissingColumn(col.to_string()))?;
    }
    let mut report = IngestReport::default();
    for (n, rec) in reader.records().enumerate() {
        let line = n + 2;
        let row = match rec {
            Ok(r) => {
                let field = |i: usize| r.get(pos[i]).unwrap_or("");
                make_row(field(0), field(1), field(2))
            }
            Err(e) => {
                warn!("{}:{line}: {e}", path.display());
                Row::EmptyField
            }
        };
        push(&mut report, row, line, path);
    }
    Ok(report)
}

fn ingest_jsonl(file: File, path: &Path) -> Result<IngestReport> {
    let mut report = IngestReport::default();
    let mut seen = [false; 3];
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = match serde_json::from_str::<serde_json::Value>(&line) {
            Ok(serde_json::Value::Object(obj)) => {
                let mut fields = [String::new(), String::new(), String::new()];
                for (i, col) in COLUMNS.iter().enumerate() {
                    if let Some(v) = obj.get(*col) {
                        seen[i] = true;
                        fields[i] = match v {
                            serde_json::Value::String(s) => s.clone(),
                            serde_json::Value::Number(num) => num.to_string(),
                            _ => String::new(),
                        };
                    }
                }
                make_row(&fields[0], &fields[1], &fields[2])
            }
            _ => Row::EmptyField,
        };
        push(&mut report, row, n + 1, path);
    }
    if report.rows > 0 {
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::MissingColumn(COLUMNS[i].to_string()));
        }
    }
    Ok(report)
}
