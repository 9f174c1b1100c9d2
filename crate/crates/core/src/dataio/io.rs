use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime};
use serde_json::Value;

use super::{CoilSequence, DataError, FeatureRecord, Label, Result, FEATURES};

const HEADER: [&str; 7] = ["coil_id", "timestamp", "cnl", "csp", "ssr", "csi", "label"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Jsonl => "jsonl",
        }
    }

    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(Format::Csv),
            "jsonl" | "ndjson" => Some(Format::Jsonl),
            _ => None,
        }
    }
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "jsonl" => Ok(Format::Jsonl),
            other => Err(format!("unknown format '{other}' (expected csv or jsonl)")),
        }
    }
}

/// A data file path, or a directory holding `coils.csv` or `coils.jsonl`.
pub fn resolve_data_path(path: &Path) -> Result<(PathBuf, Format)> {
    if path.is_dir() {
        for format in [Format::Csv, Format::Jsonl] {
            let candidate = path.join(format!("coils.{}", format.extension()));
            if candidate.is_file() {
                return Ok((candidate, format));
            }
        }
        return Err(DataError::Invalid(format!(
            "{} holds neither coils.csv nor coils.jsonl",
            path.display()
        )));
    }
    let format = Format::from_path(path)
        .ok_or_else(|| DataError::Invalid(format!("cannot infer format of {}", path.display())))?;
    Ok((path.to_path_buf(), format))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_timestamp(text: &str, line: u64) -> Result<i64> {
    let text = text.trim();
    if let Ok(secs) = text.parse::<i64>() {
        return Ok(secs);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(text) {
        return Ok(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(text, fmt) {
            return Ok(dt.and_utc().timestamp());
        }
    }
    Err(DataError::Schema {
        line,
        detail: format!("unparseable timestamp '{text}'"),
    })
}

fn parse_value(text: &str, field: &'static str, line: u64) -> Result<f64> {
    let v: f64 = text.trim().parse().map_err(|_| DataError::Schema {
        line,
        detail: format!("'{field}' is not a number: '{text}'"),
    })?;
    if !v.is_finite() {
        return Err(DataError::NonFinite { line, field });
    }
    Ok(v)
}

fn parse_label(text: &str, line: u64) -> Result<Label> {
    text.parse().map_err(|token| DataError::UnknownLabel { line, token })
}

struct Row {
    coil_id: String,
    label: Label,
    record: FeatureRecord,
}

fn parse_csv(text: &str) -> Result<Vec<Row>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| DataError::Schema {
        line: 1,
        detail: e.to_string(),
    })?;
    let header: Vec<&str> = headers.iter().map(str::trim).collect();
    if header != HEADER {
        return Err(DataError::Schema {
            line: 1,
            detail: format!("header must be {}", HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| DataError::Schema {
            line: e.position().map_or(0, |p| p.line()),
            detail: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != HEADER.len() {
            return Err(DataError::Schema {
                line,
                detail: format!("expected {} fields, found {}", HEADER.len(), rec.len()),
            });
        }
        let mut values = [0.0; 4];
        for (i, v) in values.iter_mut().enumerate() {
            *v = parse_value(&rec[2 + i], FEATURES[i], line)?;
        }
        rows.push(Row {
            coil_id: rec[0].trim().to_string(),
            label: parse_label(&rec[6], line)?,
            record: FeatureRecord {
                timestamp: parse_timestamp(&rec[1], line)?,
                values,
            },
        });
    }
    Ok(rows)
}

fn parse_jsonl(text: &str) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i as u64 + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let schema = |detail: String| DataError::Schema { line, detail };
        let obj: serde_json::Map<String, Value> =
            serde_json::from_str(raw).map_err(|e| schema(format!("invalid json object: {e}")))?;
        if let Some(extra) = obj.keys().find(|k| !HEADER.contains(&k.as_str())) {
            return Err(schema(format!("unknown field '{extra}'")));
        }
        let get = |key: &str| obj.get(key).ok_or_else(|| schema(format!("missing field '{key}'")));
        let coil_id = match get("coil_id")? {
            Value::String(s) => s.clone(),
            Value::Number(n) => n.to_string(),
            _ => return Err(schema("coil_id must be a string".into())),
        };
        let timestamp = match get("timestamp")? {
            Value::Number(n) => n.as_i64().ok_or_else(|| schema("timestamp must be integer seconds".into()))?,
            Value::String(s) => parse_timestamp(s, line)?,
            _ => return Err(schema("timestamp must be a string or integer".into())),
        };
        let mut values = [0.0; 4];
        for (f, v) in values.iter_mut().enumerate() {
            *v = match get(FEATURES[f])? {
                Value::Number(n) => n.as_f64().unwrap_or(f64::NAN),
                Value::String(s) => parse_value(s, FEATURES[f], line)?,
                _ => return Err(schema(format!("'{}' must be a number", FEATURES[f]))),
            };
            if !v.is_finite() {
                return Err(DataError::NonFinite { line, field: FEATURES[f] });
            }
        }
        let label = match get("label")? {
            Value::String(s) => parse_label(s, line)?,
            other => return Err(DataError::UnknownLabel { line, token: other.to_string() }),
        };
        rows.push(Row {
            coil_id,
            label,
            record: FeatureRecord { timestamp, values },
        });
    }
    Ok(rows)
}

/// Reads a dataset file and groups it per coil, in order of first
/// appearance. Records within a coil are stably sorted by timestamp.
pub fn load_sequences(path: &Path, format: Format) -> Result<Vec<CoilSequence>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let rows = if text.trim().is_empty() {
        Vec::new()
    } else {
        match format {
            Format::Csv => parse_csv(&text)?,
            Format::Jsonl => parse_jsonl(&text)?,
        }
    };
    if rows.is_empty() {
        log::warn!("{} contains no records", path.display());
        return Ok(Vec::new());
    }
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut out: Vec<CoilSequence> = Vec::new();
    for row in rows {
        match index.get(&row.coil_id) {
            Some(&i) => {
                if out[i].label != row.label {
                    return Err(DataError::ConflictingLabel { coil: row.coil_id });
                }
                out[i].records.push(row.record);
            }
            None => {
                index.insert(row.coil_id.clone(), out.len());
                out.push(CoilSequence {
                    coil_id: row.coil_id,
                    label: row.label,
                    records: vec![row.record],
                });
            }
        }
    }
    for seq in &mut out {
        seq.records.sort_by_key(|r| r.timestamp);
    }
    Ok(out)
}

/// Writes sequences in the documented schema with epoch-second timestamps.
/// Floats use the shortest representation that reads back exactly.
pub fn save_sequences(path: &Path, format: Format, sequences: &[CoilSequence]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(HEADER).expect("in-memory write");
            for seq in sequences {
                for r in &seq.records {
                    let mut fields = vec![seq.coil_id.clone(), r.timestamp.to_string()];
                    fields.extend(r.values.iter().map(|v| v.to_string()));
                    fields.push(seq.label.to_string());
                    w.write_record(&fields).expect("in-memory write");
                }
            }
            w.flush().expect("in-memory flush");
        }
        Format::Jsonl => {
            for seq in sequences {
                for r in &seq.records {
                    let mut obj = serde_json::Map::new();
                    obj.insert("coil_id".into(), Value::from(seq.coil_id.clone()));
                    obj.insert("timestamp".into(), Value::from(r.timestamp));
                    for (f, v) in r.values.iter().enumerate() {
                        obj.insert(FEATURES[f].into(), Value::from(*v));
                    }
                    obj.insert("label".into(), Value::from(seq.label.as_str()));
                    serde_json::to_writer(&mut buf, &obj).expect("in-memory write");
                    buf.push(b'\n');
                }
            }
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))?;
    Ok(())
}
