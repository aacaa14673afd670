//! CSV schemas for the data pipelines and for emitted sets.
//!
//! Input files need a header row. Wind rows are
//! `timestamp,theta1,r1,theta2,r2` (radians, m/s); simplex rows are
//! `p1,p2,p3,label,x1,...,xk`. Set files have one row per candidate,
//! `c1,...,cD,in_set`, with flags written as `0`/`1`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use csv::{ReaderBuilder, StringRecord, WriterBuilder};
use serde::{Deserialize, Serialize};

use crate::conformal::{PredictionSet, SetMember};
use crate::error::{Error, Result};
use crate::geometry::{ManifoldPoint, MEMBERSHIP_TOL};

/// Allowed drift of a probability row from the simplex.
pub const SIMPLEX_INPUT_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindRecord {
    pub timestamp: String,
    pub theta1: f64,
    pub r1: f64,
    pub theta2: f64,
    pub r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplexRecord {
    pub probabilities: [f64; 3],
    pub label: String,
    pub features: Vec<f64>,
}

fn line_of(record: &StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

fn parse_error(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn field(record: &StringRecord, i: usize, name: &str) -> Result<f64> {
    let raw = record.get(i).unwrap_or("").trim();
    let v: f64 = raw.parse().map_err(|_| {
        parse_error(
            line_of(record),
            format!("field `{name}` is not a number: {raw:?}"),
        )
    })?;
    if !v.is_finite() {
        return Err(parse_error(
            line_of(record),
            format!("field `{name}` is not finite"),
        ));
    }
    Ok(v)
}

fn headers<R: Read>(reader: &mut csv::Reader<R>, what: &str) -> Result<Vec<String>> {
    let h = reader.headers()?;
    if h.is_empty() || h.iter().all(|c| c.trim().is_empty()) {
        return Err(Error::EmptyInput(format!("{what} file has no header")));
    }
    Ok(h.iter().map(|c| c.trim().to_string()).collect())
}

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(input)
}

pub fn read_wind<R: Read>(input: R) -> Result<Vec<WindRecord>> {
    let mut reader = csv_reader(input);
    let expected = ["timestamp", "theta1", "r1", "theta2", "r2"];
    let h = headers(&mut reader, "wind")?;
    if h != expected {
        return Err(parse_error(
            1,
            format!(
                "expected header {}, got {}",
                expected.join(","),
                h.join(",")
            ),
        ));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let row = WindRecord {
            timestamp: record.get(0).unwrap_or("").trim().to_string(),
            theta1: field(&record, 1, "theta1")?,
            r1: field(&record, 2, "r1")?,
            theta2: field(&record, 3, "theta2")?,
            r2: field(&record, 4, "r2")?,
        };
        if row.r1 < 0.0 || row.r2 < 0.0 {
            return Err(parse_error(line_of(&record), "wind speed is negative"));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("wind file has no data rows".into()));
    }
    Ok(rows)
}

pub fn read_wind_file(path: &Path) -> Result<Vec<WindRecord>> {
    read_wind(File::open(path)?)
}

/// Reads class-probability rows. Rows within [`SIMPLEX_INPUT_TOL`] of Δ²
/// but outside the membership tolerance are clipped and renormalized;
/// rows further away are rejected.
pub fn read_simplex<R: Read>(input: R) -> Result<Vec<SimplexRecord>> {
    let mut reader = csv_reader(input);
    let h = headers(&mut reader, "simplex")?;
    let k = h.len().saturating_sub(4);
    let ok = h.len() > 4
        && h[..4] == ["p1", "p2", "p3", "label"]
        && h[4..]
            .iter()
            .enumerate()
            .all(|(i, c)| *c == format!("x{}", i + 1));
    if !ok {
        return Err(parse_error(
            1,
            format!(
                "expected header p1,p2,p3,label,x1,...,xk, got {}",
                h.join(",")
            ),
        ));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = line_of(&record);
        let p = [
            field(&record, 0, "p1")?,
            field(&record, 1, "p2")?,
            field(&record, 2, "p3")?,
        ];
        let sum: f64 = p.iter().sum();
        if p.iter().any(|&v| v < -SIMPLEX_INPUT_TOL) || (sum - 1.0).abs() > SIMPLEX_INPUT_TOL {
            return Err(parse_error(
                line,
                format!("probabilities {p:?} are off the simplex"),
            ));
        }
        let probabilities = if p.iter().all(|&v| v >= 0.0) && (sum - 1.0).abs() <= MEMBERSHIP_TOL {
            p
        } else {
            let clipped = p.map(|v| v.max(0.0));
            let total: f64 = clipped.iter().sum();
            clipped.map(|v| v / total)
        };
        let label = record.get(3).unwrap_or("").trim().to_string();
        if label.is_empty() {
            return Err(parse_error(line, "empty label"));
        }
        let features = (0..k)
            .map(|i| field(&record, 4 + i, &h[4 + i]))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(SimplexRecord {
            probabilities,
            label,
            features,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("simplex file has no data rows".into()));
    }
    Ok(rows)
}

pub fn read_simplex_file(path: &Path) -> Result<Vec<SimplexRecord>> {
    read_simplex(File::open(path)?)
}

pub fn write_wind<W: Write>(out: W, rows: &[WindRecord]) -> Result<()> {
    let mut w = WriterBuilder::new().from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_simplex<W: Write>(out: W, rows: &[SimplexRecord]) -> Result<()> {
    let k = rows.first().map_or(0, |r| r.features.len());
    let mut w = WriterBuilder::new().from_writer(out);
    let mut header: Vec<String> = ["p1", "p2", "p3", "label"].map(String::from).to_vec();
    header.extend((1..=k).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for row in rows {
        if row.features.len() != k {
            return Err(Error::LengthMismatch {
                left: k,
                right: row.features.len(),
            });
        }
        let mut rec: Vec<String> = row.probabilities.iter().map(f64::to_string).collect();
        rec.push(row.label.clone());
        rec.extend(row.features.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes candidates and flags. Coordinates use the shortest decimal form
/// that parses back to the same `f64`.
pub fn write_members<W: Write>(out: W, members: &[SetMember]) -> Result<()> {
    let d = members.first().map_or(0, |m| m.point.dim());
    let mut w = WriterBuilder::new().from_writer(out);
    let mut header: Vec<String> = (1..=d).map(|i| format!("c{i}")).collect();
    header.push("in_set".into());
    w.write_record(&header)?;
    for m in members {
        if m.point.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: m.point.dim(),
            });
        }
        let mut rec: Vec<String> = m.point.coords().iter().map(f64::to_string).collect();
        rec.push(if m.in_set { "1" } else { "0" }.into());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_set<W: Write>(out: W, set: &PredictionSet) -> Result<()> {
    write_members(out, &set.members)
}

pub fn read_members<R: Read>(input: R) -> Result<Vec<SetMember>> {
    let mut reader = csv_reader(input);
    let h = headers(&mut reader, "set")?;
    let d = h.len().saturating_sub(1);
    let ok = h.len() >= 2
        && h[d] == "in_set"
        && h[..d]
            .iter()
            .enumerate()
            .all(|(i, c)| *c == format!("c{}", i + 1));
    if !ok {
        return Err(parse_error(
            1,
            format!("expected header c1,...,cD,in_set, got {}", h.join(",")),
        ));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let coords = (0..d)
            .map(|i| field(&record, i, &h[i]))
            .collect::<Result<Vec<f64>>>()?;
        let in_set = match record.get(d).map(str::trim) {
            Some("1") => true,
            Some("0") => false,
            other => {
                return Err(parse_error(
                    line_of(&record),
                    format!("bad in_set flag {other:?}"),
                ))
            }
        };
        out.push(SetMember {
            point: ManifoldPoint::new(coords),
            in_set,
        });
    }
    Ok(out)
}

pub fn write_file_with<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let mut w = BufWriter::new(File::create(path)?);
    body(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file_with(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}
