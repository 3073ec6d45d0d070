//! CSV series files: a header row, then one row per time step whose first
//! column is an ISO-8601 timestamp or an integer step index.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use scalenas_core::{Error, RawSeries};

use crate::error::{CliError, Result};

const NAIVE_FORMATS: [&str; 4] = ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"];

/// A parsed series with its column names.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSeries {
    pub series: RawSeries,
    pub names: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stamp {
    Step(i64),
    Clock(i64),
}

fn parse_stamp(s: &str) -> Option<Stamp> {
    let s = s.trim();
    if let Ok(i) = s.parse::<i64>() {
        return Some(Stamp::Step(i));
    }
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(Stamp::Clock(t.timestamp()));
    }
    for f in NAIVE_FORMATS {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, f) {
            return Some(Stamp::Clock(t.and_utc().timestamp()));
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|t| Stamp::Clock(t.and_utc().timestamp()))
}

/// Formats a stamp the way [`write_csv`] does.
pub fn format_stamp(t: i64, clock: bool) -> String {
    if clock {
        match DateTime::from_timestamp(t, 0) {
            Some(d) => d.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
            None => t.to_string(),
        }
    } else {
        t.to_string()
    }
}

/// Reads a series file, requiring at least `min_rows` data rows.
pub fn load_csv(path: &Path, min_rows: usize) -> Result<LoadedSeries> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    read_csv(file, path, min_rows)
}

/// Like [`load_csv`] over any reader; `path` is used in messages only.
pub fn read_csv<R: Read>(reader: R, path: &Path, min_rows: usize) -> Result<LoadedSeries> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let csv_err = |e: csv::Error| {
        let line = e.position().map(|p| p.line() as usize);
        CliError::parse(path, line, e.to_string())
    };
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.len() < 2 {
        return Err(CliError::parse(
            path,
            Some(1),
            "header needs a time column and at least one variable",
        ));
    }
    let names: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let n = names.len();
    let mut stamps = Vec::new();
    let mut values = Vec::new();
    let mut clock = None;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = row + 2;
        let raw = &rec[0];
        let stamp =
            parse_stamp(raw).ok_or_else(|| CliError::parse(path, Some(line), format!("unreadable timestamp `{raw}`")))?;
        let (t, is_clock) = match stamp {
            Stamp::Step(t) => (t, false),
            Stamp::Clock(t) => (t, true),
        };
        if *clock.get_or_insert(is_clock) != is_clock {
            return Err(CliError::parse(
                path,
                Some(line),
                "time column mixes clock timestamps and step indices",
            ));
        }
        stamps.push(t);
        for (cell, name) in rec.iter().skip(1).zip(&names) {
            let v = cell.trim().parse::<f64>().map_err(|_| {
                CliError::parse(path, Some(line), format!("column `{name}`: non-numeric value `{cell}`"))
            })?;
            values.push(v);
        }
    }
    if stamps.len() < min_rows.max(1) {
        return Err(CliError::Core(Error::Data(format!(
            "{}: {} data rows, at least {} needed",
            path.display(),
            stamps.len(),
            min_rows.max(1)
        ))));
    }
    let clock = clock.unwrap_or(false);
    let series = RawSeries::new(stamps, clock, None, values, n).map_err(|e| match e {
        Error::TimestampGap { row, expected, found } => CliError::parse(
            path,
            Some(row + 2),
            format!(
                "timestamp gap: expected {}, found {}",
                format_stamp(expected, clock),
                format_stamp(found, clock)
            ),
        ),
        Error::DuplicateTimestamp { row } => {
            CliError::parse(path, Some(row + 2), "duplicate or decreasing timestamp")
        }
        Error::NonFiniteValue { row, col } => CliError::parse(
            path,
            Some(row + 2),
            format!("column `{}`: non-finite value", names[col]),
        ),
        other => CliError::Core(other),
    })?;
    Ok(LoadedSeries { series, names })
}

/// Writes a series in the format [`load_csv`] reads. Values use the
/// shortest representation that parses back exactly.
pub fn write_csv<W: Write>(out: W, series: &RawSeries, names: &[String]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["timestamp".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    let n = series.n_vars();
    for (row, t) in series.timestamps().iter().enumerate() {
        let mut rec = Vec::with_capacity(n + 1);
        rec.push(format_stamp(*t, series.has_clock()));
        rec.extend((0..n).map(|j| series.value(row, j).to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Default column names `v0, v1, ...`.
pub fn default_names(n: usize) -> Vec<String> {
    (0..n).map(|j| format!("v{j}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(s: &str, min: usize) -> Result<LoadedSeries> {
        read_csv(s.as_bytes(), Path::new("t.csv"), min)
    }

    #[test]
    fn stamps() {
        assert_eq!(parse_stamp("7"), Some(Stamp::Step(7)));
        assert_eq!(parse_stamp("1970-01-01T00:05:00Z"), Some(Stamp::Clock(300)));
        assert_eq!(parse_stamp("1970-01-01 00:05:00"), Some(Stamp::Clock(300)));
        assert_eq!(parse_stamp("1970-01-02"), Some(Stamp::Clock(86_400)));
        assert_eq!(parse_stamp("yesterday"), None);
    }

    #[test]
    fn step_index_has_no_clock() {
        let s = read("t,a\n0,1\n1,2\n", 1).unwrap();
        assert!(!s.series.has_clock());
        assert_eq!(s.series.interval(), 1);
    }

    #[test]
    fn mixed_time_column_rejected() {
        let e = read("t,a\n0,1\n1970-01-01T00:00:00Z,2\n", 1).unwrap_err();
        assert!(e.to_string().contains(":3:"), "{e}");
    }

    #[test]
    fn ragged_row_rejected() {
        assert_eq!(read("t,a,b\n0,1,2\n1,2\n", 1).unwrap_err().kind(), "parse");
    }
}
