//! Geo-tagged text records: parsing, labeling and train/test splitting.
//!
//! Two line-oriented formats are read and written:
//!
//! * TSV: `id \t latitude \t longitude \t text [\t label]`, UTF-8, no quoting.
//!   A first row whose coordinate columns do not parse is taken as a header.
//! * JSONL: one object per line with `id`, `latitude`, `longitude`, `text`
//!   and an optional `label`.
//!
//! Text is stored verbatim. Invalid rows are skipped and recorded in a
//! [`RejectionReport`] rather than dropped silently.

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh64::xxh64;

use crate::cellgeo::LatLon;
use crate::labelcodec::LabelString;
use crate::partition::AdaptivePartition;

/// Rejections kept verbatim in a report; further ones are only counted.
const MAX_LISTED_REJECTIONS: usize = 1000;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("unknown record format {0:?} (expected tsv or jsonl)")]
    UnknownFormat(String),
    #[error("record {id:?}: text cannot be written as TSV (contains a tab or newline)")]
    UnrepresentableTsv { id: String },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RecordFormat {
    Tsv,
    Jsonl,
}

impl RecordFormat {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "tsv" | "tab" | "txt" => Some(Self::Tsv),
            "jsonl" | "ndjson" | "json" => Some(Self::Jsonl),
            _ => None,
        }
    }
}

impl FromStr for RecordFormat {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tsv" => Ok(Self::Tsv),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(DatasetError::UnknownFormat(other.to_owned())),
        }
    }
}

impl fmt::Display for RecordFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Tsv => "tsv",
            Self::Jsonl => "jsonl",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub latitude: f64,
    pub longitude: f64,
    pub text: String,
}

impl RawRecord {
    pub fn loc(&self) -> LatLon {
        LatLon::new(self.latitude, self.longitude).expect("validated at parse time")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRecord {
    #[serde(flatten)]
    pub record: RawRecord,
    pub label: LabelString,
}

/// A parsed row; `label` is present for labeled inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceRecord {
    pub record: RawRecord,
    pub label: Option<LabelString>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    WrongFieldCount { expected: &'static str, found: usize },
    EmptyId,
    InvalidLatitude(String),
    InvalidLongitude(String),
    LatitudeOutOfRange,
    LongitudeOutOfRange,
    EmptyText,
    InvalidLabel(String),
    MalformedJson(String),
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::WrongFieldCount { expected, found } => {
                write!(f, "wrong field count (expected {expected}, found {found})")
            }
            Self::EmptyId => f.write_str("empty id"),
            Self::InvalidLatitude(s) => write!(f, "invalid latitude {s:?}"),
            Self::InvalidLongitude(s) => write!(f, "invalid longitude {s:?}"),
            Self::LatitudeOutOfRange => f.write_str("latitude out of range"),
            Self::LongitudeOutOfRange => f.write_str("longitude out of range"),
            Self::EmptyText => f.write_str("empty text"),
            Self::InvalidLabel(e) => write!(f, "invalid label: {e}"),
            Self::MalformedJson(e) => write!(f, "malformed json: {e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    /// 1-based line number.
    pub line: usize,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RejectionReport {
    pub accepted: u64,
    pub rejected: u64,
    /// The first rejections, up to a fixed cap.
    pub listed: Vec<Rejection>,
}

impl RejectionReport {
    fn reject(&mut self, line: usize, reason: RejectReason) {
        self.rejected += 1;
        if self.listed.len() < MAX_LISTED_REJECTIONS {
            self.listed.push(Rejection { line, reason });
        }
    }
}

impl fmt::Display for RejectionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "accepted {} records, rejected {}", self.accepted, self.rejected)?;
        for r in &self.listed {
            writeln!(f, "  line {}: {}", r.line, r.reason)?;
        }
        if self.rejected as usize > self.listed.len() {
            writeln!(f, "  ... {} more", self.rejected as usize - self.listed.len())?;
        }
        Ok(())
    }
}

/// Streaming record parser. Valid rows are yielded in file order; rejected
/// rows are collected in [`RecordReader::report`].
pub struct RecordReader<R> {
    lines: io::Lines<R>,
    format: RecordFormat,
    source: String,
    line_no: usize,
    seen_row: bool,
    report: RejectionReport,
}

impl<R: BufRead> RecordReader<R> {
    pub fn new(reader: R, format: RecordFormat, source: impl Into<String>) -> Self {
        Self {
            lines: reader.lines(),
            format,
            source: source.into(),
            line_no: 0,
            seen_row: false,
            report: RejectionReport::default(),
        }
    }

    pub fn report(&self) -> &RejectionReport {
        &self.report
    }

    pub fn into_report(self) -> RejectionReport {
        self.report
    }

    fn parse_line(&mut self, line: &str) -> Option<Result<SourceRecord, RejectReason>> {
        let first = !self.seen_row;
        self.seen_row = true;
        match self.format {
            RecordFormat::Tsv => parse_tsv(line, first),
            RecordFormat::Jsonl => Some(parse_jsonl(line)),
        }
    }
}

impl<R: BufRead> Iterator for RecordReader<R> {
    type Item = Result<SourceRecord, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(source) => return Some(Err(DatasetError::Io { path: self.source.clone(), source })),
            };
            self.line_no += 1;
            let line = line.strip_suffix('\r').unwrap_or(&line);
            if line.trim().is_empty() {
                continue;
            }
            match self.parse_line(line) {
                None => continue,
                Some(Ok(rec)) => {
                    self.report.accepted += 1;
                    return Some(Ok(rec));
                }
                Some(Err(reason)) => self.report.reject(self.line_no, reason),
            }
        }
    }
}

/// Opens `path` for streaming parsing.
pub fn parse_records(path: impl AsRef<Path>, format: RecordFormat) -> Result<RecordReader<BufReader<File>>, DatasetError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
    Ok(RecordReader::new(BufReader::new(file), format, path.display().to_string()))
}

/// `None` means the row is a header.
fn parse_tsv(line: &str, first_row: bool) -> Option<Result<SourceRecord, RejectReason>> {
    let fields: Vec<&str> = line.split('\t').collect();
    if first_row && fields.len() >= 3 {
        let numeric = |s: &str| s.trim().parse::<f64>().is_ok();
        if !numeric(fields[1]) || !numeric(fields[2]) {
            return None;
        }
    }
    if fields.len() != 4 && fields.len() != 5 {
        return Some(Err(RejectReason::WrongFieldCount { expected: "4 or 5", found: fields.len() }));
    }
    let lat = fields[1].trim();
    let lon = fields[2].trim();
    let latitude = match lat.parse::<f64>() {
        Ok(v) => v,
        Err(_) => return Some(Err(RejectReason::InvalidLatitude(lat.to_owned()))),
    };
    let longitude = match lon.parse::<f64>() {
        Ok(v) => v,
        Err(_) => return Some(Err(RejectReason::InvalidLongitude(lon.to_owned()))),
    };
    let record = RawRecord {
        id: fields[0].to_owned(),
        latitude,
        longitude,
        text: fields[3].to_owned(),
    };
    let label = fields.get(4).map(|s| s.trim());
    Some(check_record(record, label))
}

#[derive(Deserialize)]
struct JsonRecord {
    id: serde_json::Value,
    #[serde(alias = "lat")]
    latitude: f64,
    #[serde(alias = "lon", alias = "lng")]
    longitude: f64,
    text: String,
    #[serde(default)]
    label: Option<String>,
}

fn parse_jsonl(line: &str) -> Result<SourceRecord, RejectReason> {
    let raw: JsonRecord = serde_json::from_str(line).map_err(|e| RejectReason::MalformedJson(e.to_string()))?;
    let id = match raw.id {
        serde_json::Value::String(s) => s,
        serde_json::Value::Number(n) => n.to_string(),
        other => return Err(RejectReason::MalformedJson(format!("id must be a string or number, got {other}"))),
    };
    let record = RawRecord { id, latitude: raw.latitude, longitude: raw.longitude, text: raw.text };
    check_record(record, raw.label.as_deref())
}

fn check_record(record: RawRecord, label: Option<&str>) -> Result<SourceRecord, RejectReason> {
    if record.id.trim().is_empty() {
        return Err(RejectReason::EmptyId);
    }
    if !(-90.0..=90.0).contains(&record.latitude) {
        return Err(RejectReason::LatitudeOutOfRange);
    }
    if !(-180.0..=180.0).contains(&record.longitude) {
        return Err(RejectReason::LongitudeOutOfRange);
    }
    if record.text.trim().is_empty() {
        return Err(RejectReason::EmptyText);
    }
    let label = match label {
        Some(s) => Some(LabelString::parse(s).map_err(|e| RejectReason::InvalidLabel(e.to_string()))?),
        None => None,
    };
    Ok(SourceRecord { record, label })
}

/// Writes one record line, including the trailing newline.
pub fn write_record<W: Write>(
    out: &mut W,
    record: &RawRecord,
    label: Option<&LabelString>,
    format: RecordFormat,
) -> Result<(), RecordWriteError> {
    match format {
        RecordFormat::Tsv => {
            if record.text.contains(['\t', '\n', '\r']) || record.id.contains(['\t', '\n', '\r']) {
                return Err(RecordWriteError::Dataset(DatasetError::UnrepresentableTsv { id: record.id.clone() }));
            }
            write!(out, "{}\t{}\t{}\t{}", record.id, record.latitude, record.longitude, record.text)?;
            if let Some(l) = label {
                write!(out, "\t{l}")?;
            }
            writeln!(out)?;
        }
        RecordFormat::Jsonl => {
            match label {
                Some(l) => serde_json::to_writer(
                    &mut *out,
                    &LabeledRecord { record: record.clone(), label: l.clone() },
                ),
                None => serde_json::to_writer(&mut *out, record),
            }
            .map_err(io::Error::from)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum RecordWriteError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("write failed: {0}")]
    Io(#[from] io::Error),
}

/// Attaches the containing leaf's label to each record.
pub fn label_records<'a, I>(records: I, partition: &'a AdaptivePartition) -> impl Iterator<Item = LabeledRecord> + 'a
where
    I: IntoIterator<Item = RawRecord>,
    I::IntoIter: 'a,
{
    records.into_iter().map(move |record| {
        let label = LabelString::from(partition.leaf_for(record.loc()));
        LabeledRecord { record, label }
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    train_fraction: f64,
    seed: u64,
}

impl SplitSpec {
    pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

    pub fn new(train_fraction: f64, seed: u64) -> Result<Self, DatasetError> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(DatasetError::InvalidSplit(format!(
                "train_fraction {train_fraction} must lie strictly between 0 and 1"
            )));
        }
        Ok(Self { train_fraction, seed })
    }

    pub fn train_fraction(&self) -> f64 {
        self.train_fraction
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Side of the split for a record id: XXH64 of the id bytes seeded with
    /// `seed`, mapped to `[0, 1)` from its top 53 bits.
    pub fn assign(&self, id: &str) -> SplitSide {
        let h = xxh64(id.as_bytes(), self.seed);
        let unit = (h >> 11) as f64 / (1u64 << 53) as f64;
        if unit < self.train_fraction {
            SplitSide::Train
        } else {
            SplitSide::Test
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitSide {
    Train,
    Test,
}

/// Splits records by id hash; each side keeps input order.
pub fn split<T, I>(records: I, spec: &SplitSpec, id_of: impl Fn(&T) -> &str) -> (Vec<T>, Vec<T>)
where
    I: IntoIterator<Item = T>,
{
    records.into_iter().partition(|r| spec.assign(id_of(r)) == SplitSide::Train)
}
