//! Synchronized ECG/SCG records, breathing-state labels and the on-disk
//! formats for records, AO annotations and feature tables.
//!
//! Record CSV layout:
//!
//! ```text
//! fs=1000,label=NB,id=s01_NB
//! 0.012,-0.003
//! 0.015,-0.001
//! ...
//! ```
//!
//! Only `fs` is required in the header. Each data row is `ecg,scg`. Ground
//! truth AO instants live in a sibling `.ann` file holding one sample index
//! per line.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, FeatureVector, FEATURE_NAMES};

/// Breathing state: breathlessness, normal breathing, long/labored breathing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LabelClass {
    SB,
    NB,
    LB,
}

impl LabelClass {
    pub const ALL: [LabelClass; 3] = [LabelClass::SB, LabelClass::NB, LabelClass::LB];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            LabelClass::SB => 0,
            LabelClass::NB => 1,
            LabelClass::LB => 2,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn one_hot(self) -> [f64; 3] {
        let mut v = [0.0; 3];
        v[self.index()] = 1.0;
        v
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LabelClass::SB => "SB",
            LabelClass::NB => "NB",
            LabelClass::LB => "LB",
        }
    }
}

impl fmt::Display for LabelClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "SB" => Ok(LabelClass::SB),
            "NB" => Ok(LabelClass::NB),
            "LB" => Ok(LabelClass::LB),
            other => Err(Error::InvalidArgument(format!(
                "unknown breathing class {other:?} (expected SB, NB or LB)"
            ))),
        }
    }
}

/// ECG and SCG sampled together at `fs` Hz.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalRecord {
    pub record_id: String,
    pub fs: f64,
    pub ecg: Vec<f64>,
    pub scg: Vec<f64>,
    #[serde(default)]
    pub label: Option<LabelClass>,
    #[serde(default)]
    pub ao_truth: Option<Vec<usize>>,
}

impl SignalRecord {
    pub fn new(
        record_id: impl Into<String>,
        fs: f64,
        ecg: Vec<f64>,
        scg: Vec<f64>,
        label: Option<LabelClass>,
        ao_truth: Option<Vec<usize>>,
    ) -> Result<Self> {
        let record = SignalRecord {
            record_id: record_id.into(),
            fs,
            ecg,
            scg,
            label,
            ao_truth,
        };
        record.validate()?;
        Ok(record)
    }

    /// Checks every record invariant; never repairs anything.
    pub fn validate(&self) -> Result<()> {
        if !(self.fs.is_finite() && self.fs > 0.0) {
            return Err(Error::Validation(format!(
                "sampling frequency must be positive, got {}",
                self.fs
            )));
        }
        if self.ecg.len() != self.scg.len() {
            return Err(Error::Validation(format!(
                "ecg has {} samples but scg has {}",
                self.ecg.len(),
                self.scg.len()
            )));
        }
        let min_len = (2.0 * self.fs).ceil() as usize;
        if self.ecg.len() < min_len {
            return Err(Error::Validation(format!(
                "record has {} samples, need at least {} (2 s at {} Hz)",
                self.ecg.len(),
                min_len,
                self.fs
            )));
        }
        for (name, channel) in [("ecg", &self.ecg), ("scg", &self.scg)] {
            if let Some(i) = channel.iter().position(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "{name} sample {i} is not finite"
                )));
            }
        }
        if let Some(ao) = &self.ao_truth {
            if let Some(&bad) = ao.iter().find(|&&i| i >= self.ecg.len()) {
                return Err(Error::Validation(format!(
                    "annotation {bad} is outside the record (length {})",
                    self.ecg.len()
                )));
            }
            if ao.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Validation(
                    "annotations must be strictly increasing".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ecg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ecg.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.fs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordFormat {
    Csv,
    Json,
}

impl RecordFormat {
    /// Guesses the format from the file extension (`.json` or anything else as CSV).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => RecordFormat::Json,
            _ => RecordFormat::Csv,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            RecordFormat::Csv => "csv",
            RecordFormat::Json => "json",
        }
    }
}

impl FromStr for RecordFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(RecordFormat::Csv),
            "json" => Ok(RecordFormat::Json),
            other => Err(Error::InvalidArgument(format!("unknown record format {other:?}"))),
        }
    }
}

/// Path of the annotation file that accompanies a CSV record.
pub fn annotation_path(record_path: &Path) -> PathBuf {
    record_path.with_extension("ann")
}

pub fn load_record(path: &Path, format: RecordFormat) -> Result<SignalRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let record = match format {
        RecordFormat::Json => {
            let mut record: SignalRecord =
                serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
            if record.record_id.is_empty() {
                record.record_id = stem(path);
            }
            record
        }
        RecordFormat::Csv => {
            let mut record = parse_record_csv(&text, path)?;
            let ann = annotation_path(path);
            if ann.exists() {
                record.ao_truth = Some(load_annotations(&ann)?);
            }
            record
        }
    };
    record.validate()?;
    Ok(record)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("record")
        .to_string()
}

fn parse_record_csv(text: &str, path: &Path) -> Result<SignalRecord> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, "empty file"))?;

    let mut fs_hz = None;
    let mut label = None;
    let mut record_id = stem(path);
    for field in header.split(',') {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| Error::parse(path, format!("malformed header field {field:?}")))?;
        match key.trim() {
            "fs" => {
                fs_hz = Some(value.trim().parse::<f64>().map_err(|e| {
                    Error::parse(path, format!("bad sampling frequency {value:?}: {e}"))
                })?)
            }
            "label" => {
                label = Some(
                    value
                        .parse::<LabelClass>()
                        .map_err(|e| Error::parse(path, e.to_string()))?,
                )
            }
            "id" => record_id = value.trim().to_string(),
            other => return Err(Error::parse(path, format!("unknown header key {other:?}"))),
        }
    }
    let fs_hz = fs_hz.ok_or_else(|| Error::parse(path, "header is missing fs=<Hz>"))?;

    let mut ecg = Vec::new();
    let mut scg = Vec::new();
    for (lineno, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let mut next = |name: &str| -> Result<Option<f64>> {
            match cols.next().map(str::trim) {
                None | Some("") => Ok(None),
                Some(v) => v.parse::<f64>().map(Some).map_err(|e| {
                    Error::parse(path, format!("line {}: bad {name} value {v:?}: {e}", lineno + 1))
                }),
            }
        };
        let e = next("ecg")?;
        let s = next("scg")?;
        if cols.next().is_some() {
            return Err(Error::parse(
                path,
                format!("line {}: expected 2 columns", lineno + 1),
            ));
        }
        // A missing cell shortens that channel; validation reports the mismatch.
        if let Some(e) = e {
            ecg.push(e);
        }
        if let Some(s) = s {
            scg.push(s);
        }
    }

    Ok(SignalRecord {
        record_id,
        fs: fs_hz,
        ecg,
        scg,
        label,
        ao_truth: None,
    })
}

pub fn load_annotations(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<usize>().map_err(|e| {
                Error::parse(path, format!("line {}: bad sample index {l:?}: {e}", i + 1))
            })
        })
        .collect()
}

pub fn save_annotations(indices: &[usize], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(indices.len() * 8);
    for i in indices {
        out.push_str(&i.to_string());
        out.push('\n');
    }
    write_file(path, &out)
}

/// Writes a record; CSV records get a sibling `.ann` file when ground truth is present.
pub fn save_record(record: &SignalRecord, path: &Path, format: RecordFormat) -> Result<()> {
    match format {
        RecordFormat::Json => {
            let text =
                serde_json::to_string(record).map_err(|e| Error::parse(path, e.to_string()))?;
            write_file(path, &text)
        }
        RecordFormat::Csv => {
            let mut out = String::with_capacity(record.len() * 24);
            out.push_str(&format!("fs={}", record.fs));
            if let Some(label) = record.label {
                out.push_str(&format!(",label={label}"));
            }
            out.push_str(&format!(",id={}\n", record.record_id));
            for (e, s) in record.ecg.iter().zip(&record.scg) {
                out.push_str(&format!("{e},{s}\n"));
            }
            write_file(path, &out)?;
            if let Some(ao) = &record.ao_truth {
                save_annotations(ao, &annotation_path(path))?;
            }
            Ok(())
        }
    }
}

/// Writes `contents`, creating parent directories as needed.
pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Header of the feature CSV: provenance, the 15 features in canonical order, label.
pub fn feature_csv_header() -> String {
    let mut cols = vec!["record_id".to_string()];
    cols.extend(FEATURE_NAMES.iter().map(|n| format!("f_{n}")));
    cols.push("label".into());
    cols.join(",")
}

pub fn save_features(matrix: &FeatureMatrix, path: &Path) -> Result<()> {
    if matrix.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    let mut out = feature_csv_header();
    out.push('\n');
    for ((row, label), id) in matrix.rows.iter().zip(&matrix.labels).zip(&matrix.record_ids) {
        out.push_str(id);
        for v in row.to_array() {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push(',');
        if let Some(label) = label {
            out.push_str(label.as_str());
        }
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn load_features(path: &Path) -> Result<FeatureMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::parse(path, "empty file"))?;
    if header.trim() != feature_csv_header() {
        return Err(Error::parse(
            path,
            format!("unexpected header; expected {:?}", feature_csv_header()),
        ));
    }
    let mut matrix = FeatureMatrix::default();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != FEATURE_NAMES.len() + 2 {
            return Err(Error::parse(
                path,
                format!("line {}: expected {} columns, got {}", i + 2, FEATURE_NAMES.len() + 2, cells.len()),
            ));
        }
        let mut values = [0.0; 15];
        for (slot, cell) in values.iter_mut().zip(&cells[1..16]) {
            *slot = cell.trim().parse::<f64>().map_err(|e| {
                Error::parse(path, format!("line {}: bad value {cell:?}: {e}", i + 2))
            })?;
        }
        let label = match cells[16].trim() {
            "" => None,
            l => Some(l.parse::<LabelClass>().map_err(|e| Error::parse(path, e.to_string()))?),
        };
        matrix.push(cells[0].to_string(), FeatureVector::from_array(values), label);
    }
    if matrix.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    matrix.validate()?;
    Ok(matrix)
}
