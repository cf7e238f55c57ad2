//! ECG record loading, labels and the manifest that lists a study's records.
//!
//! Two sample formats are accepted:
//!
//! * `text`: one ASCII decimal sample per line (blank lines ignored).
//! * `i16le`: headerless 16-bit signed little-endian samples. A manifest may
//!   attach a gain and baseline; physical value = (raw - baseline) / gain.
//!
//! Manifest rows are comma separated: `path,id,label[,format[,gain[,baseline]]]`.
//! Lines starting with `#` are comments, an optional `path,id,label,...`
//! header row is skipped, and a row `@trim_prefix_hpt,<n>` overrides the
//! number of leading samples dropped from every HPT record (default 20000).
//! Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Leading samples excluded from each HPT record because they hold a
/// distorted signal.
pub const DEFAULT_TRIM_PREFIX_HPT: usize = 20_000;

/// Binary class label. HPT is the positive class and has the lower ordinal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClassLabel {
    #[serde(rename = "HPT")]
    Hpt,
    #[serde(rename = "Normal")]
    Normal,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 2] = [ClassLabel::Hpt, ClassLabel::Normal];

    pub fn index(self) -> usize {
        match self {
            ClassLabel::Hpt => 0,
            ClassLabel::Normal => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(ClassLabel::Hpt),
            1 => Some(ClassLabel::Normal),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Hpt => "HPT",
            ClassLabel::Normal => "Normal",
        }
    }

    pub fn other(self) -> Self {
        match self {
            ClassLabel::Hpt => ClassLabel::Normal,
            ClassLabel::Normal => ClassLabel::Hpt,
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    /// Case-insensitive.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("hpt") {
            Ok(ClassLabel::Hpt)
        } else if t.eq_ignore_ascii_case("normal") {
            Ok(ClassLabel::Normal)
        } else {
            Err(Error::Input(format!("unknown label {t:?} (expected HPT or Normal)")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMetadata {
    pub sample_rate_hz: u32,
    pub resolution_bits: u32,
    pub source: String,
}

impl Default for RecordMetadata {
    fn default() -> Self {
        Self {
            sample_rate_hz: 128,
            resolution_bits: 8,
            source: String::new(),
        }
    }
}

/// One subject's single-channel ECG.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub id: String,
    pub label: ClassLabel,
    pub samples: Vec<f64>,
    pub meta: RecordMetadata,
}

impl EcgRecord {
    pub fn new(id: impl Into<String>, label: ClassLabel, samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Input("empty record".into()));
        }
        Ok(Self {
            id: id.into(),
            label,
            samples,
            meta: RecordMetadata::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SampleFormat {
    Text,
    I16le { gain: f64, baseline: f64 },
}

impl SampleFormat {
    pub const RAW_I16: SampleFormat = SampleFormat::I16le {
        gain: 1.0,
        baseline: 0.0,
    };

    /// `.bin`/`.dat`/`.raw` are binary; everything else is text.
    pub fn infer(path: &Path) -> Self {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("bin" | "dat" | "raw") => SampleFormat::RAW_I16,
            _ => SampleFormat::Text,
        }
    }
}

/// Reads a record in file order. Text samples are taken verbatim; binary
/// samples only get the manifest's gain/baseline (identity by default).
pub fn load_record(
    path: &Path,
    id: &str,
    label: ClassLabel,
    format: SampleFormat,
) -> Result<EcgRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let samples = match format {
        SampleFormat::Text => parse_text_samples(path, &bytes)?,
        SampleFormat::I16le { gain, baseline } => parse_i16_samples(path, &bytes, gain, baseline)?,
    };
    if samples.is_empty() {
        return Err(Error::data(path, "1", "empty record"));
    }
    Ok(EcgRecord {
        id: id.to_string(),
        label,
        samples,
        meta: RecordMetadata {
            source: path.display().to_string(),
            ..RecordMetadata::default()
        },
    })
}

fn parse_text_samples(path: &Path, bytes: &[u8]) -> Result<Vec<f64>> {
    let text = std::str::from_utf8(bytes).map_err(|e| {
        Error::data(path, format!("byte {}", e.valid_up_to()), "file is not valid UTF-8 text")
    })?;
    let mut out = Vec::with_capacity(text.len() / 4);
    for (lineno, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v: f64 = t.parse().map_err(|_| {
            Error::data(path, format!("line {}", lineno + 1), format!("malformed sample {t:?}"))
        })?;
        if !v.is_finite() {
            return Err(Error::data(
                path,
                format!("line {}", lineno + 1),
                format!("non-finite sample {t:?}"),
            ));
        }
        out.push(v);
    }
    Ok(out)
}

fn parse_i16_samples(path: &Path, bytes: &[u8], gain: f64, baseline: f64) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(2) {
        return Err(Error::data(
            path,
            format!("byte {}", bytes.len() - 1),
            "truncated 16-bit sample (odd byte count)",
        ));
    }
    if !(gain.is_finite() && gain != 0.0 && baseline.is_finite()) {
        return Err(Error::Config(format!(
            "{}: gain must be finite and non-zero, baseline finite",
            path.display()
        )));
    }
    let identity = gain == 1.0 && baseline == 0.0;
    Ok(bytes
        .chunks_exact(2)
        .map(|c| {
            let raw = f64::from(i16::from_le_bytes([c[0], c[1]]));
            if identity {
                raw
            } else {
                (raw - baseline) / gain
            }
        })
        .collect())
}

/// Drops the first `n` samples. `n` may equal the length; the empty result
/// is rejected later by segmentation yielding nothing.
pub fn trim_prefix(mut record: EcgRecord, n: usize) -> Result<EcgRecord> {
    if n > record.samples.len() {
        return Err(Error::Input(format!(
            "cannot trim {n} samples from record {} of length {}",
            record.id,
            record.samples.len()
        )));
    }
    record.samples.drain(..n);
    Ok(record)
}

/// Prefix length dropped from a record of the given class.
pub fn trim_for(label: ClassLabel, trim_prefix_hpt: usize) -> usize {
    match label {
        ClassLabel::Hpt => trim_prefix_hpt,
        ClassLabel::Normal => 0,
    }
}

/// Text export: one sample per line, shortest round-trip representation.
pub fn write_text_samples(path: &Path, samples: &[f64]) -> Result<()> {
    let mut buf = String::with_capacity(samples.len() * 12);
    for s in samples {
        buf.push_str(&format!("{s}\n"));
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Binary export: `raw = round(x * gain + baseline)`, saturated to i16.
pub fn write_i16_samples(path: &Path, samples: &[f64], gain: f64, baseline: f64) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for &s in samples {
        let raw = (s * gain + baseline).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        f.write_all(&raw.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub id: String,
    pub label: ClassLabel,
    pub format: SampleFormat,
}

impl ManifestEntry {
    pub fn load(&self) -> Result<EcgRecord> {
        load_record(&self.path, &self.id, self.label, self.format)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub trim_prefix_hpt: usize,
}

impl DatasetManifest {
    pub fn count(&self, label: ClassLabel) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path, true)
}

/// Parses manifest text. `check_files` verifies every referenced file exists.
pub fn parse_manifest(text: &str, path: &Path, check_files: bool) -> Result<DatasetManifest> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    let mut trim_prefix_hpt = DEFAULT_TRIM_PREFIX_HPT;

    for (lineno, line) in text.lines().enumerate() {
        let pos = || format!("line {}", lineno + 1);
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split(',').map(str::trim).collect();
        if fields[0].eq_ignore_ascii_case("path") {
            continue;
        }
        if fields[0] == "@trim_prefix_hpt" {
            trim_prefix_hpt = fields
                .get(1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::data(path, pos(), "expected @trim_prefix_hpt,<count>"))?;
            continue;
        }
        if fields.len() < 3 || fields.len() > 6 {
            return Err(Error::data(
                path,
                pos(),
                format!("expected path,id,label[,format[,gain[,baseline]]], got {} fields", fields.len()),
            ));
        }
        let file = base.join(fields[0]);
        let id = fields[1].to_string();
        if !valid_id(&id) {
            return Err(Error::data(
                path,
                pos(),
                format!("invalid id {id:?} (use letters, digits, '_', '-', '.')"),
            ));
        }
        let label: ClassLabel = fields[2]
            .parse()
            .map_err(|e: Error| Error::data(path, pos(), e.to_string()))?;
        let parse_num = |i: usize, default: f64| -> Result<f64> {
            match fields.get(i) {
                None => Ok(default),
                Some(s) if s.is_empty() => Ok(default),
                Some(s) => s
                    .parse()
                    .map_err(|_| Error::data(path, pos(), format!("malformed number {s:?}"))),
            }
        };
        let format = match fields.get(3).copied() {
            None | Some("") => match SampleFormat::infer(&file) {
                SampleFormat::Text => SampleFormat::Text,
                SampleFormat::I16le { .. } => SampleFormat::I16le {
                    gain: parse_num(4, 1.0)?,
                    baseline: parse_num(5, 0.0)?,
                },
            },
            Some(f) if f.eq_ignore_ascii_case("text") => SampleFormat::Text,
            Some(f) if f.eq_ignore_ascii_case("i16le") => SampleFormat::I16le {
                gain: parse_num(4, 1.0)?,
                baseline: parse_num(5, 0.0)?,
            },
            Some(f) => {
                return Err(Error::data(path, pos(), format!("unknown sample format {f:?}")));
            }
        };
        if let SampleFormat::I16le { gain, .. } = format {
            if gain == 0.0 || !gain.is_finite() {
                return Err(Error::data(path, pos(), "gain must be finite and non-zero"));
            }
        }
        if !seen.insert(id.clone()) {
            return Err(Error::data(path, pos(), format!("duplicate id {id:?}")));
        }
        if check_files && !file.is_file() {
            return Err(Error::data(
                path,
                pos(),
                format!("referenced file {} does not exist", file.display()),
            ));
        }
        entries.push(ManifestEntry {
            path: file,
            id,
            label,
            format,
        });
    }
    if entries.is_empty() {
        return Err(Error::data(path, "end", "manifest lists no records"));
    }
    Ok(DatasetManifest {
        entries,
        trim_prefix_hpt,
    })
}
