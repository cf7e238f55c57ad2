//! Staged, cached, file-based pipeline.
//!
//! Stages run in order `ingest → denoise → segment → features → train →
//! evaluate`. Each stage writes its artifacts under `<out>/<stage>/` plus a
//! `stamp.json` recording a fingerprint of its inputs and a SHA-256 of every
//! output. A stage whose fingerprint matches and whose outputs still hash
//! correctly is skipped.
//!
//! Artifact layout:
//!
//! ```text
//! ingest/records.csv        id,label,path,format,gain,baseline,raw_len,trim,len,sha256
//! denoise/index.csv         id,label,len,file,sha256
//! denoise/NNNN_<id>.sig     one line header, then len little-endian f64
//! segment/segments.csv      record_id,label,offset,len,file
//! segment/segments.bin      optional: every segment's samples
//! features/features.csv     record_id,offset,label + 45 feature columns
//! features/imfs.bin         optional: 5 IMFs + residual per segment
//! train/model.json          decision tree fit on all rows
//! evaluate/metrics.json     per-fold and pooled confusion matrices, metrics
//! evaluate/metrics.txt      the same as human-readable tables
//! report.json               run report (timings, counts, metrics, config)
//! ```
//!
//! Every text artifact starts with a `# hptscreen-<kind> schema=N` line; the
//! binary containers start with a `hptscreen-<kind> schema=N ...` text line;
//! JSON documents carry a leading `schema` field.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{self, ClassLabel, DatasetManifest, EcgRecord, SampleFormat};
use crate::denoise::{self, DenoiseConfig};
use crate::emd::{self, EmdConfig};
use crate::error::{Error, Result};
use crate::eval::{self, ConfusionMatrix, CvReport, EvalConfig, MetricsReport};
use crate::features::{self, FeatureConfig, FeatureVector};
use crate::par;
use crate::segment::{self, SegmentationConfig};
use crate::tree::{self, TreeConfig};

pub const STAMP_SCHEMA: &str = "hptscreen-stamp/1";
pub const REPORT_SCHEMA: &str = "hptscreen-report/1";
pub const CV_SCHEMA: &str = "hptscreen-cv/1";
pub const COMPARISON_SCHEMA: &str = "hptscreen-comparison/1";
const RECORDS_SCHEMA: &str = "# hptscreen-records schema=1";
const DENOISE_INDEX_SCHEMA: &str = "# hptscreen-denoised schema=1";
const SEGMENTS_SCHEMA: &str = "# hptscreen-segments schema=1";
const SIGNAL_MAGIC: &str = "hptscreen-signal schema=1";
const SEGMENT_DUMP_MAGIC: &str = "hptscreen-segment-dump schema=1";
const IMF_DUMP_MAGIC: &str = "hptscreen-imf-dump schema=1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Text,
    I16le,
}

/// Optional debug/export artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dump_segments: bool,
    pub dump_imfs: bool,
    /// Also write each denoised record in a dataset sample format.
    pub export_denoised: Option<ExportFormat>,
    /// Gain for `i16le` export: raw = round(x * gain).
    pub export_gain: f64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dump_segments: false,
            dump_imfs: false,
            export_denoised: None,
            export_gain: 200.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub workers: Option<usize>,
    /// Overrides the manifest's HPT prefix trim.
    #[serde(default)]
    pub trim_prefix_hpt: Option<usize>,
    #[serde(default)]
    pub denoise: DenoiseConfig,
    #[serde(default)]
    pub segment: SegmentationConfig,
    #[serde(default)]
    pub emd: EmdConfig,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub tree: TreeConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl PipelineConfig {
    pub fn new(manifest: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            manifest: manifest.into(),
            out_dir: out_dir.into(),
            workers: None,
            trim_prefix_hpt: None,
            denoise: DenoiseConfig::default(),
            segment: SegmentationConfig::default(),
            emd: EmdConfig::default(),
            features: FeatureConfig::default(),
            tree: TreeConfig::default(),
            eval: EvalConfig::default(),
            output: OutputConfig::default(),
        }
    }

    /// Parses TOML; relative paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        if cfg.manifest.is_relative() {
            cfg.manifest = base.join(&cfg.manifest);
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or_else(|| Path::new(".")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn workers(&self) -> usize {
        self.workers.unwrap_or_else(par::default_workers)
    }

    pub fn validate(&self) -> Result<()> {
        par::check_workers(self.workers())?;
        self.segment.validate()?;
        self.emd.validate()?;
        self.features.validate()?;
        self.tree.validate()?;
        if self.denoise.levels == 0 {
            return Err(Error::Config("denoise.levels must be at least 1".into()));
        }
        if self.eval.k_folds < 2 {
            return Err(Error::Config("eval.k_folds must be at least 2".into()));
        }
        if !(self.output.export_gain.is_finite() && self.output.export_gain != 0.0) {
            return Err(Error::Config("output.export_gain must be finite and non-zero".into()));
        }
        if self.segment.segment_len < emd::MIN_SEGMENT_LEN {
            return Err(Error::Config(format!(
                "segment_len must be at least {} for EMD",
                emd::MIN_SEGMENT_LEN
            )));
        }
        Ok(())
    }

    fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.out_dir.join(stage.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Denoise,
    Segment,
    Features,
    Train,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Ingest,
        Stage::Denoise,
        Stage::Segment,
        Stage::Features,
        Stage::Train,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Denoise => "denoise",
            Stage::Segment => "segment",
            Stage::Features => "features",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStamp {
    pub schema: String,
    pub stage: Stage,
    pub fingerprint: String,
    /// Output file name (relative to the stage directory) → SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub elapsed_ms: u128,
    /// Unique per build; downstream fingerprints include it, so rebuilding
    /// a stage invalidates everything after it.
    pub build_id: String,
    #[serde(default)]
    pub notes: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub cached: bool,
    pub elapsed_ms: u128,
    pub outputs: Vec<PathBuf>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

fn sha256_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn fingerprint(parts: &[(&str, String)]) -> String {
    let mut h = Sha256::new();
    for (k, v) in parts {
        h.update(k.as_bytes());
        h.update([0u8]);
        h.update(v.as_bytes());
        h.update([0u8]);
    }
    hex(&h.finalize())
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

fn stamp_path(cfg: &PipelineConfig, stage: Stage) -> PathBuf {
    cfg.stage_dir(stage).join("stamp.json")
}

pub fn read_stamp(cfg: &PipelineConfig, stage: Stage) -> Option<StageStamp> {
    let text = fs::read_to_string(stamp_path(cfg, stage)).ok()?;
    serde_json::from_str::<StageStamp>(&text)
        .ok()
        .filter(|s| s.schema == STAMP_SCHEMA && s.stage == stage)
}

fn stamp_is_current(cfg: &PipelineConfig, stage: Stage, fp: &str) -> bool {
    let Some(stamp) = read_stamp(cfg, stage) else {
        return false;
    };
    if stamp.fingerprint != fp {
        return false;
    }
    let dir = cfg.stage_dir(stage);
    stamp
        .outputs
        .iter()
        .all(|(name, sum)| sha256_file(&dir.join(name)).is_ok_and(|s| &s == sum))
}

fn require(path: PathBuf, stage: &'static str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact { stage, path })
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn write_lines(path: &Path, schema: &str, header: &str, rows: &[String]) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    writeln!(f, "{schema}").map_err(io_err(path))?;
    writeln!(f, "{header}").map_err(io_err(path))?;
    for r in rows {
        writeln!(f, "{r}").map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

/// Data rows of a schema-tagged CSV artifact, split on commas.
fn read_rows(path: &Path, schema: &str, columns: usize) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim_end) != Some(schema) {
        return Err(Error::data(path, "line 1", format!("expected schema line {schema:?}")));
    }
    lines.next();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|s| s.to_string()).collect();
        if fields.len() != columns {
            return Err(Error::data(
                path,
                format!("line {}", i + 3),
                format!("expected {columns} fields, got {}", fields.len()),
            ));
        }
        rows.push(fields);
    }
    Ok(rows)
}

fn parse_field<T: std::str::FromStr>(path: &Path, row: usize, what: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::data(path, format!("row {}", row + 1), format!("bad {what} {s:?}")))
}

/// Writes a denoised signal: one header line, then little-endian f64.
pub fn write_signal(path: &Path, id: &str, label: ClassLabel, samples: &[f64]) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    writeln!(f, "{SIGNAL_MAGIC} id={id} label={label} len={}", samples.len()).map_err(io_err(path))?;
    for s in samples {
        f.write_all(&s.to_le_bytes()).map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

pub fn read_signal(path: &Path) -> Result<(String, ClassLabel, Vec<f64>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::data(path, "byte 0", "missing signal header line"))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::data(path, "byte 0", "signal header is not text"))?;
    let rest = header
        .strip_prefix(SIGNAL_MAGIC)
        .ok_or_else(|| Error::data(path, "line 1", format!("expected {SIGNAL_MAGIC:?} header")))?;
    let mut id = None;
    let mut label = None;
    let mut len = None;
    for kv in rest.split_whitespace() {
        match kv.split_once('=') {
            Some(("id", v)) => id = Some(v.to_string()),
            Some(("label", v)) => label = v.parse::<ClassLabel>().ok(),
            Some(("len", v)) => len = v.parse::<usize>().ok(),
            _ => {}
        }
    }
    let (Some(id), Some(label), Some(len)) = (id, label, len) else {
        return Err(Error::data(path, "line 1", "signal header lacks id/label/len"));
    };
    let payload = &bytes[nl + 1..];
    if payload.len() != len * 8 {
        return Err(Error::data(
            path,
            format!("byte {}", nl + 1),
            format!("expected {} payload bytes, found {}", len * 8, payload.len()),
        ));
    }
    let samples = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((id, label, samples))
}

/// One record after trimming and denoising. A record trimmed to nothing
/// stays empty and later yields no segments.
pub fn preprocess_record(record: EcgRecord, trim_prefix_hpt: usize, config: &DenoiseConfig) -> Result<Vec<f64>> {
    let id = record.id.clone();
    let trim = dataset::trim_for(record.label, trim_prefix_hpt);
    let trimmed = dataset::trim_prefix(record, trim)?;
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    denoise::denoise(&trimmed.samples, config)
        .map_err(|e| Error::Input(format!("record {id}: {e}")))
}

#[derive(Debug, Clone, PartialEq)]
struct IngestRow {
    id: String,
    label: ClassLabel,
    path: PathBuf,
    format: SampleFormat,
    raw_len: usize,
    trim: usize,
    len: usize,
    sha256: String,
}

fn format_fields(format: SampleFormat) -> (String, f64, f64) {
    match format {
        SampleFormat::Text => ("text".into(), 1.0, 0.0),
        SampleFormat::I16le { gain, baseline } => ("i16le".into(), gain, baseline),
    }
}

fn read_ingest(cfg: &PipelineConfig) -> Result<Vec<IngestRow>> {
    let path = require(cfg.stage_dir(Stage::Ingest).join("records.csv"), "ingest")?;
    read_rows(&path, RECORDS_SCHEMA, 10)?
        .into_iter()
        .enumerate()
        .map(|(i, f)| {
            let format = match f[3].as_str() {
                "text" => SampleFormat::Text,
                "i16le" => SampleFormat::I16le {
                    gain: parse_field(&path, i, "gain", &f[4])?,
                    baseline: parse_field(&path, i, "baseline", &f[5])?,
                },
                other => return Err(Error::data(&path, format!("row {}", i + 1), format!("bad format {other:?}"))),
            };
            Ok(IngestRow {
                id: f[0].clone(),
                label: parse_field(&path, i, "label", &f[1])?,
                path: PathBuf::from(&f[2]),
                format,
                raw_len: parse_field(&path, i, "raw_len", &f[6])?,
                trim: parse_field(&path, i, "trim", &f[7])?,
                len: parse_field(&path, i, "len", &f[8])?,
                sha256: f[9].clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
struct DenoisedRow {
    id: String,
    label: ClassLabel,
    len: usize,
    file: String,
    sha256: String,
}

fn read_denoise_index(cfg: &PipelineConfig) -> Result<Vec<DenoisedRow>> {
    let path = require(cfg.stage_dir(Stage::Denoise).join("index.csv"), "denoise")?;
    read_rows(&path, DENOISE_INDEX_SCHEMA, 5)?
        .into_iter()
        .enumerate()
        .map(|(i, f)| {
            Ok(DenoisedRow {
                id: f[0].clone(),
                label: parse_field(&path, i, "label", &f[1])?,
                len: parse_field(&path, i, "len", &f[2])?,
                file: f[3].clone(),
                sha256: f[4].clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRow {
    pub record_id: String,
    pub label: ClassLabel,
    pub offset: usize,
    pub len: usize,
    pub file: String,
}

pub fn read_segment_index(cfg: &PipelineConfig) -> Result<Vec<SegmentRow>> {
    let path = require(cfg.stage_dir(Stage::Segment).join("segments.csv"), "segment")?;
    read_rows(&path, SEGMENTS_SCHEMA, 5)?
        .into_iter()
        .enumerate()
        .map(|(i, f)| {
            Ok(SegmentRow {
                record_id: f[0].clone(),
                label: parse_field(&path, i, "label", &f[1])?,
                offset: parse_field(&path, i, "offset", &f[2])?,
                len: parse_field(&path, i, "len", &f[3])?,
                file: f[4].clone(),
            })
        })
        .collect()
}

fn features_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.stage_dir(Stage::Features).join("features.csv")
}

fn prepare_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn finish_stage(
    cfg: &PipelineConfig,
    stage: Stage,
    fp: String,
    outputs: &[PathBuf],
    started: Instant,
    notes: BTreeMap<String, u64>,
) -> Result<StageOutcome> {
    let dir = cfg.stage_dir(stage);
    let mut sums = BTreeMap::new();
    for p in outputs {
        let name = p
            .strip_prefix(&dir)
            .map_err(|_| Error::Invariant(format!("{} outside {}", p.display(), dir.display())))?
            .to_string_lossy()
            .into_owned();
        sums.insert(name, sha256_file(p)?);
    }
    let elapsed_ms = started.elapsed().as_millis();
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_nanos());
    let build_id = sha256_bytes(format!("{fp}:{now}:{}", std::process::id()).as_bytes());
    let stamp = StageStamp {
        schema: STAMP_SCHEMA.to_string(),
        stage,
        fingerprint: fp,
        outputs: sums,
        elapsed_ms,
        build_id,
        notes,
    };
    let sp = stamp_path(cfg, stage);
    fs::write(&sp, serde_json::to_string_pretty(&stamp).expect("stamp serializes") + "\n").map_err(io_err(&sp))?;
    Ok(StageOutcome {
        stage,
        cached: false,
        elapsed_ms,
        outputs: outputs.to_vec(),
    })
}

fn cached(cfg: &PipelineConfig, stage: Stage) -> StageOutcome {
    let dir = cfg.stage_dir(stage);
    let outputs = read_stamp(cfg, stage)
        .map(|s| s.outputs.keys().map(|k| dir.join(k)).collect())
        .unwrap_or_default();
    StageOutcome {
        stage,
        cached: true,
        elapsed_ms: 0,
        outputs,
    }
}

fn stage_fingerprint(cfg: &PipelineConfig, stage: Stage) -> Result<String> {
    let upstream = |st: Stage, file: &str| -> Result<String> {
        let p = require(cfg.stage_dir(st).join(file), st.name())?;
        let build = read_stamp(cfg, st).map(|s| s.build_id).unwrap_or_default();
        Ok(format!("{}:{build}", sha256_file(&p)?))
    };
    Ok(match stage {
        Stage::Ingest => {
            let manifest_text = fs::read(&cfg.manifest)
                .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", cfg.manifest.display())))?;
            let manifest = dataset::parse_manifest(
                &String::from_utf8_lossy(&manifest_text),
                &cfg.manifest,
                true,
            )?;
            let mut parts = vec![
                ("manifest", sha256_bytes(&manifest_text)),
                ("manifest_path", cfg.manifest.display().to_string()),
                ("trim_override", json(&cfg.trim_prefix_hpt)),
            ];
            let sums = par::try_map_ordered(&manifest.entries, cfg.workers(), |e| sha256_file(&e.path))?;
            for s in sums {
                parts.push(("source", s));
            }
            fingerprint(&parts)
        }
        Stage::Denoise => fingerprint(&[
            ("records", upstream(Stage::Ingest, "records.csv")?),
            ("denoise", json(&cfg.denoise)),
            ("export", json(&(cfg.output.export_denoised, cfg.output.export_gain))),
        ]),
        Stage::Segment => fingerprint(&[
            ("denoised", upstream(Stage::Denoise, "index.csv")?),
            ("segment", json(&cfg.segment)),
            ("dump", json(&cfg.output.dump_segments)),
        ]),
        Stage::Features => fingerprint(&[
            ("denoised", upstream(Stage::Denoise, "index.csv")?),
            ("segments", upstream(Stage::Segment, "segments.csv")?),
            ("emd", json(&cfg.emd)),
            ("features", json(&cfg.features)),
            ("dump", json(&cfg.output.dump_imfs)),
        ]),
        Stage::Train => fingerprint(&[
            ("features", upstream(Stage::Features, "features.csv")?),
            ("tree", json(&cfg.tree)),
        ]),
        Stage::Evaluate => fingerprint(&[
            ("features", upstream(Stage::Features, "features.csv")?),
            ("tree", json(&cfg.tree)),
            ("eval", json(&cfg.eval)),
        ]),
    })
}

/// Runs one stage, or reports it cached when inputs and outputs are unchanged.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<StageOutcome> {
    cfg.validate()?;
    let fp = stage_fingerprint(cfg, stage)?;
    if stamp_is_current(cfg, stage, &fp) {
        return Ok(cached(cfg, stage));
    }
    let started = Instant::now();
    let dir = cfg.stage_dir(stage);
    prepare_dir(&dir)?;
    let (outputs, notes) = match stage {
        Stage::Ingest => build_ingest(cfg, &dir)?,
        Stage::Denoise => build_denoise(cfg, &dir)?,
        Stage::Segment => build_segment(cfg, &dir)?,
        Stage::Features => build_features(cfg, &dir)?,
        Stage::Train => build_train(cfg, &dir)?,
        Stage::Evaluate => build_evaluate(cfg, &dir)?,
    };
    finish_stage(cfg, stage, fp, &outputs, started, notes)
}

type Built = (Vec<PathBuf>, BTreeMap<String, u64>);

fn load_manifest(cfg: &PipelineConfig) -> Result<DatasetManifest> {
    let mut m = dataset::load_manifest(&cfg.manifest)?;
    if let Some(t) = cfg.trim_prefix_hpt {
        m.trim_prefix_hpt = t;
    }
    Ok(m)
}

fn build_ingest(cfg: &PipelineConfig, dir: &Path) -> Result<Built> {
    let manifest = load_manifest(cfg)?;
    let rows = par::try_map_ordered(&manifest.entries, cfg.workers(), |e| {
        let record = e.load()?;
        let trim = dataset::trim_for(e.label, manifest.trim_prefix_hpt);
        let raw_len = record.len();
        if trim > raw_len {
            return Err(Error::data(
                &e.path,
                "end",
                format!("record {} has {raw_len} samples, cannot trim {trim}", e.id),
            ));
        }
        Ok(IngestRow {
            id: e.id.clone(),
            label: e.label,
            path: e.path.clone(),
            format: e.format,
            raw_len,
            trim,
            len: raw_len - trim,
            sha256: sha256_file(&e.path)?,
        })
    })?;
    let lines: Vec<String> = rows
        .iter()
        .map(|r| {
            let (f, gain, baseline) = format_fields(r.format);
            format!(
                "{},{},{},{f},{gain},{baseline},{},{},{},{}",
                r.id,
                r.label,
                r.path.display(),
                r.raw_len,
                r.trim,
                r.len,
                r.sha256
            )
        })
        .collect();
    let out = dir.join("records.csv");
    write_lines(&out, RECORDS_SCHEMA, "id,label,path,format,gain,baseline,raw_len,trim,len,sha256", &lines)?;
    let mut notes = BTreeMap::new();
    for c in ClassLabel::ALL {
        notes.insert(format!("records_{c}"), rows.iter().filter(|r| r.label == c).count() as u64);
    }
    Ok((vec![out], notes))
}

fn signal_file_name(index: usize, id: &str) -> String {
    format!("{index:04}_{id}.sig")
}

fn build_denoise(cfg: &PipelineConfig, dir: &Path) -> Result<Built> {
    let rows = read_ingest(cfg)?;
    let export_dir = dir.join("export");
    if cfg.output.export_denoised.is_some() {
        fs::create_dir_all(&export_dir).map_err(io_err(&export_dir))?;
    }
    let indexed: Vec<(usize, &IngestRow)> = rows.iter().enumerate().collect();
    let results = par::try_map_ordered(&indexed, cfg.workers(), |&(i, r)| {
        let record = dataset::load_record(&r.path, &r.id, r.label, r.format)?;
        if record.len() != r.raw_len {
            return Err(Error::data(
                &r.path,
                "end",
                format!("record changed since ingest ({} vs {} samples)", record.len(), r.raw_len),
            ));
        }
        let trimmed = dataset::trim_prefix(record, r.trim)?;
        let clean = if trimmed.is_empty() {
            Vec::new()
        } else {
            denoise::denoise(&trimmed.samples, &cfg.denoise)
                .map_err(|e| Error::data(&r.path, "record", format!("record {}: {e}", r.id)))?
        };
        let name = signal_file_name(i, &r.id);
        let path = dir.join(&name);
        write_signal(&path, &r.id, r.label, &clean)?;
        let mut outs = vec![path.clone()];
        match cfg.output.export_denoised {
            Some(ExportFormat::Text) => {
                let p = export_dir.join(format!("{}.txt", r.id));
                dataset::write_text_samples(&p, &clean)?;
                outs.push(p);
            }
            Some(ExportFormat::I16le) => {
                let p = export_dir.join(format!("{}.bin", r.id));
                dataset::write_i16_samples(&p, &clean, cfg.output.export_gain, 0.0)?;
                outs.push(p);
            }
            None => {}
        }
        Ok((
            format!("{},{},{},{name},{}", r.id, r.label, clean.len(), sha256_file(&path)?),
            outs,
        ))
    })?;
    let mut outputs = Vec::new();
    let mut lines = Vec::new();
    for (line, outs) in results {
        lines.push(line);
        outputs.extend(outs);
    }
    let index = dir.join("index.csv");
    write_lines(&index, DENOISE_INDEX_SCHEMA, "id,label,len,file,sha256", &lines)?;
    outputs.push(index);
    Ok((outputs, BTreeMap::new()))
}

fn build_segment(cfg: &PipelineConfig, dir: &Path) -> Result<Built> {
    let records = read_denoise_index(cfg)?;
    let seg_len = cfg.segment.segment_len;
    let mut lines = Vec::new();
    let mut notes = BTreeMap::new();
    for c in ClassLabel::ALL {
        notes.insert(format!("segments_{c}"), 0);
    }
    for r in &records {
        for offset in segment::segment_offsets(r.len, seg_len) {
            lines.push(format!("{},{},{offset},{seg_len},{}", r.id, r.label, r.file));
            *notes.get_mut(&format!("segments_{}", r.label)).expect("class key") += 1;
        }
    }
    let out = dir.join("segments.csv");
    write_lines(&out, SEGMENTS_SCHEMA, "record_id,label,offset,len,file", &lines)?;
    let mut outputs = vec![out];
    if cfg.output.dump_segments {
        let dump = dir.join("segments.bin");
        write_segment_dump(cfg, &records, &dump)?;
        outputs.push(dump);
    }
    Ok((outputs, notes))
}

fn load_denoised(cfg: &PipelineConfig, row: &DenoisedRow) -> Result<Vec<f64>> {
    let path = cfg.stage_dir(Stage::Denoise).join(&row.file);
    let (id, _, samples) = read_signal(&path)?;
    if id != row.id || samples.len() != row.len {
        return Err(Error::data(&path, "header", "denoised signal does not match the index"));
    }
    Ok(samples)
}

fn write_segment_dump(cfg: &PipelineConfig, records: &[DenoisedRow], path: &Path) -> Result<()> {
    let seg_len = cfg.segment.segment_len;
    let count: usize = records.iter().map(|r| segment::segment_count(r.len, seg_len)).sum();
    let mut f = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    writeln!(f, "{SEGMENT_DUMP_MAGIC} count={count} len={seg_len}").map_err(io_err(path))?;
    for r in records {
        let samples = load_denoised(cfg, r)?;
        for seg in segment::segment_samples(&r.id, r.label, &samples, seg_len) {
            writeln!(f, "{},{},{}", seg.record_id, seg.offset, seg.label).map_err(io_err(path))?;
            for s in &seg.samples {
                f.write_all(&s.to_le_bytes()).map_err(io_err(path))?;
            }
        }
    }
    f.flush().map_err(io_err(path))
}

/// Entry of a segment or IMF dump container.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpEntry {
    pub record_id: String,
    pub offset: usize,
    pub label: ClassLabel,
    /// One series for a segment dump; the IMFs then the residual for an IMF dump.
    pub series: Vec<Vec<f64>>,
}

/// Reads `segments.bin` or `imfs.bin`.
pub fn read_dump(path: &Path) -> Result<Vec<DumpEntry>> {
    let mut r = BufReader::new(fs::File::open(path).map_err(io_err(path))?);
    let mut header = String::new();
    r.read_line(&mut header).map_err(io_err(path))?;
    let header = header.trim_end();
    let (rest, per_entry) = if let Some(rest) = header.strip_prefix(SEGMENT_DUMP_MAGIC) {
        (rest, None)
    } else if let Some(rest) = header.strip_prefix(IMF_DUMP_MAGIC) {
        (rest, Some(()))
    } else {
        return Err(Error::data(path, "line 1", "not a segment or IMF dump"));
    };
    let mut kv = BTreeMap::new();
    for item in rest.split_whitespace() {
        if let Some((k, v)) = item.split_once('=') {
            kv.insert(k, v.parse::<usize>().map_err(|_| Error::data(path, "line 1", format!("bad {k}")))?);
        }
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::data(path, "line 1", format!("missing {k}")));
    let (count, len) = (get("count")?, get("len")?);
    let series_per = match per_entry {
        None => 1,
        Some(()) => get("imfs")? + 1,
    };
    let mut out = Vec::with_capacity(count);
    let mut buf = vec![0u8; len * 8];
    for n in 0..count {
        let mut key = String::new();
        r.read_line(&mut key).map_err(io_err(path))?;
        let parts: Vec<&str> = key.trim_end().split(',').collect();
        if parts.len() != 3 {
            return Err(Error::data(path, format!("entry {n}"), "bad entry key"));
        }
        let mut series = Vec::with_capacity(series_per);
        for _ in 0..series_per {
            r.read_exact(&mut buf).map_err(io_err(path))?;
            series.push(
                buf.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
            );
        }
        out.push(DumpEntry {
            record_id: parts[0].to_string(),
            offset: parts[1]
                .parse()
                .map_err(|_| Error::data(path, format!("entry {n}"), "bad offset"))?,
            label: parts[2].parse()?,
            series,
        });
    }
    Ok(out)
}

/// EMD and the 45 features for one segment.
pub fn segment_features(
    record_id: &str,
    label: ClassLabel,
    offset: usize,
    samples: &[f64],
    emd_cfg: &EmdConfig,
    feat_cfg: &FeatureConfig,
) -> Result<(FeatureVector, emd::ImfDecomposition)> {
    let dec = emd::decompose(samples, emd_cfg)?;
    let fv = features::extract_features(&dec, record_id, offset, label, feat_cfg)?;
    Ok((fv, dec))
}

fn build_features(cfg: &PipelineConfig, dir: &Path) -> Result<Built> {
    let records = read_denoise_index(cfg)?;
    let segments = read_segment_index(cfg)?;
    let by_id: BTreeMap<&str, &DenoisedRow> = records.iter().map(|r| (r.id.as_str(), r)).collect();

    let mut rows = Vec::with_capacity(segments.len());
    let mut incomplete = 0u64;
    let imf_path = dir.join("imfs.bin");
    let mut imf_dump = if cfg.output.dump_imfs {
        let mut f = BufWriter::new(fs::File::create(&imf_path).map_err(io_err(&imf_path))?);
        writeln!(
            f,
            "{IMF_DUMP_MAGIC} count={} len={} imfs={}",
            segments.len(),
            cfg.segment.segment_len,
            cfg.emd.num_imfs
        )
        .map_err(io_err(&imf_path))?;
        Some(f)
    } else {
        None
    };

    // one record in memory at a time; its segments fan out over the workers
    let mut start = 0;
    while start < segments.len() {
        let id = segments[start].record_id.as_str();
        let end = start + segments[start..].iter().take_while(|s| s.record_id == id).count();
        let row = by_id.get(id).ok_or_else(|| {
            Error::Invariant(format!("segment index names record {id} missing from the denoise index"))
        })?;
        let samples = load_denoised(cfg, row)?;
        let batch = &segments[start..end];
        let results = par::try_map_ordered(batch, cfg.workers(), |s| {
            let window = samples.get(s.offset..s.offset + s.len).ok_or_else(|| {
                Error::Invariant(format!("segment {}@{} exceeds record length", s.record_id, s.offset))
            })?;
            segment_features(&s.record_id, s.label, s.offset, window, &cfg.emd, &cfg.features)
        })?;
        for (fv, dec) in results {
            incomplete += u64::from(dec.incomplete);
            if let Some(f) = imf_dump.as_mut() {
                writeln!(f, "{},{},{}", fv.record_id, fv.offset, fv.label).map_err(io_err(&imf_path))?;
                for s in dec.imfs.iter().chain(std::iter::once(&dec.residual)) {
                    for v in s {
                        f.write_all(&v.to_le_bytes()).map_err(io_err(&imf_path))?;
                    }
                }
            }
            rows.push(fv);
        }
        start = end;
    }
    let out = dir.join("features.csv");
    features::write_features(&out, &rows)?;
    let mut outputs = vec![out];
    if let Some(mut f) = imf_dump {
        f.flush().map_err(io_err(&imf_path))?;
        outputs.push(imf_path);
    }
    let mut notes = BTreeMap::new();
    notes.insert("segments".into(), rows.len() as u64);
    notes.insert("incomplete_decompositions".into(), incomplete);
    Ok((outputs, notes))
}

fn load_features(cfg: &PipelineConfig) -> Result<(Vec<Vec<f64>>, Vec<ClassLabel>)> {
    let path = require(features_path(cfg), "features")?;
    let rows = features::read_features(&path)?;
    if rows.is_empty() {
        return Err(Error::data(&path, "line 3", "features table has no rows"));
    }
    Ok(rows.into_iter().map(|r| (r.values, r.label)).unzip())
}

fn build_train(cfg: &PipelineConfig, dir: &Path) -> Result<Built> {
    let (x, y) = load_features(cfg)?;
    let model = tree::fit(&x, &y, &cfg.tree)?;
    let out = dir.join("model.json");
    model.save(&out)?;
    let mut notes = BTreeMap::new();
    notes.insert("nodes".into(), model.nodes.len() as u64);
    notes.insert("depth".into(), model.depth() as u64);
    Ok((vec![out], notes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvDocument {
    pub schema: String,
    #[serde(flatten)]
    pub report: CvReport,
}

fn build_evaluate(cfg: &PipelineConfig, dir: &Path) -> Result<Built> {
    let (x, y) = load_features(cfg)?;
    let report = eval::cross_validate(&x, &y, &cfg.tree, &cfg.eval, cfg.workers())?;
    let doc = CvDocument {
        schema: CV_SCHEMA.to_string(),
        report,
    };
    let json_path = dir.join("metrics.json");
    fs::write(&json_path, serde_json::to_string_pretty(&doc).expect("cv serializes") + "\n")
        .map_err(io_err(&json_path))?;
    let txt_path = dir.join("metrics.txt");
    let r = &doc.report;
    let mut text = format!(
        "# hptscreen-metrics schema=1\n{}-fold cross-validation (seed {}, {})\n\n",
        r.k_folds,
        r.seed,
        if r.stratified { "stratified" } else { "unstratified" }
    );
    text.push_str(&eval::render_metrics_table(&[(
        format!("len={}", cfg.segment.segment_len),
        r.metrics,
    )]));
    text.push_str("\npooled confusion matrix\n");
    text.push_str(&r.pooled.render());
    fs::write(&txt_path, text).map_err(io_err(&txt_path))?;
    Ok((vec![json_path, txt_path], BTreeMap::new()))
}

pub fn read_cv_report(cfg: &PipelineConfig) -> Result<CvReport> {
    let path = require(cfg.stage_dir(Stage::Evaluate).join("metrics.json"), "evaluate")?;
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let doc: CvDocument =
        serde_json::from_str(&text).map_err(|e| Error::data(&path, "document", e.to_string()))?;
    if doc.schema != CV_SCHEMA {
        return Err(Error::data(&path, "document", format!("unsupported schema {:?}", doc.schema)));
    }
    Ok(doc.report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub elapsed_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub tool_version: String,
    pub segment_len: usize,
    pub stage_timings: Vec<StageTiming>,
    pub segments_per_class: BTreeMap<String, u64>,
    pub pooled: Option<ConfusionMatrix>,
    pub metrics: Option<MetricsReport>,
    /// Effective configuration as TOML.
    pub config: String,
}

impl RunReport {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let r: RunReport =
            serde_json::from_str(&text).map_err(|e| Error::data(path, "document", format!("malformed run report: {e}")))?;
        if r.schema != REPORT_SCHEMA {
            return Err(Error::data(path, "document", format!("unsupported schema {:?}", r.schema)));
        }
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self).expect("report serializes") + "\n").map_err(io_err(path))
    }
}

pub fn report_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.out_dir.join("report.json")
}

/// Assembles the run report from stamps and evaluation output.
pub fn build_report(cfg: &PipelineConfig) -> Result<RunReport> {
    let cv = read_cv_report(cfg)?;
    let stage_timings = Stage::ALL
        .iter()
        .filter_map(|&s| read_stamp(cfg, s).map(|st| StageTiming {
            stage: s,
            elapsed_ms: st.elapsed_ms,
        }))
        .collect();
    let mut segments_per_class = BTreeMap::new();
    if let Some(st) = read_stamp(cfg, Stage::Segment) {
        for c in ClassLabel::ALL {
            let key = format!("segments_{c}");
            segments_per_class.insert(c.to_string(), st.notes.get(&key).copied().unwrap_or(0));
        }
    }
    Ok(RunReport {
        schema: REPORT_SCHEMA.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        segment_len: cfg.segment.segment_len,
        stage_timings,
        segments_per_class,
        pooled: Some(cv.pooled),
        metrics: Some(cv.metrics),
        config: cfg.to_toml(),
    })
}

pub fn write_report(cfg: &PipelineConfig) -> Result<RunReport> {
    let report = build_report(cfg)?;
    report.save(&report_path(cfg))?;
    Ok(report)
}

/// Runs every stage in order, then writes `report.json`.
pub fn run_all(cfg: &PipelineConfig) -> Result<(Vec<StageOutcome>, RunReport)> {
    let mut outcomes = Vec::with_capacity(Stage::ALL.len());
    for stage in Stage::ALL {
        outcomes.push(run_stage(stage, cfg)?);
    }
    let report = write_report(cfg)?;
    Ok((outcomes, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub schema: String,
    pub rows: [ComparisonRow; 2],
    /// Second minus first, in percentage points; `None` where either is n/a.
    pub deltas: [Option<f64>; 5],
}

impl Comparison {
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(10);
        let mut out = eval::render_metrics_table(
            &self
                .rows
                .iter()
                .map(|r| (format!("{:<width$}", r.label), r.metrics))
                .collect::<Vec<_>>(),
        );
        out.push_str(&format!("{:<width$}", "delta"));
        for d in &self.deltas {
            match d {
                Some(v) => out.push_str(&format!("{v:>+10.4}")),
                None => out.push_str(&format!("{:>10}", "")),
            }
        }
        out.push('\n');
        out
    }

    /// Grouped bar chart of the five metrics for both runs.
    pub fn render_svg(&self) -> String {
        let (w, h) = (640.0, 360.0);
        let (left, right, top, bottom) = (60.0, 20.0, 30.0, 50.0);
        let values: Vec<f64> = self
            .rows
            .iter()
            .flat_map(|r| r.metrics.values())
            .filter_map(|m| m.percent())
            .collect();
        let lo = values.iter().copied().fold(100.0f64, f64::min).floor().max(1.0) - 1.0;
        let hi = 100.0;
        let plot_h = h - top - bottom;
        let y = |v: f64| top + plot_h * (1.0 - (v - lo) / (hi - lo));
        let group_w = (w - left - right) / 5.0;
        let bar_w = group_w * 0.35;
        let colors = ["#4477aa", "#ee6677"];
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>\n\
             <line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
            h - bottom,
            h - bottom,
            w - right,
            h - bottom
        );
        for tick in [lo, (lo + hi) / 2.0, hi] {
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{tick:.1}%</text>\n",
                left - 5.0,
                y(tick) + 4.0
            ));
        }
        for (g, name) in MetricsReport::NAMES.iter().enumerate() {
            let gx = left + group_w * g as f64 + group_w * 0.15;
            for (r, row) in self.rows.iter().enumerate() {
                let x = gx + bar_w * r as f64;
                match row.metrics.values()[g].percent() {
                    Some(v) => svg.push_str(&format!(
                        "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{bar_w:.1}\" height=\"{:.1}\" fill=\"{}\"><title>{} {name}: {v:.4}%</title></rect>\n",
                        y(v),
                        (h - bottom) - y(v),
                        colors[r],
                        row.label
                    )),
                    None => svg.push_str(&format!(
                        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">n/a</text>\n",
                        x + bar_w / 2.0,
                        h - bottom - 4.0
                    )),
                }
            }
            svg.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">{name}</text>\n",
                gx + bar_w,
                h - bottom + 18.0
            ));
        }
        for (r, row) in self.rows.iter().enumerate() {
            let lx = left + 10.0 + 180.0 * r as f64;
            svg.push_str(&format!(
                "<rect x=\"{lx}\" y=\"8\" width=\"12\" height=\"12\" fill=\"{}\"/><text x=\"{}\" y=\"18\" font-size=\"12\">{}</text>\n",
                colors[r],
                lx + 16.0,
                row.label
            ));
        }
        svg.push_str("</svg>\n");
        svg
    }
}

fn report_label(r: &RunReport) -> String {
    format!("len={}", r.segment_len)
}

/// Side-by-side metrics of two completed runs.
pub fn compare_segmentations(a: &RunReport, b: &RunReport) -> Result<Comparison> {
    let complete = |r: &RunReport, which: &str| {
        r.metrics
            .ok_or_else(|| Error::Input(format!("{which} run report is incomplete (no metrics)")))
    };
    let (ma, mb) = (complete(a, "first")?, complete(b, "second")?);
    let (mut la, mut lb) = (report_label(a), report_label(b));
    if la == lb {
        la.push_str(" (a)");
        lb.push_str(" (b)");
    }
    let mut deltas = [None; 5];
    for (i, (x, y)) in ma.values().iter().zip(mb.values()).enumerate() {
        deltas[i] = match (x.percent(), y.percent()) {
            (Some(x), Some(y)) => Some(y - x),
            _ => None,
        };
    }
    Ok(Comparison {
        schema: COMPARISON_SCHEMA.to_string(),
        rows: [
            ComparisonRow { label: la, metrics: ma },
            ComparisonRow { label: lb, metrics: mb },
        ],
        deltas,
    })
}

/// Writes `comparison.txt`, `comparison.json` and `comparison.svg` into `out_dir`.
pub fn write_comparison(cmp: &Comparison, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let txt = out_dir.join("comparison.txt");
    fs::write(&txt, format!("# hptscreen-comparison schema=1\n{}", cmp.render())).map_err(io_err(&txt))?;
    let js = out_dir.join("comparison.json");
    fs::write(&js, serde_json::to_string_pretty(cmp).expect("comparison serializes") + "\n").map_err(io_err(&js))?;
    let svg = out_dir.join("comparison.svg");
    fs::write(&svg, cmp.render_svg()).map_err(io_err(&svg))?;
    Ok(vec![txt, js, svg])
}
