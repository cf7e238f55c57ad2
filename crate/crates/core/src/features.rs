//! Nine measures per IMF, 45 per segment.
//!
//! Column order is IMF1..IMF5, each with
//! `std, mean, rms, shannon, log_energy, threshold, sure, norm, apen`.
//! The entropy measures are the unnormalized wavelet-entropy functionals;
//! zero samples contribute nothing to Shannon and log-energy so every value
//! stays finite.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::ClassLabel;
use crate::emd::ImfDecomposition;
use crate::error::{Error, Result};

pub const MEASURES: [&str; 9] = [
    "std",
    "mean",
    "rms",
    "shannon",
    "log_energy",
    "threshold",
    "sure",
    "norm",
    "apen",
];
pub const NUM_IMFS: usize = 5;
pub const NUM_FEATURES: usize = NUM_IMFS * MEASURES.len();

pub const FEATURES_SCHEMA: &str = "# hptscreen-features schema=1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Absolute level for the threshold and SURE entropies.
    pub entropy_threshold_eps: f64,
    pub norm_p: f64,
    pub apen_m: usize,
    /// ApEn tolerance as a multiple of the IMF's standard deviation.
    pub apen_r_factor: f64,
    /// Compute ApEn on at most this many leading samples.
    pub apen_max_samples: Option<usize>,
    /// When false the SURE column is written as 0.
    pub sure_enabled: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            entropy_threshold_eps: 0.2,
            norm_p: 1.1,
            apen_m: 2,
            apen_r_factor: 0.2,
            apen_max_samples: None,
            sure_enabled: true,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.entropy_threshold_eps > 0.0) {
            return Err(Error::Config("features.entropy_threshold_eps must be positive".into()));
        }
        if !(1.0..2.0).contains(&self.norm_p) {
            return Err(Error::Config(format!("features.norm_p must lie in [1, 2), got {}", self.norm_p)));
        }
        if self.apen_m == 0 {
            return Err(Error::Config("features.apen_m must be at least 1".into()));
        }
        if !(self.apen_r_factor > 0.0) {
            return Err(Error::Config("features.apen_r_factor must be positive".into()));
        }
        if let Some(cap) = self.apen_max_samples {
            if cap <= self.apen_m + 1 {
                return Err(Error::Config(format!(
                    "features.apen_max_samples must exceed apen_m + 1 = {}",
                    self.apen_m + 1
                )));
            }
        }
        Ok(())
    }
}

fn non_empty(x: &[f64]) -> Result<()> {
    if x.is_empty() {
        Err(Error::Input("measure of an empty sequence".into()))
    } else {
        Ok(())
    }
}

pub fn mean(x: &[f64]) -> Result<f64> {
    non_empty(x)?;
    Ok(x.iter().sum::<f64>() / x.len() as f64)
}

/// Population standard deviation (divides by N).
pub fn std(x: &[f64]) -> Result<f64> {
    let m = mean(x)?;
    Ok((x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt())
}

pub fn rms(x: &[f64]) -> Result<f64> {
    non_empty(x)?;
    Ok((x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt())
}

/// -Σ x² ln x², zero terms skipped.
pub fn shannon_entropy(x: &[f64]) -> f64 {
    -x.iter()
        .filter(|&&v| v != 0.0)
        .map(|&v| {
            let s = v * v;
            s * s.ln()
        })
        .sum::<f64>()
}

/// Σ ln x², zero terms skipped.
pub fn log_energy_entropy(x: &[f64]) -> f64 {
    x.iter().filter(|&&v| v != 0.0).map(|&v| (v * v).ln()).sum()
}

/// Number of samples with |x| > eps.
pub fn threshold_entropy(x: &[f64], eps: f64) -> f64 {
    x.iter().filter(|v| v.abs() > eps).count() as f64
}

/// N - #{|x| <= eps} + Σ min(x², eps²).
pub fn sure_entropy(x: &[f64], eps: f64) -> f64 {
    let eps2 = eps * eps;
    let inside = x.iter().filter(|v| v.abs() <= eps).count();
    let clipped: f64 = x.iter().map(|v| (v * v).min(eps2)).sum();
    (x.len() - inside) as f64 + clipped
}

/// Σ |x|^p.
pub fn norm_entropy(x: &[f64], p: f64) -> f64 {
    x.iter().map(|v| v.abs().powf(p)).sum()
}

/// Approximate entropy Φ_m - Φ_{m+1} with Chebyshev template distance,
/// self-matches included.
///
/// Template pairs are visited by lag: for each lag the run of consecutive
/// close samples decides the m- and (m+1)-matches of every pair at that lag.
pub fn approximate_entropy(x: &[f64], m: usize, r: f64) -> Result<f64> {
    let n = x.len();
    if m == 0 || n <= m + 1 {
        return Err(Error::Input(format!(
            "approximate entropy needs more than m + 1 = {} samples, got {n}",
            m + 1
        )));
    }
    if !(r > 0.0) {
        return Err(Error::Input(format!("approximate entropy tolerance must be positive, got {r}")));
    }
    let templates_m = n - m + 1;
    let templates_m1 = n - m;
    let mut counts_m = vec![1u32; templates_m];
    let mut counts_m1 = vec![1u32; templates_m1];

    for lag in 1..templates_m {
        let mut run = 0usize;
        for t in 0..n - lag {
            if (x[t] - x[t + lag]).abs() <= r {
                run += 1;
            } else {
                run = 0;
                continue;
            }
            if run >= m {
                let i = t + 1 - m;
                counts_m[i] += 1;
                counts_m[i + lag] += 1;
                if run > m {
                    let i = t - m;
                    counts_m1[i] += 1;
                    counts_m1[i + lag] += 1;
                }
            }
        }
    }
    Ok(phi(&counts_m) - phi(&counts_m1))
}

fn phi(counts: &[u32]) -> f64 {
    let total = counts.len() as f64;
    counts.iter().map(|&c| (f64::from(c) / total).ln()).sum::<f64>() / total
}

/// ApEn with r = factor·std over the (optionally capped) prefix; 0 for a
/// constant prefix.
pub fn apen_feature(x: &[f64], config: &FeatureConfig) -> Result<f64> {
    let x = match config.apen_max_samples {
        Some(cap) if cap < x.len() => &x[..cap],
        _ => x,
    };
    let sd = std(x)?;
    if sd == 0.0 {
        return Ok(0.0);
    }
    approximate_entropy(x, config.apen_m, config.apen_r_factor * sd)
}

/// The nine measures of one IMF in column order.
pub fn imf_measures(x: &[f64], config: &FeatureConfig) -> Result<[f64; 9]> {
    let eps = config.entropy_threshold_eps;
    Ok([
        std(x)?,
        mean(x)?,
        rms(x)?,
        shannon_entropy(x),
        log_energy_entropy(x),
        threshold_entropy(x, eps),
        if config.sure_enabled { sure_entropy(x, eps) } else { 0.0 },
        norm_entropy(x, config.norm_p),
        apen_feature(x, config)?,
    ])
}

pub fn column_names() -> Vec<String> {
    (1..=NUM_IMFS)
        .flat_map(|k| MEASURES.iter().map(move |m| format!("imf{k}_{m}")))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub record_id: String,
    pub offset: usize,
    pub label: ClassLabel,
    pub values: Vec<f64>,
}

pub fn extract_features(
    dec: &ImfDecomposition,
    record_id: &str,
    offset: usize,
    label: ClassLabel,
    config: &FeatureConfig,
) -> Result<FeatureVector> {
    if dec.imfs.len() != NUM_IMFS {
        return Err(Error::Input(format!(
            "feature extraction needs exactly {NUM_IMFS} IMFs, got {}",
            dec.imfs.len()
        )));
    }
    let mut values = Vec::with_capacity(NUM_FEATURES);
    for imf in &dec.imfs {
        values.extend_from_slice(&imf_measures(imf, config)?);
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Invariant(format!(
            "non-finite feature {} for {record_id}@{offset}",
            column_names()[i]
        )));
    }
    Ok(FeatureVector {
        record_id: record_id.to_string(),
        offset,
        label,
        values,
    })
}

pub fn write_features(path: &Path, rows: &[FeatureVector]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    writeln!(f, "{FEATURES_SCHEMA}").map_err(io)?;
    write!(f, "record_id,offset,label").map_err(io)?;
    for c in column_names() {
        write!(f, ",{c}").map_err(io)?;
    }
    writeln!(f).map_err(io)?;
    for row in rows {
        write!(f, "{},{},{}", row.record_id, row.offset, row.label).map_err(io)?;
        for v in &row.values {
            write!(f, ",{v:.16e}").map_err(io)?;
        }
        writeln!(f).map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureVector>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let mut next_line = |what: &str| -> Result<String> {
        match lines.next() {
            Some((_, Ok(l))) => Ok(l),
            Some((_, Err(e))) => Err(Error::io(path, e)),
            None => Err(Error::data(path, "end", format!("missing {what}"))),
        }
    };
    let schema = next_line("schema line")?;
    if schema.trim_end() != FEATURES_SCHEMA {
        return Err(Error::data(path, "line 1", format!("expected {FEATURES_SCHEMA:?}, got {schema:?}")));
    }
    let header = next_line("header row")?;
    let expected: Vec<String> = ["record_id", "offset", "label"]
        .iter()
        .map(|s| s.to_string())
        .chain(column_names())
        .collect();
    if header.trim_end().split(',').ne(expected.iter().map(String::as_str)) {
        return Err(Error::data(path, "line 2", "feature columns do not match the 45-column layout"));
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pos = format!("line {}", idx + 1);
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 3 + NUM_FEATURES {
            return Err(Error::data(path, pos, format!("expected {} fields, got {}", 3 + NUM_FEATURES, fields.len())));
        }
        let offset = fields[1]
            .parse()
            .map_err(|_| Error::data(path, pos.clone(), format!("bad offset {:?}", fields[1])))?;
        let label = fields[2]
            .parse()
            .map_err(|e: Error| Error::data(path, pos.clone(), e.to_string()))?;
        let values = fields[3..]
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::data(path, pos.clone(), format!("bad feature value {s:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(FeatureVector {
            record_id: fields[0].to_string(),
            offset,
            label,
            values,
        });
    }
    Ok(rows)
}
