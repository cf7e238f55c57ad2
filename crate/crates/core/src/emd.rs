//! Empirical Mode Decomposition by envelope sifting.
//!
//! Upper and lower envelopes are cubic splines through the local maxima and
//! minima. The two extrema nearest each end are mirrored across the signal
//! boundary before fitting so the splines cover the whole domain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spline::CubicSpline;

pub const MIN_SEGMENT_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmdConfig {
    pub num_imfs: usize,
    /// Cauchy stop: sum (h_prev - h)^2 / sum h_prev^2 below this value.
    pub sd_stop: f64,
    pub max_sift_iters: usize,
    /// Envelope-mean tolerance as a fraction of the signal RMS.
    pub symmetry_tol: f64,
    /// Use "zero crossings >= maxima" instead of |crossings - extrema| <= 1.
    pub strict_crossing_count: bool,
}

impl Default for EmdConfig {
    fn default() -> Self {
        Self {
            num_imfs: 5,
            sd_stop: 0.2,
            max_sift_iters: 100,
            symmetry_tol: 0.05,
            strict_crossing_count: false,
        }
    }
}

impl EmdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_imfs == 0 {
            return Err(Error::Config("emd.num_imfs must be at least 1".into()));
        }
        if !(self.sd_stop > 0.0 && self.sd_stop < 1.0) {
            return Err(Error::Config(format!("emd.sd_stop must lie in (0, 1), got {}", self.sd_stop)));
        }
        if self.max_sift_iters == 0 {
            return Err(Error::Config("emd.max_sift_iters must be at least 1".into()));
        }
        if !(self.symmetry_tol > 0.0) {
            return Err(Error::Config("emd.symmetry_tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Extrema {
    pub max_idx: Vec<usize>,
    pub max_val: Vec<f64>,
    pub min_idx: Vec<usize>,
    pub min_val: Vec<f64>,
}

impl Extrema {
    pub fn count(&self) -> usize {
        self.max_idx.len() + self.min_idx.len()
    }
}

/// Interior local extrema by three-point comparison. A flat run bounded on
/// both sides by lower (higher) samples counts once, at its midpoint.
pub fn find_extrema(signal: &[f64]) -> Extrema {
    let mut ext = Extrema::default();
    let n = signal.len();
    if n < 3 {
        return ext;
    }
    let mut i = 1;
    while i < n - 1 {
        let prev = signal[i - 1];
        let cur = signal[i];
        if cur == prev {
            i += 1;
            continue;
        }
        let mut j = i;
        while j + 1 < n && signal[j + 1] == cur {
            j += 1;
        }
        if j + 1 >= n {
            break;
        }
        let next = signal[j + 1];
        let mid = (i + j) / 2;
        if cur > prev && cur > next {
            ext.max_idx.push(mid);
            ext.max_val.push(cur);
        } else if cur < prev && cur < next {
            ext.min_idx.push(mid);
            ext.min_val.push(cur);
        }
        i = j + 1;
    }
    ext
}

/// Sign changes, skipping exact zeros.
pub fn zero_crossings(signal: &[f64]) -> usize {
    let mut count = 0;
    let mut last = 0.0f64;
    for &v in signal {
        if v == 0.0 {
            continue;
        }
        if last != 0.0 && (v > 0.0) != (last > 0.0) {
            count += 1;
        }
        last = v;
    }
    count
}

/// Cubic envelope through `(idx, val)` knots after mirroring the two knots
/// nearest each boundary. Returns `None` when no knot exists.
pub fn envelope(idx: &[usize], val: &[f64], len: usize) -> Option<Vec<f64>> {
    if idx.is_empty() || len == 0 {
        return None;
    }
    let last = (len - 1) as f64;
    let k = idx.len().min(2);
    let mut xs = Vec::with_capacity(idx.len() + 2 * k);
    let mut ys = Vec::with_capacity(idx.len() + 2 * k);
    for i in (0..k).rev() {
        xs.push(-(idx[i] as f64));
        ys.push(val[i]);
    }
    for (&i, &v) in idx.iter().zip(val) {
        xs.push(i as f64);
        ys.push(v);
    }
    for i in (idx.len() - k..idx.len()).rev() {
        xs.push(2.0 * last - idx[i] as f64);
        ys.push(val[i]);
    }
    // Extrema sit strictly inside, so mirrored knots never collide; dedup in
    // case a caller passes boundary indices.
    let mut keep_x = Vec::with_capacity(xs.len());
    let mut keep_y = Vec::with_capacity(ys.len());
    for (x, y) in xs.into_iter().zip(ys) {
        if keep_x.last().is_none_or(|&p| x > p) {
            keep_x.push(x);
            keep_y.push(y);
        }
    }
    if keep_x.len() < 2 {
        return None;
    }
    CubicSpline::not_a_knot(&keep_x, &keep_y)
        .ok()
        .map(|s| s.sample_grid(len))
}

/// Mean of the upper and lower envelopes, if both exist.
fn envelope_mean(signal: &[f64], ext: &Extrema) -> Option<Vec<f64>> {
    let upper = envelope(&ext.max_idx, &ext.max_val, signal.len())?;
    let lower = envelope(&ext.min_idx, &ext.min_val, signal.len())?;
    Some(upper.iter().zip(&lower).map(|(u, l)| 0.5 * (u + l)).collect())
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn admissible(signal: &[f64], ext: &Extrema, mean_env: &[f64], config: &EmdConfig) -> bool {
    let zc = zero_crossings(signal);
    let counts_ok = if config.strict_crossing_count {
        zc >= ext.max_idx.len()
    } else {
        zc.abs_diff(ext.count()) <= 1
    };
    if !counts_ok {
        return false;
    }
    let asym = mean_env.iter().map(|m| m.abs()).sum::<f64>() / mean_env.len() as f64;
    asym <= config.symmetry_tol * rms(signal)
}

/// IMF admissibility: crossing/extrema counts and envelope symmetry.
pub fn is_imf(signal: &[f64], config: &EmdConfig) -> bool {
    if signal.len() < 3 {
        return false;
    }
    let ext = find_extrema(signal);
    match envelope_mean(signal, &ext) {
        Some(m) => admissible(signal, &ext, &m, config),
        None => false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiftOutcome {
    pub imf: Vec<f64>,
    pub iterations: usize,
}

/// Extracts one IMF from `signal` by repeated envelope-mean subtraction.
pub fn sift(signal: &[f64], config: &EmdConfig) -> Result<SiftOutcome> {
    let ext = find_extrema(signal);
    if ext.max_idx.len() < 2 || ext.min_idx.len() < 2 {
        return Err(Error::Input(
            "no IMF extractable: signal needs at least 2 maxima and 2 minima".into(),
        ));
    }
    let mut h = signal.to_vec();
    let mut ext = ext;
    let mut last_sd: Option<f64> = None;
    let mut iterations = 0;
    loop {
        let Some(mean_env) = envelope_mean(&h, &ext) else {
            // sifting flattened the candidate; keep what we have
            return Ok(SiftOutcome { imf: h, iterations });
        };
        if let Some(sd) = last_sd {
            if sd < config.sd_stop && admissible(&h, &ext, &mean_env, config) {
                return Ok(SiftOutcome { imf: h, iterations });
            }
        }
        if iterations == config.max_sift_iters {
            return Ok(SiftOutcome { imf: h, iterations });
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for (v, m) in h.iter_mut().zip(&mean_env) {
            den += *v * *v;
            *v -= m;
            num += m * m;
        }
        last_sd = Some(if den > 0.0 { num / den } else { 0.0 });
        iterations += 1;
        ext = find_extrema(&h);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImfDecomposition {
    pub imfs: Vec<Vec<f64>>,
    pub residual: Vec<f64>,
    /// Sift iterations per extracted IMF.
    pub iterations: Vec<usize>,
    /// Fewer than `num_imfs` IMFs could be extracted; the rest are zero.
    pub incomplete: bool,
}

impl ImfDecomposition {
    pub fn extracted(&self) -> usize {
        self.iterations.len()
    }

    pub fn reconstruct(&self) -> Vec<f64> {
        let mut sum = self.residual.clone();
        for imf in &self.imfs {
            for (s, v) in sum.iter_mut().zip(imf) {
                *s += v;
            }
        }
        sum
    }
}

pub fn decompose(segment: &[f64], config: &EmdConfig) -> Result<ImfDecomposition> {
    config.validate()?;
    if segment.len() < MIN_SEGMENT_LEN {
        return Err(Error::Input(format!(
            "segment of length {} is shorter than {MIN_SEGMENT_LEN}",
            segment.len()
        )));
    }
    let n = segment.len();
    let mut residual = segment.to_vec();
    let mut imfs = Vec::with_capacity(config.num_imfs);
    let mut iterations = Vec::with_capacity(config.num_imfs);
    while imfs.len() < config.num_imfs {
        let ext = find_extrema(&residual);
        if ext.max_idx.len() < 2 || ext.min_idx.len() < 2 {
            break;
        }
        let out = sift(&residual, config)?;
        for (r, v) in residual.iter_mut().zip(&out.imf) {
            *r -= v;
        }
        imfs.push(out.imf);
        iterations.push(out.iterations);
    }
    let incomplete = imfs.len() < config.num_imfs;
    imfs.resize(config.num_imfs, vec![0.0; n]);
    Ok(ImfDecomposition {
        imfs,
        residual,
        iterations,
        incomplete,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn two_tone(n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let t = |i: usize| i as f64 / 1000.0;
        let slow: Vec<f64> = (0..n).map(|i| (2.0 * PI * 5.0 * t(i)).sin()).collect();
        let fast: Vec<f64> = (0..n).map(|i| (2.0 * PI * 50.0 * t(i)).sin()).collect();
        let sum = slow.iter().zip(&fast).map(|(a, b)| a + b).collect();
        (sum, slow, fast)
    }

    fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    fn zc_rate(x: &[f64]) -> f64 {
        zero_crossings(x) as f64 / x.len() as f64
    }

    #[test]
    fn extrema_basic() {
        let e = find_extrema(&[0.0, 1.0, 0.0]);
        assert_eq!(e.max_idx, vec![1]);
        assert!(e.min_idx.is_empty());

        let mono: Vec<f64> = (0..20).map(f64::from).collect();
        assert_eq!(find_extrema(&mono).count(), 0);
    }

    #[test]
    fn plateau_counts_once_at_midpoint() {
        let e = find_extrema(&[0.0, 2.0, 2.0, 2.0, 0.0, -1.0, -1.0, 0.0]);
        assert_eq!(e.max_idx, vec![2]);
        assert_eq!(e.min_idx, vec![5]);
        // a step is not an extremum
        assert_eq!(find_extrema(&[0.0, 1.0, 1.0, 2.0]).count(), 0);
    }

    #[test]
    fn sine_extrema_at_analytic_positions() {
        let s: Vec<f64> = (0..200).map(|i| (2.0 * PI * i as f64 / 100.0).sin()).collect();
        let e = find_extrema(&s);
        assert_eq!(e.max_idx.len(), 2);
        assert_eq!(e.min_idx.len(), 2);
        for (got, want) in e.max_idx.iter().zip([25.0, 125.0]) {
            assert!((*got as f64 - want).abs() <= 1.0);
        }
        for (got, want) in e.min_idx.iter().zip([75.0, 175.0]) {
            assert!((*got as f64 - want).abs() <= 1.0);
        }
    }

    #[test]
    fn envelope_through_knots_and_degenerate() {
        let env = envelope(&[3, 9], &[1.0, 1.0], 13).unwrap();
        assert!(env.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(envelope(&[], &[], 10).is_none());
        let env = envelope(&[2, 5, 8, 11], &[0.0, 3.0, 6.0, 9.0], 14).unwrap();
        assert_eq!(env.len(), 14);
        for (k, want) in [(2, 0.0), (5, 3.0), (8, 6.0), (11, 9.0)] {
            assert!((env[k] - want).abs() < 1e-9, "{k}: {}", env[k]);
        }
    }

    #[test]
    fn imf_check_examples() {
        let cfg = EmdConfig::default();
        let sine: Vec<f64> = (0..1000).map(|i| (2.0 * PI * i as f64 / 50.0).sin()).collect();
        assert!(is_imf(&sine, &cfg));

        let offset: Vec<f64> = sine.iter().map(|v| v + 5.0).collect();
        assert!(!is_imf(&offset, &cfg));

        let (tt, _, _) = two_tone(1000);
        assert!(!is_imf(&tt, &cfg));
    }

    #[test]
    fn sine_is_a_sift_fixed_point() {
        let s: Vec<f64> = (0..1000).map(|i| (2.0 * PI * i as f64 / 40.0).sin()).collect();
        let out = sift(&s, &EmdConfig::default()).unwrap();
        assert!(out.iterations <= 5, "{} iterations", out.iterations);
        assert!(rel_l2(&out.imf, &s) <= 1e-3, "{}", rel_l2(&out.imf, &s));
    }

    #[test]
    fn ramp_has_no_imf() {
        let ramp: Vec<f64> = (0..100).map(|i| i as f64 * 0.5).collect();
        let err = sift(&ramp, &EmdConfig::default()).unwrap_err();
        assert!(err.to_string().contains("no IMF extractable"));
    }

    #[test]
    fn two_tone_sift_yields_imf() {
        let cfg = EmdConfig::default();
        let (tt, _, _) = two_tone(1000);
        let out = sift(&tt, &cfg).unwrap();
        assert!(is_imf(&out.imf, &cfg));
    }

    #[test]
    fn constant_segment_gives_zero_imfs() {
        let seg = vec![2.5; 64];
        let d = decompose(&seg, &EmdConfig::default()).unwrap();
        assert_eq!(d.imfs.len(), 5);
        assert!(d.imfs.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(d.residual, seg);
        assert!(d.incomplete);
    }

    #[test]
    fn short_segment_rejected() {
        assert!(decompose(&[1.0; 15], &EmdConfig::default()).is_err());
    }

    #[test]
    fn two_tone_separation_and_ordering() {
        let (tt, _, fast) = two_tone(1000);
        let d = decompose(&tt, &EmdConfig::default()).unwrap();
        let lo = 100;
        let hi = 900;
        let corr = pearson(&d.imfs[0][lo..hi], &fast[lo..hi]);
        assert!(corr >= 0.95, "corr {corr}");
        for k in 0..4 {
            assert!(zc_rate(&d.imfs[k]) >= zc_rate(&d.imfs[k + 1]), "imf {k}");
        }
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn random_segments_reconstruct_and_are_ordered() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let cfg = EmdConfig::default();
        for _ in 0..20 {
            let seg: Vec<f64> = (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let d = decompose(&seg, &cfg).unwrap();
            assert!(rel_l2(&d.reconstruct(), &seg) <= 1e-9);
            for k in 0..4 {
                assert!(zc_rate(&d.imfs[k]) >= zc_rate(&d.imfs[k + 1]));
            }
            let energy: f64 = d
                .imfs
                .iter()
                .chain(std::iter::once(&d.residual))
                .map(|x| x.iter().map(|v| v * v).sum::<f64>())
                .sum();
            let seg_energy: f64 = seg.iter().map(|v| v * v).sum();
            assert!(energy <= 1.5 * seg_energy);
        }
    }

    #[test]
    fn decomposition_is_deterministic() {
        let (tt, _, _) = two_tone(777);
        let a = decompose(&tt, &EmdConfig::default()).unwrap();
        let b = decompose(&tt, &EmdConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn strict_mode_uses_literal_count_rule() {
        let cfg = EmdConfig {
            strict_crossing_count: true,
            ..EmdConfig::default()
        };
        let sine: Vec<f64> = (0..1000).map(|i| (2.0 * PI * i as f64 / 50.0).sin()).collect();
        assert!(is_imf(&sine, &cfg));
    }

    #[test]
    fn config_validation() {
        let bad = EmdConfig {
            sd_stop: 1.5,
            ..EmdConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(EmdConfig {
            num_imfs: 0,
            ..EmdConfig::default()
        }
        .validate()
        .is_err());
    }
}
