//! Denoising, resampling, beat segmentation and RR time features.
//!
//! Per record: band-pass at the native rate, resample to the common rate,
//! then cut one fixed-length window per annotated beat centred on its R-peak.
//! The window half-width comes from the mean RR interval of the source domain
//! and is reused for the target so both domains share one input length.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record_io::{is_beat_symbol, map_symbol, BeatClass, Domain, EcgRecord, LabeledDataset, SymbolClass};

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("signal of {len} samples is shorter than the {taps}-tap filter")]
    TooShort { len: usize, taps: usize },
    #[error("sampling rate {fs} Hz cannot carry a {band_hi} Hz passband")]
    RateTooLow { fs: u32, band_hi: f64 },
    #[error("invalid band [{lo}, {hi}] Hz for target rate {fs} Hz")]
    InvalidBand { lo: f64, hi: f64, fs: u32 },
    #[error("sampling rates must be positive")]
    ZeroRate,
    #[error("need at least 2 R-peaks, got {0}")]
    TooFewPeaks(usize),
    #[error("record {record} has no channel {channel:?}")]
    NoChannel { record: String, channel: String },
    #[error("segment cache: {0}")]
    Cache(String),
}

/// One beat: a window centred on the R-peak plus RR features in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct BeatSegment {
    pub waveform: Vec<f32>,
    pub rr_curr: f32,
    pub rr_pre: f32,
    pub rr_pre8: f32,
    pub label: Option<BeatClass>,
    pub source_record: String,
    /// R-peak index at the common sampling rate.
    pub r_index: usize,
    /// Set on augmentation copies.
    pub duplicate: bool,
}

impl BeatSegment {
    pub fn time_features(&self) -> [f32; 3] {
        [self.rr_curr, self.rr_pre, self.rr_pre8]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepConfig {
    pub band_lo: f64,
    pub band_hi: f64,
    pub target_fs: u32,
    /// FIR order at a 256 Hz reference rate; scaled with the actual rate.
    pub filter_order: usize,
    /// Channel to use; `None` picks the first channel of each record.
    pub channel: Option<String>,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self { band_lo: 3.0, band_hi: 20.0, target_fs: 256, filter_order: 256, channel: None }
    }
}

impl PrepConfig {
    pub fn validate(&self) -> Result<(), SignalError> {
        let nyq = self.target_fs as f64 / 2.0;
        if !(self.band_lo > 0.0 && self.band_lo < self.band_hi && self.band_hi < nyq) || self.filter_order < 2 {
            return Err(SignalError::InvalidBand { lo: self.band_lo, hi: self.band_hi, fs: self.target_fs });
        }
        Ok(())
    }

    /// Number of FIR taps used at sampling rate `fs` (always odd).
    pub fn taps_at(&self, fs: u32) -> usize {
        let order = (self.filter_order as f64 * fs as f64 / 256.0).round() as usize;
        (order / 2) * 2 + 1
    }
}

fn hamming(n: usize, i: usize) -> f64 {
    0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos()
}

fn lowpass_taps(fc: f64, fs: f64, n: usize) -> Vec<f64> {
    let mid = (n - 1) as f64 / 2.0;
    let wc = fc / fs;
    let mut h: Vec<f64> = (0..n)
        .map(|i| {
            let x = i as f64 - mid;
            let s = if x == 0.0 { 2.0 * wc } else { (2.0 * PI * wc * x).sin() / (PI * x) };
            s * hamming(n, i)
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    h
}

/// Windowed-sinc band-pass taps (difference of two unit-DC low-passes, so the
/// DC gain is exactly zero).
pub fn bandpass_taps(cfg: &PrepConfig, fs: u32) -> Vec<f64> {
    let n = cfg.taps_at(fs);
    let hi = lowpass_taps(cfg.band_hi, fs as f64, n);
    let lo = lowpass_taps(cfg.band_lo, fs as f64, n);
    let h: Vec<f64> = hi.iter().zip(&lo).map(|(a, b)| a - b).collect();
    // scale so the passband ripple peaks at exactly unit gain
    let peak = (0..=200)
        .map(|i| {
            let f = cfg.band_lo + (cfg.band_hi - cfg.band_lo) * i as f64 / 200.0;
            let w = 2.0 * std::f64::consts::PI * f / fs as f64;
            let (re, im) = h.iter().enumerate().fold((0.0, 0.0), |(re, im), (k, hk)| {
                (re + hk * (w * k as f64).cos(), im - hk * (w * k as f64).sin())
            });
            re.hypot(im)
        })
        .fold(0.0, f64::max);
    h.into_iter().map(|v| v / peak).collect()
}

/// Centred FIR pass with odd-symmetric extension at both ends.
fn fir_centered(x: &[f64], h: &[f64]) -> Vec<f64> {
    let half = h.len() / 2;
    let n = x.len();
    let ext = |i: isize| -> f64 {
        if i < 0 {
            2.0 * x[0] - x[(-i) as usize]
        } else if i as usize >= n {
            2.0 * x[n - 1] - x[2 * (n - 1) - i as usize]
        } else {
            x[i as usize]
        }
    };
    (0..n)
        .map(|i| h.iter().enumerate().map(|(k, hk)| hk * ext(i as isize + k as isize - half as isize)).sum())
        .collect()
}

/// Zero-phase band-pass: the FIR is applied forward and then backward.
pub fn bandpass(signal: &[f32], fs: u32, cfg: &PrepConfig) -> Result<Vec<f32>, SignalError> {
    if fs == 0 {
        return Err(SignalError::ZeroRate);
    }
    if fs as f64 <= 2.0 * cfg.band_hi {
        return Err(SignalError::RateTooLow { fs, band_hi: cfg.band_hi });
    }
    let h = bandpass_taps(cfg, fs);
    if signal.len() <= h.len() {
        return Err(SignalError::TooShort { len: signal.len(), taps: h.len() });
    }
    let x: Vec<f64> = signal.iter().map(|&v| v as f64).collect();
    let mut y = fir_centered(&x, &h);
    y.reverse();
    let mut y = fir_centered(&y, &h);
    y.reverse();
    Ok(y.into_iter().map(|v| v as f32).collect())
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Output length of [`resample`]: `round(n * fs_out / fs_in)`.
pub fn resampled_len(n: usize, fs_in: u32, fs_out: u32) -> usize {
    let (n, a, b) = (n as u128, fs_out as u128, fs_in as u128);
    ((2 * n * a + b) / (2 * b)) as usize
}

/// Rational polyphase resampling with a Blackman-windowed sinc anti-aliasing
/// kernel cut at 0.45 of the lower rate.
pub fn resample(signal: &[f32], fs_in: u32, fs_out: u32) -> Result<Vec<f32>, SignalError> {
    if fs_in == 0 || fs_out == 0 {
        return Err(SignalError::ZeroRate);
    }
    if fs_in == fs_out {
        return Ok(signal.to_vec());
    }
    let g = gcd(fs_in as u64, fs_out as u64);
    let (up, down) = ((fs_out as u64 / g) as usize, (fs_in as u64 / g) as usize);
    let fc = 0.45 * fs_in.min(fs_out) as f64 / fs_in as f64; // cycles per input sample
    const ZERO_CROSSINGS: f64 = 16.0;
    let reach = (ZERO_CROSSINGS / (2.0 * fc)).ceil() as isize;

    // table[phase][j] weights input sample floor(p) + j - reach + 1
    let width = (2 * reach) as usize;
    let table: Vec<Vec<f64>> = (0..up)
        .map(|phase| {
            let frac = phase as f64 / up as f64;
            let mut taps: Vec<f64> = (0..width)
                .map(|j| {
                    let d = frac - (j as isize - reach + 1) as f64;
                    let x = d / reach as f64;
                    if x.abs() >= 1.0 {
                        return 0.0;
                    }
                    let w = 0.42 + 0.5 * (PI * x).cos() + 0.08 * (2.0 * PI * x).cos();
                    let arg = 2.0 * fc * d;
                    let s = if arg == 0.0 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
                    2.0 * fc * s * w
                })
                .collect();
            let sum: f64 = taps.iter().sum();
            taps.iter_mut().for_each(|t| *t /= sum);
            taps
        })
        .collect();

    let n = signal.len();
    let out_len = resampled_len(n, fs_in, fs_out);
    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len {
        let pos = m * down;
        let base = (pos / up) as isize;
        let taps = &table[pos % up];
        let mut acc = 0.0f64;
        for (j, t) in taps.iter().enumerate() {
            let idx = base + j as isize - reach + 1;
            if idx >= 0 && (idx as usize) < n {
                acc += t * signal[idx as usize] as f64;
            }
        }
        out.push(acc as f32);
    }
    Ok(out)
}

/// Mean RR interval in samples, rounded down.
pub fn compute_rr_mean(r_peaks: &[usize]) -> Result<usize, SignalError> {
    pooled_rr_mean(&[r_peaks])
}

/// Mean over the successive intervals of every peak list, rounded down.
/// Intervals never span two lists.
pub fn pooled_rr_mean(peak_lists: &[&[usize]]) -> Result<usize, SignalError> {
    let mut total = 0usize;
    let mut count = 0usize;
    for peaks in peak_lists {
        for w in peaks.windows(2) {
            total += w[1] - w[0];
            count += 1;
        }
    }
    if count == 0 {
        return Err(SignalError::TooFewPeaks(peak_lists.iter().map(|p| p.len()).max().unwrap_or(0)));
    }
    Ok(total / count)
}

/// Inclusive window `[r - rr_mean/2, r + rr_mean/2]`, or `None` when it
/// crosses the signal boundary.
pub fn beat_window(signal: &[f32], r: usize, rr_mean: usize) -> Option<&[f32]> {
    let half = rr_mean / 2;
    if r < half || r + half >= signal.len() {
        return None;
    }
    Some(&signal[r - half..=r + half])
}

pub fn segment_len(rr_mean: usize) -> usize {
    2 * (rr_mean / 2) + 1
}

/// Windows for every peak that fits; returns them with the number dropped.
pub fn segment(signal: &[f32], r_peaks: &[usize], rr_mean: usize) -> (Vec<(Vec<f32>, usize)>, usize) {
    let mut out = Vec::with_capacity(r_peaks.len());
    let mut dropped = 0;
    for &r in r_peaks {
        match beat_window(signal, r, rr_mean) {
            Some(w) => out.push((w.to_vec(), r)),
            None => dropped += 1,
        }
    }
    (out, dropped)
}

/// `(rr_curr, rr_pre, rr_pre8)` in seconds for beat `i`; `None` for the first
/// beat, which has no preceding interval.
pub fn time_features(r_peaks: &[usize], i: usize, fs: u32) -> Option<(f64, f64, f64)> {
    if i == 0 || i >= r_peaks.len() || fs == 0 {
        return None;
    }
    let fs = fs as f64;
    let rr_curr = (r_peaks[i] - r_peaks[i - 1]) as f64 / fs;
    let rr_pre = (r_peaks[i] - r_peaks[0]) as f64 / i as f64 / fs;
    let m = i.min(8);
    let rr_pre8 = (r_peaks[i] - r_peaks[i - m]) as f64 / m as f64 / fs;
    Some((rr_curr, rr_pre, rr_pre8))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PrepStats {
    pub beats: usize,
    pub emitted: usize,
    pub rejected_class: usize,
    pub dropped_boundary: usize,
    pub dropped_first: usize,
}

impl std::ops::AddAssign for PrepStats {
    fn add_assign(&mut self, o: Self) {
        self.beats += o.beats;
        self.emitted += o.emitted;
        self.rejected_class += o.rejected_class;
        self.dropped_boundary += o.dropped_boundary;
        self.dropped_first += o.dropped_first;
    }
}

/// Band-passed, resampled channel plus beat peaks at native and common rate.
#[derive(Debug, Clone)]
pub struct CleanRecord {
    pub signal: Vec<f32>,
    pub peaks_native: Vec<usize>,
    pub peaks: Vec<usize>,
    pub symbols: Vec<char>,
}

pub fn clean_record(record: &EcgRecord, cfg: &PrepConfig) -> Result<CleanRecord, SignalError> {
    let channel = match &cfg.channel {
        Some(name) => record
            .channel(name)
            .ok_or_else(|| SignalError::NoChannel { record: record.record_id.clone(), channel: name.clone() })?,
        None => record
            .channels
            .first()
            .ok_or_else(|| SignalError::NoChannel { record: record.record_id.clone(), channel: "<first>".into() })?,
    };
    let filtered = bandpass(&channel.samples, record.fs, cfg)?;
    let signal = resample(&filtered, record.fs, cfg.target_fs)?;
    let beats: Vec<_> = record.annotations.iter().filter(|a| is_beat_symbol(a.symbol)).collect();
    let peaks_native: Vec<usize> = beats.iter().map(|a| a.sample_index).collect();
    let peaks = peaks_native
        .iter()
        .map(|&p| resampled_len(p, record.fs, cfg.target_fs))
        .collect();
    Ok(CleanRecord { signal, peaks_native, peaks, symbols: beats.iter().map(|a| a.symbol).collect() })
}

/// Segments one cleaned record. RR features come from the native-rate peak
/// indices, so they are exact in seconds.
pub fn segment_record(record_id: &str, fs_native: u32, clean: &CleanRecord, rr_mean: usize) -> (Vec<BeatSegment>, PrepStats) {
    let mut stats = PrepStats { beats: clean.peaks.len(), ..Default::default() };
    let mut out = Vec::new();
    for (i, (&r, &sym)) in clean.peaks.iter().zip(&clean.symbols).enumerate() {
        let SymbolClass::Beat(label) = map_symbol(sym) else {
            stats.rejected_class += 1;
            continue;
        };
        let Some((rr_curr, rr_pre, rr_pre8)) = time_features(&clean.peaks_native, i, fs_native) else {
            stats.dropped_first += 1;
            continue;
        };
        let Some(w) = beat_window(&clean.signal, r, rr_mean) else {
            stats.dropped_boundary += 1;
            continue;
        };
        out.push(BeatSegment {
            waveform: w.to_vec(),
            rr_curr: rr_curr as f32,
            rr_pre: rr_pre as f32,
            rr_pre8: rr_pre8 as f32,
            label: Some(label),
            source_record: record_id.to_string(),
            r_index: r,
            duplicate: false,
        });
    }
    stats.emitted = out.len();
    (out, stats)
}

/// A preprocessed domain: segments plus the RR mean that fixed their length.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: LabeledDataset,
    pub rr_mean: usize,
    pub stats: PrepStats,
}

/// Preprocesses records. With `rr_mean = None` (the source domain) the RR
/// mean is computed from these records' beats at the common rate.
pub fn prepare(records: &[EcgRecord], cfg: &PrepConfig, rr_mean: Option<usize>, domain: Domain) -> Result<Prepared, SignalError> {
    cfg.validate()?;
    let cleaned = records.iter().map(|r| clean_record(r, cfg)).collect::<Result<Vec<_>, _>>()?;
    let rr_mean = match rr_mean {
        Some(v) => v,
        None => pooled_rr_mean(&cleaned.iter().map(|c| c.peaks.as_slice()).collect::<Vec<_>>())?,
    };
    let mut segments = Vec::new();
    let mut stats = PrepStats::default();
    for (rec, clean) in records.iter().zip(&cleaned) {
        let (segs, s) = segment_record(&rec.record_id, rec.fs, clean, rr_mean);
        debug!(
            "{}: {} beats, {} segments, {} at boundary, {} rejected",
            rec.record_id, s.beats, s.emitted, s.dropped_boundary, s.rejected_class
        );
        segments.extend(segs);
        stats += s;
    }
    Ok(Prepared { dataset: LabeledDataset::new(segments, domain), rr_mean, stats })
}

const CACHE_MAGIC: &[u8; 4] = b"ECSG";

/// Segment cache: `"ECSG" | L | fs | rr_mean | count` (u32 LE), then per
/// segment `L` waveform floats, three feature floats (f32 LE) and a label
/// byte (255 = unlabeled).
pub fn write_cache(path: &Path, prepared: &Prepared, fs: u32) -> Result<(), SignalError> {
    let l = segment_len(prepared.rr_mean);
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    for v in [l as u32, fs, prepared.rr_mean as u32, prepared.dataset.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in &prepared.dataset.segments {
        if s.waveform.len() != l {
            return Err(SignalError::Cache(format!("segment of length {} in a length-{l} dataset", s.waveform.len())));
        }
        for v in s.waveform.iter().chain(&s.time_features()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(s.label.map_or(255, |c| c.index() as u8));
    }
    fs::write(path, out).map_err(|e| SignalError::Cache(format!("{}: {e}", path.display())))
}

pub fn read_cache(path: &Path, domain: Domain) -> Result<Prepared, SignalError> {
    let bytes = fs::read(path).map_err(|e| SignalError::Cache(format!("{}: {e}", path.display())))?;
    let bad = |d: &str| SignalError::Cache(format!("{}: {d}", path.display()));
    if bytes.len() < 20 || &bytes[..4] != CACHE_MAGIC {
        return Err(bad("not a segment cache"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (l, rr_mean, count) = (word(0), word(2), word(3));
    let rec = 4 * (l + 3) + 1;
    if bytes.len() != 20 + rec * count {
        return Err(bad("size does not match header"));
    }
    let floats = |b: &[u8]| -> Vec<f32> { b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect() };
    let mut segments = Vec::with_capacity(count);
    for chunk in bytes[20..].chunks_exact(rec) {
        let vals = floats(&chunk[..4 * (l + 3)]);
        let label = match chunk[rec - 1] {
            255 => None,
            k => Some(BeatClass::from_index(k as usize).ok_or_else(|| bad("label byte out of range"))?),
        };
        segments.push(BeatSegment {
            waveform: vals[..l].to_vec(),
            rr_curr: vals[l],
            rr_pre: vals[l + 1],
            rr_pre8: vals[l + 2],
            label,
            source_record: String::new(),
            r_index: 0,
            duplicate: false,
        });
    }
    Ok(Prepared { dataset: LabeledDataset::new(segments, domain), rr_mean, stats: PrepStats::default() })
}
