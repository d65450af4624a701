//! Synthetic quasi-ECG records for desk-scale experiments.
//!
//! Every beat is a sum of Gaussian bumps (P, QRS, T) whose widths,
//! amplitudes and timing depend on the class:
//!
//! | class | rhythm                          | morphology                      |
//! |-------|---------------------------------|---------------------------------|
//! | N     | regular                         | P, narrow QRS, upright T        |
//! | V     | premature, compensatory pause   | no P, wide tall QRS, inverted T |
//! | S     | premature                       | inverted early P, narrow QRS    |
//! | F     | slightly early                  | small P, medium QRS, flat T     |
//!
//! The target domain is sampled at a different rate and differs by an
//! amplitude scale, a baseline offset with slow wander, and extra noise, all
//! proportional to `shift`.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::record_io::{write_record, Annotation, BeatClass, Channel, Domain, EcgRecord, RecordError};
use crate::signal::{prepare, PrepConfig, Prepared, SignalError};

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureConfig {
    pub source_beats: usize,
    pub target_beats: usize,
    pub source_fs: u32,
    pub target_fs: u32,
    /// Domain shift strength, 0 = same distribution.
    pub shift: f64,
    /// Class proportions N, V, S, F.
    pub priors: [f64; 4],
    pub beats_per_record: usize,
    /// Noise standard deviation in both domains before the shift is added.
    pub noise: f64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            source_beats: 2000,
            target_beats: 2000,
            source_fs: 360,
            target_fs: 257,
            shift: 0.5,
            priors: [0.70, 0.15, 0.10, 0.05],
            beats_per_record: 250,
            noise: 0.03,
        }
    }
}

/// Target amplitude change per unit of shift.
const AMP_PER_SHIFT: f64 = -0.5;
/// Baseline offset and wander amplitude per unit of shift.
const WANDER_PER_SHIFT: f64 = 0.5;
/// Extra target noise standard deviation per unit of shift.
const NOISE_PER_SHIFT: f64 = 0.2;

/// Leading beats without a preceding interval; these are never segmented.
const WARMUP: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Fixtures {
    pub source: Vec<EcgRecord>,
    pub target: Vec<EcgRecord>,
}

struct Wave {
    center: f64,
    width: f64,
    amp: f64,
}

fn morphology(class: BeatClass) -> [Wave; 3] {
    let w = |center, width, amp| Wave { center, width, amp };
    match class {
        BeatClass::N => [w(-0.20, 0.025, 0.15), w(0.0, 0.012, 1.0), w(0.25, 0.045, 0.30)],
        BeatClass::V => [w(-0.20, 0.025, 0.0), w(0.0, 0.035, 1.35), w(0.30, 0.060, -0.45)],
        BeatClass::S => [w(-0.14, 0.020, -0.12), w(0.0, 0.012, 0.95), w(0.24, 0.045, 0.28)],
        BeatClass::F => [w(-0.20, 0.025, 0.07), w(0.0, 0.022, 1.15), w(0.27, 0.050, 0.05)],
    }
}

/// RR interval preceding a beat of `class`, and the one after it, as
/// multiples of the record's base interval.
fn timing(class: BeatClass) -> (f64, f64) {
    match class {
        BeatClass::N => (1.0, 1.0),
        BeatClass::V => (0.62, 1.38),
        BeatClass::S => (0.68, 1.0),
        BeatClass::F => (0.93, 1.0),
    }
}

fn symbol(class: BeatClass) -> char {
    match class {
        BeatClass::N => 'N',
        BeatClass::V => 'V',
        BeatClass::S => 'A',
        BeatClass::F => 'F',
    }
}

/// Exact per-class counts for `n` beats (largest-remainder rounding).
pub fn class_counts(n: usize, priors: &[f64; 4]) -> [usize; 4] {
    let total: f64 = priors.iter().sum();
    let raw = priors.map(|p| p / total * n as f64);
    let mut counts = raw.map(|r| r.floor() as usize);
    let mut rest: Vec<usize> = (0..4).collect();
    rest.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &k in rest.iter().take(n - counts.iter().sum::<usize>()) {
        counts[k] += 1;
    }
    counts
}

fn domain_records(cfg: &FixtureConfig, n: usize, fs: u32, shift: f64, prefix: &str, rng: &mut ChaCha8Rng) -> Vec<EcgRecord> {
    let counts = class_counts(n, &cfg.priors);
    let mut classes: Vec<BeatClass> = BeatClass::ALL.iter().flat_map(|&c| std::iter::repeat_n(c, counts[c.index()])).collect();
    classes.shuffle(rng);
    let per = cfg.beats_per_record.max(1);
    let noise = Normal::new(0.0, cfg.noise + NOISE_PER_SHIFT * shift).expect("finite noise level");
    let scale = 1.0 + AMP_PER_SHIFT * shift;
    let fsf = fs as f64;
    classes
        .chunks(per)
        .enumerate()
        .map(|(r, chunk)| {
            let base_rr: f64 = rng.random_range(0.70..0.95);
            let gain: f64 = rng.random_range(0.9..1.1);
            let mut beats: Vec<BeatClass> = vec![BeatClass::N; WARMUP];
            beats.extend_from_slice(chunk);
            let mut times = Vec::with_capacity(beats.len());
            let mut t = 1.0;
            let mut next_factor = 1.0;
            for &b in &beats {
                let (pre, post) = timing(b);
                let factor = if b == BeatClass::N { next_factor } else { pre };
                t += base_rr * factor * rng.random_range(0.97..1.03);
                times.push(t);
                next_factor = post;
            }
            let n_samples = ((t + 1.0) * fsf).ceil() as usize;
            let mut x = vec![0.0f64; n_samples];
            for (&b, &tb) in beats.iter().zip(&times) {
                let jitter: f64 = rng.random_range(0.92..1.08);
                for wv in morphology(b) {
                    let c = tb + wv.center;
                    let width = wv.width * jitter;
                    let lo = (((c - 5.0 * width) * fsf).floor().max(0.0)) as usize;
                    let hi = (((c + 5.0 * width) * fsf).ceil() as usize).min(n_samples);
                    for (i, v) in x.iter_mut().enumerate().take(hi).skip(lo) {
                        let z = (i as f64 / fsf - c) / width;
                        *v += gain * wv.amp * (-0.5 * z * z).exp();
                    }
                }
            }
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let samples = x
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let wander = WANDER_PER_SHIFT * shift * (1.0 + (std::f64::consts::TAU * 0.2 * i as f64 / fsf + phase).sin());
                    (scale * v + wander + noise.sample(rng)) as f32
                })
                .collect();
            let annotations = beats
                .iter()
                .zip(&times)
                .map(|(&b, &tb)| Annotation { sample_index: (tb * fsf).round() as usize, symbol: symbol(b) })
                .collect();
            EcgRecord {
                record_id: format!("{prefix}{r:03}"),
                channels: vec![Channel { name: "ECG".into(), samples }],
                fs,
                annotations,
            }
        })
        .collect()
}

/// Deterministic source and target records for `seed`.
pub fn generate(cfg: &FixtureConfig, seed: u64) -> Fixtures {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = domain_records(cfg, cfg.source_beats, cfg.source_fs, 0.0, "s", &mut rng);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let target = domain_records(cfg, cfg.target_beats, cfg.target_fs, cfg.shift, "t", &mut rng);
    Fixtures { source, target }
}

impl Fixtures {
    /// Writes `<dir>/source/<id>/...` and `<dir>/target/<id>/...`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf), RecordError> {
        let (s, t) = (dir.join("source"), dir.join("target"));
        for (d, recs) in [(&s, &self.source), (&t, &self.target)] {
            std::fs::create_dir_all(d).map_err(|e| RecordError::Io { path: d.display().to_string(), source: e })?;
            for r in recs {
                write_record(r, d)?;
            }
        }
        Ok((s, t))
    }

    /// Preprocessed source and target with default settings; the target
    /// reuses the source's RR mean.
    pub fn prepared(&self) -> Result<(Prepared, Prepared), SignalError> {
        let cfg = PrepConfig::default();
        let s = prepare(&self.source, &cfg, None, Domain::Source)?;
        let t = prepare(&self.target, &cfg, Some(s.rr_mean), Domain::Target)?;
        Ok((s, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_follow_priors_exactly() {
        assert_eq!(class_counts(2000, &[0.70, 0.15, 0.10, 0.05]), [1400, 300, 200, 100]);
        assert_eq!(class_counts(7, &[0.5, 0.5, 0.0, 0.0]).iter().sum::<usize>(), 7);
    }

    #[test]
    fn generation_is_deterministic_and_segments_every_beat() {
        let cfg = FixtureConfig { source_beats: 300, target_beats: 200, ..Default::default() };
        let a = generate(&cfg, 3);
        assert_eq!(a, generate(&cfg, 3));
        assert_ne!(a.target, generate(&cfg, 4).target);
        assert!(a.target.iter().all(|r| r.fs == 257) && a.source.iter().all(|r| r.fs == 360));
        let (s, t) = a.prepared().unwrap();
        assert_eq!(s.dataset.len(), 300);
        assert_eq!(t.dataset.len(), 200);
        assert_eq!(s.dataset.class_counts(), class_counts(300, &cfg.priors));
    }
}
