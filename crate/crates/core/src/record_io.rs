//! ECG records on disk, AAMI beat classes, and class-duplication augmentation.
//!
//! A record is a directory:
//!
//! ```text
//! <record_id>/meta.json        {"record_id", "fs", "channel_names", "n_samples"}
//! <record_id>/signal.csv       header of channel names, one row per sample
//! <record_id>/annotations.csv  header "sample_index,symbol", one row per beat
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::BeatSegment;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: malformed meta.json: {detail}")]
    Meta { path: String, detail: String },
    #[error("{path}:{line}: {detail}")]
    Parse { path: String, line: usize, detail: String },
    #[error("{path}:{line}: non-monotone annotation index {index} (previous {previous})")]
    NonMonotone { path: String, line: usize, index: usize, previous: usize },
    #[error("{path}:{line}: annotation index {index} beyond {n_samples} samples")]
    AnnotationRange { path: String, line: usize, index: usize, n_samples: usize },
    #[error("{path}: channel length mismatch: expected {expected} samples, found {found}")]
    LengthMismatch { path: String, expected: usize, found: usize },
    #[error("invalid record: {0}")]
    Invalid(String),
}

/// AAMI heartbeat class. The discriminant is the class index used everywhere
/// (labels, logits, confusion matrices).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BeatClass {
    N = 0,
    V = 1,
    S = 2,
    F = 3,
}

impl BeatClass {
    pub const COUNT: usize = 4;
    pub const ALL: [BeatClass; 4] = [BeatClass::N, BeatClass::V, BeatClass::S, BeatClass::F];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            BeatClass::N => "N",
            BeatClass::V => "V",
            BeatClass::S => "S",
            BeatClass::F => "F",
        }
    }
}

impl fmt::Display for BeatClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Outcome of mapping an annotation symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymbolClass {
    Beat(BeatClass),
    /// Q-class, paced, and non-beat symbols.
    Rejected,
}

/// AAMI EC57 grouping of annotation symbols.
pub fn map_symbol(symbol: char) -> SymbolClass {
    match symbol {
        'N' | 'L' | 'R' | 'e' | 'j' => SymbolClass::Beat(BeatClass::N),
        'V' | 'E' => SymbolClass::Beat(BeatClass::V),
        'A' | 'a' | 'J' | 'S' => SymbolClass::Beat(BeatClass::S),
        'F' => SymbolClass::Beat(BeatClass::F),
        _ => SymbolClass::Rejected,
    }
}

/// Whether the symbol marks a heartbeat at all (as opposed to rhythm,
/// noise, or comment annotations). Rejected beats still anchor RR intervals.
pub fn is_beat_symbol(symbol: char) -> bool {
    matches!(symbol, 'N' | 'L' | 'R' | 'B' | 'A' | 'a' | 'J' | 'S' | 'V' | 'r' | 'F' | 'e' | 'j' | 'n' | 'E' | '/' | 'f' | 'Q' | '?')
}

#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub name: String,
    pub samples: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Annotation {
    pub sample_index: usize,
    pub symbol: char,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub record_id: String,
    pub channels: Vec<Channel>,
    pub fs: u32,
    pub annotations: Vec<Annotation>,
}

impl EcgRecord {
    pub fn n_samples(&self) -> usize {
        self.channels.first().map_or(0, |c| c.samples.len())
    }

    pub fn channel(&self, name: &str) -> Option<&Channel> {
        self.channels.iter().find(|c| c.name == name)
    }

    pub fn validate(&self) -> Result<(), RecordError> {
        if self.fs == 0 {
            return Err(RecordError::Invalid("fs must be positive".into()));
        }
        let n = self.n_samples();
        if self.channels.is_empty() || n == 0 {
            return Err(RecordError::Invalid("record needs at least one non-empty channel".into()));
        }
        if let Some(c) = self.channels.iter().find(|c| c.samples.len() != n) {
            return Err(RecordError::Invalid(format!("channel {} has {} samples, expected {n}", c.name, c.samples.len())));
        }
        for w in self.annotations.windows(2) {
            if w[1].sample_index <= w[0].sample_index {
                return Err(RecordError::Invalid(format!("non-monotone annotation index {}", w[1].sample_index)));
            }
        }
        if let Some(a) = self.annotations.last().filter(|a| a.sample_index >= n) {
            return Err(RecordError::Invalid(format!("annotation index {} beyond {n} samples", a.sample_index)));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    record_id: String,
    fs: u32,
    channel_names: Vec<String>,
    n_samples: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RecordError + '_ {
    move |source| RecordError::Io { path: path.display().to_string(), source }
}

/// Reads one record directory.
pub fn load_record(dir: &Path) -> Result<EcgRecord, RecordError> {
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: Meta = serde_json::from_str(&meta_text)
        .map_err(|e| RecordError::Meta { path: meta_path.display().to_string(), detail: e.to_string() })?;
    if meta.fs == 0 || meta.channel_names.is_empty() || meta.n_samples == 0 {
        return Err(RecordError::Meta {
            path: meta_path.display().to_string(),
            detail: "fs, channel_names and n_samples must be non-empty/positive".into(),
        });
    }

    let sig_path = dir.join("signal.csv");
    let sig_text = fs::read_to_string(&sig_path).map_err(io_err(&sig_path))?;
    let sp = sig_path.display().to_string();
    let mut lines = sig_text.split('\n');
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    if header != meta.channel_names.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(RecordError::Parse { path: sp, line: 1, detail: format!("header {header:?} does not match channel_names") });
    }
    let nch = header.len();
    let mut channels: Vec<Vec<f32>> = vec![Vec::with_capacity(meta.n_samples); nch];
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let lineno = i + 2;
        let mut count = 0;
        for (c, field) in line.split(',').enumerate() {
            if c >= nch {
                return Err(RecordError::Parse { path: sp, line: lineno, detail: format!("more than {nch} columns") });
            }
            let v: f32 = field
                .parse()
                .map_err(|_| RecordError::Parse { path: sp.clone(), line: lineno, detail: format!("bad sample {field:?}") })?;
            channels[c].push(v);
            count += 1;
        }
        if count != nch {
            return Err(RecordError::Parse { path: sp, line: lineno, detail: format!("expected {nch} columns, found {count}") });
        }
    }
    let found = channels[0].len();
    if found != meta.n_samples {
        return Err(RecordError::LengthMismatch { path: sp, expected: meta.n_samples, found });
    }

    let ann_path = dir.join("annotations.csv");
    let ann_text = fs::read_to_string(&ann_path).map_err(io_err(&ann_path))?;
    let ap = ann_path.display().to_string();
    let mut lines = ann_text.split('\n');
    if lines.next() != Some("sample_index,symbol") {
        return Err(RecordError::Parse { path: ap, line: 1, detail: "expected header sample_index,symbol".into() });
    }
    let mut annotations: Vec<Annotation> = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let lineno = i + 2;
        let bad = |detail: String| RecordError::Parse { path: ap.clone(), line: lineno, detail };
        let (idx, sym) = line.split_once(',').ok_or_else(|| bad(format!("expected two fields in {line:?}")))?;
        let index: usize = idx.parse().map_err(|_| bad(format!("bad sample index {idx:?}")))?;
        let mut chars = sym.chars();
        let symbol = match (chars.next(), chars.next()) {
            (Some(c), None) => c,
            _ => return Err(bad(format!("symbol must be one character, got {sym:?}"))),
        };
        if let Some(prev) = annotations.last() {
            if index <= prev.sample_index {
                return Err(RecordError::NonMonotone { path: ap, line: lineno, index, previous: prev.sample_index });
            }
        }
        if index >= meta.n_samples {
            return Err(RecordError::AnnotationRange { path: ap, line: lineno, index, n_samples: meta.n_samples });
        }
        annotations.push(Annotation { sample_index: index, symbol });
    }

    Ok(EcgRecord {
        record_id: meta.record_id,
        channels: meta
            .channel_names
            .into_iter()
            .zip(channels)
            .map(|(name, samples)| Channel { name, samples })
            .collect(),
        fs: meta.fs,
        annotations,
    })
}

/// Writes `record` under `parent/<record_id>/`. Samples use Rust's shortest
/// round-trip float formatting, so [`load_record`] recovers them exactly.
pub fn write_record(record: &EcgRecord, parent: &Path) -> Result<PathBuf, RecordError> {
    record.validate()?;
    let dir = parent.join(&record.record_id);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let meta = Meta {
        record_id: record.record_id.clone(),
        fs: record.fs,
        channel_names: record.channels.iter().map(|c| c.name.clone()).collect(),
        n_samples: record.n_samples(),
    };
    let meta_path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, text + "\n").map_err(io_err(&meta_path))?;

    let mut sig = meta.channel_names.join(",");
    sig.push('\n');
    for i in 0..record.n_samples() {
        for (c, ch) in record.channels.iter().enumerate() {
            if c > 0 {
                sig.push(',');
            }
            sig.push_str(&ch.samples[i].to_string());
        }
        sig.push('\n');
    }
    let sig_path = dir.join("signal.csv");
    fs::write(&sig_path, sig).map_err(io_err(&sig_path))?;

    let mut ann = String::from("sample_index,symbol\n");
    for a in &record.annotations {
        ann.push_str(&format!("{},{}\n", a.sample_index, a.symbol));
    }
    let ann_path = dir.join("annotations.csv");
    fs::write(&ann_path, ann).map_err(io_err(&ann_path))?;
    Ok(dir)
}

/// Loads every record directory (one containing `meta.json`) under `dir`,
/// sorted by directory name. `dir` may itself be a record directory.
pub fn load_records(dir: &Path) -> Result<Vec<EcgRecord>, RecordError> {
    if dir.join("meta.json").is_file() {
        return Ok(vec![load_record(dir)?]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(RecordError::Invalid(format!("no record directories under {}", dir.display())));
    }
    subdirs.iter().map(|p| load_record(p)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// Segments of one domain. Target labels, when present, are for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub segments: Vec<BeatSegment>,
    pub domain: Domain,
}

impl LabeledDataset {
    pub fn new(segments: Vec<BeatSegment>, domain: Domain) -> Self {
        Self { segments, domain }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Count per class, indexed by [`BeatClass::index`]. Unlabeled segments
    /// are not counted.
    pub fn class_counts(&self) -> [usize; BeatClass::COUNT] {
        let mut counts = [0; BeatClass::COUNT];
        for s in &self.segments {
            if let Some(c) = s.label {
                counts[c.index()] += 1;
            }
        }
        counts
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.segments.iter().all(|s| s.label.is_some())
    }

    pub fn labels(&self) -> Option<Vec<usize>> {
        self.segments.iter().map(|s| s.label.map(BeatClass::index)).collect()
    }

    /// Drops augmentation copies.
    pub fn originals(&self) -> Self {
        Self { segments: self.segments.iter().filter(|s| !s.duplicate).cloned().collect(), domain: self.domain }
    }
}

/// Extra copies per class, indexed by [`BeatClass::index`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentFactors(pub [usize; BeatClass::COUNT]);

impl Default for AugmentFactors {
    fn default() -> Self {
        Self([0, 2, 5, 10])
    }
}

/// Appends `factors[k]` exact copies of every class-`k` segment: originals
/// first, then copies grouped by class in N, V, S, F order. Copies are
/// flagged as duplicates. Unlabeled segments are kept but never copied.
pub fn augment(dataset: &LabeledDataset, factors: AugmentFactors) -> LabeledDataset {
    let mut segments = dataset.segments.clone();
    for class in BeatClass::ALL {
        let extra = factors.0[class.index()];
        for _ in 0..extra {
            for s in dataset.segments.iter().filter(|s| s.label == Some(class) && !s.duplicate) {
                let mut copy = s.clone();
                copy.duplicate = true;
                segments.push(copy);
            }
        }
    }
    LabeledDataset { segments, domain: dataset.domain }
}

/// Class counts after augmentation, without materializing segments.
pub fn augmented_counts(counts: [usize; BeatClass::COUNT], factors: AugmentFactors) -> [usize; BeatClass::COUNT] {
    let mut out = counts;
    for (o, f) in out.iter_mut().zip(factors.0) {
        *o *= f + 1;
    }
    out
}
