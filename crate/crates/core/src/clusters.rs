//! Class centroids in feature space, cluster statistics and the
//! confident-prediction gate used to pseudo-label target beats.
//!
//! Feature and probability tables are row-major `&[f32]` slices; sums are
//! accumulated in `f64` in sample order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::record_io::BeatClass;

const K: usize = BeatClass::COUNT;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("no samples for class(es) {0:?}")]
    MissingClasses(Vec<BeatClass>),
    #[error("empty input")]
    Empty,
    #[error("{0}")]
    Shape(String),
    #[error("cluster state file, line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("cluster state {path}: {detail}")]
    Io { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, ClusterError>;

/// A partial map from class index to a `dim`-wide centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    dim: usize,
    rows: [Option<Vec<f32>>; K],
}

impl Centroids {
    pub fn new(dim: usize) -> Self {
        Self { dim, rows: Default::default() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, k: usize) -> Option<&Vec<f32>> {
        self.rows.get(k).and_then(Option::as_ref)
    }

    pub fn set(&mut self, k: usize, v: Vec<f32>) {
        assert_eq!(v.len(), self.dim, "centroid width");
        self.rows[k] = Some(v);
    }

    pub fn classes(&self) -> Vec<BeatClass> {
        BeatClass::ALL.into_iter().filter(|c| self.rows[c.index()].is_some()).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(Option::is_some)
    }

    /// Element-wise mean of two centroid sets over their common classes.
    pub fn midpoint(&self, other: &Self) -> Self {
        let mut out = Self::new(self.dim);
        for k in 0..K {
            if let (Some(a), Some(b)) = (self.get(k), other.get(k)) {
                out.set(k, a.iter().zip(b).map(|(x, y)| ((*x as f64 + *y as f64) / 2.0) as f32).collect());
            }
        }
        out
    }

    /// Smallest distance between two distinct defined centroids.
    pub fn min_pairwise_distance(&self) -> Option<f64> {
        let rows: Vec<&Vec<f32>> = self.rows.iter().flatten().collect();
        let mut best: Option<f64> = None;
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let d = dist(rows[i], rows[j]);
                best = Some(best.map_or(d, |b| b.min(d)));
            }
        }
        best
    }
}

pub fn dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt()
}

fn check_table(features: &[f32], dim: usize, labels: &[usize]) -> Result<()> {
    if dim == 0 || features.len() != labels.len() * dim {
        return Err(ClusterError::Shape(format!("{} feature values for {} labels of width {dim}", features.len(), labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= K) {
        return Err(ClusterError::Shape(format!("label {l} out of range")));
    }
    Ok(())
}

/// Per-class means of the feature rows. Every class must occur.
pub fn compute_centroids(features: &[f32], dim: usize, labels: &[usize]) -> Result<Centroids> {
    let c = partial_centroids(features, dim, labels)?;
    let missing: Vec<BeatClass> = BeatClass::ALL.into_iter().filter(|k| c.get(k.index()).is_none()).collect();
    if missing.is_empty() { Ok(c) } else { Err(ClusterError::MissingClasses(missing)) }
}

/// Per-class means for whichever classes occur.
pub fn partial_centroids(features: &[f32], dim: usize, labels: &[usize]) -> Result<Centroids> {
    check_table(features, dim, labels)?;
    let mut sums = vec![vec![0.0f64; dim]; K];
    let mut counts = [0usize; K];
    for (row, &k) in features.chunks(dim).zip(labels) {
        counts[k] += 1;
        for (s, v) in sums[k].iter_mut().zip(row) {
            *s += *v as f64;
        }
    }
    let mut out = Centroids::new(dim);
    for k in 0..K {
        if counts[k] > 0 {
            out.set(k, sums[k].iter().map(|s| (s / counts[k] as f64) as f32).collect());
        }
    }
    Ok(out)
}

/// `M_ctr[k]`: mean distance of class-`k` rows to their centroid.
pub fn mean_intra_cluster_distance(features: &[f32], dim: usize, labels: &[usize], cc: &Centroids) -> Result<[f64; K]> {
    check_table(features, dim, labels)?;
    let mut sums = [0.0f64; K];
    let mut counts = [0usize; K];
    for (row, &k) in features.chunks(dim).zip(labels) {
        let c = cc.get(k).ok_or_else(|| ClusterError::MissingClasses(vec![BeatClass::from_index(k).expect("checked")]))?;
        sums[k] += dist(row, c);
        counts[k] += 1;
    }
    let empty: Vec<BeatClass> = BeatClass::ALL.into_iter().filter(|k| counts[k.index()] == 0).collect();
    if !empty.is_empty() {
        return Err(ClusterError::MissingClasses(empty));
    }
    Ok([0, 1, 2, 3].map(|k| sums[k] / counts[k] as f64))
}

/// `M_dis`: mean distance between the two heads' probability rows.
pub fn mean_classifier_discrepancy(p1: &[f32], p2: &[f32]) -> Result<f64> {
    if p1.len() != p2.len() || p1.len() % K != 0 {
        return Err(ClusterError::Shape(format!("probability tables of {} and {} values", p1.len(), p2.len())));
    }
    if p1.is_empty() {
        return Err(ClusterError::Empty);
    }
    let n = p1.len() / K;
    Ok(p1.chunks(K).zip(p2.chunks(K)).map(|(a, b)| dist(a, b)).sum::<f64>() / n as f64)
}

/// Thresholds of the confident-prediction gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gate {
    /// Combined probability must exceed this.
    pub min_prob: f64,
    /// Multiplier on `M_ctr`.
    pub ctr_scale: f64,
    /// Multiplier on `M_dis`.
    pub dis_scale: f64,
}

impl Default for Gate {
    fn default() -> Self {
        Self { min_prob: 0.99, ctr_scale: 1.0, dis_scale: 1.0 }
    }
}

/// Inputs of the gate for one target pass.
#[derive(Debug, Clone, Copy)]
pub struct GateInputs<'a> {
    pub features: &'a [f32],
    pub dim: usize,
    pub probs: &'a [f32],
    pub probs1: &'a [f32],
    pub probs2: &'a [f32],
}

/// Indices (with their predicted class) that pass all three conditions:
/// combined probability above the gate, feature distance to the source
/// centroid below `M_ctr`, and head disagreement below `M_dis`.
pub fn select_confident(x: GateInputs<'_>, cc_s: &Centroids, m_ctr: &[f64; K], m_dis: f64, gate: Gate) -> Vec<(usize, usize)> {
    let n = x.probs.len() / K;
    let mut out = Vec::new();
    for i in 0..n {
        let row = &x.probs[i * K..(i + 1) * K];
        let k = crate::net::argmax(row);
        if (row[k] as f64) <= gate.min_prob {
            continue;
        }
        let Some(c) = cc_s.get(k) else { continue };
        if dist(&x.features[i * x.dim..(i + 1) * x.dim], c) >= m_ctr[k] * gate.ctr_scale {
            continue;
        }
        if dist(&x.probs1[i * K..(i + 1) * K], &x.probs2[i * K..(i + 1) * K]) >= m_dis * gate.dis_scale {
            continue;
        }
        out.push((i, k));
    }
    out
}

/// Target centroids from confident samples. Classes without any confident
/// sample borrow the source centroid; the returned flags mark them.
pub fn compute_target_centroids(confident: &[(usize, usize)], features: &[f32], dim: usize, cc_s: &Centroids) -> (Centroids, [bool; K]) {
    let mut rows = Vec::with_capacity(confident.len() * dim);
    let mut labels = Vec::with_capacity(confident.len());
    for &(i, k) in confident {
        rows.extend_from_slice(&features[i * dim..(i + 1) * dim]);
        labels.push(k);
    }
    let mut cc_t = partial_centroids(&rows, dim, &labels).unwrap_or_else(|_| Centroids::new(dim));
    let mut fallback = [false; K];
    for k in 0..K {
        if cc_t.get(k).is_none() {
            if let Some(v) = cc_s.get(k) {
                cc_t.set(k, v.clone());
            }
            fallback[k] = true;
        }
    }
    (cc_t, fallback)
}

pub fn confident_counts(confident: &[(usize, usize)]) -> [usize; K] {
    let mut c = [0; K];
    for &(_, k) in confident {
        c[k] += 1;
    }
    c
}

/// Source and target cluster statistics carried into adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    pub cc_s: Centroids,
    pub cc_t: Centroids,
    /// Always the midpoint of `cc_s` and `cc_t`.
    pub cc_m: Centroids,
    pub m_ctr: [f64; K],
    pub m_dis: f64,
    pub confident_count: [usize; K],
    /// Classes whose target centroid fell back to the source centroid.
    pub fallback: [bool; K],
}

impl ClusterState {
    pub fn new(cc_s: Centroids, m_ctr: [f64; K], m_dis: f64) -> Self {
        let cc_t = cc_s.clone();
        let cc_m = cc_s.clone();
        Self { cc_s, cc_t, cc_m, m_ctr, m_dis, confident_count: [0; K], fallback: [true; K] }
    }

    /// Replaces the target side from a confident selection and refreshes
    /// `cc_m`.
    pub fn set_target(&mut self, confident: &[(usize, usize)], features: &[f32], dim: usize) {
        let (cc_t, fallback) = compute_target_centroids(confident, features, dim, &self.cc_s);
        self.cc_t = cc_t;
        self.fallback = fallback;
        self.confident_count = confident_counts(confident);
        self.cc_m = self.cc_s.midpoint(&self.cc_t);
    }

    /// Line-oriented text form. Floats use shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dim {}", self.cc_s.dim());
        let _ = writeln!(s, "m_dis {}", self.m_dis);
        for c in BeatClass::ALL {
            let k = c.index();
            let _ = writeln!(s, "class {c} m_ctr {} confident {} fallback {}", self.m_ctr[k], self.confident_count[k], self.fallback[k] as u8);
            for (tag, set) in [("cc_s", &self.cc_s), ("cc_t", &self.cc_t), ("cc_m", &self.cc_m)] {
                if let Some(v) = set.get(k) {
                    let _ = write!(s, "{tag} {c}");
                    for x in v {
                        let _ = write!(s, " {x}");
                    }
                    s.push('\n');
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let perr = |line: usize, detail: String| ClusterError::Parse { line, detail };
        let mut dim = None;
        let mut m_dis = None;
        let mut m_ctr = [0.0; K];
        let mut counts = [0; K];
        let mut fallback = [false; K];
        let mut sets: [Option<Centroids>; 3] = Default::default();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let toks: Vec<&str> = raw.split_whitespace().collect();
            let class_of = |t: &str| {
                BeatClass::ALL.into_iter().find(|c| c.name() == t).ok_or_else(|| perr(line, format!("unknown class {t:?}")))
            };
            let num = |t: &str| t.parse::<f64>().map_err(|e| perr(line, format!("{t:?}: {e}")));
            match toks.as_slice() {
                [] => {}
                ["dim", d] => dim = Some(d.parse::<usize>().map_err(|e| perr(line, e.to_string()))?),
                ["m_dis", v] => m_dis = Some(num(v)?),
                ["class", c, "m_ctr", m, "confident", n, "fallback", f] => {
                    let k = class_of(c)?.index();
                    m_ctr[k] = num(m)?;
                    counts[k] = n.parse().map_err(|e: std::num::ParseIntError| perr(line, e.to_string()))?;
                    fallback[k] = *f == "1";
                }
                [tag @ ("cc_s" | "cc_t" | "cc_m"), c, vals @ ..] => {
                    let d = dim.ok_or_else(|| perr(line, "centroid before dim".into()))?;
                    if vals.len() != d {
                        return Err(perr(line, format!("{} values, expected {d}", vals.len())));
                    }
                    let v = vals.iter().map(|t| t.parse::<f32>().map_err(|e| perr(line, e.to_string()))).collect::<Result<Vec<_>>>()?;
                    let slot = ["cc_s", "cc_t", "cc_m"].iter().position(|t| t == tag).expect("matched");
                    sets[slot].get_or_insert_with(|| Centroids::new(d)).set(class_of(c)?.index(), v);
                }
                _ => return Err(perr(line, format!("unrecognized line {raw:?}"))),
            }
        }
        let dim = dim.ok_or_else(|| perr(0, "missing dim".into()))?;
        let [cc_s, cc_t, cc_m] = sets.map(|s| s.unwrap_or_else(|| Centroids::new(dim)));
        Ok(Self { cc_s, cc_t, cc_m, m_ctr, m_dis: m_dis.ok_or_else(|| perr(0, "missing m_dis".into()))?, confident_count: counts, fallback })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| ClusterError::Io { path: path.display().to_string(), detail: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ClusterError::Io { path: path.display().to_string(), detail: e.to_string() })?;
        Self::from_text(&text)
    }
}
