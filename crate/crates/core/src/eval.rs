//! Confusion matrices, per-class Se / PPV / F1 and report files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{infer, Model, NetError};
use crate::record_io::{BeatClass, LabeledDataset};

const K: usize = BeatClass::COUNT;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset has unlabeled segments; evaluation needs labels")]
    Unlabeled,
    #[error("{truth} labels but {pred} predictions")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("class index {0} out of range")]
    ClassRange(usize),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("writing {path}: {detail}")]
    Write { path: String, detail: String },
    #[error("metrics json: {0}")]
    Json(String),
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[u64; K]; K],
}

impl ConfusionMatrix {
    pub fn from_predictions(truth: &[usize], pred: &[usize]) -> Result<Self, EvalError> {
        if truth.len() != pred.len() {
            return Err(EvalError::LengthMismatch { truth: truth.len(), pred: pred.len() });
        }
        let mut cm = Self::default();
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= K || p >= K {
                return Err(EvalError::ClassRange(t.max(p)));
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn tp(&self, k: usize) -> u64 {
        self.counts[k][k]
    }

    /// Class-`k` samples predicted as something else.
    pub fn false_negatives(&self, k: usize) -> u64 {
        self.counts[k].iter().sum::<u64>() - self.tp(k)
    }

    /// Other classes predicted as `k`.
    pub fn false_positives(&self, k: usize) -> u64 {
        (0..K).map(|t| self.counts[t][k]).sum::<u64>() - self.tp(k)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for c in BeatClass::ALL {
            s.push_str(&format!(",{c}"));
        }
        s.push('\n');
        for c in BeatClass::ALL {
            s.push_str(c.name());
            for v in self.counts[c.index()] {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }

    /// Row-normalized heatmap, `cell` pixels per entry, white to dark blue.
    pub fn heatmap(&self, cell: u32) -> image::RgbImage {
        let mut img = image::RgbImage::new(cell * K as u32, cell * K as u32);
        for t in 0..K {
            let row: u64 = self.counts[t].iter().sum();
            for p in 0..K {
                let frac = if row == 0 { 0.0 } else { self.counts[t][p] as f64 / row as f64 };
                let shade = |full: f64, lo: f64| (full + (lo - full) * frac).round() as u8;
                let color = image::Rgb([shade(255.0, 8.0), shade(255.0, 48.0), shade(255.0, 107.0)]);
                for y in 0..cell {
                    for x in 0..cell {
                        img.put_pixel(p as u32 * cell + x, t as u32 * cell + y, color);
                    }
                }
            }
        }
        img
    }
}

/// `2 * se * ppv / (se + ppv)`, or 0 when both are 0.
pub fn f1_score(se: f64, ppv: f64) -> f64 {
    if se + ppv > 0.0 { 2.0 * se * ppv / (se + ppv) } else { 0.0 }
}

/// Percentages; `None` where the ratio is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub se: Option<f64>,
    pub ppv: Option<f64>,
    /// `None` only when the class has no true samples; a class that is
    /// present but never predicted scores 0.
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTable {
    #[serde(rename = "N")]
    pub n: ClassMetrics,
    #[serde(rename = "V")]
    pub v: ClassMetrics,
    #[serde(rename = "S")]
    pub s: ClassMetrics,
    #[serde(rename = "F")]
    pub f: ClassMetrics,
}

impl ClassTable {
    pub fn get(&self, c: BeatClass) -> &ClassMetrics {
        match c {
            BeatClass::N => &self.n,
            BeatClass::V => &self.v,
            BeatClass::S => &self.s,
            BeatClass::F => &self.f,
        }
    }

    fn map(&self, f: impl Fn(&ClassMetrics) -> ClassMetrics) -> Self {
        Self { n: f(&self.n), v: f(&self.v), s: f(&self.s), f: f(&self.f) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub model: String,
    pub augmented: bool,
    pub overall_accuracy: f64,
    pub classes: ClassTable,
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix, dataset: &str, model: &str, augmented: bool) -> Self {
        let pct = |num: u64, den: u64| (den > 0).then(|| 100.0 * num as f64 / den as f64);
        let per = |k: usize| {
            let tp = cm.tp(k);
            let se = pct(tp, tp + cm.false_negatives(k));
            let ppv = pct(tp, tp + cm.false_positives(k));
            let f1 = se.map(|s| f1_score(s, ppv.unwrap_or(0.0)));
            ClassMetrics { se, ppv, f1 }
        };
        let trace: u64 = (0..K).map(|k| cm.tp(k)).sum();
        Self {
            dataset: dataset.into(),
            model: model.into(),
            augmented,
            overall_accuracy: pct(trace, cm.total()).unwrap_or(0.0),
            classes: ClassTable { n: per(0), v: per(1), s: per(2), f: per(3) },
        }
    }

    /// Mean F1 over classes with at least one true sample.
    pub fn macro_f1(&self) -> f64 {
        let v: Vec<f64> = BeatClass::ALL.iter().filter_map(|c| self.classes.get(*c).f1).collect();
        if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 }
    }

    /// Every percentage rounded to two decimals, as written to disk.
    pub fn rounded(&self) -> Self {
        let r = |m: &ClassMetrics| ClassMetrics { se: m.se.map(round2), ppv: m.ppv.map(round2), f1: m.f1.map(round2) };
        Self { overall_accuracy: round2(self.overall_accuracy), classes: self.classes.map(r), ..self.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.rounded()).expect("report serializes") + "\n"
    }

    pub fn from_json(s: &str) -> Result<Self, EvalError> {
        serde_json::from_str(s).map_err(|e| EvalError::Json(e.to_string()))
    }
}

/// Runs `model` over a labeled dataset.
pub fn evaluate(model: &Model, data: &LabeledDataset, dataset_id: &str, model_id: &str, augmented: bool) -> Result<(ConfusionMatrix, MetricsReport), EvalError> {
    let truth = data.labels().ok_or(EvalError::Unlabeled)?;
    let refs: Vec<_> = data.segments.iter().collect();
    let out = infer(model, &refs, 256)?;
    let cm = ConfusionMatrix::from_predictions(&truth, &out.predicted)?;
    let report = MetricsReport::from_confusion(&cm, dataset_id, model_id, augmented);
    Ok((cm, report))
}

/// Writes `metrics.json`, `confusion.csv` and optionally `confusion.png`.
pub fn emit_report(report: &MetricsReport, cm: &ConfusionMatrix, out_dir: &Path, heatmap: bool) -> Result<(), EvalError> {
    let werr = |p: &Path, e: &dyn std::fmt::Display| EvalError::Write { path: p.display().to_string(), detail: e.to_string() };
    fs::create_dir_all(out_dir).map_err(|e| werr(out_dir, &e))?;
    let m = out_dir.join("metrics.json");
    fs::write(&m, report.to_json()).map_err(|e| werr(&m, &e))?;
    let c = out_dir.join("confusion.csv");
    fs::write(&c, cm.to_csv()).map_err(|e| werr(&c, &e))?;
    if heatmap {
        let p = out_dir.join("confusion.png");
        cm.heatmap(48).save(&p).map_err(|e| werr(&p, &e))?;
    }
    Ok(())
}
