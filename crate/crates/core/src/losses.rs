//! Training objectives, built on the autodiff graph so every term is
//! differentiable with respect to logits, features and centroids.
//!
//! Centroid sets enter as `[K, D]` nodes whose row `k` belongs to class `k`;
//! see [`centroid_node`] for building one from a [`Centroids`] map.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Real, Var};
use crate::clusters::Centroids;
use crate::record_io::BeatClass;

const K: usize = BeatClass::COUNT;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {0} out of range 0..4")]
    LabelOutOfRange(usize),
    #[error("no centroid for class {0}")]
    MissingCentroid(BeatClass),
    #[error("centroid sets cover different classes: {0:?} vs {1:?}")]
    KeyMismatch(Vec<BeatClass>, Vec<BeatClass>),
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
    pub t_m: f64,
    /// Per-class multipliers of the cross-entropy, indexed by class.
    pub class_weights: [f64; K],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            gamma1: 0.1,
            gamma2: 0.1,
            beta1: 0.1,
            beta2: 0.1,
            beta3: 0.5,
            beta4: 0.1,
            t_m: 10.0,
            class_weights: [1.0; K],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("alpha", self.alpha),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("beta3", self.beta3),
            ("beta4", self.beta4),
        ];
        if let Some((n, v)) = named.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(LossError::InvalidWeights(format!("{n} = {v} must be a finite value >= 0")));
        }
        if !(self.t_m > 0.0 && self.t_m.is_finite()) {
            return Err(LossError::InvalidWeights(format!("tm = {} must be > 0", self.t_m)));
        }
        if self.class_weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(LossError::InvalidWeights(format!("class weights {:?} must be > 0", self.class_weights)));
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize]) -> Result<()> {
    match labels.iter().find(|&&l| l >= K) {
        Some(&l) => Err(LossError::LabelOutOfRange(l)),
        None => Ok(()),
    }
}

/// Per-sample `-w[y_i] * log softmax(logits_i)[y_i]`, shape `[B]`.
pub fn weighted_ce<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize], weights: &[f64; K]) -> Result<Var> {
    if labels.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    check_labels(labels)?;
    let ls = g.log_softmax(logits);
    let picked = g.gather_cols(ls, labels)?;
    Ok(g.mul_const(picked, labels.iter().map(|&y| T::of(-weights[y])).collect())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DroMode {
    /// Worst present group's mean loss.
    #[default]
    Max,
    /// Exponentiated-gradient group weights carried across batches.
    Ema,
}

impl FromStr for DroMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "max" => Ok(Self::Max),
            "ema" => Ok(Self::Ema),
            _ => Err(format!("unknown DRO mode {s:?} (expected max or ema)")),
        }
    }
}

impl fmt::Display for DroMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Max => "max",
            Self::Ema => "ema",
        })
    }
}

/// Group DRO over class groups. Holds the group weights for the `ema` mode.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupDro {
    pub mode: DroMode,
    pub eta: f64,
    pub q: [f64; K],
}

impl GroupDro {
    pub fn new(mode: DroMode, eta: f64) -> Self {
        Self { mode, eta, q: [1.0 / K as f64; K] }
    }

    /// Reduces per-sample losses `[B]` grouped by `groups` to a scalar.
    pub fn apply<T: Real>(&mut self, g: &mut Graph<T>, per_sample: Var, groups: &[usize]) -> Result<Var> {
        if groups.is_empty() {
            return Err(LossError::EmptyBatch);
        }
        check_labels(groups)?;
        if groups.len() != g.value(per_sample).len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "group_dro",
                detail: format!("{} losses, {} groups", g.value(per_sample).len(), groups.len()),
            }
            .into());
        }
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); K];
        for (i, &k) in groups.iter().enumerate() {
            members[k].push(i);
        }
        let present: Vec<usize> = (0..K).filter(|&k| !members[k].is_empty()).collect();
        let means = g.group_mean_rows(per_sample, present.iter().map(|&k| members[k].clone()).collect())?;
        match self.mode {
            DroMode::Max => Ok(g.max(means)),
            DroMode::Ema => {
                for (j, &k) in present.iter().enumerate() {
                    self.q[k] *= (self.eta * g.value(means)[j].as_f64()).exp();
                }
                let total: f64 = self.q.iter().sum();
                self.q.iter_mut().for_each(|q| *q /= total);
                let w = present.iter().map(|&k| T::of(self.q[k])).collect();
                let weighted = g.mul_const(means, w)?;
                Ok(g.sum(weighted))
            }
        }
    }
}

/// Mean over the batch of `||p1_i - p2_i||`.
pub fn discrepancy<T: Real>(g: &mut Graph<T>, p1: Var, p2: Var) -> Result<Var> {
    let d = g.euclidean(p1, p2)?;
    Ok(g.mean(d))
}

/// `(1/B) * sum_i ||f_i - c[y_i]||` for features `[B, D]`, centroids `[K, D]`.
pub fn compacting<T: Real>(g: &mut Graph<T>, features: Var, labels: &[usize], centroids: Var) -> Result<Var> {
    if labels.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    check_labels(labels)?;
    let targets = g.gather_rows(centroids, labels)?;
    let d = g.euclidean(features, targets)?;
    Ok(g.mean(d))
}

/// `sum_{k != l} max(t_m - ||c_k - c_l||, 0)` over ordered pairs of the rows
/// of `centroids`.
pub fn separating<T: Real>(g: &mut Graph<T>, centroids: Var, t_m: f64) -> Result<Var> {
    let m = g.shape(centroids)[0];
    if m < 2 {
        log::warn!("separating loss needs at least two centroids, got {m}");
        return Ok(g.constant(vec![1], vec![T::zero()])?);
    }
    let (a, b): (Vec<usize>, Vec<usize>) = (0..m).flat_map(|k| (0..m).filter(move |&l| l != k).map(move |l| (k, l))).unzip();
    let ca = g.gather_rows(centroids, &a)?;
    let cb = g.gather_rows(centroids, &b)?;
    let d = g.euclidean(ca, cb)?;
    let slack = g.affine(d, -T::one(), T::of(t_m));
    let hinge = g.relu(slack);
    Ok(g.sum(hinge))
}

/// `sum_k ||cc_s[k] - cc_t[k]||` over matching rows.
pub fn interdomain_cd<T: Real>(g: &mut Graph<T>, cc_s: Var, cc_t: Var) -> Result<Var> {
    let d = g.euclidean(cc_s, cc_t)?;
    Ok(g.sum(d))
}

/// Per-class means of the rows of `features` for the classes present in
/// `labels`, returned as `[P, D]` with the class of each row.
pub fn batch_centroids<T: Real>(g: &mut Graph<T>, features: Var, labels: &[usize]) -> Result<Option<(Var, Vec<usize>)>> {
    check_labels(labels)?;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); K];
    for (i, &k) in labels.iter().enumerate() {
        members[k].push(i);
    }
    let classes: Vec<usize> = (0..K).filter(|&k| !members[k].is_empty()).collect();
    if classes.is_empty() {
        return Ok(None);
    }
    let groups = classes.iter().map(|&k| std::mem::take(&mut members[k])).collect();
    Ok(Some((g.group_mean_rows(features, groups)?, classes)))
}

/// `sum ||batch_cc[j] - cc_m[classes[j]]||` over the classes present in the
/// batch.
pub fn running_combined<T: Real>(g: &mut Graph<T>, batch_cc: Var, classes: &[usize], cc_m: Var) -> Result<Var> {
    if classes.is_empty() {
        log::warn!("running combined loss: no class present in the batch");
        return Ok(g.constant(vec![1], vec![T::zero()])?);
    }
    check_labels(classes)?;
    let anchors = g.gather_rows(cc_m, classes)?;
    let d = g.euclidean(batch_cc, anchors)?;
    Ok(g.sum(d))
}

/// Records a centroid map as a constant `[K, D]` node. Every class in
/// `needed` must have a centroid; other missing rows are zero-filled.
pub fn centroid_node<T: Real>(g: &mut Graph<T>, c: &Centroids, needed: &[usize]) -> Result<Var> {
    check_labels(needed)?;
    if let Some(&k) = needed.iter().find(|&&k| c.get(k).is_none()) {
        return Err(LossError::MissingCentroid(BeatClass::from_index(k).expect("checked")));
    }
    let mut data = Vec::with_capacity(K * c.dim());
    for k in 0..K {
        match c.get(k) {
            Some(v) => data.extend(v.iter().map(|&x| T::of(x as f64))),
            None => data.extend(std::iter::repeat_n(T::zero(), c.dim())),
        }
    }
    Ok(g.constant(vec![K, c.dim()], data)?)
}

/// The defined rows of `c` as a constant `[M, D]` node.
pub fn present_centroid_node<T: Real>(g: &mut Graph<T>, c: &Centroids) -> Result<Var> {
    let rows: Vec<&Vec<f32>> = (0..K).filter_map(|k| c.get(k)).collect();
    let data = rows.iter().flat_map(|r| r.iter().map(|&x| T::of(x as f64))).collect();
    Ok(g.constant(vec![rows.len(), c.dim()], data)?)
}

/// Inter-domain discrepancy between two centroid maps covering the same
/// classes.
pub fn interdomain_cd_maps<T: Real>(g: &mut Graph<T>, cc_s: &Centroids, cc_t: &Centroids) -> Result<Var> {
    let (ks, kt) = (cc_s.classes(), cc_t.classes());
    if ks != kt {
        return Err(LossError::KeyMismatch(ks, kt));
    }
    let a = present_centroid_node(g, cc_s)?;
    let b = present_centroid_node(g, cc_t)?;
    interdomain_cd(g, a, b)
}

/// Stage-1 objective `L_cls + alpha * L_dis`.
pub fn pretrain_total<T: Real>(g: &mut Graph<T>, w: &LossWeights, l_cls: Var, l_dis: Var) -> Result<Var> {
    Ok(g.weighted_sum(&[(l_cls, T::one()), (l_dis, T::of(w.alpha))])?)
}

/// Stage-2 objective `L_cls + gamma1 * L_comp + gamma2 * L_sep`.
pub fn cluster_total<T: Real>(g: &mut Graph<T>, w: &LossWeights, l_cls: Var, l_comp: Var, l_sep: Var) -> Result<Var> {
    Ok(g.weighted_sum(&[(l_cls, T::one()), (l_comp, T::of(w.gamma1)), (l_sep, T::of(w.gamma2))])?)
}

/// Terms of the stage-3 objective.
#[derive(Debug, Clone, Copy)]
pub struct AdaptTerms {
    pub cls: Var,
    pub comp_s: Var,
    pub comp_t: Var,
    pub sep_s: Var,
    pub sep_t: Var,
    pub cd: Var,
    pub cmb: Var,
}

/// Stage-3 objective `L_cls + b1 (comp_s + comp_t) + b2 (sep_s + sep_t) +
/// b3 L_cd + b4 L_cmb`.
pub fn adapt_total<T: Real>(g: &mut Graph<T>, w: &LossWeights, t: &AdaptTerms) -> Result<Var> {
    Ok(g.weighted_sum(&[
        (t.cls, T::one()),
        (t.comp_s, T::of(w.beta1)),
        (t.comp_t, T::of(w.beta1)),
        (t.sep_s, T::of(w.beta2)),
        (t.sep_t, T::of(w.beta2)),
        (t.cd, T::of(w.beta3)),
        (t.cmb, T::of(w.beta4)),
    ])?)
}
