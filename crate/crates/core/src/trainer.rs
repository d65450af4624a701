//! The three training stages: supervised pre-training, source-cluster
//! organization, and cluster-aligned adaptation to the unlabeled target.
//!
//! Every stage starts a fresh Adam state. Batch order is drawn from a ChaCha
//! stream keyed by `(seed, stage, epoch)`, so reruns are bit-identical while
//! epochs differ from each other.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Adam, Graph, Var};
use crate::clusters::{self, ClusterError, ClusterState, GateInputs};
use crate::config::TrainConfig;
use crate::losses::{self, AdaptTerms, GroupDro, LossError, LossWeights};
use crate::net::{self, infer, Model, NetError};
use crate::record_io::{BeatClass, LabeledDataset};
use crate::signal::BeatSegment;

const K: usize = BeatClass::COUNT;
const INFER_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("source dataset has unlabeled segments")]
    UnlabeledSource,
    #[error("empty {0} dataset")]
    EmptyDataset(&'static str),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Pretrain = 1,
    Cluster = 2,
    Adapt = 3,
}

impl Stage {
    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Cluster => "clusters",
            Stage::Adapt => "adapt",
        }
    }
}

/// Mean of each loss component over one epoch's steps. Components that the
/// stage does not use are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub seed: u64,
    pub steps: usize,
    pub total: f64,
    pub cls: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dis: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub comp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sep: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub comp_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub comp_t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sep_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sep_t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cmb: Option<f64>,
    /// Confident target predictions per class in effect during the epoch.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub confident: Option<[usize; K]>,
}

impl EpochRecord {
    /// The stage objective recomputed from the reported components.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        let z = |v: Option<f64>| v.unwrap_or(0.0);
        match self.stage {
            1 => self.cls + w.alpha * z(self.dis),
            2 => self.cls + w.gamma1 * z(self.comp) + w.gamma2 * z(self.sep),
            _ => {
                self.cls
                    + w.beta1 * (z(self.comp_s) + z(self.comp_t))
                    + w.beta2 * (z(self.sep_s) + z(self.sep_t))
                    + w.beta3 * z(self.cd)
                    + w.beta4 * z(self.cmb)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Not written to the report file.
    pub wall_time_s: f64,
}

impl StageReport {
    /// One JSON object per epoch, newline-terminated.
    pub fn to_jsonl(&self) -> String {
        self.epochs.iter().map(|e| serde_json::to_string(e).expect("record serializes") + "\n").collect()
    }

    pub fn parse_jsonl(text: &str) -> std::result::Result<Vec<EpochRecord>, serde_json::Error> {
        text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
    }

    pub fn series(&self, f: impl Fn(&EpochRecord) -> f64) -> Vec<f64> {
        self.epochs.iter().map(f).collect()
    }
}

/// Shuffled sample order for one pass over `n` items.
pub fn epoch_order(n: usize, seed: u64, stage: Stage, stream: u64, pass: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage.number() as u64) << 56) | (stream << 48) | pass);
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut rng);
    v
}

/// Yields target batches forever, reshuffling after every full pass.
struct Cycler {
    n: usize,
    seed: u64,
    pass: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize, seed: u64) -> Self {
        Self { n, seed, pass: 0, order: epoch_order(n, seed, Stage::Adapt, 1, 0), pos: 0 }
    }

    fn take(&mut self, m: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(m);
        while out.len() < m {
            if self.pos == self.n {
                self.pass += 1;
                self.order = epoch_order(self.n, self.seed, Stage::Adapt, 1, self.pass);
                self.pos = 0;
            }
            let k = (m - out.len()).min(self.n - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + k]);
            self.pos += k;
        }
        out
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Parts {
    total: f64,
    cls: f64,
    dis: f64,
    comp: f64,
    sep: f64,
    comp_s: f64,
    comp_t: f64,
    sep_s: f64,
    sep_t: f64,
    cd: f64,
    cmb: f64,
}

impl Parts {
    fn add(&mut self, o: &Parts) {
        let fields = [
            (&mut self.total, o.total),
            (&mut self.cls, o.cls),
            (&mut self.dis, o.dis),
            (&mut self.comp, o.comp),
            (&mut self.sep, o.sep),
            (&mut self.comp_s, o.comp_s),
            (&mut self.comp_t, o.comp_t),
            (&mut self.sep_s, o.sep_s),
            (&mut self.sep_t, o.sep_t),
            (&mut self.cd, o.cd),
            (&mut self.cmb, o.cmb),
        ];
        for (a, b) in fields {
            *a += b;
        }
    }

    fn record(&self, stage: Stage, epoch: usize, seed: u64, steps: usize, confident: Option<[usize; K]>) -> EpochRecord {
        let n = steps.max(1) as f64;
        let on = |b: bool, v: f64| b.then_some(v / n);
        let (s1, s2, s3) = (stage == Stage::Pretrain, stage == Stage::Cluster, stage == Stage::Adapt);
        EpochRecord {
            stage: stage.number(),
            epoch,
            seed,
            steps,
            total: self.total / n,
            cls: self.cls / n,
            dis: on(s1, self.dis),
            comp: on(s2, self.comp),
            sep: on(s2, self.sep),
            comp_s: on(s3, self.comp_s),
            comp_t: on(s3, self.comp_t),
            sep_s: on(s3, self.sep_s),
            sep_t: on(s3, self.sep_t),
            cd: on(s3, self.cd),
            cmb: on(s3, self.cmb),
            confident,
        }
    }
}

fn labels_of(data: &LabeledDataset) -> Result<Vec<usize>> {
    data.labels().ok_or(TrainError::UnlabeledSource)
}

/// Class weights from the configured mode applied to the training source.
pub fn effective_weights(cfg: &TrainConfig, source: &LabeledDataset) -> LossWeights {
    LossWeights { class_weights: cfg.class_weight_mode.weights(source.class_counts()), ..cfg.weights }
}

struct Forward {
    features: Var,
    logits1: Var,
    logits2: Var,
}

fn forward(g: &mut Graph<f32>, model: &Model, vars: &[Var], segs: &[&BeatSegment]) -> Result<Forward> {
    let (x, t) = model.inputs(segs)?;
    let x = g.leaf(&x);
    let t = g.leaf(&t);
    let features = net::extract(g, &model.config, vars, x)?;
    let (logits1, logits2) = net::classify(g, &model.config, vars, features, t)?;
    Ok(Forward { features, logits1, logits2 })
}

/// DRO over the mean of both heads' weighted cross-entropies.
fn classification_loss(g: &mut Graph<f32>, fw: &Forward, labels: &[usize], w: &LossWeights, dro: &mut GroupDro) -> Result<Var> {
    let ce1 = losses::weighted_ce(g, fw.logits1, labels, &w.class_weights)?;
    let ce2 = losses::weighted_ce(g, fw.logits2, labels, &w.class_weights)?;
    let both = g.add(ce1, ce2).map_err(LossError::from)?;
    let per = g.affine(both, 0.5, 0.0);
    Ok(dro.apply(g, per, labels)?)
}

fn apply_update(model: &mut Model, adam: &mut Adam, g: &mut Graph<f32>, vars: &[Var], total: Var) -> Result<()> {
    g.backward(total).map_err(LossError::from)?;
    model.collect_grads(g, vars);
    adam.step(&mut model.params);
    model.zero_grad();
    Ok(())
}

fn check_source(source: &LabeledDataset) -> Result<Vec<usize>> {
    if source.is_empty() {
        return Err(TrainError::EmptyDataset("source"));
    }
    labels_of(source)
}

/// Stage 1: `L_cls + alpha * L_dis` for `epochs[0]` epochs.
pub fn pretrain(model: &mut Model, source: &LabeledDataset, cfg: &TrainConfig) -> Result<StageReport> {
    pretrain_impl(model, source, cfg, false)
}

fn pretrain_impl(model: &mut Model, source: &LabeledDataset, cfg: &TrainConfig, detach_dis: bool) -> Result<StageReport> {
    cfg.validate()?;
    let labels = check_source(source)?;
    let w = effective_weights(cfg, source);
    let start = Instant::now();
    let mut adam = Adam::new(cfg.adam);
    let mut dro = GroupDro::new(cfg.dro_mode, cfg.dro_eta);
    let mut epochs = Vec::with_capacity(cfg.epochs[0]);
    for epoch in 0..cfg.epochs[0] {
        let order = epoch_order(source.len(), cfg.seed, Stage::Pretrain, 0, epoch as u64);
        let mut acc = Parts::default();
        let mut steps = 0;
        for idx in order.chunks(cfg.batch_size) {
            let segs: Vec<&BeatSegment> = idx.iter().map(|&i| &source.segments[i]).collect();
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let vars = model.bind(&mut g);
            let fw = forward(&mut g, model, &vars, &segs)?;
            let cls = classification_loss(&mut g, &fw, &y, &w, &mut dro)?;
            let (mut p1, mut p2) = (g.softmax(fw.logits1), g.softmax(fw.logits2));
            if detach_dis {
                let s = g.shape(p1).to_vec();
                p1 = g.constant(s.clone(), g.value(p1).to_vec()).map_err(LossError::from)?;
                p2 = g.constant(s, g.value(p2).to_vec()).map_err(LossError::from)?;
            }
            let dis = losses::discrepancy(&mut g, p1, p2)?;
            let total = losses::pretrain_total(&mut g, &w, cls, dis)?;
            acc.add(&Parts { total: g.scalar(total) as f64, cls: g.scalar(cls) as f64, dis: g.scalar(dis) as f64, ..Default::default() });
            apply_update(model, &mut adam, &mut g, &vars, total)?;
            steps += 1;
        }
        let rec = acc.record(Stage::Pretrain, epoch, cfg.seed, steps, None);
        log::info!("stage 1 epoch {epoch}: total {:.4} cls {:.4} dis {:.4}", rec.total, rec.cls, rec.dis.unwrap_or(0.0));
        epochs.push(rec);
    }
    Ok(StageReport { stage: Stage::Pretrain, seed: cfg.seed, epochs, wall_time_s: start.elapsed().as_secs_f64() })
}

/// Source centroids, per-class mean intra-cluster distance and mean head
/// discrepancy of `model` on the (unduplicated) source.
pub fn source_statistics(model: &Model, source: &LabeledDataset) -> Result<ClusterState> {
    let labels = labels_of(source)?;
    let refs: Vec<&BeatSegment> = source.segments.iter().collect();
    let out = infer(model, &refs, INFER_CHUNK)?;
    let dim = model.config.feature_dim();
    let cc_s = clusters::compute_centroids(&out.features, dim, &labels)?;
    let m_ctr = clusters::mean_intra_cluster_distance(&out.features, dim, &labels, &cc_s)?;
    let m_dis = clusters::mean_classifier_discrepancy(&out.probs1, &out.probs2)?;
    Ok(ClusterState::new(cc_s, m_ctr, m_dis))
}

/// Stage 2: computes `CC_s`, trains `L_cls + gamma1 * L_comp + gamma2 *
/// L_sep` with the centroids held fixed, then recomputes the source
/// statistics on the updated model.
pub fn organize_source_clusters(model: &mut Model, source: &LabeledDataset, cfg: &TrainConfig) -> Result<(StageReport, ClusterState)> {
    cfg.validate()?;
    let labels = check_source(source)?;
    let w = effective_weights(cfg, source);
    let start = Instant::now();
    let stats_set = source.originals();
    let cc_s = source_statistics(model, &stats_set)?.cc_s;
    let mut adam = Adam::new(cfg.adam);
    let mut dro = GroupDro::new(cfg.dro_mode, cfg.dro_eta);
    let mut epochs = Vec::with_capacity(cfg.epochs[1]);
    for epoch in 0..cfg.epochs[1] {
        let order = epoch_order(source.len(), cfg.seed, Stage::Cluster, 0, epoch as u64);
        let mut acc = Parts::default();
        let mut steps = 0;
        for idx in order.chunks(cfg.batch_size) {
            let segs: Vec<&BeatSegment> = idx.iter().map(|&i| &source.segments[i]).collect();
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let vars = model.bind(&mut g);
            let fw = forward(&mut g, model, &vars, &segs)?;
            let cls = classification_loss(&mut g, &fw, &y, &w, &mut dro)?;
            let cc = losses::centroid_node(&mut g, &cc_s, &y)?;
            let comp = losses::compacting(&mut g, fw.features, &y, cc)?;
            let present = losses::present_centroid_node(&mut g, &cc_s)?;
            let sep = losses::separating(&mut g, present, w.t_m)?;
            let total = losses::cluster_total(&mut g, &w, cls, comp, sep)?;
            acc.add(&Parts {
                total: g.scalar(total) as f64,
                cls: g.scalar(cls) as f64,
                comp: g.scalar(comp) as f64,
                sep: g.scalar(sep) as f64,
                ..Default::default()
            });
            apply_update(model, &mut adam, &mut g, &vars, total)?;
            steps += 1;
        }
        let rec = acc.record(Stage::Cluster, epoch, cfg.seed, steps, None);
        log::info!("stage 2 epoch {epoch}: total {:.4} cls {:.4} comp {:.4} sep {:.4}", rec.total, rec.cls, rec.comp.unwrap_or(0.0), rec.sep.unwrap_or(0.0));
        epochs.push(rec);
    }
    let state = source_statistics(model, &stats_set)?;
    Ok((StageReport { stage: Stage::Cluster, seed: cfg.seed, epochs, wall_time_s: start.elapsed().as_secs_f64() }, state))
}

/// Confident target predictions under the current model and source
/// statistics, as `(index, pseudo_label)`.
pub fn select_target(model: &Model, target: &LabeledDataset, state: &ClusterState, cfg: &TrainConfig) -> Result<(Vec<(usize, usize)>, Vec<f32>)> {
    let refs: Vec<&BeatSegment> = target.segments.iter().collect();
    let out = infer(model, &refs, INFER_CHUNK)?;
    let x = GateInputs { features: &out.features, dim: model.config.feature_dim(), probs: &out.probs, probs1: &out.probs1, probs2: &out.probs2 };
    let picked = clusters::select_confident(x, &state.cc_s, &state.m_ctr, state.m_dis, cfg.gate);
    Ok((picked, out.features))
}

/// Fills the target side of `state` (`CC_t`, `CC_m`, confident counts).
pub fn compute_target_state(model: &Model, target: &LabeledDataset, state: &mut ClusterState, cfg: &TrainConfig) -> Result<()> {
    let (picked, features) = select_target(model, target, state, cfg)?;
    state.set_target(&picked, &features, model.config.feature_dim());
    log::info!("confident target predictions per class: {:?}", state.confident_count);
    Ok(())
}

/// Stage 3: the full adaptation objective on paired source/target batches.
pub fn adapt(model: &mut Model, source: &LabeledDataset, target: &LabeledDataset, state: &mut ClusterState, cfg: &TrainConfig) -> Result<StageReport> {
    adapt_impl(model, source, target, state, cfg, true)
}

fn adapt_impl(model: &mut Model, source: &LabeledDataset, target: &LabeledDataset, state: &mut ClusterState, cfg: &TrainConfig, use_target: bool) -> Result<StageReport> {
    cfg.validate()?;
    let labels = check_source(source)?;
    if target.is_empty() {
        return Err(TrainError::EmptyDataset("target"));
    }
    let w = effective_weights(cfg, source);
    let start = Instant::now();
    let mut adam = Adam::new(cfg.adam);
    let mut dro = GroupDro::new(cfg.dro_mode, cfg.dro_eta);
    let mut cycler = Cycler::new(target.len(), cfg.seed);
    let mut epochs = Vec::with_capacity(cfg.epochs[2]);
    for epoch in 0..cfg.epochs[2] {
        let order = epoch_order(source.len(), cfg.seed, Stage::Adapt, 0, epoch as u64);
        let confident = state.confident_count;
        let mut acc = Parts::default();
        let mut steps = 0;
        for idx in order.chunks(cfg.batch_size) {
            let segs: Vec<&BeatSegment> = idx.iter().map(|&i| &source.segments[i]).collect();
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let vars = model.bind(&mut g);
            let fs = forward(&mut g, model, &vars, &segs)?;
            let cls = classification_loss(&mut g, &fs, &y, &w, &mut dro)?;
            if !use_target {
                let total = g.weighted_sum(&[(cls, 1.0)]).map_err(LossError::from)?;
                acc.add(&Parts { total: g.scalar(total) as f64, cls: g.scalar(cls) as f64, ..Default::default() });
                apply_update(model, &mut adam, &mut g, &vars, total)?;
                steps += 1;
                continue;
            }
            let tidx = cycler.take(idx.len());
            let tsegs: Vec<&BeatSegment> = tidx.iter().map(|&i| &target.segments[i]).collect();
            let ft = forward(&mut g, model, &vars, &tsegs)?;
            let (_, pseudo) = net::combine(g.value(ft.logits1), g.value(ft.logits2));

            let cs = losses::centroid_node(&mut g, &state.cc_s, &y)?;
            let comp_s = losses::compacting(&mut g, fs.features, &y, cs)?;
            let ct = losses::centroid_node(&mut g, &state.cc_t, &pseudo)?;
            let comp_t = losses::compacting(&mut g, ft.features, &pseudo, ct)?;
            let ps = losses::present_centroid_node(&mut g, &state.cc_s)?;
            let sep_s = losses::separating(&mut g, ps, w.t_m)?;
            let pt = losses::present_centroid_node(&mut g, &state.cc_t)?;
            let sep_t = losses::separating(&mut g, pt, w.t_m)?;
            let cd = losses::interdomain_cd_maps(&mut g, &state.cc_s, &state.cc_t)?;
            let pooled = g.concat(fs.features, ft.features, 0).map_err(LossError::from)?;
            let all_labels: Vec<usize> = y.iter().chain(&pseudo).copied().collect();
            let cmb = match losses::batch_centroids(&mut g, pooled, &all_labels)? {
                Some((bc, classes)) => {
                    let cm = losses::centroid_node(&mut g, &state.cc_m, &classes)?;
                    losses::running_combined(&mut g, bc, &classes, cm)?
                }
                None => g.constant(vec![1], vec![0.0]).map_err(LossError::from)?,
            };
            let terms = AdaptTerms { cls, comp_s, comp_t, sep_s, sep_t, cd, cmb };
            let total = losses::adapt_total(&mut g, &w, &terms)?;
            let v = |x: Var| g.scalar(x) as f64;
            acc.add(&Parts {
                total: v(total),
                cls: v(cls),
                comp_s: v(comp_s),
                comp_t: v(comp_t),
                sep_s: v(sep_s),
                sep_t: v(sep_t),
                cd: v(cd),
                cmb: v(cmb),
                ..Default::default()
            });
            apply_update(model, &mut adam, &mut g, &vars, total)?;
            steps += 1;
        }
        let rec = acc.record(Stage::Adapt, epoch, cfg.seed, steps, Some(confident));
        log::info!(
            "stage 3 epoch {epoch}: total {:.4} cls {:.4} comp {:.4}/{:.4} cd {:.4} cmb {:.4}",
            rec.total,
            rec.cls,
            rec.comp_s.unwrap_or(0.0),
            rec.comp_t.unwrap_or(0.0),
            rec.cd.unwrap_or(0.0),
            rec.cmb.unwrap_or(0.0)
        );
        epochs.push(rec);
        if use_target && cfg.refresh_target_centroids {
            compute_target_state(model, target, state, cfg)?;
        }
    }
    Ok(StageReport { stage: Stage::Adapt, seed: cfg.seed, epochs, wall_time_s: start.elapsed().as_secs_f64() })
}
