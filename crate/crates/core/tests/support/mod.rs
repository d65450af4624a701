//! Shared helpers for the integration tests: the gradient suite and small
//! training setups.
#![allow(dead_code)]

use ecg_uda::autodiff::check::{check_gradients, GradCheckReport, ScalarFn};
use ecg_uda::autodiff::{Graph, Real, Result as AdResult, Tensor, Var};
use ecg_uda::losses::{self, AdaptTerms, DroMode, GroupDro, LossWeights};
use ecg_uda::net::{self, NetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-3;
pub const GRAD_SEEDS: u64 = 10;
const STEP: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap().requiring_grad()
}

fn labels(r: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..4)).collect()
}

/// Labels covering every class at least once.
fn all_labels(r: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut l = labels(r, n);
    l[..4].copy_from_slice(&[0, 1, 2, 3]);
    l
}

fn weights(r: &mut ChaCha8Rng) -> [f64; 4] {
    [0; 4].map(|_| r.random_range(0.5..3.0))
}

fn cvt<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::of(x)).collect()
}

fn lift(e: losses::LossError) -> ecg_uda::autodiff::AutodiffError {
    match e {
        losses::LossError::Autodiff(a) => a,
        other => panic!("loss error inside gradient check: {other}"),
    }
}

/// Everything the suite differentiates. Non-scalar outputs are reduced by a
/// fixed random projection so every output coordinate contributes.
#[derive(Clone)]
pub enum Case {
    Conv { stride: usize, pad: usize },
    MaxPool,
    GlobalAvgPool,
    Dense,
    Relu,
    Add,
    Affine(f64, f64),
    MulConst(Vec<f64>),
    Concat(usize),
    Softmax,
    LogSoftmax,
    Sum,
    Mean,
    Max,
    Euclidean,
    GatherCols(Vec<usize>),
    GatherRows(Vec<usize>),
    GroupMeanRows(Vec<Vec<usize>>),
    WeightedSum(Vec<f64>),
    WeightedCe { labels: Vec<usize>, w: [f64; 4] },
    Dro { labels: Vec<usize>, w: [f64; 4], dro: GroupDro },
    Discrepancy,
    Compacting(Vec<usize>),
    Separating(f64),
    InterdomainCd,
    RunningCombined(Vec<usize>),
    PretrainTotal { labels: Vec<usize>, lw: LossWeights },
    ClusterTotal { labels: Vec<usize>, lw: LossWeights },
    AdaptTotal { src: Vec<usize>, tgt: Vec<usize>, lw: LossWeights },
    Network { cfg: NetConfig, labels: Vec<usize>, lw: LossWeights },
}

pub struct Probe {
    pub case: Case,
    /// Weights of the output projection.
    pub proj: Vec<f64>,
}

impl Probe {
    fn project<T: Real>(&self, g: &mut Graph<T>, y: Var) -> AdResult<Var> {
        if g.value(y).len() == 1 {
            return Ok(y);
        }
        let c = cvt(&self.proj[..g.value(y).len()]);
        let p = g.mul_const(y, c)?;
        Ok(g.sum(p))
    }
}

impl ScalarFn for Probe {
    fn eval<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> AdResult<Var> {
        let y = match &self.case {
            Case::Conv { stride, pad } => g.conv1d(v[0], v[1], v[2], *stride, *pad)?,
            Case::MaxPool => g.maxpool1d(v[0], 2, 2)?,
            Case::GlobalAvgPool => g.global_avg_pool(v[0])?,
            Case::Dense => g.dense(v[0], v[1], v[2])?,
            Case::Relu => g.relu(v[0]),
            Case::Add => g.add(v[0], v[1])?,
            Case::Affine(a, b) => g.affine(v[0], T::of(*a), T::of(*b)),
            Case::MulConst(c) => g.mul_const(v[0], cvt(c))?,
            Case::Concat(axis) => g.concat(v[0], v[1], *axis)?,
            Case::Softmax => g.softmax(v[0]),
            Case::LogSoftmax => g.log_softmax(v[0]),
            Case::Sum => g.sum(v[0]),
            Case::Mean => g.mean(v[0]),
            Case::Max => g.max(v[0]),
            Case::Euclidean => g.euclidean(v[0], v[1])?,
            Case::GatherCols(i) => g.gather_cols(v[0], i)?,
            Case::GatherRows(i) => g.gather_rows(v[0], i)?,
            Case::GroupMeanRows(gr) => g.group_mean_rows(v[0], gr.clone())?,
            Case::WeightedSum(c) => {
                let terms: Vec<(Var, T)> = v.iter().zip(c).map(|(&x, &w)| (x, T::of(w))).collect();
                g.weighted_sum(&terms)?
            }
            Case::WeightedCe { labels, w } => losses::weighted_ce(g, v[0], labels, w).map_err(lift)?,
            Case::Dro { labels, w, dro } => {
                let ce = losses::weighted_ce(g, v[0], labels, w).map_err(lift)?;
                dro.clone().apply(g, ce, labels).map_err(lift)?
            }
            Case::Discrepancy => {
                let (p1, p2) = (g.softmax(v[0]), g.softmax(v[1]));
                losses::discrepancy(g, p1, p2).map_err(lift)?
            }
            Case::Compacting(l) => losses::compacting(g, v[0], l, v[1]).map_err(lift)?,
            Case::Separating(tm) => losses::separating(g, v[0], *tm).map_err(lift)?,
            Case::InterdomainCd => losses::interdomain_cd(g, v[0], v[1]).map_err(lift)?,
            Case::RunningCombined(l) => {
                let (cc, classes) = losses::batch_centroids(g, v[0], l).map_err(lift)?.expect("non-empty batch");
                losses::running_combined(g, cc, &classes, v[1]).map_err(lift)?
            }
            Case::PretrainTotal { labels, lw } => {
                let (l_cls, l_dis) = two_head_terms(g, v[0], v[1], labels, lw)?;
                losses::pretrain_total(g, lw, l_cls, l_dis).map_err(lift)?
            }
            Case::ClusterTotal { labels, lw } => {
                let (l_cls, _) = two_head_terms(g, v[0], v[1], labels, lw)?;
                let comp = losses::compacting(g, v[2], labels, v[3]).map_err(lift)?;
                let sep = losses::separating(g, v[3], lw.t_m).map_err(lift)?;
                losses::cluster_total(g, lw, l_cls, comp, sep).map_err(lift)?
            }
            Case::AdaptTotal { src, tgt, lw } => {
                // v: logits1, logits2, f_s, f_t, cc_s, cc_t, cc_m
                let (cls, _) = two_head_terms(g, v[0], v[1], src, lw)?;
                let comp_s = losses::compacting(g, v[2], src, v[4]).map_err(lift)?;
                let comp_t = losses::compacting(g, v[3], tgt, v[5]).map_err(lift)?;
                let sep_s = losses::separating(g, v[4], lw.t_m).map_err(lift)?;
                let sep_t = losses::separating(g, v[5], lw.t_m).map_err(lift)?;
                let cd = losses::interdomain_cd(g, v[4], v[5]).map_err(lift)?;
                let pooled = g.concat(v[2], v[3], 0)?;
                let all: Vec<usize> = src.iter().chain(tgt).copied().collect();
                let (bcc, classes) = losses::batch_centroids(g, pooled, &all).map_err(lift)?.expect("non-empty");
                let cmb = losses::running_combined(g, bcc, &classes, v[6]).map_err(lift)?;
                let t = AdaptTerms { cls, comp_s, comp_t, sep_s, sep_t, cd, cmb };
                losses::adapt_total(g, lw, &t).map_err(lift)?
            }
            Case::Network { cfg, labels, lw } => {
                let n = v.len() - 2;
                let (params, x, t) = (&v[..n], v[n], v[n + 1]);
                let f = net::extract(g, cfg, params, x).expect("extractor forward");
                let (l1, l2) = net::classify(g, cfg, params, f, t).expect("heads forward");
                let (l_cls, l_dis) = two_head_terms(g, l1, l2, labels, lw)?;
                losses::pretrain_total(g, lw, l_cls, l_dis).map_err(lift)?
            }
        };
        self.project(g, y)
    }
}

/// Classification loss (mean of both heads' weighted CE under max-DRO) and
/// the head discrepancy.
fn two_head_terms<T: Real>(g: &mut Graph<T>, l1: Var, l2: Var, labels: &[usize], lw: &LossWeights) -> AdResult<(Var, Var)> {
    let c1 = losses::weighted_ce(g, l1, labels, &lw.class_weights).map_err(lift)?;
    let c2 = losses::weighted_ce(g, l2, labels, &lw.class_weights).map_err(lift)?;
    let both = g.add(c1, c2)?;
    let per = g.affine(both, T::of(0.5), T::zero());
    let cls = GroupDro::new(DroMode::Max, 0.01).apply(g, per, labels).map_err(lift)?;
    let (p1, p2) = (g.softmax(l1), g.softmax(l2));
    let dis = losses::discrepancy(g, p1, p2).map_err(lift)?;
    Ok((cls, dis))
}

/// Tiny network whose every parameter tensor stays within the suite's size
/// budget.
pub fn tiny_net() -> NetConfig {
    NetConfig { channels: vec![2, 3, 2], kernel: 3, hidden: [4, 3] }
}

fn random_weights(r: &mut ChaCha8Rng) -> LossWeights {
    LossWeights {
        alpha: r.random_range(0.1..1.0),
        gamma1: r.random_range(0.1..1.0),
        gamma2: r.random_range(0.1..1.0),
        beta1: r.random_range(0.1..1.0),
        beta2: r.random_range(0.1..1.0),
        beta3: r.random_range(0.1..1.0),
        beta4: r.random_range(0.1..1.0),
        t_m: 10.0,
        class_weights: weights(r),
    }
}

/// Every case for one seed, with its inputs.
pub fn cases(seed: u64) -> Vec<(&'static str, Probe, Vec<Tensor<f64>>)> {
    let mut r = rng(seed);
    let proj: Vec<f64> = (0..256).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut out: Vec<(&'static str, Case, Vec<Tensor<f64>>)> = Vec::new();
    let r = &mut r;
    let (b, c, l) = (2, 2, 8);
    out.push(("conv1d", Case::Conv { stride: 1, pad: 1 }, vec![random(r, &[b, c, l], 1.0), random(r, &[3, c, 3], 1.0), random(r, &[3], 1.0)]));
    out.push(("conv1d_strided", Case::Conv { stride: 2, pad: 0 }, vec![random(r, &[b, c, l], 1.0), random(r, &[2, c, 1], 1.0), random(r, &[2], 1.0)]));
    out.push(("maxpool1d", Case::MaxPool, vec![random(r, &[b, c, l], 1.0)]));
    out.push(("global_avg_pool", Case::GlobalAvgPool, vec![random(r, &[b, 3, l], 1.0)]));
    out.push(("dense", Case::Dense, vec![random(r, &[3, 5], 1.0), random(r, &[4, 5], 1.0), random(r, &[4], 1.0)]));
    out.push(("relu", Case::Relu, vec![random(r, &[4, 6], 1.0)]));
    out.push(("add", Case::Add, vec![random(r, &[3, 4], 1.0), random(r, &[3, 4], 1.0)]));
    out.push(("affine", Case::Affine(r.random_range(-2.0..2.0), r.random_range(-1.0..1.0)), vec![random(r, &[10], 1.0)]));
    let mc: Vec<f64> = (0..12).map(|_| r.random_range(-2.0..2.0)).collect();
    out.push(("mul_const", Case::MulConst(mc), vec![random(r, &[3, 4], 1.0)]));
    out.push(("concat_axis1", Case::Concat(1), vec![random(r, &[3, 4], 1.0), random(r, &[3, 2], 1.0)]));
    out.push(("concat_axis0", Case::Concat(0), vec![random(r, &[2, 4], 1.0), random(r, &[3, 4], 1.0)]));
    out.push(("softmax", Case::Softmax, vec![random(r, &[4, 4], 2.0)]));
    out.push(("log_softmax", Case::LogSoftmax, vec![random(r, &[4, 4], 2.0)]));
    out.push(("sum", Case::Sum, vec![random(r, &[16], 1.0)]));
    out.push(("mean", Case::Mean, vec![random(r, &[16], 1.0)]));
    out.push(("max", Case::Max, vec![random(r, &[16], 1.0)]));
    out.push(("euclidean", Case::Euclidean, vec![random(r, &[4, 5], 1.0), random(r, &[4, 5], 1.0)]));
    let gc = labels(r, 5);
    out.push(("gather_cols", Case::GatherCols(gc), vec![random(r, &[5, 4], 1.0)]));
    out.push(("gather_rows", Case::GatherRows(vec![2, 0, 2, 3]), vec![random(r, &[4, 3], 1.0)]));
    out.push(("group_mean_rows", Case::GroupMeanRows(vec![vec![0, 2], vec![1], vec![3, 4, 0]]), vec![random(r, &[5, 3], 1.0)]));
    let ws: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
    out.push(("weighted_sum", Case::WeightedSum(ws), vec![random(r, &[1], 1.0), random(r, &[1], 1.0), random(r, &[1], 1.0)]));

    let n = 8;
    let (lab, w) = (all_labels(r, n), weights(r));
    out.push(("weighted_ce", Case::WeightedCe { labels: lab.clone(), w }, vec![random(r, &[n, 4], 2.0)]));
    out.push(("weighted_ce_dro_max", Case::Dro { labels: lab.clone(), w, dro: GroupDro::new(DroMode::Max, 0.01) }, vec![random(r, &[n, 4], 2.0)]));
    // Group weights are constants of the step; eta = 0 freezes them during
    // the finite differences.
    let mut ema = GroupDro::new(DroMode::Ema, 0.0);
    ema.q = weights(r).map(|x| x / 6.0);
    out.push(("weighted_ce_dro_ema", Case::Dro { labels: lab.clone(), w, dro: ema }, vec![random(r, &[n, 4], 2.0)]));
    out.push(("discrepancy", Case::Discrepancy, vec![random(r, &[n, 4], 2.0), random(r, &[n, 4], 2.0)]));
    out.push(("compacting", Case::Compacting(lab.clone()), vec![random(r, &[n, 5], 1.0), random(r, &[4, 5], 1.0)]));
    out.push(("separating", Case::Separating(10.0), vec![random(r, &[4, 5], 2.0)]));
    out.push(("interdomain_cd", Case::InterdomainCd, vec![random(r, &[4, 5], 1.0), random(r, &[4, 5], 1.0)]));
    out.push(("running_combined", Case::RunningCombined(lab.clone()), vec![random(r, &[n, 5], 1.0), random(r, &[4, 5], 1.0)]));
    let lw = random_weights(r);
    out.push(("pretrain_total", Case::PretrainTotal { labels: lab.clone(), lw }, vec![random(r, &[n, 4], 2.0), random(r, &[n, 4], 2.0)]));
    out.push((
        "cluster_total",
        Case::ClusterTotal { labels: lab.clone(), lw },
        vec![random(r, &[n, 4], 2.0), random(r, &[n, 4], 2.0), random(r, &[n, 5], 1.0), random(r, &[4, 5], 2.0)],
    ));
    let tgt = labels(r, 6);
    out.push((
        "adapt_total",
        Case::AdaptTotal { src: lab.clone(), tgt, lw },
        vec![
            random(r, &[n, 4], 2.0),
            random(r, &[n, 4], 2.0),
            random(r, &[n, 5], 1.0),
            random(r, &[6, 5], 1.0),
            random(r, &[4, 5], 2.0),
            random(r, &[4, 5], 2.0),
            random(r, &[4, 5], 2.0),
        ],
    ));

    let cfg = tiny_net();
    // Random biases too: zero biases put exact zeros at ReLU inputs, where
    // central differences cannot see the kink.
    let mut inputs: Vec<Tensor<f64>> = cfg.layout().iter().map(|(_, shape)| random(r, shape, 0.6)).collect();
    inputs.push(random(r, &[4, 1, cfg.min_len().max(16)], 1.0));
    inputs.push(random(r, &[4, 3], 1.0));
    let net_labels = vec![0, 1, 2, 3];
    out.push(("network", Case::Network { cfg, labels: net_labels, lw }, inputs));

    out.into_iter().map(|(name, case, inputs)| (name, Probe { case, proj: proj.clone() }, inputs)).collect()
}

pub fn check(probe: &Probe, inputs: &[Tensor<f64>]) -> GradCheckReport {
    check_gradients(probe, inputs, STEP).expect("gradient check runs")
}

/// Worst relative error per case name over all seeds.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in 0..GRAD_SEEDS {
        for (name, probe, inputs) in cases(seed) {
            let e = check(&probe, &inputs).max_rel_error;
            match worst.iter_mut().find(|w| w.0 == name) {
                Some(w) => w.1 = w.1.max(e),
                None => worst.push((name, e)),
            }
        }
    }
    worst
}
