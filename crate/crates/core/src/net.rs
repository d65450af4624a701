//! Residual 1-D CNN feature extractor with two parallel classifier heads.
//!
//! Each residual block computes
//! `relu(deep2(relu(deep1(x))) + shortcut(x))` followed by max pooling
//! (k = 2, stride 2); a global average over time gives the feature vector.
//! Each head is `dense -> relu -> dense -> relu -> [.., time features] -> dense`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::checkpoint::{Checkpoint, CheckpointError};
use crate::autodiff::{AutodiffError, Graph, Real, Tensor, Var};
use crate::record_io::BeatClass;
use crate::signal::BeatSegment;

pub const TIME_FEATURES: usize = 3;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("input length {0} is too short for three pooling stages (need >= 8)")]
    InputTooShort(usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("model manifest: {0}")]
    Manifest(String),
    #[error("segment length {found} does not match the model's {expected}")]
    SegmentLength { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Output channels of the residual blocks.
    pub channels: Vec<usize>,
    pub kernel: usize,
    /// Widths of the two hidden dense layers of each head.
    pub hidden: [usize; 2],
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { channels: vec![16, 32, 64], kernel: 5, hidden: [64, 32] }
    }
}

impl NetConfig {
    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("at least one block")
    }

    pub fn min_len(&self) -> usize {
        1 << self.channels.len()
    }

    pub fn architecture_hash(&self) -> String {
        let canon = format!(
            "resblocks={:?};kernel={};pool=2/2;gap;heads=2;hidden={:?};time={};classes={}",
            self.channels,
            self.kernel,
            self.hidden,
            TIME_FEATURES,
            BeatClass::COUNT
        );
        let digest = Sha256::digest(canon.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Parameter names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let k = self.kernel;
        let mut cin = 1;
        for (b, &c) in self.channels.iter().enumerate() {
            out.push((format!("f.block{b}.deep1.w"), vec![c, cin, k]));
            out.push((format!("f.block{b}.deep1.b"), vec![c]));
            out.push((format!("f.block{b}.deep2.w"), vec![c, c, k]));
            out.push((format!("f.block{b}.deep2.b"), vec![c]));
            out.push((format!("f.block{b}.shortcut.w"), vec![c, cin, 1]));
            out.push((format!("f.block{b}.shortcut.b"), vec![c]));
            cin = c;
        }
        let [h1, h2] = self.hidden;
        for head in 1..=2 {
            out.push((format!("c{head}.fc1.w"), vec![h1, self.feature_dim()]));
            out.push((format!("c{head}.fc1.b"), vec![h1]));
            out.push((format!("c{head}.fc2.w"), vec![h2, h1]));
            out.push((format!("c{head}.fc2.b"), vec![h2]));
            out.push((format!("c{head}.fc3.w"), vec![BeatClass::COUNT, h2 + TIME_FEATURES]));
            out.push((format!("c{head}.fc3.b"), vec![BeatClass::COUNT]));
        }
        out
    }

    fn head_offset(&self, head: usize) -> usize {
        6 * self.channels.len() + 6 * head
    }
}

/// z-normalization of the three RR features, fit on the source domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeNormalizer {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for TimeNormalizer {
    fn default() -> Self {
        Self { mean: [0.0; 3], std: [1.0; 3] }
    }
}

impl TimeNormalizer {
    pub fn fit(segments: &[BeatSegment]) -> Self {
        let n = segments.len().max(1) as f64;
        let mut mean = [0.0; 3];
        for s in segments {
            for (m, v) in mean.iter_mut().zip(s.time_features()) {
                *m += v as f64 / n;
            }
        }
        let mut var = [0.0; 3];
        for s in segments {
            for ((acc, m), v) in var.iter_mut().zip(&mean).zip(s.time_features()) {
                *acc += (v as f64 - m).powi(2) / n;
            }
        }
        let std = var.map(|v| if v.sqrt() > 1e-9 { v.sqrt() } else { 1.0 });
        Self { mean, std }
    }

    pub fn apply(&self, f: [f32; 3]) -> [f32; 3] {
        [0, 1, 2].map(|i| ((f[i] as f64 - self.mean[i]) / self.std[i]) as f32)
    }
}

/// Everything needed to rebuild a trained model from a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub architecture_hash: String,
    pub net: NetConfig,
    pub segment_len: usize,
    pub rr_mean: usize,
    pub feature_dim: usize,
    pub normalizer: TimeNormalizer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub config: NetConfig,
    pub names: Vec<String>,
    pub params: Vec<Tensor<T>>,
    pub normalizer: TimeNormalizer,
    /// RR mean (samples) the model's input length was derived from.
    pub rr_mean: usize,
}

impl<T: Real> Model<T> {
    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero biases. The
    /// extractor and each head draw from separate ChaCha streams of `seed`.
    pub fn init(config: NetConfig, seed: u64, rr_mean: usize) -> Self {
        let layout = config.layout();
        let mut rngs: Vec<ChaCha8Rng> = (0..3)
            .map(|stream| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(stream + 1);
                r
            })
            .collect();
        let mut params = Vec::with_capacity(layout.len());
        for (name, shape) in &layout {
            let n: usize = shape.iter().product();
            let stream = if name.starts_with("c1.") { 1 } else if name.starts_with("c2.") { 2 } else { 0 };
            let data = if name.ends_with(".w") {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| T::of(rngs[stream].random_range(-bound..bound))).collect()
            } else {
                vec![T::zero(); n]
            };
            params.push(Tensor::new(shape.clone(), data).expect("layout shapes").requiring_grad());
        }
        Self {
            config,
            names: layout.into_iter().map(|(n, _)| n).collect(),
            params,
            normalizer: TimeNormalizer::default(),
            rr_mean,
        }
    }

    pub fn segment_len(&self) -> usize {
        crate::signal::segment_len(self.rr_mean)
    }

    /// Records every parameter as a leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p)).collect()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Moves gradients accumulated on `g` into the parameter tensors.
    pub fn collect_grads(&mut self, g: &Graph<T>, vars: &[Var]) {
        for (p, v) in self.params.iter_mut().zip(vars) {
            if let Some(gr) = g.grad(*v) {
                p.accumulate_grad(gr).expect("grad shape matches parameter");
            }
        }
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    /// Input tensors `[B, 1, L]` and normalized time features `[B, 3]`.
    pub fn inputs(&self, segments: &[&BeatSegment]) -> Result<(Tensor<T>, Tensor<T>), NetError> {
        let l = segments.first().map_or(0, |s| s.waveform.len());
        let mut x = Vec::with_capacity(segments.len() * l);
        let mut tf = Vec::with_capacity(segments.len() * TIME_FEATURES);
        for s in segments {
            if s.waveform.len() != l {
                return Err(NetError::SegmentLength { expected: l, found: s.waveform.len() });
            }
            x.extend(s.waveform.iter().map(|&v| T::of(v as f64)));
            tf.extend(self.normalizer.apply(s.time_features()).iter().map(|&v| T::of(v as f64)));
        }
        Ok((Tensor::new(vec![segments.len(), 1, l], x)?, Tensor::new(vec![segments.len(), TIME_FEATURES], tf)?))
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            normalizer: self.normalizer,
            rr_mean: self.rr_mean,
        }
    }

    /// Order-sensitive FNV-style digest of all parameter bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in &self.params {
            for v in p.data() {
                h ^= v.as_f64().to_bits();
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

impl Model<f32> {
    pub fn manifest(&self) -> ModelManifest {
        ModelManifest {
            architecture_hash: self.config.architecture_hash(),
            net: self.config.clone(),
            segment_len: self.segment_len(),
            rr_mean: self.rr_mean,
            feature_dim: self.config.feature_dim(),
            normalizer: self.normalizer,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.names.iter().cloned().zip(self.params.iter().map(|p| {
                Tensor::new(p.shape().to_vec(), p.data().to_vec()).expect("valid")
            })).collect(),
            manifest: serde_json::to_string(&self.manifest()).expect("manifest serializes"),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, NetError> {
        let m: ModelManifest = serde_json::from_str(&ck.manifest).map_err(|e| NetError::Manifest(e.to_string()))?;
        if m.architecture_hash != m.net.architecture_hash() {
            return Err(NetError::Manifest("architecture hash does not match the stored configuration".into()));
        }
        let layout = m.net.layout();
        if layout.len() != ck.params.len() {
            return Err(NetError::Manifest(format!("expected {} parameters, found {}", layout.len(), ck.params.len())));
        }
        let mut params = Vec::with_capacity(layout.len());
        for ((name, shape), (cname, t)) in layout.iter().zip(&ck.params) {
            if name != cname || shape.as_slice() != t.shape() {
                return Err(NetError::Manifest(format!("parameter {cname} {:?} where {name} {shape:?} was expected", t.shape())));
            }
            params.push(t.clone().requiring_grad());
        }
        Ok(Self { config: m.net, names: layout.into_iter().map(|l| l.0).collect(), params, normalizer: m.normalizer, rr_mean: m.rr_mean })
    }
}

/// Feature extractor: `[B, 1, L] -> [B, feature_dim]`.
pub fn extract<T: Real>(g: &mut Graph<T>, cfg: &NetConfig, vars: &[Var], x: Var) -> Result<Var, NetError> {
    let l = g.shape(x)[2];
    if l < cfg.min_len() {
        return Err(NetError::InputTooShort(l));
    }
    let pad = (cfg.kernel - 1) / 2;
    let mut h = x;
    for b in 0..cfg.channels.len() {
        let p = &vars[6 * b..6 * b + 6];
        let d1 = g.conv1d(h, p[0], p[1], 1, pad)?;
        let d1 = g.relu(d1);
        let d2 = g.conv1d(d1, p[2], p[3], 1, pad)?;
        let sc = g.conv1d(h, p[4], p[5], 1, 0)?;
        let sum = g.add(d2, sc)?;
        let act = g.relu(sum);
        h = g.maxpool1d(act, 2, 2)?;
    }
    Ok(g.global_avg_pool(h)?)
}

/// One classifier head (`head` = 0 or 1) producing `[B, 4]` logits.
pub fn head<T: Real>(g: &mut Graph<T>, cfg: &NetConfig, vars: &[Var], head: usize, features: Var, time: Var) -> Result<Var, NetError> {
    let o = cfg.head_offset(head);
    let p = &vars[o..o + 6];
    let h1 = g.dense(features, p[0], p[1])?;
    let h1 = g.relu(h1);
    let h2 = g.dense(h1, p[2], p[3])?;
    let h2 = g.relu(h2);
    let joined = g.concat(h2, time, 1)?;
    Ok(g.dense(joined, p[4], p[5])?)
}

/// Both heads on the same inputs.
pub fn classify<T: Real>(g: &mut Graph<T>, cfg: &NetConfig, vars: &[Var], features: Var, time: Var) -> Result<(Var, Var), NetError> {
    let fs = g.shape(features).to_vec();
    let ts = g.shape(time).to_vec();
    if fs.len() != 2 || fs[1] != cfg.feature_dim() || ts != [fs[0], TIME_FEATURES] {
        return Err(AutodiffError::ShapeMismatch { op: "classify", detail: format!("features {fs:?}, time {ts:?}") }.into());
    }
    Ok((head(g, cfg, vars, 0, features, time)?, head(g, cfg, vars, 1, features, time)?))
}

fn softmax_row(r: &[f32]) -> Vec<f64> {
    let m = r.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = r.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Averages the two heads' softmax distributions row-wise and predicts the
/// argmax class.
pub fn combine(logits1: &[f32], logits2: &[f32]) -> (Vec<f32>, Vec<usize>) {
    assert_eq!(logits1.len(), logits2.len(), "combine: logit shapes differ");
    let k = BeatClass::COUNT;
    let mut probs = Vec::with_capacity(logits1.len());
    let mut classes = Vec::with_capacity(logits1.len() / k);
    for (a, b) in logits1.chunks(k).zip(logits2.chunks(k)) {
        let row: Vec<f32> = softmax_row(a).iter().zip(softmax_row(b)).map(|(x, y)| ((x + y) / 2.0) as f32).collect();
        classes.push(argmax(&row));
        probs.extend(row);
    }
    (probs, classes)
}

/// Averages two probability tables row-wise.
pub fn combine_probs(p1: &[f32], p2: &[f32]) -> (Vec<f32>, Vec<usize>) {
    let probs: Vec<f32> = p1.iter().zip(p2).map(|(a, b)| ((*a as f64 + *b as f64) / 2.0) as f32).collect();
    let classes = probs.chunks(BeatClass::COUNT).map(argmax).collect();
    (probs, classes)
}

/// Outputs of a gradient-free pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Inference {
    pub features: Vec<f32>,
    pub probs1: Vec<f32>,
    pub probs2: Vec<f32>,
    pub probs: Vec<f32>,
    pub predicted: Vec<usize>,
}

impl Inference {
    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }
}

/// Runs the model over `segments` in chunks without recording gradients.
pub fn infer(model: &Model<f32>, segments: &[&BeatSegment], chunk: usize) -> Result<Inference, NetError> {
    let mut frozen = model.clone();
    frozen.params.iter_mut().for_each(|p| p.set_requires_grad(false));
    let expected = model.segment_len();
    let mut out = Inference::default();
    for part in segments.chunks(chunk.max(1)) {
        if let Some(s) = part.iter().find(|s| s.waveform.len() != expected) {
            return Err(NetError::SegmentLength { expected, found: s.waveform.len() });
        }
        let mut g = Graph::<f32>::new();
        let vars = frozen.bind(&mut g);
        let (x, t) = frozen.inputs(part)?;
        let x = g.leaf(&x);
        let t = g.leaf(&t);
        let f = extract(&mut g, &frozen.config, &vars, x)?;
        let (l1, l2) = classify(&mut g, &frozen.config, &vars, f, t)?;
        let p1 = g.softmax(l1);
        let p2 = g.softmax(l2);
        out.features.extend_from_slice(g.value(f));
        out.probs1.extend_from_slice(g.value(p1));
        out.probs2.extend_from_slice(g.value(p2));
        let (probs, classes) = combine_probs(g.value(p1), g.value(p2));
        out.probs.extend(probs);
        out.predicted.extend(classes);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(b: usize, l: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..b * l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = (0..b * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        (Tensor::new(vec![b, 1, l], x).unwrap(), Tensor::new(vec![b, 3], t).unwrap())
    }

    fn features(model: &Model, x: &Tensor<f32>) -> Vec<f32> {
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let xv = g.leaf(x);
        let f = extract(&mut g, &model.config, &vars, xv).unwrap();
        g.value(f).to_vec()
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let model = Model::<f32>::init(NetConfig::default(), 1, 212);
        let x = Tensor::zeros(vec![2, 1, 64]).unwrap();
        assert!(features(&model, &x).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_shape_and_length_agnostic() {
        let model = Model::<f32>::init(NetConfig::default(), 1, 212);
        for (b, l) in [(512, 213), (3, 64), (2, 8)] {
            let (x, _) = batch(b, l, 3);
            assert_eq!(features(&model, &x).len(), b * 64);
        }
        let (x, _) = batch(1, 7, 3);
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let xv = g.leaf(&x);
        assert!(matches!(extract(&mut g, &model.config, &vars, xv), Err(NetError::InputTooShort(7))));
    }

    #[test]
    fn batch_permutation_permutes_features() {
        let model = Model::<f32>::init(NetConfig::default(), 5, 212);
        let (x, _) = batch(3, 40, 9);
        let f = features(&model, &x);
        let mut swapped = x.data()[40..80].to_vec();
        swapped.extend_from_slice(&x.data()[..40]);
        swapped.extend_from_slice(&x.data()[80..]);
        let fs = features(&model, &Tensor::new(vec![3, 1, 40], swapped).unwrap());
        assert_eq!(&fs[..64], &f[64..128]);
        assert_eq!(&fs[64..128], &f[..64]);
        assert_eq!(&fs[128..], &f[128..]);
    }

    #[test]
    fn heads_start_different_and_match_when_copied() {
        let mut model = Model::<f32>::init(NetConfig::default(), 11, 212);
        assert_ne!(model.param("c1.fc1.w"), model.param("c2.fc1.w"));
        for layer in ["fc1", "fc2", "fc3"] {
            for kind in ["w", "b"] {
                let src = model.param(&format!("c1.{layer}.{kind}")).unwrap().clone();
                *model.param_mut(&format!("c2.{layer}.{kind}")).unwrap() = src;
            }
        }
        let (x, t) = batch(4, 32, 2);
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let (xv, tv) = (g.leaf(&x), g.leaf(&t));
        let f = extract(&mut g, &model.config, &vars, xv).unwrap();
        let (l1, l2) = classify(&mut g, &model.config, &vars, f, tv).unwrap();
        assert_eq!(g.value(l1), g.value(l2));
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let mut model = Model::<f32>::init(NetConfig::default(), 1, 212);
        for p in &mut model.params {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let bias = [0.5, -1.0, 2.0, 0.25];
        for h in ["c1", "c2"] {
            model.param_mut(&format!("{h}.fc3.b")).unwrap().data_mut().copy_from_slice(&bias);
        }
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let f = g.constant(vec![2, 64], vec![0.0; 128]).unwrap();
        let t = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let (l1, l2) = classify(&mut g, &model.config, &vars, f, t).unwrap();
        for l in [l1, l2] {
            assert_eq!(g.value(l), &[bias, bias].concat()[..]);
        }
        let bad = g.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(classify(&mut g, &model.config, &vars, f, bad).is_err());
    }

    #[test]
    fn combine_rules() {
        let (p, c) = combine_probs(&[0.6, 0.4, 0.0, 0.0], &[0.2, 0.8, 0.0, 0.0]);
        assert!((p[0] - 0.4).abs() < 1e-7 && (p[1] - 0.6).abs() < 1e-7);
        assert_eq!(c, vec![1]);
        assert_eq!(argmax(&[0.5, 0.5, 0.0, 0.0]), 0);
        let logits = [0.3, 2.0, -1.0, 0.1, 1.0, 1.0, 1.0, 1.0];
        let (probs, classes) = combine(&logits, &logits);
        assert_eq!(classes, vec![1, 0]);
        for row in probs.chunks(4) {
            assert!((row.iter().map(|v| *v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip_restores_model() {
        let mut model = Model::<f32>::init(NetConfig::default(), 4, 205);
        model.normalizer = TimeNormalizer { mean: [0.8, 0.8, 0.8], std: [0.1, 0.05, 0.07] };
        let ck = model.to_checkpoint();
        let back = Model::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.checksum(), model.checksum());
        assert_eq!(back.manifest(), model.manifest());
        assert_eq!(back.segment_len(), 205);
    }
}
