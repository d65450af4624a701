//! On-disk orchestration of the full method: preprocessing caches, stage
//! checkpoints, cluster state, reports and metrics under one output
//! directory.
//!
//! | file                     | written by          |
//! |--------------------------|---------------------|
//! | `source.seg`, `target.seg` | [`preprocess`]    |
//! | `stage1.ckpt`, `stage1.jsonl` | [`pretrain_stage`] |
//! | `stage2.ckpt`, `stage2.jsonl`, `clusters.txt` | [`cluster_stage`] |
//! | `stage3.ckpt`, `stage3.jsonl` | [`adapt_stage`] |
//! | `metrics.json`, `confusion.csv` | evaluation  |
//!
//! Each stage reads its predecessor's artifacts from disk, so [`run`] is
//! exactly the three stage calls in sequence.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autodiff::checkpoint::{Checkpoint, CheckpointError};
use crate::clusters::{ClusterError, ClusterState};
use crate::config::Config;
use crate::eval::{emit_report, evaluate, ConfusionMatrix, EvalError, MetricsReport};
use crate::net::{Model, NetError, TimeNormalizer};
use crate::record_io::{augment, load_records, Domain, LabeledDataset, RecordError};
use crate::signal::{prepare, read_cache, write_cache, Prepared, SignalError};
use crate::trainer::{self, Stage, StageReport, TrainError};

pub const SOURCE_CACHE: &str = "source.seg";
pub const TARGET_CACHE: &str = "target.seg";
pub const CLUSTERS_FILE: &str = "clusters.txt";
pub const CONFIG_FILE: &str = "config.txt";

pub fn checkpoint_name(stage: Stage) -> String {
    format!("stage{}.ckpt", stage.number())
}

pub fn report_name(stage: Stage) -> String {
    format!("stage{}.jsonl", stage.number())
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0} data path not given and no cached segments in the output directory")]
    MissingInput(&'static str),
    #[error("{path} not found; run `{hint}` first")]
    MissingArtifact { path: String, hint: &'static str },
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
    #[error("stage {stage}: {source}")]
    Stage { stage: &'static str, source: TrainError },
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Record directories of the two domains. Either may be omitted once its
/// segment cache exists in the output directory.
#[derive(Debug, Clone, Default)]
pub struct Inputs {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
}

impl Inputs {
    pub fn new(source: impl Into<PathBuf>, target: impl Into<PathBuf>) -> Self {
        Self { source: Some(source.into()), target: Some(target.into()) }
    }

    /// Identifier for reports: the target directory's name.
    pub fn target_id(&self) -> String {
        self.target
            .as_ref()
            .and_then(|p| p.file_name())
            .map_or_else(|| "target".to_string(), |n| n.to_string_lossy().into_owned())
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io { path: path.display().to_string(), detail: e.to_string() }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn staged(stage: &'static str) -> impl FnOnce(TrainError) -> PipelineError {
    move |source| PipelineError::Stage { stage, source }
}

/// Loads and preprocesses both domains and writes their segment caches.
/// The target is cut with the source's RR mean.
pub fn preprocess(inputs: &Inputs, cfg: &Config, out_dir: &Path) -> Result<(Prepared, Option<Prepared>)> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let src_dir = inputs.source.as_ref().ok_or(PipelineError::MissingInput("source"))?;
    let source = prepare(&load_records(src_dir)?, &cfg.prep, None, Domain::Source)?;
    log::info!("source: {} segments of length {}, rr_mean {}", source.dataset.len(), crate::signal::segment_len(source.rr_mean), source.rr_mean);
    write_cache(&out_dir.join(SOURCE_CACHE), &source, cfg.prep.target_fs)?;
    let target = match &inputs.target {
        Some(dir) => {
            let t = prepare(&load_records(dir)?, &cfg.prep, Some(source.rr_mean), Domain::Target)?;
            log::info!("target: {} segments", t.dataset.len());
            write_cache(&out_dir.join(TARGET_CACHE), &t, cfg.prep.target_fs)?;
            Some(t)
        }
        None => None,
    };
    Ok((source, target))
}

/// Preprocessed domains as seen by the training stages.
#[derive(Debug, Clone)]
pub struct Domains {
    /// Unduplicated source.
    pub source: LabeledDataset,
    /// Source with class duplication applied; what the stages train on.
    pub source_train: LabeledDataset,
    pub target: Option<LabeledDataset>,
    pub rr_mean: usize,
}

/// Reads the segment caches, preprocessing first if they are missing.
pub fn load_domains(inputs: &Inputs, cfg: &Config, out_dir: &Path) -> Result<Domains> {
    let (sp, tp) = (out_dir.join(SOURCE_CACHE), out_dir.join(TARGET_CACHE));
    let need_target = inputs.target.is_some() && !tp.exists();
    if !sp.exists() || need_target {
        preprocess(inputs, cfg, out_dir)?;
    }
    let source = read_cache(&sp, Domain::Source)?;
    let target = if tp.exists() { Some(read_cache(&tp, Domain::Target)?.dataset) } else { None };
    Ok(Domains {
        source_train: augment(&source.dataset, cfg.train.augment),
        source: source.dataset,
        target,
        rr_mean: source.rr_mean,
    })
}

fn require(path: PathBuf, hint: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingArtifact { path: path.display().to_string(), hint })
    }
}

pub fn load_model(path: &Path) -> Result<Model> {
    Ok(Model::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn save_stage(out_dir: &Path, model: &Model, report: &StageReport) -> Result<()> {
    model.to_checkpoint().save(&out_dir.join(checkpoint_name(report.stage)))?;
    write_file(&out_dir.join(report_name(report.stage)), report.to_jsonl())?;
    log::info!("stage {} finished in {:.1} s", report.stage.number(), report.wall_time_s);
    Ok(())
}

fn target_of(d: &Domains) -> Result<&LabeledDataset> {
    d.target.as_ref().ok_or(PipelineError::MissingInput("target"))
}

/// Stage 1 from a freshly initialized model.
pub fn pretrain_stage(inputs: &Inputs, cfg: &Config, out_dir: &Path) -> Result<(Model, StageReport)> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    write_file(&out_dir.join(CONFIG_FILE), cfg.to_text())?;
    let d = load_domains(inputs, cfg, out_dir)?;
    let mut model = Model::init(cfg.train.net.clone(), cfg.train.seed, d.rr_mean);
    model.normalizer = TimeNormalizer::fit(&d.source_train.segments);
    let report = trainer::pretrain(&mut model, &d.source_train, &cfg.train).map_err(staged("pretrain"))?;
    save_stage(out_dir, &model, &report)?;
    Ok((model, report))
}

/// Stage 2 on `stage1.ckpt`, followed by confident target selection.
pub fn cluster_stage(inputs: &Inputs, cfg: &Config, out_dir: &Path) -> Result<(Model, StageReport, ClusterState)> {
    cfg.validate()?;
    let ck = require(out_dir.join(checkpoint_name(Stage::Pretrain)), "pretrain")?;
    let d = load_domains(inputs, cfg, out_dir)?;
    let mut model = load_model(&ck)?;
    let (report, mut state) = trainer::organize_source_clusters(&mut model, &d.source_train, &cfg.train).map_err(staged("clusters"))?;
    trainer::compute_target_state(&model, target_of(&d)?, &mut state, &cfg.train).map_err(staged("clusters"))?;
    save_stage(out_dir, &model, &report)?;
    state.save(&out_dir.join(CLUSTERS_FILE))?;
    Ok((model, report, state))
}

/// Stage 3 on `stage2.ckpt` and `clusters.txt`; evaluates the result on a
/// labeled target.
pub fn adapt_stage(inputs: &Inputs, cfg: &Config, out_dir: &Path) -> Result<(Model, StageReport, Option<MetricsReport>)> {
    cfg.validate()?;
    let ck = require(out_dir.join(checkpoint_name(Stage::Cluster)), "clusters")?;
    let cl = require(out_dir.join(CLUSTERS_FILE), "clusters")?;
    let d = load_domains(inputs, cfg, out_dir)?;
    let mut model = load_model(&ck)?;
    let mut state = ClusterState::load(&cl)?;
    let target = target_of(&d)?;
    let report = trainer::adapt(&mut model, &d.source_train, target, &mut state, &cfg.train).map_err(staged("adapt"))?;
    save_stage(out_dir, &model, &report)?;
    let metrics = evaluate_target(&model, target, &inputs.target_id(), "stage3", cfg, out_dir)?;
    Ok((model, report, metrics))
}

/// Evaluates on `target` if it is labeled and writes the report files.
pub fn evaluate_target(model: &Model, target: &LabeledDataset, dataset: &str, model_id: &str, cfg: &Config, out_dir: &Path) -> Result<Option<MetricsReport>> {
    if !target.is_fully_labeled() || target.is_empty() {
        log::warn!("target has no labels; skipping evaluation");
        return Ok(None);
    }
    let data = if cfg.eval_augment { augment(target, cfg.train.augment) } else { target.clone() };
    let (cm, report) = evaluate(model, &data, dataset, model_id, cfg.eval_augment)?;
    emit_report(&report, &cm, out_dir, cfg.heatmap)?;
    Ok(Some(report))
}

/// Outcome of a complete run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: Model,
    pub reports: Vec<StageReport>,
    pub clusters: ClusterState,
    pub metrics: Option<MetricsReport>,
}

/// Preprocessing and all three stages.
pub fn run(inputs: &Inputs, cfg: &Config, out_dir: &Path) -> Result<RunOutput> {
    preprocess(inputs, cfg, out_dir)?;
    let (_, r1) = pretrain_stage(inputs, cfg, out_dir)?;
    let (_, r2, clusters) = cluster_stage(inputs, cfg, out_dir)?;
    let (model, r3, metrics) = adapt_stage(inputs, cfg, out_dir)?;
    Ok(RunOutput { model, reports: vec![r1, r2, r3], clusters, metrics })
}

/// Stage 1 only, evaluated on the target: the no-adaptation reference.
pub fn baseline(inputs: &Inputs, cfg: &Config, out_dir: &Path) -> Result<(Model, Option<MetricsReport>)> {
    preprocess(inputs, cfg, out_dir)?;
    let (model, _) = pretrain_stage(inputs, cfg, out_dir)?;
    let d = load_domains(inputs, cfg, out_dir)?;
    let metrics = evaluate_target(&model, target_of(&d)?, &inputs.target_id(), "baseline", cfg, out_dir)?;
    Ok((model, metrics))
}

/// Evaluates a checkpoint on a record directory, cut with the RR mean the
/// model was trained with.
pub fn evaluate_checkpoint(ckpt: &Path, data_dir: &Path, cfg: &Config, out_dir: &Path) -> Result<(ConfusionMatrix, MetricsReport)> {
    let model = load_model(ckpt)?;
    let prepared = prepare(&load_records(data_dir)?, &cfg.prep, Some(model.rr_mean), Domain::Target)?;
    let data = if cfg.eval_augment { augment(&prepared.dataset, cfg.train.augment) } else { prepared.dataset };
    let dataset = data_dir.file_name().map_or_else(|| "data".into(), |n| n.to_string_lossy().into_owned());
    let model_id = ckpt.file_stem().map_or_else(|| "model".into(), |n| n.to_string_lossy().into_owned());
    let (cm, report) = evaluate(&model, &data, &dataset, &model_id, cfg.eval_augment)?;
    ensure_dir(out_dir)?;
    emit_report(&report, &cm, out_dir, cfg.heatmap)?;
    Ok((cm, report))
}
