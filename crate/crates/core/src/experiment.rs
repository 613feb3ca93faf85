//! Configuration-driven experiments. Each stage reads its inputs from and
//! writes its outputs to the experiment directory, so stages can be rerun
//! independently:
//!
//! ```text
//! {out}/{protocol}/{fold}/streams/          stage-1 streams (bundle format)
//! {out}/{protocol}/{fold}/fusion-{s}/       streams plus trained fusion
//! {out}/{protocol}/{fold}/cache/{src}.hlxc  frozen target features
//! {out}/{protocol}/{fold}/hall/{net}/       hallucination networks
//! {out}/{protocol}/{fold}/bundles/{v}/      complete bundles per variant
//! {out}/{protocol}/report.json              evaluation results
//! {out}/report/                             CSV tables and summary.md
//! ```

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bundle::{load_bundle, read_param_dir, save_bundle, write_param_dir};
use crate::datasets::{
    cache_features, encode_dataset_parallel, load_manifest, make_split, synth_generate, DatasetManifest, EncodedDataset,
    FeatureCache, PreprocessConfig, Split, SplitSpec, SynthConfig,
};
use crate::encoding::{TemporalReduction, VideoGeometry};
use crate::error::{HalluxError, Result};
use crate::evaluation::{emit_reports, timing_benchmark_modes, ConfigResult, EvalReport, FoldReport, TimingRow};
use crate::models::{
    argmax_rows, fingerprint, hallucinate, predict_probs, BackboneSpec, FusedFeatures, FusionModel, FusionStrategy,
    Hallucination, HallucinationMode, HallucinationModel, HallucinationTarget, InferencePath, LossKind, Modality,
    ModelBundle, StreamModel,
};
use crate::tensor::Tensor;
use crate::training::{
    stream_features, train_fusion, train_fusion_on_features, train_hallucination, train_stream, Hyperparams,
    TrainData, TrainOptions,
};

pub const STAGE_INGEST: &str = "ingest";
pub const STAGE_STREAMS: &str = "train-streams";
pub const STAGE_FUSION: &str = "train-fusion";
pub const STAGE_CACHE: &str = "cache-features";
pub const STAGE_HALLUCINATION: &str = "train-hallucination";
pub const STAGE_EVALUATE: &str = "evaluate";
pub const STAGE_BENCHMARK: &str = "benchmark";
pub const STAGE_REPORT: &str = "report";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSource {
    /// Path to a `manifest.json`.
    Manifest(PathBuf),
    Synth(SynthConfig),
}

/// Hallucination target of a privileged stream in individual mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    #[serde(rename = "self")]
    Own,
    SkeletonProxy,
    Fused,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Original,
    Loso,
    ClassSubset,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Original => "original",
            Protocol::Loso => "loso",
            Protocol::ClassSubset => "class-subset",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = HalluxError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Protocol::Original),
            "loso" => Ok(Protocol::Loso),
            "class-subset" => Ok(Protocol::ClassSubset),
            other => Err(HalluxError::Config(format!("unknown protocol `{other}`"))),
        }
    }
}

/// One fusion / hallucination-mode / loss combination.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub fusion: FusionStrategy,
    pub hall_mode: HallucinationMode,
    pub loss: LossKind,
}

impl Variant {
    pub fn label(&self) -> String {
        format!("{}-{}-{}", self.hall_mode, self.loss, self.fusion)
    }

    /// Name of the hallucinated configuration in reports.
    pub fn configuration(&self) -> String {
        format!("hallucinated-{}", self.label())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.hall_mode.compatible_with(self.fusion) {
            return Err(HalluxError::Config(format!(
                "N/A combination: {} hallucination with {} fusion (integrated hallucination requires mid-dense fusion)",
                self.hall_mode, self.fusion
            )));
        }
        Ok(())
    }
}

/// Initial weights of the hallucination networks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HallucinationInit {
    /// Copy of the trained inertial backbone.
    #[default]
    Inertial,
    /// Copy of the target stream's backbone when its input shape matches
    /// the inertial one, otherwise the inertial backbone.
    Target,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingConfig {
    pub reps: usize,
}

pub const REQUIRED_KEYS: [&str; 7] = ["dataset", "modalities", "fusion", "hall_mode", "loss", "out", "seed"];

fn default_protocols() -> Vec<Protocol> {
    vec![Protocol::Original]
}

/// Preprocessing sized for the desk-scale backbone (32x32 inputs).
pub fn desk_preprocess() -> PreprocessConfig {
    PreprocessConfig {
        image_size: 32,
        inertial_len: 192,
        skeleton_frames: 64,
        video: VideoGeometry { clip_len: 32, short_side: 36, crop: 32 },
        video_reduction: TemporalReduction::Mean,
        per_sensor: true,
    }
}

fn default_widths() -> Vec<usize> {
    vec![16, 32, 64, 128]
}

fn default_stream_hyper() -> Hyperparams {
    Hyperparams { epochs: 30, ..Default::default() }
}

fn default_fusion_hyper() -> Hyperparams {
    Hyperparams { epochs: 30, ..Default::default() }
}

fn default_hall_hyper() -> Hyperparams {
    Hyperparams { epochs: 40, ..Default::default() }
}

fn default_views() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// Must include `inertial`, which becomes stream 0.
    pub modalities: Vec<Modality>,
    pub fusion: FusionStrategy,
    pub hall_mode: HallucinationMode,
    pub loss: LossKind,
    /// Individual-mode target per privileged stream; unlisted streams
    /// imitate their own features.
    #[serde(default)]
    pub targets: BTreeMap<Modality, TargetKind>,
    /// Further combinations trained on the same stage-1 streams.
    #[serde(default)]
    pub extra_variants: Vec<Variant>,
    #[serde(default = "default_protocols")]
    pub protocols: Vec<Protocol>,
    /// Last class (1-based) of the first phase of the class-subset protocol;
    /// defaults to half the classes, rounded up.
    #[serde(default)]
    pub class_subset_split: Option<usize>,
    #[serde(default = "desk_preprocess")]
    pub preprocess: PreprocessConfig,
    #[serde(default = "default_widths")]
    pub backbone_widths: Vec<usize>,
    #[serde(default = "default_stream_hyper")]
    pub stream_training: Hyperparams,
    #[serde(default = "default_fusion_hyper")]
    pub fusion_training: Hyperparams,
    #[serde(default = "default_hall_hyper")]
    pub hallucination_training: Hyperparams,
    #[serde(default)]
    pub hallucination_init: HallucinationInit,
    /// Randomly cropped training encodings cycled over epochs; 0 trains on
    /// the centered encoding only.
    #[serde(default = "default_views")]
    pub augment_views: usize,
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Measure inference times during `run-all` (timings are not
    /// reproducible byte for byte).
    #[serde(default)]
    pub timing: Option<TimingConfig>,
    #[serde(default)]
    pub threads: Option<usize>,
    pub out: PathBuf,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Two-stream synthetic experiment with desk-scale defaults.
    pub fn synthetic(out: PathBuf, seed: u64) -> Self {
        Self {
            dataset: DatasetSource::Synth(SynthConfig::default()),
            modalities: vec![Modality::Inertial, Modality::Skeleton],
            fusion: FusionStrategy::MidDense,
            hall_mode: HallucinationMode::Individual,
            loss: LossKind::Triplet,
            targets: BTreeMap::new(),
            extra_variants: Vec::new(),
            protocols: default_protocols(),
            class_subset_split: None,
            preprocess: desk_preprocess(),
            backbone_widths: default_widths(),
            stream_training: default_stream_hyper(),
            fusion_training: default_fusion_hyper(),
            hallucination_training: default_hall_hyper(),
            hallucination_init: HallucinationInit::default(),
            augment_views: default_views(),
            checkpoint_every: 0,
            timing: None,
            threads: None,
            out,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let streams = self.stream_modalities()?;
        for v in self.variants() {
            v.validate()?;
        }
        if self.protocols.is_empty() {
            return Err(HalluxError::Config("protocol list is empty".into()));
        }
        if self.backbone_widths.is_empty() {
            return Err(HalluxError::Config("backbone_widths is empty".into()));
        }
        for (m, t) in &self.targets {
            if *m == Modality::Inertial || !streams.contains(m) {
                return Err(HalluxError::Config(format!("target given for {m}, which is not a privileged stream")));
            }
            match t {
                TargetKind::Own => {}
                TargetKind::SkeletonProxy => {
                    if *m == Modality::Skeleton || !streams.contains(&Modality::Skeleton) {
                        return Err(HalluxError::Config(format!(
                            "skeleton-proxy target for {m} needs a separate skeleton stream"
                        )));
                    }
                }
                TargetKind::Fused => {
                    if self.variants().iter().any(|v| v.hall_mode == HallucinationMode::Individual) {
                        return Err(HalluxError::Config(format!(
                            "fused target for {m} requires integrated hallucination in every variant"
                        )));
                    }
                }
            }
        }
        for h in [&self.stream_training, &self.fusion_training, &self.hallucination_training] {
            h.validate()?;
        }
        if self.variants().iter().any(|v| v.loss == LossKind::Triplet) && self.hallucination_training.batch_size < 2 {
            return Err(HalluxError::Config("triplet loss needs hallucination batch_size >= 2".into()));
        }
        if let Some(t) = self.timing {
            if t.reps < 10 {
                return Err(HalluxError::Config("timing reps must be at least 10".into()));
            }
        }
        Ok(())
    }

    /// Stream modalities, inertial first, others in listed order.
    pub fn stream_modalities(&self) -> Result<Vec<Modality>> {
        if !self.modalities.contains(&Modality::Inertial) {
            return Err(HalluxError::Config("modality list must include inertial".into()));
        }
        let mut out = vec![Modality::Inertial];
        for &m in &self.modalities {
            if m == Modality::Inertial {
                continue;
            }
            if out.contains(&m) {
                return Err(HalluxError::Config(format!("modality {m} listed twice")));
            }
            out.push(m);
        }
        if self.modalities.iter().filter(|&&m| m == Modality::Inertial).count() > 1 {
            return Err(HalluxError::Config("modality inertial listed twice".into()));
        }
        Ok(out)
    }

    /// Primary variant followed by extra ones, without repeats.
    pub fn variants(&self) -> Vec<Variant> {
        let mut out = vec![Variant { fusion: self.fusion, hall_mode: self.hall_mode, loss: self.loss }];
        for v in &self.extra_variants {
            if !out.contains(v) {
                out.push(*v);
            }
        }
        out
    }

    pub fn fusions(&self) -> Vec<FusionStrategy> {
        let mut out = Vec::new();
        for v in self.variants() {
            if !out.contains(&v.fusion) {
                out.push(v.fusion);
            }
        }
        out
    }

    /// Hallucination targets of a variant.
    pub fn targets_of(&self, v: &Variant) -> Result<Vec<HallucinationTarget>> {
        Ok(match v.hall_mode {
            HallucinationMode::Integrated => vec![HallucinationTarget::Fused],
            HallucinationMode::Individual => self.stream_modalities()?[1..]
                .iter()
                .map(|&m| match self.targets.get(&m).copied().unwrap_or(TargetKind::Own) {
                    TargetKind::SkeletonProxy => HallucinationTarget::SkeletonProxy(m),
                    _ => HallucinationTarget::Stream(m),
                })
                .collect(),
        })
    }

    /// Distinct (target, loss) networks over all variants.
    pub fn networks(&self) -> Result<Vec<(HallucinationTarget, LossKind)>> {
        let mut out = Vec::new();
        for v in self.variants() {
            for t in self.targets_of(&v)? {
                if !out.contains(&(t, v.loss)) {
                    out.push((t, v.loss));
                }
            }
        }
        Ok(out)
    }

    pub fn backbone_spec(&self, m: Modality) -> BackboneSpec {
        let [h, w, c] = self.preprocess.input_shape(m);
        BackboneSpec { height: h, width: w, in_channels: c, widths: self.backbone_widths.clone(), kernel: 3 }
    }
}

/// Validated config from JSON text.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    config_from_value(config_value(text)?)
}

/// The JSON object of a config file, before validation.
pub fn config_value(text: &str) -> Result<serde_json::Value> {
    if text.trim().is_empty() {
        return Err(HalluxError::Config(format!("config is empty; required keys: {}", REQUIRED_KEYS.join(", "))));
    }
    let value: serde_json::Value = serde_json::from_str(text)?;
    if !value.is_object() {
        return Err(HalluxError::Config("config must be a JSON object".into()));
    }
    Ok(value)
}

/// Validated config from a JSON object.
pub fn config_from_value(value: serde_json::Value) -> Result<ExperimentConfig> {
    let obj = value
        .as_object()
        .ok_or_else(|| HalluxError::Config("config must be a JSON object".into()))?;
    let missing: Vec<&str> = REQUIRED_KEYS.iter().copied().filter(|k| !obj.contains_key(*k)).collect();
    if !missing.is_empty() {
        return Err(HalluxError::Config(format!("missing required keys: {}", missing.join(", "))));
    }
    let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| HalluxError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config_str(&std::fs::read_to_string(path)?)
}

pub fn emit_config(cfg: &ExperimentConfig) -> String {
    let mut s = serde_json::to_string_pretty(cfg).expect("config serializes");
    s.push('\n');
    s
}

/// Stage seed from the experiment seed and a tag.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// A train/test partition on which the stages run. Labels inside the fold
/// are `class - offset` over `num_classes` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Fold {
    pub protocol: Protocol,
    pub name: String,
    pub split: Split,
    pub offset: usize,
    pub num_classes: usize,
    pub dir: PathBuf,
}

impl Fold {
    fn tag(&self, what: &str) -> String {
        format!("{}/{}/{what}", self.protocol, self.name)
    }
}

struct Encodings {
    test: EncodedDataset,
    views: Vec<EncodedDataset>,
}

/// Encoded data restricted to one fold.
struct FoldData {
    test: EncodedDataset,
    views: Vec<EncodedDataset>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct NetMeta {
    target: HallucinationTarget,
    loss: LossKind,
    spec: BackboneSpec,
    cache_fingerprint: String,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ HalluxError::Stage { .. } => e,
        e => e.in_stage(name),
    })
}

fn cache_name(target: HallucinationTarget) -> String {
    match target.source() {
        Some(m) => m.to_string(),
        None => "fused".into(),
    }
}

pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub manifest: DatasetManifest,
    encodings: OnceCell<Encodings>,
}

impl Experiment {
    /// Validates the config and loads (or generates) the dataset.
    pub fn open(cfg: ExperimentConfig) -> Result<Self> {
        stage(STAGE_INGEST, cfg.validate())?;
        let manifest = stage(
            STAGE_INGEST,
            match &cfg.dataset {
                DatasetSource::Manifest(p) => load_manifest(p),
                DatasetSource::Synth(s) => synth_generate(s),
            },
        )?;
        for m in cfg.stream_modalities()? {
            let missing: Vec<String> =
                manifest.samples.iter().filter(|s| !s.has(m)).map(|s| s.sample_id.clone()).collect();
            if !missing.is_empty() {
                return Err(HalluxError::MissingModality { modality: m.to_string(), ids: missing }.in_stage(STAGE_INGEST));
            }
        }
        Ok(Self { cfg, manifest, encodings: OnceCell::new() })
    }

    fn threads(&self) -> usize {
        self.cfg.threads.unwrap_or(1).max(1)
    }

    fn encodings(&self) -> Result<&Encodings> {
        if let Some(e) = self.encodings.get() {
            return Ok(e);
        }
        let mods = self.cfg.stream_modalities()?;
        let p = &self.cfg.preprocess;
        let test = encode_dataset_parallel(&self.manifest, &mods, p, false, 0, self.threads())?;
        let views = if self.cfg.augment_views == 0 {
            vec![test.clone()]
        } else {
            (0..self.cfg.augment_views)
                .map(|i| {
                    let seed = derive_seed(self.cfg.seed, &format!("view{i}"));
                    encode_dataset_parallel(&self.manifest, &mods, p, true, seed, self.threads())
                })
                .collect::<Result<_>>()?
        };
        Ok(self.encodings.get_or_init(|| Encodings { test, views }))
    }

    fn fold_data(&self, fold: &Fold) -> Result<FoldData> {
        let enc = self.encodings()?;
        let mut ids = fold.split.train.clone();
        ids.extend(fold.split.test.iter().cloned());
        let off = fold.offset;
        let k = fold.num_classes;
        let restrict = |d: &EncodedDataset| -> Result<EncodedDataset> { Ok(d.subset(&ids)?.relabel(k, |c| c - off)) };
        Ok(FoldData { test: restrict(&enc.test)?, views: enc.views.iter().map(restrict).collect::<Result<_>>()? })
    }

    /// Centered (test-mode) encodings of a fold's samples, with fold labels.
    pub fn fold_encoding(&self, fold: &Fold) -> Result<EncodedDataset> {
        Ok(self.fold_data(fold)?.test)
    }

    fn protocol_dir(&self, p: Protocol) -> PathBuf {
        self.cfg.out.join(p.as_str())
    }

    fn split_point(&self) -> Result<usize> {
        let k = self.manifest.num_classes;
        let s = self.cfg.class_subset_split.unwrap_or(k.div_ceil(2));
        if s < 2 || s + 2 > k {
            return Err(HalluxError::Config(format!(
                "class-subset split after class {s} leaves fewer than two classes on a side of {k}"
            )));
        }
        Ok(s)
    }

    fn fold(&self, protocol: Protocol, name: &str, spec: SplitSpec, offset: usize, num_classes: usize) -> Result<Fold> {
        Ok(Fold {
            protocol,
            name: name.to_string(),
            split: make_split(&self.manifest, &spec)?,
            offset,
            num_classes,
            dir: self.protocol_dir(protocol).join(name),
        })
    }

    /// Folds on which the training stages run.
    pub fn training_folds(&self, protocol: Protocol) -> Result<Vec<Fold>> {
        let k = self.manifest.num_classes;
        match protocol {
            Protocol::Original => Ok(vec![self.fold(protocol, "original", SplitSpec::OriginalSplit, 0, k)?]),
            Protocol::Loso => self
                .manifest
                .subjects()
                .into_iter()
                .map(|s| self.fold(protocol, &format!("subject-{s}"), SplitSpec::LeaveOneSubjectOut { held_out: s }, 0, k))
                .collect(),
            Protocol::ClassSubset => {
                let s = self.split_point()?;
                Ok(vec![self.fold(protocol, "phase1", SplitSpec::ClassSubset { first: 1, last: s }, 0, s)?])
            }
        }
    }

    fn phase2_fold(&self) -> Result<Fold> {
        let k = self.manifest.num_classes;
        let s = self.split_point()?;
        self.fold(Protocol::ClassSubset, "phase2", SplitSpec::ClassSubset { first: s + 1, last: k }, s, k - s)
    }

    fn hyper(&self, base: &Hyperparams, fold: &Fold, what: &str) -> Hyperparams {
        Hyperparams { seed: derive_seed(self.cfg.seed ^ base.seed, &fold.tag(what)), ..base.clone() }
    }

    fn init_rng(&self, fold: &Fold, what: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &fold.tag(&format!("init/{what}"))))
    }

    fn opts(&self, fold: &Fold, label: &str) -> TrainOptions {
        TrainOptions {
            label: label.to_string(),
            log: Some(fold.dir.join("logs").join("train.jsonl")),
            checkpoint_dir: (self.cfg.checkpoint_every > 0).then(|| fold.dir.join("checkpoints")),
            checkpoint_every: self.cfg.checkpoint_every,
        }
    }

    /// Stage-1 streams of a fold as saved by `train_streams`.
    pub fn load_streams(&self, fold: &Fold) -> Result<ModelBundle> {
        let p = fold.dir.join("streams");
        if !p.join(crate::bundle::BUNDLE_FILE).exists() {
            return Err(HalluxError::InvalidArgument(format!(
                "no stage-1 streams at {}; run train-streams first",
                p.display()
            )));
        }
        load_bundle(&p)
    }

    fn load_fusion(&self, fold: &Fold, s: FusionStrategy) -> Result<ModelBundle> {
        let p = fold.dir.join(format!("fusion-{s}"));
        if !p.join(crate::bundle::BUNDLE_FILE).exists() {
            return Err(HalluxError::InvalidArgument(format!("no {s} fusion at {}; run train-fusion first", p.display())));
        }
        load_bundle(&p)
    }

    /// Stage 1a: every stream, trained independently.
    pub fn train_streams(&self, fold: &Fold) -> Result<ModelBundle> {
        stage(STAGE_STREAMS, self.train_streams_inner(fold))
    }

    fn train_streams_inner(&self, fold: &Fold) -> Result<ModelBundle> {
        let data = self.fold_data(fold)?;
        let mut streams = Vec::new();
        for m in self.cfg.stream_modalities()? {
            let mut model = StreamModel::new(m, self.cfg.backbone_spec(m), fold.num_classes, &mut self.init_rng(fold, m.as_str()))?;
            let h = self.hyper(&self.cfg.stream_training, fold, &format!("stream/{m}"));
            train_stream(&mut model, TrainData::new(&data.views, &fold.split.train), &h, &self.opts(fold, &format!("stream-{m}")))?;
            streams.push(model);
        }
        let n = streams.len();
        let d = streams[0].feature_dim();
        let late = FusionModel::new(FusionStrategy::Late, n, d, fold.num_classes, &mut self.init_rng(fold, "late"))?;
        let bundle = ModelBundle::new(streams, late)?;
        save_bundle(&bundle, &fold.dir.join("streams"))?;
        Ok(bundle)
    }

    /// Stage 1b: fusion networks over the frozen streams.
    pub fn train_fusion(&self, fold: &Fold) -> Result<Vec<ModelBundle>> {
        stage(STAGE_FUSION, self.train_fusion_inner(fold))
    }

    fn train_fusion_inner(&self, fold: &Fold) -> Result<Vec<ModelBundle>> {
        let stage1 = self.load_streams(fold)?;
        let before: Vec<[u8; 32]> = stage1.streams.iter().map(StreamModel::fingerprint).collect();
        let data = self.fold_data(fold)?;
        let mut out = Vec::new();
        for s in self.cfg.fusions() {
            let mut fusion = FusionModel::new(
                s,
                stage1.streams.len(),
                stage1.feature_dim(),
                fold.num_classes,
                &mut self.init_rng(fold, &format!("fusion/{s}")),
            )?;
            let h = self.hyper(&self.cfg.fusion_training, fold, &format!("fusion/{s}"));
            train_fusion(&mut fusion, &stage1.streams, TrainData::new(&data.views, &fold.split.train), &h, &self.opts(fold, &format!("fusion-{s}")))?;
            let bundle = ModelBundle::new(stage1.streams.clone(), fusion)?;
            save_bundle(&bundle, &fold.dir.join(format!("fusion-{s}")))?;
            out.push(bundle);
        }
        let after: Vec<[u8; 32]> = stage1.streams.iter().map(StreamModel::fingerprint).collect();
        if before != after {
            return Err(HalluxError::InvalidArgument("stream parameters changed during fusion training".into()));
        }
        Ok(out)
    }

    fn cache_path(&self, fold: &Fold, target: HallucinationTarget) -> PathBuf {
        fold.dir.join("cache").join(format!("{}.hlxc", cache_name(target)))
    }

    /// The frozen-model fingerprint a target's cache must carry.
    fn expected_fingerprint(&self, fold: &Fold, target: HallucinationTarget) -> Result<[u8; 32]> {
        match target.source() {
            Some(m) => {
                let b = self.load_streams(fold)?;
                let i = b.stream_index(m).ok_or_else(|| HalluxError::InvalidArgument(format!("no {m} stream")))?;
                Ok(b.streams[i].fingerprint())
            }
            None => Ok(self.load_fusion(fold, FusionStrategy::MidDense)?.stage1_fingerprint()),
        }
    }

    /// Cache of frozen target features for every hallucination target.
    pub fn cache_features(&self, fold: &Fold) -> Result<Vec<PathBuf>> {
        stage(STAGE_CACHE, self.cache_features_inner(fold))
    }

    fn cache_features_inner(&self, fold: &Fold) -> Result<Vec<PathBuf>> {
        let data = self.fold_data(fold)?;
        let stage1 = self.load_streams(fold)?;
        let mut written: Vec<PathBuf> = Vec::new();
        for (target, _) in self.cfg.networks()? {
            let path = self.cache_path(fold, target);
            if written.contains(&path) {
                continue;
            }
            match target.source() {
                Some(m) => {
                    let i = stage1.stream_index(m).ok_or_else(|| HalluxError::InvalidArgument(format!("no {m} stream")))?;
                    cache_features(&stage1.streams[i], &data.test, &fold.split.train, &path)?;
                }
                None => {
                    let b = self.load_fusion(fold, FusionStrategy::MidDense)?;
                    cache_features(&FusedFeatures::new(&b)?, &data.test, &fold.split.train, &path)?;
                }
            }
            written.push(path);
        }
        Ok(written)
    }

    fn net_dir(&self, fold: &Fold, target: HallucinationTarget, loss: LossKind) -> PathBuf {
        fold.dir.join("hall").join(format!("{}-{loss}", target.label()))
    }

    fn load_net(&self, fold: &Fold, target: HallucinationTarget, loss: LossKind) -> Result<HallucinationModel> {
        let dir = self.net_dir(fold, target, loss);
        let meta_path = dir.join("net.json");
        if !meta_path.exists() {
            return Err(HalluxError::InvalidArgument(format!(
                "no hallucination network at {}; run train-hallucination first",
                dir.display()
            )));
        }
        let meta: NetMeta = serde_json::from_str(&std::fs::read_to_string(meta_path)?)?;
        Ok(HallucinationModel { target: meta.target, spec: meta.spec, params: read_param_dir(&dir)? })
    }

    /// Stage 2: hallucination networks against the cached features, then one
    /// complete bundle per variant.
    pub fn train_hallucination(&self, fold: &Fold) -> Result<Vec<ModelBundle>> {
        stage(STAGE_HALLUCINATION, self.train_hallucination_inner(fold))
    }

    fn train_hallucination_inner(&self, fold: &Fold) -> Result<Vec<ModelBundle>> {
        let data = self.fold_data(fold)?;
        let stage1 = self.load_streams(fold)?;
        let stage1_fp = stage1.stage1_fingerprint();
        let spec = stage1.streams[0].spec.clone();
        for (target, loss) in self.cfg.networks()? {
            let expected = self.expected_fingerprint(fold, target)?;
            let cache = FeatureCache::load(&self.cache_path(fold, target))?;
            let tag = format!("hall/{}-{loss}", target.label());
            let mut net = match self.cfg.hallucination_init {
                HallucinationInit::Inertial => HallucinationModel::from_backbone(target, &stage1.streams[0])?,
                HallucinationInit::Target => {
                    let src = target
                        .source()
                        .and_then(|m| stage1.stream_index(m))
                        .map(|i| &stage1.streams[i])
                        .filter(|s| s.spec == spec)
                        .unwrap_or(&stage1.streams[0]);
                    HallucinationModel::from_backbone(target, src)?
                }
                HallucinationInit::Random => HallucinationModel::new(target, spec.clone(), &mut self.init_rng(fold, &tag))?,
            };
            let h = self.hyper(&self.cfg.hallucination_training, fold, &tag);
            train_hallucination(
                &mut net,
                TrainData::new(&data.views, &fold.split.train),
                &cache,
                &expected,
                loss,
                &h,
                &self.opts(fold, &format!("hallucination-{}-{loss}", target.label())),
            )?;
            let dir = self.net_dir(fold, target, loss);
            if dir.exists() {
                std::fs::remove_dir_all(&dir)?;
            }
            write_param_dir(&dir, &net.params)?;
            let meta = NetMeta { target, loss, spec: net.spec.clone(), cache_fingerprint: hex::encode(expected) };
            crate::io_util::write_atomic(&dir.join("net.json"), serde_json::to_string_pretty(&meta)?.as_bytes())?;
        }
        let mut out = Vec::new();
        for v in self.cfg.variants() {
            let mut bundle = self.load_fusion(fold, v.fusion)?;
            let nets = self
                .cfg
                .targets_of(&v)?
                .into_iter()
                .map(|t| self.load_net(fold, t, v.loss))
                .collect::<Result<Vec<_>>>()?;
            bundle.hallucination = Some(Hallucination { mode: v.hall_mode, loss: v.loss, nets });
            bundle.validate()?;
            save_bundle(&bundle, &fold.dir.join("bundles").join(v.label()))?;
            out.push(bundle);
        }
        if self.load_streams(fold)?.stage1_fingerprint() != stage1_fp {
            return Err(HalluxError::InvalidArgument("stage-1 parameters changed during hallucination training".into()));
        }
        Ok(out)
    }

    fn load_variant(&self, fold: &Fold, v: &Variant) -> Result<ModelBundle> {
        let p = fold.dir.join("bundles").join(v.label());
        if !p.join(crate::bundle::BUNDLE_FILE).exists() {
            return Err(HalluxError::InvalidArgument(format!(
                "no bundle at {}; run train-hallucination first",
                p.display()
            )));
        }
        load_bundle(&p)
    }

    /// Runs every training stage of one fold, in order.
    pub fn train_fold(&self, fold: &Fold) -> Result<()> {
        self.train_streams(fold)?;
        self.train_fusion(fold)?;
        self.cache_features(fold)?;
        self.train_hallucination(fold)?;
        Ok(())
    }

    fn result(&self, fold: &Fold, name: &str, data: &EncodedDataset, rows: &[usize], preds: Vec<usize>) -> Result<ConfigResult> {
        let labels = data.labels_of(rows).into_iter().map(|c| c + fold.offset).collect();
        let preds = preds.into_iter().map(|c| c + fold.offset).collect();
        let ids = rows.iter().map(|&r| data.ids[r].clone()).collect();
        ConfigResult::new(name, ids, preds, labels, self.manifest.num_classes)
    }

    fn evaluate_fold(&self, fold: &Fold) -> Result<FoldReport> {
        let data = self.fold_data(fold)?.test;
        let rows = data.rows(&fold.split.test)?;
        let stage1 = self.load_streams(fold)?;
        let mut results = Vec::new();
        for (i, s) in stage1.streams.iter().enumerate() {
            let preds = predict(&stage1, InferencePath::Stream(i), &data, &rows)?;
            results.push(self.result(fold, s.modality.as_str(), &data, &rows, preds)?);
        }
        if stage1.streams.len() > 1 {
            for s in self.cfg.fusions() {
                let b = self.load_fusion(fold, s)?;
                let preds = predict(&b, InferencePath::Fusion, &data, &rows)?;
                results.push(self.result(fold, &format!("fusion-{s}"), &data, &rows, preds)?);
            }
        }
        for v in self.cfg.variants() {
            let b = self.load_variant(fold, &v)?;
            let preds = predict(&b, InferencePath::Hallucinated, &data, &rows)?;
            results.push(self.result(fold, &v.configuration(), &data, &rows, preds)?);
        }
        Ok(FoldReport { fold: fold.name.clone(), results })
    }

    /// Second class-subset phase: new classes with inertial data only. The
    /// baseline is a fresh inertial stream; each hallucinated arm classifies
    /// that stream's features together with the frozen first-phase
    /// hallucination features through a fresh head. Both arms share seeds.
    fn class_subset_phase2(&self, phase1: &Fold) -> Result<FoldReport> {
        let fold = self.phase2_fold()?;
        let data = self.fold_data(&fold)?;
        let train_rows = data.test.rows(&fold.split.train)?;
        let test_rows = data.test.rows(&fold.split.test)?;
        let spec = self.cfg.backbone_spec(Modality::Inertial);
        let mut base = StreamModel::new(Modality::Inertial, spec, fold.num_classes, &mut self.init_rng(&fold, "inertial"))?;
        let h = self.hyper(&self.cfg.stream_training, &fold, "stream/inertial");
        train_stream(&mut base, TrainData::new(&data.views, &fold.split.train), &h, &self.opts(&fold, "stream-inertial"))?;
        let d = base.feature_dim();
        let single = ModelBundle::new(
            vec![base.clone()],
            FusionModel::new(FusionStrategy::Late, 1, d, fold.num_classes, &mut self.init_rng(&fold, "late"))?,
        )?;
        save_bundle(&single, &fold.dir.join("streams"))?;

        let mut results = Vec::new();
        let preds = predict(&single, InferencePath::Stream(0), &data.test, &test_rows)?;
        results.push(self.result(&fold, "inertial", &data.test, &test_rows, preds)?);

        let features = |view: &EncodedDataset, rows: &[usize], nets: &[HallucinationModel]| -> Result<Vec<Tensor>> {
            let mut f = vec![stream_features(&base, view, rows)?];
            for net in nets {
                f.push(net_features(net, view, rows)?);
            }
            Ok(f)
        };
        for v in self.cfg.variants() {
            let nets = self.load_variant(phase1, &v)?.hallucination.expect("variant bundles carry networks").nets;
            let before: Vec<[u8; 32]> = nets.iter().map(|n| fingerprint(&n.params)).collect();
            let mut view_feats = Vec::new();
            for view in &data.views {
                view_feats.push(features(view, &view.rows(&fold.split.train)?, &nets)?);
            }
            let labels = data.test.labels_of(&train_rows);
            let mut head = FusionModel::new(
                FusionStrategy::MidConcat,
                1 + nets.len(),
                d,
                fold.num_classes,
                &mut self.init_rng(&fold, &format!("arm/{}", v.label())),
            )?;
            let h = self.hyper(&self.cfg.fusion_training, &fold, &format!("arm/{}", v.label()));
            train_fusion_on_features(&mut head, &view_feats, &labels, &h, &self.opts(&fold, &format!("arm-{}", v.label())))?;
            if nets.iter().map(|n| fingerprint(&n.params)).collect::<Vec<_>>() != before {
                return Err(HalluxError::InvalidArgument("frozen hallucination networks changed".into()));
            }
            let test_feats = features(&data.test, &test_rows, &nets)?;
            let g = head.feature_graph()?;
            let inputs = test_feats.into_iter().enumerate().map(|(i, t)| (format!("m{i}"), t)).collect();
            let preds = argmax_rows(&predict_probs(&g, &inputs, 64)?);
            results.push(self.result(&fold, &v.configuration(), &data.test, &test_rows, preds)?);
        }
        Ok(FoldReport { fold: fold.name, results })
    }

    /// Evaluates every fold of a protocol (whose training stages have run)
    /// and writes `{out}/{protocol}/report.json`.
    pub fn evaluate(&self, protocol: Protocol) -> Result<EvalReport> {
        stage(STAGE_EVALUATE, self.evaluate_inner(protocol))
    }

    fn evaluate_inner(&self, protocol: Protocol) -> Result<EvalReport> {
        let folds = self.training_folds(protocol)?;
        let mut reports = folds.iter().map(|f| self.evaluate_fold(f)).collect::<Result<Vec<_>>>()?;
        if protocol == Protocol::ClassSubset {
            reports.push(self.class_subset_phase2(&folds[0])?);
        }
        let report = EvalReport {
            protocol: protocol.to_string(),
            num_classes: self.manifest.num_classes,
            folds: reports,
            timing: Vec::new(),
        };
        let path = self.protocol_dir(protocol).join("report.json");
        crate::io_util::write_atomic(&path, serde_json::to_string(&report)?.as_bytes())?;
        Ok(report)
    }

    /// Per-clip inference times on the first fold of the first protocol,
    /// written to `{out}/timing.json`.
    pub fn benchmark(&self, reps: usize) -> Result<Vec<TimingRow>> {
        stage(STAGE_BENCHMARK, self.benchmark_inner(reps))
    }

    fn benchmark_inner(&self, reps: usize) -> Result<Vec<TimingRow>> {
        let fold = self.training_folds(self.cfg.protocols[0])?.remove(0);
        let data = self.fold_data(&fold)?.test;
        let fusions: Vec<(FusionStrategy, ModelBundle)> =
            self.cfg.fusions().into_iter().map(|s| Ok((s, self.load_fusion(&fold, s)?))).collect::<Result<_>>()?;
        let variants: Vec<(Variant, ModelBundle)> =
            self.cfg.variants().into_iter().map(|v| Ok((v, self.load_variant(&fold, &v)?))).collect::<Result<_>>()?;
        let first = &fusions[0].1;
        let mut modes: Vec<(String, &ModelBundle, InferencePath)> = first
            .streams
            .iter()
            .enumerate()
            .map(|(i, s)| (s.modality.to_string(), first, InferencePath::Stream(i)))
            .collect();
        if first.streams.len() > 1 {
            for (s, b) in &fusions {
                modes.push((format!("fusion-{s}"), b, InferencePath::Fusion));
            }
        }
        for (v, b) in &variants {
            modes.push((v.configuration(), b, InferencePath::Hallucinated));
        }
        let rows = timing_benchmark_modes(&modes, &data, &fold.split.test, reps)?;
        crate::io_util::write_atomic(&self.cfg.out.join("timing.json"), serde_json::to_string_pretty(&rows)?.as_bytes())?;
        Ok(rows)
    }

    /// Writes CSV tables and `summary.md` under `{out}/report` from the
    /// protocols' `report.json` files (and `timing.json` when present).
    pub fn report(&self) -> Result<Vec<PathBuf>> {
        stage(STAGE_REPORT, self.report_inner())
    }

    fn report_inner(&self) -> Result<Vec<PathBuf>> {
        let mut reports = Vec::new();
        for p in &self.cfg.protocols {
            let path = self.protocol_dir(*p).join("report.json");
            if !path.exists() {
                return Err(HalluxError::InvalidArgument(format!("no report at {}; run evaluate first", path.display())));
            }
            reports.push(serde_json::from_str::<EvalReport>(&std::fs::read_to_string(path)?)?);
        }
        let timing = self.cfg.out.join("timing.json");
        if timing.exists() {
            if let Some(first) = reports.first_mut() {
                first.timing = serde_json::from_str(&std::fs::read_to_string(timing)?)?;
            }
        }
        emit_reports(&reports, &self.cfg.out.join("report"))
    }
}

fn predict(bundle: &ModelBundle, path: InferencePath, data: &EncodedDataset, rows: &[usize]) -> Result<Vec<usize>> {
    let graph = bundle.inference_graph(path)?;
    let mut inputs = BTreeMap::new();
    for (i, s) in bundle.streams.iter().enumerate() {
        let wanted = match path {
            InferencePath::Stream(j) => i == j,
            InferencePath::Fusion => true,
            InferencePath::Hallucinated => i == 0,
        };
        if wanted {
            inputs.insert(format!("x{i}"), data.batch(s.modality, rows)?);
        }
    }
    Ok(argmax_rows(&predict_probs(&graph, &inputs, 64)?))
}

/// Hallucinated features `[rows, D]` from the inertial encodings.
pub fn net_features(net: &HallucinationModel, data: &EncodedDataset, rows: &[usize]) -> Result<Tensor> {
    let d = net.feature_dim();
    let mut out = Vec::with_capacity(rows.len() * d);
    for chunk in rows.chunks(32) {
        out.extend_from_slice(hallucinate(net, &data.batch(Modality::Inertial, chunk)?)?.data());
    }
    Tensor::new(vec![rows.len(), d], out)
}

/// Runs all training stages and evaluation for one protocol.
pub fn run_protocol(exp: &Experiment, protocol: Protocol) -> Result<EvalReport> {
    for fold in exp.training_folds(protocol)? {
        log::info!("{protocol}: fold {}", fold.name);
        exp.train_fold(&fold)?;
    }
    exp.evaluate(protocol)
}

/// The whole pipeline: every configured protocol, optional timing, reports.
pub fn run_experiment(cfg: ExperimentConfig) -> Result<Vec<EvalReport>> {
    let exp = Experiment::open(cfg)?;
    std::fs::create_dir_all(&exp.cfg.out)?;
    crate::io_util::write_atomic(&exp.cfg.out.join("config.json"), emit_config(&exp.cfg).as_bytes())?;
    let mut reports = Vec::new();
    for &p in &exp.cfg.protocols {
        reports.push(run_protocol(&exp, p)?);
    }
    if let Some(t) = exp.cfg.timing {
        let rows = exp.benchmark(t.reps)?;
        if let Some(first) = reports.first_mut() {
            first.timing = rows;
        }
    }
    exp.report()?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(out: PathBuf) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::synthetic(out, 5);
        cfg.dataset = DatasetSource::Synth(SynthConfig {
            num_classes: 4,
            subjects: 4,
            trials: 1,
            frames: 16,
            extra_frames: 4,
            video_size: 6,
            ..Default::default()
        });
        cfg.preprocess = PreprocessConfig {
            image_size: 8,
            inertial_len: 40,
            skeleton_frames: 16,
            video: VideoGeometry { clip_len: 8, short_side: 10, crop: 8 },
            ..Default::default()
        };
        cfg.backbone_widths = vec![4, 8];
        for h in [&mut cfg.stream_training, &mut cfg.fusion_training, &mut cfg.hallucination_training] {
            h.epochs = 2;
            h.batch_size = 4;
        }
        cfg.augment_views = 2;
        cfg
    }

    #[test]
    fn required_keys_are_listed() {
        let e = parse_config_str("").unwrap_err().to_string();
        for k in REQUIRED_KEYS {
            assert!(e.contains(k), "{e}");
        }
        let e = parse_config_str(r#"{"seed": 1}"#).unwrap_err().to_string();
        assert!(e.contains("dataset") && !e.contains("seed"), "{e}");
    }

    #[test]
    fn table_one_rule() {
        let mut cfg = tiny(PathBuf::from("x"));
        cfg.hall_mode = HallucinationMode::Integrated;
        cfg.fusion = FusionStrategy::MidDense;
        assert!(parse_config_str(&emit_config(&cfg)).is_ok());
        for f in [FusionStrategy::Late, FusionStrategy::MidConcat] {
            cfg.fusion = f;
            let e = parse_config_str(&emit_config(&cfg)).unwrap_err().to_string();
            assert!(e.contains("N/A combination"), "{e}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let cfg = tiny(PathBuf::from("x"));
        let mut v: serde_json::Value = serde_json::from_str(&emit_config(&cfg)).unwrap();
        v["colour"] = serde_json::json!(1);
        assert!(parse_config_str(&v.to_string()).is_err());
    }

    #[test]
    fn config_round_trip() {
        let mut cfg = tiny(PathBuf::from("out/dir"));
        cfg.targets.insert(Modality::Video, TargetKind::SkeletonProxy);
        cfg.modalities.push(Modality::Video);
        cfg.extra_variants.push(Variant {
            fusion: FusionStrategy::MidDense,
            hall_mode: HallucinationMode::Integrated,
            loss: LossKind::Regression,
        });
        cfg.hallucination_training.margin = 0.35;
        cfg.timing = Some(TimingConfig { reps: 12 });
        assert_eq!(parse_config_str(&emit_config(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn modality_list_needs_inertial() {
        let mut cfg = tiny(PathBuf::from("x"));
        cfg.modalities = vec![Modality::Skeleton];
        assert!(cfg.validate().is_err());
        cfg.modalities = vec![Modality::Skeleton, Modality::Inertial];
        assert_eq!(cfg.stream_modalities().unwrap(), vec![Modality::Inertial, Modality::Skeleton]);
    }

    #[test]
    fn stages_enforce_order() {
        let dir = tempfile::tempdir().unwrap();
        let exp = Experiment::open(tiny(dir.path().to_path_buf())).unwrap();
        let fold = exp.training_folds(Protocol::Original).unwrap().remove(0);
        let e = exp.train_hallucination(&fold).unwrap_err().to_string();
        assert!(e.starts_with("train-hallucination"), "{e}");
        assert!(exp.train_fusion(&fold).is_err());
    }

    #[test]
    fn missing_files_fail_in_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_generate(&SynthConfig { num_classes: 2, subjects: 2, trials: 1, frames: 16, extra_frames: 4, video_size: 6, ..Default::default() }).unwrap();
        let on_disk = crate::datasets::write_manifest(&m, &dir.path().join("data")).unwrap();
        let victim = dir.path().join("data").join(match &on_disk.samples[0].payloads[&Modality::Skeleton] {
            crate::datasets::Payload::File(p) => p.clone(),
            _ => unreachable!(),
        });
        std::fs::remove_file(&victim).unwrap();
        let mut cfg = tiny(dir.path().join("out"));
        cfg.dataset = DatasetSource::Manifest(dir.path().join("data/manifest.json"));
        let e = Experiment::open(cfg).err().unwrap().to_string();
        assert!(e.starts_with("ingest") && e.contains(&victim.display().to_string()), "{e}");
    }

    #[test]
    fn end_to_end_reports_all_configurations() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path().to_path_buf());
        cfg.protocols = vec![Protocol::Original, Protocol::ClassSubset];
        cfg.extra_variants.push(Variant {
            fusion: FusionStrategy::MidDense,
            hall_mode: HallucinationMode::Integrated,
            loss: LossKind::Triplet,
        });
        let reports = run_experiment(cfg).unwrap();
        let orig = &reports[0];
        let configs = orig.configurations();
        for c in ["inertial", "skeleton", "fusion-mid-dense", "hallucinated-individual-triplet-mid-dense", "hallucinated-integrated-triplet-mid-dense"] {
            assert!(configs.iter().any(|x| x == c), "{configs:?}");
        }
        let cs = &reports[1];
        assert_eq!(cs.folds.len(), 2);
        let phase2 = &cs.folds[1];
        for r in &phase2.results {
            assert!(r.preds.iter().chain(&r.labels).all(|&c| c >= 2), "{r:?}");
        }
        assert!(dir.path().join("report/original_accuracy.csv").exists());
        assert!(dir.path().join("report/summary.md").exists());
    }
}
