//! Stream backbones with classification heads, fusion networks, and
//! hallucination networks, plus the graphs that run them.
//!
//! Parameter values live in the model structs; graphs are assembled on demand
//! with prefixed parameter names (`s0.backbone.conv0.w`, `fusion.head.w`, ...)
//! and loaded from those structs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HalluxError, Result};
use crate::graph::{Bindings, ExprGraph, GraphBuilder, NodeId, ParamMap};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Inertial,
    Skeleton,
    Video,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Inertial, Modality::Skeleton, Modality::Video];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Inertial => "inertial",
            Modality::Skeleton => "skeleton",
            Modality::Video => "video",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = HalluxError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inertial" => Ok(Modality::Inertial),
            "skeleton" => Ok(Modality::Skeleton),
            "video" | "rgb" | "colour" | "color" => Ok(Modality::Video),
            other => Err(HalluxError::InvalidArgument(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionStrategy {
    Late,
    MidConcat,
    MidDense,
}

impl FusionStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionStrategy::Late => "late",
            FusionStrategy::MidConcat => "mid-concat",
            FusionStrategy::MidDense => "mid-dense",
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionStrategy {
    type Err = HalluxError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "late" => Ok(FusionStrategy::Late),
            "mid-concat" => Ok(FusionStrategy::MidConcat),
            "mid-dense" => Ok(FusionStrategy::MidDense),
            other => Err(HalluxError::InvalidArgument(format!("unknown fusion strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HallucinationMode {
    Individual,
    Integrated,
}

impl HallucinationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            HallucinationMode::Individual => "individual",
            HallucinationMode::Integrated => "integrated",
        }
    }

    /// Integrated hallucination needs a fused feature of the stream width,
    /// which only mid-dense fusion produces.
    pub fn compatible_with(self, fusion: FusionStrategy) -> bool {
        match self {
            HallucinationMode::Individual => true,
            HallucinationMode::Integrated => fusion == FusionStrategy::MidDense,
        }
    }
}

impl fmt::Display for HallucinationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HallucinationMode {
    type Err = HalluxError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "individual" => Ok(HallucinationMode::Individual),
            "integrated" => Ok(HallucinationMode::Integrated),
            other => Err(HalluxError::InvalidArgument(format!("unknown hallucination mode `{other}`"))),
        }
    }
}

/// Convolutional feature extractor: blocks of (3x3 conv, relu, 2x2 max-pool)
/// followed by global average pooling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub kernel: usize,
}

impl BackboneSpec {
    pub fn desk_scale(height: usize, width: usize, in_channels: usize) -> Self {
        Self {
            height,
            width,
            in_channels,
            widths: vec![16, 32, 64, 128],
            kernel: 3,
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&self.in_channels)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.in_channels]
    }

    /// Enough spatial extent for every pooling stage.
    pub fn validate(&self) -> Result<()> {
        let mut h = self.height;
        let mut w = self.width;
        if self.widths.is_empty() || self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(HalluxError::InvalidArgument(format!(
                "backbone needs at least one block and an odd kernel: {self:?}"
            )));
        }
        for _ in &self.widths {
            if h < 2 || w < 2 {
                return Err(HalluxError::InvalidArgument(format!(
                    "input {}x{} too small for {} pooling blocks",
                    self.height,
                    self.width,
                    self.widths.len()
                )));
            }
            h /= 2;
            w /= 2;
        }
        Ok(())
    }
}

/// Appends a backbone to `b`; parameters are named `{prefix}conv{i}.{w,b}`.
pub fn build_backbone<R: Rng + ?Sized>(
    b: &mut GraphBuilder,
    prefix: &str,
    x: NodeId,
    spec: &BackboneSpec,
    rng: &mut R,
) -> NodeId {
    let mut h = x;
    let mut cin = spec.in_channels;
    for (i, &cout) in spec.widths.iter().enumerate() {
        h = b.conv_layer(&format!("{prefix}conv{i}"), h, spec.kernel, cin, cout, rng);
        h = b.relu(h);
        h = b.max_pool(h, 2, 2);
        cin = cout;
    }
    b.global_avg_pool(h)
}

fn fresh_backbone_params<R: Rng + ?Sized>(spec: &BackboneSpec, rng: &mut R) -> Result<ParamMap> {
    spec.validate()?;
    let mut b = GraphBuilder::new();
    let x = b.input("x");
    build_backbone(&mut b, "", x, spec, rng);
    Ok(b.finish()?.params().clone())
}

fn fresh_dense<R: Rng + ?Sized>(din: usize, dout: usize, rng: &mut R) -> ParamMap {
    let mut p = ParamMap::new();
    p.insert("w".into(), crate::graph::he_normal(&[din, dout], din, rng));
    p.insert("b".into(), Tensor::zeros(&[dout]));
    p
}

/// Insert `src` into `dst` under `prefix`.
fn with_prefix(dst: &mut ParamMap, prefix: &str, src: &ParamMap) {
    for (k, v) in src {
        dst.insert(format!("{prefix}{k}"), v.clone());
    }
}

/// SHA-256 over sorted parameter names, shapes, and little-endian payloads.
pub fn fingerprint(params: &ParamMap) -> [u8; 32] {
    let mut h = Sha256::new();
    for (name, t) in params {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.ndim() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        h.update(t.payload_bytes());
    }
    h.finalize().into()
}

pub fn fingerprint_hex(params: &ParamMap) -> String {
    hex::encode(fingerprint(params))
}

fn dense_parts(b: &mut GraphBuilder, prefix: &str, x: NodeId, p: &ParamMap) -> Result<NodeId> {
    let w = p
        .get("w")
        .ok_or_else(|| HalluxError::UnknownParameter(format!("{prefix}w")))?;
    let bias = p
        .get("b")
        .ok_or_else(|| HalluxError::UnknownParameter(format!("{prefix}b")))?;
    let wn = b.param(&format!("{prefix}w"), w.clone());
    let bn = b.param(&format!("{prefix}b"), bias.clone());
    Ok(b.dense(x, wn, bn))
}

pub(crate) fn backbone_parts(
    b: &mut GraphBuilder,
    prefix: &str,
    x: NodeId,
    spec: &BackboneSpec,
    params: &ParamMap,
) -> Result<NodeId> {
    let mut h = x;
    for i in 0..spec.widths.len() {
        let w = params
            .get(&format!("conv{i}.w"))
            .ok_or_else(|| HalluxError::UnknownParameter(format!("{prefix}conv{i}.w")))?;
        let bias = params
            .get(&format!("conv{i}.b"))
            .ok_or_else(|| HalluxError::UnknownParameter(format!("{prefix}conv{i}.b")))?;
        let wn = b.param(&format!("{prefix}conv{i}.w"), w.clone());
        let bn = b.param(&format!("{prefix}conv{i}.b"), bias.clone());
        h = b.conv2d(h, wn, bn, 1, spec.kernel / 2);
        h = b.relu(h);
        h = b.max_pool(h, 2, 2);
    }
    Ok(b.global_avg_pool(h))
}

/// Backbone plus dense softmax head for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamModel {
    pub modality: Modality,
    pub spec: BackboneSpec,
    pub num_classes: usize,
    pub backbone: ParamMap,
    pub head: ParamMap,
}

impl StreamModel {
    pub fn new<R: Rng + ?Sized>(
        modality: Modality,
        spec: BackboneSpec,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(HalluxError::InvalidArgument("need at least two classes".into()));
        }
        let backbone = fresh_backbone_params(&spec, rng)?;
        let head = fresh_dense(spec.feature_dim(), num_classes, rng);
        Ok(Self { modality, spec, num_classes, backbone, head })
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    /// All parameters, prefixed `backbone.` and `head.`.
    pub fn params(&self) -> ParamMap {
        let mut p = ParamMap::new();
        with_prefix(&mut p, "backbone.", &self.backbone);
        with_prefix(&mut p, "head.", &self.head);
        p
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        fingerprint(&self.params())
    }

    /// Graph with input `x`, outputs `features`, `logits`, `probs`, and a
    /// cross-entropy `loss` against input `y`.
    pub fn graph(&self) -> Result<ExprGraph> {
        let mut b = GraphBuilder::new();
        let x = b.input("x");
        let m = backbone_parts(&mut b, "backbone.", x, &self.spec, &self.backbone)?;
        let z = dense_parts(&mut b, "head.", m, &self.head)?;
        let c = b.softmax(z);
        let y = b.input("y");
        let loss = b.cross_entropy(z, y);
        b.output("features", m);
        b.output("logits", z);
        b.output("probs", c);
        b.output("loss", loss);
        b.finish()
    }

    /// Copies trained values back from a graph built by [`StreamModel::graph`].
    pub fn absorb(&mut self, graph: &ExprGraph) {
        self.backbone = graph.extract_params("backbone.");
        self.head = graph.extract_params("head.");
    }

    pub fn check_input(&self, input: &Tensor) -> Result<()> {
        let want = self.spec.input_shape();
        if input.ndim() != 4 || input.shape()[1..] != want {
            return Err(HalluxError::ShapeMismatch {
                node: format!("{} stream input", self.modality),
                op: "input",
                detail: format!("expected [N, {}, {}, {}], got {:?}", want[0], want[1], want[2], input.shape()),
            });
        }
        Ok(())
    }
}

/// Features `m` `[N, D]` and probabilities `c` `[N, K]` of one stream.
pub fn stream_forward(model: &StreamModel, input: &Tensor) -> Result<(Tensor, Tensor)> {
    model.check_input(input)?;
    let g = model.graph()?;
    let mut bind = Bindings::new();
    bind.insert("x".into(), input.clone());
    let out = g.evaluate(&bind, &[g.output_id("features")?, g.output_id("probs")?])?;
    let mut it = out.into_iter();
    Ok((it.next().unwrap(), it.next().unwrap()))
}

/// Fusion network. Late fusion has no parameters; mid-concat carries a
/// classifier over concatenated features; mid-dense first projects the
/// concatenation back to the stream width `D` (with relu), then classifies.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    pub strategy: FusionStrategy,
    pub num_streams: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub projection: Option<ParamMap>,
    pub head: Option<ParamMap>,
}

impl FusionModel {
    pub fn new<R: Rng + ?Sized>(
        strategy: FusionStrategy,
        num_streams: usize,
        feature_dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_streams == 0 {
            return Err(HalluxError::InvalidArgument("fusion needs at least one stream".into()));
        }
        let (projection, head) = match strategy {
            FusionStrategy::Late => (None, None),
            FusionStrategy::MidConcat => (
                None,
                Some(fresh_dense(num_streams * feature_dim, num_classes, rng)),
            ),
            FusionStrategy::MidDense => (
                Some(fresh_dense(num_streams * feature_dim, feature_dim, rng)),
                Some(fresh_dense(feature_dim, num_classes, rng)),
            ),
        };
        Ok(Self { strategy, num_streams, feature_dim, num_classes, projection, head })
    }

    pub fn params(&self) -> ParamMap {
        let mut p = ParamMap::new();
        if let Some(proj) = &self.projection {
            with_prefix(&mut p, "proj.", proj);
        }
        if let Some(head) = &self.head {
            with_prefix(&mut p, "head.", head);
        }
        p
    }

    pub fn is_trainable(&self) -> bool {
        self.strategy != FusionStrategy::Late
    }

    /// Appends the fusion computation over per-stream features (mid modes)
    /// or per-stream logits (late). Returns `(fused_feature, logits)`; the
    /// fused feature is `None` for late fusion.
    pub fn append(
        &self,
        b: &mut GraphBuilder,
        prefix: &str,
        features: &[NodeId],
        stream_logits: &[NodeId],
    ) -> Result<(Option<NodeId>, NodeId)> {
        match self.strategy {
            FusionStrategy::Late => {
                // Normalized product of softmaxes equals softmax of summed logits.
                let mut acc = *stream_logits
                    .first()
                    .ok_or_else(|| HalluxError::InvalidArgument("late fusion of nothing".into()))?;
                for &z in &stream_logits[1..] {
                    acc = b.add(acc, z);
                }
                Ok((None, acc))
            }
            FusionStrategy::MidConcat => {
                let cat = b.concat(features);
                let z = dense_parts(b, &format!("{prefix}head."), cat, self.head.as_ref().unwrap())?;
                Ok((Some(cat), z))
            }
            FusionStrategy::MidDense => {
                let cat = b.concat(features);
                let proj = dense_parts(b, &format!("{prefix}proj."), cat, self.projection.as_ref().unwrap())?;
                let m_f = b.relu(proj);
                let z = dense_parts(b, &format!("{prefix}head."), m_f, self.head.as_ref().unwrap())?;
                Ok((Some(m_f), z))
            }
        }
    }

    /// Graph over precomputed features `m0..m{N}` with outputs `fused`,
    /// `logits`, `probs` and cross-entropy `loss` against `y`. Mid modes only.
    pub fn feature_graph(&self) -> Result<ExprGraph> {
        if !self.is_trainable() {
            return Err(HalluxError::InvalidArgument("late fusion has no feature graph".into()));
        }
        let mut b = GraphBuilder::new();
        let feats: Vec<NodeId> = (0..self.num_streams).map(|i| b.input(&format!("m{i}"))).collect();
        let (fused, z) = self.append(&mut b, "", &feats, &[])?;
        let c = b.softmax(z);
        let y = b.input("y");
        let loss = b.cross_entropy(z, y);
        b.output("fused", fused.expect("mid fusion has a fused feature"));
        b.output("logits", z);
        b.output("probs", c);
        b.output("loss", loss);
        b.finish()
    }

    pub fn absorb(&mut self, graph: &ExprGraph) {
        if self.projection.is_some() {
            self.projection = Some(graph.extract_params("proj."));
        }
        if self.head.is_some() {
            self.head = Some(graph.extract_params("head."));
        }
    }

    /// Classifier from fused feature to logits (mid-dense only), the part
    /// reused by integrated hallucination.
    pub fn fused_head(&self) -> Option<&ParamMap> {
        match self.strategy {
            FusionStrategy::MidDense => self.head.as_ref(),
            _ => None,
        }
    }
}

fn check_probability_vectors(scores: &[Tensor]) -> Result<usize> {
    let first = scores
        .first()
        .ok_or_else(|| HalluxError::InvalidArgument("fuse_late needs at least one score vector".into()))?;
    let k = first.len();
    for s in scores {
        if s.len() != k {
            return Err(HalluxError::InvalidArgument(format!(
                "score vectors differ in length: {k} vs {}",
                s.len()
            )));
        }
        let sum: f64 = s.data().iter().map(|&v| v as f64).sum();
        if (sum - 1.0).abs() > 1e-6 * k.max(1) as f64 || s.data().iter().any(|&v| v < 0.0) {
            return Err(HalluxError::InvalidArgument(format!(
                "score vector is not a probability distribution (sum {sum})"
            )));
        }
    }
    Ok(k)
}

/// Elementwise product of class-probability vectors, renormalized to sum 1.
pub fn fuse_late(scores: &[Tensor]) -> Result<Tensor> {
    let k = check_probability_vectors(scores)?;
    let mut prod = vec![1.0f64; k];
    for s in scores {
        for (p, &v) in prod.iter_mut().zip(s.data()) {
            *p *= v as f64;
        }
    }
    let total: f64 = prod.iter().sum();
    let out = if total > 0.0 {
        prod.iter().map(|&p| (p / total) as f32).collect()
    } else {
        // Every class vetoed by some stream: fall back to uniform.
        vec![1.0 / k as f32; k]
    };
    Tensor::from_vec(out)
}

/// Argmax with lowest-index tie-breaking.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Row-wise argmax of `[N, K]`.
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    let k = *probs.shape().last().unwrap_or(&1);
    probs.data().chunks_exact(k).map(argmax).collect()
}

fn check_feature_dims(features: &[Tensor], dim: usize) -> Result<()> {
    for (i, f) in features.iter().enumerate() {
        if f.len() != dim {
            return Err(HalluxError::InvalidArgument(format!(
                "feature {i} has length {}, expected {dim}",
                f.len()
            )));
        }
    }
    Ok(())
}

fn fuse_mid(fusion: &FusionModel, features: &[Tensor]) -> Result<(Tensor, Tensor)> {
    if features.len() != fusion.num_streams {
        return Err(HalluxError::InvalidArgument(format!(
            "fusion expects {} streams, got {}",
            fusion.num_streams,
            features.len()
        )));
    }
    check_feature_dims(features, fusion.feature_dim)?;
    let g = fusion.feature_graph()?;
    let mut bind = Bindings::new();
    for (i, f) in features.iter().enumerate() {
        bind.insert(format!("m{i}"), f.clone().reshape(vec![1, fusion.feature_dim])?);
    }
    let out = g.evaluate(&bind, &[g.output_id("fused")?, g.output_id("probs")?])?;
    let mut it = out.into_iter();
    let m_f = it.next().unwrap();
    let c = it.next().unwrap();
    let mf_len = m_f.len();
    let k = c.len();
    Ok((m_f.reshape(vec![mf_len])?, c.reshape(vec![k])?))
}

/// Concatenate per-stream features and classify. `m_F` has length `(N+1)·D`.
pub fn fuse_mid_concat(features: &[Tensor], fusion: &FusionModel) -> Result<(Tensor, Tensor)> {
    if fusion.strategy != FusionStrategy::MidConcat {
        return Err(HalluxError::InvalidArgument(format!(
            "expected a mid-concat fusion model, got {}",
            fusion.strategy
        )));
    }
    fuse_mid(fusion, features)
}

/// Project the concatenation to width `D`, then classify. `m_F` has length `D`.
pub fn fuse_mid_dense(features: &[Tensor], fusion: &FusionModel) -> Result<(Tensor, Tensor)> {
    if fusion.strategy != FusionStrategy::MidDense {
        return Err(HalluxError::InvalidArgument(format!(
            "expected a mid-dense fusion model, got {}",
            fusion.strategy
        )));
    }
    let proj = fusion.projection.as_ref().expect("mid-dense has a projection");
    let width = proj["w"].shape()[1];
    if width != fusion.feature_dim {
        return Err(HalluxError::InvalidArgument(format!(
            "mid-dense projection width {width} differs from feature dim {}",
            fusion.feature_dim
        )));
    }
    fuse_mid(fusion, features)
}

/// What a hallucination network is trained to imitate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "modality")]
pub enum HallucinationTarget {
    /// Features of the privileged stream itself.
    Stream(Modality),
    /// Skeleton features stand in for the given stream's features.
    SkeletonProxy(Modality),
    /// The mid-dense fused feature.
    Fused,
}

impl HallucinationTarget {
    /// Which modality's slot the hallucinated feature fills (individual mode).
    pub fn slot(self) -> Option<Modality> {
        match self {
            HallucinationTarget::Stream(m) | HallucinationTarget::SkeletonProxy(m) => Some(m),
            HallucinationTarget::Fused => None,
        }
    }

    /// Which stream's frozen features serve as training targets.
    pub fn source(self) -> Option<Modality> {
        match self {
            HallucinationTarget::Stream(m) => Some(m),
            HallucinationTarget::SkeletonProxy(_) => Some(Modality::Skeleton),
            HallucinationTarget::Fused => None,
        }
    }

    pub fn label(self) -> String {
        match self {
            HallucinationTarget::Stream(m) => m.to_string(),
            HallucinationTarget::SkeletonProxy(m) => format!("{m}-via-skeleton"),
            HallucinationTarget::Fused => "fused".into(),
        }
    }
}

/// A network with the inference backbone's architecture, fed the inertial
/// encoding and trained to emit another stream's features.
#[derive(Clone, Debug, PartialEq)]
pub struct HallucinationModel {
    pub target: HallucinationTarget,
    pub spec: BackboneSpec,
    pub params: ParamMap,
}

impl HallucinationModel {
    pub fn new<R: Rng + ?Sized>(target: HallucinationTarget, spec: BackboneSpec, rng: &mut R) -> Result<Self> {
        let params = fresh_backbone_params(&spec, rng)?;
        Ok(Self { target, spec, params })
    }

    /// Starts from a copy of a trained backbone. The source stream is not
    /// modified; its inputs must have the inertial encoding's shape.
    pub fn from_backbone(target: HallucinationTarget, stream: &StreamModel) -> Result<Self> {
        Ok(Self { target, spec: stream.spec.clone(), params: stream.backbone.clone() })
    }

    /// Graph with input `x` and output `h`.
    pub fn graph(&self) -> Result<ExprGraph> {
        let mut b = GraphBuilder::new();
        let x = b.input("x");
        let h = backbone_parts(&mut b, "", x, &self.spec, &self.params)?;
        b.output("h", h);
        b.finish()
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }
}

/// Hallucinated feature `h` `[N, D]` from the inference-modality encoding.
pub fn hallucinate(net: &HallucinationModel, s0_encoded: &Tensor) -> Result<Tensor> {
    let want = net.spec.input_shape();
    if s0_encoded.ndim() != 4 || s0_encoded.shape()[1..] != want {
        return Err(HalluxError::ShapeMismatch {
            node: "hallucination input".into(),
            op: "input",
            detail: format!("expected [N, {}, {}, {}], got {:?}", want[0], want[1], want[2], s0_encoded.shape()),
        });
    }
    let g = net.graph()?;
    let mut bind = Bindings::new();
    bind.insert("x".into(), s0_encoded.clone());
    Ok(g.evaluate(&bind, &[g.output_id("h")?])?.remove(0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Triplet,
    Regression,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Triplet => "triplet",
            LossKind::Regression => "regression",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = HalluxError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triplet" => Ok(LossKind::Triplet),
            "regression" => Ok(LossKind::Regression),
            other => Err(HalluxError::InvalidArgument(format!("unknown loss kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hallucination {
    pub mode: HallucinationMode,
    pub loss: LossKind,
    pub nets: Vec<HallucinationModel>,
}

/// Everything needed for both inference paths: streams (index 0 is the
/// inference modality), one fusion model, and optionally trained
/// hallucination networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub streams: Vec<StreamModel>,
    pub fusion: FusionModel,
    pub hallucination: Option<Hallucination>,
}

/// Which forward path an inference graph runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InferencePath {
    /// A single stream with its own head; the index selects the stream.
    Stream(usize),
    /// All trained modalities through the fusion model.
    Fusion,
    /// Inertial data only, through the hallucination networks.
    Hallucinated,
}

impl ModelBundle {
    pub fn new(streams: Vec<StreamModel>, fusion: FusionModel) -> Result<Self> {
        let bundle = Self { streams, fusion, hallucination: None };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn num_classes(&self) -> usize {
        self.streams[0].num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.streams[0].feature_dim()
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.streams.iter().map(|s| s.modality).collect()
    }

    pub fn stream_index(&self, m: Modality) -> Option<usize> {
        self.streams.iter().position(|s| s.modality == m)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .streams
            .first()
            .ok_or_else(|| HalluxError::InvalidArgument("bundle has no streams".into()))?;
        if first.modality != Modality::Inertial {
            return Err(HalluxError::InvalidArgument("stream 0 must be the inertial modality".into()));
        }
        if self.streams[1..].iter().any(|s| s.modality == Modality::Inertial) {
            return Err(HalluxError::InvalidArgument("exactly one inference modality allowed".into()));
        }
        let d = first.feature_dim();
        for s in &self.streams {
            if s.feature_dim() != d || s.num_classes != first.num_classes {
                return Err(HalluxError::InvalidArgument(format!(
                    "stream {} has D={} K={}, expected D={d} K={}",
                    s.modality,
                    s.feature_dim(),
                    s.num_classes,
                    first.num_classes
                )));
            }
        }
        if self.fusion.num_streams != self.streams.len() || self.fusion.feature_dim != d {
            return Err(HalluxError::InvalidArgument("fusion model does not match streams".into()));
        }
        if let Some(h) = &self.hallucination {
            if !h.mode.compatible_with(self.fusion.strategy) {
                return Err(HalluxError::InvalidArgument(format!(
                    "{} hallucination is N/A with {} fusion",
                    h.mode, self.fusion.strategy
                )));
            }
            for net in &h.nets {
                if net.spec != first.spec {
                    return Err(HalluxError::InvalidArgument(
                        "hallucination network must share the inertial backbone architecture".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Fingerprint of all stage-1 parameters (streams and fusion).
    pub fn stage1_fingerprint(&self) -> [u8; 32] {
        let mut all = ParamMap::new();
        for (i, s) in self.streams.iter().enumerate() {
            with_prefix(&mut all, &format!("s{i}."), &s.params());
        }
        with_prefix(&mut all, "fusion.", &self.fusion.params());
        fingerprint(&all)
    }

    /// Builds the graph for `path`. Inputs are `x0` (inertial) and, for the
    /// fusion path, `x{i}` per stream. Outputs `logits` and `probs`.
    pub fn inference_graph(&self, path: InferencePath) -> Result<ExprGraph> {
        let mut b = GraphBuilder::new();
        let z = match path {
            InferencePath::Stream(i) => {
                let s = self
                    .streams
                    .get(i)
                    .ok_or_else(|| HalluxError::InvalidArgument(format!("no stream {i}")))?;
                let x = b.input(&format!("x{i}"));
                let m = backbone_parts(&mut b, &format!("s{i}.backbone."), x, &s.spec, &s.backbone)?;
                dense_parts(&mut b, &format!("s{i}.head."), m, &s.head)?
            }
            InferencePath::Fusion => {
                let mut feats = Vec::new();
                let mut logits = Vec::new();
                for (i, s) in self.streams.iter().enumerate() {
                    let x = b.input(&format!("x{i}"));
                    let m = backbone_parts(&mut b, &format!("s{i}.backbone."), x, &s.spec, &s.backbone)?;
                    if self.fusion.strategy == FusionStrategy::Late {
                        logits.push(dense_parts(&mut b, &format!("s{i}.head."), m, &s.head)?);
                    }
                    feats.push(m);
                }
                self.fusion.append(&mut b, "fusion.", &feats, &logits)?.1
            }
            InferencePath::Hallucinated => self.append_hallucinated(&mut b)?,
        };
        let c = b.softmax(z);
        b.output("logits", z);
        b.output("probs", c);
        b.finish()
    }

    fn append_hallucinated(&self, b: &mut GraphBuilder) -> Result<NodeId> {
        let hall = self
            .hallucination
            .as_ref()
            .ok_or_else(|| HalluxError::InvalidArgument("bundle has no hallucination networks".into()))?;
        let x = b.input("x0");
        match hall.mode {
            HallucinationMode::Integrated => {
                let net = hall
                    .nets
                    .iter()
                    .find(|n| n.target == HallucinationTarget::Fused)
                    .ok_or_else(|| HalluxError::InvalidArgument("integrated mode needs a fused-target network".into()))?;
                let head = self.fusion.fused_head().ok_or_else(|| {
                    HalluxError::InvalidArgument("integrated hallucination requires mid-dense fusion".into())
                })?;
                let h_f = backbone_parts(b, "hall.fused.", x, &net.spec, &net.params)?;
                dense_parts(b, "fusion.head.", h_f, head)
            }
            HallucinationMode::Individual => {
                let s0 = &self.streams[0];
                let m0 = backbone_parts(b, "s0.backbone.", x, &s0.spec, &s0.backbone)?;
                let mut feats = vec![m0];
                let mut logits = Vec::new();
                if self.fusion.strategy == FusionStrategy::Late {
                    logits.push(dense_parts(b, "s0.head.", m0, &s0.head)?);
                }
                for (i, s) in self.streams.iter().enumerate().skip(1) {
                    let net = hall
                        .nets
                        .iter()
                        .find(|n| n.target.slot() == Some(s.modality))
                        .ok_or_else(|| {
                            HalluxError::InvalidArgument(format!(
                                "no hallucination network for privileged stream {}",
                                s.modality
                            ))
                        })?;
                    let prefix = format!("hall.{}.", s.modality);
                    let h = backbone_parts(b, &prefix, x, &net.spec, &net.params)?;
                    if self.fusion.strategy == FusionStrategy::Late {
                        logits.push(dense_parts(b, &format!("s{i}.head."), h, &s.head)?);
                    }
                    feats.push(h);
                }
                Ok(self.fusion.append(b, "fusion.", &feats, &logits)?.1)
            }
        }
    }
}

/// Runs `graph` over `inputs` (one tensor per bound name, batch-first) in
/// chunks of `batch`, returning stacked `probs`.
pub fn predict_probs(graph: &ExprGraph, inputs: &BTreeMap<String, Tensor>, batch: usize) -> Result<Tensor> {
    let n = inputs
        .values()
        .next()
        .map(|t| t.shape()[0])
        .ok_or_else(|| HalluxError::InvalidArgument("no inputs".into()))?;
    let probs_id = graph.output_id("probs")?;
    let mut rows = Vec::new();
    let mut k = 0;
    let mut start = 0;
    while start < n {
        let end = (start + batch.max(1)).min(n);
        let mut bind = Bindings::new();
        for (name, t) in inputs {
            bind.insert(name.clone(), slice_rows(t, start, end));
        }
        let p = graph.evaluate(&bind, &[probs_id])?.remove(0);
        k = p.shape()[1];
        rows.extend_from_slice(p.data());
        start = end;
    }
    Tensor::new(vec![n, k], rows)
}

pub fn slice_rows(t: &Tensor, start: usize, end: usize) -> Tensor {
    let stride: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = end - start;
    Tensor::from_parts(shape, t.data()[start * stride..end * stride].to_vec())
}

/// Bundle-level multimodal prediction: all streams present, standard fusion.
pub fn multimodal_inference(bundle: &ModelBundle, inputs: &[Tensor]) -> Result<Tensor> {
    if inputs.len() != bundle.streams.len() {
        return Err(HalluxError::InvalidArgument(format!(
            "multimodal inference needs {} modalities, got {}; use hallucinated_inference when only inertial data is available",
            bundle.streams.len(),
            inputs.len()
        )));
    }
    for (s, x) in bundle.streams.iter().zip(inputs) {
        s.check_input(x)?;
    }
    let graph = if bundle.streams.len() == 1 {
        bundle.inference_graph(InferencePath::Stream(0))?
    } else {
        bundle.inference_graph(InferencePath::Fusion)?
    };
    let map = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("x{i}"), t.clone()))
        .collect();
    predict_probs(&graph, &map, usize::MAX)
}

/// Prediction from the inertial encoding alone.
pub fn hallucinated_inference(bundle: &ModelBundle, s0_encoded: &Tensor) -> Result<Tensor> {
    bundle.streams[0].check_input(s0_encoded)?;
    let graph = bundle.inference_graph(InferencePath::Hallucinated)?;
    let mut map = BTreeMap::new();
    map.insert("x0".to_string(), s0_encoded.clone());
    predict_probs(&graph, &map, usize::MAX)
}

impl crate::datasets::FeatureExtractor for StreamModel {
    fn fingerprint(&self) -> [u8; 32] {
        StreamModel::fingerprint(self)
    }

    fn feature_dim(&self) -> usize {
        StreamModel::feature_dim(self)
    }

    fn required_modalities(&self) -> Vec<Modality> {
        vec![self.modality]
    }

    fn extract(&self, inputs: &BTreeMap<Modality, Tensor>) -> Result<Tensor> {
        let x = inputs
            .get(&self.modality)
            .ok_or_else(|| HalluxError::InvalidArgument(format!("no {} input", self.modality)))?;
        Ok(stream_forward(self, x)?.0)
    }
}

/// The mid-dense fused feature `m_F` of a stage-1 bundle, as a cacheable
/// extractor fingerprinted by all stage-1 parameters.
pub struct FusedFeatures<'a> {
    bundle: &'a ModelBundle,
    graph: ExprGraph,
}

impl<'a> FusedFeatures<'a> {
    pub fn new(bundle: &'a ModelBundle) -> Result<Self> {
        if bundle.fusion.strategy != FusionStrategy::MidDense {
            return Err(HalluxError::InvalidArgument(format!(
                "fused features are defined for mid-dense fusion, not {}",
                bundle.fusion.strategy
            )));
        }
        let mut b = GraphBuilder::new();
        let mut feats = Vec::new();
        for (i, s) in bundle.streams.iter().enumerate() {
            let x = b.input(&format!("x{i}"));
            feats.push(backbone_parts(&mut b, &format!("s{i}.backbone."), x, &s.spec, &s.backbone)?);
        }
        let (fused, _) = bundle.fusion.append(&mut b, "fusion.", &feats, &[])?;
        b.output("fused", fused.expect("mid-dense has a fused feature"));
        Ok(Self { bundle, graph: b.finish()? })
    }
}

impl crate::datasets::FeatureExtractor for FusedFeatures<'_> {
    fn fingerprint(&self) -> [u8; 32] {
        self.bundle.stage1_fingerprint()
    }

    fn feature_dim(&self) -> usize {
        self.bundle.feature_dim()
    }

    fn required_modalities(&self) -> Vec<Modality> {
        self.bundle.modalities()
    }

    fn extract(&self, inputs: &BTreeMap<Modality, Tensor>) -> Result<Tensor> {
        let mut bind = Bindings::new();
        for (i, s) in self.bundle.streams.iter().enumerate() {
            let x = inputs
                .get(&s.modality)
                .ok_or_else(|| HalluxError::InvalidArgument(format!("no {} input", s.modality)))?;
            s.check_input(x)?;
            bind.insert(format!("x{i}"), x.clone());
        }
        Ok(self.graph.evaluate(&bind, &[self.graph.output_id("fused")?])?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec() -> BackboneSpec {
        BackboneSpec { height: 8, width: 8, in_channels: 1, widths: vec![4, 6], kernel: 3 }
    }

    fn input(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 64).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Tensor::new(vec![n, 8, 8, 1], data).unwrap()
    }

    fn probs(v: &[f32]) -> Tensor {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = StreamModel::new(Modality::Inertial, tiny_spec(), 5, &mut rng).unwrap();
        for t in s.head.values_mut() {
            t.data_mut().fill(0.0);
        }
        let (m, c) = stream_forward(&s, &input(2, 1)).unwrap();
        assert_eq!(m.shape(), &[2, 6]);
        for v in c.data() {
            assert!((v - 0.2).abs() < 1e-6);
        }
    }

    #[test]
    fn stream_forward_is_deterministic_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = StreamModel::new(Modality::Skeleton, tiny_spec(), 3, &mut rng).unwrap();
        let x = input(3, 2);
        let (m1, c1) = stream_forward(&s, &x).unwrap();
        let (m2, c2) = stream_forward(&s, &x).unwrap();
        assert!(m1.bit_eq(&m2) && c1.bit_eq(&c2));
        for row in c1.data().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        assert!(stream_forward(&s, &Tensor::zeros(&[1, 4, 4, 1])).is_err());
    }

    #[test]
    fn late_fusion_examples() {
        let onehot = probs(&[0.0, 1.0, 0.0]);
        let uniform = probs(&[1.0 / 3.0; 3]);
        assert_eq!(argmax(fuse_late(&[onehot, uniform.clone()]).unwrap().data()), 1);
        let u = fuse_late(&[uniform.clone(), uniform.clone()]).unwrap();
        assert!(u.max_abs_diff(&uniform) < 1e-6);
        let c = fuse_late(&[probs(&[0.6, 0.4]), probs(&[0.3, 0.7])]).unwrap();
        // 0.18 vs 0.28, renormalized
        assert!((c.data()[0] - 0.18 / 0.46).abs() < 1e-6);
        assert_eq!(argmax(c.data()), 1);
        assert!(fuse_late(&[]).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
    }

    fn dense_fusion(strategy: FusionStrategy, n: usize, d: usize) -> FusionModel {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        FusionModel::new(strategy, n, d, 4, &mut rng).unwrap()
    }

    fn feature(seed: u64, d: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec((0..d).map(|_| rng.random_range(0.0f32..1.0)).collect()).unwrap()
    }

    #[test]
    fn mid_concat_lengths_and_errors() {
        let f = dense_fusion(FusionStrategy::MidConcat, 3, 128);
        let feats: Vec<Tensor> = (0..3).map(|i| feature(i, 128)).collect();
        let (m_f, c) = fuse_mid_concat(&feats, &f).unwrap();
        assert_eq!(m_f.len(), 384);
        assert!((c.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
        let bad = vec![feature(0, 128), feature(1, 64), feature(2, 128)];
        assert!(fuse_mid_concat(&bad, &f).is_err());
    }

    #[test]
    fn mid_concat_single_stream_matches_a_head() {
        let d = 16;
        let f = dense_fusion(FusionStrategy::MidConcat, 1, d);
        let x = feature(3, d);
        let (_, c) = fuse_mid_concat(std::slice::from_ref(&x), &f).unwrap();
        let head = f.head.as_ref().unwrap();
        let mut logits = head["b"].data().to_vec();
        for (i, &xv) in x.data().iter().enumerate() {
            for (j, l) in logits.iter_mut().enumerate() {
                *l += xv * head["w"].data()[i * 4 + j];
            }
        }
        let expect = crate::kernels::softmax_rows(&logits, 4);
        for (a, b) in c.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mid_concat_permutation_invariance() {
        let d = 8;
        let f = dense_fusion(FusionStrategy::MidConcat, 2, d);
        let a = feature(1, d);
        let b = feature(2, d);
        let (_, c1) = fuse_mid_concat(&[a.clone(), b.clone()], &f).unwrap();
        // Swap the two row blocks of the head weight alongside the streams.
        let mut swapped = f.clone();
        let w = &f.head.as_ref().unwrap()["w"];
        let k = 4;
        let mut data = Vec::new();
        data.extend_from_slice(&w.data()[d * k..2 * d * k]);
        data.extend_from_slice(&w.data()[..d * k]);
        swapped.head.as_mut().unwrap().insert("w".into(), Tensor::new(vec![2 * d, k], data).unwrap());
        let (_, c2) = fuse_mid_concat(&[b, a], &swapped).unwrap();
        assert!(c1.max_abs_diff(&c2) < 1e-6);
    }

    #[test]
    fn mid_dense_examples() {
        let d = 128;
        let f = dense_fusion(FusionStrategy::MidDense, 3, d);
        let feats: Vec<Tensor> = (0..3).map(|i| feature(i, d)).collect();
        let (m_f, _) = fuse_mid_dense(&feats, &f).unwrap();
        assert_eq!(m_f.len(), d);

        let mut zero = f.clone();
        let proj = zero.projection.as_mut().unwrap();
        proj.get_mut("w").unwrap().data_mut().fill(0.0);
        let bias: Vec<f32> = (0..d).map(|i| i as f32 * 0.01).collect();
        proj.insert("b".into(), Tensor::from_vec(bias.clone()).unwrap());
        let (m1, _) = fuse_mid_dense(&feats, &zero).unwrap();
        let other: Vec<Tensor> = (10..13).map(|i| feature(i, d)).collect();
        let (m2, _) = fuse_mid_dense(&other, &zero).unwrap();
        assert_eq!(m1.data(), &bias[..]);
        assert!(m1.bit_eq(&m2));

        let mut select = f.clone();
        let proj = select.projection.as_mut().unwrap();
        let mut w = vec![0.0f32; 3 * d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        proj.insert("w".into(), Tensor::new(vec![3 * d, d], w).unwrap());
        proj.insert("b".into(), Tensor::zeros(&[d]));
        let (m_sel, _) = fuse_mid_dense(&feats, &select).unwrap();
        assert!(m_sel.max_abs_diff(&feats[0]) < 1e-7);
    }

    #[test]
    fn mid_dense_rejects_wrong_width() {
        let mut f = dense_fusion(FusionStrategy::MidDense, 2, 8);
        let proj = f.projection.as_mut().unwrap();
        proj.insert("w".into(), Tensor::zeros(&[16, 5]));
        proj.insert("b".into(), Tensor::zeros(&[5]));
        assert!(fuse_mid_dense(&[feature(0, 8), feature(1, 8)], &f).is_err());
    }

    fn bundle(strategy: FusionStrategy, mode: HallucinationMode) -> ModelBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s0 = StreamModel::new(Modality::Inertial, tiny_spec(), 4, &mut rng).unwrap();
        let s1 = StreamModel::new(Modality::Skeleton, BackboneSpec { in_channels: 1, ..tiny_spec() }, 4, &mut rng).unwrap();
        let fusion = FusionModel::new(strategy, 2, 6, 4, &mut rng).unwrap();
        let mut b = ModelBundle::new(vec![s0, s1], fusion).unwrap();
        let target = match mode {
            HallucinationMode::Individual => HallucinationTarget::Stream(Modality::Skeleton),
            HallucinationMode::Integrated => HallucinationTarget::Fused,
        };
        let net = HallucinationModel::new(target, tiny_spec(), &mut rng).unwrap();
        b.hallucination = Some(Hallucination { mode, loss: LossKind::Triplet, nets: vec![net] });
        b.validate().unwrap();
        b
    }

    #[test]
    fn integrated_path_has_baseline_op_count() {
        let b = bundle(FusionStrategy::MidDense, HallucinationMode::Integrated);
        let base = b.inference_graph(InferencePath::Stream(0)).unwrap();
        let hall = b.inference_graph(InferencePath::Hallucinated).unwrap();
        let p1 = base.op_profile(&[base.output_id("probs").unwrap()]);
        let p2 = hall.op_profile(&[hall.output_id("probs").unwrap()]);
        assert_eq!(p1, p2);
        // Same parameter shapes: backbone plus one D x K classifier.
        let shapes = |g: &ExprGraph| {
            let mut v: Vec<Vec<usize>> = g.params().values().map(|t| t.shape().to_vec()).collect();
            v.sort();
            v
        };
        assert_eq!(shapes(&base), shapes(&hall));
        assert_eq!(base.param_count(), hall.param_count());
    }

    #[test]
    fn individual_path_runs_one_backbone_per_stream() {
        for strategy in [FusionStrategy::Late, FusionStrategy::MidConcat, FusionStrategy::MidDense] {
            let b = bundle(strategy, HallucinationMode::Individual);
            let g = b.inference_graph(InferencePath::Hallucinated).unwrap();
            let prof = g.op_profile(&[g.output_id("probs").unwrap()]);
            assert_eq!(prof["global_avg_pool"], 2);
            assert_eq!(prof["conv2d"], 2 * tiny_spec().widths.len());
            assert_eq!(g.inputs(), &["x0".to_string()]);
        }
    }

    #[test]
    fn hallucinated_inference_is_pure() {
        let b = bundle(FusionStrategy::MidConcat, HallucinationMode::Individual);
        let x = input(3, 5);
        let a = hallucinated_inference(&b, &x).unwrap();
        let c = hallucinated_inference(&b, &x).unwrap();
        assert!(a.bit_eq(&c));
        for row in a.data().chunks(4) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn missing_hallucination_net_is_an_error() {
        let mut b = bundle(FusionStrategy::Late, HallucinationMode::Individual);
        b.hallucination.as_mut().unwrap().nets.clear();
        assert!(hallucinated_inference(&b, &input(1, 0)).is_err());
    }

    #[test]
    fn late_fusion_graph_matches_product_rule() {
        let b = bundle(FusionStrategy::Late, HallucinationMode::Individual);
        let x0 = input(1, 1);
        let x1 = input(1, 2);
        let fused = multimodal_inference(&b, &[x0.clone(), x1.clone()]).unwrap();
        let (_, c0) = stream_forward(&b.streams[0], &x0).unwrap();
        let (_, c1) = stream_forward(&b.streams[1], &x1).unwrap();
        let expect = fuse_late(&[c0.reshape(vec![4]).unwrap(), c1.reshape(vec![4]).unwrap()]).unwrap();
        assert!(fused.max_abs_diff(&expect.reshape(vec![1, 4]).unwrap()) < 1e-5);
        assert!(multimodal_inference(&b, &[x0]).is_err());
    }

    #[test]
    fn single_stream_bundle_multimodal_equals_stream_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s0 = StreamModel::new(Modality::Inertial, tiny_spec(), 3, &mut rng).unwrap();
        let fusion = FusionModel::new(FusionStrategy::Late, 1, 6, 3, &mut rng).unwrap();
        let b = ModelBundle::new(vec![s0.clone()], fusion).unwrap();
        let x = input(2, 3);
        let c = multimodal_inference(&b, &[x.clone()]).unwrap();
        let (_, c_ref) = stream_forward(&s0, &x).unwrap();
        assert!(c.bit_eq(&c_ref));
    }

    #[test]
    fn integrated_requires_mid_dense() {
        let mut b = bundle(FusionStrategy::MidDense, HallucinationMode::Integrated);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.fusion = FusionModel::new(FusionStrategy::Late, 2, 6, 4, &mut rng).unwrap();
        assert!(b.validate().is_err());
    }
}
