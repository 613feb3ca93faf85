//! Minibatch training of stream models, fusion networks (on frozen stream
//! features) and hallucination networks (against cached target features).
//!
//! Frozen models are only ever borrowed immutably; each trainer's graph holds
//! exactly the parameters it is allowed to update.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{EncodedDataset, FeatureCache};
use crate::error::{HalluxError, Result};
use crate::graph::{Bindings, ExprGraph, GradientMap, GraphBuilder, NodeId};
use crate::models::{
    argmax_rows, backbone_parts, stream_forward, FusionModel, FusionStrategy, HallucinationModel, LossKind, Modality,
    StreamModel,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// How the negative of each triplet is drawn from the other batch members.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativePolicy {
    #[default]
    Uniform,
    DifferentClass,
    HardestInBatch,
    /// Nearest target to the anchor among all cached training samples.
    HardestInCache,
}

/// Multiply the learning rate by `factor` every `every` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub every: usize,
    pub factor: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub optimizer: OptimizerKind,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Triplet margin.
    pub margin: f32,
    pub negatives: NegativePolicy,
    pub seed: u64,
    /// L2-normalize hallucinated and target features before the loss.
    pub l2_normalize: bool,
    pub lr_decay: Option<StepDecay>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 20,
            margin: 0.2,
            negatives: NegativePolicy::Uniform,
            seed: 0,
            l2_normalize: false,
            lr_decay: None,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(HalluxError::Config(format!("margin must be a non-negative number, got {}", self.margin)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(HalluxError::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(HalluxError::Config("batch size must be at least 1".into()));
        }
        if let Some(d) = self.lr_decay {
            if d.every == 0 || !(d.factor > 0.0) {
                return Err(HalluxError::Config(format!("invalid step decay {d:?}")));
            }
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f32 {
        match self.lr_decay {
            Some(d) => self.learning_rate * d.factor.powi((epoch / d.every) as i32),
            None => self.learning_rate,
        }
    }
}

/// First-order optimizer state over the parameters of one graph.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: std::collections::BTreeMap<String, Vec<f32>>,
    v: std::collections::BTreeMap<String, Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f32) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Default::default(),
            v: Default::default(),
        }
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    /// Updates every parameter of `graph` that has a gradient.
    pub fn step(&mut self, graph: &mut ExprGraph, grads: &GradientMap) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, p) in graph.params_mut() {
            let Some(g) = grads.get(name) else { continue };
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= self.lr * d;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    for (((w, &d), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * d;
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * d * d;
                        let mh = *mi / c1;
                        let vh = *vi / c2;
                        *w -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn train_losses(&self) -> Vec<f64> {
        self.records.iter().filter(|r| r.split == "train").map(|r| r.loss).collect()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Where a trainer reports progress.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Stage name written to log lines and checkpoint directories.
    pub label: String,
    /// JSON-lines log, appended to.
    pub log: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Save a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl TrainOptions {
    pub fn labeled(label: &str) -> Self {
        Self { label: label.to_string(), ..Default::default() }
    }
}

/// Training inputs: encoded views of the same samples (epoch `e` uses view
/// `e % views.len()`, so several augmented encodings can be cycled) and the
/// ids to train on.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub views: &'a [EncodedDataset],
    pub ids: &'a [String],
}

impl<'a> TrainData<'a> {
    pub fn new(views: &'a [EncodedDataset], ids: &'a [String]) -> Self {
        Self { views, ids }
    }

    fn rows(&self) -> Result<Vec<Vec<usize>>> {
        if self.ids.is_empty() {
            return Err(HalluxError::InvalidArgument("no train samples".into()));
        }
        if self.views.is_empty() {
            return Err(HalluxError::InvalidArgument("no encoded views to train on".into()));
        }
        self.views.iter().map(|v| v.rows(self.ids)).collect()
    }
}

pub fn one_hot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * k];
    for (i, &c) in labels.iter().enumerate() {
        if c >= k {
            return Err(HalluxError::InvalidArgument(format!("label {c} out of range for {k} classes")));
        }
        data[i * k + c] = 1.0;
    }
    Tensor::new(vec![labels.len(), k], data)
}

/// Rows `idx` of a `[N, D]` matrix.
pub fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let d: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
    }
    Tensor::new(shape, data).expect("consistent shape")
}

/// Shuffled minibatches over `0..n`; a trailing batch of one joins the
/// previous batch so that every batch can form triplets.
fn minibatches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

struct StepOutcome {
    loss: f32,
    grads: GradientMap,
    correct: Option<usize>,
}

/// Shared epoch loop: shuffling, optimizer steps, logging, checkpoints.
fn run_epochs<F>(graph: &mut ExprGraph, n: usize, hyper: &Hyperparams, opts: &TrainOptions, mut step: F) -> Result<History>
where
    F: FnMut(usize, &ExprGraph, &[usize], &mut ChaCha8Rng) -> Result<StepOutcome>,
{
    hyper.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut opt = Optimizer::new(hyper.optimizer, hyper.learning_rate);
    let mut log = match &opts.log {
        Some(p) => {
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent)?;
            }
            Some(std::fs::OpenOptions::new().create(true).append(true).open(p)?)
        }
        None => None,
    };
    let start = Instant::now();
    let mut history = History::default();
    for epoch in 0..hyper.epochs {
        opt.set_lr(hyper.lr_at(epoch));
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut has_acc = false;
        for batch in minibatches(n, hyper.batch_size, &mut rng) {
            let out = step(epoch, graph, &batch, &mut rng)?;
            if !out.loss.is_finite() {
                return Err(HalluxError::InvalidArgument(format!(
                    "{}: non-finite loss at epoch {}",
                    opts.label,
                    epoch + 1
                )));
            }
            loss_sum += out.loss as f64 * batch.len() as f64;
            if let Some(c) = out.correct {
                correct += c;
                has_acc = true;
            }
            opt.step(graph, &out.grads);
        }
        let record = EpochRecord {
            stage: opts.label.clone(),
            epoch: epoch + 1,
            split: "train".into(),
            loss: loss_sum / n as f64,
            accuracy: has_acc.then(|| correct as f64 / n as f64),
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::debug!("{} epoch {} loss {:.5}", opts.label, record.epoch, record.loss);
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
        }
        history.records.push(record);
        if let Some(dir) = &opts.checkpoint_dir {
            if opts.checkpoint_every > 0 && (epoch + 1) % opts.checkpoint_every == 0 {
                crate::bundle::save_checkpoint(dir, &opts.label, epoch + 1, graph.params())?;
            }
        }
    }
    Ok(history)
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Trains a stream end to end with categorical cross-entropy.
pub fn train_stream(
    model: &mut StreamModel,
    data: TrainData<'_>,
    hyper: &Hyperparams,
    opts: &TrainOptions,
) -> Result<History> {
    let rows = data.rows()?;
    for (v, r) in data.views.iter().zip(&rows) {
        let missing = v.missing(model.modality, r);
        if !missing.is_empty() {
            return Err(HalluxError::MissingModality { modality: model.modality.to_string(), ids: missing });
        }
    }
    let mut graph = model.graph()?;
    let loss = graph.output_id("loss")?;
    let logits = graph.output_id("logits")?;
    let k = model.num_classes;
    let modality = model.modality;
    let history = run_epochs(&mut graph, data.ids.len(), hyper, opts, |epoch, g, batch, _| {
        let vi = epoch % data.views.len();
        let view = &data.views[vi];
        let r: Vec<usize> = batch.iter().map(|&i| rows[vi][i]).collect();
        let labels = view.labels_of(&r);
        let mut bind = Bindings::new();
        bind.insert("x".into(), view.batch(modality, &r)?);
        bind.insert("y".into(), one_hot(&labels, k)?);
        let (l, grads, extra) = g.backward_with(loss, &[logits], &bind)?;
        Ok(StepOutcome { loss: l, grads, correct: Some(count_correct(&extra[0], &labels)) })
    })?;
    model.absorb(&graph);
    Ok(history)
}

/// Features `[rows, D]` of a stream over rows of an encoded dataset.
pub fn stream_features(model: &StreamModel, data: &EncodedDataset, rows: &[usize]) -> Result<Tensor> {
    let d = model.feature_dim();
    let mut out = Vec::with_capacity(rows.len() * d);
    for chunk in rows.chunks(32) {
        let x = data.batch(model.modality, chunk)?;
        out.extend_from_slice(stream_forward(model, &x)?.0.data());
    }
    Tensor::new(vec![rows.len(), d], out)
}

/// Trains the fusion parameters over features of the frozen `streams`.
/// Late fusion has nothing to train and returns an empty history.
pub fn train_fusion(
    fusion: &mut FusionModel,
    streams: &[StreamModel],
    data: TrainData<'_>,
    hyper: &Hyperparams,
    opts: &TrainOptions,
) -> Result<History> {
    if fusion.strategy == FusionStrategy::Late {
        log::warn!("late fusion has no trainable parameters; skipping fusion training");
        return Ok(History::default());
    }
    if streams.len() != fusion.num_streams || streams.iter().any(|s| s.feature_dim() != fusion.feature_dim) {
        return Err(HalluxError::InvalidArgument(format!(
            "fusion expects {} streams of width {}",
            fusion.num_streams, fusion.feature_dim
        )));
    }
    let rows = data.rows()?;
    let mut feats: Vec<Vec<Tensor>> = Vec::with_capacity(data.views.len());
    for (v, r) in data.views.iter().zip(&rows) {
        feats.push(streams.iter().map(|s| stream_features(s, v, r)).collect::<Result<_>>()?);
    }
    let labels = data.views[0].labels_of(&rows[0]);
    train_fusion_on_features(fusion, &feats, &labels, hyper, opts)
}

/// Trains the fusion parameters over precomputed features: `features[v][i]`
/// is the `[n, D]` matrix of stream `i` in view `v` (epoch `e` uses view
/// `e % len`), rows aligned with `labels`.
pub fn train_fusion_on_features(
    fusion: &mut FusionModel,
    features: &[Vec<Tensor>],
    labels: &[usize],
    hyper: &Hyperparams,
    opts: &TrainOptions,
) -> Result<History> {
    if fusion.strategy == FusionStrategy::Late {
        log::warn!("late fusion has no trainable parameters; skipping fusion training");
        return Ok(History::default());
    }
    if labels.is_empty() {
        return Err(HalluxError::InvalidArgument("no train samples".into()));
    }
    if features.is_empty() {
        return Err(HalluxError::InvalidArgument("no feature views to train on".into()));
    }
    for view in features {
        if view.len() != fusion.num_streams
            || view.iter().any(|f| f.shape() != [labels.len(), fusion.feature_dim])
        {
            return Err(HalluxError::InvalidArgument(format!(
                "fusion expects {} feature matrices of shape [{}, {}]",
                fusion.num_streams,
                labels.len(),
                fusion.feature_dim
            )));
        }
    }
    let mut graph = fusion.feature_graph()?;
    let loss = graph.output_id("loss")?;
    let logits = graph.output_id("logits")?;
    let k = fusion.num_classes;
    let history = run_epochs(&mut graph, labels.len(), hyper, opts, |epoch, g, batch, _| {
        let view = &features[epoch % features.len()];
        let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
        let mut bind = Bindings::new();
        for (i, f) in view.iter().enumerate() {
            bind.insert(format!("m{i}"), gather_rows(f, batch));
        }
        bind.insert("y".into(), one_hot(&batch_labels, k)?);
        let (l, grads, extra) = g.backward_with(loss, &[logits], &bind)?;
        Ok(StepOutcome { loss: l, grads, correct: Some(count_correct(&extra[0], &batch_labels)) })
    })?;
    fusion.absorb(&graph);
    Ok(history)
}

fn check_dims(a: &[f32], b: &[f32], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(HalluxError::InvalidArgument(format!(
            "{what}: dimension mismatch {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

/// Hinge on the margin between anchor-positive and anchor-negative squared
/// distances.
pub fn triplet_loss(anchor: &[f32], positive: &[f32], negative: &[f32], margin: f64) -> Result<f64> {
    check_dims(anchor, positive, "triplet loss")?;
    check_dims(anchor, negative, "triplet loss")?;
    Ok((sq_dist(anchor, positive) - sq_dist(anchor, negative) + margin).max(0.0))
}

/// Squared L2 distance between hallucinated and target features.
pub fn regression_loss(h: &[f32], m: &[f32]) -> Result<f64> {
    check_dims(h, m, "regression loss")?;
    Ok(sq_dist(h, m))
}

/// Batch-mean triplet loss node over `[B, D]` anchors, positives, negatives.
pub fn triplet_loss_node(b: &mut GraphBuilder, h: NodeId, p: NodeId, n: NodeId, margin: f64) -> NodeId {
    let dp = b.squared_distance(h, p);
    let dn = b.squared_distance(h, n);
    let diff = b.sub(dp, dn);
    let shifted = b.add_scalar(diff, margin);
    let hinge = b.relu(shifted);
    b.mean(hinge)
}

/// Batch-mean squared distance node.
pub fn regression_loss_node(b: &mut GraphBuilder, h: NodeId, m: NodeId) -> NodeId {
    let d = b.squared_distance(h, m);
    b.mean(d)
}

/// Index plan of a triplet batch: row `j` pairs anchor `h_j` with positive
/// `m_j` and negative `m_{negatives[j]}`.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub ids: Vec<String>,
    pub negatives: Vec<usize>,
    pub positive: Tensor,
    pub negative: Tensor,
}

/// Picks a negative index `k != j` for every row of the batch.
/// `anchors` (`[B, D]`) are required by the hardest-in-batch policy.
pub fn choose_negatives<R: Rng + ?Sized>(
    labels: &[usize],
    positive: &Tensor,
    anchors: Option<&Tensor>,
    policy: NegativePolicy,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let n = labels.len();
    if n < 2 {
        return Err(HalluxError::InvalidArgument(format!("triplets need a batch of at least 2, got {n}")));
    }
    match policy {
        NegativePolicy::Uniform => Ok((0..n)
            .map(|j| {
                let k = rng.random_range(0..n - 1);
                if k >= j {
                    k + 1
                } else {
                    k
                }
            })
            .collect()),
        NegativePolicy::DifferentClass => (0..n)
            .map(|j| {
                let pool: Vec<usize> = (0..n).filter(|&k| labels[k] != labels[j]).collect();
                if pool.is_empty() {
                    return Err(HalluxError::InvalidArgument(
                        "different-class negatives impossible: batch holds a single class".into(),
                    ));
                }
                Ok(pool[rng.random_range(0..pool.len())])
            })
            .collect(),
        NegativePolicy::HardestInBatch | NegativePolicy::HardestInCache => {
            let h = anchors.ok_or_else(|| {
                HalluxError::InvalidArgument("hardest-in-batch negatives need the anchor features".into())
            })?;
            if h.shape() != positive.shape() {
                return Err(HalluxError::InvalidArgument(format!(
                    "anchors {:?} vs positives {:?}",
                    h.shape(),
                    positive.shape()
                )));
            }
            let own: Vec<usize> = (0..n).collect();
            Ok(nearest_excluding(h, positive, &own))
        }
    }
}

/// Looks up positives for `ids` in the cache and plans negatives.
/// For each anchor row `j`, the row of `pool` nearest to it other than
/// `exclude[j]`; ties go to the lowest index.
pub fn nearest_excluding(anchors: &Tensor, pool: &Tensor, exclude: &[usize]) -> Vec<usize> {
    let d = pool.shape()[1];
    (0..anchors.shape()[0])
        .map(|j| {
            let hj = &anchors.data()[j * d..(j + 1) * d];
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for k in (0..pool.shape()[0]).filter(|&k| k != exclude[j]) {
                let dk = sq_dist(hj, &pool.data()[k * d..(k + 1) * d]);
                if dk < best_d {
                    best_d = dk;
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn make_triplets<R: Rng + ?Sized>(
    ids: &[String],
    labels: &[usize],
    cache: &FeatureCache,
    expected: &[u8; 32],
    anchors: Option<&Tensor>,
    policy: NegativePolicy,
    rng: &mut R,
) -> Result<TripletBatch> {
    if ids.len() != labels.len() {
        return Err(HalluxError::InvalidArgument("ids and labels differ in length".into()));
    }
    if ids.len() < 2 {
        return Err(HalluxError::InvalidArgument(format!("triplets need a batch of at least 2, got {}", ids.len())));
    }
    let positive = cache.matrix(ids, expected)?;
    let negatives = choose_negatives(labels, &positive, anchors, policy, rng)?;
    let negative = gather_rows(&positive, &negatives);
    Ok(TripletBatch { ids: ids.to_vec(), negatives, positive, negative })
}

/// Training graph of a hallucination network: input `x`, target `p`, and for
/// the triplet loss negatives `n`. Returns the graph, its `h` and `loss`.
fn hallucination_graph(
    net: &HallucinationModel,
    kind: LossKind,
    hyper: &Hyperparams,
) -> Result<(ExprGraph, NodeId, NodeId)> {
    let mut b = GraphBuilder::new();
    let x = b.input("x");
    let raw = backbone_parts(&mut b, "", x, &net.spec, &net.params)?;
    let norm = |b: &mut GraphBuilder, v: NodeId| if hyper.l2_normalize { b.l2_normalize(v) } else { v };
    let h = norm(&mut b, raw);
    let p_in = b.input("p");
    let p = norm(&mut b, p_in);
    let loss = match kind {
        LossKind::Triplet => {
            let n_in = b.input("n");
            let n = norm(&mut b, n_in);
            triplet_loss_node(&mut b, h, p, n, hyper.margin as f64)
        }
        LossKind::Regression => regression_loss_node(&mut b, h, p),
    };
    b.output("h", h);
    b.output("loss", loss);
    let g = b.finish()?;
    let (h, loss) = (g.output_id("h")?, g.output_id("loss")?);
    Ok((g, h, loss))
}

/// Trains `net` on the inertial encodings of `data` to reproduce the cached
/// target features. `expected` is the fingerprint of the frozen model the
/// cache must come from.
pub fn train_hallucination(
    net: &mut HallucinationModel,
    data: TrainData<'_>,
    cache: &FeatureCache,
    expected: &[u8; 32],
    kind: LossKind,
    hyper: &Hyperparams,
    opts: &TrainOptions,
) -> Result<History> {
    cache.verify(expected)?;
    if cache.dim() != net.feature_dim() {
        return Err(HalluxError::InvalidArgument(format!(
            "cache dim {} differs from hallucination output dim {}",
            cache.dim(),
            net.feature_dim()
        )));
    }
    if kind == LossKind::Triplet && (hyper.batch_size < 2 || data.ids.len() < 2) {
        return Err(HalluxError::InvalidArgument("triplet training needs batches of at least 2 samples".into()));
    }
    let rows = data.rows()?;
    let targets = cache.matrix(data.ids, expected)?;
    let labels: Vec<usize> = data.views[0].labels_of(&rows[0]);
    let (mut graph, h_id, loss) = hallucination_graph(net, kind, hyper)?;
    let history = run_epochs(&mut graph, data.ids.len(), hyper, opts, |epoch, g, batch, rng| {
        let vi = epoch % data.views.len();
        let r: Vec<usize> = batch.iter().map(|&i| rows[vi][i]).collect();
        let mut bind = Bindings::new();
        bind.insert("x".into(), data.views[vi].batch(Modality::Inertial, &r)?);
        let p = gather_rows(&targets, batch);
        if kind == LossKind::Triplet {
            let anchors = match hyper.negatives {
                NegativePolicy::HardestInBatch | NegativePolicy::HardestInCache => {
                    let mut b2 = bind.clone();
                    b2.insert("p".into(), p.clone());
                    b2.insert("n".into(), p.clone());
                    Some(g.evaluate(&b2, &[h_id])?.remove(0))
                }
                _ => None,
            };
            let n = if hyper.negatives == NegativePolicy::HardestInCache {
                let neg = nearest_excluding(anchors.as_ref().unwrap(), &targets, batch);
                gather_rows(&targets, &neg)
            } else {
                let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                let neg = choose_negatives(&batch_labels, &p, anchors.as_ref(), hyper.negatives, rng)?;
                gather_rows(&p, &neg)
            };
            bind.insert("n".into(), n);
        }
        bind.insert("p".into(), p);
        let (l, grads) = g.backward(loss, &bind)?;
        Ok(StepOutcome { loss: l, grads, correct: None })
    })?;
    net.params = graph.params().clone();
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{encode_dataset, synth_generate, FeatureExtractor, PreprocessConfig, SynthConfig};
    use crate::encoding::VideoGeometry;
    use crate::models::{fingerprint, BackboneSpec, HallucinationTarget};

    fn tiny_spec() -> BackboneSpec {
        BackboneSpec { height: 8, width: 8, in_channels: 1, widths: vec![4, 8], kernel: 3 }
    }

    fn tiny_data(classes: usize) -> EncodedDataset {
        let m = synth_generate(&SynthConfig {
            num_classes: classes,
            subjects: 2,
            trials: 2,
            frames: 16,
            extra_frames: 4,
            video_size: 6,
            with_video: false,
            ..Default::default()
        })
        .unwrap();
        let cfg = PreprocessConfig {
            image_size: 8,
            inertial_len: 40,
            skeleton_frames: 16,
            video: VideoGeometry { clip_len: 8, short_side: 8, crop: 8 },
            ..Default::default()
        };
        encode_dataset(&m, &[Modality::Inertial, Modality::Skeleton], &cfg, false, 0).unwrap()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn triplet_examples() {
        assert_eq!(triplet_loss(&[1.0, 2.0], &[1.0, 2.0], &[2.0, 2.0], 0.2).unwrap(), 0.0);
        assert!((triplet_loss(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], 0.2).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(triplet_loss(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 3.0], 0.2).unwrap(), 0.0);
        assert!(triplet_loss(&[0.0], &[1.0, 0.0], &[0.0, 3.0], 0.2).is_err());
    }

    #[test]
    fn regression_examples() {
        assert_eq!(regression_loss(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert_eq!(regression_loss(&[3.0, -4.0], &[0.0, 0.0]).unwrap(), 25.0);
        assert!(regression_loss(&[3.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn regression_gradient_is_twice_the_difference() {
        let mut b = GraphBuilder::new();
        let h = b.param("h", Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap());
        let m = b.input("m");
        let loss = regression_loss_node(&mut b, h, m);
        let g = b.finish().unwrap();
        let mut bind = Bindings::new();
        bind.insert("m".into(), Tensor::new(vec![1, 3], vec![0.0, 1.0, 1.5]).unwrap());
        let (l, grads) = g.backward(loss, &bind).unwrap();
        assert!((l - (0.25 + 4.0 + 0.25)).abs() < 1e-6);
        assert_eq!(grads["h"].data(), &[1.0, -4.0, 1.0]);
        assert!(crate::graph::finite_diff_check(&g, loss, &bind, 1e-3).unwrap() < 1e-3);
    }

    #[test]
    fn forced_negatives_for_two_samples() {
        let p = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let neg = choose_negatives(&[0, 0], &p, None, NegativePolicy::Uniform, &mut rng()).unwrap();
        assert_eq!(neg, vec![1, 0]);
        assert!(choose_negatives(&[0], &Tensor::new(vec![1, 1], vec![0.0]).unwrap(), None, NegativePolicy::Uniform, &mut rng()).is_err());
    }

    #[test]
    fn different_class_policy() {
        let p = Tensor::new(vec![3, 1], vec![0.0, 1.0, 2.0]).unwrap();
        assert!(choose_negatives(&[4, 4, 4], &p, None, NegativePolicy::DifferentClass, &mut rng()).is_err());
        let neg = choose_negatives(&[0, 1, 0], &p, None, NegativePolicy::DifferentClass, &mut rng()).unwrap();
        assert_eq!(neg, vec![1, 0, 1]);
    }

    #[test]
    fn hardest_policy_matches_brute_force() {
        let mut r = rng();
        for _ in 0..20 {
            let n = r.random_range(2..9);
            let d = 3;
            let p = Tensor::new(vec![n, d], (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
            let h = Tensor::new(vec![n, d], (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
            let labels = vec![0; n];
            let neg = choose_negatives(&labels, &p, Some(&h), NegativePolicy::HardestInBatch, &mut r).unwrap();
            for j in 0..n {
                assert_ne!(neg[j], j);
                let dist = |k: usize| -> f64 {
                    (0..d).map(|c| (h.data()[j * d + c] as f64 - p.data()[k * d + c] as f64).powi(2)).sum()
                };
                for k in (0..n).filter(|&k| k != j) {
                    assert!(dist(neg[j]) <= dist(k));
                }
            }
        }
        let p = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        assert!(choose_negatives(&[0, 1], &p, None, NegativePolicy::HardestInBatch, &mut rng()).is_err());
    }

    #[test]
    fn make_triplets_uses_cache_rows() {
        let entries = (0..3).map(|i| (format!("s{i}"), Tensor::new(vec![2], vec![i as f32, 0.0]).unwrap())).collect();
        let cache = FeatureCache::new([7; 32], 2, entries).unwrap();
        let ids: Vec<String> = vec!["s2".into(), "s0".into()];
        let t = make_triplets(&ids, &[0, 1], &cache, &[7; 32], None, NegativePolicy::Uniform, &mut rng()).unwrap();
        assert_eq!(t.negatives, vec![1, 0]);
        assert_eq!(t.positive.data(), &[2.0, 0.0, 0.0, 0.0]);
        assert_eq!(t.negative.data(), &[0.0, 0.0, 2.0, 0.0]);
        assert!(make_triplets(&ids, &[0, 1], &cache, &[8; 32], None, NegativePolicy::Uniform, &mut rng()).is_err());
        assert!(make_triplets(&ids[..1], &[0], &cache, &[7; 32], None, NegativePolicy::Uniform, &mut rng()).is_err());
    }

    #[test]
    fn zero_epochs_leave_stream_unchanged() {
        let data = tiny_data(2);
        let mut model = StreamModel::new(Modality::Inertial, tiny_spec(), 2, &mut rng()).unwrap();
        let before = model.clone();
        let hyper = Hyperparams { epochs: 0, ..Default::default() };
        let h = train_stream(&mut model, TrainData::new(std::slice::from_ref(&data), &data.ids), &hyper, &TrainOptions::default()).unwrap();
        assert!(h.records.is_empty());
        assert_eq!(model.fingerprint(), before.fingerprint());
    }

    #[test]
    fn no_train_samples_is_an_error() {
        let data = tiny_data(2);
        let mut model = StreamModel::new(Modality::Inertial, tiny_spec(), 2, &mut rng()).unwrap();
        let r = train_stream(&mut model, TrainData::new(std::slice::from_ref(&data), &[]), &Hyperparams::default(), &TrainOptions::default());
        assert!(r.is_err());
    }

    #[test]
    fn overfit_one_sample() {
        let data = tiny_data(2);
        let ids = vec![data.ids[0].clone()];
        let mut model = StreamModel::new(Modality::Inertial, tiny_spec(), 2, &mut rng()).unwrap();
        let hyper = Hyperparams { epochs: 400, learning_rate: 1e-2, batch_size: 1, ..Default::default() };
        let h = train_stream(&mut model, TrainData::new(std::slice::from_ref(&data), &ids), &hyper, &TrainOptions::default()).unwrap();
        let last = h.last().unwrap();
        assert_eq!(last.accuracy, Some(1.0));
        assert!(last.loss < 1e-3, "loss {}", last.loss);
        let losses = h.train_losses();
        for w in losses[3..].windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn stream_training_is_deterministic_and_logs() {
        let data = tiny_data(2);
        let dir = tempfile::tempdir().unwrap();
        let run = |log: Option<PathBuf>| {
            let mut model = StreamModel::new(Modality::Skeleton, tiny_spec(), 2, &mut rng()).unwrap();
            let opts = TrainOptions {
                label: "stream-skeleton".into(),
                log,
                checkpoint_dir: Some(dir.path().join("ckpt")),
                checkpoint_every: 2,
            };
            let hyper = Hyperparams { epochs: 4, batch_size: 3, ..Default::default() };
            train_stream(&mut model, TrainData::new(std::slice::from_ref(&data), &data.ids), &hyper, &opts).unwrap();
            model
        };
        let log = dir.path().join("train.jsonl");
        let a = run(Some(log.clone()));
        let b = run(None);
        assert_eq!(a, b);
        let lines: Vec<EpochRecord> = std::fs::read_to_string(&log)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[3].epoch, 4);
        let (meta, params) = crate::bundle::load_checkpoint(&dir.path().join("ckpt/stream-skeleton-epoch0004")).unwrap();
        assert_eq!(meta.epoch, 4);
        assert_eq!(fingerprint(&params), a.fingerprint());
    }

    #[test]
    fn fusion_training_touches_only_fusion() {
        let data = tiny_data(3);
        let mut r = rng();
        let streams = vec![
            StreamModel::new(Modality::Inertial, tiny_spec(), 3, &mut r).unwrap(),
            StreamModel::new(Modality::Skeleton, tiny_spec(), 3, &mut r).unwrap(),
        ];
        let before: Vec<[u8; 32]> = streams.iter().map(|s| s.fingerprint()).collect();
        let mut fusion = FusionModel::new(FusionStrategy::MidDense, 2, 8, 3, &mut r).unwrap();
        let untouched = fusion.clone();
        let views = std::slice::from_ref(&data);
        let zero = Hyperparams { epochs: 0, ..Default::default() };
        train_fusion(&mut fusion, &streams, TrainData::new(views, &data.ids), &zero, &TrainOptions::default()).unwrap();
        assert_eq!(fusion, untouched);
        let hyper = Hyperparams { epochs: 3, batch_size: 4, ..Default::default() };
        let h = train_fusion(&mut fusion, &streams, TrainData::new(views, &data.ids), &hyper, &TrainOptions::default()).unwrap();
        assert_eq!(h.records.len(), 3);
        assert_ne!(fusion, untouched);
        let after: Vec<[u8; 32]> = streams.iter().map(|s| s.fingerprint()).collect();
        assert_eq!(before, after);

        let mut late = FusionModel::new(FusionStrategy::Late, 2, 8, 3, &mut r).unwrap();
        let h = train_fusion(&mut late, &streams, TrainData::new(views, &data.ids), &hyper, &TrainOptions::default()).unwrap();
        assert!(h.records.is_empty());
    }

    fn target_cache(data: &EncodedDataset, ids: &[String]) -> (StreamModel, FeatureCache) {
        let target = StreamModel::new(Modality::Skeleton, tiny_spec(), data.num_classes, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let rows = data.rows(ids).unwrap();
        let f = stream_features(&target, data, &rows).unwrap();
        let d = target.feature_dim();
        let entries = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), Tensor::new(vec![d], f.data()[i * d..(i + 1) * d].to_vec()).unwrap()))
            .collect();
        let fp = FeatureExtractor::fingerprint(&target);
        (target, FeatureCache::new(fp, d, entries).unwrap())
    }

    #[test]
    fn single_sample_regression_converges() {
        let data = tiny_data(2);
        let ids = vec![data.ids[1].clone()];
        let (target, cache) = target_cache(&data, &ids);
        let mut net = HallucinationModel::new(HallucinationTarget::Stream(Modality::Skeleton), tiny_spec(), &mut rng()).unwrap();
        let hyper = Hyperparams { epochs: 600, learning_rate: 3e-3, batch_size: 1, ..Default::default() };
        train_hallucination(
            &mut net,
            TrainData::new(std::slice::from_ref(&data), &ids),
            &cache,
            &target.fingerprint(),
            LossKind::Regression,
            &hyper,
            &TrainOptions::default(),
        )
        .unwrap();
        let x = data.batch(Modality::Inertial, &[1]).unwrap();
        let h = crate::models::hallucinate(&net, &x).unwrap();
        let m = cache.matrix(&ids, &target.fingerprint()).unwrap();
        let err = regression_loss(h.data(), m.data()).unwrap();
        assert!(err < 1e-4, "residual {err}");
    }

    #[test]
    fn hallucination_guards() {
        let data = tiny_data(2);
        let (target, cache) = target_cache(&data, &data.ids);
        let mut net = HallucinationModel::new(HallucinationTarget::Stream(Modality::Skeleton), tiny_spec(), &mut rng()).unwrap();
        let views = std::slice::from_ref(&data);
        let stale = train_hallucination(
            &mut net,
            TrainData::new(views, &data.ids),
            &cache,
            &[0; 32],
            LossKind::Triplet,
            &Hyperparams::default(),
            &TrainOptions::default(),
        );
        assert!(matches!(stale, Err(HalluxError::StaleCache { .. })));
        let tiny_batch = train_hallucination(
            &mut net,
            TrainData::new(views, &data.ids),
            &cache,
            &target.fingerprint(),
            LossKind::Triplet,
            &Hyperparams { batch_size: 1, ..Default::default() },
            &TrainOptions::default(),
        );
        assert!(tiny_batch.is_err());
    }

    #[test]
    fn hallucination_is_deterministic() {
        let data = tiny_data(2);
        let (target, cache) = target_cache(&data, &data.ids);
        let run = || {
            let mut net = HallucinationModel::new(HallucinationTarget::Stream(Modality::Skeleton), tiny_spec(), &mut rng()).unwrap();
            let hyper = Hyperparams { epochs: 3, batch_size: 3, negatives: NegativePolicy::HardestInBatch, ..Default::default() };
            train_hallucination(
                &mut net,
                TrainData::new(std::slice::from_ref(&data), &data.ids),
                &cache,
                &target.fingerprint(),
                LossKind::Triplet,
                &hyper,
                &TrainOptions::default(),
            )
            .unwrap();
            net
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn step_decay_schedule() {
        let h = Hyperparams { learning_rate: 1.0, lr_decay: Some(StepDecay { every: 2, factor: 0.5 }), ..Default::default() };
        assert_eq!([h.lr_at(0), h.lr_at(1), h.lr_at(2), h.lr_at(5)], [1.0, 1.0, 0.5, 0.25]);
        assert!(Hyperparams { margin: -0.1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn trailing_singleton_batch_is_merged() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let b = minibatches(5, 2, &mut r);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 3]);
        let b = minibatches(1, 4, &mut r);
        assert_eq!(b.len(), 1);
    }
}
