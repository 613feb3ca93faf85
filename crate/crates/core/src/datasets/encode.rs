use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, MultimodalSample};
use crate::encoding::{
    build_channel_sequence, crop_or_pad_at, crop_or_pad_max_offset, inertial_to_image, normalize_pm1,
    reduce_clip, skeleton_to_image, video_clip_preprocess, SignalWindow, TemporalReduction, VideoGeometry,
};
use crate::error::{HalluxError, Result};
use crate::models::Modality;
use crate::tensor::Tensor;

/// Sizes and options turning payloads into backbone inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Output image size for inertial and skeleton images.
    pub image_size: usize,
    /// Inertial samples per window after crop/pad.
    pub inertial_len: usize,
    /// Skeleton frames per window after crop/pad.
    pub skeleton_frames: usize,
    pub video: VideoGeometry,
    pub video_reduction: TemporalReduction,
    /// Normalize each inertial sensor separately rather than the whole window.
    pub per_sensor: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            inertial_len: 217,
            skeleton_frames: 64,
            video: VideoGeometry::default(),
            video_reduction: TemporalReduction::Mean,
            per_sensor: true,
        }
    }
}

impl PreprocessConfig {
    /// Backbone input shape `[H, W, C]` for a modality.
    pub fn input_shape(&self, m: Modality) -> [usize; 3] {
        match m {
            Modality::Inertial | Modality::Skeleton => [self.image_size, self.image_size, 1],
            Modality::Video => {
                let c = match self.video_reduction {
                    TemporalReduction::Mean => 3,
                    TemporalReduction::FrameStack(k) => 3 * k,
                };
                [self.video.crop, self.video.crop, c]
            }
        }
    }
}

fn crop_window<R: Rng + ?Sized>(w: &SignalWindow, len: usize, train: bool, rng: &mut R) -> Result<SignalWindow> {
    if w.is_empty() {
        return Err(HalluxError::InvalidArgument("cannot encode an empty window".into()));
    }
    let max = crop_or_pad_max_offset(w.len(), len);
    let offset = if train { rng.random_range(0..=max) } else { max / 2 };
    crop_or_pad_at(w, len, offset)
}

/// One modality of one sample as a backbone input `[H, W, C]`. Training mode
/// draws random temporal (and spatial, for video) crops; otherwise crops are
/// centered.
pub fn encode_sample<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    sample: &MultimodalSample,
    modality: Modality,
    cfg: &PreprocessConfig,
    train_mode: bool,
    rng: &mut R,
) -> Result<Tensor> {
    let hw = (cfg.image_size, cfg.image_size);
    match modality {
        Modality::Inertial => {
            let w = manifest.window(sample, modality)?;
            let w = normalize_pm1(&crop_window(&w, cfg.inertial_len, train_mode, rng)?, cfg.per_sensor);
            let arrangement = build_channel_sequence(w.num_channels())?;
            inertial_to_image(&w, &arrangement, hw)
        }
        Modality::Skeleton => {
            let w = manifest.window(sample, modality)?;
            let w = normalize_pm1(&crop_window(&w, cfg.skeleton_frames, train_mode, rng)?, false);
            skeleton_to_image(&w, hw)
        }
        Modality::Video => {
            let clip = manifest.clip(sample)?;
            let clip = video_clip_preprocess(&clip, &cfg.video, train_mode, rng)?;
            reduce_clip(&clip, cfg.video_reduction)
        }
    }
}

/// Encoded inputs for a set of samples, rows in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDataset {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub subjects: Vec<u32>,
    pub num_classes: usize,
    inputs: BTreeMap<Modality, Vec<Option<Tensor>>>,
    index: HashMap<String, usize>,
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.inputs.keys().copied().collect()
    }

    pub fn row(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Row indices of `ids`; unknown ids are reported together.
    pub fn rows(&self, ids: &[String]) -> Result<Vec<usize>> {
        let mut rows = Vec::with_capacity(ids.len());
        let mut unknown = Vec::new();
        for id in ids {
            match self.row(id) {
                Some(r) => rows.push(r),
                None => unknown.push(id.clone()),
            }
        }
        if unknown.is_empty() {
            Ok(rows)
        } else {
            Err(HalluxError::InvalidArgument(format!("unknown sample ids: {}", unknown.join(", "))))
        }
    }

    pub fn input(&self, m: Modality, row: usize) -> Option<&Tensor> {
        self.inputs.get(&m).and_then(|v| v[row].as_ref())
    }

    /// Rows lacking modality `m`.
    pub fn missing(&self, m: Modality, rows: &[usize]) -> Vec<String> {
        rows.iter()
            .filter(|&&r| self.input(m, r).is_none())
            .map(|&r| self.ids[r].clone())
            .collect()
    }

    /// Stacked `[B, H, W, C]` batch of modality `m`.
    pub fn batch(&self, m: Modality, rows: &[usize]) -> Result<Tensor> {
        let missing = self.missing(m, rows);
        if !missing.is_empty() {
            return Err(HalluxError::MissingModality { modality: m.to_string(), ids: missing });
        }
        let items: Vec<Tensor> = rows.iter().map(|&r| self.input(m, r).unwrap().clone()).collect();
        Tensor::stack(&items)
    }

    pub fn labels_of(&self, rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|&r| self.labels[r]).collect()
    }

    /// Restrict to `ids`, in the given order.
    pub fn subset(&self, ids: &[String]) -> Result<EncodedDataset> {
        let rows = self.rows(ids)?;
        let inputs = self
            .inputs
            .iter()
            .map(|(m, v)| (*m, rows.iter().map(|&r| v[r].clone()).collect()))
            .collect();
        Ok(EncodedDataset {
            ids: ids.to_vec(),
            labels: self.labels_of(&rows),
            subjects: rows.iter().map(|&r| self.subjects[r]).collect(),
            num_classes: self.num_classes,
            inputs,
            index: ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect(),
        })
    }

    /// Relabel classes with `map(old) -> new` over a new class count.
    pub fn relabel(&self, num_classes: usize, map: impl Fn(usize) -> usize) -> EncodedDataset {
        let mut out = self.clone();
        out.num_classes = num_classes;
        out.labels = self.labels.iter().map(|&c| map(c)).collect();
        out
    }
}

/// Encodes `modalities` for every sample in the manifest. Samples without a
/// modality get an empty slot. Augmentation randomness (train mode) is drawn
/// per sample from `seed`, so results do not depend on iteration order.
pub fn encode_dataset(
    manifest: &DatasetManifest,
    modalities: &[Modality],
    cfg: &PreprocessConfig,
    train_mode: bool,
    seed: u64,
) -> Result<EncodedDataset> {
    encode_dataset_parallel(manifest, modalities, cfg, train_mode, seed, 1)
}

fn encode_one(
    manifest: &DatasetManifest,
    index: usize,
    m: Modality,
    cfg: &PreprocessConfig,
    train_mode: bool,
    seed: u64,
) -> Result<Option<Tensor>> {
    let s = &manifest.samples[index];
    if !s.has(m) {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((m as u64) << 40) | index as u64);
    encode_sample(manifest, s, m, cfg, train_mode, &mut rng)
        .map(Some)
        .map_err(|e| HalluxError::InvalidArgument(format!("encoding {m} of {}: {e}", s.sample_id)))
}

/// [`encode_dataset`] over up to `threads` worker threads; the result is
/// identical for any thread count.
pub fn encode_dataset_parallel(
    manifest: &DatasetManifest,
    modalities: &[Modality],
    cfg: &PreprocessConfig,
    train_mode: bool,
    seed: u64,
    threads: usize,
) -> Result<EncodedDataset> {
    let n = manifest.samples.len();
    let threads = threads.clamp(1, n.max(1));
    let mut inputs: BTreeMap<Modality, Vec<Option<Tensor>>> = BTreeMap::new();
    for &m in modalities {
        let col: Vec<Option<Tensor>> = if threads == 1 {
            (0..n).map(|i| encode_one(manifest, i, m, cfg, train_mode, seed)).collect::<Result<_>>()?
        } else {
            let chunk = n.div_ceil(threads);
            let parts: Vec<Result<Vec<Option<Tensor>>>> = std::thread::scope(|scope| {
                let handles: Vec<_> = (0..n)
                    .step_by(chunk)
                    .map(|start| {
                        scope.spawn(move || {
                            (start..(start + chunk).min(n))
                                .map(|i| encode_one(manifest, i, m, cfg, train_mode, seed))
                                .collect::<Result<Vec<_>>>()
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("encoder thread panicked")).collect()
            });
            let mut col = Vec::with_capacity(n);
            for p in parts {
                col.extend(p?);
            }
            col
        };
        inputs.insert(m, col);
    }
    let ids: Vec<String> = manifest.samples.iter().map(|s| s.sample_id.clone()).collect();
    Ok(EncodedDataset {
        index: ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect(),
        ids,
        labels: manifest.samples.iter().map(|s| s.action_class).collect(),
        subjects: manifest.samples.iter().map(|s| s.subject).collect(),
        num_classes: manifest.num_classes,
        inputs,
    })
}
