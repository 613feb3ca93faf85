//! Multimodal recordings: manifests, payload IO, splits, the synthetic
//! generator, network-input encoding and frozen feature caches.

mod cache;
mod encode;
mod ingest;
mod payload;
mod split;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoding::SignalWindow;
use crate::error::{HalluxError, Result};
use crate::models::Modality;
use crate::tensor::Tensor;

pub use cache::{cache_features, cache_lookup, FeatureCache, FeatureExtractor};
pub use encode::{encode_dataset, encode_dataset_parallel, encode_sample, EncodedDataset, PreprocessConfig};
pub use ingest::ingest_utd_csv;
pub use payload::{read_csv_window, write_csv_window};
pub use split::{make_split, Split, SplitSpec};
pub use synth::{synth_generate, SynthConfig};

/// Where a modality's data lives: a file relative to the manifest root, or
/// held in memory (synthetic data before it is written out).
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    File(PathBuf),
    Window(SignalWindow),
    Clip(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub sample_id: String,
    /// 1-based, as numbered by the dataset.
    pub subject: u32,
    /// 0-based class index.
    pub action_class: usize,
    pub trial: u32,
    pub payloads: BTreeMap<Modality, Payload>,
}

impl MultimodalSample {
    pub fn has(&self, m: Modality) -> bool {
        self.payloads.contains_key(&m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InertialDescriptor {
    pub channels: usize,
    /// Sensor group of each channel, for per-sensor normalization.
    pub groups: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub channel_names: Vec<String>,
    pub rate_hz: f64,
}

impl InertialDescriptor {
    pub fn triaxial(sensors: usize, rate_hz: f64) -> Self {
        Self {
            channels: sensors * 3,
            groups: (0..sensors * 3).map(|c| c / 3).collect(),
            channel_names: Vec::new(),
            rate_hz,
        }
    }

    fn names(&self) -> Vec<String> {
        if self.channel_names.len() == self.channels {
            self.channel_names.clone()
        } else {
            (0..self.channels)
                .map(|c| format!("s{}{}", c / 3, ['x', 'y', 'z'][c % 3]))
                .collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonDescriptor {
    pub joints: usize,
    pub fps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoDescriptor {
    pub height: usize,
    pub width: usize,
    pub fps: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityDescriptors {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inertial: Option<InertialDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skeleton: Option<SkeletonDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video: Option<VideoDescriptor>,
}

impl ModalityDescriptors {
    pub fn has(&self, m: Modality) -> bool {
        match m {
            Modality::Inertial => self.inertial.is_some(),
            Modality::Skeleton => self.skeleton.is_some(),
            Modality::Video => self.video.is_some(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub num_classes: usize,
    pub modalities: ModalityDescriptors,
    pub samples: Vec<MultimodalSample>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    version: u32,
    num_classes: usize,
    modalities: ModalityDescriptors,
    samples: Vec<SampleRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    sample_id: String,
    subject: u32,
    action_class: usize,
    trial: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    inertial: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    skeleton: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    video: Option<String>,
}

const MANIFEST_VERSION: u32 = 1;

impl DatasetManifest {
    pub fn sample(&self, id: &str) -> Option<&MultimodalSample> {
        self.samples.iter().find(|s| s.sample_id == id)
    }

    pub fn subjects(&self) -> BTreeSet<u32> {
        self.samples.iter().map(|s| s.subject).collect()
    }

    pub fn classes(&self) -> BTreeSet<usize> {
        self.samples.iter().map(|s| s.action_class).collect()
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Inertial or skeleton payload as a window. Skeleton channels are
    /// grouped as one sensor.
    pub fn window(&self, sample: &MultimodalSample, m: Modality) -> Result<SignalWindow> {
        let payload = sample.payloads.get(&m).ok_or_else(|| HalluxError::MissingModality {
            modality: m.to_string(),
            ids: vec![sample.sample_id.clone()],
        })?;
        let (names, groups) = match m {
            Modality::Inertial => {
                let d = self
                    .modalities
                    .inertial
                    .as_ref()
                    .ok_or_else(|| HalluxError::Manifest("no inertial descriptor".into()))?;
                (d.names(), d.groups.clone())
            }
            Modality::Skeleton => {
                let d = self
                    .modalities
                    .skeleton
                    .as_ref()
                    .ok_or_else(|| HalluxError::Manifest("no skeleton descriptor".into()))?;
                let names = (0..d.joints * 3)
                    .map(|c| format!("j{}{}", c / 3 + 1, ['x', 'y', 'z'][c % 3]))
                    .collect();
                (names, vec![0; d.joints * 3])
            }
            Modality::Video => {
                return Err(HalluxError::InvalidArgument("video payloads are clips, not windows".into()))
            }
        };
        match payload {
            Payload::Window(w) => Ok(w.clone()),
            Payload::File(p) => payload::load_window(&self.resolve(p), names, groups),
            Payload::Clip(_) => Err(HalluxError::InvalidArgument(format!(
                "{m} payload of {} is a clip",
                sample.sample_id
            ))),
        }
    }

    /// Video payload as `[T, H, W, 3]`.
    pub fn clip(&self, sample: &MultimodalSample) -> Result<Tensor> {
        match sample.payloads.get(&Modality::Video) {
            Some(Payload::Clip(t)) => Ok(t.clone()),
            Some(Payload::File(p)) => crate::tensor::load_hlxt(&self.resolve(p)),
            Some(Payload::Window(_)) => Err(HalluxError::InvalidArgument(format!(
                "video payload of {} is a window",
                sample.sample_id
            ))),
            None => Err(HalluxError::MissingModality {
                modality: "video".into(),
                ids: vec![sample.sample_id.clone()],
            }),
        }
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(HalluxError::Manifest("manifest has no samples".into()));
        }
        if self.num_classes < 2 {
            return Err(HalluxError::Manifest(format!("num_classes = {} (< 2)", self.num_classes)));
        }
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.sample_id.as_str()) {
                return Err(HalluxError::DuplicateSampleId(s.sample_id.clone()));
            }
            if s.action_class >= self.num_classes {
                return Err(HalluxError::Manifest(format!(
                    "sample {} has class {} outside [0, {})",
                    s.sample_id, s.action_class, self.num_classes
                )));
            }
            if !s.has(Modality::Inertial) {
                return Err(HalluxError::Manifest(format!("sample {} has no inertial payload", s.sample_id)));
            }
            for m in s.payloads.keys() {
                if !self.modalities.has(*m) {
                    return Err(HalluxError::Manifest(format!(
                        "sample {} has a {m} payload but the manifest describes no {m} modality",
                        s.sample_id
                    )));
                }
            }
        }
        if let Some(d) = &self.modalities.inertial {
            if d.groups.len() != d.channels {
                return Err(HalluxError::Manifest(format!(
                    "inertial descriptor lists {} groups for {} channels",
                    d.groups.len(),
                    d.channels
                )));
            }
        }
        Ok(())
    }

    /// Shape checks against the descriptors, reading only payload headers.
    fn validate_payload_shapes(&self) -> Result<()> {
        let mut problems = Vec::new();
        for s in &self.samples {
            for (m, p) in &s.payloads {
                let shape = match p {
                    Payload::File(path) => payload::peek_shape(&self.resolve(path))?,
                    Payload::Window(w) => vec![w.num_channels(), w.len()],
                    Payload::Clip(t) => t.shape().to_vec(),
                };
                let ok = match m {
                    Modality::Inertial => {
                        Some(shape.len() == 2 && Some(shape[0]) == self.modalities.inertial.as_ref().map(|d| d.channels))
                    }
                    Modality::Skeleton => Some(
                        shape.len() == 2 && Some(shape[0]) == self.modalities.skeleton.as_ref().map(|d| d.joints * 3),
                    ),
                    Modality::Video => {
                        let d = self.modalities.video.as_ref();
                        Some(
                            shape.len() == 4
                                && shape[3] == 3
                                && d.is_some_and(|d| d.height == shape[1] && d.width == shape[2]),
                        )
                    }
                };
                if ok == Some(false) {
                    problems.push(format!("{} {m} {shape:?}", s.sample_id));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(HalluxError::Manifest(format!(
                "payload shapes disagree with the modality descriptors (channel count or frame size): {}",
                problems.join("; ")
            )))
        }
    }
}

/// Read and fully validate a manifest; payload paths are relative to the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)?;
    let file: ManifestFile = serde_json::from_str(&text)
        .map_err(|e| HalluxError::Manifest(format!("{}: {e}", path.display())))?;
    if file.version != MANIFEST_VERSION {
        return Err(HalluxError::Manifest(format!("unsupported manifest version {}", file.version)));
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let samples = file
        .samples
        .into_iter()
        .map(|r| {
            let mut payloads = BTreeMap::new();
            for (m, p) in [
                (Modality::Inertial, r.inertial),
                (Modality::Skeleton, r.skeleton),
                (Modality::Video, r.video),
            ] {
                if let Some(p) = p {
                    payloads.insert(m, Payload::File(PathBuf::from(p)));
                }
            }
            MultimodalSample {
                sample_id: r.sample_id,
                subject: r.subject,
                action_class: r.action_class,
                trial: r.trial,
                payloads,
            }
        })
        .collect();
    let manifest = DatasetManifest { root, num_classes: file.num_classes, modalities: file.modalities, samples };
    manifest.validate()?;
    let missing: Vec<PathBuf> = manifest
        .samples
        .iter()
        .flat_map(|s| s.payloads.values())
        .filter_map(|p| match p {
            Payload::File(f) => Some(manifest.resolve(f)),
            _ => None,
        })
        .filter(|p| !p.is_file())
        .collect();
    if !missing.is_empty() {
        return Err(HalluxError::MissingFiles(missing));
    }
    manifest.validate_payload_shapes()?;
    Ok(manifest)
}

/// Write `manifest.json` into `dir`, materializing in-memory payloads as HLXT
/// files under `{modality}/`. Returns the on-disk manifest.
pub fn write_manifest(manifest: &DatasetManifest, dir: &Path) -> Result<DatasetManifest> {
    manifest.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(manifest.samples.len());
    let mut on_disk = manifest.clone();
    on_disk.root = dir.to_path_buf();
    for (s, out) in manifest.samples.iter().zip(on_disk.samples.iter_mut()) {
        let mut paths: BTreeMap<Modality, String> = BTreeMap::new();
        for (m, p) in &s.payloads {
            let rel = match p {
                Payload::File(f) => {
                    let src = manifest.resolve(f);
                    let rel = PathBuf::from(m.as_str()).join(src.file_name().ok_or_else(|| {
                        HalluxError::Manifest(format!("payload path {} has no file name", f.display()))
                    })?);
                    let dst = dir.join(&rel);
                    if src != dst {
                        std::fs::create_dir_all(dst.parent().unwrap())?;
                        std::fs::copy(&src, &dst)?;
                    }
                    rel
                }
                Payload::Window(w) => {
                    let rel = PathBuf::from(m.as_str()).join(format!("{}.hlxt", s.sample_id));
                    payload::save_window(w, &dir.join(&rel))?;
                    rel
                }
                Payload::Clip(t) => {
                    let rel = PathBuf::from(m.as_str()).join(format!("{}.hlxt", s.sample_id));
                    crate::tensor::save_hlxt(t, &dir.join(&rel))?;
                    rel
                }
            };
            let rel_str = rel
                .to_str()
                .ok_or_else(|| HalluxError::Manifest(format!("non-UTF-8 path {}", rel.display())))?
                .replace('\\', "/");
            out.payloads.insert(*m, Payload::File(rel.clone()));
            paths.insert(*m, rel_str);
        }
        records.push(SampleRecord {
            sample_id: s.sample_id.clone(),
            subject: s.subject,
            action_class: s.action_class,
            trial: s.trial,
            inertial: paths.remove(&Modality::Inertial),
            skeleton: paths.remove(&Modality::Skeleton),
            video: paths.remove(&Modality::Video),
        });
    }
    let file = ManifestFile {
        version: MANIFEST_VERSION,
        num_classes: manifest.num_classes,
        modalities: manifest.modalities.clone(),
        samples: records,
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    crate::io_util::write_atomic(&dir.join("manifest.json"), text.as_bytes())?;
    Ok(on_disk)
}
