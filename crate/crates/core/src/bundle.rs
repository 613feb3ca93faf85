//! On-disk model format: a directory with a JSON metadata file and one HLXT
//! file per parameter tensor (`params/{name}.hlxt`). Bundles and training
//! checkpoints share the layout.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HalluxError, Result};
use crate::graph::ParamMap;
use crate::models::{
    fingerprint, BackboneSpec, FusionModel, FusionStrategy, Hallucination, HallucinationMode, HallucinationModel,
    HallucinationTarget, LossKind, Modality, ModelBundle, StreamModel,
};
use crate::tensor::{load_hlxt, save_hlxt};

const FORMAT_VERSION: u32 = 1;
pub const BUNDLE_FILE: &str = "bundle.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StreamMeta {
    modality: Modality,
    spec: BackboneSpec,
    fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetMeta {
    target: HallucinationTarget,
    spec: BackboneSpec,
    fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HallucinationMeta {
    mode: HallucinationMode,
    loss: LossKind,
    nets: Vec<NetMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleMeta {
    version: u32,
    num_classes: usize,
    feature_dim: usize,
    modalities: Vec<Modality>,
    streams: Vec<StreamMeta>,
    fusion: FusionStrategy,
    fusion_fingerprint: String,
    stage1_fingerprint: String,
    hallucination: Option<HallucinationMeta>,
}

/// Metadata of a training checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub version: u32,
    pub label: String,
    pub epoch: usize,
    pub fingerprint: String,
}

fn prefixed(dst: &mut ParamMap, prefix: &str, src: &ParamMap) {
    for (k, v) in src {
        dst.insert(format!("{prefix}{k}"), v.clone());
    }
}

fn strip(src: &ParamMap, prefix: &str) -> ParamMap {
    src.iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
        .collect()
}

fn net_prefix(target: HallucinationTarget) -> String {
    format!("hall.{}.", target.label())
}

fn bundle_params(bundle: &ModelBundle) -> ParamMap {
    let mut all = ParamMap::new();
    for (i, s) in bundle.streams.iter().enumerate() {
        prefixed(&mut all, &format!("s{i}."), &s.params());
    }
    prefixed(&mut all, "fusion.", &bundle.fusion.params());
    if let Some(h) = &bundle.hallucination {
        for net in &h.nets {
            prefixed(&mut all, &net_prefix(net.target), &net.params);
        }
    }
    all
}

/// Writes every tensor of `params` to `dir/params/{name}.hlxt`.
pub fn write_param_dir(dir: &Path, params: &ParamMap) -> Result<()> {
    let pdir = dir.join("params");
    std::fs::create_dir_all(&pdir)?;
    for (name, t) in params {
        save_hlxt(t, &pdir.join(format!("{name}.hlxt")))?;
    }
    Ok(())
}

/// Loads every `params/*.hlxt` under `dir`.
pub fn read_param_dir(dir: &Path) -> Result<ParamMap> {
    let pdir = dir.join("params");
    let mut out = ParamMap::new();
    let mut entries: Vec<_> = std::fs::read_dir(&pdir)?.collect::<std::io::Result<Vec<_>>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".hlxt") {
            out.insert(stem.to_string(), load_hlxt(&e.path())?);
        }
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    crate::io_util::write_atomic(path, text.as_bytes())
}

pub fn save_bundle(bundle: &ModelBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    let meta = BundleMeta {
        version: FORMAT_VERSION,
        num_classes: bundle.num_classes(),
        feature_dim: bundle.feature_dim(),
        modalities: bundle.modalities(),
        streams: bundle
            .streams
            .iter()
            .map(|s| StreamMeta { modality: s.modality, spec: s.spec.clone(), fingerprint: hex::encode(s.fingerprint()) })
            .collect(),
        fusion: bundle.fusion.strategy,
        fusion_fingerprint: hex::encode(fingerprint(&bundle.fusion.params())),
        stage1_fingerprint: hex::encode(bundle.stage1_fingerprint()),
        hallucination: bundle.hallucination.as_ref().map(|h| HallucinationMeta {
            mode: h.mode,
            loss: h.loss,
            nets: h
                .nets
                .iter()
                .map(|n| NetMeta { target: n.target, spec: n.spec.clone(), fingerprint: hex::encode(fingerprint(&n.params)) })
                .collect(),
        }),
    };
    let pdir = dir.join("params");
    if pdir.exists() {
        std::fs::remove_dir_all(&pdir)?;
    }
    write_param_dir(dir, &bundle_params(bundle))?;
    write_json(&dir.join(BUNDLE_FILE), &meta)
}

fn check_fp(what: &str, params: &ParamMap, expected: &str) -> Result<()> {
    let got = hex::encode(fingerprint(params));
    if got != expected {
        return Err(HalluxError::Format(format!("{what}: parameter fingerprint {got} does not match metadata {expected}")));
    }
    Ok(())
}

/// Loads a bundle and verifies every recorded fingerprint.
pub fn load_bundle(dir: &Path) -> Result<ModelBundle> {
    let meta: BundleMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(BUNDLE_FILE))?)?;
    if meta.version != FORMAT_VERSION {
        return Err(HalluxError::Format(format!("unsupported bundle version {}", meta.version)));
    }
    let all = read_param_dir(dir)?;
    let mut streams = Vec::new();
    for (i, sm) in meta.streams.iter().enumerate() {
        let p = strip(&all, &format!("s{i}."));
        let model = StreamModel {
            modality: sm.modality,
            spec: sm.spec.clone(),
            num_classes: meta.num_classes,
            backbone: strip(&p, "backbone."),
            head: strip(&p, "head."),
        };
        check_fp(&format!("stream {i}"), &model.params(), &sm.fingerprint)?;
        streams.push(model);
    }
    let fp = strip(&all, "fusion.");
    let fusion = FusionModel {
        strategy: meta.fusion,
        num_streams: streams.len(),
        feature_dim: meta.feature_dim,
        num_classes: meta.num_classes,
        projection: (meta.fusion == FusionStrategy::MidDense).then(|| strip(&fp, "proj.")),
        head: (meta.fusion != FusionStrategy::Late).then(|| strip(&fp, "head.")),
    };
    check_fp("fusion", &fusion.params(), &meta.fusion_fingerprint)?;
    let hallucination = match &meta.hallucination {
        None => None,
        Some(h) => {
            let mut nets = Vec::new();
            for n in &h.nets {
                let params = strip(&all, &net_prefix(n.target));
                check_fp(&format!("hallucination net {}", n.target.label()), &params, &n.fingerprint)?;
                nets.push(HallucinationModel { target: n.target, spec: n.spec.clone(), params });
            }
            Some(Hallucination { mode: h.mode, loss: h.loss, nets })
        }
    };
    let bundle = ModelBundle { streams, fusion, hallucination };
    bundle.validate()?;
    if hex::encode(bundle.stage1_fingerprint()) != meta.stage1_fingerprint {
        return Err(HalluxError::Format("stage-1 fingerprint does not match metadata".into()));
    }
    Ok(bundle)
}

/// Writes `params` as checkpoint `dir/{label}-epoch{epoch:04}`.
pub fn save_checkpoint(dir: &Path, label: &str, epoch: usize, params: &ParamMap) -> Result<std::path::PathBuf> {
    let out = dir.join(format!("{label}-epoch{epoch:04}"));
    write_param_dir(&out, params)?;
    let meta = CheckpointMeta {
        version: FORMAT_VERSION,
        label: label.to_string(),
        epoch,
        fingerprint: hex::encode(fingerprint(params)),
    };
    write_json(&out.join(CHECKPOINT_FILE), &meta)?;
    Ok(out)
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointMeta, ParamMap)> {
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(CHECKPOINT_FILE))?)?;
    let params = read_param_dir(dir)?;
    check_fp(&meta.label, &params, &meta.fingerprint)?;
    Ok((meta, params))
}

/// Human-readable parameter summary: name to shape.
pub fn param_shapes(bundle: &ModelBundle) -> BTreeMap<String, Vec<usize>> {
    bundle_params(bundle).into_iter().map(|(k, v)| (k, v.shape().to_vec())).collect()
}
