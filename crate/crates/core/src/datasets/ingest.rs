//! Converter from per-sample CSV dumps named after the UTD-MHAD scheme:
//! `a{class}_s{subject}_t{trial}_inertial.csv`, `..._skeleton.csv` and
//! optionally `..._color.hlxt` (a `[T, H, W, 3]` clip). Class, subject and
//! trial numbers are 1-based in file names.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use regex::Regex;

use super::payload::{peek_shape, read_csv_window, save_window};
use super::{
    write_manifest, DatasetManifest, InertialDescriptor, ModalityDescriptors, MultimodalSample, Payload,
    SkeletonDescriptor, VideoDescriptor,
};
use crate::error::{HalluxError, Result};
use crate::models::Modality;

/// Inertial sampling rate of the UTD-MHAD wearable.
const INERTIAL_RATE_HZ: f64 = 50.0;
const KINECT_FPS: f64 = 30.0;

/// Converts every recognized file in `src` and writes an HLXT-backed
/// dataset with `manifest.json` into `out`.
pub fn ingest_utd_csv(src: &Path, out: &Path) -> Result<DatasetManifest> {
    let pattern = Regex::new(r"^a(\d+)_s(\d+)_t(\d+)_(inertial|skeleton|color|video)\.(csv|hlxt)$").unwrap();
    let mut found: BTreeMap<(usize, u32, u32), BTreeMap<Modality, PathBuf>> = BTreeMap::new();
    let mut names: Vec<PathBuf> = std::fs::read_dir(src)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    names.sort();
    for path in names {
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(cap) = pattern.captures(name) else { continue };
        let num = |i: usize| cap[i].parse::<u32>().map_err(|_| HalluxError::Manifest(format!("bad number in {name}")));
        let (class, subject, trial) = (num(1)? as usize, num(2)?, num(3)?);
        if class == 0 || subject == 0 {
            return Err(HalluxError::Manifest(format!("{name}: class and subject numbers are 1-based")));
        }
        let modality = match (&cap[4], &cap[5]) {
            ("inertial", "csv") => Modality::Inertial,
            ("skeleton", "csv") => Modality::Skeleton,
            ("color" | "video", "hlxt") => Modality::Video,
            _ => return Err(HalluxError::Manifest(format!("{name}: unexpected format for this modality"))),
        };
        found.entry((class, subject, trial)).or_default().insert(modality, path);
    }
    if found.is_empty() {
        return Err(HalluxError::Manifest(format!("no recognized sample files in {}", src.display())));
    }

    let mut descriptors = ModalityDescriptors::default();
    let mut samples = Vec::new();
    let mut num_classes = 0;
    for ((class, subject, trial), files) in found {
        let id = format!("a{class}_s{subject}_t{trial}");
        num_classes = num_classes.max(class);
        let mut payloads = BTreeMap::new();
        for (m, path) in files {
            match m {
                Modality::Inertial | Modality::Skeleton => {
                    let w = read_csv_window(&path, None)?;
                    if m == Modality::Inertial && descriptors.inertial.is_none() {
                        let mut d = InertialDescriptor::triaxial(w.num_channels().div_ceil(3), INERTIAL_RATE_HZ);
                        d.channels = w.num_channels();
                        d.groups.truncate(w.num_channels());
                        d.channel_names = w.names().to_vec();
                        descriptors.inertial = Some(d);
                    }
                    if m == Modality::Skeleton && descriptors.skeleton.is_none() {
                        descriptors.skeleton = Some(SkeletonDescriptor { joints: w.num_channels() / 3, fps: KINECT_FPS });
                    }
                    let rel = PathBuf::from(m.as_str()).join(format!("{id}.hlxt"));
                    save_window(&w, &out.join(&rel))?;
                    payloads.insert(m, Payload::File(rel));
                }
                Modality::Video => {
                    let shape = peek_shape(&path)?;
                    if shape.len() != 4 || shape[3] != 3 {
                        return Err(HalluxError::Manifest(format!("{}: clip shape {shape:?}", path.display())));
                    }
                    if descriptors.video.is_none() {
                        descriptors.video = Some(VideoDescriptor { height: shape[1], width: shape[2], fps: KINECT_FPS });
                    }
                    let rel = PathBuf::from(m.as_str()).join(format!("{id}.hlxt"));
                    std::fs::create_dir_all(out.join(m.as_str()))?;
                    std::fs::copy(&path, out.join(&rel))?;
                    payloads.insert(m, Payload::File(rel));
                }
            }
        }
        samples.push(MultimodalSample { sample_id: id, subject, action_class: class - 1, trial, payloads });
    }
    let manifest = DatasetManifest { root: out.to_path_buf(), num_classes, modalities: descriptors, samples };
    write_manifest(&manifest, out)?;
    super::load_manifest(&out.join("manifest.json"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::write_csv_window;
    use crate::encoding::SignalWindow;

    #[test]
    fn converts_csv_dump() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        for (c, s) in [(1, 1), (1, 2), (2, 1), (3, 2)] {
            let inertial = SignalWindow::from_triaxial(vec![vec![0.5, 0.25, 0.0, -1.0]; 6]).unwrap();
            write_csv_window(&inertial, &src.path().join(format!("a{c}_s{s}_t1_inertial.csv"))).unwrap();
            let skel = SignalWindow::from_triaxial(vec![vec![0.1, 0.2]; 60]).unwrap();
            write_csv_window(&skel, &src.path().join(format!("a{c}_s{s}_t1_skeleton.csv"))).unwrap();
        }
        std::fs::write(src.path().join("README.txt"), "ignored").unwrap();
        let m = ingest_utd_csv(src.path(), out.path()).unwrap();
        assert_eq!(m.samples.len(), 4);
        assert_eq!(m.num_classes, 3);
        assert_eq!(m.modalities.skeleton.as_ref().unwrap().joints, 20);
        assert_eq!(m.modalities.inertial.as_ref().unwrap().channels, 6);
        assert_eq!(m.samples[3].action_class, 2);
        let w = m.window(&m.samples[0], Modality::Inertial).unwrap();
        assert_eq!(w.channel(0), &[0.5, 0.25, 0.0, -1.0]);
    }

    #[test]
    fn empty_source_is_an_error() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        assert!(ingest_utd_csv(src.path(), out.path()).is_err());
    }
}
