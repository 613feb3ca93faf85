//! Synthetic correlated multimodal recordings.
//!
//! Each class owns a prototype trajectory per joint coordinate, a sum of
//! sine/cosine harmonics around a shared rest pose. A recording perturbs the
//! prototype (trial deviation) and applies the subject's style (amplitude,
//! speed, sensor orientation). Joints carrying a sensor share most of their
//! motion between paired classes, so the wearable alone confuses them while
//! the full skeleton separates them.
//!
//! * inertial: second time-derivative of the sensor joints, rotated into the
//!   subject's sensor frame, plus white noise of standard deviation `noise`;
//! * skeleton: `correlation * latent + (1 - correlation) * nuisance`, where the
//!   nuisance is an independent recording of the same class;
//! * video: skeleton joints splatted onto a small RGB grid over static,
//!   class-independent background blobs and pixel noise.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    DatasetManifest, InertialDescriptor, ModalityDescriptors, MultimodalSample, Payload, SkeletonDescriptor,
    VideoDescriptor,
};
use crate::encoding::SignalWindow;
use crate::error::{HalluxError, Result};
use crate::models::Modality;
use crate::tensor::Tensor;

const HARMONICS: usize = 3;
const FPS: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub subjects: u32,
    pub trials: u32,
    /// Weight of the shared latent in the skeleton stream, in `[0, 1]`.
    pub correlation: f64,
    /// Inertial noise standard deviation.
    pub noise: f64,
    pub seed: u64,
    pub joints: usize,
    /// Joints carrying a triaxial inertial sensor.
    pub sensor_joints: Vec<usize>,
    pub video_size: usize,
    /// Frames per clip after cropping.
    pub frames: usize,
    /// Extra recorded frames, giving room for random temporal crops.
    pub extra_frames: usize,
    /// Inertial samples per video frame.
    pub inertial_per_frame: usize,
    /// Share of class-specific (rather than class-pair) motion at sensor joints.
    pub sensor_specificity: f64,
    /// Trial-to-trial spread of the harmonic coefficients, relative.
    pub trial_spread: f64,
    /// Largest sensor rotation between subjects, in degrees.
    pub max_sensor_rotation_deg: f64,
    pub with_video: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            subjects: 8,
            trials: 5,
            correlation: 0.9,
            noise: 0.1,
            seed: 42,
            joints: 8,
            sensor_joints: vec![3, 6],
            video_size: 12,
            frames: 64,
            extra_frames: 8,
            inertial_per_frame: 3,
            sensor_specificity: 0.25,
            trial_spread: 0.3,
            max_sensor_rotation_deg: 30.0,
            with_video: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HalluxError::InvalidArgument(m));
        if !(0.0..=1.0).contains(&self.correlation) {
            return bad(format!("correlation {} outside [0, 1]", self.correlation));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad(format!("noise {} must be finite and non-negative", self.noise));
        }
        if self.num_classes < 2 || self.subjects == 0 || self.trials == 0 {
            return bad("need at least 2 classes, 1 subject and 1 trial".into());
        }
        if self.sensor_joints.is_empty() || self.sensor_joints.iter().any(|&j| j >= self.joints) {
            return bad(format!("sensor joints {:?} invalid for {} joints", self.sensor_joints, self.joints));
        }
        if self.frames < 2 || self.inertial_per_frame == 0 || self.video_size < 2 {
            return bad("frames >= 2, inertial_per_frame >= 1 and video_size >= 2 required".into());
        }
        if !(0.0..=1.0).contains(&self.sensor_specificity) {
            return bad(format!("sensor_specificity {} outside [0, 1]", self.sensor_specificity));
        }
        Ok(())
    }

    pub fn recorded_frames(&self) -> usize {
        self.frames + self.extra_frames
    }

    pub fn inertial_channels(&self) -> usize {
        self.sensor_joints.len() * 3
    }
}

fn stream_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((tag << 40) | index);
    r
}

/// Harmonic coefficients of one coordinate: `(sin, cos)` per harmonic.
type Coeffs = [(f64, f64); HARMONICS];

#[derive(Clone)]
struct Trajectory {
    /// `[joint][coord]`
    base: Vec<[f64; 3]>,
    coeffs: Vec<[Coeffs; 3]>,
}

fn random_coeffs<R: Rng>(rng: &mut R, scale: f64) -> Coeffs {
    let mut c = [(0.0, 0.0); HARMONICS];
    for (h, slot) in c.iter_mut().enumerate() {
        let s = scale / (h + 1) as f64;
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        *slot = (a * s, b * s);
    }
    c
}

fn mix(a: &Coeffs, b: &Coeffs, wa: f64, wb: f64) -> Coeffs {
    let mut out = [(0.0, 0.0); HARMONICS];
    for h in 0..HARMONICS {
        out[h] = (wa * a[h].0 + wb * b[h].0, wa * a[h].1 + wb * b[h].1);
    }
    out
}

fn class_prototypes(cfg: &SynthConfig) -> Vec<Trajectory> {
    let mut rng = stream_rng(cfg.seed, 0, 0);
    let rest: Vec<[f64; 3]> = (0..cfg.joints)
        .map(|_| [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)])
        .collect();
    let families = cfg.num_classes.div_ceil(2);
    let family_motion: Vec<Vec<[Coeffs; 3]>> = (0..families)
        .map(|_| {
            (0..cfg.joints)
                .map(|_| [0; 3].map(|_| random_coeffs(&mut rng, 0.25)))
                .collect()
        })
        .collect();
    let w = cfg.sensor_specificity;
    let shared = (1.0 - w * w).sqrt();
    (0..cfg.num_classes)
        .map(|c| {
            let base = rest
                .iter()
                .map(|r| r.map(|v| v + 0.05 * rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let coeffs = (0..cfg.joints)
                .map(|j| {
                    let own = [0; 3].map(|_| random_coeffs(&mut rng, 0.25));
                    if cfg.sensor_joints.contains(&j) {
                        let fam = &family_motion[c / 2][j];
                        [0, 1, 2].map(|k| mix(&fam[k], &own[k], shared, w))
                    } else {
                        own
                    }
                })
                .collect();
            Trajectory { base, coeffs }
        })
        .collect()
}

#[derive(Clone, Copy)]
struct Style {
    amplitude: f64,
    speed: f64,
    offset: f64,
}

/// A recording of `proto`: trial deviation plus style.
fn realize<R: Rng>(proto: &Trajectory, spread: f64, rng: &mut R) -> Trajectory {
    let jitter = Normal::new(0.0, 1.0).unwrap();
    let base = proto
        .base
        .iter()
        .map(|b| b.map(|v| v + 0.03 * jitter.sample(rng)))
        .collect();
    let coeffs = proto
        .coeffs
        .iter()
        .map(|jc| {
            jc.map(|c| {
                let mut out = c;
                for (h, slot) in out.iter_mut().enumerate() {
                    let s = spread * 0.25 / (h + 1) as f64;
                    slot.0 += s * jitter.sample(rng);
                    slot.1 += s * jitter.sample(rng);
                }
                out
            })
        })
        .collect();
    Trajectory { base, coeffs }
}

impl Trajectory {
    /// Position of joint `j`, coordinate `k` at clip time `t` (1.0 = one clip).
    fn position(&self, style: &Style, j: usize, k: usize, t: f64) -> f64 {
        let tau = style.speed * (t + style.offset);
        let mut v = self.base[j][k];
        for (h, &(a, b)) in self.coeffs[j][k].iter().enumerate() {
            let w = 2.0 * PI * (h + 1) as f64;
            v += style.amplitude * (a * (w * tau).sin() + b * (w * tau).cos());
        }
        v
    }

    /// Second time derivative, scaled by `1 / (2 pi)^2`.
    fn acceleration(&self, style: &Style, j: usize, k: usize, t: f64) -> f64 {
        let tau = style.speed * (t + style.offset);
        let mut v = 0.0;
        for (h, &(a, b)) in self.coeffs[j][k].iter().enumerate() {
            let hf = (h + 1) as f64;
            let w = 2.0 * PI * hf;
            let gain = (hf * style.speed).powi(2);
            v -= style.amplitude * gain * (a * (w * tau).sin() + b * (w * tau).cos());
        }
        v
    }
}

fn rotation<R: Rng>(rng: &mut R, max_deg: f64) -> [[f64; 3]; 3] {
    let axis: [f64; 3] = [0; 3].map(|_| rng.sample(StandardNormal));
    let norm = axis.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let [x, y, z] = axis.map(|v| v / norm);
    let angle = rng.random_range(-1.0..=1.0) * max_deg.to_radians();
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

struct Subject {
    amplitude: f64,
    speed: f64,
    sensor_frames: Vec<[[f64; 3]; 3]>,
}

fn random_style<R: Rng>(rng: &mut R, amplitude: f64, speed: f64, max_offset: f64) -> Style {
    Style { amplitude, speed, offset: rng.random_range(0.0..=max_offset) }
}

fn joint_colour(j: usize, joints: usize) -> [f64; 3] {
    let hue = j as f64 / joints as f64;
    [0.0, 1.0 / 3.0, 2.0 / 3.0].map(|phase| 0.5 + 0.5 * (2.0 * PI * (hue + phase)).cos())
}

/// Generates the recordings in memory; write them with
/// [`super::write_manifest`].
pub fn synth_generate(cfg: &SynthConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let protos = class_prototypes(cfg);
    let subjects: Vec<Subject> = (1..=cfg.subjects)
        .map(|s| {
            let mut r = stream_rng(cfg.seed, 1, s as u64);
            Subject {
                amplitude: r.random_range(0.8..1.2),
                speed: r.random_range(0.9..1.1),
                sensor_frames: cfg
                    .sensor_joints
                    .iter()
                    .map(|_| rotation(&mut r, cfg.max_sensor_rotation_deg))
                    .collect(),
            }
        })
        .collect();

    let frames = cfg.recorded_frames();
    let max_offset = cfg.extra_frames as f64 / cfg.frames as f64;
    let n_inertial = frames * cfg.inertial_per_frame;
    let rho = cfg.correlation;
    let g = cfg.video_size;
    let palette: Vec<[f64; 3]> = (0..cfg.joints).map(|j| joint_colour(j, cfg.joints)).collect();
    let skeleton_names: Vec<String> = (0..cfg.joints * 3)
        .map(|c| format!("j{}{}", c / 3 + 1, ['x', 'y', 'z'][c % 3]))
        .collect();

    let mut samples = Vec::new();
    let mut index = 0u64;
    for c in 0..cfg.num_classes {
        for (si, subj) in subjects.iter().enumerate() {
            for t in 1..=cfg.trials {
                index += 1;
                let mut r_trial = stream_rng(cfg.seed, 2, index);
                let latent = realize(&protos[c], cfg.trial_spread, &mut r_trial);
                let style = random_style(&mut r_trial, subj.amplitude, subj.speed, max_offset);

                // Nuisance: independent recording of the same class by an
                // anonymous performer, plus extractor jitter.
                let mut r_nuis = stream_rng(cfg.seed, 3, index);
                let nuisance = realize(&protos[c], cfg.trial_spread, &mut r_nuis);
                let amp = r_nuis.random_range(0.8..1.2);
                let speed = r_nuis.random_range(0.9..1.1);
                let n_style = random_style(&mut r_nuis, amp, speed, max_offset);

                let mut skeleton = vec![vec![0f32; frames]; cfg.joints * 3];
                for f in 0..frames {
                    let time = f as f64 / cfg.frames as f64;
                    for j in 0..cfg.joints {
                        for k in 0..3 {
                            let l = latent.position(&style, j, k, time);
                            let n = nuisance.position(&n_style, j, k, time)
                                + 0.01 * r_nuis.sample::<f64, _>(StandardNormal);
                            skeleton[j * 3 + k][f] = (rho * l + (1.0 - rho) * n) as f32;
                        }
                    }
                }

                let mut r_noise = stream_rng(cfg.seed, 5, index);
                let mut inertial = vec![vec![0f32; n_inertial]; cfg.inertial_channels()];
                for i in 0..n_inertial {
                    let time = i as f64 / (cfg.frames * cfg.inertial_per_frame) as f64;
                    for (s, &j) in cfg.sensor_joints.iter().enumerate() {
                        let acc = [0, 1, 2].map(|k| latent.acceleration(&style, j, k, time));
                        let rot = &subj.sensor_frames[s];
                        for a in 0..3 {
                            let v = rot[a][0] * acc[0] + rot[a][1] * acc[1] + rot[a][2] * acc[2];
                            let noise = cfg.noise * r_noise.sample::<f64, _>(StandardNormal);
                            inertial[s * 3 + a][i] = (v + noise) as f32;
                        }
                    }
                }

                let mut payloads = BTreeMap::new();
                if cfg.with_video {
                    let mut r_vid = stream_rng(cfg.seed, 4, index);
                    payloads.insert(Modality::Video, Payload::Clip(render_video(&skeleton, cfg, &palette, &mut r_vid)?));
                }
                payloads.insert(Modality::Inertial, Payload::Window(SignalWindow::from_triaxial(inertial)?));
                payloads.insert(
                    Modality::Skeleton,
                    Payload::Window(SignalWindow::new(
                        skeleton_names.clone(),
                        vec![0; cfg.joints * 3],
                        skeleton,
                    )?),
                );
                samples.push(MultimodalSample {
                    sample_id: format!("a{}_s{}_t{t}", c + 1, si + 1),
                    subject: si as u32 + 1,
                    action_class: c,
                    trial: t,
                    payloads,
                });
            }
        }
    }
    Ok(DatasetManifest {
        root: PathBuf::new(),
        num_classes: cfg.num_classes,
        modalities: ModalityDescriptors {
            inertial: Some(InertialDescriptor::triaxial(cfg.sensor_joints.len(), FPS * cfg.inertial_per_frame as f64)),
            skeleton: Some(SkeletonDescriptor { joints: cfg.joints, fps: FPS }),
            video: cfg.with_video.then_some(VideoDescriptor { height: g, width: g, fps: FPS }),
        },
        samples,
    })
}

fn render_video<R: Rng>(skeleton: &[Vec<f32>], cfg: &SynthConfig, palette: &[[f64; 3]], rng: &mut R) -> Result<Tensor> {
    let g = cfg.video_size;
    let frames = skeleton[0].len();
    let to_px = |v: f64| (v + 1.2) / 2.4 * g as f64 - 0.5;
    let clutter: Vec<(f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.0..g as f64),
                rng.random_range(0.0..g as f64),
                [0; 3].map(|_| rng.random_range(0.0..0.6)),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(frames * g * g * 3);
    for f in 0..frames {
        for y in 0..g {
            for x in 0..g {
                let mut px = [0.0f64; 3];
                for &(cx, cy, col) in &clutter {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    let w = (-d2 / (2.0 * 1.5 * 1.5)).exp();
                    for ch in 0..3 {
                        px[ch] += w * col[ch];
                    }
                }
                for (j, col) in palette.iter().enumerate() {
                    let jx = to_px(skeleton[j * 3][f] as f64);
                    let jy = to_px(skeleton[j * 3 + 1][f] as f64);
                    let d2 = (x as f64 - jx).powi(2) + (y as f64 - jy).powi(2);
                    let w = (-d2 / (2.0 * 0.7 * 0.7)).exp();
                    for ch in 0..3 {
                        px[ch] += w * col[ch];
                    }
                }
                for v in px {
                    let noisy = v + 0.03 * rng.sample::<f64, _>(StandardNormal);
                    out.push(noisy.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    Tensor::new(vec![frames, g, g, 3], out)
}
