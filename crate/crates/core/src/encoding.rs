//! Fixed-size network inputs from raw inertial windows, skeleton sequences
//! and video clips.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HalluxError, Result};
use crate::tensor::Tensor;

/// Synchronized 1-D series, one per channel, all the same length.
///
/// `groups[c]` names the sensor a channel belongs to (accelerometer,
/// gyroscope, ...); per-sensor normalization works within a group.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalWindow {
    names: Vec<String>,
    groups: Vec<usize>,
    series: Vec<Vec<f32>>,
}

impl SignalWindow {
    pub fn new(names: Vec<String>, groups: Vec<usize>, series: Vec<Vec<f32>>) -> Result<Self> {
        if series.is_empty() {
            return Err(HalluxError::InvalidArgument("window has no channels".into()));
        }
        if names.len() != series.len() || groups.len() != series.len() {
            return Err(HalluxError::InvalidArgument(format!(
                "{} channels but {} names and {} group ids",
                series.len(),
                names.len(),
                groups.len()
            )));
        }
        let len = series[0].len();
        if let Some((c, s)) = series.iter().enumerate().find(|(_, s)| s.len() != len) {
            return Err(HalluxError::InvalidArgument(format!(
                "channel {c} has {} samples, channel 0 has {len}",
                s.len()
            )));
        }
        if let Some(c) = series.iter().position(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(HalluxError::InvalidArgument(format!("channel {c} has non-finite values")));
        }
        Ok(Self { names, groups, series })
    }

    /// Channels grouped in consecutive triples (x, y, z per sensor).
    pub fn from_triaxial(series: Vec<Vec<f32>>) -> Result<Self> {
        let names = (0..series.len())
            .map(|c| format!("s{}{}", c / 3, ['x', 'y', 'z'][c % 3]))
            .collect();
        let groups = (0..series.len()).map(|c| c / 3).collect();
        Self::new(names, groups, series)
    }

    pub fn num_channels(&self) -> usize {
        self.series.len()
    }

    pub fn len(&self) -> usize {
        self.series[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.series[c]
    }

    pub fn series(&self) -> &[Vec<f32>] {
        &self.series
    }

    fn with_series(&self, series: Vec<Vec<f32>>) -> Self {
        Self {
            names: self.names.clone(),
            groups: self.groups.clone(),
            series,
        }
    }
}

/// Channel order in which every unordered channel pair is adjacent at least
/// once. Indices are 0-based; see [`build_channel_sequence`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelArrangement {
    pub num_channels: usize,
    pub sequence: Vec<usize>,
}

impl ChannelArrangement {
    /// 1-based view, as usually written down.
    pub fn one_based(&self) -> Vec<usize> {
        self.sequence.iter().map(|&c| c + 1).collect()
    }

    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }
}

/// Chains of stride `d = 1..n-1`: for each start `s < min(d, n - d)` emit
/// `s, s+d, s+2d, ...`. Every pair `(i, i+d)` is adjacent in the stride-`d`
/// chains, so all pairs are covered.
pub fn build_channel_sequence(num_channels: usize) -> Result<ChannelArrangement> {
    if num_channels < 2 {
        return Err(HalluxError::InvalidArgument(format!(
            "channel arrangement needs at least 2 channels, got {num_channels}"
        )));
    }
    let n = num_channels;
    let mut sequence = Vec::new();
    for d in 1..n {
        for s in 0..d.min(n - d) {
            sequence.extend((s..n).step_by(d));
        }
    }
    Ok(ChannelArrangement { num_channels: n, sequence })
}

/// Where a crop starts, or how many leading pad copies to insert.
fn crop_or_pad_series(series: &[f32], target_len: usize, offset: usize) -> Vec<f32> {
    let len = series.len();
    if len >= target_len {
        series[offset..offset + target_len].to_vec()
    } else {
        let deficit = target_len - len;
        let mut out = Vec::with_capacity(target_len);
        out.extend(std::iter::repeat_n(series[0], offset));
        out.extend_from_slice(series);
        out.extend(std::iter::repeat_n(series[len - 1], deficit - offset));
        out
    }
}

/// Valid range of `offset` for [`crop_or_pad_at`]: `0..=max`.
pub fn crop_or_pad_max_offset(len: usize, target_len: usize) -> usize {
    len.abs_diff(target_len)
}

/// Deterministic crop/pad. For a longer window `offset` is the crop start;
/// for a shorter one it is the number of copies of the first sample put in
/// front (the remainder of the deficit repeats the last sample).
pub fn crop_or_pad_at(window: &SignalWindow, target_len: usize, offset: usize) -> Result<SignalWindow> {
    check_crop_args(window.len(), target_len)?;
    let max = crop_or_pad_max_offset(window.len(), target_len);
    if offset > max {
        return Err(HalluxError::InvalidArgument(format!(
            "offset {offset} outside 0..={max} for length {} -> {target_len}",
            window.len()
        )));
    }
    let series = window
        .series
        .iter()
        .map(|s| crop_or_pad_series(s, target_len, offset))
        .collect();
    Ok(window.with_series(series))
}

fn check_crop_args(len: usize, target_len: usize) -> Result<()> {
    if len == 0 {
        return Err(HalluxError::InvalidArgument("cannot crop or pad an empty window".into()));
    }
    if target_len == 0 {
        return Err(HalluxError::InvalidArgument("target length must be at least 1".into()));
    }
    Ok(())
}

/// Random contiguous crop if longer than `target_len`; otherwise pad with
/// first/last-sample copies split at a uniformly random point.
pub fn crop_or_pad_window<R: Rng + ?Sized>(
    window: &SignalWindow,
    target_len: usize,
    rng: &mut R,
) -> Result<SignalWindow> {
    check_crop_args(window.len(), target_len)?;
    let offset = rng.random_range(0..=crop_or_pad_max_offset(window.len(), target_len));
    crop_or_pad_at(window, target_len, offset)
}

/// Affine map of `[min, max]` onto `[-1, 1]`. Written as
/// `(2x - (max + min)) / (max - min)` so that already-normalized data maps
/// to itself exactly.
fn normalize_values(values: &mut [f32], lo: f32, hi: f32) {
    if hi > lo {
        let (lo, hi) = (lo as f64, hi as f64);
        for v in values {
            *v = ((2.0 * *v as f64 - (hi + lo)) / (hi - lo)) as f32;
        }
    } else {
        values.fill(0.0);
    }
}

/// Scale to `[-1, 1]` per sensor group (`per_sensor`) or over the whole
/// window. A constant group maps to zeros.
pub fn normalize_pm1(window: &SignalWindow, per_sensor: bool) -> SignalWindow {
    let mut series = window.series.clone();
    let group_of = |c: usize| if per_sensor { window.groups[c] } else { 0 };
    let mut ids: Vec<usize> = (0..series.len()).map(group_of).collect();
    ids.sort_unstable();
    ids.dedup();
    for g in ids {
        let members: Vec<usize> = (0..series.len()).filter(|&c| group_of(c) == g).collect();
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &c in &members {
            for &v in &series[c] {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        for &c in &members {
            normalize_values(&mut series[c], lo, hi);
        }
    }
    window.with_series(series)
}

/// Bilinear resize of a single-channel `[h, w]` image with half-pixel
/// centers and edge clamping. Equal sizes reproduce the input exactly.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    resize_bilinear_channels(src, h, w, 1, out_h, out_w)
}

/// Sample positions along one axis: `(left index, right index, weight of right)`.
fn axis_taps(n_in: usize, n_out: usize, offset: usize, n_scaled: usize) -> Vec<(usize, usize, f32)> {
    let scale = n_in as f64 / n_scaled as f64;
    (0..n_out)
        .map(|o| {
            let pos = ((o + offset) as f64 + 0.5) * scale - 0.5;
            let pos = pos.clamp(0.0, (n_in - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, (pos - i0 as f64) as f32)
        })
        .collect()
}

/// Resize `[h, w, c]` to `[scaled_h, scaled_w, c]` and return the window
/// `[oy..oy+out_h, ox..ox+out_w]` of the result, without materializing the
/// full resized image.
fn resize_crop(
    src: &[f32],
    (h, w, c): (usize, usize, usize),
    (scaled_h, scaled_w): (usize, usize),
    (oy, ox): (usize, usize),
    (out_h, out_w): (usize, usize),
    out: &mut Vec<f32>,
) {
    let ys = axis_taps(h, out_h, oy, scaled_h);
    let xs = axis_taps(w, out_w, ox, scaled_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
                let bottom = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
}

pub fn resize_bilinear_channels(src: &[f32], h: usize, w: usize, c: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(out_h * out_w * c);
    resize_crop(src, (h, w, c), (out_h, out_w), (0, 0), (out_h, out_w), &mut out);
    out
}

fn check_out_hw((h, w): (usize, usize)) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(HalluxError::InvalidArgument(format!("output size {h}x{w} is empty")));
    }
    Ok(())
}

fn rows_to_image(rows: Vec<&[f32]>, out_hw: (usize, usize)) -> Result<Tensor> {
    check_out_hw(out_hw)?;
    let h = rows.len();
    let w = rows[0].len();
    if w == 0 {
        return Err(HalluxError::InvalidArgument("cannot image an empty window".into()));
    }
    let flat: Vec<f32> = rows.concat();
    let img = resize_bilinear(&flat, h, w, out_hw.0, out_hw.1);
    Tensor::new(vec![out_hw.0, out_hw.1, 1], img)
}

/// Stack channels in arrangement order (one row each, time along columns)
/// and resize to `out_hw`. Output `[H, W, 1]`.
pub fn inertial_to_image(
    window: &SignalWindow,
    arrangement: &ChannelArrangement,
    out_hw: (usize, usize),
) -> Result<Tensor> {
    if let Some(&bad) = arrangement.sequence.iter().find(|&&c| c >= window.num_channels()) {
        return Err(HalluxError::InvalidArgument(format!(
            "arrangement refers to channel {} but the window has {}",
            bad + 1,
            window.num_channels()
        )));
    }
    if arrangement.is_empty() {
        return Err(HalluxError::InvalidArgument("empty channel arrangement".into()));
    }
    let rows = arrangement.sequence.iter().map(|&c| window.channel(c)).collect();
    rows_to_image(rows, out_hw)
}

/// Joint coordinates in extractor order as rows (`joints x 3`), frames as
/// columns, resized to `out_hw`. Output `[H, W, 1]`.
pub fn skeleton_to_image(joints: &SignalWindow, out_hw: (usize, usize)) -> Result<Tensor> {
    if joints.num_channels() % 3 != 0 {
        return Err(HalluxError::InvalidArgument(format!(
            "skeleton window has {} channels, not a multiple of 3",
            joints.num_channels()
        )));
    }
    rows_to_image(joints.series.iter().map(Vec::as_slice).collect(), out_hw)
}

/// Sizes for [`video_clip_preprocess`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoGeometry {
    pub clip_len: usize,
    pub short_side: usize,
    pub crop: usize,
}

impl Default for VideoGeometry {
    fn default() -> Self {
        Self { clip_len: 64, short_side: 256, crop: 224 }
    }
}

/// Temporal crop/pad to `clip_len` frames, resize so the shorter side is
/// `short_side` (aspect preserved), then a random (training) or centered
/// square crop. Input and output are `[T, H, W, 3]`.
pub fn video_clip_preprocess<R: Rng + ?Sized>(
    frames: &Tensor,
    geom: &VideoGeometry,
    train_mode: bool,
    rng: &mut R,
) -> Result<Tensor> {
    let shape = frames.shape();
    if shape.len() != 4 || shape[3] != 3 {
        return Err(HalluxError::InvalidArgument(format!(
            "video must be [T, H, W, 3], got {shape:?}"
        )));
    }
    if geom.clip_len == 0 || geom.crop == 0 || geom.short_side < geom.crop {
        return Err(HalluxError::InvalidArgument(format!("invalid video geometry {geom:?}")));
    }
    let (t, h, w) = (shape[0], shape[1], shape[2]);
    let (scaled_h, scaled_w) = if h <= w {
        (geom.short_side, ((w as f64 * geom.short_side as f64 / h as f64).round() as usize).max(geom.crop))
    } else {
        (((h as f64 * geom.short_side as f64 / w as f64).round() as usize).max(geom.crop), geom.short_side)
    };
    let max_t = crop_or_pad_max_offset(t, geom.clip_len);
    let (t_off, oy, ox) = if train_mode {
        (
            rng.random_range(0..=max_t),
            rng.random_range(0..=scaled_h - geom.crop),
            rng.random_range(0..=scaled_w - geom.crop),
        )
    } else {
        (max_t / 2, (scaled_h - geom.crop) / 2, (scaled_w - geom.crop) / 2)
    };
    let frame_len = h * w * 3;
    let frame_index: Vec<usize> = if t >= geom.clip_len {
        (t_off..t_off + geom.clip_len).collect()
    } else {
        let idx: Vec<usize> = (0..t).collect();
        let as_f32: Vec<f32> = idx.iter().map(|&i| i as f32).collect();
        crop_or_pad_series(&as_f32, geom.clip_len, t_off)
            .into_iter()
            .map(|v| v as usize)
            .collect()
    };
    let mut out = Vec::with_capacity(geom.clip_len * geom.crop * geom.crop * 3);
    for fi in frame_index {
        let src = &frames.data()[fi * frame_len..(fi + 1) * frame_len];
        resize_crop(src, (h, w, 3), (scaled_h, scaled_w), (oy, ox), (geom.crop, geom.crop), &mut out);
    }
    Tensor::new(vec![geom.clip_len, geom.crop, geom.crop, 3], out)
}

/// How a clip is collapsed before the 2-D backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "frames")]
pub enum TemporalReduction {
    /// Average over time: `[T, H, W, C] -> [H, W, C]`.
    Mean,
    /// `k` evenly spaced frames stacked on the channel axis: `[H, W, k*C]`.
    FrameStack(usize),
}

pub fn reduce_clip(clip: &Tensor, reduction: TemporalReduction) -> Result<Tensor> {
    let shape = clip.shape();
    if shape.len() != 4 {
        return Err(HalluxError::InvalidArgument(format!("clip must be [T, H, W, C], got {shape:?}")));
    }
    let (t, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let frame = h * w * c;
    match reduction {
        TemporalReduction::Mean => {
            let mut acc = vec![0.0f64; frame];
            for f in clip.data().chunks_exact(frame) {
                for (a, &v) in acc.iter_mut().zip(f) {
                    *a += v as f64;
                }
            }
            Tensor::new(vec![h, w, c], acc.into_iter().map(|v| (v / t as f64) as f32).collect())
        }
        TemporalReduction::FrameStack(k) => {
            if k == 0 || k > t {
                return Err(HalluxError::InvalidArgument(format!(
                    "cannot stack {k} frames from a {t}-frame clip"
                )));
            }
            let picks: Vec<usize> = (0..k).map(|i| (2 * i + 1) * t / (2 * k)).collect();
            let mut out = Vec::with_capacity(h * w * c * k);
            for px in 0..h * w {
                for &p in &picks {
                    let base = p * frame + px * c;
                    out.extend_from_slice(&clip.data()[base..base + c]);
                }
            }
            Tensor::new(vec![h, w, k * c], out)
        }
    }
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn window_strategy() -> impl Strategy<Value = SignalWindow> {
        (1usize..4, 1usize..120).prop_flat_map(|(sensors, len)| {
            proptest::collection::vec(proptest::collection::vec(-50.0f32..50.0, len), sensors * 3)
                .prop_map(|s| SignalWindow::from_triaxial(s).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn crop_or_pad_preserves_content(w in window_strategy(), target in 1usize..150, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = crop_or_pad_window(&w, target, &mut rng).unwrap();
            prop_assert_eq!(out.len(), target);
            for c in 0..w.num_channels() {
                let src = w.channel(c);
                let dst = out.channel(c);
                if src.len() >= target {
                    prop_assert!(src.windows(target).any(|s| s == dst));
                } else {
                    let lead = (0..=target - src.len()).find(|&p| &dst[p..p + src.len()] == src);
                    prop_assert!(lead.is_some(), "original not found contiguously");
                    let lead = lead.unwrap();
                    prop_assert!(dst[..lead].iter().all(|&v| v == src[0]));
                    prop_assert!(dst[lead + src.len()..].iter().all(|&v| v == src[src.len() - 1]));
                }
            }
        }

        #[test]
        fn normalization_bounds_and_idempotence(w in window_strategy(), per_sensor in any::<bool>()) {
            let n = normalize_pm1(&w, per_sensor);
            for s in n.series() {
                prop_assert!(s.iter().all(|&v| (-1.0..=1.0).contains(&v)));
            }
            let again = normalize_pm1(&n, per_sensor);
            for (a, b) in n.series().iter().zip(again.series()) {
                for (x, y) in a.iter().zip(b) {
                    prop_assert!((x - y).abs() <= 1e-6);
                }
            }
        }
    }
}
