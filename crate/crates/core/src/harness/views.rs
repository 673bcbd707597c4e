//! Test-time views: two temporal clips from the halves of a video, three
//! spatial crops along the long side of each.

use serde::{Deserialize, Serialize};

use super::sampling::{uniform_sample, SamplingSpec};
use crate::error::{Error, Result};
use crate::heads::{ensemble_average, PredictionScores};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewSpec {
    #[serde(default = "two")]
    pub clips_per_video: usize,
    #[serde(default = "three")]
    pub crops_per_frame: usize,
    /// Crop side after the short side is resized to it.
    pub side: usize,
}

fn two() -> usize {
    2
}

fn three() -> usize {
    3
}

impl ViewSpec {
    pub fn new(side: usize) -> Self {
        Self {
            clips_per_video: 2,
            crops_per_frame: 3,
            side,
        }
    }

    pub fn total(&self) -> usize {
        self.clips_per_video * self.crops_per_frame
    }

    pub fn validate(&self) -> Result<()> {
        if self.clips_per_video != 2 || self.crops_per_frame != 3 {
            return Err(Error::Config(format!(
                "views: the protocol is 2 clips × 3 crops, got {} × {}",
                self.clips_per_video, self.crops_per_frame
            )));
        }
        if self.side == 0 {
            return Err(Error::Config("views: side must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub clip: usize,
    pub crop: usize,
    /// `[T, C, side, side]`.
    pub frames: Tensor,
}

fn frame_dims(frame: &Tensor) -> Result<(usize, usize, usize)> {
    match *frame.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected a [C×H×W] frame".into(),
        }),
    }
}

/// Bilinear resampling with half-pixel centres and edge clamping. Same-size
/// requests return the input unchanged.
pub fn resize_bilinear(frame: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = frame_dims(frame)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize: empty target"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(frame.clone());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
                    .clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let (rows, cols) = (taps(h, out_h), taps(w, out_w));
    let src = frame.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(r0, r1, fr) in &rows {
            for &(c0, c1, fc) in &cols {
                let top = plane[r0 * w + c0] * (1.0 - fc) + plane[r0 * w + c1] * fc;
                let bottom = plane[r1 * w + c0] * (1.0 - fc) + plane[r1 * w + c1] * fc;
                out.push(top * (1.0 - fr) + bottom * fr);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Resized frame extents and the three crop origins `(row, col)`.
fn crop_layout(h: usize, w: usize, side: usize) -> ((usize, usize), [(usize, usize); 3]) {
    let (rh, rw) = if w >= h {
        (side, ((w * side) as f64 / h as f64).round() as usize)
    } else {
        (((h * side) as f64 / w as f64).round() as usize, side)
    };
    let spread = |long: usize| [0, (long - side) / 2, long - side];
    let origins = if rw >= rh {
        spread(rw).map(|x| (0, x))
    } else {
        spread(rh).map(|y| (y, 0))
    };
    ((rh, rw), origins)
}

fn crop(frame: &Tensor, row: usize, col: usize, side: usize) -> Tensor {
    let (c, _, w) = frame_dims(frame).expect("checked frame");
    let src = frame.data();
    let h = frame.shape()[1];
    let mut out = Vec::with_capacity(c * side * side);
    for ch in 0..c {
        for r in row..row + side {
            let start = ch * h * w + r * w + col;
            out.extend_from_slice(&src[start..start + side]);
        }
    }
    Tensor::from_parts(vec![c, side, side], out)
}

/// Left/centre/right crops for landscape frames, top/centre/bottom for
/// portrait, after resizing the short side to `side`.
pub fn three_crops(frame: &Tensor, side: usize) -> Result<[Tensor; 3]> {
    let (_, h, w) = frame_dims(frame)?;
    if side == 0 || side > h.min(w) {
        return Err(Error::invalid(format!(
            "three_crops: side {side} does not fit a {h}x{w} frame"
        )));
    }
    let ((rh, rw), origins) = crop_layout(h, w, side);
    let resized = resize_bilinear(frame, rh, rw)?;
    Ok(origins.map(|(r, c)| crop(&resized, r, c, side)))
}

fn video_dims(video: &Tensor) -> Result<[usize; 4]> {
    match *video.shape() {
        [l, c, h, w] => Ok([l, c, h, w]),
        ref s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected a [L×C×H×W] video".into(),
        }),
    }
}

/// Stacks the selected frames into `[n, C, H, W]`.
pub fn select_frames(video: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let [l, c, h, w] = video_dims(video)?;
    let per = c * h * w;
    let mut data = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        if i >= l {
            return Err(Error::invalid(format!(
                "frame index {i} outside a {l}-frame video"
            )));
        }
        data.extend_from_slice(&video.data()[i * per..(i + 1) * per]);
    }
    Tensor::new(vec![indices.len(), c, h, w], data)
}

/// Applies [`three_crops`] to every frame of a clip; crop `k` of the result
/// is the clip `[T, C, side, side]` seen through crop `k`.
pub fn crop_clip(clip: &Tensor, side: usize) -> Result<[Tensor; 3]> {
    let [t, c, h, w] = video_dims(clip)?;
    let per = c * h * w;
    let mut parts: [Vec<f64>; 3] = Default::default();
    for f in 0..t {
        let frame = Tensor::new(vec![c, h, w], clip.data()[f * per..(f + 1) * per].to_vec())?;
        for (k, view) in three_crops(&frame, side)?.iter().enumerate() {
            parts[k].extend_from_slice(view.data());
        }
    }
    let shape = vec![t, c, side, side];
    Ok(parts.map(|d| Tensor::from_parts(shape.clone(), d)))
}

/// Frame ranges of the two test clips: the first and second half of the
/// video. Videos shorter than two frames use the whole video for both.
pub fn clip_ranges(len: usize) -> [(usize, usize); 2] {
    let mid = len / 2;
    if mid == 0 {
        [(0, len), (0, len)]
    } else {
        [(0, mid), (mid, len)]
    }
}

/// Frame indices of each test clip, in clip order.
pub fn clip_indices(len: usize, frames: usize) -> Result<[Vec<usize>; 2]> {
    let [a, b] = clip_ranges(len);
    let pick = |(lo, hi): (usize, usize)| -> Result<Vec<usize>> {
        Ok(uniform_sample(hi - lo, frames)?
            .into_iter()
            .map(|i| lo + i)
            .collect())
    };
    Ok([pick(a)?, pick(b)?])
}

/// Clip-major list of views: clip 0 crops 0..3, then clip 1 crops 0..3.
pub fn generate_views(
    video: &Tensor,
    spec: &ViewSpec,
    sampling: &SamplingSpec,
) -> Result<Vec<View>> {
    spec.validate()?;
    sampling.validate()?;
    let [l, ..] = video_dims(video)?;
    if l == 0 {
        return Err(Error::invalid("generate_views: empty video"));
    }
    let mut views = Vec::with_capacity(spec.total());
    for (clip, idx) in clip_indices(l, sampling.frames)?.iter().enumerate() {
        let frames = select_frames(video, idx)?;
        for (crop, frames) in crop_clip(&frames, spec.side)?.into_iter().enumerate() {
            views.push(View { clip, crop, frames });
        }
    }
    Ok(views)
}

/// Video-level scores: the ensemble average over exactly `spec.total()`
/// views.
pub fn aggregate_views(scores: &[PredictionScores], spec: &ViewSpec) -> Result<PredictionScores> {
    if scores.len() != spec.total() {
        return Err(Error::invalid(format!(
            "aggregate_views: expected {} views, got {}",
            spec.total(),
            scores.len()
        )));
    }
    ensemble_average(scores)
}
