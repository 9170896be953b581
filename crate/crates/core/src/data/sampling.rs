use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::clip::{RawVideo, VideoClip};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingPolicy {
    pub f_sel: usize,
    pub stride: usize,
    pub train_random_start: bool,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self {
            f_sel: 64,
            stride: 2,
            train_random_start: false,
        }
    }
}

impl SamplingPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.f_sel == 0 || self.stride == 0 {
            return Err(Error::InvalidConfig(
                "f_sel and stride must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Frames spanned by a full strided window.
    pub fn span(&self) -> usize {
        (self.f_sel - 1) * self.stride + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameSelection {
    pub indices: Vec<usize>,
    /// Mean-frame slots appended after the real frames.
    pub pad: usize,
}

/// Picks the strided window for a video of `total` frames. In training mode
/// the start is drawn uniformly from the valid range using `seed`; otherwise
/// it is 0.
pub fn sample_frames(total: usize, policy: &SamplingPolicy, seed: u64) -> Result<FrameSelection> {
    policy.validate()?;
    if total == 0 {
        return Err(Error::EmptyVideo);
    }
    let start = if policy.train_random_start && total >= policy.span() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.random_range(0..=total - policy.span())
    } else {
        0
    };
    sample_frames_from(total, policy, start)
}

/// Like [`sample_frames`] with an explicit start index.
pub fn sample_frames_from(
    total: usize,
    policy: &SamplingPolicy,
    start: usize,
) -> Result<FrameSelection> {
    policy.validate()?;
    if total == 0 {
        return Err(Error::EmptyVideo);
    }
    if total >= policy.span() {
        if start > total - policy.span() {
            return Err(Error::InvalidConfig(format!(
                "start {start} leaves fewer than {} frames",
                policy.span()
            )));
        }
        let indices = (0..policy.f_sel)
            .map(|j| start + j * policy.stride)
            .collect();
        return Ok(FrameSelection { indices, pad: 0 });
    }
    let indices: Vec<usize> = (0..total).step_by(policy.stride).collect();
    let pad = policy.f_sel - indices.len();
    Ok(FrameSelection { indices, pad })
}

/// Gathers the selected frames into a clip, filling padded slots with the
/// pixelwise mean of the real selected frames.
pub fn assemble_clip(
    video: &RawVideo,
    selection: &FrameSelection,
    source_id: &str,
) -> Result<VideoClip> {
    let plane = video.height * video.width;
    let n_real = selection.indices.len();
    let n = n_real + selection.pad;
    let mut data = Vec::with_capacity(n * plane);
    for &i in &selection.indices {
        if i >= video.frames {
            return Err(Error::ShapeMismatch(format!(
                "frame {i} of a {}-frame video",
                video.frames
            )));
        }
        data.extend(video.frame(i).iter().map(|&v| v as f64));
    }
    if selection.pad > 0 {
        let mut mean = vec![0.0; plane];
        for f in data.chunks(plane) {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n_real as f64);
        for _ in 0..selection.pad {
            data.extend_from_slice(&mean);
        }
    }
    let frames = Tensor::new(vec![1, n, video.height, video.width], data)?;
    Ok(VideoClip {
        frames,
        source_id: source_id.to_string(),
        source_frames: video.frames,
        padded: selection.pad,
    })
}
