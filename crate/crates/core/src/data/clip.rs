//! Frame stacks and the raw clip file format.
//!
//! A raw clip is the 7-byte magic `E3CLIP\0`, then little-endian `u32`
//! frame count, height and width, then `frames * height * width`
//! little-endian `f32` intensities, row-major per frame.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"E3CLIP\0";

/// An undecoded video: every frame, intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawVideo {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RawVideo {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if frames * height * width != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{frames}x{height}x{width} video with {} values",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::FormatError(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    /// Scales 8-bit pixels into `[0, 1]`.
    pub fn from_u8(frames: usize, height: usize, width: usize, pixels: &[u8]) -> Result<Self> {
        Self::new(
            frames,
            height,
            width,
            pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        )
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[i * plane..(i + 1) * plane]
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        for d in [self.frames, self.height, self.width] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * self.data.len());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::FormatError("not a raw clip (bad magic)".into()));
        }
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let n = dims[0] * dims[1] * dims[2];
        let mut bytes = Vec::with_capacity(4 * n);
        r.read_to_end(&mut bytes)?;
        if bytes.len() != 4 * n {
            return Err(Error::FormatError(format!(
                "expected {} payload bytes, found {}",
                4 * n,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::new(dims[0], dims[1], dims[2], data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

/// A sampled, fixed-length, single-channel clip `[1, F_sel, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor,
    pub source_id: String,
    /// Frame count of the source video.
    pub source_frames: usize,
    /// Number of mean-filled slots at the end.
    pub padded: usize,
}

impl VideoClip {
    pub fn frame_count(&self) -> usize {
        self.frames.shape()[1]
    }
}

/// Stacks clips into a `[B, 1, F, H, W]` batch.
pub fn stack_clips(clips: &[&VideoClip]) -> Result<Tensor> {
    let first = clips
        .first()
        .ok_or_else(|| Error::ShapeMismatch("empty batch".into()))?;
    let shape = first.frames.shape().to_vec();
    let mut data = Vec::with_capacity(clips.len() * first.frames.len());
    for c in clips {
        if c.frames.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "clip {:?} in a batch of {:?}",
                c.frames.shape(),
                shape
            )));
        }
        data.extend_from_slice(c.frames.data());
    }
    let mut full = vec![clips.len()];
    full.extend(shape);
    Tensor::new(full, data)
}
