//! Synthetic apical-view phantoms with exactly known chord labels.
//!
//! The cavity is a half-ellipse (apex at the top, widest at the base) inside
//! a bright wall. Over the cycle it scales isotropically about the base
//! centre, so stacked-disk volumes scale with the cube of the factor and the
//! end-systolic factor `(1 - EF/100)^(1/3)` hits the requested EF exactly.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::clip::{RawVideo, VideoClip};
use super::sampling::{assemble_clip, FrameSelection};
use super::StudyLabel;
use crate::error::{Error, Result};
use crate::geometry::{ef_surrogate, simpson_geometry, Chord, ChordSet, Phase};

const CAVITY: f64 = 0.05;
const WALL: f64 = 0.8;
const BACKGROUND: f64 = 0.25;
/// Long axis over half-width.
const ELONGATION: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    /// End-diastolic cavity area in square pixels.
    pub base_area: f64,
    pub ef_target: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise_level: f64,
    pub seed: u64,
    pub size: usize,
    pub frames: usize,
    /// Frames per cardiac cycle; must be even so ES lands on a frame.
    pub period: usize,
    pub landmarks: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self::for_size(112, 50.0, 0)
    }
}

impl SynthParams {
    /// Defaults scaled to a square frame of side `size`.
    pub fn for_size(size: usize, ef_target: f64, seed: u64) -> Self {
        Self {
            base_area: 0.085 * (size * size) as f64,
            ef_target,
            noise_level: 0.0,
            seed,
            size,
            frames: 32,
            period: 16,
            landmarks: 21,
        }
    }
}

/// Placement of the phantom at end-diastole.
struct Layout {
    base: [f64; 2],
    /// Unit vector from apex to base.
    axis: [f64; 2],
    perp: [f64; 2],
    length: f64,
    half_width: f64,
    wall: f64,
}

impl Layout {
    fn to_image(&self, w: f64, a: f64, s: f64) -> [f64; 2] {
        // `a` is measured from the base towards the apex.
        [
            self.base[0] + s * (w * self.perp[0] - a * self.axis[0]),
            self.base[1] + s * (w * self.perp[1] - a * self.axis[1]),
        ]
    }

    fn radius(&self, from_apex: f64, length: f64, half_width: f64) -> f64 {
        let u = (length - from_apex) / length;
        half_width * (1.0 - u * u).max(0.0).sqrt()
    }

    fn chords(&self, landmarks: usize, s: f64, phase: Phase) -> ChordSet {
        let chords = (1..=landmarks)
            .map(|i| {
                let from_apex = self.length * i as f64 / landmarks as f64;
                let r = self.radius(from_apex, self.length, self.half_width);
                let a = self.length - from_apex;
                let p1 = self.to_image(-r, a, s);
                let p2 = self.to_image(r, a, s);
                Chord::new(p1[0], p1[1], p2[0], p2[1])
            })
            .collect();
        ChordSet::new(phase, chords)
    }

    fn intensity(&self, x: f64, y: f64, s: f64) -> f64 {
        let dx = x - self.base[0];
        let dy = y - self.base[1];
        // Coordinates in the unscaled frame, apex direction positive.
        let a = -(dx * self.axis[0] + dy * self.axis[1]) / s;
        let w = (dx * self.perp[0] + dy * self.perp[1]) / s;
        if a < 0.0 {
            return BACKGROUND;
        }
        let wall = self.wall / s;
        let inside = |len: f64, hw: f64| a <= len && w.abs() <= self.radius(len - a, len, hw);
        if inside(self.length, self.half_width) {
            CAVITY
        } else if inside(self.length + wall, self.half_width + wall) {
            WALL
        } else {
            BACKGROUND
        }
    }
}

pub struct SynthVideo {
    pub video: RawVideo,
    pub label: StudyLabel,
}

fn validate(p: &SynthParams) -> Result<()> {
    if !(p.ef_target > 5.0 && p.ef_target < 85.0) {
        return Err(Error::GenerationError(format!(
            "ef_target {} outside (5, 85)",
            p.ef_target
        )));
    }
    if p.landmarks < 3 {
        return Err(Error::GenerationError(format!(
            "{} chords per phase, need at least 3",
            p.landmarks
        )));
    }
    if p.period < 2 || !p.period.is_multiple_of(2) || p.frames == 0 {
        return Err(Error::GenerationError(format!(
            "period {} must be even and at least 2, frames at least 1",
            p.period
        )));
    }
    if !(p.noise_level >= 0.0) || !(p.base_area > 0.0) {
        return Err(Error::GenerationError(
            "noise_level must be non-negative and base_area positive".into(),
        ));
    }
    Ok(())
}

/// Renders a full video and its labels.
pub fn synth_video(p: &SynthParams) -> Result<SynthVideo> {
    validate(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let size = p.size as f64;
    let half_width = (p.base_area / (0.5 * PI * ELONGATION)).sqrt();
    let theta: f64 = rng.random_range(-0.2..0.2);
    let jitter = 0.04 * size;
    let base = [
        0.5 * size + rng.random_range(-jitter..=jitter),
        0.78 * size + rng.random_range(-jitter..=jitter),
    ];
    let layout = Layout {
        base,
        axis: [-theta.sin(), theta.cos()],
        perp: [theta.cos(), theta.sin()],
        length: ELONGATION * half_width,
        half_width,
        wall: (0.05 * size).max(1.0),
    };
    let ed_phase = rng.random_range(0..p.period);

    let extent = [
        layout.to_image(0.0, layout.length + layout.wall, 1.0),
        layout.to_image(-(half_width + layout.wall), 0.0, 1.0),
        layout.to_image(half_width + layout.wall, 0.0, 1.0),
    ];
    let fits = extent
        .iter()
        .flatten()
        .all(|&v| v >= 0.0 && v <= size - 1.0);
    if !fits || half_width < 1.0 {
        return Err(Error::GenerationError(format!(
            "a cavity of area {} does not fit a {}-pixel frame",
            p.base_area, p.size
        )));
    }

    let s_es = (1.0 - p.ef_target / 100.0).cbrt();
    let scale = |t: usize| {
        let phase = 2.0 * PI * (t as f64 - ed_phase as f64) / p.period as f64;
        s_es + (1.0 - s_es) * 0.5 * (1.0 + phase.cos())
    };

    let noise =
        Normal::new(0.0, p.noise_level).map_err(|e| Error::GenerationError(e.to_string()))?;
    let plane = p.size * p.size;
    let mut data = Vec::with_capacity(p.frames * plane);
    for t in 0..p.frames {
        let s = scale(t);
        for y in 0..p.size {
            for x in 0..p.size {
                // 2x2 supersampling softens the edges.
                let mut v = 0.0;
                for (ox, oy) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
                    v += layout.intensity(x as f64 + ox, y as f64 + oy, s);
                }
                v *= 0.25;
                if p.noise_level > 0.0 {
                    v += noise.sample(&mut rng);
                }
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    let video = RawVideo::new(p.frames, p.size, p.size, data)?;

    let ed_chords = layout.chords(p.landmarks, 1.0, Phase::Ed);
    let es_chords = layout.chords(p.landmarks, s_es, Phase::Es);
    let ed = simpson_geometry(&ed_chords)?;
    let es = simpson_geometry(&es_chords)?;
    let ef = ef_surrogate(&ed, &es)?;
    let es_frame = (ed_phase + p.period / 2) % p.period;
    Ok(SynthVideo {
        video,
        label: StudyLabel {
            ef,
            edv: Some(ed.total_volume),
            esv: Some(es.total_volume),
            ed_chords,
            es_chords,
            ed_frame: ed_phase,
            es_frame,
        },
    })
}

/// A phantom clip holding every rendered frame.
pub fn synth_clip(p: &SynthParams) -> Result<(VideoClip, StudyLabel)> {
    let v = synth_video(p)?;
    let selection = FrameSelection {
        indices: (0..p.frames).collect(),
        pad: 0,
    };
    let clip = assemble_clip(&v.video, &selection, &format!("synth-{}", p.seed))?;
    Ok((clip, v.label))
}
