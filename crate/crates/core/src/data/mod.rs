//! Clip ingestion, frame sampling and the synthetic phantom generator.

pub mod clip;
pub mod dataset;
pub mod echonet;
pub mod sampling;
pub mod synth;

use serde::{Deserialize, Serialize};

pub use clip::{stack_clips, RawVideo, VideoClip};
pub use dataset::{
    load_dataset, synthetic_dataset, write_dataset, write_synthetic, Sample, SyntheticManifest,
    SyntheticRecord, SyntheticSpec,
};
pub use echonet::{
    load_echonet_index, load_tracings, read_all_tracings, write_tracings, EchonetIndex, IndexEntry,
    Split, Tracing,
};
pub use sampling::{
    assemble_clip, sample_frames, sample_frames_from, FrameSelection, SamplingPolicy,
};
pub use synth::{synth_clip, synth_video, SynthParams};

use crate::error::{Error, Result};
use crate::geometry::ChordSet;

/// Reference annotations for one study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyLabel {
    pub ef: f64,
    pub edv: Option<f64>,
    pub esv: Option<f64>,
    pub ed_chords: ChordSet,
    pub es_chords: ChordSet,
    pub ed_frame: usize,
    pub es_frame: usize,
}

impl StudyLabel {
    pub fn validate(&self, landmarks: usize) -> Result<()> {
        if !(self.ef.is_finite() && self.ef > 0.0 && self.ef < 100.0) {
            return Err(Error::LabelError(format!(
                "EF {} outside (0, 100)",
                self.ef
            )));
        }
        for set in [&self.ed_chords, &self.es_chords] {
            if set.len() != landmarks {
                return Err(Error::LabelError(format!(
                    "{} chords, expected {landmarks}",
                    set.len()
                )));
            }
        }
        Ok(())
    }
}

/// Mixes a base seed with a stream index so each sample gets its own
/// reproducible random stream regardless of processing order.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(index))
}
