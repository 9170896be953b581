//! In-memory datasets and their on-disk EchoNet-style layout.
//!
//! A dataset directory holds `FileList.csv`, `VolumeTracings.csv` and one
//! raw clip per study under `Videos/<FileName>.e3clip`. Synthetic datasets
//! also carry `synthetic_manifest.json`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::clip::RawVideo;
use super::echonet::{
    clip_stem, load_echonet_index, read_all_tracings, write_echonet_index, write_tracings,
    IndexEntry, Split, Tracing,
};
use super::synth::{synth_video, SynthParams};
use super::{derive_seed, StudyLabel};
use crate::error::{Error, Result};

pub const FILELIST: &str = "FileList.csv";
pub const TRACINGS: &str = "VolumeTracings.csv";
pub const VIDEO_DIR: &str = "Videos";
pub const CLIP_EXT: &str = "e3clip";
pub const SYNTH_MANIFEST: &str = "synthetic_manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub video: RawVideo,
    pub label: StudyLabel,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub size: usize,
    pub frames: usize,
    pub period: usize,
    pub landmarks: usize,
    pub noise_level: f64,
    pub ef_min: f64,
    pub ef_max: f64,
    /// Relative spread of the end-diastolic cavity area.
    pub area_jitter: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train: 32,
            val: 0,
            test: 0,
            seed: 0,
            size: 112,
            frames: 32,
            period: 16,
            landmarks: 21,
            noise_level: 0.02,
            ef_min: 20.0,
            ef_max: 80.0,
            area_jitter: 0.15,
        }
    }
}

impl SyntheticSpec {
    /// Parameters of study `index`, drawn from its own seed stream.
    pub fn params(&self, index: usize) -> SynthParams {
        let seed = derive_seed(self.seed, index as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ef_target = rng.random_range(self.ef_min..=self.ef_max);
        let jitter = 1.0 + self.area_jitter * rng.random_range(-1.0..=1.0);
        let mut p = SynthParams::for_size(self.size, ef_target, seed);
        p.base_area *= jitter;
        p.noise_level = self.noise_level;
        p.frames = self.frames;
        p.period = self.period;
        p.landmarks = self.landmarks;
        p
    }

    fn split_of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else if index < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// One line of the synthetic manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRecord {
    pub id: String,
    pub seed: u64,
    pub split: Split,
    pub ef_target: f64,
    pub label: StudyLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticManifest {
    pub spec: SyntheticSpec,
    pub samples: Vec<SyntheticRecord>,
}

pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    synthetic_records(spec).map(|(samples, _)| samples)
}

fn synthetic_records(spec: &SyntheticSpec) -> Result<(Vec<Sample>, SyntheticManifest)> {
    if !(spec.ef_min > 5.0 && spec.ef_max < 85.0 && spec.ef_min <= spec.ef_max) {
        return Err(Error::GenerationError(format!(
            "EF range [{}, {}] must lie inside (5, 85)",
            spec.ef_min, spec.ef_max
        )));
    }
    let n = spec.train + spec.val + spec.test;
    let mut samples = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let p = spec.params(i);
        let v = synth_video(&p)?;
        let id = format!("SYN{i:05}");
        records.push(SyntheticRecord {
            id: id.clone(),
            seed: p.seed,
            split: spec.split_of(i),
            ef_target: p.ef_target,
            label: v.label.clone(),
        });
        samples.push(Sample {
            id,
            video: v.video,
            label: v.label,
            split: spec.split_of(i),
        });
    }
    let manifest = SyntheticManifest {
        spec: spec.clone(),
        samples: records,
    };
    Ok((samples, manifest))
}

/// Writes samples in the EchoNet-style directory layout.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir.join(VIDEO_DIR))?;
    let entries: Vec<IndexEntry> = samples
        .iter()
        .map(|s| IndexEntry {
            file_name: s.id.clone(),
            ef: s.label.ef,
            esv: s.label.esv,
            edv: s.label.edv,
            frame_height: s.video.height,
            frame_width: s.video.width,
            fps: 50.0,
            number_of_frames: s.video.frames,
            split: s.split,
        })
        .collect();
    let mut index = Vec::new();
    write_echonet_index(&mut index, &entries)?;
    fs::write(dir.join(FILELIST), index)?;

    let tracings: Vec<(String, Tracing)> = samples
        .iter()
        .map(|s| {
            (
                s.id.clone(),
                Tracing {
                    ed: s.label.ed_chords.clone(),
                    es: s.label.es_chords.clone(),
                    ed_frame: s.label.ed_frame,
                    es_frame: s.label.es_frame,
                },
            )
        })
        .collect();
    let mut buf = Vec::new();
    write_tracings(&mut buf, tracings.iter().map(|(id, t)| (id.as_str(), t)))?;
    fs::write(dir.join(TRACINGS), buf)?;

    for s in samples {
        s.video
            .save(&dir.join(VIDEO_DIR).join(format!("{}.{CLIP_EXT}", s.id)))?;
    }
    Ok(())
}

/// Generates a synthetic dataset and writes it, manifest included.
pub fn write_synthetic(dir: &Path, spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    let (samples, manifest) = synthetic_records(spec)?;
    write_dataset(dir, &samples)?;
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::FormatError(e.to_string()))?;
    fs::write(dir.join(SYNTH_MANIFEST), text)?;
    Ok(samples)
}

/// Loads one split of a dataset directory.
pub fn load_dataset(dir: &Path, split: Split, landmarks: usize) -> Result<Vec<Sample>> {
    let index = load_echonet_index(&dir.join(FILELIST))?;
    let file = fs::File::open(dir.join(TRACINGS))
        .map_err(|e| Error::Io(format!("{}: {e}", dir.join(TRACINGS).display())))?;
    let tracings: HashMap<String, Tracing> = read_all_tracings(file, Some(landmarks))?
        .into_iter()
        .collect();
    index
        .split(split)
        .iter()
        .map(|e| {
            let id = clip_stem(&e.file_name).to_string();
            let t = tracings
                .get(&id)
                .ok_or_else(|| Error::LabelError(format!("no tracings for {id}")))?;
            let video = RawVideo::load(&dir.join(VIDEO_DIR).join(format!("{id}.{CLIP_EXT}")))?;
            let label = StudyLabel {
                ef: e.ef,
                edv: e.edv,
                esv: e.esv,
                ed_chords: t.ed.clone(),
                es_chords: t.es.clone(),
                ed_frame: t.ed_frame,
                es_frame: t.es_frame,
            };
            label.validate(landmarks)?;
            Ok(Sample {
                id,
                video,
                label,
                split,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            train: 3,
            val: 1,
            test: 1,
            size: 32,
            frames: 8,
            period: 8,
            landmarks: 5,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let written = write_synthetic(dir.path(), &spec()).unwrap();
        let train = load_dataset(dir.path(), Split::Train, 5).unwrap();
        assert_eq!(train.len(), 3);
        for (a, b) in written.iter().zip(&train) {
            assert_eq!(a.video, b.video);
            assert_eq!(a.label, b.label);
        }
        assert_eq!(load_dataset(dir.path(), Split::Test, 5).unwrap().len(), 1);
        assert!(dir.path().join(SYNTH_MANIFEST).exists());
    }

    #[test]
    fn samples_depend_only_on_seed_and_index() {
        let a = spec().params(2);
        let mut s = spec();
        s.train = 10;
        assert_eq!(s.params(2), a);
        assert_ne!(spec().params(1), a);
    }
}
