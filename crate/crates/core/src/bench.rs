//! Forward-pass latency protocol.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::Model;
use crate::tensor::Tensor;

pub const WARMUPS: usize = 5;
pub const TIMED: usize = 50;
pub const PROTOCOL_INPUT: [usize; 3] = [64, 112, 112];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seed: u64,
    pub batch_size: usize,
    /// `[B, C, F, H, W]`.
    pub input_shape: Vec<usize>,
    /// True when the input is 64 frames of 112x112.
    pub protocol_input: bool,
    pub warmups: usize,
    pub samples_ms: Vec<f64>,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    pub clips_per_sec: f64,
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Times single-clip forward passes after discarding `warmups` runs. Only
/// the forward call is inside the timed region.
pub fn run_with(model: &Model, seed: u64, warmups: usize, timed: usize) -> Result<BenchReport> {
    let shape = model.input_shape(1);
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clip = Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
    )?;
    for _ in 0..warmups {
        model.forward(&clip)?;
    }
    let mut samples = Vec::with_capacity(timed);
    for _ in 0..timed {
        let t = Instant::now();
        let out = model.forward(&clip)?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let median = percentile(&sorted, 0.5);
    Ok(BenchReport {
        seed,
        batch_size: shape[0],
        input_shape: shape.to_vec(),
        protocol_input: shape[2..] == PROTOCOL_INPUT,
        warmups,
        samples_ms: samples,
        median_ms: median,
        p10_ms: percentile(&sorted, 0.1),
        p90_ms: percentile(&sorted, 0.9),
        clips_per_sec: 1e3 / median,
    })
}

pub fn run(model: &Model, seed: u64) -> Result<BenchReport> {
    run_with(model, seed, WARMUPS, TIMED)
}

impl BenchReport {
    pub fn render(&self) -> String {
        format!(
            "seed {}\nbatch size {}\ninput {:?}{}\nwarm-up passes {}\ntimed passes {}\n\
             median {:.3} ms\np10 {:.3} ms\np90 {:.3} ms\nthroughput {:.2} clips/s\n",
            self.seed,
            self.batch_size,
            self.input_shape,
            if self.protocol_input {
                ""
            } else {
                " (not the 64x112x112 protocol input)"
            },
            self.warmups,
            self.samples_ms.len(),
            self.median_ms,
            self.p10_ms,
            self.p90_ms,
            self.clips_per_sec
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles() {
        let v: Vec<f64> = (1..=11).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.5), 6.0);
        assert_eq!(percentile(&v, 0.1), 2.0);
        assert_eq!(percentile(&[1.0, 2.0], 0.5), 1.5);
    }

    #[test]
    fn counts_passes() {
        let model = Model::new(crate::model::ModelConfig::tiny()).unwrap();
        let r = run_with(&model, 0, 2, 7).unwrap();
        assert_eq!(r.samples_ms.len(), 7);
        assert_eq!(r.batch_size, 1);
        assert!(!r.protocol_input);
        assert!(r.p10_ms <= r.median_ms && r.median_ms <= r.p90_ms);
    }
}
