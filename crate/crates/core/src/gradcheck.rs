//! Finite-difference verification of the hand-written gradients.
//!
//! Derivatives are estimated with the five-point central stencil
//! `(f(x-2h) - 8 f(x-h) + 8 f(x+h) - f(x+2h)) / 12h`, whose truncation error
//! is fourth order in `h`. An entry matches when its relative error
//! `|a - n| / max(|a|, |n|)` is under the block tolerance or its absolute
//! discrepancy is at most [`ABS_FLOOR`].

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{geometric_losses, geometric_losses_gradient, ChordSample, ChordSet, Phase};
use crate::model::{Model, ModelConfig, OutputGrads};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-3;
pub const GEOMETRY_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Block {
    Geometry,
    ModelParams,
    ModelInput,
}

impl Block {
    pub fn name(self) -> &'static str {
        match self {
            Block::Geometry => "geometry.l_geo",
            Block::ModelParams => "model.params",
            Block::ModelInput => "model.input",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub geometry_configs: usize,
    pub landmarks: usize,
    /// Predicted chords equal the reference, so every gradient is zero.
    pub zero_loss: bool,
    pub param_samples: usize,
    pub input_samples: usize,
    pub model: ModelConfig,
    /// Test hook: scales the analytic gradient of one block by 1.5.
    pub corrupt: Option<Block>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            geometry_configs: 100,
            landmarks: 21,
            zero_loss: false,
            param_samples: 64,
            input_samples: 64,
            model: ModelConfig::tiny(),
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: String,
    pub checked: usize,
    pub worst_rel_err: f64,
    /// Location of the worst entry.
    pub worst_entry: String,
    pub tolerance: f64,
    /// Entries outside both the relative tolerance and the absolute floor.
    pub failed: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub blocks: Vec<BlockReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &BlockReport> {
        self.blocks.iter().filter(|b| !b.passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for b in &self.blocks {
            writeln!(
                s,
                "{} {:<16} checked {:>5}  worst rel err {:.3e} (tol {:.0e}) at {}",
                if b.passed { "PASS" } else { "FAIL" },
                b.block,
                b.checked,
                b.worst_rel_err,
                b.tolerance,
                b.worst_entry
            )
            .unwrap();
        }
        s
    }
}

pub fn five_point(mut f: impl FnMut(f64) -> Result<f64>, h: f64) -> Result<f64> {
    let a = f(-2.0 * h)?;
    let b = f(-h)?;
    let c = f(h)?;
    let d = f(2.0 * h)?;
    Ok((a - 8.0 * b + 8.0 * c - d) / (12.0 * h))
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

pub fn entry_matches(analytic: f64, numeric: f64, tolerance: f64) -> bool {
    (analytic - numeric).abs() <= ABS_FLOOR || relative_error(analytic, numeric) < tolerance
}

struct Tracker {
    block: Block,
    tolerance: f64,
    checked: usize,
    failed: usize,
    worst: f64,
    entry: String,
}

impl Tracker {
    fn new(block: Block, tolerance: f64) -> Self {
        Self {
            block,
            tolerance,
            checked: 0,
            failed: 0,
            worst: 0.0,
            entry: "-".into(),
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, entry: impl FnOnce() -> String) {
        self.checked += 1;
        let ok = entry_matches(analytic, numeric, self.tolerance);
        if !ok {
            self.failed += 1;
        }
        // Near-zero derivatives say nothing about relative accuracy.
        let e = if analytic.abs().max(numeric.abs()) < 1e-6 {
            0.0
        } else {
            relative_error(analytic, numeric)
        };
        if e > self.worst || self.checked == 1 {
            self.worst = e;
            self.entry = entry();
        }
    }

    fn finish(self) -> BlockReport {
        BlockReport {
            block: self.block.name().into(),
            checked: self.checked,
            worst_rel_err: self.worst,
            worst_entry: self.entry,
            tolerance: self.tolerance,
            failed: self.failed,
            passed: self.failed == 0,
        }
    }
}

fn corruption(opts: &GradcheckOptions, block: Block) -> f64 {
    if opts.corrupt == Some(block) {
        1.5
    } else {
        1.0
    }
}

fn random_set(rng: &mut ChaCha8Rng, phase: Phase, l: usize) -> ChordSet {
    let flat: Vec<f64> = (0..4 * l).map(|_| rng.random_range(5.0..=107.0)).collect();
    ChordSet::from_flat(phase, &flat).expect("multiple of four")
}

/// Stencil points must not straddle `H = 0` or `B = 0`, where the surrogate
/// is not differentiable.
const KINK_MARGIN: f64 = 0.5;

fn smooth(set: &ChordSet) -> Result<bool> {
    let g = crate::geometry::simpson_geometry(set)?;
    Ok(g.heights
        .iter()
        .chain(&g.diameters)
        .all(|&v| v > KINK_MARGIN))
}

const COORD: [&str; 4] = ["x1", "y1", "x2", "y2"];

/// Geometric loss gradients over random chord configurations.
pub fn geometry_block(opts: &GradcheckOptions) -> Result<BlockReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let factor = corruption(opts, Block::Geometry);
    let mut t = Tracker::new(Block::Geometry, GEOMETRY_TOLERANCE);
    let l = opts.landmarks;
    for config in 0..opts.geometry_configs {
        let gt_ed = random_set(&mut rng, Phase::Ed, l);
        let gt_es = random_set(&mut rng, Phase::Es, l);
        let (pred_ed, pred_es) = loop {
            let pair = if opts.zero_loss {
                (gt_ed.clone(), gt_es.clone())
            } else {
                (
                    random_set(&mut rng, Phase::Ed, l),
                    random_set(&mut rng, Phase::Es, l),
                )
            };
            if opts.zero_loss || (smooth(&pair.0)? && smooth(&pair.1)?) {
                break pair;
            }
        };
        let (_, grads) =
            geometric_losses_gradient(&[ChordSample::new(&pred_ed, &pred_es, &gt_ed, &gt_es)])?;
        for (phase, grad) in [(Phase::Ed, &grads[0].ed), (Phase::Es, &grads[0].es)] {
            for i in 0..l {
                for k in 0..4 {
                    let numeric = five_point(
                        |d| {
                            let mut ed = pred_ed.clone();
                            let mut es = pred_es.clone();
                            let set = if phase == Phase::Ed { &mut ed } else { &mut es };
                            let mut c = set.chords[i].coords();
                            c[k] += d;
                            set.chords[i] = crate::geometry::Chord::from_coords(c);
                            Ok(
                                geometric_losses(&[ChordSample::new(&ed, &es, &gt_ed, &gt_es)])?
                                    .l_geo,
                            )
                        },
                        STEP,
                    )?;
                    t.record(factor * grad.d_coords[i][k], numeric, || {
                        format!("config {config} {phase:?} chord {} {}", i + 1, COORD[k])
                    });
                }
            }
        }
    }
    Ok(t.finish())
}

/// Picks `count` distinct flat positions covering every tensor at least once.
fn sample_params(model: &Model, count: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let sizes: Vec<usize> = model.params().iter().map(|p| p.value.len()).collect();
    let mut picks: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| (i, rng.random_range(0..n)))
        .collect();
    let total: usize = sizes.iter().sum();
    let wanted = count.min(total);
    while picks.len() < wanted {
        let mut flat = rng.random_range(0..total);
        let mut i = 0;
        while flat >= sizes[i] {
            flat -= sizes[i];
            i += 1;
        }
        if !picks.contains(&(i, flat)) {
            picks.push((i, flat));
        }
    }
    picks
}

fn ef_sum(model: &Model, clip: &Tensor) -> Result<f64> {
    Ok(model.forward_pass(clip, false)?.ef().iter().sum())
}

/// Gradient of the summed EF output with respect to sampled parameters and
/// input pixels of a small model.
pub fn model_blocks(opts: &GradcheckOptions) -> Result<Vec<BlockReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut model = Model::new(opts.model.clone())?;
    let shape = model.input_shape(1);
    let n: usize = shape.iter().product();
    let mut clip = Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
    )?;
    let pass = model.forward_pass(&clip, true)?;
    let b = pass.ef().len();
    let grads = pass.backward(&OutputGrads {
        ef: Some(Tensor::full(&[b], 1.0)),
        ..OutputGrads::default()
    })?;
    let input_grad = grads
        .input
        .ok_or_else(|| Error::InvalidState("input gradient was not tracked".into()))?;

    let mut params = Tracker::new(Block::ModelParams, MODEL_TOLERANCE);
    let factor = corruption(opts, Block::ModelParams);
    for (i, k) in sample_params(&model, opts.param_samples, &mut rng) {
        let original = model.params().by_index(i).value.data()[k];
        let numeric = five_point(
            |d| {
                model.params_mut().by_index_mut(i).value.data_mut()[k] = original + d;
                ef_sum(&model, &clip)
            },
            STEP,
        );
        model.params_mut().by_index_mut(i).value.data_mut()[k] = original;
        let numeric = numeric?;
        let name = &model.params().by_index(i).name;
        params.record(factor * grads.params[i].data()[k], numeric, || {
            format!("{name}[{k}]")
        });
    }

    let mut input = Tracker::new(Block::ModelInput, MODEL_TOLERANCE);
    let factor = corruption(opts, Block::ModelInput);
    let count = opts.input_samples.min(n);
    let mut pixels: Vec<usize> = Vec::with_capacity(count);
    while pixels.len() < count {
        let p = rng.random_range(0..n);
        if !pixels.contains(&p) {
            pixels.push(p);
        }
    }
    for p in pixels {
        let original = clip.data()[p];
        let numeric = five_point(
            |d| {
                clip.data_mut()[p] = original + d;
                ef_sum(&model, &clip)
            },
            STEP,
        );
        clip.data_mut()[p] = original;
        input.record(factor * input_grad.data()[p], numeric?, || {
            format!("pixel {p}")
        });
    }
    Ok(vec![params.finish(), input.finish()])
}

pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut blocks = vec![geometry_block(opts)?];
    blocks.extend(model_blocks(opts)?);
    Ok(GradcheckReport { blocks })
}
