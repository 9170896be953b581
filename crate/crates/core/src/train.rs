//! Mini-batch training, evaluation and prediction loops.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    assemble_clip, derive_seed, sample_frames, stack_clips, Sample, SamplingPolicy, StudyLabel,
};
use crate::error::{Error, Result};
use crate::metrics::{summarize, EvalSummary};
use crate::model::{checkpoint, Model, Prediction};
use crate::objective::{
    optimizer_step, total_loss_with_grads, AdamState, BatchOutputs, LogRecord, LossWeights,
    OptimizerConfig,
};
use crate::tensor::Tensor;

pub const STEP_LOG: &str = "train_log.jsonl";
pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const TIMING_LOG: &str = "timing.jsonl";
pub const BEST_DIR: &str = "best";
pub const LAST_DIR: &str = "last";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub sampling: SamplingPolicy,
    pub loss: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            sampling: SamplingPolicy {
                train_random_start: true,
                ..SamplingPolicy::default()
            },
            loss: LossWeights::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub seed: u64,
    pub steps: u64,
    pub skipped: usize,
    pub mean_l_total: f64,
    pub mean_l_ef: f64,
    /// MAE on the validation split, or on the training split without one.
    pub val_mae: f64,
    pub val_r2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochSummary>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
}

/// Builds a `[B, 1, F, H, W]` batch, drawing each clip's window from its
/// own seed.
pub fn make_batch(samples: &[&Sample], policy: &SamplingPolicy, seeds: &[u64]) -> Result<Tensor> {
    let clips = samples
        .iter()
        .zip(seeds)
        .map(|(s, &seed)| {
            let sel = sample_frames(s.video.frames, policy, seed)?;
            assemble_clip(&s.video, &sel, &s.id)
        })
        .collect::<Result<Vec<_>>>()?;
    stack_clips(&clips.iter().collect::<Vec<_>>())
}

fn eval_policy(policy: &SamplingPolicy) -> SamplingPolicy {
    SamplingPolicy {
        train_random_start: false,
        ..policy.clone()
    }
}

/// Predictions with deterministic (start 0) frame sampling.
pub fn predict(
    model: &Model,
    samples: &[Sample],
    policy: &SamplingPolicy,
    batch_size: usize,
) -> Result<Vec<Prediction>> {
    let policy = eval_policy(policy);
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = make_batch(&refs, &policy, &vec![0; refs.len()])?;
        out.extend(model.forward(&batch)?);
    }
    Ok(out)
}

pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    policy: &SamplingPolicy,
    batch_size: usize,
) -> Result<EvalSummary> {
    if samples.is_empty() {
        return Err(Error::ShapeMismatch("no samples".into()));
    }
    let preds = predict(model, samples, policy, batch_size)?;
    let pairs: Vec<(f64, f64)> = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| (s.label.ef, p.ef))
        .collect();
    summarize(&pairs)
}

struct Logs {
    steps: BufWriter<File>,
    epochs: BufWriter<File>,
    timing: BufWriter<File>,
}

impl Logs {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            Ok(BufWriter::new(File::create(dir.join(name))?))
        };
        Ok(Self {
            steps: open(STEP_LOG)?,
            epochs: open(EPOCH_LOG)?,
            timing: open(TIMING_LOG)?,
        })
    }
}

/// Runs `cfg.optimizer.epochs` epochs. With an output directory, writes the
/// step and epoch logs plus `best/` and `last/` checkpoints there.
///
/// The step and epoch logs are reproducible byte for byte; wall-clock
/// timings go to a separate file.
pub fn train(
    model: &mut Model,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.optimizer.validate()?;
    cfg.sampling.validate()?;
    if train_set.is_empty() {
        return Err(Error::ShapeMismatch("no samples".into()));
    }
    let val = if val_set.is_empty() {
        train_set
    } else {
        val_set
    };
    let landmarks = model.config().landmarks;
    for s in train_set.iter().chain(val_set) {
        s.label.validate(landmarks)?;
    }
    let mut logs = out.map(Logs::create).transpose()?;
    let dirs = out.map(|d| (d.join(BEST_DIR), d.join(LAST_DIR)));
    let save = |model: &Model, dir: &PathBuf, epoch: usize| -> Result<()> {
        checkpoint::save(dir, model, epoch).map(|_| ())
    };

    let mut state = AdamState::new(model.params());
    let batch_size = cfg.optimizer.batch_size;
    let initial = evaluate(model, val, &cfg.sampling, batch_size)?;
    let mut best = (0, initial.mae);
    if let Some((best_dir, last_dir)) = &dirs {
        save(model, best_dir, 0)?;
        save(model, last_dir, 0)?;
    }

    let started = Instant::now();
    let mut summaries = Vec::with_capacity(cfg.optimizer.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.optimizer.epochs {
        let epoch_seed = derive_seed(cfg.seed, epoch as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        order.shuffle(&mut rng);
        let (mut sum_total, mut sum_ef, mut counted, mut skipped) = (0.0, 0.0, 0usize, 0usize);
        for chunk in order.chunks(batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let seeds: Vec<u64> = chunk
                .iter()
                .map(|&i| derive_seed(epoch_seed, i as u64))
                .collect();
            let batch = make_batch(&samples, &cfg.sampling, &seeds)?;
            let labels: Vec<&StudyLabel> = samples.iter().map(|s| &s.label).collect();
            let pass = model.forward_pass(&batch, false)?;
            let outputs = BatchOutputs {
                ef: pass.ef(),
                landmarks: pass.landmarks(),
                volumes: pass.volumes(),
            };
            let (report, seeds) = total_loss_with_grads(&outputs, &labels, &cfg.loss)?;
            let grads = pass.backward(&seeds)?;
            let skip = match optimizer_step(
                model.params_mut(),
                &grads.params,
                &mut state,
                &cfg.optimizer,
            ) {
                Ok(_) => false,
                Err(Error::NonFiniteGradient(_)) => true,
                Err(e) => return Err(e),
            };
            if skip {
                skipped += 1;
            } else {
                sum_total += report.l_total * chunk.len() as f64;
                sum_ef += report.l_ef * chunk.len() as f64;
                counted += chunk.len();
            }
            if let Some(l) = logs.as_mut() {
                writeln!(
                    l.steps,
                    "{}",
                    LogRecord::new(epoch, state.step, &report, skip).to_line()
                )?;
            }
        }
        let eval = evaluate(model, val, &cfg.sampling, batch_size)?;
        let denom = counted.max(1) as f64;
        let summary = EpochSummary {
            epoch,
            seed: cfg.seed,
            steps: state.step,
            skipped,
            mean_l_total: sum_total / denom,
            mean_l_ef: sum_ef / denom,
            val_mae: eval.mae,
            val_r2: eval.r2,
        };
        if let Some(l) = logs.as_mut() {
            writeln!(
                l.epochs,
                "{}",
                serde_json::to_string(&summary).expect("serializes")
            )?;
            writeln!(
                l.timing,
                "{{\"epoch\":{epoch},\"wall_seconds\":{:.3}}}",
                started.elapsed().as_secs_f64()
            )?;
        }
        if let Some((best_dir, last_dir)) = &dirs {
            if eval.mae < best.1 {
                save(model, best_dir, epoch)?;
            }
            save(model, last_dir, epoch)?;
        }
        if eval.mae < best.1 {
            best = (epoch, eval.mae);
        }
        summaries.push(summary);
    }
    if let Some(l) = logs.as_mut() {
        l.steps.flush()?;
        l.epochs.flush()?;
        l.timing.flush()?;
    }
    Ok(TrainOutcome {
        epochs: summaries,
        best_epoch: best.0,
        best_val_mae: best.1,
    })
}
