use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{synthetic_for, DatasetKind, RunConfig};
use super::{Failure, EXIT_CHECK, EXIT_INPUT, EXIT_OK, EXIT_STATE};
use crate::bench;
use crate::data::{
    assemble_clip, load_dataset, read_all_tracings, sample_frames, synthetic_dataset, RawVideo,
    Sample, SamplingPolicy, Split,
};
use crate::error::Error;
use crate::geometry::{ef_surrogate, simpson_geometry, ChordSet};
use crate::gradcheck::{self, Block, GradcheckOptions};
use crate::model::{checkpoint, Model, ModelConfig};
use crate::train::{self, evaluate, predict as predict_samples};

type CmdResult = Result<i32, Failure>;

const DEFAULT_OUT: &str = "ejection-run";
const CONFIG_ECHO: &str = "run_config.toml";

fn w(out: &mut dyn Write, text: impl AsRef<str>) -> Result<(), Failure> {
    out.write_all(text.as_ref().as_bytes())?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Failure::new(EXIT_INPUT, e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn prepare_out(dir: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_ECHO), cfg.to_toml())?;
    Ok(())
}

fn same_architecture(a: &ModelConfig, b: &ModelConfig) -> bool {
    let mut a = a.clone();
    a.seed = b.seed;
    a == *b
}

/// Loads a checkpoint and aligns the run configuration with it.
fn load_checkpoint(cfg: &mut RunConfig) -> Result<Model, Failure> {
    let dir = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| Failure::new(EXIT_INPUT, "a --checkpoint directory is required"))?;
    if !dir.is_dir() {
        return Err(Failure::new(
            EXIT_INPUT,
            format!("checkpoint {} does not exist", dir.display()),
        ));
    }
    let manifest = checkpoint::read_manifest(&dir).map_err(Failure::input)?;
    if cfg.model_overridden && !same_architecture(&cfg.model, &manifest.config) {
        return Err(Failure::new(
            EXIT_STATE,
            "checkpoint configuration does not match the requested model settings",
        ));
    }
    let (model, _) = checkpoint::load(&dir).map_err(|e| match e {
        Error::ShapeMismatch(_) => Failure::state(e),
        other => Failure::input(other),
    })?;
    adopt_model(cfg, model.config());
    Ok(model)
}

fn adopt_model(cfg: &mut RunConfig, model: &ModelConfig) {
    let seed = cfg.seed;
    cfg.model = model.clone();
    cfg.sampling.f_sel = model.frames;
    let derived = synthetic_for(model, &cfg.sampling, cfg.synthetic.seed);
    cfg.synthetic.size = derived.size;
    cfg.synthetic.landmarks = derived.landmarks;
    cfg.synthetic.frames = cfg.synthetic.frames.max(derived.frames);
    cfg.synthetic.period = derived.period;
    cfg.seed = seed;
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<Sample>, Failure> {
    match cfg.dataset {
        DatasetKind::Synthetic => Ok(synthetic_dataset(&cfg.synthetic)
            .map_err(Failure::input)?
            .into_iter()
            .filter(|s| s.split == split)
            .collect()),
        DatasetKind::Echonet => {
            let dir = cfg.data_dir.as_ref().ok_or_else(|| {
                Failure::new(EXIT_INPUT, "a --data-dir is required (or pass --synthetic)")
            })?;
            if !dir.is_dir() {
                return Err(Failure::new(
                    EXIT_INPUT,
                    format!("data directory {} does not exist", dir.display()),
                ));
            }
            load_dataset(dir, split, cfg.model.landmarks).map_err(Failure::input)
        }
    }
}

fn default_split(cfg: &RunConfig) -> Split {
    cfg.split.unwrap_or(match cfg.dataset {
        DatasetKind::Synthetic => Split::Train,
        DatasetKind::Echonet => Split::Test,
    })
}

pub fn train(mut cfg: RunConfig, out: &mut dyn Write) -> CmdResult {
    let train_set = load_split(&cfg, Split::Train)?;
    if train_set.is_empty() {
        return Err(Failure::new(EXIT_INPUT, "no samples in the training split"));
    }
    let val_set = load_split(&cfg, Split::Val)?;
    let mut model = match &cfg.checkpoint {
        Some(_) => load_checkpoint(&mut cfg)?,
        None => Model::new(cfg.model.clone()).map_err(Failure::input)?,
    };
    let dir = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    cfg.out = Some(dir.clone());
    prepare_out(&dir, &cfg)?;
    w(
        out,
        format!(
            "seed {}\ntraining on {} clips, validating on {}\nparameters {}\n",
            cfg.seed,
            train_set.len(),
            if val_set.is_empty() {
                "the training split".to_string()
            } else {
                format!("{} clips", val_set.len())
            },
            model.parameter_count()
        ),
    )?;
    let tc = train::TrainConfig {
        optimizer: cfg.optimizer.clone(),
        sampling: cfg.sampling.clone(),
        loss: cfg.loss,
        seed: cfg.seed,
    };
    let outcome = train::train(&mut model, &train_set, &val_set, &tc, Some(&dir))?;
    for e in &outcome.epochs {
        w(
            out,
            format!(
                "epoch {:>4}  loss {:>12.4}  val MAE {:>8.4}\n",
                e.epoch, e.mean_l_total, e.val_mae
            ),
        )?;
    }
    let summary = evaluate(&model, &train_set, &cfg.sampling, cfg.optimizer.batch_size)?;
    w(
        out,
        format!(
            "final training MAE {:.4}  RMSE {:.4}  R2 {}\nbest validation MAE {:.4} at epoch {}\ncheckpoints in {}\n",
            summary.mae,
            summary.rmse,
            summary.r2.map_or("undefined".into(), |r| format!("{r:.4}")),
            outcome.best_val_mae,
            outcome.best_epoch,
            dir.display()
        ),
    )?;
    #[derive(Serialize)]
    struct Final<'a> {
        seed: u64,
        final_train_mae: f64,
        final_train_rmse: f64,
        final_train_r2: Option<f64>,
        best_epoch: usize,
        best_val_mae: f64,
        epochs: &'a [train::EpochSummary],
    }
    write_json(
        &dir.join("summary.json"),
        &Final {
            seed: cfg.seed,
            final_train_mae: summary.mae,
            final_train_rmse: summary.rmse,
            final_train_r2: summary.r2,
            best_epoch: outcome.best_epoch,
            best_val_mae: outcome.best_val_mae,
            epochs: &outcome.epochs,
        },
    )?;
    Ok(EXIT_OK)
}

pub fn eval(mut cfg: RunConfig, out: &mut dyn Write) -> CmdResult {
    let model = load_checkpoint(&mut cfg)?;
    let split = default_split(&cfg);
    let samples = load_split(&cfg, split)?;
    if samples.is_empty() {
        return Err(Failure::new(
            EXIT_INPUT,
            format!("no samples in split {split}"),
        ));
    }
    let summary = evaluate(&model, &samples, &cfg.sampling, cfg.optimizer.batch_size)?;
    let report = format!("seed  {}\nsplit {split}\n{}", cfg.seed, summary.report());
    w(out, &report)?;
    if let Some(dir) = cfg.out.clone() {
        prepare_out(&dir, &cfg)?;
        fs::write(dir.join("report.txt"), &report)?;
        let mut pairs = Vec::new();
        summary.write_pairs(&mut pairs)?;
        fs::write(dir.join("pairs.csv"), pairs)?;
        write_json(&dir.join("summary.json"), &(cfg.seed, &summary))?;
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct PredictionRow {
    id: String,
    ef: f64,
    esv: Option<f64>,
    edv: Option<f64>,
    ed_chords: Option<ChordSet>,
    es_chords: Option<ChordSet>,
}

pub fn predict(mut cfg: RunConfig, clip: Option<&Path>, out: &mut dyn Write) -> CmdResult {
    let model = load_checkpoint(&mut cfg)?;
    let eval_policy = SamplingPolicy {
        train_random_start: false,
        ..cfg.sampling.clone()
    };
    let rows: Vec<PredictionRow> = match clip {
        Some(path) => {
            let video = RawVideo::load(path).map_err(Failure::input)?;
            let sel = sample_frames(video.frames, &eval_policy, 0).map_err(Failure::input)?;
            let id = path
                .file_stem()
                .map_or("clip".into(), |s| s.to_string_lossy().into_owned());
            let c = assemble_clip(&video, &sel, &id).map_err(Failure::input)?;
            let batch = crate::data::stack_clips(&[&c]).map_err(Failure::input)?;
            let p = model.forward(&batch).map_err(Failure::input)?.remove(0);
            vec![PredictionRow {
                id,
                ef: p.ef,
                esv: p.esv,
                edv: p.edv,
                ed_chords: p.cbd.as_ref().map(|c| c.ed.clone()),
                es_chords: p.cbd.map(|c| c.es),
            }]
        }
        None => {
            let split = default_split(&cfg);
            let samples = load_split(&cfg, split)?;
            if samples.is_empty() {
                return Err(Failure::new(
                    EXIT_INPUT,
                    format!("no samples in split {split}"),
                ));
            }
            let preds = predict_samples(&model, &samples, &eval_policy, cfg.optimizer.batch_size)?;
            samples
                .iter()
                .zip(preds)
                .map(|(s, p)| PredictionRow {
                    id: s.id.clone(),
                    ef: p.ef,
                    esv: p.esv,
                    edv: p.edv,
                    ed_chords: p.cbd.as_ref().map(|c| c.ed.clone()),
                    es_chords: p.cbd.map(|c| c.es),
                })
                .collect()
        }
    };
    let mut csv = format!("# seed {}\nid,ef,esv,edv\n", cfg.seed);
    for r in &rows {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        csv.push_str(&format!(
            "{},{:.6},{},{}\n",
            r.id,
            r.ef,
            opt(r.esv),
            opt(r.edv)
        ));
    }
    w(out, &csv)?;
    if let Some(dir) = cfg.out.clone() {
        prepare_out(&dir, &cfg)?;
        fs::write(dir.join("predictions.csv"), &csv)?;
        write_json(&dir.join("predictions.json"), &rows)?;
    }
    Ok(EXIT_OK)
}

pub fn geo(path: &Path, out: &mut dyn Write) -> CmdResult {
    let file = fs::File::open(path)
        .map_err(|e| Failure::new(EXIT_INPUT, format!("{}: {e}", path.display())))?;
    let studies = read_all_tracings(file, None).map_err(Failure::input)?;
    if studies.is_empty() {
        return Err(Failure::new(EXIT_INPUT, "no tracings in file"));
    }
    let mut text = String::new();
    for (id, t) in &studies {
        text.push_str(&format!("{id}\n"));
        let mut volumes = Vec::new();
        for (name, set, frame) in [("ED", &t.ed, t.ed_frame), ("ES", &t.es, t.es_frame)] {
            let g = simpson_geometry(set).map_err(Failure::input)?;
            text.push_str(&format!(
                "  {name} (frame {frame})\n  level          B          H          v\n"
            ));
            for i in 0..g.diameters.len() {
                text.push_str(&format!(
                    "  {:>5} {:>10.6} {:>10.6} {:>10.6}\n",
                    i + 2,
                    g.diameters[i],
                    g.heights[i],
                    g.disk_volumes[i]
                ));
            }
            text.push_str(&format!("  V_{name} {:.6}\n", g.total_volume));
            volumes.push(g);
        }
        match ef_surrogate(&volumes[0], &volumes[1]) {
            Ok(ef) => text.push_str(&format!("  EF {ef:.6}\n")),
            Err(e) => text.push_str(&format!("  EF undefined: {e}\n")),
        }
    }
    w(out, text)?;
    Ok(EXIT_OK)
}

pub fn gradcheck(
    cfg: RunConfig,
    configs: usize,
    zero_loss: bool,
    corrupt: Option<Block>,
    out: &mut dyn Write,
) -> CmdResult {
    let model = if cfg.model_overridden {
        cfg.model.clone()
    } else {
        ModelConfig {
            seed: cfg.seed,
            ..ModelConfig::tiny()
        }
    };
    let opts = GradcheckOptions {
        seed: cfg.seed,
        geometry_configs: configs,
        zero_loss,
        model,
        corrupt,
        ..GradcheckOptions::default()
    };
    let report = gradcheck::run(&opts)?;
    w(out, format!("seed {}\n{}", cfg.seed, report.render()))?;
    if let Some(dir) = cfg.out.clone() {
        prepare_out(&dir, &cfg)?;
        write_json(&dir.join("gradcheck.json"), &report)?;
    }
    let failed = report
        .failures()
        .next()
        .map(|b| format!("gradient check failed in {} at {}", b.block, b.worst_entry));
    match failed {
        None => Ok(EXIT_OK),
        Some(msg) => Err(Failure::new(EXIT_CHECK, msg)),
    }
}

pub fn bench(mut cfg: RunConfig, out: &mut dyn Write) -> CmdResult {
    let model = match &cfg.checkpoint {
        Some(_) => load_checkpoint(&mut cfg)?,
        None => Model::new(cfg.model.clone()).map_err(Failure::input)?,
    };
    let report = bench::run(&model, cfg.seed)?;
    w(out, report.render())?;
    if let Some(dir) = cfg.out.clone() {
        prepare_out(&dir, &cfg)?;
        write_json(&dir.join("bench.json"), &report)?;
    }
    Ok(EXIT_OK)
}
