//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::f64::consts::PI;
use std::fs::File;
use std::path::PathBuf;
use std::time::Instant;

use ejection_core::bench::BenchReport;
use ejection_core::data::{
    read_all_tracings, sample_frames, synthetic_dataset, RawVideo, SamplingPolicy, StudyLabel,
    SyntheticSpec,
};
use ejection_core::geometry::simpson_geometry;
use ejection_core::gradcheck::{self, Block, GradcheckOptions};
use ejection_core::metrics::compute_metrics;
use ejection_core::model::{checkpoint, Model, ModelConfig};
use ejection_core::objective::{total_loss, BatchOutputs, LossWeights, OptimizerConfig};
use ejection_core::tensor::Tensor;
use ejection_core::train::{evaluate, train, TrainConfig};
use ejection_core::{cli, Error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn random_clip(model: &Model, b: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let shape = model.input_shape(b);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn geometry_oracles() -> Check {
    let volume = |name: &str| -> Result<f64, String> {
        let f = File::open(fixture(name)).map_err(|e| e.to_string())?;
        let t = read_all_tracings(f, None).map_err(|e| e.to_string())?;
        let g = simpson_geometry(&t[0].1.ed).map_err(|e| e.to_string())?;
        Ok(g.total_volume)
    };
    let cyl = volume("unit_cylinder.csv")?;
    let cone = volume("cone.csv")?;
    let (e1, e2) = ((cyl - PI).abs(), (cone - 3.25 * PI).abs());
    ensure(
        e1 < 1e-6 && e2 < 1e-6,
        format!("cylinder V={cyl:.9} (err {e1:.1e}), cone V={cone:.9} (err {e2:.1e})"),
    )
}

fn gradients() -> Check {
    let start = Instant::now();
    let report = gradcheck::run(&GradcheckOptions::default()).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let geo = &report.blocks[0];
    let params = report
        .blocks
        .iter()
        .find(|b| b.block == Block::ModelParams.name())
        .ok_or("no parameter block")?;
    let detail = report
        .blocks
        .iter()
        .map(|b| format!("{} {:.2e}/{}", b.block, b.worst_rel_err, b.checked))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(
        report.passed()
            && geo.worst_rel_err < 1e-4
            && params.worst_rel_err < 1e-3
            && params.checked >= 50
            && secs < 120.0,
        format!("{detail}; {secs:.1} s"),
    )
}

fn objective_assembly() -> Check {
    let spec = SyntheticSpec {
        train: 8,
        size: 14,
        frames: 16,
        period: 8,
        landmarks: 3,
        ..SyntheticSpec::default()
    };
    let data = synthetic_dataset(&spec).map_err(|e| e.to_string())?;
    let labels: Vec<&StudyLabel> = data.iter().map(|s| &s.label).collect();
    let weights = LossWeights {
        volume_loss: false,
        ..LossWeights::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let ef: Vec<f64> = (0..8).map(|_| rng.random_range(0.5..99.5)).collect();
        let lm: Vec<f64> = (0..8 * 24).map(|_| rng.random_range(0.0..14.0)).collect();
        let lm = Tensor::new(vec![8, 2, 3, 4], lm).unwrap();
        let out = BatchOutputs {
            ef: &ef,
            landmarks: Some(&lm),
            volumes: None,
        };
        let r = total_loss(&out, &labels, &weights).map_err(|e| e.to_string())?;
        let expected = r.l_ef + 0.05 * r.l_geo();
        worst = worst.max((r.l_total - expected).abs() / expected.abs());
    }
    ensure(
        weights.lambda_geo == 0.05 && worst <= 1e-9,
        format!("200 batches, worst relative gap {worst:.1e}"),
    )
}

fn shapes_and_ranges() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut passes = 0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ef_lo, mut ef_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut worst_row = 0.0f64;
    let mut rows = 0usize;
    for block in 0..10 {
        let cfg = ModelConfig {
            coord_scale: 112.0,
            seed: block,
            ..ModelConfig::tiny()
        };
        let model = Model::new(cfg).map_err(|e| e.to_string())?;
        for _ in 0..100 {
            let gain = rng.random_range(0.1..4.0);
            let clip = random_clip(&model, 1, &mut rng).map(|v| v * gain);
            let pass = model
                .forward_pass(&clip, false)
                .map_err(|e| e.to_string())?;
            for &v in pass.landmarks().ok_or("no landmarks")?.data() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            for &e in pass.ef() {
                ef_lo = ef_lo.min(e);
                ef_hi = ef_hi.max(e);
            }
            for r in pass.attention_rows() {
                worst_row = worst_row.max((r.iter().sum::<f64>() - 1.0).abs());
                rows += 1;
            }
            passes += 1;
        }
    }
    ensure(
        passes == 1000
            && lo >= 0.0
            && hi <= 112.0
            && ef_lo > 0.0
            && ef_hi < 100.0
            && rows > 0
            && worst_row < 1e-6,
        format!(
            "{passes} passes, landmarks [{lo:.3}, {hi:.3}], EF [{ef_lo:.3}, {ef_hi:.3}], {rows} attention rows off by <= {worst_row:.1e}"
        ),
    )
}

/// The overfit task: 32 phantom clips at 14x14, tiny model, 200 epochs with
/// a fixed window start. Returns the final training MAE and R².
fn overfit(seed: u64, disable_e2cbd: bool) -> Result<(f64, f64, Vec<f64>), String> {
    let spec = SyntheticSpec {
        train: 32,
        seed,
        size: 14,
        frames: 16,
        period: 8,
        landmarks: 3,
        ..SyntheticSpec::default()
    };
    let data = synthetic_dataset(&spec).map_err(|e| e.to_string())?;
    let cfg = ModelConfig {
        seed,
        disable_e2cbd,
        ..ModelConfig::tiny()
    };
    let mut model = Model::new(cfg).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        optimizer: OptimizerConfig {
            learning_rate: 1e-2,
            weight_decay: 1e-4,
            batch_size: 8,
            epochs: 200,
            ..OptimizerConfig::default()
        },
        sampling: SamplingPolicy {
            f_sel: 4,
            stride: 2,
            train_random_start: false,
        },
        seed,
        ..TrainConfig::default()
    };
    let outcome = train(&mut model, &data, &[], &tc, None).map_err(|e| e.to_string())?;
    let summary = evaluate(&model, &data, &tc.sampling, 8).map_err(|e| e.to_string())?;
    let losses = outcome.epochs.iter().map(|e| e.mean_l_total).collect();
    Ok((summary.mae, summary.r2.unwrap_or(f64::NAN), losses))
}

fn overfit_smoke(runs: &[(f64, f64, Vec<f64>)], secs: f64) -> Check {
    let (mae, r2, losses) = &runs[0];
    let (mae2, r2b, losses2) = overfit(0, false)?;
    let deterministic = *mae == mae2 && *r2 == r2b && *losses == losses2;
    ensure(
        *mae < 2.0 && *r2 > 0.9 && deterministic && secs < 900.0,
        format!(
            "seed 0: train MAE {mae:.3}, R2 {r2:.4}, rerun identical: {deterministic}, {secs:.1} s per run"
        ),
    )
}

fn sampling_conformance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut cases = 0;
    for _ in 0..2000 {
        let total = rng.random_range(1..160usize);
        let f_sel = rng.random_range(1..48usize);
        let stride = rng.random_range(1..5usize);
        let train_mode = rng.random_bool(0.5);
        let policy = SamplingPolicy {
            f_sel,
            stride,
            train_random_start: train_mode,
        };
        let sel = sample_frames(total, &policy, rng.random()).map_err(|e| e.to_string())?;
        let span = (f_sel - 1) * stride + 1;
        let (expected, pad): (Vec<usize>, usize) = if total >= span {
            let k = if train_mode { sel.indices[0] } else { 0 };
            if k + span > total {
                return Err(format!("start {k} out of range for total {total}"));
            }
            ((0..f_sel).map(|j| k + j * stride).collect(), 0)
        } else {
            let idx: Vec<usize> = (0..total).filter(|i| i % stride == 0).collect();
            let pad = f_sel - idx.len();
            (idx, pad)
        };
        if sel.indices != expected || sel.pad != pad {
            return Err(format!(
                "total {total} f_sel {f_sel} stride {stride}: {sel:?}"
            ));
        }
        if pad > 0 {
            let (h, w) = (2, 3);
            let data: Vec<f32> = (0..total * h * w)
                .map(|_| rng.random_range(0.0..1.0))
                .collect();
            let video = RawVideo::new(total, h, w, data).map_err(|e| e.to_string())?;
            let clip =
                ejection_core::data::assemble_clip(&video, &sel, "v").map_err(|e| e.to_string())?;
            let d = clip.frames.data();
            for p in 0..h * w {
                let mean = sel
                    .indices
                    .iter()
                    .map(|&i| video.frame(i)[p] as f64)
                    .sum::<f64>()
                    / sel.indices.len() as f64;
                for slot in sel.indices.len()..f_sel {
                    if (d[slot * h * w + p] - mean).abs() > 1e-12 {
                        return Err(format!("padded slot {slot} is not the frame mean"));
                    }
                }
            }
        }
        cases += 1;
    }
    Ok(format!("{cases} random (total, f_sel, stride) cases"))
}

fn checkpoint_round_trip() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut scalars = 0;
    for cfg in [
        ModelConfig {
            seed: 7,
            ..ModelConfig::tiny()
        },
        ModelConfig {
            seed: 7,
            ..ModelConfig::default()
        },
    ] {
        let model = Model::new(cfg).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("{}", model.parameter_count()));
        checkpoint::save(&path, &model, 1).map_err(|e| e.to_string())?;
        let (back, _) = checkpoint::load(&path).map_err(|e| e.to_string())?;
        for (a, b) in model.params().iter().zip(back.params().iter()) {
            let same = a.name == b.name
                && a.value.shape() == b.value.shape()
                && a.value
                    .data()
                    .iter()
                    .zip(b.value.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits());
            if !same {
                return Err(format!("parameter {} differs", a.name));
            }
            scalars += a.value.len();
        }
        let clip = random_clip(&model, 1, &mut rng);
        let (p, q) = (model.forward(&clip), back.forward(&clip));
        if p.map_err(|e| e.to_string())? != q.map_err(|e| e.to_string())? {
            return Err("forward outputs differ after reload".into());
        }
    }
    Ok(format!(
        "{scalars} parameters bitwise equal, forward outputs identical"
    ))
}

fn bench_protocol() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out_dir = dir.path().to_str().ok_or("temp path")?;
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = cli::run(["ejection", "bench", "--out", out_dir], &mut out, &mut err);
    if code != 0 {
        return Err(format!("exit {code}: {}", String::from_utf8_lossy(&err)));
    }
    let text = std::fs::read_to_string(dir.path().join("bench.json")).map_err(|e| e.to_string())?;
    let r: BenchReport = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let printed = String::from_utf8_lossy(&out);
    ensure(
        r.warmups == 5
            && r.samples_ms.len() == 50
            && r.batch_size == 1
            && r.input_shape == [1, 1, 64, 112, 112]
            && r.protocol_input
            && r.median_ms > 0.0
            && printed.contains("median")
            && printed.contains("clips/s"),
        format!(
            "5 warm-ups, {} timed, input {:?}, median {:.1} ms, {:.2} clips/s",
            r.samples_ms.len(),
            r.input_shape,
            r.median_ms,
            r.clips_per_sec
        ),
    )
}

fn ablation_direction(full: &[(f64, f64, Vec<f64>)], seeds: &[u64]) -> Check {
    let mut ablated = Vec::new();
    for &s in seeds {
        ablated.push(overfit(s, true)?.0);
    }
    let full: Vec<f64> = full.iter().map(|r| r.0).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&full), mean(&ablated));
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.3}"))
            .collect::<Vec<_>>()
            .join("/")
    };
    ensure(
        a <= b,
        format!(
            "mean train MAE over seeds {seeds:?}: full {a:.3} ({}) vs without chord branch {b:.3} ({})",
            fmt(&full),
            fmt(&ablated)
        ),
    )
}

fn metrics_oracle() -> Check {
    let s = compute_metrics(&[(40.0, 50.0), (60.0, 50.0)]).map_err(|e| e.to_string())?;
    let degenerate = matches!(
        compute_metrics(&[(50.0, 40.0), (50.0, 60.0)]),
        Err(Error::DegenerateTargets)
    );
    ensure(
        s.mae == 10.0 && s.rmse == 10.0 && s.r2 == Some(0.0) && degenerate,
        format!(
            "MAE {} RMSE {} R2 {:?}, zero-variance targets rejected: {degenerate}",
            s.mae, s.rmse, s.r2
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Check)> = Vec::new();
    let mut report = |n: usize, name: &'static str, c: Check| {
        let (tag, detail) = match &c {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} criterion {n:>2} {name}: {detail}");
        results.push((n, name, c));
    };

    report(1, "geometry oracles", geometry_oracles());
    report(2, "gradient check", gradients());
    report(3, "objective assembly", objective_assembly());
    report(4, "shape and range invariants", shapes_and_ranges());

    let seeds = [0u64, 1, 2, 3];
    let start = Instant::now();
    let full: Result<Vec<_>, String> = seeds.iter().map(|&s| overfit(s, false)).collect();
    let per_run = start.elapsed().as_secs_f64() / seeds.len() as f64;
    match &full {
        Ok(runs) => report(5, "overfit smoke training", overfit_smoke(runs, per_run)),
        Err(e) => report(5, "overfit smoke training", Err(e.clone())),
    }

    report(6, "frame sampling conformance", sampling_conformance());
    report(7, "checkpoint round trip", checkpoint_round_trip());
    report(8, "benchmark protocol", bench_protocol());
    match &full {
        Ok(runs) => report(9, "ablation direction", ablation_direction(runs, &seeds)),
        Err(e) => report(9, "ablation direction", Err(e.clone())),
    }
    report(10, "metrics oracle", metrics_oracle());

    let failed: Vec<usize> = results
        .iter()
        .filter(|r| r.2.is_err())
        .map(|r| r.0)
        .collect();
    if failed.is_empty() {
        println!("all {} criteria passed", results.len());
    } else {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
