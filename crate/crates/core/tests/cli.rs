use std::fs;
use std::path::{Path, PathBuf};

use ejection_core::cli;

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
        .display()
        .to_string()
}

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("ejection").chain(args.iter().copied());
    let code = cli::run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn geo_reports_cylinder() {
    let (code, out, _) = run(&["geo", &fixture("unit_cylinder.csv")]);
    assert_eq!(code, 0);
    assert!(out.contains("V_ED 3.141593"), "{out}");
    assert!(out.contains("EF 0.000000"));
    let (code, out, _) = run(&["geo", &fixture("cone.csv")]);
    assert_eq!(code, 0);
    assert!(out.contains("10.210176"), "{out}");
}

#[test]
fn geo_bad_input() {
    let (code, _, err) = run(&["geo", &fixture("malformed.csv")]);
    assert_eq!(code, 2);
    assert!(err.contains("row 2"), "{err}");
    let (code, _, _) = run(&["geo", "/no/such/file.csv"]);
    assert_eq!(code, 2);
}

#[test]
fn usage_errors() {
    assert_eq!(run(&["frobnicate"]).0, 2);
    assert_eq!(run(&["train", "--lr", "abc"]).0, 2);
    assert_eq!(run(&["--help"]).0, 0);
    // Training data must be resolvable.
    let (code, _, err) = run(&["train", "--preset", "tiny"]);
    assert_eq!(code, 2);
    assert!(err.contains("--data-dir"), "{err}");
}

#[test]
fn gradcheck_passes_and_detects_faults() {
    let (code, out, _) = run(&["gradcheck", "--configs", "10", "--seed", "3"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("seed 3"));
    assert_eq!(out.matches("PASS").count(), 3);

    let (code, out, _) = run(&["gradcheck", "--configs", "5", "--zero-loss"]);
    assert_eq!(code, 0, "{out}");

    for (hook, block) in [
        ("geometry", "geometry.l_geo"),
        ("params", "model.params"),
        ("input", "model.input"),
    ] {
        let (code, _, err) = run(&["gradcheck", "--configs", "5", "--corrupt", hook]);
        assert_eq!(code, 1);
        assert!(err.contains(block), "{err}");
    }
}

#[test]
fn train_eval_predict_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let common = ["--synthetic", "--preset", "tiny", "--seed", "2"];
    let mut args = vec!["train"];
    args.extend(common);
    args.extend(["--epochs", "2", "--batch-size", "8", "--out", p(&run_dir)]);
    let (code, out, err) = run(&args);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("seed 2"));
    for f in [
        "train_log.jsonl",
        "epochs.jsonl",
        "run_config.toml",
        "best/manifest.json",
        "last/params.bin",
    ] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let echoed = fs::read_to_string(run_dir.join("run_config.toml")).unwrap();
    assert!(echoed.contains("seed = 2"));

    // Same seed, same loss log.
    let again = dir.path().join("again");
    let mut args2 = args.clone();
    let last = args2.len() - 1;
    args2[last] = p(&again);
    assert_eq!(run(&args2).0, 0);
    for log in ["train_log.jsonl", "epochs.jsonl"] {
        assert_eq!(
            fs::read(run_dir.join(log)).unwrap(),
            fs::read(again.join(log)).unwrap()
        );
    }

    let ckpt = run_dir.join("best");
    let eval_dir = dir.path().join("eval");
    let (code, out, err) = run(&[
        "eval",
        "--synthetic",
        "--seed",
        "2",
        "--checkpoint",
        p(&ckpt),
        "--out",
        p(&eval_dir),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("MAE"));
    assert!(eval_dir.join("pairs.csv").exists());
    assert!(eval_dir.join("report.txt").exists());

    let (code, _, err) = run(&[
        "eval",
        "--synthetic",
        "--checkpoint",
        p(&ckpt),
        "--split",
        "VAL",
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("no samples"), "{err}");

    let (code, _, _) = run(&[
        "eval",
        "--synthetic",
        "--preset",
        "small",
        "--checkpoint",
        p(&ckpt),
    ]);
    assert_eq!(code, 3);
    let (code, _, _) = run(&[
        "eval",
        "--synthetic",
        "--disable-e2cbd",
        "--checkpoint",
        p(&ckpt),
    ]);
    assert_eq!(code, 3);
    let (code, _, _) = run(&["eval", "--synthetic"]);
    assert_eq!(code, 2);

    let (code, out, _) = run(&[
        "predict",
        "--synthetic",
        "--seed",
        "2",
        "--checkpoint",
        p(&ckpt),
    ]);
    assert_eq!(code, 0);
    assert_eq!(out.lines().count(), 2 + 32);
}

#[test]
fn zero_epochs_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = run(&[
        "train",
        "--synthetic",
        "--preset",
        "tiny",
        "--epochs",
        "0",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(dir.path().join("last/manifest.json").exists());
    assert_eq!(
        fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap(),
        ""
    );
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "seed = 9\npreset = \"tiny\"\ndataset = \"synthetic\"\n[optimizer]\nepochs = 1\nbatch_size = 16\n").unwrap();
    let out_dir = dir.path().join("out");
    let (code, _, err) = run(&[
        "train",
        "--config",
        p(&cfg),
        "--epochs",
        "0",
        "--out",
        p(&out_dir),
    ]);
    assert_eq!(code, 0, "{err}");
    let echoed = fs::read_to_string(out_dir.join("run_config.toml")).unwrap();
    assert!(echoed.contains("seed = 9"));
    assert!(echoed.contains("epochs = 0"));
    assert!(echoed.contains("batch_size = 16"));

    fs::write(&cfg, "colour = \"red\"\n").unwrap();
    assert_eq!(run(&["train", "--config", p(&cfg)]).0, 2);
}

#[test]
fn echonet_directory_and_raw_clip() {
    use ejection_core::data::{write_synthetic, SyntheticSpec};
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let spec = SyntheticSpec {
        train: 4,
        val: 2,
        test: 2,
        size: 14,
        frames: 16,
        period: 8,
        landmarks: 3,
        ..SyntheticSpec::default()
    };
    let samples = write_synthetic(&data, &spec).unwrap();
    let run_dir = dir.path().join("run");
    let (code, _, err) = run(&[
        "train",
        "--preset",
        "tiny",
        "--data-dir",
        p(&data),
        "--epochs",
        "1",
        "--out",
        p(&run_dir),
    ]);
    assert_eq!(code, 0, "{err}");
    let ckpt = run_dir.join("last");
    let (code, out, err) = run(&["eval", "--data-dir", p(&data), "--checkpoint", p(&ckpt)]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("split TEST"));
    assert!(out.contains("n     2"), "{out}");

    let clip = data
        .join("Videos")
        .join(format!("{}.e3clip", samples[0].id));
    let (code, out, err) = run(&["predict", "--checkpoint", p(&ckpt), "--clip", p(&clip)]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains(&samples[0].id));
}

#[test]
fn bench_on_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out, err) = run(&["bench", "--preset", "tiny", "--out", p(dir.path())]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("timed passes 50"));
    assert!(out.contains("clips/s"));
    assert!(dir.path().join("bench.json").exists());
}
