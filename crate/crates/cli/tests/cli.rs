//! End-user behavior of the `tumordet` binary: flag handling, file
//! outputs, determinism, and error reporting. Every run here uses a
//! deliberately tiny model and iteration budget so the whole file
//! finishes in seconds.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tumordet_core::{Checkpoint, Detector, RunConfig};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tumordet"));
    // Keep an ambient data override from leaking into the tests; the
    // one test that wants it sets it back explicitly.
    cmd.env_remove("TUMORDET_DATA");
    cmd
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary spawns");
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary spawns");
    assert!(
        !out.status.success(),
        "expected failure\nstdout: {}",
        String::from_utf8_lossy(&out.stdout)
    );
    assert!(
        !out.stderr.is_empty(),
        "a failing command must write a diagnostic to the error stream"
    );
    out
}

fn micro_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.backbone_widths = vec![4, 4, 8, 8];
    cfg.pyramid_channels = 4;
    cfg.descriptor_channels = 8;
    cfg.dc_mid_channels = 4;
    cfg.head_hidden = 8;
    cfg.roi_pool_size = 3;
    cfg.pre_nms_k = 50;
    cfg.post_nms_k = 10;
    cfg.rpn_batch = 16;
    cfg.rois_per_step = 4;
    cfg.iterations = 2;
    cfg.log_every = 1;
    cfg
}

fn write_micro_config(dir: &Path) -> PathBuf {
    let path = dir.join("micro.toml");
    std::fs::write(&path, micro_config().to_toml_string()).unwrap();
    path
}

fn gen(dir: &Path, train: usize, test: usize, seed: u64) {
    run_ok(bin().args([
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--train",
        &train.to_string(),
        "--test",
        &test.to_string(),
        "--seed",
        &seed.to_string(),
    ]));
}

/// Every regular file under `root`, relative path -> bytes.
fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

#[test]
fn gen_data_writes_expected_layout_and_is_seed_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    gen(&a, 3, 2, 11);
    gen(&b, 3, 2, 11);
    gen(&c, 3, 2, 12);

    for required in ["train.jsonl", "test.jsonl", "meta.json"] {
        assert!(a.join(required).is_file(), "{required} missing");
    }
    assert_eq!(std::fs::read_dir(a.join("train")).unwrap().count(), 3);
    assert_eq!(std::fs::read_dir(a.join("test")).unwrap().count(), 2);

    assert_eq!(tree_bytes(&a), tree_bytes(&b), "same seed must give identical bytes");
    assert_ne!(tree_bytes(&a), tree_bytes(&c), "different seed must change the data");
}

#[test]
fn train_zero_iterations_emits_the_initialization_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 2, 1, 5);
    let config = write_micro_config(tmp.path());
    let ckpt = tmp.path().join("zero.ckpt");

    run_ok(bin().args([
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--iterations",
        "0",
    ]));

    // Byte-for-byte the checkpoint a fresh model would save.
    let mut cfg = micro_config();
    cfg.iterations = 0;
    let expected = Detector::new(&cfg).unwrap().to_checkpoint(0).to_bytes();
    assert_eq!(std::fs::read(&ckpt).unwrap(), expected);
}

#[test]
fn eval_on_an_untrained_checkpoint_completes_with_a_full_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 2, 3, 6);
    let config = write_micro_config(tmp.path());
    let ckpt = tmp.path().join("raw.ckpt");
    run_ok(bin().args([
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--iterations",
        "0",
    ]));

    let report = tmp.path().join("report.csv");
    let roc = tmp.path().join("roc.csv");
    let froc = tmp.path().join("froc.csv");
    let out = run_ok(bin().args([
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
        "--roc",
        roc.to_str().unwrap(),
        "--froc",
        froc.to_str().unwrap(),
    ]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("images=3"));

    // The report parses: one header row, one data row, every numeric
    // cell finite (undefined ratios are marked, never NaN).
    let text = std::fs::read_to_string(&report).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 2);
    for cell in rows[1].split(',') {
        if cell != "undefined" {
            let v: f64 = cell.parse().expect("numeric cell");
            assert!(v.is_finite(), "non-finite metric {v}");
        }
    }
    assert!(roc.is_file() && froc.is_file());
}

#[test]
fn bad_invocations_fail_with_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    // Unknown flag.
    run_err(bin().args(["gen-data", "--bogus", "x"]));
    // Unknown subcommand.
    run_err(bin().args(["transmogrify"]));
    // Missing checkpoint file.
    let data = tmp.path().join("data");
    gen(&data, 2, 1, 3);
    let out = run_err(bin().args([
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--ckpt",
        tmp.path().join("absent.ckpt").to_str().unwrap(),
        "--report",
        tmp.path().join("r.csv").to_str().unwrap(),
    ]));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("absent.ckpt"),
        "diagnostic should name the missing file"
    );
    // Training without any data directory.
    let out = run_err(bin().env_remove("TUMORDET_DATA").args([
        "train",
        "--out",
        tmp.path().join("c.ckpt").to_str().unwrap(),
    ]));
    assert!(String::from_utf8_lossy(&out.stderr).contains("TUMORDET_DATA"));
}

#[test]
fn data_env_var_overrides_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 2, 1, 4);
    let config = write_micro_config(tmp.path());
    let ckpt = tmp.path().join("env.ckpt");

    // --data points nowhere; the environment variable wins and a note
    // lands on the error stream.
    let out = run_ok(
        bin().env("TUMORDET_DATA", data.to_str().unwrap()).args([
            "train",
            "--data",
            tmp.path().join("nowhere").to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--iterations",
            "1",
        ]),
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("overrides --data"));

    // The variable alone also suffices.
    run_ok(bin().env("TUMORDET_DATA", data.to_str().unwrap()).args([
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--iterations",
        "1",
    ]));
}

#[test]
fn train_logs_progress_and_eval_reads_its_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 3, 2, 8);
    let config = write_micro_config(tmp.path());
    let ckpt = tmp.path().join("m.ckpt");

    let out = run_ok(bin().args([
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("iter=1 ") && stdout.contains("iter=2 "), "{stdout}");

    let loaded = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(loaded.iteration, 2);
}

#[test]
fn ablate_emits_exactly_six_component_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 4, 3, 9);
    let config = write_micro_config(tmp.path());
    let table = tmp.path().join("table.csv");

    run_ok(bin().args([
        "ablate",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        table.to_str().unwrap(),
    ]));

    let text = std::fs::read_to_string(&table).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "augmented_pyramid,adaptive_fusion,dependencies_module,accuracy"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6, "one row per component combination");
    let switches: Vec<(&str, &str, &str)> = rows.iter().map(|r| (r[0], r[1], r[2])).collect();
    assert_eq!(
        switches,
        vec![
            ("false", "false", "false"),
            ("true", "false", "false"),
            ("false", "true", "false"),
            ("false", "true", "true"),
            ("true", "true", "false"),
            ("true", "true", "true"),
        ]
    );
    for row in &rows {
        assert!(row[3] == "undefined" || row[3].parse::<f64>().is_ok());
    }
}
