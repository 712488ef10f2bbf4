//! End-to-end tests of the `hdmi-lab` binary: artifact layout, config
//! layering, determinism, grid runners, and the 0/1/2 exit-code contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_hdmi-lab");

/// Small-but-nontrivial settings so every test run finishes in well under a
/// second.
const TINY: &[&str] = &[
    "--n-source",
    "80",
    "--n-target",
    "80",
    "--source-steps",
    "30",
    "--steps",
    "30",
    "--source-eval-every",
    "10",
    "--eval-every",
    "10",
];

fn fresh_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("hdmi_lab_it_{}_{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn run_tiny(extra: &[&str]) -> Output {
    let mut args: Vec<&str> = Vec::new();
    args.extend_from_slice(extra);
    args.extend_from_slice(TINY);
    run(&args)
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("reading {}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("parsing {}: {e}", path.display()))
}

fn count_lines(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

const RUN_ARTIFACTS: &[&str] = &[
    "config.json",
    "source.ckpt.json",
    "adapted.ckpt.json",
    "runlog.csv",
    "report.json",
    "bins.csv",
    "disagreement.csv",
    "klmatrix.csv",
    "predictions.csv",
];

#[test]
fn help_and_version_exit_zero_but_no_subcommand_exits_one() {
    assert_code(&run(&["--help"]), 0);
    assert_code(&run(&["run", "--help"]), 0);
    let version = run(&["--version"]);
    assert_code(&version, 0);
    assert!(String::from_utf8_lossy(&version.stdout).contains("hdmi-lab"));
    assert_code(&run(&[]), 1);
    assert_code(&run(&["frobnicate"]), 1);
}

#[test]
fn run_writes_all_artifacts_and_repeats_byte_identically() {
    let out_root = fresh_dir("run_det");
    let out_s = out_root.to_str().unwrap();
    let args = ["run", "--out", out_s, "--seed", "7"];
    assert_code(&run_tiny(&args), 0);
    assert_code(&run_tiny(&args), 0);

    let first = out_root.join("hdmi_m2_l0.5_s7");
    let second = out_root.join("hdmi_m2_l0.5_s7_2");
    for name in RUN_ARTIFACTS {
        assert!(first.join(name).is_file(), "missing {name}");
        assert!(second.join(name).is_file(), "missing {name} in rerun");
    }
    for name in ["report.json", "runlog.csv", "predictions.csv"] {
        let a = std::fs::read(first.join(name)).unwrap();
        let b = std::fs::read(second.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical invocations");
    }

    let report = read_json(&first.join("report.json"));
    assert_eq!(report["config"]["shift"]["seed"], 7);
    assert!(report["analysis"]["accuracy_ensemble"].as_f64().unwrap() > 0.5);
}

#[test]
fn gen_train_adapt_eval_chain_reproduces_the_run_report() {
    let out_root = fresh_dir("chain");
    let out_s = out_root.to_str().unwrap();
    let data = out_root.join("data");
    let data_s = data.to_str().unwrap();
    let common = ["--out", out_s, "--seed", "3"];

    let gen = run_tiny(&[&["gen", "--data-dir", data_s], &common[..]].concat());
    assert_code(&gen, 0);
    for name in ["source.csv", "target.csv", "target.labels.csv", "manifest.json"] {
        assert!(data.join(name).is_file(), "gen did not write {name}");
    }

    let train = run_tiny(&[&["train-source", "--data-dir", data_s], &common[..]].concat());
    assert_code(&train, 0);
    assert!(out_root.join("source.ckpt.json").is_file());

    let adapt = run_tiny(&[&["adapt", "--data-dir", data_s], &common[..]].concat());
    assert_code(&adapt, 0);
    let run_dir = out_root.join("hdmi_m2_l0.5_s3");
    assert!(run_dir.join("adapted.ckpt.json").is_file());
    let adapt_report = read_json(&run_dir.join("report.json"));

    // Evaluating the adapted checkpoint must agree with the adapt report:
    // the CSV + JSON round trip through disk is lossless.
    let ckpt = run_dir.join("adapted.ckpt.json");
    let eval = run_tiny(
        &[
            &["eval", "--data-dir", data_s, "--ckpt", ckpt.to_str().unwrap()],
            &common[..],
        ]
        .concat(),
    );
    assert_code(&eval, 0);
    let eval_report = read_json(&out_root.join("eval_s3").join("report.json"));
    for key in ["accuracy_anchor", "accuracy_ensemble", "brier", "ece"] {
        assert_eq!(
            eval_report[key], adapt_report["analysis"][key],
            "{key} drifted between adapt and eval"
        );
    }

    // The full pipeline on the same seed generates the same data in memory,
    // so its final numbers match the file-mediated chain exactly.
    let full = run_tiny(&[&["run"], &common[..]].concat());
    assert_code(&full, 0);
    let full_report = read_json(&out_root.join("hdmi_m2_l0.5_s3_2").join("report.json"));
    assert_eq!(full_report["analysis"], adapt_report["analysis"]);
}

#[test]
fn adapt_without_a_checkpoint_exits_one_naming_the_artifact() {
    let out_root = fresh_dir("missing_ckpt");
    let out = run_tiny(&["adapt", "--out", out_root.to_str().unwrap()]);
    assert_code(&out, 1);
    let msg = stderr_of(&out);
    assert!(msg.contains("missing source checkpoint"), "{msg}");
    assert!(msg.contains("source.ckpt.json"), "{msg}");
}

#[test]
fn unknown_config_key_exits_one_listing_known_keys() {
    let out_root = fresh_dir("unknown_key");
    std::fs::create_dir_all(&out_root).unwrap();
    let cfg = out_root.join("bad.conf");
    std::fs::write(&cfg, "bogus = 1\n").unwrap();
    let out = run(&["run", "--config", cfg.to_str().unwrap()]);
    assert_code(&out, 1);
    let msg = stderr_of(&out);
    assert!(msg.contains("unknown key \"bogus\""), "{msg}");
    assert!(msg.contains("lambda"), "{msg}");
    assert!(msg.contains(":1:"), "{msg}");
}

#[test]
fn malformed_config_line_exits_one_with_its_line_number() {
    let out_root = fresh_dir("malformed");
    std::fs::create_dir_all(&out_root).unwrap();
    let cfg = out_root.join("bad.conf");
    std::fs::write(&cfg, "lambda = 0.5\nthis is not a pair\n").unwrap();
    let out = run(&["run", "--config", cfg.to_str().unwrap()]);
    assert_code(&out, 1);
    assert!(stderr_of(&out).contains(":2:"), "{}", stderr_of(&out));
}

#[test]
fn config_file_overrides_defaults_and_flags_override_the_file() {
    let out_root = fresh_dir("layering");
    std::fs::create_dir_all(&out_root).unwrap();
    let cfg = out_root.join("layer.conf");
    std::fs::write(&cfg, "lambda = 0.25\nseed = 4\n").unwrap();
    let out = run_tiny(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_root.to_str().unwrap(),
        "--lambda",
        "0.75",
    ]);
    assert_code(&out, 0);
    // λ came from the flag, the seed from the file.
    let dir = out_root.join("hdmi_m2_l0.75_s4");
    assert!(dir.is_dir(), "expected run dir {}", dir.display());
    let report = read_json(&dir.join("report.json"));
    assert_eq!(report["config"]["adapt"]["lambda"], 0.75);
}

#[test]
fn domain_validation_failures_exit_one() {
    let out = run(&["run", "--lambda", "-1"]);
    assert_code(&out, 1);
    assert!(stderr_of(&out).contains("lambda"), "{}", stderr_of(&out));

    let out = run(&["run", "--objective", "mi_single"]);
    assert_code(&out, 1);
    assert!(
        stderr_of(&out).contains("mi_single requires M=1"),
        "{}",
        stderr_of(&out)
    );

    let out = run(&["run", "--objective", "nonsense"]);
    assert_code(&out, 1);
    assert!(
        stderr_of(&out).contains("unknown objective"),
        "{}",
        stderr_of(&out)
    );
}

#[test]
fn filesystem_failures_exit_two() {
    let out_root = fresh_dir("io_fail");
    std::fs::create_dir_all(&out_root).unwrap();
    let file = out_root.join("occupied");
    std::fs::write(&file, "not a directory").unwrap();
    let under_file = file.join("sub");
    let out = run_tiny(&["gen", "--out", under_file.to_str().unwrap()]);
    assert_code(&out, 2);
    assert!(stderr_of(&out).contains("io error"), "{}", stderr_of(&out));
}

#[test]
fn sweep_writes_run_rows_in_grid_order_plus_aggregates() {
    let out_root = fresh_dir("sweep");
    let out = run_tiny(&[
        "sweep",
        "--out",
        out_root.to_str().unwrap(),
        "--objectives",
        "mi_ensemble,hdmi",
        "--lambdas",
        "0.1,0.5",
        "--seeds",
        "1,2",
        "--jobs",
        "2",
    ]);
    assert_code(&out, 0);
    let summary = out_root.join("summary.csv");
    // header + 8 run rows + 4 aggregate rows
    assert_eq!(count_lines(&summary), 13);
    let text = std::fs::read_to_string(&summary).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "objective,m,lambda,seed,acc_anchor,acc_ensemble,ece,brier,disagreement,status"
    );
    assert!(lines[1].starts_with("mi_ensemble,2,0.1,1,"));
    assert!(lines[8].starts_with("hdmi,2,0.5,2,"));
    assert!(lines[9].starts_with("mi_ensemble,2,0.1,all,"));
    assert!(lines[12].starts_with("hdmi,2,0.5,all,"));
    for line in &lines[1..9] {
        assert!(line.ends_with(",ok"), "unexpected status in {line}");
    }
    for line in &lines[9..] {
        assert!(line.ends_with(",ok:2/2"), "unexpected status in {line}");
        assert!(line.contains('±'), "aggregate without ±: {line}");
    }
    // one run directory per grid point
    let dirs = std::fs::read_dir(&out_root)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().is_dir())
        .count();
    assert_eq!(dirs, 8);
}

#[test]
fn single_point_sweep_has_one_run_and_one_aggregate() {
    let out_root = fresh_dir("sweep_single");
    let out = run_tiny(&[
        "sweep",
        "--out",
        out_root.to_str().unwrap(),
        "--seeds",
        "5",
    ]);
    assert_code(&out, 0);
    // header + 1 run row + 1 aggregate row; axes default to the resolved
    // objective/M/λ.
    let summary = out_root.join("summary.csv");
    assert_eq!(count_lines(&summary), 3);
    let text = std::fs::read_to_string(&summary).unwrap();
    assert!(text.contains("hdmi,2,0.5,5,"), "{text}");
    assert!(text.contains("hdmi,2,0.5,all,"), "{text}");
}

#[test]
fn ablate_emits_exactly_nine_aggregate_rows() {
    let out_root = fresh_dir("ablate");
    let out = run_tiny(&[
        "ablate",
        "--out",
        out_root.to_str().unwrap(),
        "--seeds",
        "1",
        "--jobs",
        "2",
    ]);
    assert_code(&out, 0);
    let table = out_root.join("ablation.csv");
    assert_eq!(count_lines(&table), 10, "header + nine rows");
    let text = std::fs::read_to_string(&table).unwrap();
    let labels: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        labels,
        [
            "source_only",
            "mi_ensemble",
            "hdmi",
            "hdmi_kl",
            "hdmi_indep_psi",
            "hd_only",
            "cond_entropy_hd",
            "mi_l2",
            "mi_l2_source"
        ]
    );
    assert!(out_root.join("hdmi_indep_psi_m2_l0.5_s1").is_dir());
}

#[test]
fn env_var_sets_the_default_out_root_and_the_flag_beats_it() {
    let env_root = fresh_dir("env_root");
    let flag_root = fresh_dir("flag_root");

    let mut args: Vec<&str> = vec!["run", "--seed", "9"];
    args.extend_from_slice(TINY);
    let out = Command::new(BIN)
        .args(&args)
        .env("HDMI_LAB_OUT", &env_root)
        .output()
        .unwrap();
    assert_code(&out, 0);
    assert!(env_root.join("hdmi_m2_l0.5_s9").is_dir());

    let mut args: Vec<&str> = vec!["run", "--seed", "9", "--out", flag_root.to_str().unwrap()];
    args.extend_from_slice(TINY);
    let out = Command::new(BIN)
        .args(&args)
        .env("HDMI_LAB_OUT", &env_root)
        .output()
        .unwrap();
    assert_code(&out, 0);
    assert!(flag_root.join("hdmi_m2_l0.5_s9").is_dir());
    assert!(!env_root.join("hdmi_m2_l0.5_s9_2").exists());
}

#[test]
fn source_only_run_skips_adaptation() {
    let out_root = fresh_dir("source_only");
    let out = run_tiny(&[
        "run",
        "--out",
        out_root.to_str().unwrap(),
        "--objective",
        "source_only",
    ]);
    assert_code(&out, 0);
    let dir = out_root.join("source_only_m2_l0.5_s1");
    let config = read_json(&dir.join("config.json"));
    assert_eq!(config["adapt"], serde_json::Value::Null);
    // The run log is the source-training log; the checkpoints match because
    // no adaptation happened.
    let src = std::fs::read(dir.join("source.ckpt.json")).unwrap();
    let adapted = std::fs::read(dir.join("adapted.ckpt.json")).unwrap();
    assert_eq!(src, adapted);
}

#[test]
fn blobs_preset_resolves_to_three_gaussians() {
    let out_root = fresh_dir("blobs");
    let out = run_tiny(&[
        "run",
        "--preset",
        "blobs",
        "--out",
        out_root.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let report = read_json(&out_root.join("hdmi_m2_l0.5_s1").join("report.json"));
    assert_eq!(report["config"]["shift"]["generator"], "gauss_blobs");
    assert_eq!(report["config"]["shift"]["k"], 3);
    assert_eq!(
        report["analysis"]["per_class_accuracy"]
            .as_array()
            .unwrap()
            .len(),
        3
    );
}
