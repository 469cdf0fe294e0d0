use std::path::Path;
use std::process::Command;

use trumpetflow::io::{read_checkpoint, Dataset};
use trumpetflow::problems::ProblemKind;
use trumpetflow_cli::{cmd_evaluate, cmd_generate, cmd_train, run, RunConfig, EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, EXIT_VERIFY_FAILED};

fn args(dir: &Path, extra: &[&str]) -> Vec<String> {
    let mut v = vec!["trumpetflow".to_string()];
    v.extend(extra.iter().map(|s| s.to_string()));
    v.extend(["--out".to_string(), dir.display().to_string()]);
    v
}

fn quick(problem: ProblemKind, dir: &Path) -> RunConfig {
    let mut c = RunConfig::defaults(problem);
    c.apply_quick();
    c.out = dir.to_path_buf();
    c
}

#[test]
fn generate_torus_supplement_size() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(args(dir.path(), &["generate", "--problem", "torus", "--seed", "3"])), EXIT_OK);
    let d = Dataset::read(&dir.path().join("train.bin")).unwrap();
    assert_eq!((d.header.count, d.header.x_dim, d.header.y_dim, d.header.seed), (18_000, 3, 1, 3));
    let bytes = std::fs::read(dir.path().join("train.bin")).unwrap();
    let header_end = bytes.len() - 18_000 * 4 * 8;
    assert_eq!(bytes[header_end - 1], b'\n');
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn same_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert_eq!(run(args(d.path(), &["generate", "--problem", "grf-inpaint", "--quick", "--seed", "9"])), EXIT_OK);
    }
    for f in ["train.bin", "test.bin", "manifest.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn unknown_problem_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_trumpetflow"))
        .args(["generate", "--problem", "sphere", "--out"])
        .arg(dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(EXIT_USAGE));
    assert_eq!(run(["trumpetflow", "explode"]), EXIT_USAGE);
    assert_eq!(run(["trumpetflow", "--help"]), EXIT_OK);
}

#[test]
fn train_writes_metrics_and_resumes_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(ProblemKind::Torus, dir.path());
    cmd_generate(&cfg).unwrap();
    cmd_train(&cfg, false).unwrap();
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("phase,epoch,step,loss"));
    assert!(lines.count() >= cfg.epochs_mse + cfg.epochs_ml);
    let full = std::fs::read(dir.path().join("checkpoint.bin")).unwrap();

    // interrupt after a few MSE epochs, then resume with the full schedule
    let part_dir = tempfile::tempdir().unwrap();
    let mut part = cfg.clone();
    part.out = part_dir.path().to_path_buf();
    cmd_generate(&part).unwrap();
    let mut short = part.clone();
    short.epochs_mse = 2;
    short.epochs_ml = 0;
    cmd_train(&short, false).unwrap();
    let ck = read_checkpoint(&part_dir.path().join("checkpoint.bin")).unwrap();
    assert_eq!((ck.state.phase, ck.state.epoch), (trumpetflow::training::Phase::Mse, 2));
    // pretend the interrupted run had the full schedule
    trumpetflow::io::write_checkpoint(&part_dir.path().join("checkpoint.bin"), &ck.model, &part.train_config(), &ck.state).unwrap();
    cmd_train(&part, true).unwrap();
    assert_eq!(std::fs::read(part_dir.path().join("checkpoint.bin")).unwrap(), full);
    assert_eq!(std::fs::read_to_string(part_dir.path().join("metrics.csv")).unwrap(), metrics);
}

#[test]
fn resume_rejects_a_different_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(ProblemKind::Torus, dir.path());
    cmd_generate(&cfg).unwrap();
    let mut short = cfg.clone();
    short.epochs_ml = 1;
    cmd_train(&short, false).unwrap();
    assert!(cmd_train(&cfg, true).is_err());
}

#[test]
fn divergence_exits_2_and_keeps_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, "schema_version = 1\nproblem = \"torus\"\nlr = 1e8\nepochs_mse = 3\nepochs_ml = 3\n").unwrap();
    let cfg = cfg_path.display().to_string();
    assert_eq!(run(args(dir.path(), &["generate", "--quick", "--config", &cfg])), EXIT_OK);
    assert_eq!(run(args(dir.path(), &["train", "--quick", "--config", &cfg])), EXIT_DIVERGED);
    assert!(read_checkpoint(&dir.path().join("checkpoint.bin")).is_ok());
}

#[test]
fn evaluate_grf_reports_oracle_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(ProblemKind::GrfInpaint, dir.path());
    assert_eq!(cfg.k, 25);
    cmd_generate(&cfg).unwrap();
    cmd_train(&cfg, false).unwrap();
    let s = cmd_evaluate(&cfg).unwrap();
    assert_eq!((s.items, s.k), (cfg.test_size, 25));
    let eval = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    let header: Vec<&str> = eval.lines().next().unwrap().split(',').collect();
    assert!(header.contains(&"model_mmse_snr") && header.contains(&"oracle_mmse_snr"));
    assert_eq!(eval.lines().count(), cfg.test_size + 1);
    let images = std::fs::read_to_string(dir.path().join("eval_images.csv")).unwrap();
    let d = cfg.image_side * cfg.image_side;
    let samples = images.lines().filter(|l| l.starts_with("0,sample,")).count();
    assert_eq!(samples, 25 * d);
    assert_eq!(run(args(dir.path(), &["map", "--problem", "grf-inpaint", "--quick"])), EXIT_OK);
    assert_eq!(std::fs::read_to_string(dir.path().join("map.csv")).unwrap().lines().count(), cfg.test_size * d + 1);
}

#[test]
fn fiber_evaluation_sweeps_every_six_degrees() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(ProblemKind::Mobius, dir.path());
    cfg.k = 4;
    cmd_generate(&cfg).unwrap();
    cmd_train(&cfg, false).unwrap();
    cmd_evaluate(&cfg).unwrap();
    let eval = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    let angles: Vec<f64> = eval.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(angles.len(), 60);
    assert!(angles.iter().enumerate().all(|(i, a)| (a - 6.0 * i as f64).abs() < 1e-9));
    let pts = std::fs::read_to_string(dir.path().join("fiber_samples.csv")).unwrap();
    assert_eq!(pts.lines().count(), 60 * 4 + 1);
}

#[test]
fn evaluate_rejects_a_mismatched_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(ProblemKind::Torus, dir.path());
    cmd_generate(&cfg).unwrap();
    cmd_train(&cfg, false).unwrap();
    let mut other = cfg.clone();
    other.h_blocks += 1;
    let err = cmd_evaluate(&other).unwrap_err().to_string();
    assert!(err.contains("expected") && err.contains("found") && err.contains("\"h_blocks\""), "{err}");
}

#[test]
fn verify_summary_and_fault_injection() {
    let out = Command::new(env!("CARGO_BIN_EXE_trumpetflow")).args(["verify", "--quick"]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_OK));
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["round-trip", "log-det", "fvc", "gradient", "posterior-oracle"] {
        assert!(text.contains(name), "{text}");
    }
    assert!(text.contains("5/5 suites passed"));
    let out = Command::new(env!("CARGO_BIN_EXE_trumpetflow"))
        .args(["verify", "--quick", "--inject-fault", "actnorm-logdet-sign"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_VERIFY_FAILED));
    let text = String::from_utf8(out.stdout).unwrap();
    let logdet = text.lines().find(|l| l.starts_with("log-det")).unwrap();
    assert!(logdet.ends_with("FAIL"), "{text}");
    assert!(text.lines().find(|l| l.starts_with("round-trip")).unwrap().ends_with("PASS"));
}

#[test]
fn quick_fiber_preset_is_about_200_steps() {
    let cfg = RunConfig::defaults(ProblemKind::Torus);
    assert_eq!((cfg.g_blocks, cfg.h_blocks, cfg.train_size), (24, 32, 18_000));
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(ProblemKind::Torus, dir.path());
    assert_eq!((cfg.g_blocks, cfg.h_blocks), (4, 6));
    let steps = (cfg.epochs_mse + cfg.epochs_ml) * cfg.train_size.div_ceil(cfg.batch_size);
    assert_eq!(steps, 200);
}
