use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const DEFAULT: &str = include_str!("../../../configs/default.toml");

fn short_config(dir: &Path) -> PathBuf {
    let text = DEFAULT
        .replace("total_iterations = 1700", "total_iterations = 30")
        .replace("stage_boundary = 700", "stage_boundary = 15")
        .replace("metric_every = 100", "metric_every = 10")
        .replace("reference_samples = 2000", "reference_samples = 200")
        .replace("steps = 20000", "steps = 30")
        .replace("dump_draws = 256", "dump_draws = 8")
        .replace("render_views = 8", "render_views = 2");
    let p = dir.join("short.toml");
    fs::write(&p, text).unwrap();
    p
}

fn tracelab(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tracelab"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("spawn tracelab")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn verify_passes_and_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    ok(&tracelab(d.path(), &["--out", "a", "verify"]));
    ok(&tracelab(d.path(), &["--out", "b", "verify"]));
    let a = read(d.path().join("a/verify/report.json"));
    assert_eq!(a, read(d.path().join("b/verify/report.json")));
    let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert!(v["report"]["checks"].as_array().unwrap().len() >= 12);
    assert_eq!(v["report"]["all_passed"], true);
}

#[test]
fn verify_detects_injected_fault() {
    let d = tempfile::tempdir().unwrap();
    let out = tracelab(d.path(), &["--out", "o", "verify", "--inject-gamma-offset", "1e-3"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bridge_moments_ode"));
}

#[test]
fn distill_reruns_are_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    let cfg = short_config(d.path());
    let cfg = cfg.to_str().unwrap();
    for out in ["a", "b"] {
        ok(&tracelab(d.path(), &["--config", cfg, "--out", out, "distill", "--method", "trace"]));
    }
    for f in [
        "run.jsonl",
        "summary.txt",
        "particles.csv",
        "dumps.json",
        "renders/view_0.png",
        "renders/view_1.pgm",
        "dumps/iter_0_mean.png",
        "dumps/iter_30_magnitude.pgm",
    ] {
        assert_eq!(
            read(d.path().join("a/distill/trace").join(f)),
            read(d.path().join("b/distill/trace").join(f)),
            "{f}"
        );
    }
}

#[test]
fn distill_with_zero_iterations_keeps_initial_particles() {
    let d = tempfile::tempdir().unwrap();
    let text = DEFAULT
        .replace("total_iterations = 1700", "total_iterations = 0")
        .replace("stage_boundary = 700", "stage_boundary = 0")
        .replace("reference_samples = 2000", "reference_samples = 100")
        .replace("render_views = 8", "render_views = 1");
    fs::write(d.path().join("zero.toml"), &text).unwrap();
    ok(&tracelab(d.path(), &["--config", "zero.toml", "--out", "o", "distill", "--method", "sds"]));
    let run = fs::read_to_string(d.path().join("o/distill/sds/run.jsonl")).unwrap();
    assert!(!run.lines().any(|l| l.contains("\"kind\":\"iteration\"")));
    assert!(run.contains("completed"));
    let config = tracelab_core::config::RunConfig::from_toml_str(&text).unwrap();
    let csv = fs::read_to_string(d.path().join("o/distill/sds/particles.csv")).unwrap();
    let written: Vec<Vec<f64>> = csv
        .lines()
        .skip(2)
        .map(|l| l.split_once(',').unwrap().1.split(' ').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(written, config.build_particles());
}

#[test]
fn sweep_results_do_not_depend_on_jobs() {
    let d = tempfile::tempdir().unwrap();
    let cfg = short_config(d.path());
    let cfg = cfg.to_str().unwrap();
    let args = |out: &'static str, jobs: &'static str| {
        vec![
            "--config", cfg, "--out", out, "--jobs", jobs, "sweep", "--method", "sds,trace", "--cfg-weights", "5,20",
            "--seeds", "0,1",
        ]
    };
    ok(&tracelab(d.path(), &args("a", "1")));
    ok(&tracelab(d.path(), &args("b", "3")));
    for f in ["results.csv", "summary.csv", "stability.json", "sliced_w1_vs_cfg.png"] {
        assert_eq!(read(d.path().join("a/sweep").join(f)), read(d.path().join("b/sweep").join(f)), "{f}");
    }
    let rows = fs::read_to_string(d.path().join("a/sweep/results.csv")).unwrap();
    assert_eq!(rows.lines().filter(|l| l.contains(",completed,")).count(), 8);
}

#[test]
fn single_run_sweep() {
    let d = tempfile::tempdir().unwrap();
    let cfg = short_config(d.path());
    let out = tracelab(
        d.path(),
        &["--config", cfg.to_str().unwrap(), "--out", "o", "sweep", "--method", "trace", "--cfg-weights", "7.5", "--seeds", "3"],
    );
    ok(&out);
    let rows = fs::read_to_string(d.path().join("o/sweep/results.csv")).unwrap();
    assert!(rows.starts_with("# config_hash="));
    assert_eq!(rows.lines().count(), 3);
    assert!(d.path().join("o/sweep/runs/trace_cfg7.5_seed3.jsonl").exists());
}

#[test]
fn train_score_zero_steps_and_determinism() {
    let d = tempfile::tempdir().unwrap();
    let cfg = short_config(d.path());
    let cfg = cfg.to_str().unwrap();
    ok(&tracelab(d.path(), &["--config", cfg, "--out", "a", "train-score"]));
    ok(&tracelab(d.path(), &["--config", cfg, "--out", "b", "train-score"]));
    for f in ["model.json", "model.bin", "losses.csv", "report.json"] {
        assert_eq!(read(d.path().join("a/train-score").join(f)), read(d.path().join("b/train-score").join(f)), "{f}");
    }

    let zero = fs::read_to_string(cfg).unwrap().replace("steps = 30", "steps = 0");
    fs::write(d.path().join("zero.toml"), &zero).unwrap();
    ok(&tracelab(d.path(), &["--config", "zero.toml", "--out", "z", "train-score"]));
    let r: serde_json::Value = serde_json::from_slice(&read(d.path().join("z/train-score/report.json"))).unwrap();
    assert_eq!(r["steps"], 0);

    let config = tracelab_core::config::RunConfig::from_toml_str(&zero).unwrap();
    let (init, _) = config.build_base(&config.build_prior().unwrap()).unwrap();
    let load = |dir: &str| tracelab_core::nn::load_snapshot(&d.path().join(dir).join("train-score/model.json")).unwrap();
    assert_eq!(load("z").model.base, init);
    assert_ne!(load("a").model.base, init);
}

#[test]
fn dump_gradients_and_plot() {
    let d = tempfile::tempdir().unwrap();
    let cfg = short_config(d.path());
    let cfg = cfg.to_str().unwrap();
    ok(&tracelab(d.path(), &["--config", cfg, "--out", "o", "dump-gradients"]));
    let r: serde_json::Value = serde_json::from_slice(&read(d.path().join("o/dump-gradients/report.json"))).unwrap();
    assert!(r["sds_mean_variance"].as_f64().unwrap().is_finite());
    assert!(r["trace_mean_variance"].as_f64().unwrap().is_finite());
    for f in ["sds_magnitude.png", "trace_mean.pgm"] {
        assert!(d.path().join("o/dump-gradients").join(f).exists(), "{f}");
    }

    ok(&tracelab(d.path(), &["--config", cfg, "--out", "o", "distill"]));
    ok(&tracelab(d.path(), &["--out", "o", "plot", "--input", "o/distill/trace/run.jsonl"]));
    let png = read(d.path().join("o/plot/run.png"));
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
    let bad = tracelab(d.path(), &["--out", "o", "plot", "--input", cfg]);
    assert!(!bad.status.success());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("bad.toml"), format!("{DEFAULT}\nlearning_rate = 3\n")).unwrap();
    let out = tracelab(d.path(), &["--config", "bad.toml", "--out", "o", "verify"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    assert!(!d.path().join("o").exists());
}

#[test]
fn outputs_stay_under_out_dir() {
    let d = tempfile::tempdir().unwrap();
    let cfg = short_config(d.path());
    ok(&tracelab(d.path(), &["--config", cfg.to_str().unwrap(), "--out", "o", "distill"]));
    let mut top: Vec<String> = fs::read_dir(d.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    top.sort();
    assert_eq!(top, vec!["o", "short.toml"]);
}
