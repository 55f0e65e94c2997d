use std::path::Path;
use std::process::{Command, Output};

use vidpriv::pipeline::run_seed;
use vidpriv::ExperimentConfig;

fn vidpriv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidpriv"))
        .args(args)
        .env("VIDPRIV_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstderr: {}", o.status, String::from_utf8_lossy(&o.stderr));
}

/// Desk shapes shrunk to seconds: 4x16x16 clips, width 12, one epoch per phase.
fn tiny_config(dir: &Path) -> (ExperimentConfig, String) {
    let mut c = ExperimentConfig::desk();
    c.data.frames = 4;
    c.data.height = 16;
    c.data.width = 16;
    c.data.train_count = 16;
    c.data.test_count = 8;
    c.model.dim = 12;
    c.model.heads = 2;
    c.model.sparsity.layers_per_block = 1;
    c.model.anonymizer_layers = 1;
    c.recognizer.dim = 12;
    c.recognizer.heads = 2;
    c.recognizer.depth = 1;
    for plan in [&mut c.training.init, &mut c.training.adversarial, &mut c.training.eval] {
        plan.epochs = 1;
        plan.batch_size = 4;
    }
    let path = dir.join("tiny.json");
    c.save(&path).unwrap();
    (c, path.display().to_string())
}

#[test]
fn gen_data_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = vidpriv(&["gen-data", "--seed", "7", "--out", out.to_str().unwrap()]);
    assert_ok(&o);
    assert!(out.join("manifest.json").is_file());
    assert_eq!(std::fs::read_dir(out.join("samples")).unwrap().count(), 280);
}

#[test]
fn bogus_phase_exits_with_usage_error() {
    let o = vidpriv(&["train", "--phase", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn unknown_subcommand_and_bad_config_fail() {
    let o = vidpriv(&["frobnicate"]);
    assert!(!o.status.success());
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"data\": 3}").unwrap();
    let o = vidpriv(&["--config", bad.to_str().unwrap(), "gen-data", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));
}

#[test]
fn phase_by_phase_matches_library_run() {
    let dir = tempfile::tempdir().unwrap();
    let (config, cfg) = tiny_config(dir.path());
    let cli_out = dir.path().join("cli");
    let out = cli_out.to_str().unwrap();
    for phase in ["init", "adversarial", "eval"] {
        assert_ok(&vidpriv(&["--config", &cfg, "--seed", "3", "--out", out, "train", "--phase", phase]));
    }
    let lib_out = dir.path().join("lib");
    run_seed(&config, 3, Some(&lib_out)).unwrap();
    for file in ["init.ckpt", "adversarial.ckpt", "raw.json", "transformed.csv", "transformed.json"] {
        let a = std::fs::read(cli_out.join(file)).unwrap();
        let b = std::fs::read(lib_out.join("seed-3").join(file)).unwrap();
        assert!(a == b, "{file} differs");
    }
}

#[test]
fn eval_on_raw_videos_prints_headline_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = tiny_config(dir.path());
    let data = dir.path().join("data");
    assert_ok(&vidpriv(&["--config", &cfg, "--out", data.to_str().unwrap(), "gen-data"]));
    let o = vidpriv(&["--config", &cfg, "--out", dir.path().to_str().unwrap(), "eval", "--data", data.to_str().unwrap()]);
    assert_ok(&o);
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("top1,cmap,f1"));
    let values: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(values.len(), 3);
    assert!((0.0..=100.0).contains(&values[0]) && (0.0..=100.0).contains(&values[1]));
    assert!((0.0..=1.0).contains(&values[2]));
    assert!(dir.path().join("eval-raw.json").is_file());
}

#[test]
fn transform_dumps_three_frame_sets() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = tiny_config(dir.path());
    let out = dir.path().to_str().unwrap();
    assert_ok(&vidpriv(&["--config", &cfg, "--out", out, "train", "--phase", "init"]));
    let ck = dir.path().join("init.ckpt");
    let o = vidpriv(&["--config", &cfg, "--out", out, "transform", "--checkpoint", ck.to_str().unwrap(), "--index", "2"]);
    assert_ok(&o);
    assert!(stdout(&o).contains("of 8 tubelets"), "{}", stdout(&o));
    for set in ["raw", "sparsified", "transformed"] {
        let n = std::fs::read_dir(dir.path().join("frames").join(set)).unwrap().count();
        assert_eq!(n, 4, "{set}");
    }
}

#[test]
fn checkpoint_from_another_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (mut config, cfg) = tiny_config(dir.path());
    let out = dir.path().to_str().unwrap();
    assert_ok(&vidpriv(&["--config", &cfg, "--out", out, "train", "--phase", "init"]));
    config.training.weights.privacy = 0.9;
    let other = dir.path().join("other.json");
    config.save(&other).unwrap();
    let o = vidpriv(&["--config", other.to_str().unwrap(), "--out", out, "train", "--phase", "adversarial"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("different config"));
}

#[test]
fn alpha_sweep_writes_one_row_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = tiny_config(dir.path());
    let out = dir.path().to_str().unwrap();
    let o = vidpriv(&["--config", &cfg, "--out", out, "ablate", "--sweep", "alpha", "--values", "0.5,0.9"]);
    assert_ok(&o);
    let text = std::fs::read_to_string(dir.path().join("ablate-alpha.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "setting,top1,cmap,f1");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("alpha=0.5,") && lines[2].starts_with("alpha=0.9,"));
    assert_eq!(stdout(&o), text);
}

#[test]
fn dt_sweep_rejects_fractional_lengths() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = tiny_config(dir.path());
    let o = vidpriv(&["--config", &cfg, "--out", dir.path().to_str().unwrap(), "ablate", "--sweep", "dt", "--values", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn grad_check_passes() {
    let o = vidpriv(&["grad-check", "--instances", "4"]);
    assert_ok(&o);
    assert_eq!(stdout(&o).lines().filter(|l| l.ends_with(" ok")).count(), 8);
}
