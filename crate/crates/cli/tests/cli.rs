use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[data.train]
num_scenes = 4
height = 16
width = 16
[data.test]
num_scenes = 2
height = 16
width = 16
[model.unet]
widths = [8, 16]
res_blocks = 1
time_dim = 16
groups = 4
[model.control]
estimator_widths = [4, 8]
condition_channels = 8
regressor_width = 8
[train.stage1]
steps = 3
batch_size = 2
checkpoint_every = 2
[train.stage2]
steps = 2
batch_size = 2
[train.stage3]
steps = 2
batch_size = 2
"#;

fn deblur(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deblur")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    Workspace { _dir: dir, root, config }
}

fn build(ws: &Workspace, name: &str, split: &str) -> PathBuf {
    let out = ws.root.join(name);
    let o = deblur(&["--config", p(&ws.config), "build-data", "--split", split, "--seed", "3", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn unknown_flags_and_subcommands_exit_with_usage() {
    for args in [&["build-data", "--bogus", "1"][..], &["frobnicate"], &[]] {
        let o = deblur(args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    }
    for sub in ["build-data", "pretrain-codec", "train", "infer", "eval", "sweep", "inspect-checkpoint", "plot"] {
        let o = deblur(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        assert!(stdout(&o).contains("Usage"));
    }
}

#[test]
fn bad_config_is_a_validation_error() {
    let ws = workspace();
    fs::write(&ws.config, "[train]\nnot_a_key = 1\n").unwrap();
    let o = deblur(&["--config", p(&ws.config), "build-data", "--out", p(&ws.root.join("d"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("not_a_key"), "{}", stderr(&o));
}

#[test]
fn build_data_is_deterministic() {
    let ws = workspace();
    let run = |out: &str| {
        let o =
            deblur(&["build-data", "--scenes", "4", "--size", "16x16", "--frames", "5,11", "--seed", "7", "--out", p(&ws.root.join(out))]);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o).lines().find(|l| l.starts_with("content_hash")).unwrap().to_string()
    };
    assert_eq!(run("a"), run("b"));
    assert_eq!(fs::read(ws.root.join("a/manifest.txt")).unwrap(), fs::read(ws.root.join("b/manifest.txt")).unwrap());
    let o = deblur(&["build-data", "--size", "16by16", "--out", p(&ws.root.join("c"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn stage_three_needs_stage_one() {
    let ws = workspace();
    let data = build(&ws, "train", "train");
    let run = ws.root.join("run");
    let o = deblur(&["--config", p(&ws.config), "train", "--stage", "3", "--data", p(&data), "--run", p(&run)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("run stage 1 first"), "{}", stderr(&o));
    let o = deblur(&["--config", p(&ws.config), "train", "--stage", "4", "--data", p(&data), "--run", p(&run)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn full_pipeline_through_plots() {
    let ws = workspace();
    let cfg = p(&ws.config);
    let train = build(&ws, "train", "train");
    let test = build(&ws, "test", "test");
    let run = ws.root.join("run");
    for stage in ["1", "2", "3"] {
        let o = deblur(&["--config", cfg, "train", "--stage", stage, "--data", p(&train), "--run", p(&run)]);
        assert!(o.status.success(), "stage {stage}: {}", stderr(&o));
        let csv = fs::read_to_string(run.join(format!("stage{stage}_metrics.csv"))).unwrap();
        let expected = if stage == "1" { 3 } else { 2 };
        assert_eq!(csv.lines().count(), expected + 1, "{csv}");
    }

    let o = deblur(&["--config", cfg, "inspect-checkpoint", p(&run.join("foundation.ckpt"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for key in ["kind = foundation", "widths = [8,16]", "t_max = 1000", "d = 4", "codec_id", "config_hash", "run_config_hash"] {
        assert!(text.contains(key), "missing {key} in\n{text}");
    }

    let report = ws.root.join("out/report.csv");
    let o = deblur(&["--config", cfg, "eval", "--manifest", p(&test), "--report", p(&report), "--t", "predicted", "--run", p(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.lines().nth(1) == Some("sample_id,psnr,ssim,lpips_proxy,t_used"));
    assert!(text.lines().next().unwrap().contains("run_config="));

    let sweep = ws.root.join("out/sweep.csv");
    let o = deblur(&["--config", cfg, "sweep", "--t", "80,200,280", "--manifest", p(&test), "--out", p(&sweep), "--run", p(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&sweep).unwrap().lines().count(), 2 + 3);

    let imgs = test.join("images");
    let restored = ws.root.join("restored");
    let o = deblur(&["--config", cfg, "infer", "--in", p(&imgs), "--out", p(&restored), "--t", "fixed:200", "--run", p(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pngs = fs::read_dir(&restored).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert_eq!(pngs, fs::read_dir(&imgs).unwrap().count());

    let plots = ws.root.join("plots");
    let o = deblur(&["plot", "--sweep", p(&sweep), "--reports", p(&report), "--out", p(&plots)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read_to_string(plots.join("sweep.svg")).unwrap().contains("config="));
    assert!(plots.join("perception_distortion.svg").exists());

    let empty = ws.root.join("empty.csv");
    fs::write(&empty, "").unwrap();
    let o = deblur(&["plot", "--sweep", p(&empty), "--out", p(&ws.root.join("noplots"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!ws.root.join("noplots").exists());
}
