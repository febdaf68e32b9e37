use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lumaflow_core::data::{read_clip, write_clip, write_image};
use lumaflow_core::flow::sample;
use lumaflow_core::metrics::metric_sf;
use lumaflow_core::nn::Checkpoint;
use lumaflow_core::{ConditionSet, SamplerConfig, VelocityNet, VideoClip};
use tempfile::TempDir;

const TINY: &str = r#"{
  "scene": {"frames": 4, "height": 16, "width": 16},
  "train": {
    "lr": 0.001,
    "batch_size": 2,
    "total_steps": 3,
    "net": {"hidden": 8, "depth": 1, "groups": 2, "time_dim": 8}
  },
  "sampler": {"num_steps": 4}
}"#;

fn lumaflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lumaflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = lumaflow(args);
    assert!(
        out.status.success(),
        "lumaflow {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    lumaflow(args).status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(ws.path("tiny.json"), TINY).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn dataset(&self, name: &str, count: usize, paired: bool) -> PathBuf {
        let dir = self.path(name);
        let count = count.to_string();
        let mut args = vec![
            "gen-data",
            "--out",
            s(&dir),
            "--count",
            &count,
            "--seed",
            "3",
            "--config",
        ];
        let cfg = self.path("tiny.json");
        args.push(s(&cfg));
        if paired {
            args.push("--paired");
        }
        ok(&args);
        dir
    }

    fn trained(&self, steps: usize) -> PathBuf {
        let data = self.dataset("train_data", 4, false);
        let ckpt = self.path(&format!("net{steps}.ckpt"));
        let steps = steps.to_string();
        let cfg = self.path("tiny.json");
        ok(&[
            "train",
            "--data",
            s(&data),
            "--config",
            s(&cfg),
            "--out",
            s(&ckpt),
            "--total-steps",
            &steps,
        ]);
        ckpt
    }

    /// A source clip and a reference image written into the workspace.
    fn edit_inputs(&self) -> (PathBuf, PathBuf) {
        let paired = self.dataset("pairs", 1, true);
        let src = paired.join("00000_source.vclp");
        let reference = paired.join("00000_reference.vclp");
        (src, reference)
    }
}

fn loss_rows(path: &Path) -> Vec<Vec<f64>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,loss_fm,loss_consis,loss_total,grad_norm"));
    lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn gen_data_with_zero_count_writes_an_empty_manifest() {
    let ws = Workspace::new();
    let dir = ws.dataset("empty", 0, false);
    let manifest = fs::read_to_string(dir.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 2);
}

#[test]
fn gen_data_is_byte_identical_for_a_seed() {
    let ws = Workspace::new();
    let a = ws.dataset("a", 3, true);
    let b = ws.dataset("b", 3, true);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 3 * 3 + 1);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn gen_data_paired_runs_its_validation_pass() {
    let ws = Workspace::new();
    let dir = ws.path("p");
    let cfg = ws.path("tiny.json");
    let out = ok(&[
        "gen-data",
        "--out",
        s(&dir),
        "--count",
        "2",
        "--paired",
        "--config",
        s(&cfg),
    ]);
    assert!(out.contains("validated 2 paired samples"), "{out}");
}

#[test]
fn configuration_errors_exit_with_one_and_write_nothing() {
    let ws = Workspace::new();
    let bad = ws.path("bad.json");
    fs::write(&bad, r#"{"train": {"learnign_rate": 0.1}}"#).unwrap();
    let out = ws.path("never");
    assert_eq!(
        code(&["gen-data", "--out", s(&out), "--count", "1", "--config", s(&bad)]),
        1
    );
    assert!(!out.exists());

    let invalid = ws.path("invalid.json");
    fs::write(&invalid, r#"{"sampler": {"num_steps": 0}}"#).unwrap();
    assert_eq!(
        code(&["gen-data", "--out", s(&out), "--count", "1", "--config", s(&invalid)]),
        1
    );
    assert!(!out.exists());

    assert_eq!(code(&["gen-data", "--count", "1", "--no-such-flag"]), 1);
    assert_eq!(
        code(&[
            "train",
            "--data",
            s(&ws.path("missing")),
            "--out",
            s(&ws.path("x.ckpt"))
        ]),
        1
    );
    assert!(!ws.path("x.ckpt").exists());
    assert_eq!(code(&["train", "--data", s(&ws.path("missing"))]), 1);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn runtime_failures_exit_with_two() {
    let ws = Workspace::new();
    let (src, reference) = ws.edit_inputs();
    let junk = ws.path("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let out = ws.path("out.vclp");
    assert_eq!(
        code(&[
            "edit",
            "--ckpt",
            s(&junk),
            "--src",
            s(&src),
            "--ref",
            s(&reference),
            "--out",
            s(&out)
        ]),
        2
    );

    // a reference image whose size differs from the clip
    let ckpt = ws.trained(1);
    let small = ws.path("small.vclp");
    write_image(&small, &lumaflow_core::Image::filled(8, 8, 0.5)).unwrap();
    assert_eq!(
        code(&[
            "edit",
            "--ckpt",
            s(&ckpt),
            "--src",
            s(&src),
            "--ref",
            s(&small),
            "--out",
            s(&out)
        ]),
        2
    );
}

#[test]
fn one_step_training_gives_a_loadable_checkpoint() {
    let ws = Workspace::new();
    let ckpt = ws.trained(1);
    let net = VelocityNet::<f32>::from_checkpoint(&Checkpoint::read(&ckpt).unwrap()).unwrap();
    assert_eq!(net.config().hidden, 8);
    assert_eq!(loss_rows(&ckpt.with_extension("csv")).len(), 1);
}

#[test]
fn alpha_zero_reports_but_does_not_weight_consistency() {
    let ws = Workspace::new();
    let data = ws.dataset("d", 4, false);
    let cfg = ws.path("tiny.json");
    let (a, b) = (ws.path("a.ckpt"), ws.path("b.ckpt"));
    ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&a)]);
    ok(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&b),
        "--alpha",
        "0",
    ]);
    for row in loss_rows(&a.with_extension("csv")) {
        assert!(row[2] > 0.0);
        assert!((row[3] - (row[1] + 0.1 * row[2])).abs() < 1e-5, "{row:?}");
    }
    for row in loss_rows(&b.with_extension("csv")) {
        assert!(row[2] > 0.0);
        assert_eq!(row[3], row[1]);
    }
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let ws = Workspace::new();
    let data = ws.dataset("d", 4, false);
    let cfg = ws.path("tiny.json");
    let (full, half, resumed) = (ws.path("full.ckpt"), ws.path("half.ckpt"), ws.path("resumed.ckpt"));
    ok(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&full),
        "--total-steps",
        "3",
    ]);
    ok(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&half),
        "--total-steps",
        "2",
    ]);
    ok(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&resumed),
        "--total-steps",
        "3",
        "--resume",
        s(&half),
    ]);
    assert_eq!(fs::read(&full).unwrap(), fs::read(&resumed).unwrap());
    let tail = loss_rows(&full.with_extension("csv")).pop().unwrap();
    assert_eq!(loss_rows(&resumed.with_extension("csv")), vec![tail]);

    // resuming in place continues the existing loss log
    ok(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&half),
        "--total-steps",
        "3",
        "--resume",
        s(&half),
    ]);
    assert_eq!(fs::read(&full).unwrap(), fs::read(&half).unwrap());
    assert_eq!(
        fs::read(full.with_extension("csv")).unwrap(),
        fs::read(half.with_extension("csv")).unwrap()
    );
}

#[test]
fn edit_is_deterministic_and_writes_frames() {
    let ws = Workspace::new();
    let ckpt = ws.trained(2);
    let (src, reference) = ws.edit_inputs();
    let cfg = ws.path("tiny.json");
    let (a, b) = (ws.path("a.vclp"), ws.path("b.vclp"));
    for out in [&a, &b] {
        let stdout = ok(&[
            "edit",
            "--ckpt",
            s(&ckpt),
            "--src",
            s(&src),
            "--ref",
            s(&reference),
            "--out",
            s(out),
            "--config",
            s(&cfg),
            "--seed",
            "9",
        ]);
        assert!(stdout.contains("\"num_steps\":4"), "{stdout}");
        assert!(stdout.contains("\"seed\":9"), "{stdout}");
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read_dir(ws.path("a_frames")).unwrap().count(), 4);
    let header = fs::read(ws.path("a_frames/frame_000.ppm")).unwrap();
    assert!(header.starts_with(b"P6\n16 16\n255\n"));
}

#[test]
fn edit_with_gamma_zero_is_plain_conditional_sampling() {
    let ws = Workspace::new();
    let ckpt = ws.trained(2);
    let (src, reference) = ws.edit_inputs();
    let out = ws.path("g0.vclp");
    ok(&[
        "edit",
        "--ckpt",
        s(&ckpt),
        "--src",
        s(&src),
        "--ref",
        s(&reference),
        "--out",
        s(&out),
        "--gamma",
        "0",
        "--steps",
        "5",
        "--seed",
        "4",
    ]);
    let net = VelocityNet::<f32>::from_checkpoint(&Checkpoint::read(&ckpt).unwrap()).unwrap();
    let cond = ConditionSet::new(
        read_clip(&src).unwrap(),
        lumaflow_core::data::read_image(&reference).unwrap(),
    )
    .unwrap();
    let cfg = SamplerConfig {
        num_steps: 5,
        seed: 4,
        gamma: 0.0,
        ..Default::default()
    };
    let mut want = sample(&net, &cond, &cfg).unwrap();
    want.clamp01();
    assert_eq!(read_clip(&out).unwrap(), want);
}

#[test]
fn rectification_improves_identity_editing() {
    let ws = Workspace::new();
    let ckpt = ws.trained(3);
    let (src, _) = ws.edit_inputs();
    let clip = read_clip(&src).unwrap();
    let reference = ws.path("frame1.vclp");
    write_image(&reference, &clip.frame(1)).unwrap();
    let mut sf = Vec::new();
    for gamma in ["0", "1"] {
        let out = ws.path(&format!("id{gamma}.vclp"));
        ok(&[
            "edit",
            "--ckpt",
            s(&ckpt),
            "--src",
            s(&src),
            "--ref",
            s(&reference),
            "--out",
            s(&out),
            "--gamma",
            gamma,
        ]);
        sf.push(metric_sf(&clip, &read_clip(&out).unwrap()).unwrap());
    }
    assert!(sf[1] > sf[0], "{sf:?}");
}

#[test]
fn eval_of_identical_static_clips() {
    let ws = Workspace::new();
    let (src, _) = ws.edit_inputs();
    let still = ws.path("still.vclp");
    write_clip(&still, &VideoClip::repeat(&read_clip(&src).unwrap().first_frame(), 4)).unwrap();
    let csv = ws.path("metrics.csv");
    let stdout = ok(&[
        "eval",
        "--src",
        s(&still),
        "--out",
        s(&still),
        "--gt",
        s(&still),
        "--csv",
        s(&csv),
    ]);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "sample,sf,mc,sc_proxy,tc_proxy,psnr_gt");
    assert_eq!(lines[1], "still,1.000000,1.000000,0.000000,1.000000,99.000000");
    assert!(lines[2].starts_with("mean,"));
    ok(&["eval", "--src", s(&still), "--out", s(&still), "--csv", s(&csv)]);
    let written = fs::read_to_string(&csv).unwrap();
    assert_eq!(written.lines().filter(|l| l.starts_with("sample,")).count(), 1);
    assert_eq!(written.lines().count(), 5);
}

#[test]
fn demo_identity_prints_a_comparison_table() {
    let ws = Workspace::new();
    let ckpt = ws.trained(1);
    let (src, _) = ws.edit_inputs();
    let stdout = ok(&["demo-identity", "--ckpt", s(&ckpt), "--src", s(&src), "--steps", "4"]);
    let lines: Vec<Vec<&str>> = stdout.lines().map(|l| l.split_whitespace().collect()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], ["metric", "gamma=0", "gamma=1", "delta"]);
    for (row, name) in lines[1..].iter().zip(["sf", "psnr"]) {
        assert_eq!(row[0], name);
        let v: Vec<f64> = row[1..].iter().map(|x| x.parse().unwrap()).collect();
        assert!((v[2] - (v[1] - v[0])).abs() < 2e-4, "{row:?}");
    }
}
