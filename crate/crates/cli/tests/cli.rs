use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use twostream_core::c2f::{BackboneConfig, C2fConfig};
use twostream_core::data::SyntheticConfig;
use twostream_core::fusion::FusionConfig;
use twostream_core::grouper::GrouperConfig;
use twostream_core::harness::{read_json, AblationConfig, EvalReport, HarnessConfig};
use twostream_core::trainer::TrainConfig;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twostream"))
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn small_config(dir: &Path) -> String {
    let cfg = HarnessConfig {
        data: SyntheticConfig {
            classes: 4,
            videos_per_class: 8,
            frames: 30,
            channels: 2,
            height: 16,
            width: 16,
            patch_size: 6,
            onset_margin: 3,
            confusable_pairs: vec![[0, 1]],
            share_variant_patches: false,
            ..SyntheticConfig::default()
        },
        grouper: GrouperConfig {
            channels: [2, 4],
            fraction: 0.25,
            iterations: 5,
            batch_size: 4,
            ..GrouperConfig::default()
        },
        train: TrainConfig {
            batch_size: 4,
            iterations: 2,
            decay_interval: 1,
            c2f: C2fConfig {
                backbone: BackboneConfig {
                    input_channels: 2,
                    input_height: 16,
                    input_width: 16,
                    stage_channels: vec![2, 2, 3, 3, 4],
                    side_stages: vec![3, 4, 5],
                    feature_dim: 4,
                    head_hidden: 4,
                    feature_relu: true,
                },
                lstm_hidden: 4,
                levels: vec![1, 2, 3],
            },
            fusion: FusionConfig {
                lstm_hidden: 4,
                ..FusionConfig::default()
            },
            ..TrainConfig::default()
        },
        ablation: AblationConfig {
            modes: vec!["baseline".into()],
            seeds: vec![0],
        },
        ..HarnessConfig::default()
    };
    let path = dir.join("small.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn help_succeeds_for_every_subcommand() {
    assert_eq!(code(&run(&["--help"])), 0);
    for sub in [
        "gen-data",
        "pretrain-grouper",
        "train",
        "eval",
        "ablate",
        "report",
    ] {
        let out = run(&[sub, "--help"]);
        assert_eq!(code(&out), 0, "{sub}");
        assert!(
            String::from_utf8_lossy(&out.stdout).contains("--out-dir"),
            "{sub}"
        );
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_string_lossy().into_owned();
    let missing = dir.path().join("nope.toml");
    let out = run(&[
        "gen-data",
        "--config",
        missing.to_str().unwrap(),
        "--out-dir",
        &out_dir,
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("nope.toml"), "{}", stderr(&out));

    assert_eq!(
        code(&run(&[
            "train",
            "--mode",
            "co2fi+asynX",
            "--out-dir",
            &out_dir
        ])),
        1
    );
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["train", "--iters", "many"])), 1);

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nitertions = 3\n").unwrap();
    let out = run(&[
        "gen-data",
        "--config",
        bad.to_str().unwrap(),
        "--out-dir",
        &out_dir,
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("itertions"), "{}", stderr(&out));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_string_lossy().into_owned();
    let out = run(&["train", "--mode", "baseline", "--out-dir", &out_dir]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("gen-data"), "{}", stderr(&out));
}

#[test]
fn small_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = out_dir.to_string_lossy().into_owned();
    for step in [
        vec!["gen-data", "--config", &config, "--out-dir", &out],
        vec!["pretrain-grouper", "--config", &config, "--out-dir", &out],
        vec![
            "train",
            "--config",
            &config,
            "--out-dir",
            &out,
            "--mode",
            "co2fi+asyn5",
        ],
        vec![
            "eval",
            "--config",
            &config,
            "--out-dir",
            &out,
            "--mode",
            "co2fi+asyn5",
        ],
        vec!["report", "--config", &config, "--out-dir", &out],
    ] {
        let o = run(&step);
        assert_eq!(code(&o), 0, "{}: {}", step[0], stderr(&o));
    }
    assert!(out_dir.join("data/manifest.json").is_file());
    assert!(out_dir.join("groupers/pretrain.json").is_file());
    for anchor in ["anchor_appearance", "anchor_motion"] {
        let m = out_dir.join("models/co2fi+asyn5").join(anchor);
        assert!(m.join("final.ckpt").is_file());
        assert_eq!(
            fs::read_to_string(m.join("train_log.jsonl"))
                .unwrap()
                .lines()
                .count(),
            2
        );
    }
    let report: EvalReport = read_json(&out_dir.join("reports/co2fi+asyn5.json")).unwrap();
    assert!((0.0..=1.0).contains(&report.accuracy));
    assert_eq!(
        report.confusion.iter().flatten().sum::<usize>(),
        report.videos
    );
    assert!(!report.grouper_hashes.is_empty());
    let summary = fs::read_to_string(out_dir.join("reports/summary.csv")).unwrap();
    assert!(summary.starts_with("schema_version,mode,accuracy"));
    assert_eq!(summary.lines().count(), 2);
}

#[test]
fn ablate_reports_unknown_modes_after_writing_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_string_lossy().into_owned();
    let o = run(&[
        "ablate",
        "--config",
        &config,
        "--out-dir",
        &out_s,
        "--modes",
        "baseline,nonsense",
        "--seed",
        "3",
    ]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("nonsense"));
    let csv = fs::read_to_string(out.join("ablation/ablation.csv")).unwrap();
    assert!(csv.starts_with("schema_version,row_type,mode,seed,accuracy,std,runs"));
    assert!(csv.lines().any(|l| l.contains(",baseline,3,")), "{csv}");
}
