//! End-to-end tests of the `dcton` binary: exit codes, subcommand wiring
//! and byte-level determinism of the artifacts.

use std::path::Path;
use std::process::{Command, Output};

fn dcton(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcton"))
        .args(args)
        .output()
        .expect("spawn dcton")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Width and height of a PNG straight from its IHDR chunk.
fn png_size(path: &Path) -> (u32, u32) {
    let bytes = std::fs::read(path).expect("read png");
    let w = u32::from_be_bytes(bytes[16..20].try_into().unwrap());
    let h = u32::from_be_bytes(bytes[20..24].try_into().unwrap());
    (w, h)
}

#[test]
fn help_exits_zero_and_lists_subcommands() {
    let out = dcton(&["--help"]);
    assert_eq!(exit_code(&out), 0);
    let text = stdout(&out);
    for sub in ["gen-data", "pretrain-stn", "train", "infer", "eval", "grid"] {
        assert!(text.contains(sub), "help does not mention {sub}");
    }
}

#[test]
fn usage_errors_exit_two() {
    // No subcommand at all.
    assert_eq!(exit_code(&dcton(&[])), 2);
    // Unknown subcommand.
    assert_eq!(exit_code(&dcton(&["frobnicate"])), 2);
    // Unknown flag.
    assert_eq!(exit_code(&dcton(&["gen-data", "--out", "/tmp/x", "--frob"])), 2);
    // Malformed --size value.
    let out = dcton(&["gen-data", "--out", "/tmp/x", "--size", "40q"]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("HxW"));
    // Unknown metric backend.
    let out = dcton(&["eval", "--reference", "/a", "--generated", "/b", "--backend", "zzz"]);
    assert_eq!(exit_code(&out), 2);
    // Grid image count that is not a multiple of 3 (checked before any I/O).
    let out = dcton(&["grid", "--out", "/tmp/g.png", "/a.png", "/b.png"]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("multiple of 3"));
    // Grid with no images at all.
    assert_eq!(exit_code(&dcton(&["grid", "--out", "/tmp/g.png"])), 2);
}

#[test]
fn runtime_errors_exit_one() {
    let out = dcton(&[
        "infer",
        "--checkpoint",
        "/nonexistent",
        "--person",
        "/nonexistent.png",
        "--clothes",
        "/nonexistent.png",
        "--descriptor",
        "/nonexistent.tns",
        "--parse",
        "/nonexistent.png",
        "--out",
        "/tmp/never.png",
    ]);
    assert_eq!(exit_code(&out), 1);
    assert!(!stderr(&out).is_empty());

    let out = dcton(&["eval", "--reference", "/nonexistent", "--generated", "/nonexistent"]);
    assert_eq!(exit_code(&out), 1);

    let out = dcton(&["train", "--data", "/nonexistent", "--out", "/tmp/never"]);
    assert_eq!(exit_code(&out), 1);

    // Bad dataset size is rejected by the generator, not the parser.
    let out = dcton(&["gen-data", "--out", "/tmp/never-ds", "--size", "40x40"]);
    assert_eq!(exit_code(&out), 1);
    assert!(stderr(&out).contains("divisible by 16"));
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let root = tmp.path();
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();

    // Dataset generation is deterministic in the seed.
    let out = dcton(&[
        "gen-data", "--out", &p("ds"), "--count", "6", "--size", "32x32", "--styles", "3",
        "--seed", "9",
    ]);
    assert_eq!(exit_code(&out), 0, "gen-data failed: {}", stderr(&out));
    assert!(stdout(&out).contains("wrote 6 samples"));
    let out = dcton(&[
        "gen-data", "--out", &p("ds2"), "--count", "6", "--size", "32x32", "--styles", "3",
        "--seed", "9",
    ]);
    assert_eq!(exit_code(&out), 0);
    for file in ["person/00000.png", "clothes/00003.png", "descriptor/00005.tns", "manifest.txt"]
    {
        let a = std::fs::read(root.join("ds").join(file)).expect("read first");
        let b = std::fs::read(root.join("ds2").join(file)).expect("read second");
        assert_eq!(a, b, "{file} differs between same-seed runs");
    }

    // gen-data never mutates an input dataset; train/infer read it only.
    let manifest_before = std::fs::read(root.join("ds/manifest.txt")).unwrap();

    // Warp pretraining alone.
    let out = dcton(&[
        "pretrain-stn", "--data", &p("ds"), "--out", &p("pre"), "--epochs", "1",
        "--batch-size", "2", "--seed", "5",
    ]);
    assert_eq!(exit_code(&out), 0, "pretrain-stn failed: {}", stderr(&out));
    assert!(root.join("pre/pretrain_log.csv").exists());
    assert!(root.join("pre/checkpoint_final/model/manifest.txt").exists());

    // Full tiny training run.
    let out = dcton(&[
        "train", "--data", &p("ds"), "--out", &p("run"), "--epochs", "1", "--stn-epochs", "1",
        "--batch-size", "2", "--seed", "5",
    ]);
    assert_eq!(exit_code(&out), 0, "train failed: {}", stderr(&out));
    let rows = stdout(&out);
    assert!(rows.contains("iteration,adv,cyc,pre,vgg,mpn,total"));
    assert!(root.join("run/loss_log.csv").exists());
    assert!(root.join("run/checkpoint_final/model/manifest.txt").exists());

    // Inference: correct size, debug intermediates, byte-determinism.
    let infer_args = |out_png: &str| {
        vec![
            "infer".to_string(),
            "--checkpoint".into(),
            p("run/checkpoint_final"),
            "--person".into(),
            p("ds/person/00002.png"),
            "--clothes".into(),
            p("ds/clothes/00003.png"),
            "--descriptor".into(),
            p("ds/descriptor/00002.tns"),
            "--parse".into(),
            p("ds/parse/00002.png"),
            "--out".into(),
            p(out_png),
        ]
    };
    let mut first = infer_args("try1.png");
    first.push("--debug".into());
    let first: Vec<&str> = first.iter().map(String::as_str).collect();
    let out = dcton(&first);
    assert_eq!(exit_code(&out), 0, "infer failed: {}", stderr(&out));
    assert_eq!(png_size(&root.join("try1.png")), (32, 32));
    for suffix in ["warped_clothes", "mask_clothes", "mask_skin", "skin"] {
        assert!(
            root.join(format!("try1_{suffix}.png")).exists(),
            "missing debug intermediate {suffix}"
        );
    }
    let second = infer_args("try2.png");
    let second: Vec<&str> = second.iter().map(String::as_str).collect();
    assert_eq!(exit_code(&dcton(&second)), 0);
    assert_eq!(
        std::fs::read(root.join("try1.png")).unwrap(),
        std::fs::read(root.join("try2.png")).unwrap(),
        "inference is not byte-deterministic"
    );

    // Grid of two (person, clothes, result) triples of 32x32 images:
    // 2 rows x 3 columns with 4 px gutters = 112x76.
    let out = dcton(&[
        "grid", "--out", &p("grid.png"),
        &p("ds/person/00002.png"), &p("ds/clothes/00003.png"), &p("try1.png"),
        &p("ds/person/00002.png"), &p("ds/clothes/00003.png"), &p("try2.png"),
    ]);
    assert_eq!(exit_code(&out), 0, "grid failed: {}", stderr(&out));
    assert_eq!(png_size(&root.join("grid.png")), (112, 76));

    // Metrics of a directory against itself: perfect similarity.
    let out = dcton(&[
        "eval", "--reference", &p("ds/person"), "--generated", &p("ds/person"),
        "--splits", "2", "--csv", &p("report.csv"),
    ]);
    assert_eq!(exit_code(&out), 0, "eval failed: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("ssim:      1.0000"), "unexpected eval output:\n{text}");
    assert!(text.contains("fid:       0.0000"), "unexpected eval output:\n{text}");
    let csv = std::fs::read_to_string(root.join("report.csv")).unwrap();
    assert!(csv.starts_with("pairs,ssim,fid,is_mean,is_std"));

    // The dataset directory was never written to.
    assert_eq!(std::fs::read(root.join("ds/manifest.txt")).unwrap(), manifest_before);
}
