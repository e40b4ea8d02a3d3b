use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lrseg::video::save_mask;
use ndarray::Array3;

fn lrseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lrseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = lrseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn listing(dir: &Path) -> BTreeSet<String> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect()
}

#[test]
fn every_subcommand_has_help_listing_its_flags() {
    let expected: &[(&str, &[&str])] = &[
        ("run", &["--in", "--truth", "--out", "--force", "--config", "--set", "--wd-mode", "--time-masking", "--seed", "--epochs"]),
        ("phantom", &["--spec", "--kind", "--seed", "--out"]),
        ("decompose", &["--in", "--out", "--force", "--factorization", "--epochs"]),
        ("detect", &["--sparse", "--model", "--out", "--wd-mode", "--time-masking"]),
        ("segment", &["--sparse", "--roi", "--out", "--postprocess"]),
        ("evaluate", &["--mask", "--truth", "--roi", "--truth-meta", "--sample-frames", "--out"]),
        ("grid", &["--axes", "--seeds", "--out"]),
    ];
    for (cmd, flags) in expected {
        let out = ok(&[cmd, "--help"]);
        let text = String::from_utf8(out.stdout).unwrap();
        for flag in *flags {
            assert!(text.contains(flag), "`{cmd} --help` does not mention {flag}");
        }
    }
    assert!(ok(&["--help"]).status.success());
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = lrseg(&["run", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_rejects_mismatched_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.lrse"), dir.path().join("b.lrse"));
    save_mask(&Array3::from_elem((2, 4, 4), true), 25.0, &a).unwrap();
    save_mask(&Array3::from_elem((2, 4, 5), true), 25.0, &b).unwrap();
    let out = lrseg(&["evaluate", "--mask", p(&a), "--truth", p(&b), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("(2, 4, 4)") && err.contains("(2, 4, 5)"), "{err}");
}

#[test]
fn default_run_writes_exactly_the_declared_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = ok(&["run", "--seed", "0", "--out", p(&run)]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("roi top="), "{stdout}");
    let expected: BTreeSet<String> = [
        "config.cfg",
        "model.nmf",
        "loss_trace.csv",
        "roi.json",
        "mask.lrse",
        "report.csv",
        "report.json",
    ]
    .into_iter()
    .map(String::from)
    .collect();
    assert_eq!(listing(&run), expected);
}

#[test]
fn reruns_are_byte_identical_and_need_force() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = |d: &Path| vec!["run".to_string(), "--epochs".into(), "2".into(), "--out".into(), p(d).into()];
    let run = |d: &Path| ok(&args(d).iter().map(String::as_str).collect::<Vec<_>>());
    run(&a);
    run(&b);
    assert_eq!(fs::read(a.join("mask.lrse")).unwrap(), fs::read(b.join("mask.lrse")).unwrap());
    assert_eq!(fs::read(a.join("model.nmf")).unwrap(), fs::read(b.join("model.nmf")).unwrap());

    let again = lrseg(&args(&a).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    let mut forced = args(&a);
    forced.push("--force".into());
    ok(&forced.iter().map(String::as_str).collect::<Vec<_>>());
}

#[test]
fn chained_stages_reproduce_the_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let ph = root.join("phantom");
    ok(&["phantom", "--seed", "5", "--out", p(&ph)]);
    let video = ph.join("video.lrse");
    let truth = ph.join("truth_mask.lrse");

    let full = root.join("full");
    ok(&["run", "--in", p(&video), "--truth", p(&truth), "--epochs", "2", "--out", p(&full)]);

    let dec = root.join("dec");
    ok(&["decompose", "--in", p(&video), "--epochs", "2", "--out", p(&dec)]);
    let det = root.join("det");
    ok(&[
        "detect",
        "--sparse",
        p(&dec.join("sparse.lrse")),
        "--model",
        p(&dec.join("model.nmf")),
        "--out",
        p(&det),
    ]);
    assert_eq!(fs::read(det.join("roi.json")).unwrap(), fs::read(full.join("roi.json")).unwrap());
    let seg = root.join("seg");
    ok(&[
        "segment",
        "--sparse",
        p(&dec.join("sparse.lrse")),
        "--roi",
        p(&det.join("roi.json")),
        "--out",
        p(&seg),
    ]);
    assert_eq!(fs::read(seg.join("mask.lrse")).unwrap(), fs::read(full.join("mask.lrse")).unwrap());

    let eval = root.join("eval");
    ok(&[
        "evaluate",
        "--mask",
        p(&seg.join("mask.lrse")),
        "--truth",
        p(&truth),
        "--roi",
        p(&det.join("roi.json")),
        "--out",
        p(&eval),
    ]);
    assert_eq!(
        fs::read_to_string(eval.join("report.json")).unwrap(),
        fs::read_to_string(full.join("report.json")).unwrap()
    );
}
