//! The command-line workflow, driven in-process: synth, train, resume, eval.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use volnet::cli::run;

fn volnet(args: &[&str]) -> (i32, String, String) {
    let (mut o, mut e) = (Vec::new(), Vec::new());
    let code = run(
        std::iter::once("volnet").chain(args.iter().copied()).map(String::from),
        &mut o,
        &mut e,
    );
    (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree_digest(dir: &Path) -> Vec<(PathBuf, String)> {
    let mut files = vec![];
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let hash = hex::encode(Sha256::digest(std::fs::read(&p).unwrap()));
                files.push((p.strip_prefix(dir).unwrap().to_path_buf(), hash));
            }
        }
    }
    files.sort();
    files
}

fn synth(dir: &Path, per_class: usize) {
    let (code, out, err) = volnet(&["synth", "--out", s(dir), "--per-class", &per_class.to_string(), "--seed", "3"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("manifest.csv"));
}

/// Small but complete: two sMRI pipelines of width 4.
fn write_config(root: &Path, name: &str, max_epochs: usize) -> PathBuf {
    let path = root.join(name);
    let body = serde_json::json!({
        "manifest": "data/manifest.csv",
        "preset": "proposed-2roi-smri",
        "width": 4,
        "tau": 1,
        "eta": 6,
        "max_epochs": max_epochs,
        "seed": 5,
    });
    std::fs::write(&path, body.to_string()).unwrap();
    path
}

fn train(config: &Path, out: &Path, resume: bool) -> String {
    let mut args = vec!["train", "--config", s(config), "--out", s(out)];
    if resume {
        args.push("--resume");
    }
    let (code, stdout, err) = volnet(&args);
    assert_eq!(code, 0, "{err}");
    stdout
}

#[test]
fn synth_counts_and_determinism() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    synth(&a, 16);
    synth(&b, 16);
    let files = tree_digest(&a);
    assert_eq!(files.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "vvol")).count(), 2 * 16 * 4);
    assert_eq!(files, tree_digest(&b));
}

#[test]
fn train_resume_and_eval() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    synth(&r.join("data"), 20);
    let two = write_config(r, "two.json", 2);
    let one = write_config(r, "one.json", 1);

    let straight = r.join("straight");
    let stdout = train(&two, &straight, false);
    assert!(stdout.contains("ACC"));
    for f in ["best.ckpt", "last.ckpt", "history.csv", "report.json", "summary.csv", "split.json"] {
        assert!(straight.join(f).exists(), "{f} missing");
    }
    let history = std::fs::read_to_string(straight.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    // interrupted after one epoch, then resumed with the full budget
    let resumed = r.join("resumed");
    train(&one, &resumed, false);
    let stdout = train(&two, &resumed, true);
    assert!(stdout.contains("resuming after epoch 1"));
    for f in ["history.csv", "report.json", "best.ckpt", "split.json"] {
        assert_eq!(
            std::fs::read(straight.join(f)).unwrap(),
            std::fs::read(resumed.join(f)).unwrap(),
            "{f} differs after resume"
        );
    }

    let manifest = r.join("data/manifest.csv");
    let eval = |subset: &str| {
        volnet(&[
            "eval",
            "--checkpoint",
            s(&straight.join("best.ckpt")),
            "--manifest",
            s(&manifest),
            "--split",
            s(&straight.join("split.json")),
            "--subset",
            subset,
        ])
    };
    let (code, test_json, err) = eval("test");
    assert_eq!(code, 0, "{err}");
    assert_eq!(test_json, std::fs::read_to_string(straight.join("report.json")).unwrap());
    assert_eq!(eval("test").1, test_json);
    let (code, train_json, _) = eval("train");
    assert_eq!(code, 0);
    let train_report: serde_json::Value = serde_json::from_str(&train_json).unwrap();
    assert_eq!(train_report["n"], 10);
    assert_eq!(eval("foo").0, 2);

    std::fs::write(r.join("broken.ckpt"), b"VCKPT1\nnot really").unwrap();
    let (code, _, _) = volnet(&[
        "eval",
        "--checkpoint",
        s(&r.join("broken.ckpt")),
        "--manifest",
        s(&manifest),
        "--split",
        s(&straight.join("split.json")),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn resume_rejects_a_different_configuration() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    synth(&r.join("data"), 16);
    let out = r.join("out");
    train(&write_config(r, "a.json", 1), &out, false);
    let other = r.join("b.json");
    std::fs::write(
        &other,
        r#"{"manifest":"data/manifest.csv","preset":"proposed-2roi-smri","width":4,"tau":1,"eta":6,"max_epochs":2,"seed":6}"#,
    )
    .unwrap();
    let (code, _, err) = volnet(&["train", "--config", s(&other), "--out", s(&out), "--resume"]);
    assert_eq!(code, 2);
    assert!(err.contains("different configuration"));
}
