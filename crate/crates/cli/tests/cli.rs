use std::path::Path;
use std::process::{Command, Output};

use vgan3d::config::RunConfig;
use vgan3d::data::{load_dataset, read_labels};
use vgan3d::metrics::evaluate_case;
use vgan3d::training::TrainLog;

fn vgan3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vgan3d"))
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = r#"{
  "generator.base_channels": 2,
  "discriminator.channels": [2, 4, 4, 1],
  "crf.iterations": 2,
  "train.epochs": 2,
  "train.lr": 0.001
}"#;

fn dataset(root: &Path) -> std::path::PathBuf {
    let d = root.join("data");
    let out = vgan3d(&[
        "phantom",
        "--out",
        s(&d),
        "--count",
        "3",
        "--size",
        "16",
        "--seed",
        "7",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    d
}

fn train_small(root: &Path, data: &Path, name: &str, extra: &[&str]) -> std::path::PathBuf {
    let config = root.join("small.json");
    std::fs::write(&config, SMALL).unwrap();
    let out_dir = root.join(name);
    let mut args = vec![
        "train",
        "--config",
        s(&config),
        "--data",
        s(data),
        "--out",
        s(&out_dir),
        "--deterministic",
    ];
    args.extend(extra);
    let out = vgan3d(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    out_dir
}

#[test]
fn phantom_writes_cases_deterministically() {
    let t = tempfile::tempdir().unwrap();
    let a = t.path().join("a");
    let b = t.path().join("b");
    let out = vgan3d(&[
        "phantom",
        "--out",
        s(&a),
        "--count",
        "4",
        "--size",
        "32",
        "--seed",
        "7",
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 4);
    assert_eq!(load_dataset(&a).unwrap().len(), 4);
    vgan3d(&[
        "phantom",
        "--out",
        s(&b),
        "--count",
        "4",
        "--size",
        "32",
        "--seed",
        "7",
    ]);
    for case in std::fs::read_dir(&a).unwrap() {
        let case = case.unwrap().file_name();
        for file in ["t1", "t1c", "t2", "flair", "labels"] {
            let name = format!("{file}.mvol");
            assert_eq!(
                std::fs::read(a.join(&case).join(&name)).unwrap(),
                std::fs::read(b.join(&case).join(&name)).unwrap()
            );
        }
    }
}

#[test]
fn phantom_rejects_indivisible_size() {
    let t = tempfile::tempdir().unwrap();
    let out = vgan3d(&["phantom", "--out", s(&t.path().join("x")), "--size", "30"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("divisible by 16"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&vgan3d(&["bogus"])), 1);
    assert_eq!(code(&vgan3d(&["train"])), 1);
    assert_eq!(code(&vgan3d(&["--help"])), 0);
}

#[test]
fn train_infer_evaluate_curves() {
    let t = tempfile::tempdir().unwrap();
    let data = dataset(t.path());
    let run = train_small(t.path(), &data, "run", &[]);
    let log =
        TrainLog::from_csv(&std::fs::read_to_string(run.join("train_log.csv")).unwrap()).unwrap();
    assert_eq!(log.rows().len(), 2);
    assert!(log.rows().iter().all(|r| r.seconds == 0.0));
    for f in ["best.vgck", "final.vgck", "config.json"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let case = data.join("case000");
    let pred = t.path().join("pred.mvol");
    let checkpoint = run.join("final.vgck");
    let infer = |out: &Path, extra: &[&str]| {
        let mut args = vec!["infer", "--checkpoint", s(&checkpoint)];
        args.extend(["--input", s(&case), "--output", s(out)]);
        args.extend(extra);
        code(&vgan3d(&args))
    };
    assert_eq!(infer(&pred, &[]), 0);
    let again = t.path().join("again.mvol");
    assert_eq!(infer(&again, &[]), 0);
    assert_eq!(
        std::fs::read(&pred).unwrap(),
        std::fs::read(&again).unwrap()
    );
    let plain = t.path().join("plain.mvol");
    assert_eq!(infer(&plain, &["--no-crf"]), 0);
    let (labels, _) = read_labels(&pred).unwrap();
    let (truth, spacing) = read_labels(case.join("labels.mvol")).unwrap();
    assert_eq!(labels.extents, truth.extents);
    assert_eq!(read_labels(&plain).unwrap().0.extents, truth.extents);

    let report = t.path().join("report.json");
    let out = vgan3d(&[
        "evaluate",
        "--pred",
        s(&pred),
        "--truth",
        s(&case.join("labels.mvol")),
        "--report",
        s(&report),
    ]);
    assert_eq!(code(&out), 0);
    let want = evaluate_case("case000", &labels, &truth, spacing.map(f64::from))
        .unwrap()
        .to_json();
    assert_eq!(std::fs::read_to_string(&report).unwrap(), want);

    let curves = t.path().join("curves");
    assert_eq!(
        code(&vgan3d(&[
            "curves",
            "--log",
            s(&run.join("train_log.csv")),
            "--out",
            s(&curves)
        ])),
        0
    );
    let tidy = std::fs::read_to_string(curves.join("curves.csv")).unwrap();
    assert_eq!(tidy.lines().next(), Some("epoch,series,value"));
    assert_eq!(tidy.lines().count(), 1 + 2 * 5);
    assert!(std::fs::read(curves.join("loss.ppm"))
        .unwrap()
        .starts_with(b"P6"));
    assert!(std::fs::read(curves.join("dice.ppm"))
        .unwrap()
        .starts_with(b"P6"));

    let mut other = RunConfig::load(run.join("config.json")).unwrap();
    other.crf.iterations = 3;
    let other_path = t.path().join("other.json");
    other.save(&other_path).unwrap();
    assert_eq!(
        infer(&t.path().join("x.mvol"), &["--config", s(&other_path)]),
        1
    );
}

#[test]
fn evaluate_identical_volumes_is_perfect() {
    let t = tempfile::tempdir().unwrap();
    let data = dataset(t.path());
    let labels = data.join("case001").join("labels.mvol");
    let report = t.path().join("r.json");
    assert_eq!(
        code(&vgan3d(&[
            "evaluate",
            "--pred",
            s(&labels),
            "--truth",
            s(&labels),
            "--report",
            s(&report)
        ])),
        0
    );
    let text = std::fs::read_to_string(report).unwrap();
    assert!(text.contains("\"dsc\": 1.0"));
    assert!(!text.contains("\"dsc\": 0."));
}

#[test]
fn evaluate_grid_mismatch_names_extents() {
    let t = tempfile::tempdir().unwrap();
    let small = dataset(t.path());
    let big = t.path().join("big");
    vgan3d(&["phantom", "--out", s(&big), "--count", "1", "--size", "32"]);
    let out = vgan3d(&[
        "evaluate",
        "--pred",
        s(&small.join("case000/labels.mvol")),
        "--truth",
        s(&big.join("case000/labels.mvol")),
        "--report",
        s(&t.path().join("r.json")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("[16, 16, 16]"));
}

#[test]
fn train_errors_map_to_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let out = vgan3d(&[
        "train",
        "--data",
        s(&t.path().join("missing")),
        "--out",
        s(&t.path().join("o")),
    ]);
    assert_eq!(code(&out), 1);
    let bad = t.path().join("bad.json");
    std::fs::write(&bad, r#"{"train.alpah": 5}"#).unwrap();
    let out = vgan3d(&[
        "train",
        "--config",
        s(&bad),
        "--out",
        s(&t.path().join("o")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.alpah"));
    let out = vgan3d(&[
        "train",
        "--config",
        s(&t.path().join("nope.json")),
        "--out",
        s(&t.path().join("o")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn alpha_sweep_differs_only_in_overlap_weighting() {
    let t = tempfile::tempdir().unwrap();
    let data = dataset(t.path());
    let rows = |dir: &Path| {
        TrainLog::from_csv(&std::fs::read_to_string(dir.join("train_log.csv")).unwrap()).unwrap()
    };
    for alpha in [0.0, 5.0] {
        let a = alpha.to_string();
        let run = train_small(t.path(), &data, &format!("alpha{a}"), &["--alpha", &a]);
        assert_eq!(
            RunConfig::load(run.join("config.json"))
                .unwrap()
                .train
                .alpha,
            alpha
        );
        let log = rows(&run);
        assert_eq!(log.rows().len(), 2);
        for r in log.rows() {
            // the least-squares adversarial term is non-negative
            let adversarial = r.loss_g - alpha * r.gdl;
            assert!(adversarial.is_finite() && adversarial >= -1e-6, "{r:?}");
            assert!((0.0..=1.0).contains(&r.gdl));
        }
    }
}

#[test]
fn identical_seeds_give_identical_logs() {
    let t = tempfile::tempdir().unwrap();
    let data = dataset(t.path());
    let a = train_small(t.path(), &data, "a", &["--seed", "3"]);
    let b = train_small(t.path(), &data, "b", &["--seed", "3"]);
    let c = train_small(t.path(), &data, "c", &["--seed", "4"]);
    let read = |d: &Path| std::fs::read(d.join("train_log.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}
