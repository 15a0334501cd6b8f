use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
[model]
layers = 1
heads = 2
dim = 7
frames = 2
points = 12
encoder_hidden = 8
decoder_hidden = 7

[train]
epochs = 2
batch_size = 4
seed = 5

[data]
train_sequences = 3
test_normal = 1
test_anomalous = 4
train_frames = 5
test_frames = 14
onset = 4..8
";

fn hypcv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hypcv")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = hypcv(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("small.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let (data, ck, scores, report) = (root.join("data"), root.join("m.hpck"), root.join("scores"), root.join("report"));

    let out = ok(&["gen-data", "--config", p(&cfg), "--out", p(&data)]);
    assert!(out.contains("wrote 3 training and 5 test sequences"));

    let out = ok(&["train", "--config", p(&cfg), "--data", p(&data), "--checkpoint", p(&ck), "--report-params"]);
    assert!(out.contains("epoch 2 loss"), "{out}");
    assert!(out.lines().any(|l| l.starts_with("total")));

    // Scoring falls back to the configuration stored in the checkpoint.
    let out = ok(&["score", "--data", p(&data), "--checkpoint", p(&ck), "--out", p(&scores)]);
    assert!(out.contains("scored 5 videos"));
    assert_eq!(std::fs::read_dir(&scores).unwrap().count(), 5);

    let out = ok(&["eval", "--config", p(&cfg), "--data", p(&scores), "--out", p(&report)]);
    assert!(out.contains("auroc_smoothed"));
    let csv = std::fs::read_to_string(report.join("report.csv")).unwrap();
    assert!(csv.contains("# [model]"));
    assert!(csv.lines().any(|l| l.starts_with("all,70,")), "{csv}");
    let err = String::from_utf8(hypcv(&["eval", "--data", p(&scores), "--out", p(&report)]).stderr).unwrap();
    assert!(err.contains("warning: category normal skipped"), "{err}");
}

#[test]
fn errors_exit_with_status_one() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let missing = hypcv(&["train", "--data", p(&root.join("none")), "--checkpoint", p(&root.join("m"))]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("no data found"));

    let bad = root.join("bad.cfg");
    std::fs::write(&bad, "[model]\nheads = 5\n").unwrap();
    let out = hypcv(&["gen-data", "--config", p(&bad), "--out", p(root)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid configuration"));

    // A checkpoint used with an incompatible configuration.
    let cfg = root.join("small.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let data = root.join("data");
    ok(&["gen-data", "--config", p(&cfg), "--out", p(&data)]);
    let ck = root.join("m.hpck");
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--checkpoint", p(&ck)]);
    let wide = root.join("wide.cfg");
    std::fs::write(&wide, SMALL.replace("heads = 2", "heads = 4")).unwrap();
    let out = hypcv(&["score", "--config", p(&wide), "--data", p(&data), "--checkpoint", p(&ck), "--out", p(&root.join("s"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("incompatible"));

    // Output paths are required flags.
    assert_eq!(hypcv(&["gen-data"]).status.code(), Some(2));
}

#[test]
fn seeds_change_data_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let read = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        ok(&["gen-data", "--config", p(&cfg), "--seed", seed, "--out", p(&out)]);
        std::fs::read(out.join("test/test_0003.pcvs")).unwrap()
    };
    assert_eq!(read("a", "1"), read("b", "1"));
    assert_ne!(read("c", "1"), read("d", "2"));
}

#[test]
fn check_grad_reports_every_selected_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = ok(&["check-grad", "--config", p(&cfg), "--filter", "theta"]);
    assert!(out.contains("embed.theta") && out.contains("layer0.theta"), "{out}");
    let worst: f64 = out.lines().last().unwrap().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(worst < 1e-4);
}
