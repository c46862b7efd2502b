use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn longtail(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_longtail"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = longtail(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn generate(dir: &Path) {
    fs::write(
        dir.join("spec.toml"),
        "classes = 8\nn_max = 150\nn_min = 4\ndim = 10\nclass_separation = 4.0\nseed = 2\n",
    )
    .unwrap();
    ok(&["gen", "spec.toml", "-o", "data"], dir);
}

#[test]
fn generate_train_evaluate_and_rebalance() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir);
    for f in ["train.txt", "val.txt", "test.txt"] {
        assert!(dir.join("data").join(f).exists());
    }

    fs::write(dir.join("train.toml"), "epochs = 20\nlr0 = 0.1\nseed = 1\n").unwrap();
    ok(
        &["train", "data/train.txt", "-o", "joint.head", "--config", "train.toml", "--history", "hist.csv"],
        dir,
    );
    assert_eq!(fs::read_to_string(dir.join("hist.csv")).unwrap().lines().count(), 21);

    let summary = ok(
        &["eval", "joint.head", "data/test.txt", "--train", "data/train.txt", "--csv", "joint.csv"],
        dir,
    );
    assert!(summary.contains("many") && summary.contains("few"), "{summary}");
    assert_eq!(fs::read_to_string(dir.join("joint.csv")).unwrap().lines().count(), 9);

    let cosine = ok(&["eval", "joint.head", "data/test.txt", "--cosine", "--relu"], dir);
    assert!(cosine.contains("all"));

    let sweep = ok(
        &["sweep-tau", "joint.head", "data/test.txt", "--train", "data/train.txt", "--grid", "0:1:0.25"],
        dir,
    );
    assert_eq!(sweep.lines().count(), 6);
    assert!(sweep.starts_with("tau,many,medium,few,all"));

    let norms = ok(&["norms", "joint.head", "data/train.txt"], dir);
    assert_eq!(norms.lines().count(), 9);

    for method in ["crt", "ncm", "tau", "lws", "learn-tau"] {
        let head = format!("{method}.head");
        let report = format!("{method}.csv");
        let out = ok(
            &[
                "balance",
                method,
                "joint.head",
                "data/train.txt",
                "--test",
                "data/test.txt",
                "--val",
                "data/val.txt",
                "-o",
                &head,
                "--report",
                &report,
            ],
            dir,
        );
        assert!(out.contains("all"), "{method}: {out}");
        assert!(dir.join(&head).exists() && dir.join(&report).exists());
        ok(&["eval", &head, "data/test.txt", "--train", "data/train.txt"], dir);
    }
}

#[test]
fn fixed_tau_outside_range_warns() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir);
    fs::write(dir.join("train.toml"), "epochs = 3\n").unwrap();
    ok(&["train", "data/train.txt", "-o", "h", "--config", "train.toml"], dir);
    let out = longtail(
        &["balance", "tau", "h", "data/train.txt", "--test", "data/test.txt", "-o", "t", "--tau", "1.5"],
        dir,
    );
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("outside [0, 1]"));
}

#[test]
fn run_writes_artifacts_and_rejects_unknown_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(
        dir.join("exp.toml"),
        "classes = 6\nn_max = 60\nn_min = 4\ndim = 8\nepochs = 3\nstage2_epochs = 2\n\
         seeds = [0]\nsamplers = [\"instance\", \"class\"]\nmethods = [\"joint\", \"crt\", \"tau\"]\n\
         output_dir = \"out\"\n",
    )
    .unwrap();
    let md = ok(&["run", "exp.toml"], dir);
    assert!(md.contains("| crt | class |"), "{md}");
    for f in ["manifest.toml", "summary.csv", "summary.md", "weight_norms.csv", "tau_sweep.csv", "tau_selection.csv"] {
        assert!(dir.join("out").join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_dir(dir.join("out/reports")).unwrap().count(), 6);

    fs::write(dir.join("bad.toml"), "epochs = 3\nlearning_rate = 0.1\n").unwrap();
    let out = longtail(&["run", "bad.toml"], dir);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn malformed_feature_file_reports_line() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir);
    let text = fs::read_to_string(dir.join("data/train.txt")).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[3] = "0 1.0";
    fs::write(dir.join("broken.txt"), lines.join("\n")).unwrap();
    let out = longtail(&["train", "broken.txt", "-o", "h"], dir);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 4"), "{err}");
}
