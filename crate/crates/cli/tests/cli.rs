use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
label_fraction = "1/2"
[synthetic]
count = 8
test_count = 3
height = 32
width = 32
[segmentation.train]
epochs = 3
[regression.train]
epochs = 3
batch = 2
unlabeled_batch = 2
[evaluation.smoothgrad]
n_samples = 2
"#;

fn echocss(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_echocss"))
        .current_dir(dir)
        .env_remove("ECHOCSS_DATA")
        .env("ECHOCSS_DATA", dir.join("data"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = echocss(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = echocss(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    ok(
        dir.path(),
        &[
            "synth",
            "--config",
            "small.toml",
            "--out",
            "data",
            "--seed",
            "3",
        ],
    );
    dir
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_byte_identical_and_guards_its_output() {
    let dir = workspace();
    let d = dir.path();
    ok(
        d,
        &[
            "synth",
            "--config",
            "small.toml",
            "--out",
            "again",
            "--seed",
            "3",
        ],
    );
    let a = files(&d.join("data"));
    assert_eq!(a, files(&d.join("again")));
    assert!(a.iter().any(|p| p.ends_with("manifest.csv")));
    // the config snapshot records the output path, which differs by design
    for p in a.iter().filter(|p| !p.ends_with("config.toml")) {
        assert_eq!(
            fs::read(d.join("data").join(p)).unwrap(),
            fs::read(d.join("again").join(p)).unwrap(),
            "{p:?}"
        );
    }

    let err = fails(d, &["synth", "--config", "small.toml", "--out", "data"]);
    assert!(err.contains("--force"), "{err}");
    ok(
        d,
        &[
            "synth",
            "--config",
            "small.toml",
            "--out",
            "data",
            "--seed",
            "4",
            "--force",
        ],
    );

    let err = fails(
        d,
        &[
            "synth",
            "--config",
            "small.toml",
            "--out",
            "one",
            "--cycles",
            "1",
        ],
    );
    assert!(err.contains("two cycles"), "{err}");
}

#[test]
fn pipeline_runs_and_reruns_identically() {
    let dir = workspace();
    let d = dir.path();
    let run = |out: &str| {
        let r = [
            "--config",
            "small.toml",
            "--out",
            out,
            "--seed",
            "3",
            "--deterministic",
        ];
        for cmd in [
            "train-seg",
            "infer-masks",
            "train-multi",
            "distill",
            "evaluate",
            "heatmap",
        ] {
            let mut args = vec![cmd];
            args.extend_from_slice(&r);
            ok(d, &args);
        }
    };
    run("a");
    run("b");
    for f in [
        "seg/loss.csv",
        "seg/split.json",
        "distill/predictions.csv",
        "eval/metrics.csv",
        "eval/summary.txt",
    ] {
        let a = fs::read(d.join("a").join(f)).unwrap();
        assert_eq!(a, fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    let metrics = fs::read_to_string(d.join("a/eval/metrics.csv")).unwrap();
    assert!(metrics.starts_with("name,mae,r2,dice_ed,dice_es,dice_unlabeled,n,seeds"));
    assert_eq!(metrics.lines().count(), 4);
    let config = fs::read_to_string(d.join("a/seg/config.toml")).unwrap();
    assert!(config.contains("deterministic = true"));
    assert!(d.join("a/heatmaps").read_dir().unwrap().next().is_some());
}

#[test]
fn missing_prerequisites_fail_with_guidance() {
    let dir = workspace();
    let d = dir.path();
    let err = fails(
        d,
        &[
            "evaluate",
            "--config",
            "small.toml",
            "--out",
            "r",
            "--checkpoint",
            "r/seg/checkpoint.json",
        ],
    );
    assert!(err.contains("checkpoint"), "{err}");
    let err = fails(d, &["distill", "--config", "small.toml", "--out", "r"]);
    assert!(err.contains("train-multi"), "{err}");
    let err = fails(d, &["train-multi", "--config", "small.toml", "--out", "r"]);
    assert!(err.contains("infer-masks"), "{err}");

    let out = Command::new(env!("CARGO_BIN_EXE_echocss"))
        .current_dir(d)
        .env_remove("ECHOCSS_DATA")
        .args(["train-seg", "--config", "small.toml", "--out", "r"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ECHOCSS_DATA"));
}

#[test]
fn zero_css_weight_reproduces_the_supervised_log() {
    let dir = workspace();
    let d = dir.path();
    for out in ["x", "y"] {
        ok(
            d,
            &[
                "train-seg",
                "--config",
                "small.toml",
                "--out",
                out,
                "--w-css",
                "0",
            ],
        );
    }
    let x = fs::read_to_string(d.join("x/seg/loss.csv")).unwrap();
    assert_eq!(x, fs::read_to_string(d.join("y/seg/loss.csv")).unwrap());
    for line in x.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[3], "", "css column should be empty: {line}");
        assert_eq!(cols[2], cols[4], "total should equal seg: {line}");
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = workspace();
    let text = ok(
        dir.path(),
        &[
            "show-config",
            "--config",
            "small.toml",
            "--seed",
            "11",
            "--label-fraction",
            "0.25",
        ],
    );
    assert!(text.contains("seed = 11"));
    assert!(text.contains("label_fraction = \"1/4\""));
    assert!(text.contains("count = 8"));
    let err = fails(dir.path(), &["show-config", "--preset", "huge"]);
    assert!(err.contains("unknown preset"));
}
