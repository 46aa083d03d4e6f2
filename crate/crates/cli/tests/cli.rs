use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn dayolo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dayolo"))
        .args(args)
        .env_remove("DAYOLO_SEED")
        .output()
        .unwrap()
}

fn ok_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 10] = [
    "--image-size",
    "64",
    "--train-source",
    "6",
    "--train-target",
    "6",
    "--val-source",
    "4",
    "--val-target",
    "4",
];

fn gen(dir: &Path, seed: &str) -> PathBuf {
    let mut args = vec!["gen-data", "--out", p(dir), "--seed", seed];
    args.extend(SMALL);
    PathBuf::from(ok_json(&dayolo(&args))["manifest"].as_str().unwrap())
}

/// A generated dataset and a short training run, shared by the pipeline tests.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    manifest: PathBuf,
    config: PathBuf,
    run: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let manifest = gen(&root.join("data"), "7");
        let config = root.join("c.toml");
        std::fs::write(
            &config,
            "steps = 4\nimage_size = 64\nlambda_da = 0.02\neval_interval = 2\n",
        )
        .unwrap();
        let run = root.join("run");
        ok_json(&dayolo(&[
            "train",
            "--config",
            p(&config),
            "--data",
            p(&manifest),
            "--out",
            p(&run),
        ]));
        Fixture {
            _dir: dir,
            root,
            manifest,
            config,
            run,
        }
    })
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = dayolo(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(dayolo(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(dayolo(&["--help"]).status.code(), Some(0));
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    gen(&a, "3");
    gen(&b, "3");
    let ta = tree(&a);
    assert_eq!(ta, tree(&b));
    assert!(ta.len() > 20);
    // No labels are written for the unlabeled target split.
    assert!(!ta
        .iter()
        .any(|(p, _)| p.starts_with("target/train") && p.extension().is_some_and(|e| e == "json")));
}

#[test]
fn train_then_eval() {
    let f = fixture();
    assert!(f.run.join("ckpt.safetensors").exists());
    let ap_file = f.root.join("ap.json");
    let table = ok_json(&dayolo(&[
        "eval",
        "--ckpt",
        p(&f.run.join("ckpt.safetensors")),
        "--data",
        p(&f.manifest),
        "--split",
        "target-val",
        "--out",
        p(&ap_file),
    ]));
    let map = table["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(&ap_file).unwrap()).unwrap();
    assert_eq!(saved, table);
    let log = ok_json(&dayolo(&[
        "check-log",
        "--log",
        p(&f.run.join("metrics.jsonl")),
    ]));
    assert_eq!(log["lines"], 4);

    let svg = f.root.join("plots/pr.svg");
    ok_json(&dayolo(&[
        "plot",
        "pr",
        "--table",
        p(&ap_file),
        "--out",
        p(&svg),
    ]));
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
    let svg = f.root.join("plots/metrics.svg");
    let info = ok_json(&dayolo(&[
        "plot",
        "metrics",
        "--log",
        p(&f.run.join("metrics.jsonl")),
        "--out",
        p(&svg),
    ]));
    assert_eq!(info["map_points"], 2);
    assert!(std::fs::read_to_string(&svg).unwrap().contains("<polyline"));
}

#[test]
fn training_is_reentrant() {
    let f = fixture();
    let again = f.root.join("run2");
    ok_json(&dayolo(&[
        "train",
        "--config",
        p(&f.config),
        "--data",
        p(&f.manifest),
        "--out",
        p(&again),
    ]));
    assert_eq!(tree(&f.run), tree(&again));
}

#[test]
fn seed_comes_from_the_environment() {
    let f = fixture();
    let out = f.root.join("seeded");
    let status = Command::new(env!("CARGO_BIN_EXE_dayolo"))
        .args([
            "train",
            "--config",
            p(&f.config),
            "--data",
            p(&f.manifest),
            "--out",
            p(&out),
            "--steps",
            "1",
        ])
        .env("DAYOLO_SEED", "42")
        .output()
        .unwrap();
    ok_json(&status);
    let written = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(written.lines().any(|l| l == "seed = 42"), "{written}");
    assert!(written.lines().any(|l| l == "steps = 1"));
}

#[test]
fn detect_and_features() {
    let f = fixture();
    let ckpt = f.run.join("ckpt.safetensors");
    let image = f.manifest.parent().unwrap().join("target/val/images");
    let image = std::fs::read_dir(image)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .min()
        .unwrap();
    let drawn = f.root.join("drawn.png");
    let out = ok_json(&dayolo(&[
        "detect",
        "--ckpt",
        p(&ckpt),
        "--image",
        p(&image),
        "--conf",
        "0.01",
        "--annotated",
        p(&drawn),
    ]));
    assert!(out["detections"].is_array());
    assert!(drawn.exists());

    let csv = f.root.join("feats.csv");
    let out = ok_json(&dayolo(&[
        "export-features",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&f.manifest),
        "--splits",
        "source-val,target-val",
        "--out",
        p(&csv),
    ]));
    assert_eq!(out["rows"], 8 * 3);
    let svg = f.root.join("emb.svg");
    let out = ok_json(&dayolo(&[
        "plot",
        "features",
        "--csv",
        p(&csv),
        "--scale",
        "1",
        "--out",
        p(&svg),
    ]));
    assert_eq!(out["points"], 8);
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope/manifest.json");
    let out = dayolo(&["train", "--data", p(&missing), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "momentum = 1.5\n").unwrap();
    let out = dayolo(&[
        "train",
        "--config",
        p(&bad),
        "--data",
        p(&f.manifest),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(
        dayolo(&[
            "eval",
            "--ckpt",
            p(&f.run.join("ckpt.safetensors")),
            "--data",
            p(&f.manifest),
            "--split",
            "target-train"
        ])
        .status
        .code(),
        Some(1)
    );

    let wild = dir.path().join("wild.toml");
    std::fs::write(
        &wild,
        "steps = 30\nimage_size = 64\nlr_backbone = 1e12\nlr_rest = 1e12\n",
    )
    .unwrap();
    let run = dir.path().join("wild");
    let out = dayolo(&[
        "train",
        "--config",
        p(&wild),
        "--data",
        p(&f.manifest),
        "--out",
        p(&run),
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(run.join("divergence.jsonl").exists());

    let out = Command::new(env!("CARGO_BIN_EXE_dayolo"))
        .args(["train", "--data", p(&f.manifest), "--out", p(dir.path())])
        .env("DAYOLO_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
