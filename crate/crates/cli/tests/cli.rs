use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "epochs": 2, "lr_drop_epoch": 1, "batch_size": 2,
  "d_model": 16, "n_heads": 2, "enc_layers": 1, "dec_layers": 1, "ffn_dim": 32,
  "num_queries": 4, "num_patches": 2, "max_patches": 4, "backbone_channels": 8, "patch_side": 8,
  "train_images": 4, "val_images": 2, "image_size": 32, "max_objects": 3,
  "short_side_min": 24, "short_side_max": 32, "long_side_max": 40
}"#;

fn updetr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_updetr")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = updetr(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("tiny.json");
    std::fs::write(&config, TINY).unwrap();
    Fixture { _dir: dir, root, config }
}

#[test]
fn synth_writes_manifest_and_ground_truth() {
    let f = fixture();
    let data = f.root.join("data");
    ok(&["synth", "--n", "3", "--out", s(&data), "--size", "32", "--max-objects", "3"]);
    let manifest = std::fs::read_to_string(data.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
    assert!(data.join("images/000002.ppm").is_file());
    assert!(!std::fs::read_to_string(data.join("ground_truth.txt")).unwrap().is_empty());
}

#[test]
fn pipeline_end_to_end() {
    let f = fixture();
    let (pre, fine, data) = (f.root.join("pre"), f.root.join("fine"), f.root.join("data"));
    ok(&["pretrain", "--config", s(&f.config), "--out", s(&pre)]);
    for file in ["model.ckpt", "curves.csv", "config.json"] {
        assert!(pre.join(file).is_file(), "{file}");
    }
    let curves = std::fs::read_to_string(pre.join("curves.csv")).unwrap();
    assert!(curves.contains("loss_total"));

    let ckpt = pre.join("model.ckpt");
    ok(&["finetune", "--config", s(&f.config), "--init", s(&ckpt), "--out", s(&fine)]);
    assert!(std::fs::read_to_string(fine.join("curves.csv")).unwrap().contains("ap50"));

    ok(&["synth", "--n", "2", "--out", s(&data), "--size", "32", "--max-objects", "3"]);
    let eval = ok(&["eval", "--checkpoint", s(&fine.join("model.ckpt")), "--data", s(&data)]);
    assert!(eval.starts_with("ap "), "{eval}");
    assert!(eval.contains("\nap50 ") && eval.contains("\nap75 "), "{eval}");

    let image = data.join("images/000000.ppm");
    let patch = data.join("images/000001.ppm");
    let rows = f.root.join("rows.txt");
    let out = ok(&[
        "locate",
        "--checkpoint",
        s(&ckpt),
        "--image",
        s(&image),
        "--patch",
        s(&patch),
        "--patch",
        s(&image),
        "--out",
        s(&rows),
    ]);
    assert_eq!(out.lines().count(), 2, "{out}");
    assert_eq!(std::fs::read_to_string(&rows).unwrap(), out);
    for (k, line) in out.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields.len(), 6, "{line}");
        assert_eq!(fields[0], k.to_string());
    }
}

#[test]
fn overrides_beat_config_values() {
    let f = fixture();
    let out = f.root.join("run");
    ok(&["pretrain", "--config", s(&f.config), "--out", s(&out), "--epochs", "3", "--seed", "5"]);
    let cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["epochs"], 3);
    assert_eq!(cfg["seed"], 5);
    assert_eq!(cfg["d_model"], 16);
}

#[test]
fn repeated_runs_are_identical() {
    let f = fixture();
    let read = |dir: &Path| ["model.ckpt", "curves.csv"].map(|n| std::fs::read(dir.join(n)).unwrap());
    let (a, b) = (f.root.join("a"), f.root.join("b"));
    for dir in [&a, &b] {
        ok(&["pretrain", "--config", s(&f.config), "--out", s(dir), "--seed", "3"]);
    }
    assert_eq!(read(&a), read(&b));
    let (da, db) = (f.root.join("da"), f.root.join("db"));
    for dir in [&da, &db] {
        ok(&["synth", "--n", "2", "--out", s(dir), "--seed", "9"]);
    }
    for file in ["manifest.txt", "ground_truth.txt", "images/000001.ppm"] {
        assert_eq!(std::fs::read(da.join(file)).unwrap(), std::fs::read(db.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(updetr(&["gradcheck", "--bogus"]).status.code(), Some(2));
    assert_eq!(updetr(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(updetr(&[]).status.code(), Some(2));
    let f = fixture();
    let o = updetr(&["pretrain", "--config", s(&f.config), "--out", s(&f.root.join("x")), "--not_a_key", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("not_a_key"), "{}", stderr(&o));
}

#[test]
fn help_lists_flags() {
    let o = updetr(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    for cmd in ["synth", "pretrain", "finetune", "eval", "locate", "ablate", "gradcheck"] {
        assert!(text.contains(cmd), "{cmd}");
    }
    let sub = String::from_utf8(updetr(&["pretrain", "--help"]).stdout).unwrap();
    assert!(sub.contains("--config") && sub.contains("lr_transformer"), "{sub}");
}

#[test]
fn missing_files_name_the_path() {
    let f = fixture();
    let gone = f.root.join("nowhere.json");
    let o = updetr(&["pretrain", "--config", s(&gone), "--out", s(&f.root.join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nowhere.json"), "{}", stderr(&o));

    let ck = f.root.join("absent.ckpt");
    let o = updetr(&["eval", "--checkpoint", s(&ck), "--data", s(&f.root)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("absent.ckpt"), "{}", stderr(&o));
}

#[test]
fn malformed_config_names_the_key() {
    let f = fixture();
    let bad = f.root.join("bad.json");
    std::fs::write(&bad, r#"{"d_model": "wide"}"#).unwrap();
    let o = updetr(&["pretrain", "--config", s(&bad), "--out", s(&f.root.join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("d_model"), "{}", stderr(&o));

    std::fs::write(&bad, r#"{"lr_tranformer": 0.1}"#).unwrap();
    let o = updetr(&["pretrain", "--config", s(&bad), "--out", s(&f.root.join("x"))]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("lr_tranformer"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck", "--trials", "2", "--seed", "1"]);
    assert!(out.lines().count() > 30);
    assert!(!out.contains("FAIL"), "{out}");
}
