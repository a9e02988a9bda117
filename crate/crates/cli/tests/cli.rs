use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn madd() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_madd"));
    c.env_remove("MADD_OUTPUT_ROOT").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    madd().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a toy config plus a small synthetic 32px dataset.
fn toy_setup(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = dir.join("toy.toml");
    let o = run(&["config", "--preset", "toy"]);
    assert!(o.status.success());
    std::fs::write(&cfg, &o.stdout).unwrap();
    let data = dir.join("data");
    let o = run(&[
        "synth",
        "--out",
        path_str(&data),
        "--size",
        "32",
        "--cue-size",
        "4",
        "--videos",
        "12",
        "--frames-per-video",
        "2",
        "--val-fraction",
        "0.34",
        "--test-fraction",
        "0.34",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    (cfg, data.join("manifest.csv"))
}

#[test]
fn missing_head_count_exits_2_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = toy_setup(dir.path());
    let text: String = std::fs::read_to_string(&cfg)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with("M ="))
        .map(|l| format!("{l}\n"))
        .collect();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, text).unwrap();
    let o = run(&["train", "--config", path_str(&bad), "--data", path_str(&manifest), "--out", path_str(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`M`"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = toy_setup(dir.path());
    let mut text = std::fs::read_to_string(&cfg).unwrap();
    text.push_str("learning_rate = 0.1\n");
    std::fs::write(&cfg, text).unwrap();
    let o = run(&["train", "--config", path_str(&cfg), "--data", path_str(&manifest), "--out", path_str(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn missing_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = toy_setup(dir.path());
    let o = run(&["train", "--config", path_str(&cfg), "--data", "/nonexistent/m.csv", "--out", path_str(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn train_eval_visualize_round() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = toy_setup(dir.path());
    let train = |name: &str| {
        let out = dir.path().join(name);
        let o = run(&["train", "--config", path_str(&cfg), "--data", path_str(&manifest), "--out", path_str(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    };
    let a = train("run_a");
    let b = train("run_b");
    assert!(a.join("last.ckpt").is_file());
    assert!(a.join("epoch_000.ckpt").is_file());
    let metrics = std::fs::read(a.join("metrics.json")).unwrap();
    assert_eq!(metrics, std::fs::read(b.join("metrics.json")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("report.json")).unwrap()).unwrap();
    for key in ["accuracy", "frame_auc", "video_auc", "logloss", "config_hash"] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }

    let ckpt = a.join("last.ckpt");
    let scores = dir.path().join("scores.csv");
    let o = run(&[
        "eval",
        "--checkpoint",
        path_str(&ckpt),
        "--data",
        path_str(&manifest),
        "--split",
        "test",
        "--scores",
        path_str(&scores),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let acc = rep["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    // pairwise oracle over the dumped scores
    let text = std::fs::read_to_string(&scores).unwrap();
    let rows: Vec<(u8, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[2].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect();
    let (mut num, mut den) = (0.0, 0.0);
    for &(yi, si) in &rows {
        for &(yj, sj) in &rows {
            if yi == 1 && yj == 0 {
                den += 1.0;
                num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    assert_eq!(rep["frame_auc"].as_f64().unwrap(), num / den);

    let mut bad_cfg = std::fs::read_to_string(&cfg).unwrap();
    bad_cfg = bad_cfg.replace("M = 4", "M = 2");
    let other = dir.path().join("m2.toml");
    std::fs::write(&other, bad_cfg).unwrap();
    let o = run(&["eval", "--checkpoint", path_str(&ckpt), "--data", path_str(&manifest), "--config", path_str(&other)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let img_dir = dir.path().join("data/images");
    let img = std::fs::read_dir(&img_dir).unwrap().next().unwrap().unwrap().path();
    let junk = dir.path().join("junk.png");
    std::fs::write(&junk, b"not an image").unwrap();
    let vis = |name: &str| {
        let out = dir.path().join(name);
        let o = run(&["visualize", "--checkpoint", path_str(&ckpt), "--out", path_str(&out), path_str(&img), path_str(&junk)]);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    };
    let v1 = vis("vis1");
    let v2 = vis("vis2");
    let mut names: Vec<String> = std::fs::read_dir(&v1).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names.len(), 5);
    assert!(names.iter().filter(|n| n.contains("_att")).count() == 4);
    for n in &names {
        assert_eq!(std::fs::read(v1.join(n)).unwrap(), std::fs::read(v2.join(n)).unwrap());
    }
    let o = run(&["visualize", "--checkpoint", path_str(&ckpt), "--out", path_str(&v1), path_str(&junk)]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn output_root_env_var_prefixes_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let o = madd()
        .env("MADD_OUTPUT_ROOT", dir.path())
        .args(["synth", "--out", "ds", "--size", "32", "--cue-size", "4", "--videos", "2", "--frames-per-video", "1"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("ds/manifest.csv").is_file());
}

#[test]
fn gradcheck_reports_every_component() {
    let o = run(&["gradcheck"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let names: Vec<String> = stdout(&o).lines().map(|l| l.split_whitespace().next().unwrap().to_string()).collect();
    assert_eq!(names, ["attention", "texture", "bap", "classifier", "ril", "e2e"]);
}

#[test]
fn corrupted_gradcheck_fails_naming_the_component() {
    let o = run(&["gradcheck", "--corrupt", "texture"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("texture"));
    assert!(stdout(&o).lines().any(|l| l.starts_with("texture") && l.ends_with("FAIL")));
}
