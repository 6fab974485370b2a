use std::path::Path;
use std::process::{Command, Output};

fn tsa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsa-aqa")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn parse_dive_lists_steps() {
    let out = tsa(&["parse-dive", "107B"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.starts_with("107B: 3 steps"), "{text}");
    assert!(text.contains("3.5 Soms.Pike"));
    assert!(text.lines().last().unwrap().ends_with("Entry"));
}

#[test]
fn errors_are_one_json_line() {
    let out = tsa(&["parse-dive", "999Z"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let line: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert!(line["error"].is_string());
    assert!(line["message"].as_str().unwrap().contains("999Z"));
}

#[test]
fn synthesise_train_evaluate_segment() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = tsa(&["synth-data", "--n", "40", "--out-dir", data.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        r#"{"epochs": 1, "layers": 1, "heads": 2, "m": 2, "dn_mode": "without_dn",
            "data": {"kind": "files", "annotations": "data/annotations.json", "features_dir": "data/features"}}"#,
    )
    .unwrap();
    let run = dir.path().join("run");
    let out = tsa(&["train", "--config", config.to_str().unwrap(), "--out-dir", run.to_str().unwrap(), "--eval"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("epoch   1"));
    for f in ["run.json", "model.tsaw", "train_log.json", "model_config.json"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let ckpt = run.join("model.tsaw");
    let report = dir.path().join("report.json");
    let out = tsa(&["evaluate", "--ckpt", ckpt.to_str().unwrap(), "--m", "2", "--dn", "without_dn", "--json", report.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let parsed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(parsed["spearman_rho"].is_number());

    let features = first_feature_file(&data.join("features"));
    let out = tsa(&["segment", "--features", features.to_str().unwrap(), "--ckpt", ckpt.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.starts_with("transitions ["));
    assert_eq!(text.lines().filter(|l| l.starts_with(char::is_numeric)).count(), 48);

    let maps = dir.path().join("attn");
    let out = tsa(&[
        "attn-dump",
        "--pair",
        "synth000_00035,synth000_00001",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--out-dir",
        maps.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csvs = std::fs::read_dir(&maps).unwrap().count();
    assert_eq!(csvs, 3 * 2);
    let first = std::fs::read_to_string(maps.join("step1_layer1_head1.csv")).unwrap();
    for row in first.lines() {
        let sum: f64 = row.split(',').map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-4);
    }
}

fn first_feature_file(dir: &Path) -> std::path::PathBuf {
    let mut files: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files.remove(0)
}
