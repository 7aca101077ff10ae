use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use biaslens::audit::AuditOptions;
use biaslens::nn::TrainConfig;

fn biaslens(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_biaslens"))
        .current_dir(cwd)
        .env_remove("BIASLENS_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_manifest(path: &Path) {
    let lines = [
        r#"{"sample_id":"a","class_label":"car","bbox":[1,1,5,5],"condition":"Normal","image_size":[16,16]}"#,
        r#"{"sample_id":"b","class_label":"car","bbox":[2,2,6,8],"condition":"Night","image_size":[16,16]}"#,
        r#"{"sample_id":"c","class_label":"car","bbox":[0,0,3,3],"condition":"Normal","image_size":[16,16]}"#,
        r#"{"sample_id":"d","class_label":"cyclist","bbox":[4,4,9,9],"condition":"Weather","image_size":[16,16]}"#,
    ];
    fs::write(path, lines.join("\n") + "\n").unwrap();
}

#[test]
fn analyze_writes_distribution_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(&dir.path().join("m.jsonl"));
    let o = biaslens(dir.path(), &["analyze", "--manifest", "m.jsonl", "--out", "r"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("r/distribution.csv")).unwrap();
    assert!(csv.contains("car") && csv.contains("cyclist"));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r/distribution.json")).unwrap()).unwrap();
    assert_eq!(json["counts"]["car"], 3);
    assert_eq!(json["total"], 4);
    assert!(dir.path().join("r/config.json").exists());
}

#[test]
fn missing_manifest_exits_1_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = biaslens(dir.path(), &["analyze", "--manifest", "absent-file.jsonl", "--out", "r"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("absent-file.jsonl"), "{}", stderr(&o));
}

#[test]
fn bad_arguments_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = biaslens(dir.path(), &["analyze", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    let o = biaslens(dir.path(), &["train", "--lr-schedule", "cosine", "--n-samples", "60"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--lr-schedule"));
    fs::write(dir.path().join("c.json"), r#"{"epoch": 3}"#).unwrap();
    let o = biaslens(dir.path(), &["analyze", "--config", "c.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("epoch"));
}

#[test]
fn audit_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| {
        vec![
            "audit",
            "--synthetic",
            "imbalanced-90-5-5",
            "--model",
            "tiny_vit",
            "--seed",
            "7",
            "--n-samples",
            "240",
            "--epochs",
            "2",
            "--probe-per-class",
            "8",
            "--sensitivity-neurons",
            "2",
            "--out",
            out,
        ]
    };
    let a = biaslens(dir.path(), &args("a"));
    assert!(a.status.success(), "{}", stderr(&a));
    let b = biaslens(dir.path(), &args("b"));
    assert!(b.status.success(), "{}", stderr(&b));
    let run = fs::read_dir(dir.path().join("a")).unwrap().next().unwrap().unwrap().file_name();
    assert!(run.to_string_lossy().starts_with("seed7-"));
    let ra = fs::read(dir.path().join("a").join(&run).join("report.json")).unwrap();
    let rb = fs::read(dir.path().join("b").join(&run).join("report.json")).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn mitigate_then_verify_and_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let common = ["--seed", "3", "--n-samples", "240", "--out", "o"];
    let mut args = vec!["audit", "--model", "tiny_vit", "--epochs", "2", "--probe-per-class", "8", "--sensitivity-neurons", "2"];
    args.extend(common);
    let o = biaslens(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let run_dir = String::from_utf8(o.stdout).unwrap().trim().to_string();
    let o = biaslens(dir.path(), &["mitigate", "--from", &run_dir, "--strategy", "cost_sensitive", "--out", "o"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = format!("{run_dir}/cost_sensitive/report.json");
    let o = biaslens(dir.path(), &["report", "--report", &report, "--verify", "--out", "o"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("byte-identical"));

    let snapshot = format!("{run_dir}/baseline.snapshot");
    let mut hm = vec!["heatmap", "--snapshot", &snapshot, "--sample", "syn3-00000", "--kind", "relevance"];
    hm.extend(common);
    let o = biaslens(dir.path(), &hm);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("o/heatmap-syn3-00000-relevance.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn subset_resample_allocates_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let o = biaslens(
        dir.path(),
        &["resample", "--synthetic", "balanced", "--n-samples", "900", "--mode", "subset", "--out", "s"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("s/resampled.jsonl")).unwrap();
    let mut counts = std::collections::BTreeMap::<String, usize>::new();
    for line in text.lines().filter(|l| l.contains("sample_id")) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        *counts.entry(v["class_label"].as_str().unwrap().to_string()).or_default() += 1;
    }
    let mut n: Vec<usize> = counts.values().copied().collect();
    n.sort_unstable();
    assert_eq!(n, vec![49, 49, 202]);
    // every record points at an image written under --out
    for line in text.lines().filter(|l| l.contains("sample_id")) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(dir.path().join("s").join(v["image_ref"].as_str().unwrap()).exists());
    }
}

#[test]
fn nothing_is_written_outside_out() {
    let dir = tempfile::tempdir().unwrap();
    let o = biaslens(dir.path(), &["analyze", "--n-samples", "60", "--out", "only-here"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let entries: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(entries, vec![std::ffi::OsString::from("only-here")]);
}

#[test]
fn heatmap_rejects_cnn_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let o = biaslens(dir.path(), &["train", "--n-samples", "60", "--epochs", "1", "--out", "t"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = biaslens(
        dir.path(),
        &["heatmap", "--snapshot", "t/model.snapshot", "--n-samples", "60", "--sample", "syn0-00000", "--out", "t"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("tiny_vit"));
}

#[test]
fn help_lists_the_library_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = biaslens(dir.path(), &["audit", "--help"]);
    assert!(o.status.success());
    let help = String::from_utf8(o.stdout).unwrap();
    let d = AuditOptions::default();
    let cnn = TrainConfig::cnn_default(0);
    let vit = TrainConfig::vit_default(0);
    let expect = [
        ("--iou-threshold", d.iou_threshold.to_string()),
        ("--train-fraction", d.train_fraction.to_string()),
        ("--val-fraction", d.val_fraction.to_string()),
        ("--probe-per-class", d.behavior.probe_per_class.to_string()),
        ("--sensitivity-neurons", d.behavior.sensitivity_neurons.to_string()),
        ("--plateau-delta", d.behavior.plateau_delta.to_string()),
        ("--plateau-window", d.behavior.plateau_window.to_string()),
        ("--tau-att", d.attention_plan.tau_att.to_string()),
        ("--kappa", d.attention_plan.kappa.to_string()),
        ("--tau-rel", d.tau_rel.to_string()),
        ("--fn-rate-drop", d.verdict.fn_rate_drop.to_string()),
        ("--ap-gain", d.verdict.ap_gain.to_string()),
        ("--max-iterations", d.recalibration.max_iterations.to_string()),
        ("--epsilon-gap", d.recalibration.epsilon_gap.to_string()),
        ("--eta", d.recalibration.eta.to_string()),
        ("--target-recall", d.recalibration.target_recall.to_string()),
        ("--learning-rate", cnn.learning_rate.to_string()),
        ("--batch-size", cnn.batch_size.to_string()),
        ("--box-loss-weight", cnn.box_loss_weight.to_string()),
    ];
    // clap wraps each flag's help onto the line after it
    let lines: Vec<&str> = help.lines().collect();
    for (flag, value) in expect {
        let i = lines.iter().position(|l| l.contains(&format!("{flag} "))).unwrap_or_else(|| panic!("{flag} missing"));
        let text = lines[i..(i + 2).min(lines.len())].join(" ");
        assert!(text.contains(&format!("[default: {value}")), "{flag}: {text}");
    }
    for (v, flag) in [
        (format!("{} for tiny_cnn, {} for tiny_vit", cnn.epochs, vit.epochs), "--epochs"),
        (format!("{} for tiny_cnn, {} for tiny_vit", cnn.weight_decay, vit.weight_decay), "--weight-decay"),
        (format!("{} for tiny_cnn, {} for tiny_vit", cnn.dropout, vit.dropout), "--dropout"),
    ] {
        assert!(help.contains(&v), "{flag} should list {v}");
    }
}
