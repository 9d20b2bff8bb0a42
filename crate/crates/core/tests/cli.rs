use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_litepose"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = run(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn json(p: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap()
}

/// Every file except the manifest, by name.
fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn assert_manifest_lists_outputs(dir: &Path, subcommand: &str) {
    let m = json(dir.join("manifest.json"));
    assert_eq!(m["subcommand"], subcommand);
    let listed: Vec<String> = m["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    let present: Vec<String> = files(dir).into_keys().collect();
    let mut sorted = listed.clone();
    sorted.sort();
    assert_eq!(sorted, present);
}

#[test]
fn cost_preset() {
    let t = tempfile::tempdir().unwrap();
    let o = ok(t.path(), &["--out", "c", "cost", "LitePose-S", "448"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("5007464448 MACs"));
    let j = json(t.path().join("c/cost.json"));
    assert_eq!(j["total_macs"], 5007464448u64);
    let csv = std::fs::read_to_string(t.path().join("c/cost.csv")).unwrap();
    assert!(csv.starts_with("layer_id,kind,k,cin,cout,h,w,params,macs"));
    assert_manifest_lists_outputs(&t.path().join("c"), "cost");
}

#[test]
fn cost_kernel_sweep_and_fusion_switch() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["--out", "k", "cost", "0.5-LitePose", "--kernels", "3,5,7"]);
    let sweep = std::fs::read_to_string(t.path().join("k/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 4);
    assert!(sweep.contains("3,") && sweep.contains("3769973760"));
    ok(t.path(), &["--out", "n", "cost", "0.5-LitePose", "--no-fusion"]);
    assert_eq!(json(t.path().join("n/cost.json"))["total_macs"], 4078756864u64);
    assert_eq!(run(t.path(), &["--out", "x", "cost", "0.5-LitePose", "--kernels", "4"]).status.code(), Some(2));
}

#[test]
fn cost_invalid_file_exits_2_with_violations() {
    let t = tempfile::tempdir().unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/presets/litepose-xs.json")).unwrap();
    let mut cfg: Value = serde_json::from_str(&src).unwrap();
    cfg["stages"][1][0]["k"] = Value::from(4);
    cfg["stages"][2][0]["cin"] = Value::from(99);
    let bad = t.path().join("bad.json");
    std::fs::write(&bad, cfg.to_string()).unwrap();
    let o = run(t.path(), &["--out", "b", "cost", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("s1.b0") && err.contains("kernel"), "{err}");
    assert!(err.contains("s2.b0"), "{err}");
}

#[test]
fn unknown_preset_and_bad_flags_exit_2() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(run(t.path(), &["cost", "NoSuchNet"]).status.code(), Some(2));
    assert_eq!(run(t.path(), &["cost"]).status.code(), Some(2));
    assert_eq!(run(t.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn shrink_table_and_sequences() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["--out", "s", "shrink"]);
    let csv = std::fs::read_to_string(t.path().join("s/shrink.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    let g: Vec<f64> = rows.iter().map(|r| r.rsplit(',').next().unwrap().parse().unwrap()).collect();
    for (v, want) in g.iter().zip([12.5, 10.1, 10.0, 9.2]) {
        assert!(((v - want) / want).abs() <= 0.05, "{v} vs {want}");
    }

    std::fs::write(t.path().join("empty.json"), r#"{"configs": []}"#).unwrap();
    ok(t.path(), &["--out", "e", "shrink", "--sequence", "empty.json"]);
    let seq = std::fs::read_to_string(t.path().join("e/sequence.csv")).unwrap();
    assert_eq!(seq, "config,base_channel,resolution,macs,gmacs\n");

    std::fs::write(
        t.path().join("chain.json"),
        r#"{"resolution": 256, "configs": [
            {"name": "a", "stages": [[4],[4,4],[4,4,4],[4,4,4,4]], "base_channel": 16},
            {"name": "b", "stages": [[3],[2,4],[1,2,4],[0,1,2,4]], "base_channel": 16}]}"#,
    )
    .unwrap();
    ok(t.path(), &["--out", "c", "shrink", "--sequence", "chain.json"]);
    let seq = std::fs::read_to_string(t.path().join("c/sequence.csv")).unwrap();
    assert_eq!(seq.lines().count(), 3);
    assert!(seq.lines().nth(2).unwrap().starts_with("b,16,256,"));

    std::fs::write(
        t.path().join("broken.json"),
        r#"{"configs": [
            {"name": "a", "stages": [[1],[1,1],[1,1,1],[1,1,1,1]], "base_channel": 16},
            {"name": "b", "stages": [[2],[1,1],[1,1,1],[1,1,1,1]], "base_channel": 16}]}"#,
    )
    .unwrap();
    assert_eq!(run(t.path(), &["--out", "x", "shrink", "--sequence", "broken.json"]).status.code(), Some(2));
}

#[test]
fn synth_decode_eval_round_trip() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["--out", "s", "--seed", "9", "synth", "--persons", "5", "--image-id", "3"]);
    ok(t.path(), &["--out", "d", "decode", "s/heatmaps.json", "--image-id", "3"]);
    let o = ok(t.path(), &["--out", "e", "eval", "--gt", "s/gt.json", "--pred", "d/pred.json"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("AP   1.0000") && text.contains("AP50 1.0000") && text.contains("AP75 1.0000"), "{text}");
    let ap = json(t.path().join("e/ap.json"));
    assert_eq!(ap["ap"], 1.0);
    let pr = std::fs::read_to_string(t.path().join("e/pr.csv")).unwrap();
    assert!(pr.lines().count() > 101);
    for (d, c) in [("s", "synth"), ("d", "decode"), ("e", "eval")] {
        assert_manifest_lists_outputs(&t.path().join(d), c);
    }
}

#[test]
fn synth_empty_scene() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["--out", "s", "synth", "--persons", "0"]);
    assert_eq!(json(t.path().join("s/gt.json"))["annotations"], Value::Array(vec![]));
    let blob = std::fs::read(t.path().join("s/heatmaps.bin")).unwrap();
    assert_eq!(blob.len(), 4 * 28 * 64 * 64);
    assert!(blob.iter().all(|&b| b == 0));
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let t = tempfile::tempdir().unwrap();
    let cases: &[&[&str]] = &[
        &["synth", "--persons", "4"],
        &["cost", "LitePose-XS"],
        &["report", "LitePose-XS", "Scaled-HigherHRNet-W16"],
        &["shrink"],
        &["search", "--space", "space-xs", "--max-gmacs", "1.0", "--generations", "50", "--population", "16"],
        &["infer", "LitePose-XS", "--resolution", "64", "--dump"],
    ];
    for (i, args) in cases.iter().enumerate() {
        let (a, b) = (format!("a{i}"), format!("b{i}"));
        let mut x = vec!["--seed", "5", "--out", &a];
        x.extend_from_slice(args);
        ok(t.path(), &x);
        let mut y = vec!["--seed", "5", "--out", &b];
        y.extend_from_slice(args);
        ok(t.path(), &y);
        let (fa, fb) = (files(&t.path().join(&a)), files(&t.path().join(&b)));
        assert!(!fa.is_empty());
        assert_eq!(fa, fb, "{args:?}");
        assert_manifest_lists_outputs(&t.path().join(&a), args[0]);
    }
}

#[test]
fn default_output_directory_is_timestamped() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["cost", "LitePose-XS"]);
    let dirs: Vec<String> = std::fs::read_dir(t.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(dirs.len(), 1);
    assert!(dirs[0].starts_with("run-"), "{dirs:?}");
}

#[test]
fn search_outputs_and_errors() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["--out", "s", "search", "--space", "space-xs", "--max-gmacs", "1.2", "--generations", "30"]);
    let lines = std::fs::read_to_string(t.path().join("s/search.jsonl")).unwrap();
    let hist: Vec<Value> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(hist.len(), 31);
    assert!(hist.iter().all(|h| h["gmacs"].as_f64().unwrap() <= 1.2));
    let best = json(t.path().join("s/best.json"));
    assert_eq!(best, hist.last().unwrap()["best"]);

    let o = run(t.path(), &["--out", "x", "search", "--space", "space-xs", "--max-gmacs", "0.01", "--generations", "5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("infeasible"));
}

#[test]
fn infer_reports_matching_mac_counts_and_reloads_weights() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["--out", "i", "infer", "LitePose-XS", "--resolution", "64", "--dump", "--save-weights"]);
    let m = json(t.path().join("i/macs.json"));
    assert_eq!(m["counted_macs"], m["model_macs"]);
    assert_eq!(m["outputs"][0], serde_json::json!([1, 28, 16, 16]));
    assert_eq!(m["outputs"][1], serde_json::json!([1, 14, 32, 32]));
    ok(t.path(), &["--out", "j", "--seed", "77", "infer", "LitePose-XS", "--resolution", "64", "--dump", "--weights", "i/weights.json"]);
    // Same weights, different seed: only the random input differs, so the
    // outputs differ but the counts agree.
    assert_eq!(json(t.path().join("j/macs.json"))["counted_macs"], m["counted_macs"]);

    ok(t.path(), &["--out", "d", "decode", "i/output0.json", "i/output1.json"]);
    assert!(t.path().join("d/pred.json").exists());
}

#[test]
fn infer_subnet_choice() {
    let t = tempfile::tempdir().unwrap();
    let choice = concat!(env!("CARGO_MANIFEST_DIR"), "/presets/litepose-xs.choice.json");
    ok(t.path(), &["--out", "i", "infer", "LitePose-supernet", "--choice", choice, "--resolution", "64"]);
    let m = json(t.path().join("i/macs.json"));
    assert_eq!(m["counted_macs"], m["model_macs"]);
    assert_eq!(run(t.path(), &["infer", "Scaled-HigherHRNet-W16"]).status.code(), Some(2));
}
