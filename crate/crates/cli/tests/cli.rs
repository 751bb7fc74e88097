use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn locseq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_locseq"))
        .current_dir(dir)
        .env_remove("LOCSEQ_WORKERS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(o: &Output) {
    assert_eq!(code(o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

fn json_lines(dir: &Path, name: &str) -> Vec<serde_json::Value> {
    read(dir, name)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn decode_single_detection() {
    let d = TempDir::new().unwrap();
    fs::write(d.path().join("in.txt"), "person-[0.001,0.345,0.111,0.678]\n").unwrap();
    ok(&locseq(d.path(), &["decode", "-i", "in.txt", "-o", "out.jsonl"]));
    let recs = json_lines(d.path(), "out.jsonl");
    assert_eq!(recs.len(), 1);
    let det = &recs[0]["detections"][0];
    assert_eq!(det["label"], "person");
    assert_eq!(det["bbox_norm"], serde_json::json!([0.001, 0.345, 0.111, 0.678]));
    assert!(d.path().join("out.jsonl.manifest.json").exists());
}

#[test]
fn encode_decode_round_trip_is_byte_identical() {
    let d = TempDir::new().unwrap();
    let seqs = "person-[0.001,0.345,0.111,0.678]&dog-[0.200,0.300,0.400,0.500]\nNone\ntraffic light-[0.000,0.000,1.000,1.000]\n";
    fs::write(d.path().join("seqs.txt"), seqs).unwrap();
    ok(&locseq(d.path(), &["decode", "-i", "seqs.txt", "-o", "dets.jsonl"]));
    ok(&locseq(d.path(), &["encode", "-i", "dets.jsonl", "-o", "again.txt", "--text"]));
    assert_eq!(read(d.path(), "again.txt"), seqs);

    ok(&locseq(d.path(), &["encode", "-i", "dets.jsonl", "-o", "recs.jsonl", "--order", "coord-first"]));
    ok(&locseq(d.path(), &["decode", "-i", "recs.jsonl", "-o", "dets2.jsonl"]));
    assert_eq!(read(d.path(), "dets.jsonl"), read(d.path(), "dets2.jsonl"));
    assert!(read(d.path(), "recs.jsonl").contains("[0.001,0.345,0.111,0.678]-person"));
}

#[test]
fn malformed_line_strict_fails_lenient_reports() {
    let d = TempDir::new().unwrap();
    fs::write(d.path().join("in.txt"), "cat-[0.1,0.2,0.3,0.4]\ndog-[0.1,0.2\nbird-[0.5,0.5,0.6,0.6]\n").unwrap();
    let strict = locseq(d.path(), &["decode", "-i", "in.txt", "-o", "s.jsonl"]);
    assert_eq!(code(&strict), 1);
    assert!(String::from_utf8_lossy(&strict.stderr).contains("line 2"));

    ok(&locseq(d.path(), &["decode", "-i", "in.txt", "-o", "l.jsonl", "--mode", "lenient"]));
    let recs = json_lines(d.path(), "l.jsonl");
    let labels: Vec<_> = recs
        .iter()
        .flat_map(|r| r["detections"].as_array().unwrap().iter().map(|x| x["label"].clone()))
        .collect();
    assert_eq!(labels, ["cat", "bird"]);
    let diags = json_lines(d.path(), "l.jsonl.diagnostics.jsonl");
    assert_eq!(diags.len(), 1);
    assert_eq!(diags[0]["line"], 2);
}

fn tok(text: &str, prob: f64) -> serde_json::Value {
    serde_json::json!({ "text": text, "prob": prob })
}

fn worked_trace() -> String {
    let tokens = vec![
        tok("black", 0.9),
        tok(" cat", 0.9),
        tok("-[", 1.0),
        tok("0.100", 0.8),
        tok(",", 1.0),
        tok("0.200", 0.8),
        tok(",", 1.0),
        tok("0.300", 1.0),
        tok(",", 1.0),
        tok("0.400", 1.0),
        tok("]", 1.0),
    ];
    let rec = serde_json::json!({ "image_id": "img1", "instruction": "Find the black cat.", "tokens": tokens });
    format!("{rec}\n")
}

#[test]
fn score_worked_example() {
    let d = TempDir::new().unwrap();
    fs::write(d.path().join("t.jsonl"), worked_trace()).unwrap();
    ok(&locseq(d.path(), &["score", "-i", "t.jsonl", "-o", "s.jsonl"]));
    let det = &json_lines(d.path(), "s.jsonl")[0]["detections"][0];
    assert_eq!(det["label"], "black cat");
    let s = det["score"].as_f64().unwrap();
    assert!((s - 0.72).abs() < 1e-12, "{s}");

    ok(&locseq(d.path(), &["score", "-i", "t.jsonl", "-o", "c.jsonl", "--use-label", "false", "--use-loc", "false"]));
    assert_eq!(json_lines(d.path(), "c.jsonl")[0]["detections"][0]["score"], 0.99);

    ok(&locseq(d.path(), &["score", "-i", "t.jsonl", "-o", "q.jsonl", "--q", "1"]));
    let s = json_lines(d.path(), "q.jsonl")[0]["detections"][0]["score"].as_f64().unwrap();
    assert!((s - 0.81).abs() < 1e-12, "{s}");

    assert_eq!(code(&locseq(d.path(), &["score", "-i", "t.jsonl", "-o", "x.jsonl", "--q", "1.5"])), 2);
}

#[test]
fn usage_errors_exit_two() {
    let d = TempDir::new().unwrap();
    assert_eq!(code(&locseq(d.path(), &["decode", "-i", "missing.txt", "-o", "o.jsonl"])), 2);
    assert_eq!(code(&locseq(d.path(), &["frobnicate"])), 2);
    assert_eq!(code(&locseq(d.path(), &["eval", "--task", "det"])), 2);
}

fn exact_synth(dir: &Path, images: usize) {
    let cfg = serde_json::json!({
        "seed": 11, "images": images, "box_noise": 0.0, "drop_rate": 0.0, "spurious_rate": 0.0
    });
    fs::write(dir.join("synth.json"), cfg.to_string()).unwrap();
    ok(&locseq(dir, &["synth", "-c", "synth.json", "-o", "syn"]));
}

#[test]
fn synth_score_eval_perfect_detection() {
    let d = TempDir::new().unwrap();
    exact_synth(d.path(), 12);
    for f in ["ground_truth.jsonl", "traces.jsonl", "origins.jsonl", "config.json", "manifest.json"] {
        assert!(d.path().join("syn").join(f).exists(), "{f}");
    }
    ok(&locseq(d.path(), &["score", "-i", "syn/traces.jsonl", "-o", "scored.jsonl"]));
    let out = locseq(
        d.path(),
        &["eval", "--task", "det", "-p", "scored.jsonl", "-g", "syn/ground_truth.jsonl", "-r", "rep.json"],
    );
    ok(&out);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("mAP"));
    assert!(table.contains("100.0"));
    let rep: serde_json::Value = serde_json::from_str(&read(d.path(), "rep.json")).unwrap();
    assert_eq!(rep["detection"]["map"], 1.0);
}

#[test]
fn rec_threshold_is_inclusive() {
    let d = TempDir::new().unwrap();
    // gt [0,0,100,100]; prediction [0,0,49,100] has IoU 0.49
    let gt = r#"{"image_id":"a","width":1000,"height":1000,"annotations":[{"label":"cup","bbox":[0,0,100,100]}]}"#;
    let pred = r#"{"image_id":"a","detections":[{"label":"cup","bbox_norm":[0.0,0.0,0.049,0.1]}]}"#;
    fs::write(d.path().join("gt.jsonl"), format!("{gt}\n")).unwrap();
    fs::write(d.path().join("p.jsonl"), format!("{pred}\n")).unwrap();
    let run = |t: &str| {
        ok(&locseq(
            d.path(),
            &["eval", "--task", "rec", "-p", "p.jsonl", "-g", "gt.jsonl", "-r", "r.json", "--threshold", t],
        ));
        let rep: serde_json::Value = serde_json::from_str(&read(d.path(), "r.json")).unwrap();
        rep["rec"]["accuracy"].as_f64().unwrap()
    };
    assert_eq!(run("0.5"), 0.0);
    assert_eq!(run("0.49"), 1.0);
}

#[test]
fn grounding_reports_both_recalls() {
    let d = TempDir::new().unwrap();
    let fx: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fixtures().join("grounding/phrases.json")).unwrap()).unwrap();
    let mut gts = String::new();
    let mut preds = String::new();
    for (i, p) in fx["phrases"].as_array().unwrap().iter().enumerate() {
        let id = format!("g{i}");
        let gt = serde_json::json!({
            "image_id": id, "width": 1000, "height": 1000,
            "phrases": [{ "phrase": p["phrase"], "boxes": p["gts"] }]
        });
        let dets: Vec<_> = p["predictions"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| {
                let b: Vec<f64> = x["bbox"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap() / 1000.0).collect();
                serde_json::json!({ "label": p["phrase"], "bbox_norm": b, "score": x["score"] })
            })
            .collect();
        gts.push_str(&format!("{gt}\n"));
        preds.push_str(&format!("{}\n", serde_json::json!({ "image_id": id, "detections": dets })));
    }
    fs::write(d.path().join("gt.jsonl"), gts).unwrap();
    fs::write(d.path().join("p.jsonl"), preds).unwrap();
    let out = locseq(d.path(), &["eval", "--task", "ground", "-p", "p.jsonl", "-g", "gt.jsonl", "-r", "r.json"]);
    ok(&out);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("ANY") && table.contains("MERGED"));
    let rep: serde_json::Value = serde_json::from_str(&read(d.path(), "r.json")).unwrap();
    let g = &rep["grounding"];
    assert!((g["any_recall"].as_f64().unwrap() - 7.0 / 11.0).abs() < 1e-12);
    assert!((g["merged_recall"].as_f64().unwrap() - 3.0 / 5.0).abs() < 1e-12);
}

fn build(dir: &Path, scenario: &str, seed: &str, out: &str, extra: &[&str]) -> Output {
    let sources = fixtures().join("sources/records.jsonl");
    let templates = fixtures().join("templates");
    let mut args = vec![
        "build",
        "-s",
        sources.to_str().unwrap(),
        "-t",
        templates.to_str().unwrap(),
        "--scenario",
        scenario,
        "--seed",
        seed,
        "-o",
        out,
    ];
    args.extend_from_slice(extra);
    locseq(dir, &args)
}

#[test]
fn build_is_deterministic_and_worker_independent() {
    let d = TempDir::new().unwrap();
    for (out, workers) in [("a.jsonl", "1"), ("b.jsonl", "4")] {
        ok(&build(d.path(), "single", "5", out, &["--workers", workers]));
    }
    assert_eq!(read(d.path(), "a.jsonl"), read(d.path(), "b.jsonl"));
    assert_eq!(read(d.path(), "a.jsonl.dropped.jsonl"), read(d.path(), "b.jsonl.dropped.jsonl"));
    let header = &json_lines(d.path(), "a.jsonl")[0];
    assert_eq!(header["seed"], 5);
    assert_eq!(header["scenario"], "single_referent");
    let dropped = json_lines(d.path(), "a.jsonl.dropped.jsonl");
    assert_eq!(dropped.iter().filter(|r| r["stage"] == "filter").count(), 38);
    let manifest: serde_json::Value = serde_json::from_str(&read(d.path(), "a.jsonl.manifest.json")).unwrap();
    assert_eq!(manifest["command"], "build");
    assert_eq!(manifest["workers"], 1);
}

#[test]
fn build_non_existing_targets_none() {
    let d = TempDir::new().unwrap();
    let lexicon = fixtures().join("attributes.json");
    ok(&build(
        d.path(),
        "none",
        "0",
        "n.jsonl",
        &["--lexicon", lexicon.to_str().unwrap(), "--composed-negatives", "2"],
    ));
    let lines = json_lines(d.path(), "n.jsonl");
    assert!(lines.len() > 1);
    assert!(lines[1..].iter().all(|s| s["target"] == "None"));
}

#[test]
fn build_missing_templates_exit_two() {
    let d = TempDir::new().unwrap();
    let sources = fixtures().join("sources/records.jsonl");
    let o = locseq(
        d.path(),
        &["build", "-s", sources.to_str().unwrap(), "-t", "absent", "--scenario", "single", "-o", "x.jsonl"],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn synth_output_ignores_worker_count() {
    let d = TempDir::new().unwrap();
    fs::write(d.path().join("c.json"), r#"{"seed": 4, "images": 40}"#).unwrap();
    ok(&locseq(d.path(), &["synth", "-c", "c.json", "-o", "one", "--workers", "1"]));
    ok(&locseq(d.path(), &["synth", "-c", "c.json", "-o", "many", "--workers", "3"]));
    for f in ["ground_truth.jsonl", "traces.jsonl", "origins.jsonl"] {
        assert_eq!(read(d.path(), &format!("one/{f}")), read(d.path(), &format!("many/{f}")), "{f}");
    }
    fs::write(d.path().join("bad.json"), r#"{"images": 0}"#).unwrap();
    assert_eq!(code(&locseq(d.path(), &["synth", "-c", "bad.json", "-o", "x"])), 2);
}
