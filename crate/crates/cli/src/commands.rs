use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::json;

use locseq_core::codec::{parse, serialize, DetectionRecord, SequenceOrder, SequenceRecord};
use locseq_core::dataset::{
    build_scenario, digest_hex, filter_images, load_templates, parse_source_lines, AttributeLexicon, BuildConfig,
    DatasetError, Manifest, Scenario,
};
use locseq_core::metrics::{
    detection_eval, detection_inputs, grounding_cases, grounding_eval, rec_accuracy, rec_samples, EvalReport,
    GroundTruthImage, RecReport,
};
use locseq_core::scoring::{score_trace, ScoringConfig, TraceRecord};
use locseq_core::synth::{generate, SynthConfig};

use crate::lines::{create, map_lines, read_jsonl, require_dir, require_file, sidecar, write_json_line};
use crate::manifest::Run;
use crate::{BuildArgs, DecodeArgs, EncodeArgs, EvalArgs, ScoreArgs, SynthArgs, Task, UsageError};

fn manifest_path(explicit: Option<&Path>, output: &Path) -> std::path::PathBuf {
    explicit.map_or_else(|| sidecar(output, ".manifest.json"), Path::to_path_buf)
}

pub fn encode(a: &EncodeArgs, manifest: Option<&Path>) -> Result<()> {
    require_file(&a.input, "--input")?;
    let mut run = Run::start("encode", a);
    run.input(&a.input);
    let order = SequenceOrder::from(a.order);
    let mut out = create(&a.output)?;
    map_lines(
        &a.input,
        |_, line| -> Result<String> {
            let rec: DetectionRecord = serde_json::from_str(line)?;
            let sequence = serialize(&rec.to_predictions(), order)?;
            Ok(if a.text {
                sequence
            } else {
                serde_json::to_string(&SequenceRecord {
                    image_id: rec.image_id,
                    sequence,
                    order,
                })?
            })
        },
        |n, r| {
            let text = r.with_context(|| format!("{}: line {n}", a.input.display()))?;
            writeln!(out, "{text}")?;
            Ok(())
        },
    )?;
    out.flush()?;
    run.finish(&[&a.output], &manifest_path(manifest, &a.output))
}

/// A decode input line: a sequence record, or a bare sequence whose image
/// id becomes its line number.
fn sequence_line(n: usize, line: &str) -> Result<SequenceRecord> {
    if line.trim_start().starts_with('{') {
        Ok(serde_json::from_str(line)?)
    } else {
        Ok(SequenceRecord {
            image_id: n.to_string(),
            sequence: line.to_string(),
            order: SequenceOrder::LabelFirst,
        })
    }
}

pub fn decode(a: &DecodeArgs, manifest: Option<&Path>) -> Result<()> {
    require_file(&a.input, "--input")?;
    let mut run = Run::start("decode", a);
    run.input(&a.input);
    let mode = a.mode.into();
    let lenient = matches!(a.mode, crate::ModeArg::Lenient);
    let diag_path = a.diagnostics.clone().unwrap_or_else(|| sidecar(&a.output, ".diagnostics.jsonl"));
    let mut out = create(&a.output)?;
    let mut diag = if lenient { Some(create(&diag_path)?) } else { None };
    let mut skipped = 0usize;
    map_lines(
        &a.input,
        |n, line| {
            let rec = sequence_line(n, line)?;
            let order = a.order.map_or(rec.order, SequenceOrder::from);
            let parsed = parse(&rec.sequence, order, mode)
                .map_err(|e| anyhow!("image {}: {e} at character {}", rec.image_id, e.offset))?;
            Ok::<_, anyhow::Error>((rec.image_id, parsed))
        },
        |n, r| {
            match (r, diag.as_mut()) {
                (Ok((image_id, parsed)), d) => {
                    if let Some(d) = d {
                        if !parsed.diagnostics.is_empty() {
                            write_json_line(d, &json!({"line": n, "image_id": image_id, "errors": parsed.diagnostics}))?;
                        }
                    }
                    write_json_line(&mut out, &DetectionRecord::from_predictions(image_id, parsed.predictions))?;
                }
                (Err(e), Some(d)) => {
                    skipped += 1;
                    write_json_line(d, &json!({"line": n, "error": format!("{e:#}")}))?;
                }
                (Err(e), None) => bail!("{}: line {n}: {e:#}", a.input.display()),
            }
            Ok(())
        },
    )?;
    out.flush()?;
    let mut outputs = vec![a.output.as_path()];
    if let Some(mut d) = diag {
        d.flush()?;
        outputs.push(&diag_path);
    }
    if skipped > 0 {
        eprintln!("skipped {skipped} unreadable lines; see {}", diag_path.display());
    }
    run.finish(&outputs, &manifest_path(manifest, &a.output))
}

pub fn score(a: &ScoreArgs, manifest: Option<&Path>) -> Result<()> {
    require_file(&a.input, "--input")?;
    let mut run = Run::start("score", a);
    run.input(&a.input);
    let config = ScoringConfig {
        q: a.q,
        use_label_score: a.use_label,
        use_loc_score: a.use_loc,
        default_score: a.default_score,
    };
    config.validate().map_err(|e| UsageError(e.to_string()))?;
    let order = SequenceOrder::from(a.order);
    let mut out = create(&a.output)?;
    map_lines(
        &a.input,
        |_, line| -> Result<DetectionRecord> {
            let rec: TraceRecord = serde_json::from_str(line)?;
            let (image_id, trace) = rec.into_trace()?;
            let scored = score_trace(&trace, order, &config).with_context(|| format!("image {image_id}"))?;
            Ok(DetectionRecord::from_predictions(image_id, scored))
        },
        |n, r| {
            let rec = r.with_context(|| format!("{}: line {n}", a.input.display()))?;
            write_json_line(&mut out, &rec)
        },
    )?;
    out.flush()?;
    run.finish(&[&a.output], &manifest_path(manifest, &a.output))
}

pub fn eval(a: &EvalArgs, manifest: Option<&Path>) -> Result<()> {
    require_file(&a.predictions, "--predictions")?;
    require_file(&a.ground_truth, "--ground-truth")?;
    let mut run = Run::start("eval", a);
    run.input(&a.predictions);
    run.input(&a.ground_truth);
    let records: Vec<DetectionRecord> = read_jsonl(&a.predictions)?;
    let gts: Vec<GroundTruthImage> = read_jsonl(&a.ground_truth)?;
    let mut report = EvalReport::default();
    match a.task {
        Task::Det => {
            let preds = detection_inputs(&records, &gts, a.default_score)?;
            let metrics = detection_eval(&preds, &gts)?;
            for d in &metrics.diagnostics {
                eprintln!("warning: {d}");
            }
            report.detection = Some(metrics);
        }
        Task::Rec => {
            let samples = rec_samples(&records, &gts, a.default_score)?;
            let accuracy = rec_accuracy(&samples, a.threshold)?;
            report.rec = Some(RecReport {
                accuracy,
                samples: samples.len(),
                correct: (accuracy * samples.len() as f64).round() as usize,
            });
        }
        Task::Ground => {
            let (cases, diagnostics) = grounding_cases(&records, &gts, a.default_score)?;
            for d in &diagnostics {
                eprintln!("warning: {d}");
            }
            report.grounding = Some(grounding_eval(&cases, a.threshold)?);
        }
    }
    print!("{}", report.to_table());
    let mut w = create(&a.report)?;
    serde_json::to_writer_pretty(&mut w, &report)?;
    w.write_all(b"\n")?;
    w.flush()?;
    run.finish(&[&a.report], &manifest_path(manifest, &a.report))
}

pub fn build(a: &BuildArgs, manifest: Option<&Path>) -> Result<()> {
    require_file(&a.sources, "--sources")?;
    require_dir(&a.templates, "--templates")?;
    if let Some(lex) = &a.lexicon {
        require_file(lex, "--lexicon")?;
    }
    let mut run = Run::start("build", a);
    run.input(&a.sources);
    let scenario = Scenario::from(a.scenario);
    let templates = load_templates(&a.templates, scenario).map_err(|e| match e {
        DatasetError::Io(msg) => anyhow::Error::new(UsageError(msg)),
        other => other.into(),
    })?;
    let mut config = BuildConfig::new(scenario, a.seed);
    config.category_set = a.category_set.into();
    config.max_categories = a.max_categories;
    config.max_templates = a.max_templates;
    config.balance_large = a.balance_large;
    config.composed_negatives = a.composed_negatives;
    if let Some(path) = &a.lexicon {
        run.input(path);
        let text = std::fs::read_to_string(path)?;
        let lexicon: AttributeLexicon =
            serde_json::from_str(&text).with_context(|| format!("{}", path.display()))?;
        config.lexicon = Some(lexicon);
    }

    let bytes = std::fs::read(&a.sources).with_context(|| format!("reading {}", a.sources.display()))?;
    let text = String::from_utf8(bytes).context("sources are not UTF-8")?;
    let filtered = filter_images(parse_source_lines(&text));
    let built = build_scenario(&filtered.kept, &templates, &config)?;
    let header = Manifest::new(&config, digest_hex(text.as_bytes()), &built);

    let mut out = create(&a.output)?;
    write_json_line(&mut out, &header)?;
    for s in &built.samples {
        write_json_line(&mut out, s)?;
    }
    out.flush()?;
    let dropped_path = a.dropped.clone().unwrap_or_else(|| sidecar(&a.output, ".dropped.jsonl"));
    let mut dropped = create(&dropped_path)?;
    for d in &filtered.dropped {
        let mut v = serde_json::to_value(d)?;
        v["stage"] = json!("filter");
        write_json_line(&mut dropped, &v)?;
    }
    for s in &built.skipped {
        write_json_line(&mut dropped, &json!({"stage": "build", "record_id": s.record_id, "reason": s.reason}))?;
    }
    dropped.flush()?;
    eprintln!(
        "{} records kept, {} dropped, {} skipped; {} samples ({} duplicates removed)",
        filtered.kept.len(),
        filtered.dropped.len(),
        built.skipped.len(),
        built.samples.len(),
        built.duplicates
    );
    run.finish(&[&a.output, &dropped_path], &manifest_path(manifest, &a.output))
}

pub fn synth(a: &SynthArgs, manifest: Option<&Path>) -> Result<()> {
    require_file(&a.config, "--config")?;
    let mut run = Run::start("synth", a);
    run.input(&a.config);
    let text = std::fs::read_to_string(&a.config)?;
    let mut config: SynthConfig =
        serde_json::from_str(&text).with_context(|| format!("{}", a.config.display()))?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(images) = a.images {
        config.images = images;
    }
    config.validate().map_err(|e| UsageError(e.to_string()))?;
    let bundle = generate(&config)?;

    std::fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    let gt_path = a.output.join("ground_truth.jsonl");
    let trace_path = a.output.join("traces.jsonl");
    let origin_path = a.output.join("origins.jsonl");
    let config_path = a.output.join("config.json");
    let mut gt = create(&gt_path)?;
    for s in &bundle.scenes {
        write_json_line(&mut gt, &s.image)?;
    }
    gt.flush()?;
    let mut traces = create(&trace_path)?;
    let mut origins = create(&origin_path)?;
    for o in &bundle.outputs {
        write_json_line(&mut traces, &TraceRecord::from_trace(&o.image_id, &o.trace))?;
        write_json_line(&mut origins, &json!({"image_id": o.image_id, "origins": o.origins}))?;
    }
    traces.flush()?;
    origins.flush()?;
    let mut c = create(&config_path)?;
    serde_json::to_writer_pretty(&mut c, &config)?;
    c.write_all(b"\n")?;
    c.flush()?;
    let manifest = manifest.map_or_else(|| a.output.join("manifest.json"), Path::to_path_buf);
    run.finish(&[&gt_path, &trace_path, &origin_path, &config_path], &manifest)
}
