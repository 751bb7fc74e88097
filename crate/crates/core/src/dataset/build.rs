use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::negatives::{compose_negatives, AttributeLexicon};
use super::template::{instantiate_template, Fill, Template};
use super::{largest_bucket, DatasetError, Payload, Scenario, SourceRecord};
use crate::codec::{serialize, validate_label, Detection, NormBox, PredictionSet, SequenceOrder, NONE_SENTINEL};
use crate::metrics::{AreaRange, PixelBox};

/// Which categories a multi-category instruction lists.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategorySetMode {
    /// The categories annotated in the image.
    #[default]
    PerImage,
    /// Every category seen in the input.
    DatasetWide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub category_set: CategorySetMode,
    /// Per-image cap on listed categories; a random subset is kept.
    pub max_categories: Option<usize>,
    /// Use only the first N templates.
    pub max_templates: Option<usize>,
    /// Subsample samples containing large objects 1:1 against the rest.
    pub balance_large: bool,
    #[serde(skip)]
    pub lexicon: Option<AttributeLexicon>,
    /// Composed negatives per non-existing record, when a lexicon is set.
    pub composed_negatives: usize,
}

impl BuildConfig {
    pub fn new(scenario: Scenario, seed: u64) -> Self {
        Self {
            scenario,
            seed,
            category_set: CategorySetMode::PerImage,
            max_categories: None,
            max_templates: None,
            balance_large: false,
            lexicon: None,
            composed_negatives: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub record_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSample {
    pub image_id: String,
    pub scenario: Scenario,
    pub instruction: String,
    /// Label-first sequence, or "None".
    pub target: String,
    pub provenance: Provenance,
    /// Largest area bucket among the target boxes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<AreaRange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub record_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuildOutput {
    pub samples: Vec<ScenarioSample>,
    pub skipped: Vec<SkippedRecord>,
    /// Samples removed as duplicates of an earlier (image, instruction, target).
    pub duplicates: usize,
}

/// First line of a built dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub scenario: Scenario,
    pub source_digest: String,
    pub counts: BTreeMap<Scenario, usize>,
}

impl Manifest {
    pub fn new(config: &BuildConfig, source_digest: impl Into<String>, output: &BuildOutput) -> Self {
        let mut counts: BTreeMap<Scenario, usize> = Scenario::ALL.iter().map(|s| (*s, 0)).collect();
        for s in &output.samples {
            *counts.entry(s.scenario).or_default() += 1;
        }
        Self {
            seed: config.seed,
            scenario: config.scenario,
            source_digest: source_digest.into(),
            counts,
        }
    }
}

fn keyed_rng(seed: u64, tag: &str, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update([0]);
    h.update(key.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn clean_label(raw: &str) -> Result<String, String> {
    let label = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    validate_label(&label).map_err(|e| e.to_string())?;
    Ok(label)
}

struct Ctx<'a> {
    config: &'a BuildConfig,
    templates: &'a [Template],
    all_categories: &'a [String],
}

struct Target {
    label_boxes: Vec<(String, PixelBox)>,
}

impl Target {
    fn render(&self, r: &SourceRecord) -> Result<(String, Option<AreaRange>), String> {
        if self.label_boxes.is_empty() {
            return Ok((NONE_SENTINEL.to_string(), None));
        }
        let (w, h) = (f64::from(r.width), f64::from(r.height));
        let dets = self
            .label_boxes
            .iter()
            .map(|(label, b)| {
                NormBox::from_normalized(b.x1 / w, b.y1 / h, b.x2 / w, b.y2 / h)
                    .map(|nb| Detection::new(label.clone(), nb))
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let text = serialize(&PredictionSet::Objects(dets), SequenceOrder::LabelFirst).map_err(|e| e.to_string())?;
        Ok((text, largest_bucket(self.label_boxes.iter().map(|(_, b)| b))))
    }
}

impl Ctx<'_> {
    fn sample(&self, r: &SourceRecord, rng: &mut ChaCha8Rng, fill: Fill<'_>, target: Target) -> Result<ScenarioSample, String> {
        let template = &self.templates[rng.random_range(0..self.templates.len())];
        let instruction = instantiate_template(template, fill).map_err(|e| e.to_string())?;
        let (target, size) = target.render(r)?;
        Ok(ScenarioSample {
            image_id: r.image_id.clone(),
            scenario: self.config.scenario,
            instruction,
            target,
            provenance: Provenance {
                source: r.source.clone(),
                record_id: r.record_id.clone(),
            },
            size,
        })
    }

    fn record(&self, r: &SourceRecord) -> Result<Vec<ScenarioSample>, String> {
        let mut rng = keyed_rng(self.config.seed, self.config.scenario.as_str(), &r.record_id);
        let wrong = || {
            let kind = match &r.annotation {
                Payload::Referent { .. } => "referent",
                Payload::Detection { .. } => "detection",
                Payload::Grounding { .. } => "grounding",
                Payload::Negative { .. } => "negative",
            };
            Err(format!("{kind} payload is not used for {}", self.config.scenario))
        };
        match (self.config.scenario, &r.annotation) {
            (Scenario::SingleReferent, Payload::Referent { expr, bbox }) => {
                let expr = clean_label(expr)?;
                let t = Target {
                    label_boxes: vec![(expr.clone(), *bbox)],
                };
                Ok(vec![self.sample(r, &mut rng, Fill::Expr(&expr), t)?])
            }
            (Scenario::OneCategoryMulti, Payload::Grounding { phrases }) => {
                let groups = phrases
                    .iter()
                    .filter(|p| !p.boxes.is_empty())
                    .map(|p| Ok((clean_label(&p.phrase)?, p.boxes.clone())))
                    .collect::<Result<Vec<_>, String>>()?;
                self.per_group(r, &mut rng, groups)
            }
            (Scenario::OneCategoryMulti, Payload::Detection { objects }) => {
                let mut groups: Vec<(String, Vec<PixelBox>)> = Vec::new();
                for o in objects {
                    let label = clean_label(&o.label)?;
                    match groups.iter_mut().find(|g| g.0 == label) {
                        Some(g) => g.1.push(o.bbox),
                        None => groups.push((label, vec![o.bbox])),
                    }
                }
                self.per_group(r, &mut rng, groups)
            }
            (Scenario::MultiCategoryMulti, Payload::Detection { objects }) => {
                if objects.is_empty() {
                    return Err("empty annotation payload".into());
                }
                let objects = objects
                    .iter()
                    .map(|o| Ok((clean_label(&o.label)?, o.bbox)))
                    .collect::<Result<Vec<_>, String>>()?;
                let mut present: Vec<String> = Vec::new();
                for (l, _) in &objects {
                    if !present.contains(l) {
                        present.push(l.clone());
                    }
                }
                let listed: Vec<String> = match self.config.category_set {
                    CategorySetMode::DatasetWide => self.all_categories.to_vec(),
                    CategorySetMode::PerImage => match self.config.max_categories {
                        Some(k) if k < present.len() => {
                            let mut pick = index::sample(&mut rng, present.len(), k.max(1)).into_vec();
                            pick.sort_unstable();
                            pick.into_iter().map(|i| present[i].clone()).collect()
                        }
                        _ => present,
                    },
                };
                let t = Target {
                    label_boxes: objects.into_iter().filter(|(l, _)| listed.contains(l)).collect(),
                };
                Ok(vec![self.sample(r, &mut rng, Fill::Categories(&listed), t)?])
            }
            (Scenario::NonExisting, Payload::Negative { categories, positives }) => {
                let mut labels = categories.iter().map(|c| clean_label(c)).collect::<Result<Vec<_>, _>>()?;
                if let Some(lex) = &self.config.lexicon {
                    if self.config.composed_negatives > 0 {
                        let composed =
                            compose_negatives(positives, positives, lex, self.config.composed_negatives, &mut rng);
                        labels.extend(composed.referents);
                    }
                }
                if labels.is_empty() {
                    return Err("empty annotation payload".into());
                }
                labels
                    .iter()
                    .map(|l| self.sample(r, &mut rng, Fill::Expr(l), Target { label_boxes: Vec::new() }))
                    .collect()
            }
            _ => wrong(),
        }
    }

    fn per_group(
        &self,
        r: &SourceRecord,
        rng: &mut ChaCha8Rng,
        groups: Vec<(String, Vec<PixelBox>)>,
    ) -> Result<Vec<ScenarioSample>, String> {
        if groups.is_empty() {
            return Err("empty annotation payload".into());
        }
        groups
            .into_iter()
            .map(|(label, boxes)| {
                let t = Target {
                    label_boxes: boxes.into_iter().map(|b| (label.clone(), b)).collect(),
                };
                self.sample(r, rng, Fill::Expr(&label), t)
            })
            .collect()
    }
}

/// Builds samples for one scenario. Records are processed in parallel with
/// a per-record generator keyed by seed and record id, so the output depends
/// only on the seed and the input order.
pub fn build_scenario(
    records: &[SourceRecord],
    templates: &[Template],
    config: &BuildConfig,
) -> Result<BuildOutput, DatasetError> {
    let mut templates: Vec<Template> = templates
        .iter()
        .filter(|t| t.scenario() == config.scenario)
        .cloned()
        .collect();
    if let Some(n) = config.max_templates {
        templates.truncate(n);
    }
    if templates.is_empty() {
        return Err(DatasetError::NoTemplates(config.scenario));
    }
    let all_categories: Vec<String> = records
        .iter()
        .filter_map(|r| match &r.annotation {
            Payload::Detection { objects } => Some(objects),
            _ => None,
        })
        .flatten()
        .filter_map(|o| clean_label(&o.label).ok())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let ctx = Ctx {
        config,
        templates: &templates,
        all_categories: &all_categories,
    };
    let per_record: Vec<Result<Vec<ScenarioSample>, String>> = records.par_iter().map(|r| ctx.record(r)).collect();

    let mut out = BuildOutput::default();
    let mut seen = HashSet::new();
    for (r, result) in records.iter().zip(per_record) {
        match result {
            Ok(samples) => {
                for s in samples {
                    if seen.insert((s.image_id.clone(), s.instruction.clone(), s.target.clone())) {
                        out.samples.push(s);
                    } else {
                        out.duplicates += 1;
                    }
                }
            }
            Err(reason) => out.skipped.push(SkippedRecord {
                record_id: r.record_id.clone(),
                reason,
            }),
        }
    }
    if config.balance_large {
        let mut rng = keyed_rng(config.seed, "balance", config.scenario.as_str());
        out.samples = balance_large_objects(out.samples, &mut rng);
    }
    Ok(out)
}

/// Keeps every sample without large objects and at most as many
/// large-object samples as there are small/medium ones, preserving order.
pub fn balance_large_objects<R: Rng + ?Sized>(samples: Vec<ScenarioSample>, rng: &mut R) -> Vec<ScenarioSample> {
    let small_medium = samples
        .iter()
        .filter(|s| matches!(s.size, Some(AreaRange::Small | AreaRange::Medium)))
        .count();
    let large: Vec<usize> = samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.size == Some(AreaRange::Large))
        .map(|(i, _)| i)
        .collect();
    if large.len() <= small_medium {
        return samples;
    }
    let dropped: HashSet<usize> = {
        let keep: HashSet<usize> = index::sample(rng, large.len(), small_medium)
            .into_iter()
            .map(|i| large[i])
            .collect();
        large.into_iter().filter(|i| !keep.contains(i)).collect()
    };
    samples
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !dropped.contains(i))
        .map(|(_, s)| s)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::parse_strict;
    use crate::dataset::{LabeledBox, PhraseBoxes};

    fn pb(x1: f64, y1: f64, x2: f64, y2: f64) -> PixelBox {
        PixelBox::new(x1, y1, x2, y2).unwrap()
    }

    fn rec(id: &str, annotation: Payload) -> SourceRecord {
        SourceRecord {
            image_id: format!("img-{id}"),
            width: 1000,
            height: 500,
            source: "unit".into(),
            record_id: id.into(),
            actual_width: None,
            actual_height: None,
            annotation,
        }
    }

    fn templates(s: Scenario) -> Vec<Template> {
        let texts: &[&str] = match s {
            Scenario::MultiCategoryMulti => &["<image> Detect <category set>.", "Find all of: <category set>"],
            _ => &["Where is <expr> in the image", "<image> Locate <expr>.", "Show me <expr>"],
        };
        texts.iter().map(|t| Template::new(*t, s, "unit").unwrap()).collect()
    }

    fn objects(v: &[(&str, PixelBox)]) -> Payload {
        Payload::Detection {
            objects: v
                .iter()
                .map(|(l, b)| LabeledBox {
                    label: l.to_string(),
                    bbox: *b,
                })
                .collect(),
        }
    }

    #[test]
    fn single_referent_normalizes_by_original_size() {
        let r = rec(
            "a",
            Payload::Referent {
                expr: "  the red   apple ".into(),
                bbox: pb(100.0, 50.0, 300.0, 250.0),
            },
        );
        let cfg = BuildConfig::new(Scenario::SingleReferent, 1);
        let out = build_scenario(&[r], &templates(Scenario::SingleReferent), &cfg).unwrap();
        assert_eq!(out.samples.len(), 1);
        assert_eq!(out.samples[0].target, "the red apple-[0.100,0.100,0.300,0.500]");
        assert!(out.samples[0].instruction.contains("the red apple"));
    }

    #[test]
    fn multi_category_concatenates_all() {
        let r = rec(
            "m",
            objects(&[
                ("person", pb(0.0, 0.0, 10.0, 10.0)),
                ("dog", pb(10.0, 10.0, 500.0, 400.0)),
                ("person", pb(600.0, 0.0, 700.0, 100.0)),
            ]),
        );
        let cfg = BuildConfig::new(Scenario::MultiCategoryMulti, 1);
        let out = build_scenario(&[r], &templates(Scenario::MultiCategoryMulti), &cfg).unwrap();
        let s = &out.samples[0];
        assert_eq!(s.target.matches('&').count(), 2);
        assert!(s.instruction.contains("person, dog"), "{}", s.instruction);
        assert_eq!(parse_strict(&s.target, SequenceOrder::LabelFirst).unwrap().len(), 3);
        assert_eq!(s.size, Some(AreaRange::Large));
    }

    #[test]
    fn category_cap_and_dataset_wide() {
        let r = rec(
            "m",
            objects(&[
                ("a", pb(0.0, 0.0, 10.0, 10.0)),
                ("b", pb(0.0, 0.0, 20.0, 20.0)),
                ("a", pb(5.0, 5.0, 10.0, 10.0)),
                ("c", pb(0.0, 0.0, 30.0, 30.0)),
            ]),
        );
        let other = rec("n", objects(&[("z", pb(0.0, 0.0, 10.0, 10.0))]));
        let tpl = templates(Scenario::MultiCategoryMulti);
        let mut cfg = BuildConfig::new(Scenario::MultiCategoryMulti, 3);
        cfg.max_categories = Some(2);
        let out = build_scenario(std::slice::from_ref(&r), &tpl, &cfg).unwrap();
        let parsed = parse_strict(&out.samples[0].target, SequenceOrder::LabelFirst).unwrap();
        let labels: BTreeSet<&str> = parsed.detections().iter().map(|d| d.label.as_str()).collect();
        assert_eq!(labels.len(), 2);
        let expected: usize = [("a", 2), ("b", 1), ("c", 1)]
            .iter()
            .filter(|(l, _)| labels.contains(l))
            .map(|(_, n)| n)
            .sum();
        assert_eq!(parsed.len(), expected);

        cfg.max_categories = None;
        cfg.category_set = CategorySetMode::DatasetWide;
        let out = build_scenario(&[r, other], &tpl, &cfg).unwrap();
        assert!(out.samples[0].instruction.contains("a, b, c, z"));
        assert_eq!(parse_strict(&out.samples[0].target, SequenceOrder::LabelFirst).unwrap().len(), 4);
    }

    #[test]
    fn one_category_multi_groups() {
        let g = rec(
            "g",
            Payload::Grounding {
                phrases: vec![
                    PhraseBoxes {
                        phrase: "two men".into(),
                        boxes: vec![pb(0.0, 0.0, 10.0, 10.0), pb(20.0, 0.0, 30.0, 10.0)],
                    },
                    PhraseBoxes {
                        phrase: "a ball".into(),
                        boxes: vec![pb(50.0, 50.0, 60.0, 60.0)],
                    },
                ],
            },
        );
        let d = rec(
            "d",
            objects(&[("cup", pb(0.0, 0.0, 5.0, 5.0)), ("cup", pb(9.0, 9.0, 19.0, 19.0))]),
        );
        let cfg = BuildConfig::new(Scenario::OneCategoryMulti, 0);
        let out = build_scenario(&[g, d], &templates(Scenario::OneCategoryMulti), &cfg).unwrap();
        let counts: Vec<usize> = out.samples.iter().map(|s| s.target.matches('&').count() + 1).collect();
        assert_eq!(counts, [2, 1, 2]);
    }

    #[test]
    fn non_existing_targets_none() {
        let r = rec(
            "n",
            Payload::Negative {
                categories: vec!["zebra".into(), "kite".into()],
                positives: vec!["cat".into()],
            },
        );
        let mut cfg = BuildConfig::new(Scenario::NonExisting, 4);
        cfg.lexicon = Some(AttributeLexicon {
            colors: vec!["white".into()],
            ..Default::default()
        });
        cfg.composed_negatives = 1;
        let out = build_scenario(&[r], &templates(Scenario::NonExisting), &cfg).unwrap();
        assert_eq!(out.samples.len(), 3);
        assert!(out.samples.iter().all(|s| s.target == "None"));
        assert!(out.samples[0].instruction.contains("zebra"));
        assert!(out.samples[2].instruction.contains("a white cat"));
    }

    #[test]
    fn skips_and_determinism() {
        let recs = vec![
            rec("1", objects(&[])),
            rec(
                "2",
                Payload::Referent {
                    expr: "salt & pepper".into(),
                    bbox: pb(0.0, 0.0, 1.0, 1.0),
                },
            ),
            rec(
                "3",
                Payload::Referent {
                    expr: "cat".into(),
                    bbox: pb(0.0, 0.0, 1.0, 1.0),
                },
            ),
        ];
        let cfg = BuildConfig::new(Scenario::SingleReferent, 9);
        let tpl = templates(Scenario::SingleReferent);
        let a = build_scenario(&recs, &tpl, &cfg).unwrap();
        assert_eq!(a.samples.len(), 1);
        assert_eq!(a.skipped.len(), 2);
        assert_eq!(a, build_scenario(&recs, &tpl, &cfg).unwrap());
        assert!(build_scenario(&recs, &[], &cfg).is_err());
    }

    #[test]
    fn duplicates_are_removed() {
        let r = rec(
            "x",
            Payload::Referent {
                expr: "cat".into(),
                bbox: pb(0.0, 0.0, 1.0, 1.0),
            },
        );
        let mut r2 = r.clone();
        r2.record_id = "y".into();
        let tpl = vec![Template::new("Find <expr>", Scenario::SingleReferent, "u").unwrap()];
        let out = build_scenario(&[r, r2], &tpl, &BuildConfig::new(Scenario::SingleReferent, 0)).unwrap();
        assert_eq!((out.samples.len(), out.duplicates), (1, 1));
    }

    fn sized(i: usize, size: AreaRange) -> ScenarioSample {
        ScenarioSample {
            image_id: format!("{i}"),
            scenario: Scenario::OneCategoryMulti,
            instruction: String::new(),
            target: String::new(),
            provenance: Provenance {
                source: String::new(),
                record_id: format!("{i}"),
            },
            size: Some(size),
        }
    }

    #[test]
    fn balance_one_to_one() {
        let mut v: Vec<ScenarioSample> = (0..100).map(|i| sized(i, AreaRange::Small)).collect();
        v.extend((100..400).map(|i| sized(i, AreaRange::Large)));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = balance_large_objects(v.clone(), &mut rng);
        assert_eq!(out.len(), 200);
        assert_eq!(out.iter().filter(|s| s.size == Some(AreaRange::Large)).count(), 100);
        let ids: Vec<usize> = out.iter().map(|s| s.image_id.parse().unwrap()).collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        let again = balance_large_objects(v, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out, again);

        let mut few: Vec<ScenarioSample> = (0..100).map(|i| sized(i, AreaRange::Medium)).collect();
        few.extend((100..150).map(|i| sized(i, AreaRange::Large)));
        assert_eq!(balance_large_objects(few, &mut rng).len(), 150);
    }
}
