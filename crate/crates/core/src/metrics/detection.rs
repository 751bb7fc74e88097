//! COCO-protocol detection metrics.
//!
//! Per category and IoU threshold, detections are visited in descending
//! score order and greedily matched to the unmatched ground truth of the same
//! category with the highest IoU at or above the threshold. Average precision
//! is the mean of the interpolated precision at 101 recall points.
//!
//! Area-restricted metrics follow the COCO ignore rules: ground truth outside
//! the area range is ignored, a detection matched to ignored ground truth is
//! ignored, and an unmatched detection whose own area is outside the range is
//! ignored.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{index_ground_truth, iou, GroundTruthImage, ImagePredictions, MetricsError, PixelBox};

pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];
pub const RECALL_POINTS: usize = 101;
/// Per-image detection cap, applied after sorting by score.
pub const MAX_DETECTIONS: usize = 100;
pub const SMALL_AREA_MAX: f64 = 32.0 * 32.0;
pub const LARGE_AREA_MIN: f64 = 96.0 * 96.0;

const AP50: usize = 0;
const AP75: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    pub const ALL: [AreaRange; 4] = [Self::All, Self::Small, Self::Medium, Self::Large];

    pub fn contains(self, area: f64) -> bool {
        match self {
            Self::All => true,
            Self::Small => area < SMALL_AREA_MAX,
            Self::Medium => (SMALL_AREA_MAX..LARGE_AREA_MIN).contains(&area),
            Self::Large => area >= LARGE_AREA_MIN,
        }
    }
}

/// Small, medium or large bucket for an area in square pixels.
pub fn area_bucket(area: f64) -> AreaRange {
    if area < SMALL_AREA_MAX {
        AreaRange::Small
    } else if area < LARGE_AREA_MIN {
        AreaRange::Medium
    } else {
        AreaRange::Large
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar100: f64,
    pub gt_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `None` when no ground truth falls in the bucket.
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub ar100: f64,
    pub per_category: BTreeMap<String, CategoryMetrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    TruePositive,
    FalsePositive,
    Ignored,
}

/// One detection's outcome at every IoU threshold.
struct Scored {
    score: f64,
    outcomes: [Outcome; IOU_THRESHOLDS.len()],
}

/// Matching result for one (image, category, area range).
struct CellEval {
    scored: Vec<Scored>,
    relevant_gt: usize,
}

pub fn detection_eval(
    preds: &[ImagePredictions],
    gts: &[GroundTruthImage],
) -> Result<DetectionMetrics, MetricsError> {
    let index = index_ground_truth(gts)?;
    let categories: BTreeSet<&str> = gts
        .iter()
        .flat_map(|g| g.annotations.iter().map(|a| a.label.as_str()))
        .collect();
    if categories.is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let cat_index: BTreeMap<&str, usize> =
        categories.iter().enumerate().map(|(i, &c)| (c, i)).collect();

    // (category, box, score) per image, in input order
    let mut per_image: Vec<Vec<(usize, PixelBox, f64)>> = vec![Vec::new(); gts.len()];
    let mut diagnostics = Vec::new();
    for p in preds {
        let &img = index
            .get(p.image_id.as_str())
            .ok_or_else(|| MetricsError::UnknownImage(p.image_id.clone()))?;
        for d in &p.detections {
            if !d.score.is_finite() {
                return Err(MetricsError::InvalidScore(d.score));
            }
            match cat_index.get(d.label.as_str()) {
                Some(&k) => per_image[img].push((k, d.bbox, d.score)),
                None => diagnostics.push(format!(
                    "image {}: category {:?} is not in the ground truth, ignored",
                    p.image_id, d.label
                )),
            }
        }
    }

    let num_cats = categories.len();
    let per_image_cells: Vec<Vec<CellEval>> = per_image
        .into_par_iter()
        .zip(gts.par_iter())
        .map(|(mut dets, gt)| {
            dets.sort_by(|a, b| b.2.total_cmp(&a.2));
            dets.truncate(MAX_DETECTIONS);
            evaluate_image(&dets, gt, &cat_index, num_cats)
        })
        .collect();

    // ap[area][cat][t], recall[area][cat][t]; None when the cell has no relevant GT
    let mut ap = vec![vec![None; num_cats]; AreaRange::ALL.len()];
    let mut recall = ap.clone();
    for (a, _) in AreaRange::ALL.iter().enumerate() {
        for k in 0..num_cats {
            let cells = per_image_cells.iter().map(|cells| &cells[a * num_cats + k]);
            if let Some((ap_t, rc_t)) = accumulate(cells) {
                ap[a][k] = Some(ap_t);
                recall[a][k] = Some(rc_t);
            }
        }
    }

    let mean = |values: Vec<f64>| -> Option<f64> {
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    };
    let area_mean = |a: usize| mean(ap[a].iter().flatten().flat_map(|t| t.iter().copied()).collect());
    let at_threshold = |t: usize| mean(ap[0].iter().flatten().map(|v| v[t]).collect());
    let all = AreaRange::ALL.iter().position(|&r| r == AreaRange::All).unwrap_or(0);
    let gt_counts = gts.iter().flat_map(|g| &g.annotations).fold(
        vec![0usize; num_cats],
        |mut acc, ann| {
            acc[cat_index[ann.label.as_str()]] += 1;
            acc
        },
    );

    let per_category = categories
        .iter()
        .enumerate()
        .filter_map(|(k, &name)| {
            let ap_t = ap[all][k].as_ref()?;
            let rc_t = recall[all][k].as_ref()?;
            Some((
                name.to_string(),
                CategoryMetrics {
                    ap: ap_t.iter().sum::<f64>() / ap_t.len() as f64,
                    ap50: ap_t[AP50],
                    ap75: ap_t[AP75],
                    ar100: rc_t.iter().sum::<f64>() / rc_t.len() as f64,
                    gt_count: gt_counts[k],
                },
            ))
        })
        .collect();

    Ok(DetectionMetrics {
        map: area_mean(all).unwrap_or(0.0),
        ap50: at_threshold(AP50).unwrap_or(0.0),
        ap75: at_threshold(AP75).unwrap_or(0.0),
        ap_small: area_mean(1),
        ap_medium: area_mean(2),
        ap_large: area_mean(3),
        ar100: mean(
            recall[all]
                .iter()
                .flatten()
                .flat_map(|t| t.iter().copied())
                .collect(),
        )
        .unwrap_or(0.0),
        per_category,
        diagnostics,
    })
}

/// Matches one image's detections (sorted, capped) for every area range and
/// category. Cells are laid out `area * num_cats + category`.
fn evaluate_image(
    dets: &[(usize, PixelBox, f64)],
    gt: &GroundTruthImage,
    cat_index: &BTreeMap<&str, usize>,
    num_cats: usize,
) -> Vec<CellEval> {
    let mut cells = Vec::with_capacity(AreaRange::ALL.len() * num_cats);
    for range in AreaRange::ALL {
        for k in 0..num_cats {
            let gt_boxes: Vec<(PixelBox, bool)> = gt
                .annotations
                .iter()
                .filter(|a| cat_index[a.label.as_str()] == k)
                .map(|a| (a.bbox, !range.contains(a.effective_area())))
                .collect();
            let cat_dets: Vec<&(usize, PixelBox, f64)> = dets.iter().filter(|d| d.0 == k).collect();
            cells.push(match_cell(&cat_dets, &gt_boxes, range));
        }
    }
    cells
}

fn match_cell(dets: &[&(usize, PixelBox, f64)], gts: &[(PixelBox, bool)], range: AreaRange) -> CellEval {
    let relevant_gt = gts.iter().filter(|g| !g.1).count();
    let ious: Vec<Vec<f64>> = dets
        .iter()
        .map(|d| gts.iter().map(|g| iou(&d.1, &g.0)).collect())
        .collect();
    let mut scored: Vec<Scored> = dets
        .iter()
        .map(|d| Scored {
            score: d.2,
            outcomes: [Outcome::FalsePositive; IOU_THRESHOLDS.len()],
        })
        .collect();
    for (t, &threshold) in IOU_THRESHOLDS.iter().enumerate() {
        let mut taken = vec![false; gts.len()];
        for (d, det) in dets.iter().enumerate() {
            // Prefer relevant ground truth; fall back to ignored ground truth.
            let best = [false, true].into_iter().find_map(|ignored| {
                let mut best: Option<(usize, f64)> = None;
                for (g, gt) in gts.iter().enumerate() {
                    if gt.1 != ignored || taken[g] || ious[d][g] < threshold {
                        continue;
                    }
                    if best.is_none_or(|(_, v)| ious[d][g] > v) {
                        best = Some((g, ious[d][g]));
                    }
                }
                best
            });
            scored[d].outcomes[t] = match best {
                Some((g, _)) => {
                    taken[g] = true;
                    if gts[g].1 {
                        Outcome::Ignored
                    } else {
                        Outcome::TruePositive
                    }
                }
                None if !range.contains(det.1.area()) => Outcome::Ignored,
                None => Outcome::FalsePositive,
            };
        }
    }
    CellEval { scored, relevant_gt }
}

/// Pools one (category, area) cell over images and returns per-threshold AP
/// and final recall, or `None` when there is no relevant ground truth.
#[allow(clippy::type_complexity)]
fn accumulate<'a>(
    cells: impl Iterator<Item = &'a CellEval>,
) -> Option<([f64; IOU_THRESHOLDS.len()], [f64; IOU_THRESHOLDS.len()])> {
    let mut pooled: Vec<&Scored> = Vec::new();
    let mut relevant = 0usize;
    for cell in cells {
        relevant += cell.relevant_gt;
        pooled.extend(cell.scored.iter());
    }
    if relevant == 0 {
        return None;
    }
    // stable: equal scores keep image order, then within-image order
    pooled.sort_by(|a, b| b.score.total_cmp(&a.score));

    let mut ap = [0.0; IOU_THRESHOLDS.len()];
    let mut rc = [0.0; IOU_THRESHOLDS.len()];
    for t in 0..IOU_THRESHOLDS.len() {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut precision = Vec::with_capacity(pooled.len());
        let mut recall = Vec::with_capacity(pooled.len());
        for s in &pooled {
            match s.outcomes[t] {
                Outcome::TruePositive => tp += 1,
                Outcome::FalsePositive => fp += 1,
                Outcome::Ignored => continue,
            }
            precision.push(tp as f64 / (tp + fp) as f64);
            recall.push(tp as f64 / relevant as f64);
        }
        // precision envelope: best precision at this or any later point
        for i in (1..precision.len()).rev() {
            if precision[i] > precision[i - 1] {
                precision[i - 1] = precision[i];
            }
        }
        let mut sum = 0.0;
        for r in 0..RECALL_POINTS {
            let target = r as f64 / (RECALL_POINTS - 1) as f64;
            let idx = recall.partition_point(|&v| v < target);
            if idx < precision.len() {
                sum += precision[idx];
            }
        }
        ap[t] = sum / RECALL_POINTS as f64;
        rc[t] = recall.last().copied().unwrap_or(0.0);
    }
    Some((ap, rc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{GtAnnotation, ScoredBox};

    fn pb(x1: f64, y1: f64, x2: f64, y2: f64) -> PixelBox {
        PixelBox::new(x1, y1, x2, y2).unwrap()
    }

    fn gt(id: &str, anns: &[(&str, PixelBox)]) -> GroundTruthImage {
        GroundTruthImage {
            image_id: id.into(),
            width: 640,
            height: 480,
            annotations: anns
                .iter()
                .map(|(l, b)| GtAnnotation {
                    label: l.to_string(),
                    bbox: *b,
                    area: None,
                })
                .collect(),
            phrases: vec![],
        }
    }

    fn pred(id: &str, dets: &[(&str, PixelBox, f64)]) -> ImagePredictions {
        ImagePredictions {
            image_id: id.into(),
            detections: dets
                .iter()
                .map(|(l, b, s)| ScoredBox {
                    label: l.to_string(),
                    bbox: *b,
                    score: *s,
                })
                .collect(),
        }
    }

    #[test]
    fn area_buckets() {
        assert_eq!(area_bucket(400.0), AreaRange::Small);
        assert_eq!(area_bucket(1023.9), AreaRange::Small);
        assert_eq!(area_bucket(1024.0), AreaRange::Medium);
        assert_eq!(area_bucket(9215.0), AreaRange::Medium);
        assert_eq!(area_bucket(9216.0), AreaRange::Large);
    }

    #[test]
    fn single_perfect_match() {
        let b = pb(10.0, 10.0, 50.0, 50.0);
        let m = detection_eval(&[pred("a", &[("cat", b, 0.9)])], &[gt("a", &[("cat", b)])]).unwrap();
        assert_eq!(m.map, 1.0);
        assert_eq!(m.ap50, 1.0);
        assert_eq!(m.ap75, 1.0);
        assert_eq!(m.ar100, 1.0);
        assert_eq!(m.ap_medium, Some(1.0));
        assert_eq!(m.ap_small, None);
        assert_eq!(m.ap_large, None);
    }

    #[test]
    fn false_positive_after_saturation() {
        let b = pb(10.0, 10.0, 50.0, 50.0);
        let far = pb(200.0, 200.0, 240.0, 240.0);
        let m = detection_eval(
            &[pred("a", &[("cat", b, 0.9), ("cat", far, 0.8)])],
            &[gt("a", &[("cat", b)])],
        )
        .unwrap();
        assert_eq!(m.ap50, 1.0);
        assert_eq!(m.map, 1.0);
    }

    #[test]
    fn false_positive_first_halves_nothing_but_precision() {
        // FP ranked first: precision at recall 1 is 1/2 for all thresholds
        let b = pb(10.0, 10.0, 50.0, 50.0);
        let far = pb(200.0, 200.0, 240.0, 240.0);
        let m = detection_eval(
            &[pred("a", &[("cat", b, 0.8), ("cat", far, 0.9)])],
            &[gt("a", &[("cat", b)])],
        )
        .unwrap();
        assert!((m.ap50 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn low_iou_is_miss_everywhere() {
        // [0,0,45,100] vs [0,0,100,100] -> IoU 0.45
        let m = detection_eval(
            &[pred("a", &[("cat", pb(0.0, 0.0, 45.0, 100.0), 0.9)])],
            &[gt("a", &[("cat", pb(0.0, 0.0, 100.0, 100.0))])],
        )
        .unwrap();
        assert_eq!(m.map, 0.0);
        assert_eq!(m.ar100, 0.0);
    }

    #[test]
    fn unknown_inputs() {
        let b = pb(10.0, 10.0, 50.0, 50.0);
        let gts = [gt("a", &[("cat", b)]), gt("b", &[("dog", b)])];
        assert_eq!(
            detection_eval(&[pred("zz", &[])], &gts),
            Err(MetricsError::UnknownImage("zz".into()))
        );
        // unknown category: diagnostic only
        let m = detection_eval(&[pred("a", &[("cat", b, 0.9), ("zebra", b, 0.95)])], &gts).unwrap();
        assert_eq!(m.diagnostics.len(), 1);
        assert_eq!(m.per_category["cat"].ap, 1.0);
        // known category absent from the image: false positive
        let m = detection_eval(&[pred("a", &[("cat", b, 0.9), ("dog", b, 0.95)])], &gts).unwrap();
        assert_eq!(m.per_category["dog"].ap, 0.0);
        assert!(m.diagnostics.is_empty());
    }

    #[test]
    fn empty_ground_truth_is_an_error() {
        assert_eq!(detection_eval(&[], &[gt("a", &[])]), Err(MetricsError::EmptyGroundTruth));
    }

    #[test]
    fn ignored_area_matches_do_not_count() {
        // small GT + large GT; a detection on the small one is ignored for
        // AP_L, an unmatched small detection is ignored for AP_L as well
        let small = pb(0.0, 0.0, 20.0, 20.0);
        let large = pb(100.0, 100.0, 300.0, 300.0);
        let stray = pb(400.0, 400.0, 410.0, 410.0);
        let m = detection_eval(
            &[pred("a", &[("cat", small, 0.9), ("cat", stray, 0.8), ("cat", large, 0.7)])],
            &[gt("a", &[("cat", small), ("cat", large)])],
        )
        .unwrap();
        assert_eq!(m.ap_large, Some(1.0));
        assert_eq!(m.ap_small, Some(1.0));
        // all areas: TP, FP, TP -> precision envelope 1 up to 0.5, 2/3 after
        let expected = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
        assert!((m.map - expected).abs() < 1e-12);
    }

    #[test]
    fn detection_cap_is_per_image() {
        let b = pb(10.0, 10.0, 50.0, 50.0);
        let mut dets: Vec<(&str, PixelBox, f64)> =
            (0..100).map(|i| ("cat", pb(300.0, 300.0, 310.0 + i as f64, 310.0), 0.9)).collect();
        dets.push(("cat", b, 0.1));
        let m = detection_eval(&[pred("a", &dets)], &[gt("a", &[("cat", b)])]).unwrap();
        assert_eq!(m.ar100, 0.0);
    }
}
