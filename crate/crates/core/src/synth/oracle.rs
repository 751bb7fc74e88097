//! Brute-force reference for detection AP on tiny instances.
//!
//! Shares nothing with the main evaluator beyond the input types: IoU,
//! greedy matching and interpolation are spelled out again here, and the
//! interpolated precision at each recall point is a plain maximum over every
//! operating point instead of a monotone envelope lookup.

use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

use crate::metrics::{GroundTruthImage, ImagePredictions};

pub const ORACLE_MAX_PREDICTIONS: usize = 15;
pub const ORACLE_MAX_GT: usize = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("oracle takes at most {max} {what}, got {got}")]
    TooLarge { what: &'static str, got: usize, max: usize },
    #[error("prediction references unknown image {0}")]
    UnknownImage(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub ar100: f64,
}

const THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
const RANGES: [(f64, f64); 4] = [
    (0.0, f64::INFINITY),
    (0.0, 1024.0),
    (1024.0, 9216.0),
    (9216.0, f64::INFINITY),
];

fn overlap(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = a[2].min(b[2]) - a[0].max(b[0]);
    let h = a[3].min(b[3]) - a[1].max(b[1]);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn area_of(b: [f64; 4]) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

#[derive(Clone, Copy, PartialEq)]
enum Outcome {
    Hit,
    Miss,
    Skip,
}

/// Returns (AP, recall) or None when no ground truth falls in the range.
fn single(
    preds: &[ImagePredictions],
    gts: &[GroundTruthImage],
    cat: &str,
    range: (f64, f64),
    t: f64,
) -> Option<(f64, f64)> {
    let inside = |a: f64| a >= range.0 && a < range.1;
    let mut positives = 0usize;
    let mut records: Vec<(f64, Outcome)> = Vec::new();
    for gt in gts {
        // (box, ignored)
        let truth: Vec<([f64; 4], bool)> = gt
            .annotations
            .iter()
            .filter(|a| a.label == cat)
            .map(|a| {
                let b = [a.bbox.x1, a.bbox.y1, a.bbox.x2, a.bbox.y2];
                (b, !inside(a.effective_area()))
            })
            .collect();
        positives += truth.iter().filter(|g| !g.1).count();

        let mut dets: Vec<([f64; 4], f64, String)> = Vec::new();
        for p in preds.iter().filter(|p| p.image_id == gt.image_id) {
            for d in &p.detections {
                if gts.iter().any(|g| g.annotations.iter().any(|a| a.label == d.label)) {
                    dets.push(([d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2], d.score, d.label.clone()));
                }
            }
        }
        dets.sort_by(|a, b| b.1.total_cmp(&a.1));
        dets.truncate(100);

        let mut taken = vec![false; truth.len()];
        for (b, score, label) in dets {
            if label != cat {
                continue;
            }
            let mut pick: Option<usize> = None;
            for pass_ignored in [false, true] {
                let mut best = t;
                for (j, g) in truth.iter().enumerate() {
                    if taken[j] || g.1 != pass_ignored {
                        continue;
                    }
                    let v = overlap(b, g.0);
                    if v >= best && (pick.is_none() || v > best) {
                        best = v;
                        pick = Some(j);
                    }
                }
                if pick.is_some() {
                    break;
                }
            }
            let outcome = match pick {
                Some(j) => {
                    taken[j] = true;
                    if truth[j].1 {
                        Outcome::Skip
                    } else {
                        Outcome::Hit
                    }
                }
                None if !inside(area_of(b)) => Outcome::Skip,
                None => Outcome::Miss,
            };
            records.push((score, outcome));
        }
    }
    if positives == 0 {
        return None;
    }
    records.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut hits, mut misses) = (0usize, 0usize);
    for (_, o) in &records {
        match o {
            Outcome::Hit => hits += 1,
            Outcome::Miss => misses += 1,
            Outcome::Skip => continue,
        }
        points.push((hits as f64 / positives as f64, hits as f64 / (hits + misses) as f64));
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let mut best = 0.0f64;
        for &(rec, prec) in &points {
            if rec >= level && prec > best {
                best = prec;
            }
        }
        total += best;
    }
    Some((total / 101.0, hits as f64 / positives as f64))
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Exhaustive AP/AR over at most 15 predictions and 10 ground-truth boxes.
pub fn brute_force_ap(
    preds: &[ImagePredictions],
    gts: &[GroundTruthImage],
) -> Result<OracleReport, OracleError> {
    let n_pred: usize = preds.iter().map(|p| p.detections.len()).sum();
    let n_gt: usize = gts.iter().map(|g| g.annotations.len()).sum();
    if n_pred > ORACLE_MAX_PREDICTIONS {
        return Err(OracleError::TooLarge {
            what: "predictions",
            got: n_pred,
            max: ORACLE_MAX_PREDICTIONS,
        });
    }
    if n_gt > ORACLE_MAX_GT {
        return Err(OracleError::TooLarge {
            what: "ground-truth boxes",
            got: n_gt,
            max: ORACLE_MAX_GT,
        });
    }
    for p in preds {
        if !gts.iter().any(|g| g.image_id == p.image_id) {
            return Err(OracleError::UnknownImage(p.image_id.clone()));
        }
    }
    let cats: BTreeSet<&str> = gts
        .iter()
        .flat_map(|g| g.annotations.iter().map(|a| a.label.as_str()))
        .collect();

    // (range index, threshold index) -> per-category values
    let mut ap: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
    let mut rec: Vec<Vec<f64>> = vec![Vec::new(); THRESHOLDS.len()];
    for (ri, range) in RANGES.iter().enumerate() {
        for (ti, t) in THRESHOLDS.iter().enumerate() {
            for cat in &cats {
                if let Some((a, r)) = single(preds, gts, cat, *range, *t) {
                    ap.entry((ri, ti)).or_default().push(a);
                    if ri == 0 {
                        rec[ti].push(r);
                    }
                }
            }
        }
    }
    let avg_over_t = |ri: usize| -> Option<f64> {
        let per_t: Vec<f64> = (0..THRESHOLDS.len())
            .filter_map(|ti| ap.get(&(ri, ti)).and_then(|v| mean(v)))
            .collect();
        if per_t.len() < THRESHOLDS.len() {
            None
        } else {
            mean(&per_t)
        }
    };
    let at = |ti: usize| ap.get(&(0, ti)).and_then(|v| mean(v)).unwrap_or(0.0);
    let ar: Vec<f64> = rec.iter().filter_map(|v| mean(v)).collect();
    Ok(OracleReport {
        map: avg_over_t(0).unwrap_or(0.0),
        ap50: at(0),
        ap75: at(5),
        ap_small: avg_over_t(1),
        ap_medium: avg_over_t(2),
        ap_large: avg_over_t(3),
        ar100: mean(&ar).unwrap_or(0.0),
    })
}
