//! Evaluation protocols: IoU, REC accuracy, COCO-style detection metrics and
//! the ANY-BOX / MERGED-BOXES phrase grounding recalls.
//!
//! Geometry is continuous: a box `[x1, y1, x2, y2]` has area
//! `(x2 - x1) * (y2 - y1)` with no +1 pixel convention.

mod detection;
mod grounding;
mod report;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Detection, DetectionRecord, NormBox, PredictionSet};

pub use detection::{
    area_bucket, detection_eval, AreaRange, CategoryMetrics, DetectionMetrics, IOU_THRESHOLDS,
    LARGE_AREA_MIN, MAX_DETECTIONS, RECALL_POINTS, SMALL_AREA_MAX,
};
pub use grounding::{enclosing_box, grounding_eval, PhraseCase, GroundingReport};
pub use report::{EvalReport, RecReport};

/// Detections with no score are evaluated with this confidence.
pub const DEFAULT_SCORE: f64 = 0.99;

/// IoU needed for a REC or grounding hit.
pub const HIT_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("invalid box {0:?}")]
    InvalidBox([f64; 4]),
    #[error("image {image_id}: {reason}")]
    InvalidImage { image_id: String, reason: String },
    #[error("duplicate ground-truth image {0}")]
    DuplicateImage(String),
    #[error("prediction references unknown image {0}")]
    UnknownImage(String),
    #[error("no ground-truth annotations to evaluate")]
    EmptyGroundTruth,
    #[error("no samples to evaluate")]
    EmptySamples,
    #[error("invalid score {0}")]
    InvalidScore(f64),
    #[error("phrase {0:?} has no ground-truth boxes")]
    EmptyPhrase(String),
}

/// An axis-aligned box in absolute pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct PixelBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl PixelBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, MetricsError> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x1 > x2 || y1 > y2 {
            return Err(MetricsError::InvalidBox([x1, y1, x2, y2]));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    pub fn clamped(&self, width: f64, height: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }
}

impl TryFrom<[f64; 4]> for PixelBox {
    type Error = MetricsError;

    fn try_from([x1, y1, x2, y2]: [f64; 4]) -> Result<Self, Self::Error> {
        Self::new(x1, y1, x2, y2)
    }
}

impl From<PixelBox> for [f64; 4] {
    fn from(b: PixelBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// Scales a normalized box to pixels and clamps it to the image.
pub fn denormalize(b: &NormBox, width: u32, height: u32) -> PixelBox {
    let (w, h) = (f64::from(width), f64::from(height));
    let [x1, y1, x2, y2] = b.thousandths().map(f64::from);
    PixelBox {
        x1: x1 * w / 1000.0,
        y1: y1 * h / 1000.0,
        x2: x2 * w / 1000.0,
        y2: y2 * h / 1000.0,
    }
    .clamped(w, h)
}

pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtAnnotation {
    pub label: String,
    pub bbox: PixelBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
}

impl GtAnnotation {
    /// The annotation area when given, else the box area.
    pub fn effective_area(&self) -> f64 {
        self.area.unwrap_or_else(|| self.bbox.area())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseGroup {
    pub phrase: String,
    pub boxes: Vec<PixelBox>,
}

/// One line of the ground-truth JSON Lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthImage {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub annotations: Vec<GtAnnotation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub phrases: Vec<PhraseGroup>,
}

impl GroundTruthImage {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let bad = |reason: String| MetricsError::InvalidImage {
            image_id: self.image_id.clone(),
            reason,
        };
        if self.width == 0 || self.height == 0 {
            return Err(bad(format!("size {}x{}", self.width, self.height)));
        }
        for (i, a) in self.annotations.iter().enumerate() {
            let area = a.effective_area();
            if area.is_nan() || area <= 0.0 {
                return Err(bad(format!("annotation {i} has area {area}")));
            }
        }
        Ok(())
    }
}

/// A detection in pixel space with a resolved score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub label: String,
    pub bbox: PixelBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePredictions {
    pub image_id: String,
    pub detections: Vec<ScoredBox>,
}

impl ImagePredictions {
    /// Denormalizes a decoded prediction set against an image size;
    /// unscored detections take `default_score`.
    pub fn from_predictions(
        image_id: impl Into<String>,
        preds: &PredictionSet,
        width: u32,
        height: u32,
        default_score: f64,
    ) -> Self {
        let detections = preds
            .detections()
            .iter()
            .map(|d| ScoredBox {
                label: d.label.clone(),
                bbox: denormalize(&d.bbox, width, height),
                score: d.score.unwrap_or(default_score),
            })
            .collect();
        Self {
            image_id: image_id.into(),
            detections,
        }
    }
}

/// The highest-scoring detection; ties resolve to the earliest.
pub fn top_detection(preds: &PredictionSet, default_score: f64) -> Option<&Detection> {
    let mut best: Option<&Detection> = None;
    for d in preds.detections() {
        let s = d.score.unwrap_or(default_score);
        if best.is_none_or(|b| s > b.score.unwrap_or(default_score)) {
            best = Some(d);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecSample {
    /// The top prediction, or `None` when the model answered `None` or
    /// produced nothing.
    pub prediction: Option<PixelBox>,
    pub gt: PixelBox,
}

/// Fraction of samples whose prediction reaches `threshold` IoU (inclusive).
pub fn rec_accuracy(samples: &[RecSample], threshold: f64) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    let hits = samples
        .iter()
        .filter(|s| s.prediction.is_some_and(|p| iou(&p, &s.gt) >= threshold))
        .count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Ground truth indexed by image id, rejecting duplicates and invalid images.
pub fn index_ground_truth(
    gts: &[GroundTruthImage],
) -> Result<HashMap<&str, usize>, MetricsError> {
    let mut index = HashMap::with_capacity(gts.len());
    for (i, g) in gts.iter().enumerate() {
        g.validate()?;
        if index.insert(g.image_id.as_str(), i).is_some() {
            return Err(MetricsError::DuplicateImage(g.image_id.clone()));
        }
    }
    Ok(index)
}

/// Pairs decoded predictions with ground truth for detection evaluation.
pub fn detection_inputs(
    records: &[DetectionRecord],
    gts: &[GroundTruthImage],
    default_score: f64,
) -> Result<Vec<ImagePredictions>, MetricsError> {
    let index = index_ground_truth(gts)?;
    records
        .iter()
        .map(|r| {
            let &i = index
                .get(r.image_id.as_str())
                .ok_or_else(|| MetricsError::UnknownImage(r.image_id.clone()))?;
            let g = &gts[i];
            Ok(ImagePredictions::from_predictions(
                &r.image_id,
                &r.to_predictions(),
                g.width,
                g.height,
                default_score,
            ))
        })
        .collect()
}

/// Builds REC samples. Every ground-truth line must hold exactly one
/// annotation; images without a prediction count as misses.
pub fn rec_samples(
    records: &[DetectionRecord],
    gts: &[GroundTruthImage],
    default_score: f64,
) -> Result<Vec<RecSample>, MetricsError> {
    let index = index_ground_truth(gts)?;
    let mut predicted: Vec<Option<PixelBox>> = vec![None; gts.len()];
    for r in records {
        let &i = index
            .get(r.image_id.as_str())
            .ok_or_else(|| MetricsError::UnknownImage(r.image_id.clone()))?;
        let preds = r.to_predictions();
        predicted[i] = top_detection(&preds, default_score)
            .map(|d| denormalize(&d.bbox, gts[i].width, gts[i].height));
    }
    gts.iter()
        .zip(predicted)
        .map(|(g, prediction)| match g.annotations.as_slice() {
            [only] => Ok(RecSample {
                prediction,
                gt: only.bbox,
            }),
            other => Err(MetricsError::InvalidImage {
                image_id: g.image_id.clone(),
                reason: format!("REC needs exactly one annotation, found {}", other.len()),
            }),
        })
        .collect()
}

/// Builds one grounding case per ground-truth phrase. A prediction belongs
/// to a phrase when its label equals the phrase text.
pub fn grounding_cases(
    records: &[DetectionRecord],
    gts: &[GroundTruthImage],
    default_score: f64,
) -> Result<(Vec<PhraseCase>, Vec<String>), MetricsError> {
    let index = index_ground_truth(gts)?;
    let mut by_image: Vec<Vec<&Detection>> = vec![Vec::new(); gts.len()];
    for r in records {
        let &i = index
            .get(r.image_id.as_str())
            .ok_or_else(|| MetricsError::UnknownImage(r.image_id.clone()))?;
        by_image[i].extend(r.detections.iter());
    }
    let mut cases = Vec::new();
    let mut diagnostics = Vec::new();
    for (g, dets) in gts.iter().zip(by_image) {
        for d in &dets {
            if !g.phrases.iter().any(|p| p.phrase == d.label) {
                diagnostics.push(format!(
                    "image {}: prediction label {:?} matches no phrase",
                    g.image_id, d.label
                ));
            }
        }
        for p in &g.phrases {
            if p.boxes.is_empty() {
                return Err(MetricsError::EmptyPhrase(p.phrase.clone()));
            }
            let predictions = dets
                .iter()
                .filter(|d| d.label == p.phrase)
                .map(|d| {
                    (
                        denormalize(&d.bbox, g.width, g.height),
                        d.score.unwrap_or(default_score),
                    )
                })
                .collect();
            cases.push(PhraseCase {
                gts: p.boxes.clone(),
                predictions,
            });
        }
    }
    Ok((cases, diagnostics))
}
