use serde::{Deserialize, Serialize};

use super::{iou, MetricsError, PixelBox};

/// Ground truth and predictions for one phrase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseCase {
    pub gts: Vec<PixelBox>,
    /// (box, score) in output order.
    pub predictions: Vec<(PixelBox, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    /// ANY-BOX: recalled ground-truth instances over all instances.
    pub any_recall: f64,
    /// MERGED-BOXES: phrases whose top prediction hits the merged box.
    pub merged_recall: f64,
    pub instances: usize,
    pub recalled_instances: usize,
    pub phrases: usize,
    pub correct_phrases: usize,
}

/// Smallest box enclosing all of `boxes`.
pub fn enclosing_box(boxes: &[PixelBox]) -> Option<PixelBox> {
    let first = *boxes.first()?;
    Some(boxes[1..].iter().fold(first, |acc, b| PixelBox {
        x1: acc.x1.min(b.x1),
        y1: acc.y1.min(b.y1),
        x2: acc.x2.max(b.x2),
        y2: acc.y2.max(b.y2),
    }))
}

/// ANY-BOX counts an instance as recalled when any prediction for its phrase
/// reaches `threshold` IoU with it. MERGED-BOXES compares the single
/// highest-scoring prediction (earliest on ties) with the box enclosing all
/// of the phrase's ground truth.
pub fn grounding_eval(cases: &[PhraseCase], threshold: f64) -> Result<GroundingReport, MetricsError> {
    if cases.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    let mut instances = 0;
    let mut recalled = 0;
    let mut correct = 0;
    for (i, case) in cases.iter().enumerate() {
        let Some(merged) = enclosing_box(&case.gts) else {
            return Err(MetricsError::EmptyPhrase(format!("#{i}")));
        };
        instances += case.gts.len();
        recalled += case
            .gts
            .iter()
            .filter(|g| case.predictions.iter().any(|(p, _)| iou(p, g) >= threshold))
            .count();

        let mut top: Option<&(PixelBox, f64)> = None;
        for p in &case.predictions {
            if top.is_none_or(|t| p.1 > t.1) {
                top = Some(p);
            }
        }
        if top.is_some_and(|(p, _)| iou(p, &merged) >= threshold) {
            correct += 1;
        }
    }
    Ok(GroundingReport {
        any_recall: recalled as f64 / instances as f64,
        merged_recall: correct as f64 / cases.len() as f64,
        instances,
        recalled_instances: recalled,
        phrases: cases.len(),
        correct_phrases: correct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pb(x1: f64, y1: f64, x2: f64, y2: f64) -> PixelBox {
        PixelBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn two_instances_both_found() {
        let a = pb(0.0, 0.0, 10.0, 10.0);
        let b = pb(90.0, 90.0, 100.0, 100.0);
        let case = PhraseCase {
            gts: vec![a, b],
            predictions: vec![(a, 0.9), (b, 0.8)],
        };
        let r = grounding_eval(&[case], 0.5).unwrap();
        assert_eq!(r.any_recall, 1.0);
        // the top prediction covers 100 of the 10000 px merged box
        assert_eq!(r.merged_recall, 0.0);
    }

    #[test]
    fn one_of_two_instances() {
        let a = pb(0.0, 0.0, 10.0, 10.0);
        let b = pb(20.0, 0.0, 30.0, 10.0);
        let case = PhraseCase {
            gts: vec![a, b],
            predictions: vec![(a, 0.9)],
        };
        assert_eq!(grounding_eval(&[case], 0.5).unwrap().any_recall, 0.5);
    }

    #[test]
    fn single_box_merge_is_identity() {
        let a = pb(5.0, 5.0, 15.0, 25.0);
        assert_eq!(enclosing_box(&[a]), Some(a));
        let case = PhraseCase {
            gts: vec![a],
            predictions: vec![(pb(0.0, 0.0, 1.0, 1.0), 0.2), (a, 0.7)],
        };
        let r = grounding_eval(&[case], 0.5).unwrap();
        assert_eq!(r.merged_recall, 1.0);
        assert_eq!(r.any_recall, 1.0);
    }

    #[test]
    fn no_predictions_is_a_miss() {
        let case = PhraseCase {
            gts: vec![pb(0.0, 0.0, 1.0, 1.0)],
            predictions: vec![],
        };
        let r = grounding_eval(&[case], 0.5).unwrap();
        assert_eq!((r.any_recall, r.merged_recall), (0.0, 0.0));
        assert!(grounding_eval(&[], 0.5).is_err());
        let empty = PhraseCase {
            gts: vec![],
            predictions: vec![],
        };
        assert!(grounding_eval(&[empty], 0.5).is_err());
    }

    #[test]
    fn merged_box_covering_prediction() {
        let a = pb(0.0, 0.0, 10.0, 10.0);
        let b = pb(10.0, 0.0, 20.0, 10.0);
        let case = PhraseCase {
            gts: vec![a, b],
            predictions: vec![(pb(0.0, 0.0, 20.0, 10.0), 0.9)],
        };
        let r = grounding_eval(&[case], 0.5).unwrap();
        assert_eq!(r.merged_recall, 1.0);
        // the wide box has IoU 0.5 with each instance
        assert_eq!(r.any_recall, 1.0);
    }
}
