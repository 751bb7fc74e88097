//! Textual localization sequences.
//!
//! A detection is written as `label-[x1,y1,x2,y2]` (label-first) or
//! `[x1,y1,x2,y2]-label` (coord-first). Coordinates are normalized to the
//! image size and carried with exactly three decimals. Several detections are
//! joined with `&`, and an absent referent is the literal `None`.

mod parse;

use std::fmt::{self, Write as _};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use parse::{
    locate_fields, parse, parse_lenient, parse_strict, LocatedDetection, ParseMode, Parsed,
    SegmentError, SegmentErrorKind,
};

/// Number of quantization steps per unit coordinate.
pub const STEPS_PER_UNIT: u16 = 1000;

/// The literal emitted when a referent does not exist in the image.
pub const NONE_SENTINEL: &str = "None";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodecError {
    #[error("coordinate {0} is outside [0, 1]")]
    OutOfRange(f64),
    #[error("invalid box {0:?}: expected x1 <= x2 and y1 <= y2 within [0, 1000] thousandths")]
    InvalidBox([u16; 4]),
    #[error("invalid label {label:?}: {reason}")]
    InvalidLabel { label: String, reason: &'static str },
    #[error("cannot serialize an empty object list")]
    EmptyObjects,
    #[error(transparent)]
    Parse(#[from] SegmentError),
}

/// Quantizes a normalized coordinate to integer thousandths.
///
/// The rounding is exact with respect to the binary value of `value`: the
/// nearest multiple of 0.001 is returned and exact ties go away from zero.
pub fn quantize_coord(value: f64) -> Result<u16, CodecError> {
    if !(0.0..=1.0).contains(&value) {
        return Err(CodecError::OutOfRange(value));
    }
    if value == 0.0 {
        return Ok(0);
    }
    let bits = value.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    let fraction = bits & ((1u64 << 52) - 1);
    let (mantissa, exponent) = if biased == 0 {
        (fraction, -1074)
    } else {
        (fraction | (1u64 << 52), biased - 1075)
    };
    // value = mantissa / 2^shift with shift >= 52 for every value in (0, 1].
    let shift = (-exponent) as u32;
    if shift > 100 {
        return Ok(0);
    }
    let scaled = 1000u128 * mantissa as u128;
    let half = 1u128 << (shift - 1);
    Ok(((scaled + half) >> shift) as u16)
}

/// Writes thousandths as a decimal with exactly three fractional digits.
pub(crate) fn write_thousandths(out: &mut String, value: u16) {
    let _ = write!(out, "{}.{:03}", value / STEPS_PER_UNIT, value % STEPS_PER_UNIT);
}

/// A normalized box quantized to thousandths of the image width and height.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NormBox {
    x1: u16,
    y1: u16,
    x2: u16,
    y2: u16,
}

impl NormBox {
    pub fn from_thousandths(x1: u16, y1: u16, x2: u16, y2: u16) -> Result<Self, CodecError> {
        let limit = STEPS_PER_UNIT;
        if x1 > x2 || y1 > y2 || x2 > limit || y2 > limit {
            return Err(CodecError::InvalidBox([x1, y1, x2, y2]));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Quantizes each coordinate, then checks the ordering invariant.
    pub fn from_normalized(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, CodecError> {
        Self::from_thousandths(
            quantize_coord(x1)?,
            quantize_coord(y1)?,
            quantize_coord(x2)?,
            quantize_coord(y2)?,
        )
    }

    pub fn thousandths(&self) -> [u16; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn x1(&self) -> f64 {
        f64::from(self.x1) / 1000.0
    }

    pub fn y1(&self) -> f64 {
        f64::from(self.y1) / 1000.0
    }

    pub fn x2(&self) -> f64 {
        f64::from(self.x2) / 1000.0
    }

    pub fn y2(&self) -> f64 {
        f64::from(self.y2) / 1000.0
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1(), self.y1(), self.x2(), self.y2()]
    }

    /// Renders the bracketed block, e.g. `[0.001,0.345,0.111,0.678]`.
    pub fn write_block(&self, out: &mut String) {
        out.push('[');
        for (i, v) in self.thousandths().into_iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write_thousandths(out, v);
        }
        out.push(']');
    }
}

impl fmt::Display for NormBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::with_capacity(25);
        self.write_block(&mut s);
        f.write_str(&s)
    }
}

impl Serialize for NormBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for NormBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [x1, y1, x2, y2] = <[f64; 4]>::deserialize(deserializer)?;
        NormBox::from_normalized(x1, y1, x2, y2).map_err(serde::de::Error::custom)
    }
}

/// One labeled box, optionally carrying a confidence score in (0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    #[serde(rename = "bbox_norm")]
    pub bbox: NormBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl Detection {
    pub fn new(label: impl Into<String>, bbox: NormBox) -> Self {
        Self {
            label: label.into(),
            bbox,
            score: None,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        validate_label(&self.label)
    }
}

/// Labels must be non-empty, free of the `&` and line delimiters, and
/// without surrounding whitespace (the parser trims it).
pub fn validate_label(label: &str) -> Result<(), CodecError> {
    let reason = if label.is_empty() {
        "label is empty"
    } else if label.trim() != label {
        "label has leading or trailing whitespace"
    } else if label.contains('&') {
        "label contains '&'"
    } else if label.contains(['\n', '\r']) {
        "label contains a line break"
    } else {
        return Ok(());
    };
    Err(CodecError::InvalidLabel {
        label: label.to_string(),
        reason,
    })
}

/// The decoded content of one output sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictionSet {
    Objects(Vec<Detection>),
    NoneSentinel,
}

impl PredictionSet {
    pub fn detections(&self) -> &[Detection] {
        match self {
            PredictionSet::Objects(d) => d,
            PredictionSet::NoneSentinel => &[],
        }
    }

    pub fn is_none_sentinel(&self) -> bool {
        matches!(self, PredictionSet::NoneSentinel)
    }

    pub fn len(&self) -> usize {
        self.detections().len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections().is_empty()
    }
}

/// Field order inside a single detection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceOrder {
    /// `label-[x1,y1,x2,y2]`
    #[default]
    LabelFirst,
    /// `[x1,y1,x2,y2]-label`
    CoordFirst,
}

impl fmt::Display for SequenceOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SequenceOrder::LabelFirst => "label_first",
            SequenceOrder::CoordFirst => "coord_first",
        })
    }
}

pub fn serialize(preds: &PredictionSet, order: SequenceOrder) -> Result<String, CodecError> {
    let detections = match preds {
        PredictionSet::NoneSentinel => return Ok(NONE_SENTINEL.to_string()),
        PredictionSet::Objects(d) if d.is_empty() => return Err(CodecError::EmptyObjects),
        PredictionSet::Objects(d) => d,
    };
    let mut out = String::with_capacity(detections.len() * 40);
    for (i, det) in detections.iter().enumerate() {
        det.validate()?;
        if i > 0 {
            out.push('&');
        }
        match order {
            SequenceOrder::LabelFirst => {
                out.push_str(&det.label);
                out.push('-');
                det.bbox.write_block(&mut out);
            }
            SequenceOrder::CoordFirst => {
                det.bbox.write_block(&mut out);
                out.push('-');
                out.push_str(&det.label);
            }
        }
    }
    Ok(out)
}

/// JSON Lines record carrying a raw sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub image_id: String,
    pub sequence: String,
    #[serde(default)]
    pub order: SequenceOrder,
}

/// JSON Lines record carrying decoded detections. An empty list stands for
/// the `None` sentinel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub detections: Vec<Detection>,
}

impl DetectionRecord {
    pub fn from_predictions(image_id: impl Into<String>, preds: PredictionSet) -> Self {
        let detections = match preds {
            PredictionSet::Objects(d) => d,
            PredictionSet::NoneSentinel => Vec::new(),
        };
        Self {
            image_id: image_id.into(),
            detections,
        }
    }

    pub fn to_predictions(&self) -> PredictionSet {
        if self.detections.is_empty() {
            PredictionSet::NoneSentinel
        } else {
            PredictionSet::Objects(self.detections.clone())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nb(x1: u16, y1: u16, x2: u16, y2: u16) -> NormBox {
        NormBox::from_thousandths(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_coord(0.3456).unwrap(), 346);
        assert_eq!(quantize_coord(0.0).unwrap(), 0);
        assert_eq!(quantize_coord(1.0).unwrap(), 1000);
        assert_eq!(quantize_coord(0.0005).unwrap(), 1);
        assert_eq!(quantize_coord(0.0004999).unwrap(), 0);
        assert_eq!(quantize_coord(f64::MIN_POSITIVE).unwrap(), 0);
    }

    #[test]
    fn quantize_rejects_out_of_range() {
        assert!(matches!(quantize_coord(-0.001), Err(CodecError::OutOfRange(_))));
        assert!(matches!(quantize_coord(1.0001), Err(CodecError::OutOfRange(_))));
        assert!(quantize_coord(f64::NAN).is_err());
    }

    #[test]
    fn quantize_matches_float_rounding_away_from_ties() {
        for i in 0..=100_000u32 {
            let v = f64::from(i) / 100_000.0;
            let q = quantize_coord(v).unwrap();
            assert!((f64::from(q) / 1000.0 - v).abs() <= 0.0005 + 1e-15, "{v}");
        }
    }

    #[test]
    fn serialize_single_detection() {
        let p = PredictionSet::Objects(vec![Detection::new("person", nb(1, 345, 111, 678))]);
        assert_eq!(
            serialize(&p, SequenceOrder::LabelFirst).unwrap(),
            "person-[0.001,0.345,0.111,0.678]"
        );
        assert_eq!(
            serialize(&p, SequenceOrder::CoordFirst).unwrap(),
            "[0.001,0.345,0.111,0.678]-person"
        );
    }

    #[test]
    fn serialize_joins_with_ampersand() {
        let p = PredictionSet::Objects(vec![
            Detection::new("cat", nb(100, 200, 300, 400)),
            Detection::new("dog", nb(500, 500, 900, 900)),
        ]);
        assert_eq!(
            serialize(&p, SequenceOrder::LabelFirst).unwrap(),
            "cat-[0.100,0.200,0.300,0.400]&dog-[0.500,0.500,0.900,0.900]"
        );
    }

    #[test]
    fn serialize_sentinel_and_errors() {
        assert_eq!(
            serialize(&PredictionSet::NoneSentinel, SequenceOrder::LabelFirst).unwrap(),
            "None"
        );
        assert_eq!(
            serialize(&PredictionSet::Objects(vec![]), SequenceOrder::LabelFirst),
            Err(CodecError::EmptyObjects)
        );
        let bad = PredictionSet::Objects(vec![Detection::new("salt & pepper", nb(0, 0, 1, 1))]);
        assert!(matches!(
            serialize(&bad, SequenceOrder::LabelFirst),
            Err(CodecError::InvalidLabel { .. })
        ));
        let empty = PredictionSet::Objects(vec![Detection::new("", nb(0, 0, 1, 1))]);
        assert!(serialize(&empty, SequenceOrder::CoordFirst).is_err());
    }

    #[test]
    fn degenerate_boxes_are_allowed() {
        assert!(NormBox::from_thousandths(5, 5, 5, 5).is_ok());
        assert!(NormBox::from_thousandths(6, 5, 5, 5).is_err());
        assert!(NormBox::from_thousandths(0, 0, 1001, 5).is_err());
    }

    #[test]
    fn norm_box_json_shape() {
        let d = Detection::new("cat", nb(100, 200, 300, 400)).with_score(0.5);
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(json, r#"{"label":"cat","bbox_norm":[0.1,0.2,0.3,0.4],"score":0.5}"#);
        let back: Detection = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d);
    }

    mod round_trip {
        use super::*;
        use crate::codec::parse_strict;
        use proptest::prelude::*;

        fn label() -> impl Strategy<Value = String> {
            "[a-z0-9][a-zA-Z0-9 ,.'()\\-]{0,18}[a-z0-9]|[a-z]".prop_map(String::from)
        }

        fn boxed() -> impl Strategy<Value = NormBox> {
            (0u16..=1000, 0u16..=1000, 0u16..=1000, 0u16..=1000).prop_map(|(a, b, c, d)| {
                NormBox::from_thousandths(a.min(c), b.min(d), a.max(c), b.max(d)).unwrap()
            })
        }

        fn predictions() -> impl Strategy<Value = PredictionSet> {
            prop::collection::vec((label(), boxed()), 0..6).prop_map(|v| {
                if v.is_empty() {
                    PredictionSet::NoneSentinel
                } else {
                    PredictionSet::Objects(v.into_iter().map(|(l, b)| Detection::new(l, b)).collect())
                }
            })
        }

        proptest! {
            #[test]
            fn parse_inverts_serialize(p in predictions(), coord_first in any::<bool>()) {
                let order = if coord_first { SequenceOrder::CoordFirst } else { SequenceOrder::LabelFirst };
                let text = serialize(&p, order).unwrap();
                prop_assert_eq!(parse_strict(&text, order).unwrap(), p);
            }

            #[test]
            fn quantized_value_is_nearest_step(v in 0.0f64..=1.0) {
                let q = quantize_coord(v).unwrap();
                prop_assert!((f64::from(q) / 1000.0 - v).abs() <= 0.0005 + 1e-15);
            }
        }
    }

    #[test]
    fn whitespace_edged_labels_are_rejected() {
        let p = PredictionSet::Objects(vec![Detection::new(" cat", nb(0, 0, 1, 1))]);
        assert!(serialize(&p, SequenceOrder::LabelFirst).is_err());
    }
}
