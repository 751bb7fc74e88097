//! Reformatting of source annotations into localization instruction samples
//! across four prompting scenarios.

mod build;
mod negatives;
mod template;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::{AreaRange, PixelBox};

pub use build::{
    balance_large_objects, build_scenario, BuildConfig, BuildOutput, CategorySetMode, Manifest,
    Provenance, ScenarioSample, SkippedRecord,
};
pub use negatives::{compose_negatives, AttributeLexicon, Negatives};
pub use template::{
    instantiate_template, load_templates, parse_templates, Fill, Template, CATEGORY_SET, EXPR, IMAGE,
};

/// Images whose longest edge is below this are dropped.
pub const MIN_LONGEST_EDGE: u32 = 250;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DatasetError {
    #[error("template {location}: {reason}")]
    Template { location: String, reason: String },
    #[error("no templates for scenario {0}")]
    NoTemplates(Scenario),
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// One expression, one box.
    SingleReferent,
    /// One phrase, all of its boxes.
    OneCategoryMulti,
    /// A category absent from the image; target "None".
    NonExisting,
    /// A category set, every box of those categories.
    MultiCategoryMulti,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Self::SingleReferent,
        Self::OneCategoryMulti,
        Self::NonExisting,
        Self::MultiCategoryMulti,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SingleReferent => "single_referent",
            Self::OneCategoryMulti => "one_category_multi",
            Self::NonExisting => "non_existing",
            Self::MultiCategoryMulti => "multi_category_multi",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = DatasetError;

    /// Accepts the snake_case names plus the short forms `single`, `multi`,
    /// `none` and `multi_category`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase().replace('-', "_");
        Ok(match s.as_str() {
            "single_referent" | "single" => Self::SingleReferent,
            "one_category_multi" | "multi" => Self::OneCategoryMulti,
            "non_existing" | "none" => Self::NonExisting,
            "multi_category_multi" | "multi_category" => Self::MultiCategoryMulti,
            _ => return Err(DatasetError::UnknownScenario(s)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub label: String,
    pub bbox: PixelBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseBoxes {
    pub phrase: String,
    pub boxes: Vec<PixelBox>,
}

/// Annotation content of a source record. Boxes are in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    Referent { expr: String, bbox: PixelBox },
    Detection { objects: Vec<LabeledBox> },
    Grounding { phrases: Vec<PhraseBoxes> },
    Negative {
        categories: Vec<String>,
        /// Labels present in the image, used to compose extra negatives.
        #[serde(default)]
        positives: Vec<String>,
    },
}

impl Payload {
    fn boxes(&self) -> Vec<&PixelBox> {
        match self {
            Self::Referent { bbox, .. } => vec![bbox],
            Self::Detection { objects } => objects.iter().map(|o| &o.bbox).collect(),
            Self::Grounding { phrases } => phrases.iter().flat_map(|p| &p.boxes).collect(),
            Self::Negative { .. } => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    /// Source dataset name.
    pub source: String,
    pub record_id: String,
    /// Probed size of the image file, when available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actual_width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actual_height: Option<u32>,
    pub annotation: Payload,
}

/// One input line: a record or the reason it could not be read.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceLine {
    Record(SourceRecord),
    Unreadable { error: String },
}

/// Parses JSON Lines, keeping one entry per non-blank line.
pub fn parse_source_lines(text: &str) -> Vec<SourceLine> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| match serde_json::from_str(l) {
            Ok(r) => SourceLine::Record(r),
            Err(e) => SourceLine::Unreadable { error: e.to_string() },
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum DropReason {
    Unreadable { error: String },
    ZeroSize,
    SmallImage { longest_edge: u32 },
    SizeMismatch { declared: [u32; 2], actual: [u32; 2] },
    BoxOutOfBounds { bbox: [f64; 4] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedRecord {
    /// Position among the input records, from 0.
    pub index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record_id: Option<String>,
    #[serde(flatten)]
    pub reason: DropReason,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<SourceRecord>,
    pub dropped: Vec<DroppedRecord>,
}

fn drop_reason(r: &SourceRecord) -> Option<DropReason> {
    if r.width == 0 || r.height == 0 {
        return Some(DropReason::ZeroSize);
    }
    let longest = r.width.max(r.height);
    if longest < MIN_LONGEST_EDGE {
        return Some(DropReason::SmallImage { longest_edge: longest });
    }
    if let (Some(w), Some(h)) = (r.actual_width, r.actual_height) {
        if (w, h) != (r.width, r.height) {
            return Some(DropReason::SizeMismatch {
                declared: [r.width, r.height],
                actual: [w, h],
            });
        }
    }
    let (w, h) = (f64::from(r.width), f64::from(r.height));
    r.annotation
        .boxes()
        .into_iter()
        .find(|b| !b.within(w, h))
        .map(|b| DropReason::BoxOutOfBounds {
            bbox: [b.x1, b.y1, b.x2, b.y2],
        })
}

/// Splits inputs into kept records and drops with a reason each. Every input
/// lands in exactly one of the two lists.
pub fn filter_images(lines: Vec<SourceLine>) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for (index, line) in lines.into_iter().enumerate() {
        match line {
            SourceLine::Unreadable { error } => out.dropped.push(DroppedRecord {
                index,
                record_id: None,
                reason: DropReason::Unreadable { error },
            }),
            SourceLine::Record(r) => match drop_reason(&r) {
                Some(reason) => out.dropped.push(DroppedRecord {
                    index,
                    record_id: Some(r.record_id),
                    reason,
                }),
                None => out.kept.push(r),
            },
        }
    }
    out
}

/// Lowercase hex SHA-256.
pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Largest area bucket among pixel boxes, if any.
pub fn largest_bucket<'a>(boxes: impl IntoIterator<Item = &'a PixelBox>) -> Option<AreaRange> {
    boxes
        .into_iter()
        .map(|b| crate::metrics::area_bucket(b.area()))
        .max_by_key(|r| match r {
            AreaRange::Small => 0,
            AreaRange::Medium => 1,
            _ => 2,
        })
}
