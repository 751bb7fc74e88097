use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Detection, NormBox, PredictionSet, SequenceOrder, NONE_SENTINEL, STEPS_PER_UNIT};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    /// Any malformed segment fails the whole parse.
    #[default]
    Strict,
    /// Malformed segments are skipped and reported.
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmentErrorKind {
    EmptyText,
    EmptySegment,
    MissingBlock,
    UnclosedBlock,
    CoordCount { found: usize },
    BadNumber { numeral: String },
    InvertedBox,
    MissingDelimiter,
    TrailingText,
    EmptyLabel,
    LabelLineBreak,
}

impl fmt::Display for SegmentErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptyText => f.write_str("empty sequence"),
            Self::EmptySegment => f.write_str("empty segment"),
            Self::MissingBlock => f.write_str("no coordinate block"),
            Self::UnclosedBlock => f.write_str("coordinate block is not closed"),
            Self::CoordCount { found } => write!(f, "expected 4 coordinates, found {found}"),
            Self::BadNumber { numeral } => write!(f, "malformed coordinate {numeral:?}"),
            Self::InvertedBox => f.write_str("box has x1 > x2 or y1 > y2"),
            Self::MissingDelimiter => f.write_str("missing '-' between box and label"),
            Self::TrailingText => f.write_str("unexpected text after coordinate block"),
            Self::EmptyLabel => f.write_str("empty label"),
            Self::LabelLineBreak => f.write_str("label contains a line break"),
        }
    }
}

/// A malformed segment. `offset` counts characters from the start of the
/// parsed text.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("segment {segment} at character {offset}: {kind}")]
pub struct SegmentError {
    pub segment: usize,
    pub offset: usize,
    pub kind: SegmentErrorKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    pub predictions: PredictionSet,
    pub diagnostics: Vec<SegmentError>,
}

/// A parsed detection together with the byte ranges of its fields in the
/// source text. Coordinate ranges cover the numerals only.
#[derive(Debug, Clone, PartialEq)]
pub struct LocatedDetection {
    pub detection: Detection,
    pub label: Range<usize>,
    pub coords: [Range<usize>; 4],
}

pub fn parse(text: &str, order: SequenceOrder, mode: ParseMode) -> Result<Parsed, SegmentError> {
    let (located, diagnostics) = run(text, order, mode)?;
    let predictions = match located {
        None => PredictionSet::NoneSentinel,
        Some(found) => PredictionSet::Objects(found.into_iter().map(|l| l.detection).collect()),
    };
    Ok(Parsed {
        predictions,
        diagnostics,
    })
}

pub fn parse_strict(text: &str, order: SequenceOrder) -> Result<PredictionSet, SegmentError> {
    parse(text, order, ParseMode::Strict).map(|p| p.predictions)
}

/// Never fails: malformed segments become diagnostics.
pub fn parse_lenient(text: &str, order: SequenceOrder) -> Parsed {
    parse(text, order, ParseMode::Lenient).expect("lenient parsing is total")
}

/// Strict parse that keeps field positions. The `None` sentinel yields an
/// empty list.
pub fn locate_fields(
    text: &str,
    order: SequenceOrder,
) -> Result<Vec<LocatedDetection>, SegmentError> {
    run(text, order, ParseMode::Strict).map(|(l, _)| l.unwrap_or_default())
}

type Located = Option<Vec<LocatedDetection>>;

fn run(
    text: &str,
    order: SequenceOrder,
    mode: ParseMode,
) -> Result<(Located, Vec<SegmentError>), SegmentError> {
    if text.trim() == NONE_SENTINEL {
        return Ok((None, Vec::new()));
    }
    let lenient = mode == ParseMode::Lenient;
    if lenient && text.trim().is_empty() {
        return Ok((Some(Vec::new()), Vec::new()));
    }
    if text.is_empty() {
        return Err(SegmentError {
            segment: 0,
            offset: 0,
            kind: SegmentErrorKind::EmptyText,
        });
    }

    let mut found = Vec::new();
    let mut diagnostics = Vec::new();
    let mut start = 0usize;
    for (index, raw) in text.split('&').enumerate() {
        let seg_start = start;
        start += raw.len() + 1;

        let (seg, base) = if lenient {
            let lead = raw.len() - raw.trim_start().len();
            (raw.trim(), seg_start + lead)
        } else {
            (raw, seg_start)
        };
        let result = if seg.is_empty() {
            Err((SegmentErrorKind::EmptySegment, 0))
        } else {
            match order {
                SequenceOrder::LabelFirst => parse_label_first(seg, lenient),
                SequenceOrder::CoordFirst => parse_coord_first(seg, lenient),
            }
        };
        match result {
            Ok(fields) => found.push(fields.into_located(seg, base)),
            Err((kind, local)) => {
                let err = SegmentError {
                    segment: index,
                    offset: char_offset(text, base + local),
                    kind,
                };
                if lenient {
                    diagnostics.push(err);
                } else {
                    return Err(err);
                }
            }
        }
    }
    Ok((Some(found), diagnostics))
}

fn char_offset(text: &str, byte: usize) -> usize {
    let mut b = byte.min(text.len());
    while !text.is_char_boundary(b) {
        b -= 1;
    }
    text[..b].chars().count()
}

/// Field positions relative to one segment.
struct SegmentFields {
    label: Range<usize>,
    block: Block,
    block_start: usize,
}

impl SegmentFields {
    fn into_located(self, seg: &str, base: usize) -> LocatedDetection {
        let [x1, y1, x2, y2] = self.block.values;
        let bbox = NormBox { x1, y1, x2, y2 };
        let shift = |r: &Range<usize>, by: usize| (r.start + by)..(r.end + by);
        let offset = base + self.block_start;
        LocatedDetection {
            detection: Detection::new(&seg[self.label.clone()], bbox),
            label: shift(&self.label, base),
            coords: self.block.spans.map(|r| shift(&r, offset)),
        }
    }
}

type SegResult = Result<SegmentFields, (SegmentErrorKind, usize)>;

fn parse_label_first(seg: &str, lenient: bool) -> SegResult {
    // The label ends at the last "-[" that opens a well-formed block running
    // to the end of the segment, so labels may contain hyphens.
    let mut first_err = None;
    let mut chosen = None;
    for (pos, _) in seg.rmatch_indices("-[") {
        let block_start = pos + 1;
        match scan_block(&seg[block_start..], lenient) {
            Ok(block) if block_start + block.end == seg.len() => {
                chosen = Some((pos, block));
                break;
            }
            Ok(block) => {
                first_err.get_or_insert((SegmentErrorKind::TrailingText, block_start + block.end));
            }
            Err((kind, off)) => {
                first_err.get_or_insert((kind, block_start + off));
            }
        }
    }
    let Some((pos, block)) = chosen else {
        return Err(first_err.unwrap_or((SegmentErrorKind::MissingBlock, seg.len())));
    };
    let label = label_range(seg, 0..pos, lenient)?;
    check_order(&block, pos + 1)?;
    Ok(SegmentFields {
        label,
        block,
        block_start: pos + 1,
    })
}

fn parse_coord_first(seg: &str, lenient: bool) -> SegResult {
    if !seg.starts_with('[') {
        return Err((SegmentErrorKind::MissingBlock, 0));
    }
    let block = scan_block(seg, lenient)?;
    check_order(&block, 0)?;
    let rest = &seg[block.end..];
    let skipped = if lenient {
        rest.len() - rest.trim_start().len()
    } else {
        0
    };
    if !rest[skipped..].starts_with('-') {
        return Err((SegmentErrorKind::MissingDelimiter, block.end + skipped));
    }
    let label_start = block.end + skipped + 1;
    let label = label_range(seg, label_start..seg.len(), lenient)?;
    Ok(SegmentFields {
        label,
        block,
        block_start: 0,
    })
}

fn label_range(seg: &str, range: Range<usize>, lenient: bool) -> Result<Range<usize>, (SegmentErrorKind, usize)> {
    let raw = &seg[range.clone()];
    let range = if lenient {
        let lead = raw.len() - raw.trim_start().len();
        let trimmed = raw.trim();
        (range.start + lead)..(range.start + lead + trimmed.len())
    } else {
        range
    };
    let label = &seg[range.clone()];
    if label.is_empty() {
        return Err((SegmentErrorKind::EmptyLabel, range.start));
    }
    if let Some(i) = label.find(['\n', '\r']) {
        return Err((SegmentErrorKind::LabelLineBreak, range.start + i));
    }
    Ok(range)
}

fn check_order(block: &Block, block_start: usize) -> Result<(), (SegmentErrorKind, usize)> {
    let [x1, y1, x2, y2] = block.values;
    if x1 > x2 || y1 > y2 {
        return Err((SegmentErrorKind::InvertedBox, block_start));
    }
    Ok(())
}

/// A bracketed coordinate block. Offsets are relative to the opening `[`.
struct Block {
    values: [u16; 4],
    spans: [Range<usize>; 4],
    /// Offset one past the closing `]`.
    end: usize,
}

fn scan_block(s: &str, lenient: bool) -> Result<Block, (SegmentErrorKind, usize)> {
    debug_assert!(s.starts_with('['));
    let Some(close) = s.find(']') else {
        return Err((SegmentErrorKind::UnclosedBlock, 0));
    };
    let inner = &s[1..close];
    if inner.trim().is_empty() {
        return Err((SegmentErrorKind::CoordCount { found: 0 }, 1));
    }
    let count = inner.split(',').count();
    if count != 4 {
        return Err((SegmentErrorKind::CoordCount { found: count }, 1));
    }
    let mut values = [0u16; 4];
    let mut spans: [Range<usize>; 4] = Default::default();
    let mut at = 1usize;
    for (i, part) in inner.split(',').enumerate() {
        let (lead, numeral) = if lenient {
            (part.len() - part.trim_start().len(), part.trim())
        } else {
            (0, part)
        };
        let start = at + lead;
        values[i] = parse_numeral(numeral).ok_or_else(|| {
            (
                SegmentErrorKind::BadNumber {
                    numeral: numeral.to_string(),
                },
                start,
            )
        })?;
        spans[i] = start..start + numeral.len();
        at += part.len() + 1;
    }
    Ok(Block {
        values,
        spans,
        end: close + 1,
    })
}

/// Parses a decimal numeral into thousandths with exact decimal rounding
/// (ties away from zero), clamped to [0, 1].
fn parse_numeral(s: &str) -> Option<u16> {
    let (negative, body) = match s.as_bytes().first()? {
        b'-' => (true, &s[1..]),
        b'+' => (false, &s[1..]),
        _ => (false, s),
    };
    let (int_part, frac_part) = match body.split_once('.') {
        Some((i, f)) => (i, f),
        None => (body, ""),
    };
    let all_digits = |p: &str| p.bytes().all(|b| b.is_ascii_digit());
    if !all_digits(int_part) || !all_digits(frac_part) || int_part.len() + frac_part.len() == 0 {
        return None;
    }
    let limit = u64::from(STEPS_PER_UNIT);
    let int_digits = int_part.trim_start_matches('0');
    let mut magnitude = if int_digits.len() > 4 {
        u64::MAX / 2
    } else {
        int_digits.bytes().fold(0u64, |acc, b| acc * 10 + u64::from(b - b'0')) * 1000
    };
    let frac = frac_part.as_bytes();
    for (k, scale) in [100u64, 10, 1].into_iter().enumerate() {
        if let Some(&b) = frac.get(k) {
            magnitude += u64::from(b - b'0') * scale;
        }
    }
    if frac.get(3).is_some_and(|&b| b >= b'5') {
        magnitude += 1;
    }
    if negative {
        return Some(0);
    }
    Some(magnitude.min(limit) as u16)
}
