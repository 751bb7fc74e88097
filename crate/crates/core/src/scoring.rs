//! Training-free confidence scores from per-token generation probabilities.
//!
//! A detection's label score is the joint probability of the tokens that spell
//! its label; its localization score is the product of the joint
//! probabilities of its four coordinate numerals. The final score mixes the
//! two geometrically: `label^q * loc^(1 - q)`. All products are taken in
//! natural-log space.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, locate_fields, Detection, PredictionSet, SegmentError, SequenceOrder};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoringError {
    #[error("token {index} has probability {prob}, expected a value in (0, 1]")]
    InvalidProbability { index: usize, prob: f64 },
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("trace has no tokens")]
    EmptyTrace,
    #[error("token span is empty")]
    EmptySpan,
    #[error("token span {start}..{end} exceeds trace length {len}")]
    SpanOutOfRange { start: usize, end: usize, len: usize },
    #[error("invalid scoring config: {0}")]
    InvalidConfig(String),
    #[error("score {0} is outside (0, 1]")]
    InvalidScore(f64),
    #[error("trace text does not parse: {0}")]
    Parse(#[from] SegmentError),
    #[error("alignment failed: {0}")]
    Alignment(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub image_ref: String,
    pub instruction: String,
}

/// One generated token and its conditional probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub prob: f64,
}

impl Token {
    pub fn new(text: impl Into<String>, prob: f64) -> Self {
        Self {
            text: text.into(),
            prob,
        }
    }
}

/// The generated answer as tokens with their conditional probabilities, up
/// to (not including) the end-of-sequence marker.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTrace {
    tokens: Vec<Token>,
    context: PromptContext,
}

impl TokenTrace {
    pub fn new(tokens: Vec<Token>, context: PromptContext) -> Result<Self, ScoringError> {
        if context.instruction.is_empty() {
            return Err(ScoringError::EmptyInstruction);
        }
        for (index, t) in tokens.iter().enumerate() {
            if !(t.prob > 0.0 && t.prob <= 1.0) {
                return Err(ScoringError::InvalidProbability { index, prob: t.prob });
            }
        }
        Ok(Self { tokens, context })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn context(&self) -> &PromptContext {
        &self.context
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The full generated sequence.
    pub fn text(&self) -> String {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }

    /// Sum of log-probabilities over `span`.
    pub fn span_log_prob(&self, span: &Range<usize>) -> Result<f64, ScoringError> {
        if span.start >= span.end {
            return Err(ScoringError::EmptySpan);
        }
        if span.end > self.tokens.len() {
            return Err(ScoringError::SpanOutOfRange {
                start: span.start,
                end: span.end,
                len: self.tokens.len(),
            });
        }
        Ok(self.tokens[span.clone()].iter().map(|t| t.prob.ln()).sum())
    }
}

/// JSON Lines interchange form of a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub image_id: String,
    pub instruction: String,
    pub tokens: Vec<Token>,
}

impl TraceRecord {
    pub fn into_trace(self) -> Result<(String, TokenTrace), ScoringError> {
        let context = PromptContext {
            image_ref: self.image_id.clone(),
            instruction: self.instruction,
        };
        Ok((self.image_id, TokenTrace::new(self.tokens, context)?))
    }

    pub fn from_trace(image_id: impl Into<String>, trace: &TokenTrace) -> Self {
        Self {
            image_id: image_id.into(),
            instruction: trace.context.instruction.clone(),
            tokens: trace.tokens.clone(),
        }
    }
}

/// Token index ranges covering one detection's label and coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionSpans {
    pub label: Range<usize>,
    /// x1, y1, x2, y2
    pub coords: [Range<usize>; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub q: f64,
    pub use_label_score: bool,
    pub use_loc_score: bool,
    pub default_score: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            q: 0.5,
            use_label_score: true,
            use_loc_score: true,
            default_score: 0.99,
        }
    }
}

impl ScoringConfig {
    /// Every prediction gets `default_score`.
    pub fn constant() -> Self {
        Self {
            use_label_score: false,
            use_loc_score: false,
            ..Self::default()
        }
    }

    pub fn loc_only() -> Self {
        Self {
            use_label_score: false,
            ..Self::default()
        }
    }

    pub fn label_only() -> Self {
        Self {
            use_loc_score: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ScoringError> {
        if !(0.0..=1.0).contains(&self.q) {
            return Err(ScoringError::InvalidConfig(format!("q = {} not in [0, 1]", self.q)));
        }
        if !(self.default_score > 0.0 && self.default_score <= 1.0) {
            return Err(ScoringError::InvalidConfig(format!(
                "default_score = {} not in (0, 1]",
                self.default_score
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub label_score: f64,
    pub loc_score: f64,
    pub final_score: f64,
}

/// Joint probability of the whole trace.
pub fn sequence_prob(trace: &TokenTrace) -> Result<f64, ScoringError> {
    if trace.is_empty() {
        return Err(ScoringError::EmptyTrace);
    }
    trace.span_log_prob(&(0..trace.len())).map(f64::exp)
}

pub fn label_score(trace: &TokenTrace, span: &Range<usize>) -> Result<f64, ScoringError> {
    trace.span_log_prob(span).map(f64::exp)
}

pub fn loc_score(trace: &TokenTrace, coord_spans: &[Range<usize>; 4]) -> Result<f64, ScoringError> {
    let mut log_sum = 0.0;
    for span in coord_spans {
        log_sum += trace.span_log_prob(span)?;
    }
    Ok(log_sum.exp())
}

fn check_score(s: f64) -> Result<f64, ScoringError> {
    if s > 0.0 && s <= 1.0 {
        Ok(s)
    } else {
        Err(ScoringError::InvalidScore(s))
    }
}

pub fn confidence(
    label_score: f64,
    loc_score: f64,
    config: &ScoringConfig,
) -> Result<ScoreBreakdown, ScoringError> {
    config.validate()?;
    check_score(label_score)?;
    check_score(loc_score)?;
    Ok(mix_logs(label_score.ln(), loc_score.ln(), config))
}

/// Mixes log-domain label and localization scores. The config is assumed
/// valid.
fn mix_logs(label_ln: f64, loc_ln: f64, config: &ScoringConfig) -> ScoreBreakdown {
    let final_score = match (config.use_label_score, config.use_loc_score) {
        (true, true) => (config.q * label_ln + (1.0 - config.q) * loc_ln).exp(),
        (false, true) => loc_ln.exp(),
        (true, false) => label_ln.exp(),
        (false, false) => config.default_score,
    };
    ScoreBreakdown {
        label_score: label_ln.exp(),
        loc_score: loc_ln.exp(),
        final_score,
    }
}

/// Maps each detection's label and coordinate characters onto token indices.
///
/// A token is assigned to every span whose characters it intersects, so a
/// token straddling a field boundary counts fully toward each field.
/// Delimiter characters belong to no span.
pub fn align_spans(
    trace: &TokenTrace,
    parsed: &PredictionSet,
    order: SequenceOrder,
) -> Result<Vec<DetectionSpans>, ScoringError> {
    let text = trace.text();
    let located = locate_fields(&text, order)?;
    let reparsed = codec::parse_strict(&text, order)?;
    let same = match (&reparsed, parsed) {
        (PredictionSet::NoneSentinel, PredictionSet::NoneSentinel) => true,
        (PredictionSet::Objects(a), PredictionSet::Objects(b)) => {
            a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| x.label == y.label && x.bbox == y.bbox)
        }
        _ => false,
    };
    if !same {
        return Err(ScoringError::Alignment(
            "parsed predictions do not match the trace text".into(),
        ));
    }

    let mut bounds = Vec::with_capacity(trace.len());
    let mut at = 0usize;
    for t in trace.tokens() {
        bounds.push(at..at + t.text.len());
        at += t.text.len();
    }
    let to_tokens = |chars: &Range<usize>| -> Result<Range<usize>, ScoringError> {
        let mut hit = bounds
            .iter()
            .enumerate()
            .filter(|(_, b)| !b.is_empty() && b.start < chars.end && chars.start < b.end)
            .map(|(i, _)| i);
        let first = hit.next().ok_or_else(|| {
            ScoringError::Alignment(format!("characters {chars:?} map to no token"))
        })?;
        let last = hit.next_back().unwrap_or(first);
        Ok(first..last + 1)
    };

    located
        .iter()
        .map(|l| {
            Ok(DetectionSpans {
                label: to_tokens(&l.label)?,
                coords: [
                    to_tokens(&l.coords[0])?,
                    to_tokens(&l.coords[1])?,
                    to_tokens(&l.coords[2])?,
                    to_tokens(&l.coords[3])?,
                ],
            })
        })
        .collect()
}

/// A detection with its score breakdown and its position in the sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDetection {
    pub detection: Detection,
    pub breakdown: ScoreBreakdown,
    pub position: usize,
}

/// Scores every detection in the trace and returns them ranked by final
/// score, ties kept in sequence order. `None` traces yield `Ok(None)`.
pub fn score_trace_detailed(
    trace: &TokenTrace,
    order: SequenceOrder,
    config: &ScoringConfig,
) -> Result<Option<Vec<ScoredDetection>>, ScoringError> {
    config.validate()?;
    let parsed = codec::parse_strict(&trace.text(), order)?;
    if parsed.is_none_sentinel() {
        return Ok(None);
    }
    let spans = align_spans(trace, &parsed, order)?;
    let mut scored = parsed
        .detections()
        .iter()
        .zip(&spans)
        .enumerate()
        .map(|(position, (det, span))| {
            let label_ln = trace.span_log_prob(&span.label)?;
            let mut loc_ln = 0.0;
            for coord in &span.coords {
                loc_ln += trace.span_log_prob(coord)?;
            }
            let breakdown = mix_logs(label_ln, loc_ln, config);
            Ok(ScoredDetection {
                detection: det.clone().with_score(breakdown.final_score),
                breakdown,
                position,
            })
        })
        .collect::<Result<Vec<_>, ScoringError>>()?;
    scored.sort_by(|a, b| b.breakdown.final_score.total_cmp(&a.breakdown.final_score));
    Ok(Some(scored))
}

pub fn score_trace(
    trace: &TokenTrace,
    order: SequenceOrder,
    config: &ScoringConfig,
) -> Result<PredictionSet, ScoringError> {
    Ok(match score_trace_detailed(trace, order, config)? {
        None => PredictionSet::NoneSentinel,
        Some(scored) => PredictionSet::Objects(scored.into_iter().map(|s| s.detection).collect()),
    })
}
