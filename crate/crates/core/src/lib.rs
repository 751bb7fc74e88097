//! Tooling around language-prompted localization models: the textual
//! detection sequence format, training-free confidence scores computed from
//! token probabilities, detection/REC/grounding evaluation, scenario dataset
//! construction, and a seeded synthetic substrate for end-to-end tests.

pub mod codec;
pub mod dataset;
pub mod metrics;
pub mod scoring;
pub mod synth;

pub use codec::{
    parse, parse_lenient, parse_strict, quantize_coord, serialize, CodecError, Detection, NormBox,
    ParseMode, PredictionSet, SequenceOrder,
};
