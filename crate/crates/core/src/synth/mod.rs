//! Seeded synthetic scenes and simulated model outputs.
//!
//! Scenes are drawn on the 0.001 coordinate grid so that an unperturbed
//! prediction reproduces its ground truth exactly after denormalization.
//! Simulated outputs are token traces whose per-token probabilities follow a
//! logistic link from each field's geometric error, so the scoring stack can
//! be exercised without a trained model.
//!
//! Every image draws from its own ChaCha8 stream (`2 * index` for the scene,
//! `2 * index + 1` for the predictions), which keeps generation independent
//! of worker count and platform.

mod oracle;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{write_thousandths, NormBox, SequenceOrder, NONE_SENTINEL};
use crate::metrics::{area_bucket, denormalize, AreaRange, GroundTruthImage, GtAnnotation};
use crate::scoring::{PromptContext, Token, TokenTrace};

pub use oracle::{brute_force_ap, OracleError, OracleReport, ORACLE_MAX_GT, ORACLE_MAX_PREDICTIONS};

/// Logit of a token with zero error.
const BASE_LOGIT: f64 = 4.0;
/// Logit drop per unit of relative error, before the calibration slope.
const ERROR_GAIN: f64 = 20.0;
/// Per-token logit jitter, scaled by the calibration slope.
const TOKEN_JITTER: f64 = 0.5;
const PROB_FLOOR: f64 = 1e-30;
const INSTRUCTION: &str = "Locate every object in the image and output the coordinates of each.";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub images: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub categories: usize,
    /// Std-dev of coordinate noise as a fraction of the box size.
    pub box_noise: f64,
    pub drop_rate: f64,
    pub spurious_rate: f64,
    /// 0 makes every token probability identical.
    pub calibration_slope: f64,
    pub width: u32,
    pub height: u32,
    pub order: SequenceOrder,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            images: 100,
            min_objects: 1,
            max_objects: 8,
            categories: 10,
            box_noise: 0.05,
            drop_rate: 0.1,
            spurious_rate: 0.3,
            calibration_slope: 1.0,
            width: 640,
            height: 480,
            order: SequenceOrder::LabelFirst,
        }
    }
}

impl SynthConfig {
    /// Noise 0.05, drop 0.1, spurious 0.3, slope 1.
    pub fn calibrated(seed: u64, images: usize) -> Self {
        Self {
            seed,
            images,
            ..Self::default()
        }
    }

    /// Predictions equal to the ground truth.
    pub fn exact(seed: u64, images: usize) -> Self {
        Self {
            seed,
            images,
            box_noise: 0.0,
            drop_rate: 0.0,
            spurious_rate: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: String| Err(SynthError::InvalidConfig(m));
        if self.images == 0 || self.categories == 0 {
            return fail("images and categories must be at least 1".into());
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return fail(format!(
                "objects per image range {}..={} is empty or starts at 0",
                self.min_objects, self.max_objects
            ));
        }
        for (name, rate) in [("drop_rate", self.drop_rate), ("spurious_rate", self.spurious_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return fail(format!("{name} = {rate} not in [0, 1]"));
            }
        }
        if !(self.box_noise >= 0.0 && self.box_noise.is_finite()) {
            return fail(format!("box_noise = {} must be >= 0", self.box_noise));
        }
        if !(self.calibration_slope >= 0.0 && self.calibration_slope.is_finite()) {
            return fail(format!("calibration_slope = {} must be >= 0", self.calibration_slope));
        }
        if self.width < 128 || self.height < 128 {
            return fail(format!("image size {}x{} below 128 px", self.width, self.height));
        }
        Ok(())
    }

    fn stream(&self, index: usize, part: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(2 * index as u64 + part);
        rng
    }
}

pub fn category_name(k: usize) -> String {
    format!("category {k}")
}

pub fn image_id(index: usize) -> String {
    format!("synth-{index:06}")
}

/// A generated image: pixel ground truth plus the grid boxes it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: GroundTruthImage,
    /// (category index, box) aligned with `image.annotations`.
    pub objects: Vec<(usize, NormBox)>,
}

fn sample_box(rng: &mut ChaCha8Rng, bucket: AreaRange, width: u32, height: u32) -> NormBox {
    let (w, h) = (f64::from(width), f64::from(height));
    let min_side = w.min(h);
    let (lo, hi) = match bucket {
        AreaRange::Small => (6.0, 30.0),
        AreaRange::Medium => (34.0, 94.0),
        _ => (100.0, (0.9 * min_side).max(101.0)),
    };
    loop {
        let side_w = rng.random_range(lo..=hi);
        let side_h = rng.random_range(lo..=hi);
        let tw = ((side_w / w * 1000.0).round() as u16).clamp(1, 1000);
        let th = ((side_h / h * 1000.0).round() as u16).clamp(1, 1000);
        let x1 = rng.random_range(0..=1000 - tw);
        let y1 = rng.random_range(0..=1000 - th);
        let b = NormBox::from_thousandths(x1, y1, x1 + tw, y1 + th).expect("grid box in range");
        if bucket == AreaRange::All || area_bucket(denormalize(&b, width, height).area()) == bucket {
            return b;
        }
    }
}

fn random_bucket(rng: &mut ChaCha8Rng) -> AreaRange {
    [AreaRange::Small, AreaRange::Medium, AreaRange::Large][rng.random_range(0..3)]
}

/// Deterministic scene for `(config.seed, index)`. With three or more
/// objects the first three are small, medium and large.
pub fn generate_scene(config: &SynthConfig, index: usize) -> Scene {
    let mut rng = config.stream(index, 0);
    let count = rng.random_range(config.min_objects..=config.max_objects);
    let objects: Vec<(usize, NormBox)> = (0..count)
        .map(|j| {
            let bucket = if count >= 3 && j < 3 {
                [AreaRange::Small, AreaRange::Medium, AreaRange::Large][j]
            } else {
                random_bucket(&mut rng)
            };
            let cat = rng.random_range(0..config.categories);
            (cat, sample_box(&mut rng, bucket, config.width, config.height))
        })
        .collect();
    let annotations = objects
        .iter()
        .map(|(cat, b)| {
            let bbox = denormalize(b, config.width, config.height);
            GtAnnotation {
                label: category_name(*cat),
                bbox,
                area: Some(bbox.area()),
            }
        })
        .collect();
    Scene {
        image: GroundTruthImage {
            image_id: image_id(index),
            width: config.width,
            height: config.height,
            annotations,
            phrases: Vec::new(),
        },
        objects,
    }
}

/// What a simulated detection corresponds to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SimOrigin {
    /// A perturbed copy of ground-truth object `gt_index`.
    Perturbed { gt_index: usize },
    Spurious,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedImage {
    pub image_id: String,
    pub trace: TokenTrace,
    /// Origin of each detection, in sequence order.
    pub origins: Vec<SimOrigin>,
}

struct SimDetection {
    label: String,
    bbox: NormBox,
    label_error: f64,
    coord_errors: [f64; 4],
    origin: SimOrigin,
}

fn perturb(rng: &mut ChaCha8Rng, b: &NormBox, noise: f64) -> (NormBox, [f64; 4]) {
    let [x1, y1, x2, y2] = b.thousandths().map(f64::from);
    let sizes = [(x2 - x1).max(1.0), (y2 - y1).max(1.0)];
    let mut moved = [x1, y1, x2, y2];
    if noise > 0.0 {
        for (i, v) in moved.iter_mut().enumerate() {
            let n = Normal::new(0.0, noise * sizes[i % 2]).expect("finite std-dev");
            *v = (*v + n.sample(rng)).clamp(0.0, 1000.0);
        }
    }
    let [mut a, mut b2, mut c, mut d] = moved.map(|v| v.round() as u16);
    if a > c {
        std::mem::swap(&mut a, &mut c);
    }
    if b2 > d {
        std::mem::swap(&mut b2, &mut d);
    }
    let out = NormBox::from_thousandths(a, b2, c, d).expect("sorted grid box");
    let new = out.thousandths().map(f64::from);
    let orig = [x1, y1, x2, y2];
    let errors = std::array::from_fn(|i| (new[i] - orig[i]).abs() / sizes[i % 2]);
    (out, errors)
}

fn token_prob(rng: &mut ChaCha8Rng, error: f64, slope: f64) -> f64 {
    let jitter = if slope > 0.0 {
        Normal::new(0.0, TOKEN_JITTER).expect("finite std-dev").sample(rng)
    } else {
        0.0
    };
    let logit = BASE_LOGIT - slope * (ERROR_GAIN * error + jitter);
    (1.0 / (1.0 + (-logit).exp())).max(PROB_FLOOR)
}

/// Splits a label into word tokens, each carrying its leading space.
fn label_tokens(label: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in label.char_indices() {
        if c == ' ' && i > start {
            out.push(&label[start..i]);
            start = i;
        }
    }
    out.push(&label[start..]);
    out
}

fn push_coords(tokens: &mut Vec<Token>, rng: &mut ChaCha8Rng, det: &SimDetection, slope: f64, delim: f64) {
    for (i, v) in det.bbox.thousandths().into_iter().enumerate() {
        if i > 0 {
            tokens.push(Token::new(",", delim));
        }
        let mut numeral = String::with_capacity(5);
        write_thousandths(&mut numeral, v);
        // "d." and "ddd" are separate tokens
        let p = token_prob(rng, det.coord_errors[i], slope);
        tokens.push(Token::new(&numeral[..2], p));
        let p = token_prob(rng, det.coord_errors[i], slope);
        tokens.push(Token::new(&numeral[2..], p));
    }
}

/// Perturbs, drops and hallucinates detections for one scene and renders
/// them as a token trace.
pub fn simulate_predictions(scene: &Scene, config: &SynthConfig, index: usize) -> SimulatedImage {
    let mut rng = config.stream(index, 1);
    let slope = config.calibration_slope;
    let mut dets = Vec::new();
    for (gt_index, (cat, b)) in scene.objects.iter().enumerate() {
        if rng.random_bool(config.drop_rate) {
            continue;
        }
        let (bbox, coord_errors) = perturb(&mut rng, b, config.box_noise);
        dets.push(SimDetection {
            label: category_name(*cat),
            bbox,
            label_error: 0.0,
            coord_errors,
            origin: SimOrigin::Perturbed { gt_index },
        });
    }
    for _ in 0..scene.objects.len() {
        if !rng.random_bool(config.spurious_rate) {
            continue;
        }
        let cat = rng.random_range(0..config.categories);
        let bucket = random_bucket(&mut rng);
        let bbox = sample_box(&mut rng, bucket, config.width, config.height);
        // A hallucinated box can still be emitted with confident numerals.
        let spread = Normal::new(0.0, 2.0 * config.box_noise).expect("finite std-dev");
        let coord_errors = std::array::from_fn(|_| spread.sample(&mut rng).abs());
        dets.push(SimDetection {
            label: category_name(cat),
            bbox,
            label_error: 1.0,
            coord_errors,
            origin: SimOrigin::Spurious,
        });
    }
    dets.shuffle(&mut rng);

    let delim = token_prob(&mut rng, 0.0, 0.0);
    let mut tokens = Vec::new();
    if dets.is_empty() {
        tokens.push(Token::new(NONE_SENTINEL, delim));
    }
    for (i, det) in dets.iter().enumerate() {
        if i > 0 {
            tokens.push(Token::new("&", delim));
        }
        let label = |tokens: &mut Vec<Token>, rng: &mut ChaCha8Rng| {
            for word in label_tokens(&det.label) {
                let p = token_prob(rng, det.label_error, slope);
                tokens.push(Token::new(word, p));
            }
        };
        match config.order {
            SequenceOrder::LabelFirst => {
                label(&mut tokens, &mut rng);
                tokens.push(Token::new("-[", delim));
                push_coords(&mut tokens, &mut rng, det, slope, delim);
                tokens.push(Token::new("]", delim));
            }
            SequenceOrder::CoordFirst => {
                tokens.push(Token::new("[", delim));
                push_coords(&mut tokens, &mut rng, det, slope, delim);
                tokens.push(Token::new("]-", delim));
                label(&mut tokens, &mut rng);
            }
        }
    }
    let context = PromptContext {
        image_ref: scene.image.image_id.clone(),
        instruction: INSTRUCTION.to_string(),
    };
    SimulatedImage {
        image_id: scene.image.image_id.clone(),
        trace: TokenTrace::new(tokens, context).expect("probabilities are in (0, 1]"),
        origins: dets.iter().map(|d| d.origin).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthBundle {
    pub scenes: Vec<Scene>,
    pub outputs: Vec<SimulatedImage>,
}

impl SynthBundle {
    pub fn ground_truth(&self) -> Vec<GroundTruthImage> {
        self.scenes.iter().map(|s| s.image.clone()).collect()
    }
}

/// Generates every scene and its simulated output; index-parallel.
pub fn generate(config: &SynthConfig) -> Result<SynthBundle, SynthError> {
    config.validate()?;
    let (scenes, outputs) = (0..config.images)
        .into_par_iter()
        .map(|i| {
            let scene = generate_scene(config, i);
            let out = simulate_predictions(&scene, config, i);
            (scene, out)
        })
        .unzip();
    Ok(SynthBundle { scenes, outputs })
}
