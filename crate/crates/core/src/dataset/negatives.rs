use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Descriptor words used to compose fine-grained negative referents.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributeLexicon {
    /// "a {color} {category}"
    pub colors: Vec<String>,
    /// "the {category} {position}"
    pub positions: Vec<String>,
    /// "a {category} {clothing}"
    pub clothing: Vec<String>,
}

impl AttributeLexicon {
    pub fn is_empty(&self) -> bool {
        self.colors.is_empty() && self.positions.is_empty() && self.clothing.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Negatives {
    pub referents: Vec<String>,
    pub diagnostics: Vec<String>,
}

fn norm(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn without_article(s: &str) -> &str {
    ["a ", "an ", "the "]
        .iter()
        .find_map(|a| s.strip_prefix(a))
        .unwrap_or(s)
}

/// Every composable referent, in pattern, category, attribute order.
fn article(word: &str) -> &'static str {
    if word.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

fn candidates(categories: &[String], lexicon: &AttributeLexicon) -> Vec<String> {
    let mut out = Vec::new();
    for cat in categories {
        out.extend(lexicon.colors.iter().map(|c| format!("{} {c} {cat}", article(c))));
    }
    for cat in categories {
        out.extend(lexicon.positions.iter().map(|p| format!("the {cat} {p}")));
    }
    for cat in categories {
        out.extend(lexicon.clothing.iter().map(|c| format!("{} {cat} {c}", article(cat))));
    }
    out
}

/// A candidate collides with a positive when the two are equal, or when one
/// contains the other and the positive is more than a bare category name.
fn collides(candidate: &str, positives: &[String], categories: &BTreeSet<String>) -> bool {
    let c = norm(candidate);
    positives.iter().any(|p| {
        let p = norm(p);
        if c == p {
            return true;
        }
        if p.is_empty() {
            return false;
        }
        // "a white cat" always contains "cat"; only descriptive positives count
        if categories.contains(&p) {
            return false;
        }
        let (c, p) = (without_article(&c), without_article(&p));
        c.contains(p) || p.contains(c)
    })
}

/// Draws up to `count` negative referents for an image whose objects have
/// `categories` and whose positive labels are `positives`.
pub fn compose_negatives<R: Rng + ?Sized>(
    categories: &[String],
    positives: &[String],
    lexicon: &AttributeLexicon,
    count: usize,
    rng: &mut R,
) -> Negatives {
    let mut diagnostics = Vec::new();
    if lexicon.is_empty() {
        diagnostics.push("attribute lexicon is empty; no negatives composed".to_string());
        return Negatives {
            referents: Vec::new(),
            diagnostics,
        };
    }
    let bare: BTreeSet<String> = categories.iter().map(|c| norm(c)).collect();
    let unique: Vec<String> = {
        let mut seen = BTreeSet::new();
        categories
            .iter()
            .filter(|c| !c.trim().is_empty() && seen.insert(norm(c)))
            .map(|c| c.trim().to_string())
            .collect()
    };
    let mut pool = candidates(&unique, lexicon);
    let before = pool.len();
    pool.retain(|c| !collides(c, positives, &bare));
    let rejected = before - pool.len();
    if rejected > 0 {
        diagnostics.push(format!("{rejected} composed referents collided with positives"));
    }
    if pool.len() < count {
        diagnostics.push(format!(
            "only {} negatives available, {count} requested",
            pool.len()
        ));
    }
    let take = count.min(pool.len());
    let mut picked = index::sample(rng, pool.len(), take).into_vec();
    picked.sort_unstable();
    Negatives {
        referents: picked.into_iter().map(|i| pool[i].clone()).collect(),
        diagnostics,
    }
}
