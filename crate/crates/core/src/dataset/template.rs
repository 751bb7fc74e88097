use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetError, Scenario};

pub const EXPR: &str = "<expr>";
pub const IMAGE: &str = "<image>";
pub const CATEGORY_SET: &str = "<category set>";

/// An instruction template with validated placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    text: String,
    scenario: Scenario,
    /// `file:line` or another identifier of where the template came from.
    source: String,
}

/// What a template is filled with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fill<'a> {
    Expr(&'a str),
    Categories(&'a [String]),
}

impl Template {
    pub fn new(
        text: impl Into<String>,
        scenario: Scenario,
        source: impl Into<String>,
    ) -> Result<Self, DatasetError> {
        let text = text.into();
        let source = source.into();
        let fail = |reason: String| DatasetError::Template {
            location: source.clone(),
            reason,
        };
        let mut exprs = 0;
        let mut sets = 0;
        let mut rest = text.as_str();
        while let Some(open) = rest.find('<') {
            let Some(len) = rest[open..].find('>') else {
                break;
            };
            let tag = &rest[open..open + len + 1];
            if tag[1..].contains('<') {
                rest = &rest[open + 1..];
                continue;
            }
            match tag {
                EXPR => exprs += 1,
                CATEGORY_SET => sets += 1,
                IMAGE => {}
                other => return Err(fail(format!("unknown placeholder {other}"))),
            }
            rest = &rest[open + len + 1..];
        }
        let (want_expr, want_set) = match scenario {
            Scenario::MultiCategoryMulti => (0, 1),
            _ => (1, 0),
        };
        if exprs != want_expr || sets != want_set {
            return Err(fail(format!(
                "{scenario} templates need {want_expr} {EXPR} and {want_set} {CATEGORY_SET}, found {exprs} and {sets}"
            )));
        }
        if text.contains(['\n', '\r']) {
            return Err(fail("template spans several lines".into()));
        }
        Ok(Self {
            text,
            scenario,
            source,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// Removes `<image>` markers. A space before the marker goes with it when
/// the marker ends a clause; a space after it goes when it opens the text.
fn strip_image(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(at) = rest.find(IMAGE) {
        out.push_str(&rest[..at]);
        rest = &rest[at + IMAGE.len()..];
        let next = rest.chars().next();
        let closes = next.is_none_or(|c| c.is_whitespace() || c.is_ascii_punctuation());
        if closes && out.ends_with(' ') {
            out.pop();
        } else if out.is_empty() || out.ends_with(' ') {
            rest = rest.trim_start_matches(' ');
        }
    }
    out.push_str(rest);
    out.trim().to_string()
}

/// Fills a template. `<expr>` takes the expression, `<category set>` the
/// categories joined by ", ", and `<image>` markers are dropped.
pub fn instantiate_template(template: &Template, fill: Fill<'_>) -> Result<String, DatasetError> {
    let fail = |reason: &str| DatasetError::Template {
        location: template.source.clone(),
        reason: reason.to_string(),
    };
    let text = strip_image(&template.text);
    match fill {
        Fill::Expr(expr) => {
            if !text.contains(EXPR) {
                return Err(fail("template has no <expr> for an expression"));
            }
            Ok(text.replacen(EXPR, expr, 1))
        }
        Fill::Categories(cats) => {
            if !text.contains(CATEGORY_SET) {
                return Err(fail("template has no <category set> for a category list"));
            }
            if cats.is_empty() {
                return Err(fail("empty category set"));
            }
            Ok(text.replacen(CATEGORY_SET, &cats.join(", "), 1))
        }
    }
}

/// Parses one template per line; blank lines and `#` comments are skipped.
pub fn parse_templates(text: &str, scenario: Scenario, name: &str) -> Result<Vec<Template>, DatasetError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| Template::new(l.trim(), scenario, format!("{name}:{}", i + 1)))
        .collect()
}

/// Loads `<dir>/<scenario>.txt`. Non-existing prompts reuse the single
/// referent file when no dedicated file exists.
pub fn load_templates(dir: &Path, scenario: Scenario) -> Result<Vec<Template>, DatasetError> {
    if !dir.is_dir() {
        return Err(DatasetError::Io(format!("template directory {} not found", dir.display())));
    }
    let mut path = dir.join(format!("{}.txt", scenario.as_str()));
    if scenario == Scenario::NonExisting && !path.exists() {
        path = dir.join(format!("{}.txt", Scenario::SingleReferent.as_str()));
    }
    let text = std::fs::read_to_string(&path)
        .map_err(|e| DatasetError::Io(format!("{}: {e}", path.display())))?;
    let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    let templates = parse_templates(&text, scenario, &name)?;
    if templates.is_empty() {
        return Err(DatasetError::NoTemplates(scenario));
    }
    Ok(templates)
}
