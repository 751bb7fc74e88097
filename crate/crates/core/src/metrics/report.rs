use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{DetectionMetrics, GroundingReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecReport {
    pub accuracy: f64,
    pub samples: usize,
    pub correct: usize,
}

/// Everything one evaluation run produced. Sections that were not
/// requested stay empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rec: Option<RecReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grounding: Option<GroundingReport>,
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.1}", v * 100.0))
}

fn render(out: &mut String, header: &[&str], row: &[String]) {
    let widths: Vec<usize> = header
        .iter()
        .zip(row)
        .map(|(h, r)| h.len().max(r.len()))
        .collect();
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    out.push_str(&line(header.to_vec()));
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
    out.push_str(&line(row.iter().map(String::as_str).collect()));
}

impl EvalReport {
    /// Percent tables, one per populated section.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        if let Some(d) = &self.detection {
            render(
                &mut out,
                &["mAP", "AP50", "AP75", "AP_S", "AP_M", "AP_L", "AR100"],
                &[
                    pct(Some(d.map)),
                    pct(Some(d.ap50)),
                    pct(Some(d.ap75)),
                    pct(d.ap_small),
                    pct(d.ap_medium),
                    pct(d.ap_large),
                    pct(Some(d.ar100)),
                ],
            );
        }
        if let Some(r) = &self.rec {
            render(
                &mut out,
                &["Acc@0.5", "correct", "samples"],
                &[pct(Some(r.accuracy)), r.correct.to_string(), r.samples.to_string()],
            );
        }
        if let Some(g) = &self.grounding {
            render(
                &mut out,
                &["ANY", "MERGED", "instances", "phrases"],
                &[
                    pct(Some(g.any_recall)),
                    pct(Some(g.merged_recall)),
                    g.instances.to_string(),
                    g.phrases.to_string(),
                ],
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grounding_table_has_both_columns() {
        let report = EvalReport {
            grounding: Some(GroundingReport {
                any_recall: 0.75,
                merged_recall: 0.5,
                instances: 4,
                recalled_instances: 3,
                phrases: 2,
                correct_phrases: 1,
            }),
            ..Default::default()
        };
        let table = report.to_table();
        assert!(table.contains("ANY"));
        assert!(table.contains("MERGED"));
        assert!(table.contains("75.0"));
        assert!(table.contains("50.0"));
    }
}
