//! Correctness judging against gold answers and calibration record assembly.

use serde::{Deserialize, Serialize};

use crate::dataset::{EvalItem, GoldAnswer, MatchMode};
use crate::error::{Error, Result};
use crate::parsing::Prediction;
use crate::prompting::Strategy;

pub const NUMERIC_REL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub correct: bool,
    pub attempted: bool,
}

/// Group labels a record is sliced by when aggregating.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupLabels {
    pub category: String,
    pub subtask: String,
    pub modality: String,
    pub strategy: String,
    pub eval_config: String,
}

/// The atomic metrics input: (confidence, correctness, attempted, groups).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub item_id: String,
    pub confidence: f64,
    pub correct: bool,
    pub attempted: bool,
    pub group: GroupLabels,
}

/// One line of the results file (External Interfaces).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultLine {
    pub item_id: String,
    pub strategy: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    pub correct: bool,
    pub attempted: bool,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript_path: Option<String>,
}

fn normalize_letter(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect::<String>()
        .to_uppercase()
}

/// Lowercase, collapse whitespace, strip terminal punctuation.
fn normalize_text(s: &str) -> String {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .to_lowercase()
        .trim_end_matches(['.', '!', '?', ','])
        .trim()
        .to_string()
}

fn numeric_eq(a: f64, b: f64) -> bool {
    if a == b {
        return true;
    }
    let scale = a.abs().max(b.abs());
    (a - b).abs() <= NUMERIC_REL_TOLERANCE * scale
}

/// Judges a parsed prediction against the gold answer.
pub fn judge(pred: &Prediction, gold: &GoldAnswer) -> Verdict {
    if pred.abstained {
        return Verdict {
            correct: false,
            attempted: false,
        };
    }
    let correct = match gold.match_mode {
        MatchMode::Letter => {
            let got = normalize_letter(&pred.answer);
            got.len() == 1 && got == normalize_letter(&gold.canonical)
        }
        MatchMode::ExactNormalized => {
            let got = normalize_text(&pred.answer);
            gold_forms(gold).any(|form| normalize_text(form) == got)
        }
        MatchMode::Numeric => {
            // exact string forms first, then numeric comparison
            let got = normalize_text(&pred.answer);
            let string_hit = gold_forms(gold).any(|form| normalize_text(form) == got);
            string_hit
                || match pred.answer.trim().parse::<f64>() {
                    Ok(value) => gold_forms(gold)
                        .filter_map(|form| form.trim().parse::<f64>().ok())
                        .any(|expected| numeric_eq(value, expected)),
                    Err(_) => false,
                }
        }
    };
    Verdict {
        correct,
        attempted: true,
    }
}

fn gold_forms(gold: &GoldAnswer) -> impl Iterator<Item = &str> {
    std::iter::once(gold.canonical.as_str()).chain(gold.aliases.iter().map(String::as_str))
}

/// Builds the immutable calibration record for one evaluated item.
///
/// Rows without a confidence value become status entries, not records.
pub fn make_record(
    item: &EvalItem,
    pred: &Prediction,
    verdict: Verdict,
    strategy: Strategy,
) -> Result<CalibrationRecord> {
    let confidence = pred.confidence.ok_or(Error::MissingConfidence)?;
    Ok(CalibrationRecord {
        item_id: item.id.clone(),
        confidence,
        correct: verdict.correct,
        attempted: verdict.attempted,
        group: GroupLabels {
            category: item.category.clone(),
            subtask: item.subtask.clone(),
            modality: item.modality.as_str().to_string(),
            strategy: strategy.kind.to_string(),
            eval_config: item.eval_config.as_str().to_string(),
        },
    })
}
