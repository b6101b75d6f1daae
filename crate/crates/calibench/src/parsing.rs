//! Answer/confidence extraction from model output text.
//!
//! Grammar per the prompt corpus: `<answer>..</answer>` plus
//! `<confidence>..</confidence>`, numbered `<answerN>/<confidenceN>` pairs for
//! top-k, and a confidence-only tag for reflection round 2. Parsing looks only
//! at tags, never at the reasoning prose around them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Guess {
    pub answer: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub answer: String,
    /// None when the model never produced a confidence tag.
    pub confidence: Option<f64>,
    /// True when a confidence value had to be clamped into [0, 1].
    pub clamped: bool,
    pub abstained: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guesses: Option<Vec<Guess>>,
}

/// A normalized confidence plus whether clamping was applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Confidence {
    pub value: f64,
    pub clamped: bool,
}

/// Phrases that mark a response as an abstention (case-insensitive substring
/// match on the answer text). The list is configurable per run.
#[derive(Debug, Clone)]
pub struct AbstentionPhrases {
    phrases: Vec<String>,
}

impl Default for AbstentionPhrases {
    fn default() -> Self {
        AbstentionPhrases {
            phrases: ["i don't know", "cannot determine", "unanswerable"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl AbstentionPhrases {
    pub fn new(phrases: Vec<String>) -> Self {
        AbstentionPhrases {
            phrases: phrases.into_iter().map(|p| p.to_lowercase()).collect(),
        }
    }

    pub fn matches(&self, answer: &str) -> bool {
        let lower = answer.to_lowercase();
        self.phrases.iter().any(|p| lower.contains(p))
    }
}

/// Inner text of the LAST well-formed `<tag>..</tag>` occurrence, trimmed.
///
/// Models sometimes restate the format skeleton while reasoning; the final
/// block is taken as their commitment.
pub fn extract_tag(text: &str, tag: &str) -> Option<String> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let mut last = None;
    let mut cursor = 0;
    while let Some(start) = text[cursor..].find(&open) {
        let inner_start = cursor + start + open.len();
        match text[inner_start..].find(&close) {
            Some(end) => {
                last = Some(text[inner_start..inner_start + end].trim().to_string());
                cursor = inner_start + end + close.len();
            }
            None => break, // unclosed trailing tag
        }
    }
    last
}

/// Normalizes a raw confidence string into [0, 1].
///
/// "N%" and "N %" divide by 100; bare values above 1 are read as percentages,
/// values in [0, 1] as fractions. Out-of-range results clamp with a flag.
pub fn parse_confidence(raw: &str) -> Result<Confidence> {
    let trimmed = raw.trim();
    let (number_part, is_percent) = match trimmed.strip_suffix('%') {
        Some(rest) => (rest.trim_end(), true),
        None => (trimmed, false),
    };
    let value: f64 = number_part
        .parse()
        .map_err(|_| Error::NonNumericConfidence(raw.to_string()))?;
    if !value.is_finite() {
        return Err(Error::NonNumericConfidence(raw.to_string()));
    }
    let scaled = if is_percent || value > 1.0 {
        value / 100.0
    } else {
        value
    };
    let clamped_value = scaled.clamp(0.0, 1.0);
    Ok(Confidence {
        value: clamped_value,
        clamped: clamped_value != scaled,
    })
}

/// Parses a single-answer response (vanilla CoT and VCAP round 2).
pub fn parse_single(text: &str, abstention: &AbstentionPhrases) -> Result<Prediction> {
    let answer = extract_tag(text, "answer");
    let confidence = match extract_tag(text, "confidence") {
        Some(raw) => Some(parse_confidence(&raw)?),
        None => None,
    };
    let abstained = match &answer {
        None => true,
        Some(a) => a.is_empty() || abstention.matches(a),
    };
    Ok(Prediction {
        answer: answer.unwrap_or_default(),
        confidence: confidence.map(|c| c.value),
        clamped: confidence.map_or(false, |c| c.clamped),
        abstained,
        guesses: None,
    })
}

/// Parses a top-k response: numbered guesses, final answer = the guess with
/// maximal confidence, ties broken by lowest index.
pub fn parse_topk(text: &str, k: u32) -> Result<Prediction> {
    assert!(k >= 2);
    let mut guesses = Vec::new();
    let mut clamped = false;
    for i in 1..=k {
        let answer = extract_tag(text, &format!("answer{i}"));
        let confidence = extract_tag(text, &format!("confidence{i}"));
        if let (Some(answer), Some(raw)) = (answer, confidence) {
            let conf = parse_confidence(&raw)?;
            clamped |= conf.clamped;
            guesses.push(Guess {
                answer,
                confidence: conf.value,
            });
        }
    }
    if guesses.is_empty() {
        return Err(Error::NoGuesses);
    }
    let mut best = 0;
    for (i, guess) in guesses.iter().enumerate() {
        if guess.confidence > guesses[best].confidence {
            best = i;
        }
    }
    Ok(Prediction {
        answer: guesses[best].answer.clone(),
        confidence: Some(guesses[best].confidence),
        clamped,
        abstained: false,
        guesses: Some(guesses),
    })
}

/// Extracts the round-2 reflection confidence; the paired answer comes from
/// round 1's parse with its confidence overridden by this value.
pub fn parse_reflection_confidence(text: &str) -> Result<Confidence> {
    let raw = extract_tag(text, "confidence").ok_or(Error::MissingConfidence)?;
    parse_confidence(&raw)
}
