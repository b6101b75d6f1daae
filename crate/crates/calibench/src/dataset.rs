//! Benchmark item ingestion: canonical JSONL loading, modality pairing for
//! semantically-aligned items, and deterministic video frame sampling.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Mcq,
    OpenEnded,
    Factuality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalConfig {
    General,
    EmbeddedInstruction,
    SemanticallyAligned,
}

impl EvalConfig {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalConfig::General => "general",
            EvalConfig::EmbeddedInstruction => "embedded_instruction",
            EvalConfig::SemanticallyAligned => "semantically_aligned",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
    Video,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
            Modality::Video => "video",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttachmentKind {
    ImageFile,
    FrameDir,
    InlineText,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attachment {
    pub kind: AttachmentKind,
    /// File path for image_file/frame_dir, literal text for inline_text.
    #[serde(rename = "path")]
    pub path_or_text: String,
    #[serde(default)]
    pub media_type: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    Letter,
    ExactNormalized,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAnswer {
    pub canonical: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    pub match_mode: MatchMode,
}

/// One benchmark question in the canonical schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub task_kind: TaskKind,
    pub eval_config: EvalConfig,
    #[serde(rename = "question", default, skip_serializing_if = "Option::is_none")]
    pub question_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(default)]
    pub attachments: Vec<Attachment>,
    pub modality: Modality,
    pub gold: GoldAnswer,
    pub category: String,
    pub subtask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
    /// Optional " defined on [a, b]" suffix for math templates ({domain}).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_suffix: Option<String>,
    /// Total frames available for video items; filled from the frames.count
    /// sidecar at load time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_count: Option<u32>,
}

impl EvalItem {
    /// Option labels are the first |options| uppercase letters.
    pub fn option_labels(&self) -> Vec<char> {
        let n = self.options.as_ref().map_or(0, Vec::len);
        ('A'..='J').take(n).collect()
    }

    pub fn inline_text(&self) -> Option<&str> {
        self.attachments
            .iter()
            .find(|a| a.kind == AttachmentKind::InlineText)
            .map(|a| a.path_or_text.as_str())
    }
}

/// An image/text pair of semantically equivalent items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedItem {
    pub pair_id: String,
    pub image_variant: EvalItem,
    pub text_variant: EvalItem,
}

/// Pairing result; orphans are reported, never silently dropped.
#[derive(Debug, Clone, Default)]
pub struct PairingOutcome {
    pub pairs: Vec<PairedItem>,
    pub orphans: Vec<String>,
}

/// Loads items from a line-delimited JSON file, resolving relative attachment
/// paths against the file's directory and validating all item invariants.
pub fn load_items(path: &Path, config: EvalConfig) -> Result<Vec<EvalItem>> {
    let file = fs::File::open(path)?;
    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut items = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut item: EvalItem =
            serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                path: path.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            })?;
        resolve_attachments(&mut item, base_dir)?;
        validate_item(&item, config)?;
        items.push(item);
    }
    Ok(items)
}

fn resolve_attachments(item: &mut EvalItem, base_dir: &Path) -> Result<()> {
    for att in &mut item.attachments {
        if att.kind == AttachmentKind::InlineText {
            continue;
        }
        let p = Path::new(&att.path_or_text);
        let resolved = if p.is_absolute() {
            p.to_path_buf()
        } else {
            base_dir.join(p)
        };
        if !resolved.exists() {
            return Err(Error::MissingAttachment {
                id: item.id.clone(),
                path: resolved,
            });
        }
        att.path_or_text = resolved.to_string_lossy().into_owned();
        if att.kind == AttachmentKind::FrameDir {
            item.frame_count = Some(read_frame_count(&item.id, &resolved)?);
        }
    }
    Ok(())
}

fn read_frame_count(id: &str, dir: &Path) -> Result<u32> {
    let sidecar = dir.join("frames.count");
    let text = fs::read_to_string(&sidecar).map_err(|_| Error::MissingAttachment {
        id: id.to_string(),
        path: sidecar.clone(),
    })?;
    let count: u32 = text.trim().parse().map_err(|_| Error::InvalidItem {
        id: id.to_string(),
        message: format!("frames.count is not a positive integer: {:?}", text.trim()),
    })?;
    if count == 0 {
        return Err(Error::InvalidItem {
            id: id.to_string(),
            message: "frames.count must be >= 1".into(),
        });
    }
    Ok(count)
}

fn validate_item(item: &EvalItem, config: EvalConfig) -> Result<()> {
    let fail = |message: String| {
        Err(Error::InvalidItem {
            id: item.id.clone(),
            message,
        })
    };
    if item.eval_config != config {
        return fail(format!(
            "eval_config {} does not match requested {}",
            item.eval_config.as_str(),
            config.as_str()
        ));
    }
    if item.gold.canonical.is_empty() {
        return fail("gold.canonical must be non-empty".into());
    }
    if item.gold.match_mode == MatchMode::Numeric {
        let ok = item
            .gold
            .canonical
            .parse::<f64>()
            .map(f64::is_finite)
            .unwrap_or(false);
        if !ok {
            return fail("numeric gold must parse as a finite number".into());
        }
    }
    if item.task_kind == TaskKind::Mcq {
        let n = item.options.as_ref().map_or(0, Vec::len);
        if !(2..=10).contains(&n) {
            return fail(format!("mcq items need 2-10 options, got {n}"));
        }
    }
    if item.eval_config == EvalConfig::EmbeddedInstruction {
        if item.question_text.is_some() {
            return fail("embedded_instruction items must not carry question text".into());
        }
        let has_image = item
            .attachments
            .iter()
            .any(|a| a.kind == AttachmentKind::ImageFile);
        if !has_image {
            return fail("embedded_instruction items need at least one image attachment".into());
        }
    }
    match item.modality {
        Modality::Video => {
            let has_frames = item
                .attachments
                .iter()
                .any(|a| a.kind == AttachmentKind::FrameDir);
            if !has_frames || item.frame_count.is_none() {
                return fail("video items need a frame-directory attachment".into());
            }
        }
        Modality::Image | Modality::Text => {}
    }
    for att in &item.attachments {
        if att.kind == AttachmentKind::InlineText && att.path_or_text.is_empty() {
            return fail("inline_text attachment must be non-empty".into());
        }
    }
    Ok(())
}

/// Pairs semantically-aligned items that share a pair_id into image/text
/// PairedItems. Items without a partner end up in the orphan report.
pub fn pair_modalities(items: &[EvalItem]) -> Result<PairingOutcome> {
    let mut groups: BTreeMap<String, Vec<&EvalItem>> = BTreeMap::new();
    let mut outcome = PairingOutcome::default();
    for item in items {
        if item.eval_config != EvalConfig::SemanticallyAligned {
            continue;
        }
        match &item.pair_id {
            Some(pid) => groups.entry(pid.clone()).or_default().push(item),
            None => outcome.orphans.push(item.id.clone()),
        }
    }
    for (pid, members) in groups {
        match members.as_slice() {
            [only] => outcome.orphans.push(only.id.clone()),
            [a, b] => {
                let (img, txt) = match (a.modality, b.modality) {
                    (Modality::Image, Modality::Text) => (a, b),
                    (Modality::Text, Modality::Image) => (b, a),
                    _ => {
                        return Err(Error::Pairing(format!(
                            "pair {pid}: variants must be one image and one text item"
                        )))
                    }
                };
                if img.gold != txt.gold
                    || img.category != txt.category
                    || img.subtask != txt.subtask
                {
                    return Err(Error::Pairing(format!(
                        "pair {pid}: variants disagree on gold/category/subtask"
                    )));
                }
                outcome.pairs.push(PairedItem {
                    pair_id: pid,
                    image_variant: (*img).clone(),
                    text_variant: (*txt).clone(),
                });
            }
            more => {
                return Err(Error::Pairing(format!(
                    "pair {pid}: {} items share one pair_id",
                    more.len()
                )))
            }
        }
    }
    Ok(outcome)
}

/// Deterministic uniform frame selection: index i = floor(i * total / k).
///
/// Duplicates are expected when total_frames < k so short videos stay
/// evaluable.
pub fn sample_frame_indices(total_frames: u32, k: u32) -> Vec<u32> {
    assert!(total_frames >= 1 && k >= 1);
    let total = u64::from(total_frames);
    (0..u64::from(k)).map(|i| (i * total / u64::from(k)) as u32).collect()
}

/// Sorted frame-image paths inside a frame directory (the frames.count
/// sidecar is skipped). Zero-padded names make lexicographic order temporal.
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().map_or(false, |n| n != "frames.count"))
        .collect();
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn fixture(name: &str) -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("tests/fixtures/data")
            .join(name)
    }

    #[test]
    fn loads_mcq_items_in_file_order() {
        let items = load_items(&fixture("general.jsonl"), EvalConfig::General).unwrap();
        assert!(items.len() >= 3);
        let first_ids: Vec<&str> = items.iter().take(3).map(|i| i.id.as_str()).collect();
        assert_eq!(first_ids, ["gen-001", "gen-002", "gen-003"]);
    }

    #[test]
    fn missing_gold_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = r#"{"id":"a","task_kind":"open_ended","eval_config":"general","question":"q","attachments":[],"modality":"text","gold":{"canonical":"1","match_mode":"numeric"},"category":"c","subtask":"s"}"#;
        let bad = r#"{"id":"b","task_kind":"open_ended","eval_config":"general","question":"q","attachments":[],"modality":"text","category":"c","subtask":"s"}"#;
        let mut f = fs::File::create(&path).unwrap();
        writeln!(f, "{good}").unwrap();
        writeln!(f, "{bad}").unwrap();
        let err = load_items(&path, EvalConfig::General).unwrap_err();
        match err {
            Error::MalformedLine { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn missing_attachment_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("items.jsonl");
        let line = r#"{"id":"x","task_kind":"open_ended","eval_config":"general","question":"q","attachments":[{"kind":"image_file","path":"nope.png","media_type":"image/png"}],"modality":"image","gold":{"canonical":"1","match_mode":"numeric"},"category":"c","subtask":"s"}"#;
        fs::write(&path, format!("{line}\n")).unwrap();
        let err = load_items(&path, EvalConfig::General).unwrap_err();
        assert!(matches!(err, Error::MissingAttachment { .. }));
    }

    #[test]
    fn mcq_option_count_is_validated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("items.jsonl");
        let line = r#"{"id":"m","task_kind":"mcq","eval_config":"general","question":"q","options":["only one"],"attachments":[],"modality":"text","gold":{"canonical":"A","match_mode":"letter"},"category":"c","subtask":"s"}"#;
        fs::write(&path, format!("{line}\n")).unwrap();
        let err = load_items(&path, EvalConfig::General).unwrap_err();
        assert!(matches!(err, Error::InvalidItem { ref id, .. } if id == "m"));
    }

    #[test]
    fn load_serialize_load_round_trips() {
        let items = load_items(&fixture("general.jsonl"), EvalConfig::General).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("round.jsonl");
        let mut f = fs::File::create(&path).unwrap();
        for item in &items {
            writeln!(f, "{}", serde_json::to_string(item).unwrap()).unwrap();
        }
        let reloaded = load_items(&path, EvalConfig::General).unwrap();
        assert_eq!(items, reloaded);
    }

    #[test]
    fn pairing_empty_input() {
        let outcome = pair_modalities(&[]).unwrap();
        assert!(outcome.pairs.is_empty() && outcome.orphans.is_empty());
    }

    #[test]
    fn pairing_two_full_pairs_and_two_orphans() {
        let items = load_items(&fixture("aligned.jsonl"), EvalConfig::SemanticallyAligned).unwrap();
        assert_eq!(items.len(), 6);
        let outcome = pair_modalities(&items).unwrap();
        assert_eq!(outcome.pairs.len(), 2);
        assert_eq!(outcome.orphans, vec!["ali-005", "ali-006"]);
        // count conservation for aligned items
        assert_eq!(outcome.pairs.len() * 2 + outcome.orphans.len(), items.len());
        for pair in &outcome.pairs {
            assert_eq!(pair.image_variant.modality, Modality::Image);
            assert_eq!(pair.text_variant.modality, Modality::Text);
        }
    }

    #[test]
    fn frame_indices_identity_and_stride() {
        assert_eq!(sample_frame_indices(32, 32), (0..32).collect::<Vec<_>>());
        let strided = sample_frame_indices(320, 32);
        assert_eq!(strided, (0..32).map(|i| i * 10).collect::<Vec<_>>());
    }

    #[test]
    fn frame_indices_short_video_duplicates() {
        let got = sample_frame_indices(10, 32);
        let expected: Vec<u32> = (0..32u64).map(|i| (i * 10 / 32) as u32).collect();
        assert_eq!(got, expected);
        assert_eq!(got[0], 0);
        assert_eq!(*got.last().unwrap(), 9);
        assert!(got.windows(2).all(|w| w[0] <= w[1]));
    }
}
