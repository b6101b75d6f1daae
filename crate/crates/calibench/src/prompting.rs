//! Prompt template corpus and strategy-specific dialogue planning.
//!
//! Templates live as text assets under `assets/templates/<strategy>/` named
//! `<category>__<subtask>__<modality>.txt`, with a manifest.json listing the
//! required placeholders per template. Unlisted combinations fall back to the
//! generic template of the same strategy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{EvalItem, Modality};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Cot,
    TopK,
    SelfReflection,
    Vcap,
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StrategyKind::Cot => "cot",
            StrategyKind::TopK => "topk",
            StrategyKind::SelfReflection => "self_reflection",
            StrategyKind::Vcap => "vcap",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub kind: StrategyKind,
    /// Number of guesses, top-k only.
    pub k: Option<u32>,
}

impl Strategy {
    pub fn cot() -> Self {
        Strategy { kind: StrategyKind::Cot, k: None }
    }
    pub fn topk(k: u32) -> Self {
        assert!(k >= 1);
        Strategy { kind: StrategyKind::TopK, k: Some(k) }
    }
    pub fn self_reflection() -> Self {
        Strategy { kind: StrategyKind::SelfReflection, k: None }
    }
    pub fn vcap() -> Self {
        Strategy { kind: StrategyKind::Vcap, k: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
    pub required_placeholders: BTreeSet<String>,
}

impl PromptTemplate {
    /// Builds a template from a raw body, scanning `{placeholder}` markers.
    pub fn from_body(name: &str, body: &str) -> Result<Self> {
        let found = scan_placeholders(name, body)?;
        Ok(PromptTemplate {
            name: name.to_string(),
            body: body.to_string(),
            required_placeholders: found,
        })
    }
}

fn is_placeholder_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

fn scan_placeholders(name: &str, body: &str) -> Result<BTreeSet<String>> {
    let mut found = BTreeSet::new();
    let bytes = body.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let rest = &body[i + 1..];
            match rest.find(['{', '}']) {
                Some(j) if rest.as_bytes()[j] == b'}' && is_placeholder_name(&rest[..j]) => {
                    found.insert(rest[..j].to_string());
                    i += j + 2;
                    continue;
                }
                _ => {
                    return Err(Error::UnknownPlaceholder {
                        template: name.to_string(),
                        placeholder: rest.chars().take(24).collect(),
                    })
                }
            }
        }
        i += 1;
    }
    Ok(found)
}

/// Substitutes every placeholder exactly once; binding values pass through
/// verbatim (no re-scanning).
pub fn render(template: &PromptTemplate, bindings: &BTreeMap<String, String>) -> Result<String> {
    for required in &template.required_placeholders {
        if !bindings.contains_key(required) {
            return Err(Error::MissingBinding {
                template: template.name.clone(),
                placeholder: required.clone(),
            });
        }
    }
    for key in bindings.keys() {
        if !template.required_placeholders.contains(key) {
            return Err(Error::UnusedBinding {
                template: template.name.clone(),
                placeholder: key.clone(),
            });
        }
    }
    let mut out = String::with_capacity(template.body.len());
    let body = &template.body;
    let mut i = 0;
    while let Some(open) = body[i..].find('{') {
        let open = i + open;
        out.push_str(&body[i..open]);
        let close = body[open + 1..].find('}').expect("validated at load") + open + 1;
        let key = &body[open + 1..close];
        out.push_str(&bindings[key]);
        i = close + 1;
    }
    out.push_str(&body[i..]);
    Ok(out)
}

/// One message-building step of a dialogue plan.
#[derive(Debug, Clone)]
pub struct PlanStep {
    pub template: PromptTemplate,
    pub carries_attachments: bool,
    /// Placeholders bound from the prior round's output (step >= 2 only).
    pub bindings_from_prior: BTreeSet<String>,
}

#[derive(Debug, Clone)]
pub struct DialoguePlan {
    pub strategy: Strategy,
    pub steps: Vec<PlanStep>,
}

/// Immutable template registry, loaded once at startup.
pub struct TemplateLibrary {
    templates: BTreeMap<String, PromptTemplate>,
}

const GENERIC_KEY: &str = "generic__generic__any";
const REFLECTION_SHARED: &str = "self_reflection_2nd/shared__shared__any";

impl TemplateLibrary {
    /// Loads the crate's bundled asset directory.
    pub fn bundled() -> Result<Self> {
        Self::load(&Self::bundled_dir())
    }

    pub fn bundled_dir() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/templates")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let manifest: BTreeMap<String, BTreeSet<String>> =
            serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        let mut templates = BTreeMap::new();
        for (rel, declared) in manifest {
            let body = fs::read_to_string(dir.join(&rel))?;
            let name = rel.trim_end_matches(".txt").to_string();
            let template = PromptTemplate::from_body(&name, &body)?;
            if template.required_placeholders != declared {
                return Err(Error::BadTemplate {
                    template: name,
                    message: format!(
                        "manifest placeholders {declared:?} disagree with body {:?}",
                        template.required_placeholders
                    ),
                });
            }
            templates.insert(name, template);
        }
        Ok(TemplateLibrary { templates })
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.values()
    }

    fn lookup(&self, strategy_dir: &str, item: &EvalItem) -> Result<&PromptTemplate> {
        let exact = format!(
            "{strategy_dir}/{}__{}__{}",
            item.category,
            item.subtask,
            item.modality.as_str()
        );
        self.templates
            .get(&exact)
            .or_else(|| self.templates.get(&format!("{strategy_dir}/{GENERIC_KEY}")))
            .ok_or_else(|| Error::NoTemplate {
                strategy: strategy_dir.to_string(),
                category: item.category.clone(),
                subtask: item.subtask.clone(),
                modality: item.modality.as_str().to_string(),
            })
    }

    fn reflection_shared(&self) -> Result<&PromptTemplate> {
        self.templates
            .get(REFLECTION_SHARED)
            .ok_or_else(|| Error::NoTemplate {
                strategy: "self_reflection_2nd".into(),
                category: "shared".into(),
                subtask: "shared".into(),
                modality: "any".into(),
            })
    }
}

/// Builds the ordered message plan for a (strategy, item) combination.
pub fn plan(library: &TemplateLibrary, strategy: Strategy, item: &EvalItem) -> Result<DialoguePlan> {
    let carries = item.modality != Modality::Text;
    let steps = match strategy.kind {
        StrategyKind::Cot => vec![PlanStep {
            template: library.lookup("vanilla", item)?.clone(),
            carries_attachments: carries,
            bindings_from_prior: BTreeSet::new(),
        }],
        StrategyKind::TopK => vec![PlanStep {
            template: library.lookup("topk", item)?.clone(),
            carries_attachments: carries,
            bindings_from_prior: BTreeSet::new(),
        }],
        StrategyKind::SelfReflection => vec![
            PlanStep {
                template: library.lookup("self_reflection_1st", item)?.clone(),
                carries_attachments: carries,
                bindings_from_prior: BTreeSet::new(),
            },
            PlanStep {
                template: library.reflection_shared()?.clone(),
                carries_attachments: false,
                bindings_from_prior: ["problem", "solution"].iter().map(|s| s.to_string()).collect(),
            },
        ],
        StrategyKind::Vcap => {
            if item.modality == Modality::Text {
                return Err(Error::VcapOnTextItem { id: item.id.clone() });
            }
            vec![
                PlanStep {
                    template: library.lookup("vcap_1st", item)?.clone(),
                    carries_attachments: true,
                    bindings_from_prior: BTreeSet::new(),
                },
                PlanStep {
                    template: library.lookup("vcap_2nd", item)?.clone(),
                    carries_attachments: true,
                    bindings_from_prior: ["description"].iter().map(|s| s.to_string()).collect(),
                },
            ]
        }
    };
    Ok(DialoguePlan { strategy, steps })
}

/// Fills the item-derived placeholders of a step's template. Placeholders in
/// `bindings_from_prior` are left for [`bind_second_round`].
pub fn item_bindings(item: &EvalItem, step: &PlanStep) -> Result<BTreeMap<String, String>> {
    let mut bindings = BTreeMap::new();
    for name in &step.template.required_placeholders {
        if step.bindings_from_prior.contains(name) {
            continue;
        }
        let value = match name.as_str() {
            "question" | "problem" => item.question_text.clone().unwrap_or_default(),
            "options" => options_block(item),
            "text" => item.inline_text().unwrap_or_default().to_string(),
            "domain" => item.domain_suffix.clone().unwrap_or_default(),
            other => {
                if let Some(i) = other
                    .strip_prefix("option")
                    .and_then(|n| n.parse::<usize>().ok())
                {
                    item.options
                        .as_ref()
                        .and_then(|opts| opts.get(i - 1))
                        .cloned()
                        .ok_or_else(|| Error::MissingBinding {
                            template: step.template.name.clone(),
                            placeholder: other.to_string(),
                        })?
                } else {
                    return Err(Error::MissingBinding {
                        template: step.template.name.clone(),
                        placeholder: other.to_string(),
                    });
                }
            }
        };
        bindings.insert(name.clone(), value);
    }
    Ok(bindings)
}

fn options_block(item: &EvalItem) -> String {
    match &item.options {
        Some(opts) => item
            .option_labels()
            .iter()
            .zip(opts)
            .map(|(label, text)| format!("{label}. {text}"))
            .collect::<Vec<_>>()
            .join("\n"),
        None => String::new(),
    }
}

/// Computes the round-2 bindings of a two-step plan from round 1's rendered
/// prompt and full output. VCAP injects the whole first output (reasoning and
/// confidence tag included) as the description.
pub fn bind_second_round(
    plan: &DialoguePlan,
    first_prompt: &str,
    first_output: &str,
) -> Result<BTreeMap<String, String>> {
    if plan.steps.len() != 2 {
        return Err(Error::InvalidPlan(format!(
            "second-round binding needs a 2-step plan, got {} steps",
            plan.steps.len()
        )));
    }
    if first_output.is_empty() {
        return Err(Error::EmptyFirstRound);
    }
    let mut bindings = BTreeMap::new();
    match plan.strategy.kind {
        StrategyKind::Vcap => {
            bindings.insert("description".to_string(), first_output.to_string());
        }
        StrategyKind::SelfReflection => {
            bindings.insert("problem".to_string(), first_prompt.to_string());
            bindings.insert("solution".to_string(), first_output.to_string());
        }
        other => {
            return Err(Error::InvalidPlan(format!(
                "strategy {other} has no second round"
            )))
        }
    }
    Ok(bindings)
}
