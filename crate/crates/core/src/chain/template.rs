//! Prompt templates for the three chain stages and label extraction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::model::{Label, LabelSet};
use crate::{Error, Result};

/// Default extraction rule: the last `Final answer: <label>` line.
pub const DEFAULT_EXTRACTION: &str = r"(?im)^\s*final answer\s*:\s*([A-Za-z0-9_\-]+)";

pub const PLACEHOLDERS: [&str; 6] = ["data_ref", "x", "z", "h_tilde", "c", "task_T"];

static PLACEHOLDER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("static pattern"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainStage {
    Comprehension,
    Analysis,
    Reflection,
}

impl ChainStage {
    pub const ALL: [ChainStage; 3] = [
        ChainStage::Comprehension,
        ChainStage::Analysis,
        ChainStage::Reflection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ChainStage::Comprehension => "comprehension",
            ChainStage::Analysis => "analysis",
            ChainStage::Reflection => "reflection",
        }
    }

    /// Placeholders a template for this stage must contain.
    pub fn required(self) -> &'static [&'static str] {
        match self {
            ChainStage::Comprehension => &["data_ref"],
            ChainStage::Analysis => &["x", "task_T"],
            ChainStage::Reflection => &["z", "h_tilde", "c"],
        }
    }
}

impl fmt::Display for ChainStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub stage: ChainStage,
    text: String,
    placeholders: BTreeSet<String>,
    extraction: Regex,
}

impl PromptTemplate {
    pub fn new(stage: ChainStage, text: impl Into<String>) -> Result<Self> {
        Self::with_extraction(stage, text, DEFAULT_EXTRACTION)
    }

    /// `pattern` must have one capture group holding the label.
    pub fn with_extraction(stage: ChainStage, text: impl Into<String>, pattern: &str) -> Result<Self> {
        let text = text.into();
        let placeholders: BTreeSet<String> = PLACEHOLDER_RE
            .captures_iter(&text)
            .map(|c| c[1].to_string())
            .collect();
        if let Some(unknown) = placeholders.iter().find(|p| !PLACEHOLDERS.contains(&p.as_str())) {
            return Err(Error::invalid(format!(
                "{stage} template uses unknown placeholder {{{unknown}}}"
            )));
        }
        let missing: Vec<&str> = stage
            .required()
            .iter()
            .copied()
            .filter(|p| !placeholders.contains(*p))
            .collect();
        if !missing.is_empty() {
            return Err(Error::invalid(format!(
                "{stage} template is missing placeholders {missing:?}"
            )));
        }
        let extraction = Regex::new(pattern).map_err(|e| Error::invalid(format!("extraction rule: {e}")))?;
        if extraction.captures_len() < 2 {
            return Err(Error::invalid("extraction rule needs a capture group"));
        }
        Ok(PromptTemplate {
            stage,
            text,
            placeholders,
            extraction,
        })
    }

    pub fn load(stage: ChainStage, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(stage, text)
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn placeholders(&self) -> &BTreeSet<String> {
        &self.placeholders
    }

    /// Substitutes every placeholder. Bindings must cover all of them;
    /// substituted text is not rescanned.
    pub fn render(&self, bindings: &BTreeMap<&str, &str>) -> Result<String> {
        if let Some(p) = self.placeholders.iter().find(|p| !bindings.contains_key(p.as_str())) {
            return Err(Error::invalid(format!(
                "no binding for {{{p}}} in {} template",
                self.stage
            )));
        }
        Ok(PLACEHOLDER_RE
            .replace_all(&self.text, |c: &regex::Captures| bindings[&c[1]].to_string())
            .into_owned())
    }

    /// Label named by the last match of the extraction rule, compared
    /// case-insensitively against the label set.
    pub fn extract(&self, response: &str, labels: &LabelSet) -> Result<Label> {
        extract_label(&self.extraction, response, labels)
    }
}

pub fn extract_label(rule: &Regex, response: &str, labels: &LabelSet) -> Result<Label> {
    let raw = rule
        .captures_iter(response)
        .last()
        .and_then(|c| c.get(1))
        .map(|m| m.as_str().trim().to_string())
        .ok_or_else(|| Error::Extraction("no answer line in response".into()))?;
    labels
        .labels
        .iter()
        .find(|l| l.as_str().eq_ignore_ascii_case(&raw))
        .cloned()
        .ok_or_else(|| Error::Extraction(format!("`{raw}` is not in the label set")))
}

/// Templates for all three stages.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub comprehension: PromptTemplate,
    pub analysis: PromptTemplate,
    pub reflection: PromptTemplate,
}

impl TemplateSet {
    /// The prompts shipped with the crate.
    pub fn builtin() -> Self {
        TemplateSet {
            comprehension: PromptTemplate::new(
                ChainStage::Comprehension,
                include_str!("../../assets/prompts/comprehension.txt"),
            )
            .expect("builtin template"),
            analysis: PromptTemplate::new(
                ChainStage::Analysis,
                include_str!("../../assets/prompts/analysis.txt"),
            )
            .expect("builtin template"),
            reflection: PromptTemplate::new(
                ChainStage::Reflection,
                include_str!("../../assets/prompts/reflection.txt"),
            )
            .expect("builtin template"),
        }
    }

    /// Reads `comprehension.txt`, `analysis.txt` and `reflection.txt` from
    /// a directory.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let load = |s: ChainStage| PromptTemplate::load(s, dir.join(format!("{}.txt", s.as_str())));
        Ok(TemplateSet {
            comprehension: load(ChainStage::Comprehension)?,
            analysis: load(ChainStage::Analysis)?,
            reflection: load(ChainStage::Reflection)?,
        })
    }

    pub fn get(&self, stage: ChainStage) -> &PromptTemplate {
        match stage {
            ChainStage::Comprehension => &self.comprehension,
            ChainStage::Analysis => &self.analysis,
            ChainStage::Reflection => &self.reflection,
        }
    }
}
