//! Core value types shared across the pipeline, plus prompt canonicalization
//! and label parsing of free-text model replies.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::text;

/// Canonical class label string.
pub type Label = String;

/// Hex-encoded SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptRole {
    DescriptionGen,
    Classifier,
}

impl PromptRole {
    fn tag(self) -> &'static str {
        match self {
            PromptRole::DescriptionGen => "description-gen",
            PromptRole::Classifier => "classifier",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Seed,
    Diversify,
    Optimize,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Seed => "seed",
            Phase::Diversify => "diversify",
            Phase::Optimize => "optimize",
        };
        f.write_str(s)
    }
}

/// A versioned prompt. The id is a content hash of role and canonical text, so
/// two prompts with the same role and text always share an id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub role: PromptRole,
    pub text: String,
    pub parent_id: Option<String>,
    pub created_iteration: u32,
    pub phase: Phase,
}

impl Prompt {
    /// Builds a root prompt (no parent) after canonicalizing `text`.
    pub fn new(role: PromptRole, text: &str) -> Result<Self> {
        let text = canonicalize_prompt(text)?;
        Ok(Prompt {
            id: prompt_id(role, &text),
            role,
            text,
            parent_id: None,
            created_iteration: 0,
            phase: Phase::Seed,
        })
    }

    pub fn seed(text: &str) -> Result<Self> {
        Self::new(PromptRole::DescriptionGen, text)
    }

    pub fn classifier(text: &str) -> Result<Self> {
        Self::new(PromptRole::Classifier, text)
    }

    /// Derives a child prompt of `self` created at `iteration` in `phase`.
    pub fn child(&self, text: &str, iteration: u32, phase: Phase) -> Result<Self> {
        let text = canonicalize_prompt(text)?;
        Ok(Prompt {
            id: prompt_id(self.role, &text),
            role: self.role,
            text,
            parent_id: Some(self.id.clone()),
            created_iteration: iteration,
            phase,
        })
    }

    pub fn short_id(&self) -> &str {
        &self.id[..12.min(self.id.len())]
    }
}

/// Content hash for a prompt: SHA-256 over role tag and canonical text.
pub fn prompt_id(role: PromptRole, canonical_text: &str) -> String {
    let mut h = Sha256::new();
    h.update(role.tag().as_bytes());
    h.update([0u8]);
    h.update(canonical_text.as_bytes());
    hex::encode(h.finalize())
}

/// Normalizes line endings, strips trailing whitespace on every line, trims
/// leading/trailing blank lines and collapses runs of blank lines to one.
pub fn canonicalize_prompt(text: &str) -> Result<String> {
    let unified = text.replace("\r\n", "\n").replace('\r', "\n");
    let mut out: Vec<&str> = Vec::new();
    let mut blank_run = 0usize;
    for line in unified.split('\n') {
        let line = line.trim_end();
        if line.is_empty() {
            blank_run += 1;
            continue;
        }
        if !out.is_empty() && blank_run > 0 {
            out.push("");
        }
        blank_run = 0;
        out.push(line);
    }
    if out.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    Ok(out.join("\n"))
}

/// Tracks every prompt produced in a run and rejects id collisions with
/// differing content.
#[derive(Debug, Default, Clone)]
pub struct PromptHistory {
    prompts: Vec<Prompt>,
    index: BTreeMap<String, usize>,
}

impl PromptHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts `p`. Returns `Ok(false)` if an identical prompt is already
    /// present, `Ok(true)` if newly inserted.
    pub fn insert(&mut self, p: Prompt) -> Result<bool> {
        if let Some(&i) = self.index.get(&p.id) {
            let existing = &self.prompts[i];
            if existing.role != p.role || existing.text != p.text {
                return Err(Error::PromptCollision(p.id));
            }
            return Ok(false);
        }
        if let Some(parent) = &p.parent_id {
            if !self.index.contains_key(parent) {
                return Err(Error::UnknownParent(parent.clone()));
            }
        }
        self.index.insert(p.id.clone(), self.prompts.len());
        self.prompts.push(p);
        Ok(true)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&Prompt> {
        self.index.get(id).map(|&i| &self.prompts[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Prompt> {
        self.prompts.iter()
    }

    pub fn as_slice(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// Walks parent links from `id` to the root, returning ids from `id` up.
    pub fn lineage(&self, id: &str) -> Vec<String> {
        let mut chain = Vec::new();
        let mut cur = self.get(id);
        while let Some(p) = cur {
            chain.push(p.id.clone());
            cur = p.parent_id.as_deref().and_then(|pid| self.get(pid));
        }
        chain
    }

    pub fn from_prompts(prompts: Vec<Prompt>) -> Result<Self> {
        let mut h = Self::new();
        for p in prompts {
            h.insert(p)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image_ref: String,
    pub label: Label,
    pub split: Split,
    pub dataset: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub labels: Vec<Label>,
    #[serde(default)]
    pub aliases: BTreeMap<String, Label>,
}

impl LabelSet {
    /// Validates and builds a label set. Aliases are matched case-insensitively.
    pub fn new(labels: Vec<Label>, aliases: BTreeMap<String, Label>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::InvalidLabelSet(
                "at least two labels required".into(),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in &labels {
            if !seen.insert(l.to_lowercase()) {
                return Err(Error::InvalidLabelSet(format!("duplicate label {l:?}")));
            }
        }
        let mut norm = BTreeMap::new();
        for (alias, canon) in aliases {
            if !labels.contains(&canon) {
                return Err(Error::InvalidLabelSet(format!(
                    "alias {alias:?} targets unknown label {canon:?}"
                )));
            }
            let key = alias.to_lowercase();
            if let Some(prev) = norm.get(&key) {
                if prev != &canon {
                    return Err(Error::InvalidLabelSet(format!(
                        "alias {alias:?} maps to both {prev:?} and {canon:?}"
                    )));
                }
            }
            if let Some(own) = labels.iter().find(|l| l.to_lowercase() == key) {
                if own != &canon {
                    return Err(Error::InvalidLabelSet(format!(
                        "alias {alias:?} shadows label {own:?}"
                    )));
                }
            }
            norm.insert(key, canon);
        }
        Ok(LabelSet {
            labels,
            aliases: norm,
        })
    }

    pub fn plain(labels: &[&str]) -> Result<Self> {
        Self::new(
            labels.iter().map(|s| s.to_string()).collect(),
            BTreeMap::new(),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Resolves a label name or alias (case-insensitive) to its canonical label.
    pub fn resolve(&self, name: &str) -> Option<&Label> {
        let key = name.trim().to_lowercase();
        self.labels
            .iter()
            .find(|l| l.to_lowercase() == key)
            .or_else(|| self.aliases.get(&key))
    }

    /// Every surface form (canonical names and aliases) with its canonical label.
    fn surface_forms(&self) -> impl Iterator<Item = (&str, &Label)> {
        self.labels
            .iter()
            .map(|l| (l.as_str(), l))
            .chain(self.aliases.iter().map(|(a, l)| (a.as_str(), l)))
    }
}

/// A label prediction parsed from model output.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Predicted {
    Label(Label),
    ParseFailure,
}

impl Predicted {
    pub fn label(&self) -> Option<&str> {
        match self {
            Predicted::Label(l) => Some(l),
            Predicted::ParseFailure => None,
        }
    }
}

impl fmt::Display for Predicted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicted::Label(l) => f.write_str(l),
            Predicted::ParseFailure => f.write_str("<parse-failure>"),
        }
    }
}

/// Extracts a label from a free-text reply.
///
/// The last line of the form `ANSWER: <label>` wins. Without such a line the
/// reply is accepted only if exactly one label (by name or alias) is mentioned
/// as a whole word.
pub fn parse_label(raw_output: &str, labels: &LabelSet) -> Predicted {
    let mut answer: Option<&str> = None;
    for line in raw_output.lines() {
        if let Some(rest) = answer_payload(line) {
            answer = Some(rest);
        }
    }
    if let Some(payload) = answer {
        let cleaned = payload
            .trim()
            .trim_matches(|c: char| !c.is_alphanumeric() && c != ' ' && c != '-' && c != '_');
        return match labels.resolve(cleaned) {
            Some(l) => Predicted::Label(l.clone()),
            None => Predicted::ParseFailure,
        };
    }
    let tokens = text::tokenize(raw_output);
    let mut found: Vec<&Label> = Vec::new();
    for (form, canon) in labels.surface_forms() {
        let needle = text::tokenize(form);
        if !needle.is_empty() && text::contains_seq(&tokens, &needle) && !found.contains(&canon) {
            found.push(canon);
        }
    }
    match found.as_slice() {
        [only] => Predicted::Label((*only).clone()),
        _ => Predicted::ParseFailure,
    }
}

fn answer_payload(line: &str) -> Option<&str> {
    let lower = line.to_ascii_lowercase();
    let pos = lower.find("answer:")?;
    // ASCII lowercase preserves byte offsets.
    Some(&line[pos + "answer:".len()..])
}

pub const DESCRIPTION_DELIMITER: &str = "IMAGE DESCRIPTION:\n";

/// Concatenates the classifier prompt with a generated description.
pub fn compose_classification_input(p: &Prompt, description: &str) -> Result<String> {
    if p.role != PromptRole::Classifier {
        return Err(Error::RoleMismatch {
            expected: PromptRole::Classifier,
            found: p.role,
        });
    }
    Ok(format!(
        "{}\n\n{}{}",
        p.text, DESCRIPTION_DELIMITER, description
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub sample_id: String,
    pub prompt_id: String,
    pub text: String,
    pub backend_id: String,
    pub params_hash: String,
}

impl Description {
    pub fn id(&self) -> String {
        let key = format!(
            "{}\0{}\0{}\0{}",
            self.sample_id, self.prompt_id, self.backend_id, self.params_hash
        );
        sha256_hex(key.as_bytes())[..16].to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub true_label: Label,
    pub predicted: Predicted,
    pub raw_output: String,
    pub correct: bool,
    pub used_description_id: Option<String>,
    /// Set when no description could be produced for the sample.
    #[serde(default)]
    pub description_unavailable: bool,
}

impl Prediction {
    pub fn new(
        sample_id: &str,
        true_label: &str,
        predicted: Predicted,
        raw_output: String,
        used_description_id: Option<String>,
    ) -> Self {
        let correct = matches!(&predicted, Predicted::Label(l) if l == true_label);
        Prediction {
            sample_id: sample_id.to_string(),
            true_label: true_label.to_string(),
            predicted,
            raw_output,
            correct,
            used_description_id,
            description_unavailable: false,
        }
    }

    pub fn unavailable(sample_id: &str, true_label: &str, reason: String) -> Self {
        Prediction {
            sample_id: sample_id.to_string(),
            true_label: true_label.to_string(),
            predicted: Predicted::ParseFailure,
            raw_output: reason,
            correct: false,
            used_description_id: None,
            description_unavailable: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCase {
    pub sample_id: String,
    pub true_label: Label,
    pub predicted: Predicted,
    pub description_id: Option<String>,
    /// Description text shown to the model during reflection.
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorSet {
    pub prompt_id: String,
    pub cases: Vec<ErrorCase>,
}

impl ErrorSet {
    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }
}
