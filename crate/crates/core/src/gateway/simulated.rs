//! Deterministic simulated model over the synthetic testbed.
//!
//! * describe: the sorted, comma-joined sample features whose group keyword
//!   the prompt mentions, or a fixed stub when none match.
//! * classify: each label scores the number of its dictionary features named
//!   in the composed input; ties go to the bias label.
//! * reflect: per error case, the sample's own-class features the prompt does
//!   not name.
//! * modify: appends up to `max_additions` features named by the reflection
//!   and missing from the prompt; the diversify phase also adds one synonym
//!   for each.
//! * embed: indicator vector over the testbed lexicon, zero-padded to 768.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    Backend, GatewayError, GatewayRequest, ImagePart, ReflectionCase, RequestKind, EMBEDDING_DIM,
};
use crate::datasets::testbed::{SimulatedSample, Testbed, STUB_DESCRIPTION};
use crate::text::{self, Tokens};

pub const NO_MISSING_CRITERIA: &str = "no missing criteria identified";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatedConfig {
    /// Tie-break label; defaults to the last (malignant) class.
    pub bias_label: Option<String>,
    pub max_additions: usize,
}

impl Default for SimulatedConfig {
    fn default() -> Self {
        SimulatedConfig {
            bias_label: None,
            max_additions: 2,
        }
    }
}

pub struct SimulatedBackend {
    testbed: Arc<Testbed>,
    bias_label: String,
    max_additions: usize,
}

impl SimulatedBackend {
    pub fn new(testbed: Arc<Testbed>, config: &SimulatedConfig) -> Result<Self, GatewayError> {
        let bias_label = match &config.bias_label {
            Some(b) if testbed.config.classes.contains(b) => b.clone(),
            Some(b) => {
                return Err(GatewayError::InvalidRequest(format!(
                    "bias label {b:?} is not a testbed class"
                )))
            }
            None => testbed
                .config
                .classes
                .last()
                .cloned()
                .expect("testbed has classes"),
        };
        Ok(SimulatedBackend {
            testbed,
            bias_label,
            max_additions: config.max_additions.max(1),
        })
    }

    pub fn testbed(&self) -> &Testbed {
        &self.testbed
    }

    pub fn bias_label(&self) -> &str {
        &self.bias_label
    }

    fn sample(&self, image: Option<&ImagePart>) -> Result<&SimulatedSample, GatewayError> {
        match image {
            Some(ImagePart::Synthetic { sample_id, .. }) => self
                .testbed
                .sample(sample_id)
                .ok_or_else(|| GatewayError::InvalidRequest(format!("unknown sample {sample_id}"))),
            Some(ImagePart::Encoded(_)) => Err(GatewayError::InvalidRequest(
                "the simulated backend only accepts synthetic samples".into(),
            )),
            None => Err(GatewayError::InvalidRequest("missing image".into())),
        }
    }

    fn describe(&self, sample: &SimulatedSample, q: &str) -> String {
        let tokens = Tokens::new(q);
        let dict = &self.testbed.dictionary;
        let revealed: Vec<&str> = sample
            .features
            .iter()
            .filter(|f| {
                dict.get(f)
                    .map(|feat| tokens.mentions(&feat.group))
                    .unwrap_or(false)
            })
            .map(String::as_str)
            .collect();
        if revealed.is_empty() {
            STUB_DESCRIPTION.to_string()
        } else {
            // BTreeSet iteration is already lexicographic.
            revealed.join(", ")
        }
    }

    fn classify(&self, composed: &str) -> String {
        let tokens = Tokens::new(composed);
        let dict = &self.testbed.dictionary;
        let scores: Vec<(usize, &String)> = self
            .testbed
            .config
            .classes
            .iter()
            .map(|c| {
                (
                    dict.features_of(c)
                        .filter(|f| tokens.mentions(&f.phrase))
                        .count(),
                    c,
                )
            })
            .collect();
        let best = scores.iter().map(|s| s.0).max().unwrap_or(0);
        let tied: Vec<&String> = scores.iter().filter(|s| s.0 == best).map(|s| s.1).collect();
        let label = if tied.iter().any(|l| **l == self.bias_label) {
            self.bias_label.as_str()
        } else {
            tied[0].as_str()
        };
        format!("ANSWER: {label}")
    }

    fn missing_for(&self, case: &ReflectionCase, q: &Tokens) -> Vec<String> {
        let Some(sample) = self.testbed.sample(&case.sample_id) else {
            return Vec::new();
        };
        let dict = &self.testbed.dictionary;
        sample
            .features
            .iter()
            .filter(|f| {
                dict.get(f)
                    .map(|feat| feat.class == sample.true_label)
                    .unwrap_or(false)
            })
            .filter(|f| !q.mentions(f))
            .cloned()
            .collect()
    }

    fn reflect(&self, q: &str, cases: &[ReflectionCase]) -> String {
        let tokens = Tokens::new(q);
        let lines: Vec<String> = cases
            .iter()
            .filter_map(|c| {
                let missing = self.missing_for(c, &tokens);
                (!missing.is_empty()).then(|| {
                    format!(
                        "Case {} (true {}, predicted {}): missing criteria: {}",
                        c.sample_id,
                        c.true_label,
                        c.predicted,
                        missing.join("; ")
                    )
                })
            })
            .collect();
        if lines.is_empty() {
            NO_MISSING_CRITERIA.to_string()
        } else {
            lines.join("\n")
        }
    }

    /// Dictionary features named in `reflection`, in order of first mention.
    fn named_features(&self, reflection: &str) -> Vec<String> {
        let hay = text::tokenize(reflection);
        let mut found: Vec<(usize, &str)> = self
            .testbed
            .dictionary
            .features
            .iter()
            .filter_map(|f| {
                let needle = text::tokenize(&f.phrase);
                hay.windows(needle.len())
                    .position(|w| w == needle.as_slice())
                    .map(|pos| (pos, f.phrase.as_str()))
            })
            .collect();
        found.sort();
        found.into_iter().map(|(_, f)| f.to_string()).collect()
    }

    fn modify(&self, phase: &str, q: &str, reflection: &str) -> String {
        let tokens = Tokens::new(q);
        let mut additions: Vec<String> = self
            .named_features(reflection)
            .into_iter()
            .filter(|f| !tokens.mentions(f))
            .take(self.max_additions)
            .collect();
        additions.sort();
        if additions.is_empty() {
            return q.to_string();
        }
        let diversify = phase == "diversify";
        let mut out = q.to_string();
        for f in &additions {
            let synonym = diversify
                .then(|| {
                    self.testbed
                        .synonyms
                        .get(f)
                        .and_then(|syns| syns.iter().find(|s| !tokens.mentions(s)))
                })
                .flatten();
            match synonym {
                Some(s) => out.push_str(&format!("\n- Assess for {f}, also described as {s}.")),
                None => out.push_str(&format!("\n- Assess for {f}.")),
            }
        }
        out
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let present = self.testbed.lexicon.terms_in(text);
        let mut v = vec![0.0; EMBEDDING_DIM];
        for i in present {
            if i < EMBEDDING_DIM {
                v[i] = 1.0;
            }
        }
        v
    }
}

fn parse_cases(parts: &[String]) -> Result<Vec<ReflectionCase>, GatewayError> {
    parts
        .iter()
        .map(|p| {
            serde_json::from_str(p)
                .map_err(|e| GatewayError::InvalidRequest(format!("bad case payload: {e}")))
        })
        .collect()
}

impl Backend for SimulatedBackend {
    fn backend_id(&self) -> &str {
        "simulated"
    }

    fn dispatch(&self, req: &GatewayRequest) -> Result<String, GatewayError> {
        let parts = &req.text_parts;
        let need = |n: usize| {
            if parts.len() < n {
                Err(GatewayError::InvalidRequest(format!(
                    "{:?} expects at least {n} text parts",
                    req.kind
                )))
            } else {
                Ok(())
            }
        };
        match req.kind {
            RequestKind::Describe => {
                need(1)?;
                let sample = self.sample(req.image_part.as_ref())?;
                Ok(self.describe(sample, &parts[0]))
            }
            RequestKind::Classify => {
                need(1)?;
                self.sample(req.image_part.as_ref())?;
                Ok(self.classify(&parts[0]))
            }
            RequestKind::Reflect => {
                need(3)?;
                let cases = parse_cases(&parts[2..])?;
                Ok(self.reflect(&parts[1], &cases))
            }
            RequestKind::Modify => {
                need(5)?;
                Ok(self.modify(&parts[1], &parts[2], &parts[3]))
            }
            RequestKind::Embed => {
                need(1)?;
                Ok(serde_json::to_string(&self.embed(&parts[0])).expect("floats serialize"))
            }
        }
    }
}
