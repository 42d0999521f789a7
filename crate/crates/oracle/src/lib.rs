//! Enumeration oracle for the simulated testbed.
//!
//! Reads the testbed as plain JSON and applies the describe and classify
//! rules directly to every sample, with its own text matching.

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const GENERATOR_VERSION: &str = "oracle-1";
pub const DELIMITER: &str = "IMAGE DESCRIPTION:\n";
pub const STUB: &str = "tissue section with unremarkable appearance";

/// Lower-cased words joined by single spaces and padded with one space at
/// each end, so phrase containment is a substring test.
pub fn padded_words(text: &str) -> String {
    let mut out = String::from(" ");
    let mut in_word = false;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            out.extend(ch.to_lowercase());
            in_word = true;
        } else if in_word {
            out.push(' ');
            in_word = false;
        }
    }
    if in_word {
        out.push(' ');
    }
    out
}

pub fn names(padded_text: &str, phrase: &str) -> bool {
    let p = padded_words(phrase);
    p.len() > 2 && padded_text.contains(&p)
}

#[derive(Debug, Clone)]
pub struct OracleFeature {
    pub phrase: String,
    pub group: String,
    pub class: String,
}

#[derive(Debug, Clone)]
pub struct OracleSample {
    pub id: String,
    pub label: String,
    pub split: String,
    pub features: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct OracleTestbed {
    pub classes: Vec<String>,
    pub features: Vec<OracleFeature>,
    pub samples: Vec<OracleSample>,
}

fn str_field(v: &Value, key: &str) -> String {
    v[key]
        .as_str()
        .unwrap_or_else(|| panic!("testbed field {key} missing"))
        .to_string()
}

impl OracleTestbed {
    pub fn from_json(v: &Value) -> Self {
        let classes = v["config"]["classes"]
            .as_array()
            .expect("config.classes")
            .iter()
            .map(|c| c.as_str().expect("class name").to_string())
            .collect();
        let features = v["dictionary"]["features"]
            .as_array()
            .expect("dictionary.features")
            .iter()
            .map(|f| OracleFeature {
                phrase: str_field(f, "phrase"),
                group: str_field(f, "group"),
                class: str_field(f, "class"),
            })
            .collect();
        let samples = v["samples"]
            .as_array()
            .expect("samples")
            .iter()
            .map(|s| OracleSample {
                id: str_field(s, "id"),
                label: str_field(s, "true_label"),
                split: str_field(s, "split").to_lowercase(),
                features: s["features"]
                    .as_array()
                    .expect("sample features")
                    .iter()
                    .map(|f| f.as_str().expect("feature").to_string())
                    .collect(),
            })
            .collect();
        OracleTestbed {
            classes,
            features,
            samples,
        }
    }

    fn feature(&self, phrase: &str) -> Option<&OracleFeature> {
        self.features.iter().find(|f| f.phrase == phrase)
    }

    /// Sample features whose group keyword the prompt names, sorted, comma-joined.
    pub fn describe(&self, sample: &OracleSample, prompt: &str) -> String {
        let padded = padded_words(prompt);
        let mut shown: Vec<&str> = sample
            .features
            .iter()
            .filter(|f| {
                self.feature(f)
                    .is_some_and(|feat| names(&padded, &feat.group))
            })
            .map(String::as_str)
            .collect();
        shown.sort();
        if shown.is_empty() {
            STUB.to_string()
        } else {
            shown.join(", ")
        }
    }

    /// Label with the most named features; the bias label wins any tie it is in,
    /// otherwise the earliest class.
    pub fn classify(&self, composed: &str, bias: &str) -> String {
        let padded = padded_words(composed);
        let counts: Vec<usize> = self
            .classes
            .iter()
            .map(|c| {
                self.features
                    .iter()
                    .filter(|f| &f.class == c && names(&padded, &f.phrase))
                    .count()
            })
            .collect();
        let top = *counts.iter().max().expect("classes");
        let tied: Vec<&String> = self
            .classes
            .iter()
            .zip(&counts)
            .filter(|(_, n)| **n == top)
            .map(|(c, _)| c)
            .collect();
        if tied.iter().any(|c| c.as_str() == bias) {
            bias.to_string()
        } else {
            tied[0].clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub n: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    /// Rows true class, columns predicted class then parse failures.
    pub confusion: Vec<Vec<usize>>,
    pub errors: Vec<String>,
}

/// Runs describe-then-classify on every sample of `split`.
pub fn oracle_enumerate_simulator(
    testbed: &OracleTestbed,
    prompt: &str,
    classifier: &str,
    bias: &str,
    split: &str,
) -> SplitMetrics {
    let k = testbed.classes.len();
    let mut confusion = vec![vec![0usize; k + 1]; k];
    let mut errors = Vec::new();
    let mut n = 0;
    let mut n_correct = 0;
    for s in testbed.samples.iter().filter(|s| s.split == split) {
        let description = testbed.describe(s, prompt);
        let composed = format!("{classifier}\n\n{DELIMITER}{description}");
        let predicted = testbed.classify(&composed, bias);
        let row = testbed
            .classes
            .iter()
            .position(|c| *c == s.label)
            .expect("known label");
        let col = testbed
            .classes
            .iter()
            .position(|c| *c == predicted)
            .unwrap_or(k);
        confusion[row][col] += 1;
        n += 1;
        if predicted == s.label {
            n_correct += 1;
        } else {
            errors.push(s.id.clone());
        }
    }
    SplitMetrics {
        n,
        n_correct,
        accuracy: if n == 0 {
            0.0
        } else {
            1.0 - errors.len() as f64 / n as f64
        },
        confusion,
        errors,
    }
}

/// Direct classification with the classifier prompt alone.
pub fn oracle_zero_shot(
    testbed: &OracleTestbed,
    classifier: &str,
    bias: &str,
    split: &str,
) -> SplitMetrics {
    let k = testbed.classes.len();
    let mut confusion = vec![vec![0usize; k + 1]; k];
    let predicted = testbed.classify(classifier, bias);
    let col = testbed
        .classes
        .iter()
        .position(|c| *c == predicted)
        .unwrap_or(k);
    let mut n = 0;
    let mut n_correct = 0;
    let mut errors = Vec::new();
    for s in testbed.samples.iter().filter(|s| s.split == split) {
        let row = testbed
            .classes
            .iter()
            .position(|c| *c == s.label)
            .expect("known label");
        confusion[row][col] += 1;
        n += 1;
        if predicted == s.label {
            n_correct += 1;
        } else {
            errors.push(s.id.clone());
        }
    }
    SplitMetrics {
        n,
        n_correct,
        accuracy: if n == 0 {
            0.0
        } else {
            1.0 - errors.len() as f64 / n as f64
        },
        confusion,
        errors,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    /// Description prompt; `None` for the zero-shot arm.
    pub prompt: Option<String>,
    pub train: SplitMetrics,
    pub test: SplitMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleExpectations {
    pub generator_version: String,
    pub testbed_config: Value,
    pub testbed_seed: u64,
    pub classes: Vec<String>,
    pub bias_label: String,
    pub classifier_prompt: String,
    pub scenarios: Vec<Scenario>,
}

/// Prompts enumerated into the fixture file.
pub const SCENARIOS: [(&str, Option<&str>); 5] = [
    (
        "full-coverage",
        Some("Describe the invasion pattern, the architecture, nuclear detail, the stroma and mitotic activity."),
    ),
    ("empty-coverage", Some("Describe this image.")),
    ("one-group", Some("Describe the stroma in this image.")),
    ("seed", Some("Describe the tissue morphology visible in this histology image.")),
    ("zero-shot", None),
];

pub fn expectations(testbed_json: &Value, classifier: &str, bias: &str) -> OracleExpectations {
    let tb = OracleTestbed::from_json(testbed_json);
    let scenarios = SCENARIOS
        .iter()
        .map(|(id, prompt)| {
            let run = |split: &str| match prompt {
                Some(q) => oracle_enumerate_simulator(&tb, q, classifier, bias, split),
                None => oracle_zero_shot(&tb, classifier, bias, split),
            };
            Scenario {
                id: id.to_string(),
                prompt: prompt.map(str::to_string),
                train: run("train"),
                test: run("test"),
            }
        })
        .collect();
    OracleExpectations {
        generator_version: GENERATOR_VERSION.into(),
        testbed_config: testbed_json["config"].clone(),
        testbed_seed: testbed_json["seed"].as_u64().expect("seed"),
        classes: tb.classes.clone(),
        bias_label: bias.to_string(),
        classifier_prompt: classifier.to_string(),
        scenarios,
    }
}

/// Expectations for the default testbed (seed 42) and default classifier.
pub fn default_expectations() -> OracleExpectations {
    use descprompt::datasets::testbed::{generate_synthetic_testbed, TestbedConfig};
    use descprompt::domain::Prompt;
    use descprompt::gateway::{classifier_prompt_text, DEFAULT_CLASSIFIER};
    let (_, testbed) = generate_synthetic_testbed(&TestbedConfig::default(), 42, "testbed.json")
        .expect("default testbed");
    let json = serde_json::to_value(&testbed).expect("testbed serializes");
    let classifier = Prompt::classifier(&classifier_prompt_text(
        DEFAULT_CLASSIFIER,
        &testbed.config.classes,
    ))
    .expect("classifier prompt")
    .text;
    let bias = testbed.config.classes.last().expect("classes").clone();
    expectations(&json, &classifier, &bias)
}

pub fn render(e: &OracleExpectations) -> String {
    let mut s = serde_json::to_string_pretty(e).expect("expectations serialize");
    s.push('\n');
    s
}

pub fn fixture_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures/oracle_expectations.json")
}
