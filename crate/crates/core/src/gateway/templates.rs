//! Meta-prompt templates for reflection and modification.
//!
//! Placeholders use `{{name}}`. The shipped defaults are compiled in and can be
//! replaced by files from a template directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ReflectionCase;
use crate::domain::Phase;
use crate::error::{Error, Result};

pub const DEFAULT_REFLECT: &str = include_str!("../../assets/templates/reflect.txt");
pub const DEFAULT_MODIFY_DIVERSIFY: &str =
    include_str!("../../assets/templates/modify_diversify.txt");
pub const DEFAULT_MODIFY_OPTIMIZE: &str =
    include_str!("../../assets/templates/modify_optimize.txt");
pub const DEFAULT_CLASSIFIER: &str = include_str!("../../assets/templates/classifier.txt");
pub const DEFAULT_SEED_DESCRIPTION: &str =
    include_str!("../../assets/templates/seed_description.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Templates {
    pub reflect: String,
    pub modify_diversify: String,
    pub modify_optimize: String,
}

impl Default for Templates {
    fn default() -> Self {
        Templates {
            reflect: DEFAULT_REFLECT.into(),
            modify_diversify: DEFAULT_MODIFY_DIVERSIFY.into(),
            modify_optimize: DEFAULT_MODIFY_OPTIMIZE.into(),
        }
    }
}

fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in vars {
        out = out.replace(&format!("{{{{{name}}}}}"), value);
    }
    out
}

fn render_cases(cases: &[ReflectionCase]) -> String {
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| {
            format!(
                "Case {}: true label = {}; predicted = {}\nDescription: {}",
                i + 1,
                c.true_label,
                c.predicted,
                c.description
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

impl Templates {
    /// Loads `reflect.txt`, `modify_diversify.txt` and `modify_optimize.txt`
    /// from `dir`, falling back to the defaults for missing files.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::InvalidConfig(format!(
                "template directory {} does not exist",
                dir.display()
            )));
        }
        let read = |name: &str, default: &str| -> Result<String> {
            let p = dir.join(name);
            if p.is_file() {
                std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
            } else {
                Ok(default.to_string())
            }
        };
        Ok(Templates {
            reflect: read("reflect.txt", DEFAULT_REFLECT)?,
            modify_diversify: read("modify_diversify.txt", DEFAULT_MODIFY_DIVERSIFY)?,
            modify_optimize: read("modify_optimize.txt", DEFAULT_MODIFY_OPTIMIZE)?,
        })
    }

    pub fn render_reflect(&self, q: &str, p: &str, cases: &[ReflectionCase]) -> String {
        fill(
            &self.reflect,
            &[
                ("description_prompt", q),
                ("classifier_prompt", p),
                ("error_cases", &render_cases(cases)),
            ],
        )
    }

    pub fn render_modify(
        &self,
        phase: Phase,
        q: &str,
        reflection: &str,
        cases: &[ReflectionCase],
        feedback: Option<&str>,
    ) -> String {
        let template = match phase {
            Phase::Diversify => &self.modify_diversify,
            _ => &self.modify_optimize,
        };
        let feedback = feedback
            .map(|f| format!("\nExpert reviewer feedback to incorporate:\n{f}\n"))
            .unwrap_or_default();
        fill(
            template,
            &[
                ("description_prompt", q),
                ("reflection", reflection),
                ("error_cases", &render_cases(cases)),
                ("feedback", &feedback),
            ],
        )
    }
}

/// Fills the classifier template's `{{labels}}` slot.
pub fn classifier_prompt_text(template: &str, labels: &[String]) -> String {
    fill(template, &[("labels", &labels.join(", "))])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Predicted;

    fn case() -> ReflectionCase {
        ReflectionCase {
            sample_id: "s1".into(),
            true_label: "Normal".into(),
            predicted: Predicted::Label("Invasive".into()),
            description: "dense nuclei".into(),
        }
    }

    #[test]
    fn reflect_contains_prompt_and_cases() {
        let t = Templates::default();
        let r = t.render_reflect("DESCRIBE-Q", "CLASSIFY-P", &[case()]);
        assert!(r.contains("DESCRIBE-Q"));
        assert!(r.contains("CLASSIFY-P"));
        assert!(r.contains("true label = Normal; predicted = Invasive"));
        assert!(!r.contains("{{"));
    }

    #[test]
    fn modify_templates_differ_by_phase_and_carry_feedback() {
        let t = Templates::default();
        let d = t.render_modify(
            Phase::Diversify,
            "Q",
            "crit",
            &[case()],
            Some("FEEDBACK-BLOCK"),
        );
        let o = t.render_modify(Phase::Optimize, "Q", "crit", &[case()], None);
        assert!(d.contains("novel terminology"));
        assert!(d.contains("alternative morphologic perspectives"));
        assert!(o.contains("maximizes diagnostic accuracy"));
        assert!(d.contains("FEEDBACK-BLOCK"));
        assert!(!o.contains("Expert reviewer feedback"));
        assert!(!d.contains("{{") && !o.contains("{{"));
    }

    #[test]
    fn classifier_template_has_answer_contract() {
        let p = classifier_prompt_text(DEFAULT_CLASSIFIER, &["Normal".into(), "Invasive".into()]);
        assert!(p.contains("Normal, Invasive"));
        assert!(p.contains("ANSWER: <category>"));
    }
}
