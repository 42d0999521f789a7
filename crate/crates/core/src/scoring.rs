//! Phase-specific prompt scores: lexical diversity and training accuracy.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{ErrorSet, Prompt};
use crate::error::{Error, Result};
use crate::text;

const BUILTIN_LEXICON: &str = include_str!("../assets/lexicon.txt");

/// Ordered set of lower-cased domain terms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LexiconFile", into = "LexiconFile")]
pub struct Lexicon {
    pub terms: Vec<String>,
    pub source: Option<PathBuf>,
    tokenized: Vec<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct LexiconFile {
    terms: Vec<String>,
    #[serde(default)]
    source: Option<PathBuf>,
}

impl TryFrom<LexiconFile> for Lexicon {
    type Error = Error;

    fn try_from(f: LexiconFile) -> Result<Self> {
        Lexicon::from_terms(f.terms, f.source)
    }
}

impl From<Lexicon> for LexiconFile {
    fn from(l: Lexicon) -> Self {
        LexiconFile {
            terms: l.terms,
            source: l.source,
        }
    }
}

impl Lexicon {
    /// Parses the one-term-per-line format; `#` starts a comment line.
    pub fn parse(contents: &str, source: Option<PathBuf>) -> Result<Self> {
        let terms = contents
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase);
        Self::from_terms(terms, source)
    }

    pub fn from_terms<I, S>(terms: I, source: Option<PathBuf>) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut seen = BTreeSet::new();
        let mut list = Vec::new();
        for t in terms {
            let t: String = t.into().trim().to_lowercase();
            if text::tokenize(&t).is_empty() {
                continue;
            }
            if seen.insert(t.clone()) {
                list.push(t);
            }
        }
        if list.is_empty() {
            return Err(Error::InvalidConfig("lexicon has no terms".into()));
        }
        let tokenized = list.iter().map(|t| text::tokenize(t)).collect();
        Ok(Lexicon {
            terms: list,
            source,
            tokenized,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&s, Some(path.to_path_buf()))
    }

    /// The shipped histopathology lexicon.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_LEXICON, None).expect("builtin lexicon parses")
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn contains(&self, term: &str) -> bool {
        let t = term.trim().to_lowercase();
        self.terms.contains(&t)
    }

    /// Indices of distinct lexicon terms occurring in `text`.
    pub fn terms_in(&self, text: &str) -> BTreeSet<usize> {
        let hay = text::tokenize(text);
        self.tokenized
            .iter()
            .enumerate()
            .filter(|(_, needle)| text::contains_seq(&hay, needle))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Where uniqueness is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UniquenessScope {
    /// Prompts generated in earlier iterations of the run.
    #[default]
    History,
    /// The other prompts of the pool being scored.
    Pool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityScore {
    pub prompt_id: String,
    pub t: usize,
    pub u: usize,
    pub t_norm: f64,
    pub u_norm: f64,
    pub d: f64,
}

/// Number of distinct lexicon terms in the prompt.
pub fn count_terms(q: &Prompt, lexicon: &Lexicon) -> usize {
    lexicon.terms_in(&q.text).len()
}

/// Lexicon terms of `q` that occur in no other prompt of `comparison`.
/// One entry equal to `q` (same id) is skipped as `q` itself.
pub fn count_unique_terms(q: &Prompt, comparison: &[&Prompt], lexicon: &Lexicon) -> usize {
    let own = lexicon.terms_in(&q.text);
    let mut skipped_self = false;
    let mut others = BTreeSet::new();
    for p in comparison {
        if !skipped_self && p.id == q.id {
            skipped_self = true;
            continue;
        }
        others.extend(lexicon.terms_in(&p.text));
    }
    own.difference(&others).count()
}

/// Normalized diversity `D = T/max T + U/max U` over `pool`, with
/// uniqueness measured against `comparison`. A zero maximum zeroes that
/// component.
pub fn diversity_scores(
    pool: &[&Prompt],
    comparison: &[&Prompt],
    lexicon: &Lexicon,
) -> Vec<DiversityScore> {
    diversity_scores_by(pool, lexicon, |_| comparison.to_vec())
}

/// Like [`diversity_scores`], but each prompt is compared only with the
/// prompts of `history` created in an earlier iteration.
pub fn diversity_scores_prior(
    pool: &[&Prompt],
    history: &[&Prompt],
    lexicon: &Lexicon,
) -> Vec<DiversityScore> {
    diversity_scores_by(pool, lexicon, |q| {
        history
            .iter()
            .copied()
            .filter(|p| p.created_iteration < q.created_iteration)
            .collect()
    })
}

fn diversity_scores_by<'a, F>(
    pool: &[&'a Prompt],
    lexicon: &Lexicon,
    comparison_for: F,
) -> Vec<DiversityScore>
where
    F: Fn(&Prompt) -> Vec<&'a Prompt>,
{
    let mut term_sets: std::collections::HashMap<&str, BTreeSet<usize>> =
        std::collections::HashMap::new();
    let mut terms_of = |p: &'a Prompt| -> BTreeSet<usize> {
        term_sets
            .entry(p.id.as_str())
            .or_insert_with(|| lexicon.terms_in(&p.text))
            .clone()
    };
    let raw: Vec<(usize, usize)> = pool
        .iter()
        .map(|q| {
            let own = terms_of(q);
            let mut skipped_self = false;
            let mut others = BTreeSet::new();
            for p in comparison_for(q) {
                if !skipped_self && p.id == q.id {
                    skipped_self = true;
                    continue;
                }
                others.extend(terms_of(p));
            }
            (own.len(), own.difference(&others).count())
        })
        .collect();
    let max_t = raw.iter().map(|r| r.0).max().unwrap_or(0);
    let max_u = raw.iter().map(|r| r.1).max().unwrap_or(0);
    let norm = |v: usize, max: usize| if max == 0 { 0.0 } else { v as f64 / max as f64 };
    pool.iter()
        .zip(raw)
        .map(|(q, (t, u))| {
            let t_norm = norm(t, max_t);
            let u_norm = norm(u, max_u);
            DiversityScore {
                prompt_id: q.id.clone(),
                t,
                u,
                t_norm,
                u_norm,
                d: t_norm + u_norm,
            }
        })
        .collect()
}

/// `S(q) = 1 - |errors| / n_train`.
pub fn accuracy_score(errors: &ErrorSet, n_train: usize) -> f64 {
    accuracy_from_counts(errors.len(), n_train)
}

pub fn accuracy_from_counts(n_errors: usize, n: usize) -> f64 {
    assert!(n >= 1, "accuracy needs at least one sample");
    assert!(n_errors <= n, "more errors than samples");
    1.0 - n_errors as f64 / n as f64
}
