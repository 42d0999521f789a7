//! Error-driven prompt refinement with beam retention.
//!
//! A run starts from a seed description prompt. Each iteration collects the
//! training errors of every pooled prompt, reflects on random subsets of them,
//! asks for revised prompts, scores pool and children together and keeps the
//! best `b`. The first iterations score by lexical diversity, the rest by
//! training accuracy.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{ErrorCase, ErrorSet, Phase, Prompt, PromptHistory, PromptRole, SampleRecord};
use crate::error::{Error, Result};
use crate::gateway::{CallStats, Gateway, ModifyError, ReflectionCase};
use crate::inference::{append_prediction_log, Pipeline};
use crate::run_dir::{write_json, write_jsonl, RunDir};
use crate::scoring::{
    accuracy_score, diversity_scores, diversity_scores_prior, Lexicon, UniquenessScope,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Prompts retained per iteration.
    pub b: usize,
    /// Error subsets, hence children, per pooled prompt.
    pub l: usize,
    pub subset_size: usize,
    pub n_phase1: usize,
    pub n_phase2: usize,
    pub early_stop_threshold: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub uniqueness_scope: UniquenessScope,
    pub max_failure_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            b: 4,
            l: 4,
            subset_size: 4,
            n_phase1: 3,
            n_phase2: 6,
            early_stop_threshold: 0.95,
            early_stop_patience: 2,
            seed: 42,
            uniqueness_scope: UniquenessScope::History,
            max_failure_fraction: 0.2,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.b < 1 {
            return bad("b must be at least 1");
        }
        if self.l < 1 {
            return bad("l must be at least 1");
        }
        if self.subset_size < 1 {
            return bad("subset_size must be at least 1");
        }
        if self.n_phase2 < 1 {
            return bad("n_phase2 must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.early_stop_threshold) {
            return bad("early_stop_threshold must be in [0,1]");
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return bad("max_failure_fraction must be in [0,1]");
        }
        Ok(())
    }

    /// The accuracy-only ablation: no diversity phase.
    pub fn single_phase(mut self) -> Self {
        self.n_phase1 = 0;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: u32,
    pub phase: Phase,
    pub pool_before: Vec<String>,
    pub candidates_generated: usize,
    pub scores: BTreeMap<String, f64>,
    pub retained: Vec<String>,
    /// Score of the last retained prompt.
    pub tau: f64,
    pub best_train_accuracy: f64,
    pub best_diversity: f64,
    /// Backend traffic; omitted from result files so reruns compare equal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calls: Option<CallStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub config: RunConfig,
    pub seed_prompt: Prompt,
    pub classifier_prompt: Prompt,
    pub q_star: Prompt,
    pub q_star_train_accuracy: f64,
    pub final_pool: Vec<Prompt>,
    pub logs: Vec<IterationLog>,
    pub prompt_history: Vec<Prompt>,
    /// Training accuracy of every prompt that was evaluated.
    pub train_accuracy: BTreeMap<String, f64>,
    pub early_stopped: bool,
}

impl OptimizationResult {
    /// Copy with per-iteration call counts stripped.
    pub fn without_call_stats(&self) -> Self {
        let mut r = self.clone();
        for log in &mut r.logs {
            log.calls = None;
        }
        r
    }

    pub fn history(&self) -> Result<PromptHistory> {
        PromptHistory::from_prompts(self.prompt_history.clone())
    }
}

/// Seeded per (run seed, iteration, prompt).
pub fn subset_rng(seed: u64, iteration: u32, prompt_id: &str) -> ChaCha8Rng {
    let hash = u64::from_str_radix(&prompt_id[..16.min(prompt_id.len())], 16).unwrap_or(0);
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(iteration as u64).wrapping_add(hash))
}

/// `l` subsets of size `min(subset_size, |errors|)`, each drawn without
/// replacement. Subsets may overlap.
pub fn sample_error_subsets(
    errors: &ErrorSet,
    l: usize,
    subset_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<ErrorCase>>> {
    if errors.is_empty() {
        return Err(Error::EmptyErrorSet);
    }
    let k = subset_size.min(errors.len());
    Ok((0..l)
        .map(|_| errors.cases.choose_multiple(rng, k).cloned().collect())
        .collect())
}

fn to_reflection_cases(cases: &[ErrorCase]) -> Vec<ReflectionCase> {
    cases
        .iter()
        .map(|c| ReflectionCase {
            sample_id: c.sample_id.clone(),
            true_label: c.true_label.clone(),
            predicted: c.predicted.clone(),
            description: c.description.clone(),
        })
        .collect()
}

/// Reflect-then-modify for each error subset. Failed or degenerate children
/// are skipped, as are children already in `known`.
#[allow(clippy::too_many_arguments)]
pub fn expand_prompt(
    q: &Prompt,
    p: &Prompt,
    errors: &ErrorSet,
    phase: Phase,
    iteration: u32,
    feedback_ctx: Option<&str>,
    gateway: &Gateway,
    config: &RunConfig,
    known: &HashSet<String>,
) -> Vec<Prompt> {
    let mut rng = subset_rng(config.seed, iteration, &q.id);
    let subsets = match sample_error_subsets(errors, config.l, config.subset_size, &mut rng) {
        Ok(s) => s,
        Err(_) => return Vec::new(),
    };
    let children: Vec<Option<Prompt>> = subsets
        .par_iter()
        .map(|subset| {
            let cases = to_reflection_cases(subset);
            let reflection = match gateway.reflect(p, q, &cases) {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("reflection failed for {}: {e}", q.short_id());
                    return None;
                }
            };
            match gateway.modify(q, &reflection, &cases, feedback_ctx, phase, iteration) {
                Ok(child) => Some(child),
                Err(ModifyError::Degenerate) => None,
                Err(ModifyError::Gateway(e)) => {
                    log::warn!("modification failed for {}: {e}", q.short_id());
                    None
                }
            }
        })
        .collect();
    let mut seen = HashSet::new();
    children
        .into_iter()
        .flatten()
        .filter(|c| !known.contains(&c.id) && seen.insert(c.id.clone()))
        .collect()
}

/// Total order: score desc, created iteration asc, id asc.
pub fn rank(candidates: &[Prompt], scores: &BTreeMap<String, f64>) -> Vec<Prompt> {
    let mut ranked = candidates.to_vec();
    ranked.sort_by(|a, b| {
        let sa = scores.get(&a.id).copied().unwrap_or(f64::NEG_INFINITY);
        let sb = scores.get(&b.id).copied().unwrap_or(f64::NEG_INFINITY);
        sb.total_cmp(&sa)
            .then(a.created_iteration.cmp(&b.created_iteration))
            .then(a.id.cmp(&b.id))
    });
    ranked
}

/// Keeps exactly `min(b, |candidates|)` prompts; returns them with tau.
pub fn select_top(
    candidates: &[Prompt],
    scores: &BTreeMap<String, f64>,
    b: usize,
) -> (Vec<Prompt>, f64) {
    let mut ranked = rank(candidates, scores);
    ranked.truncate(b.min(ranked.len()));
    let tau = ranked
        .last()
        .and_then(|p| scores.get(&p.id).copied())
        .unwrap_or(f64::NAN);
    (ranked, tau)
}

struct TrainEval {
    accuracy: f64,
    errors: ErrorSet,
}

/// Mutable optimization state shared across iterations.
pub struct OptimizerState<'a> {
    pub pool: Vec<Prompt>,
    pub history: PromptHistory,
    pub logs: Vec<IterationLog>,
    pipeline: &'a Pipeline,
    train: &'a [SampleRecord],
    p: &'a Prompt,
    evaluated: Mutex<HashMap<String, TrainEval>>,
    run_dir: Option<&'a RunDir>,
}

impl<'a> OptimizerState<'a> {
    pub fn new(
        q0: &Prompt,
        p: &'a Prompt,
        pipeline: &'a Pipeline,
        train: &'a [SampleRecord],
        run_dir: Option<&'a RunDir>,
    ) -> Result<Self> {
        if q0.role != PromptRole::DescriptionGen {
            return Err(Error::RoleMismatch {
                expected: PromptRole::DescriptionGen,
                found: q0.role,
            });
        }
        if p.role != PromptRole::Classifier {
            return Err(Error::RoleMismatch {
                expected: PromptRole::Classifier,
                found: p.role,
            });
        }
        if train.is_empty() {
            return Err(Error::InvalidManifest("training split is empty".into()));
        }
        let mut history = PromptHistory::new();
        history.insert(q0.clone())?;
        Ok(OptimizerState {
            pool: vec![q0.clone()],
            history,
            logs: Vec::new(),
            pipeline,
            train,
            p,
            evaluated: Mutex::new(HashMap::new()),
            run_dir,
        })
    }

    /// Runs the prompt on the training split once; later calls reuse it.
    fn evaluate(&self, q: &Prompt) -> Result<(f64, ErrorSet)> {
        if let Some(e) = self.evaluated.lock().expect("eval lock").get(&q.id) {
            return Ok((e.accuracy, e.errors.clone()));
        }
        let (set, errors) = self.pipeline.run_split(self.train, self.p, q)?;
        let accuracy = accuracy_score(&errors, self.train.len());
        if let Some(dir) = self.run_dir {
            append_prediction_log(&dir.predictions(), &set)?;
        }
        self.evaluated.lock().expect("eval lock").insert(
            q.id.clone(),
            TrainEval {
                accuracy,
                errors: errors.clone(),
            },
        );
        Ok((accuracy, errors))
    }

    pub fn train_accuracy(&self, q: &Prompt) -> Result<f64> {
        Ok(self.evaluate(q)?.0)
    }

    fn all_accuracies(&self) -> BTreeMap<String, f64> {
        self.evaluated
            .lock()
            .expect("eval lock")
            .iter()
            .map(|(k, v)| (k.clone(), v.accuracy))
            .collect()
    }

    /// Logs the seed prompt as iteration 0.
    fn log_seed(&mut self, lexicon: &Lexicon) -> Result<()> {
        let q0 = self.pool[0].clone();
        let acc = self.train_accuracy(&q0)?;
        let d = diversity_scores(&[&q0], &[&q0], lexicon)[0].d;
        self.logs.push(IterationLog {
            iteration: 0,
            phase: Phase::Seed,
            pool_before: Vec::new(),
            candidates_generated: 0,
            scores: BTreeMap::from([(q0.id.clone(), acc)]),
            retained: vec![q0.id.clone()],
            tau: acc,
            best_train_accuracy: acc,
            best_diversity: d,
            calls: None,
        });
        Ok(())
    }

    /// One reflect, modify, score and select round.
    pub fn run_iteration(
        &mut self,
        iteration: u32,
        phase: Phase,
        config: &RunConfig,
        lexicon: &Lexicon,
        feedback_ctx: Option<&str>,
    ) -> Result<&IterationLog> {
        assert!(!self.pool.is_empty(), "pool is never empty");
        let gateway = self.pipeline.gateway();
        let before = gateway.stats();
        let pool_before: Vec<String> = self.pool.iter().map(|q| q.id.clone()).collect();

        let mut known: HashSet<String> = self.history.iter().map(|q| q.id.clone()).collect();
        let mut children = Vec::new();
        for q in self.pool.clone() {
            let (_, errors) = self.evaluate(&q)?;
            let new = expand_prompt(
                &q,
                self.p,
                &errors,
                phase,
                iteration,
                feedback_ctx,
                gateway,
                config,
                &known,
            );
            for c in new {
                known.insert(c.id.clone());
                self.history.insert(c.clone())?;
                children.push(c);
            }
        }
        // Descriptions for every new prompt over the full training split.
        for c in &children {
            self.evaluate(c)?;
        }

        let mut candidates = self.pool.clone();
        candidates.extend(children.iter().cloned());
        let cand_refs: Vec<&Prompt> = candidates.iter().collect();
        let diversity = match config.uniqueness_scope {
            UniquenessScope::History => {
                let history: Vec<&Prompt> = self.history.iter().collect();
                diversity_scores_prior(&cand_refs, &history, lexicon)
            }
            UniquenessScope::Pool => diversity_scores(&cand_refs, &cand_refs, lexicon),
        };
        let mut accuracy = BTreeMap::new();
        for c in &candidates {
            accuracy.insert(c.id.clone(), self.train_accuracy(c)?);
        }
        let scores: BTreeMap<String, f64> = match phase {
            Phase::Diversify => diversity
                .iter()
                .map(|d| (d.prompt_id.clone(), d.d))
                .collect(),
            _ => accuracy.clone(),
        };
        let (retained, tau) = select_top(&candidates, &scores, config.b);
        let best_train_accuracy = retained
            .iter()
            .map(|q| accuracy[&q.id])
            .fold(f64::NEG_INFINITY, f64::max);
        let retained_ids: HashSet<&str> = retained.iter().map(|q| q.id.as_str()).collect();
        let best_diversity = diversity
            .iter()
            .filter(|d| retained_ids.contains(d.prompt_id.as_str()))
            .map(|d| d.d)
            .fold(f64::NEG_INFINITY, f64::max);

        let log = IterationLog {
            iteration,
            phase,
            pool_before,
            candidates_generated: children.len(),
            scores,
            retained: retained.iter().map(|q| q.id.clone()).collect(),
            tau,
            best_train_accuracy,
            best_diversity,
            calls: Some(gateway.stats().since(&before)),
        };
        log::info!(
            "iteration {iteration} ({phase}): {} candidates, best train accuracy {:.3}, best diversity {:.3}",
            candidates.len(),
            best_train_accuracy,
            best_diversity
        );
        self.pool = retained;
        self.logs.push(log);
        self.flush()?;
        Ok(self.logs.last().expect("just pushed"))
    }

    fn flush(&self) -> Result<()> {
        if let Some(dir) = self.run_dir {
            write_jsonl(&dir.history(), self.history.as_slice())?;
            write_jsonl(&dir.iterations(), &self.logs)?;
        }
        Ok(())
    }

    /// Best pooled prompt by training accuracy; ties go to the earliest
    /// created, then the smallest id.
    pub fn best(&self) -> Result<(Prompt, f64)> {
        let mut scores = BTreeMap::new();
        for q in &self.pool {
            scores.insert(q.id.clone(), self.train_accuracy(q)?);
        }
        let top = rank(&self.pool, &scores).remove(0);
        let acc = scores[&top.id];
        Ok((top, acc))
    }
}

/// Diversity phase followed by accuracy phase, with early stopping.
#[allow(clippy::too_many_arguments)]
pub fn run_two_phase(
    config: &RunConfig,
    train: &[SampleRecord],
    q0: &Prompt,
    p: &Prompt,
    pipeline: &Pipeline,
    lexicon: &Lexicon,
    feedback_ctx: Option<&str>,
    run_dir: Option<&RunDir>,
) -> Result<OptimizationResult> {
    config.validate()?;
    if let Some(dir) = run_dir {
        for f in [dir.predictions(), dir.iterations(), dir.history()] {
            if f.exists() {
                std::fs::remove_file(&f).map_err(|e| Error::io(&f, e))?;
            }
        }
    }
    let mut state = OptimizerState::new(q0, p, pipeline, train, run_dir)?;
    let outcome = drive(&mut state, config, lexicon, feedback_ctx);
    // Partial logs survive an abort.
    state.flush()?;
    let early_stopped = outcome?;
    let (q_star, q_star_train_accuracy) = state.best()?;
    let result = OptimizationResult {
        config: config.clone(),
        seed_prompt: q0.clone(),
        classifier_prompt: p.clone(),
        q_star,
        q_star_train_accuracy,
        final_pool: state.pool.clone(),
        logs: state.logs.clone(),
        prompt_history: state.history.as_slice().to_vec(),
        train_accuracy: state.all_accuracies(),
        early_stopped,
    };
    if let Some(dir) = run_dir {
        write_json(&dir.result(), &result.without_call_stats())?;
    }
    Ok(result)
}

fn drive(
    state: &mut OptimizerState<'_>,
    config: &RunConfig,
    lexicon: &Lexicon,
    feedback_ctx: Option<&str>,
) -> Result<bool> {
    state.log_seed(lexicon)?;
    let mut iteration = 0u32;
    for _ in 0..config.n_phase1 {
        iteration += 1;
        state.run_iteration(iteration, Phase::Diversify, config, lexicon, feedback_ctx)?;
    }
    let mut streak = 0;
    for _ in 0..config.n_phase2 {
        iteration += 1;
        let best = state
            .run_iteration(iteration, Phase::Optimize, config, lexicon, feedback_ctx)?
            .best_train_accuracy;
        streak = if best >= config.early_stop_threshold {
            streak + 1
        } else {
            0
        };
        if streak >= config.early_stop_patience {
            return Ok(true);
        }
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Predicted;

    fn prompt_at(text: &str, iteration: u32) -> Prompt {
        let mut p = Prompt::seed(text).unwrap();
        p.created_iteration = iteration;
        p
    }

    fn errors(n: usize) -> ErrorSet {
        ErrorSet {
            prompt_id: "q".into(),
            cases: (0..n)
                .map(|i| ErrorCase {
                    sample_id: format!("s{i:02}"),
                    true_label: "A".into(),
                    predicted: Predicted::ParseFailure,
                    description_id: None,
                    description: String::new(),
                })
                .collect(),
        }
    }

    #[test]
    fn subsets_clamp_to_error_count() {
        let mut rng = subset_rng(1, 1, "abcdef0123456789");
        let s = sample_error_subsets(&errors(2), 4, 4, &mut rng).unwrap();
        assert_eq!(s.len(), 4);
        for sub in &s {
            let mut ids: Vec<&str> = sub.iter().map(|c| c.sample_id.as_str()).collect();
            ids.sort();
            assert_eq!(ids, vec!["s00", "s01"]);
        }
        assert!(matches!(
            sample_error_subsets(&errors(0), 4, 4, &mut rng),
            Err(Error::EmptyErrorSet)
        ));
    }

    #[test]
    fn subsets_are_reproducible() {
        let draw = || {
            let mut rng = subset_rng(42, 3, "0f0f0f0f0f0f0f0f");
            sample_error_subsets(&errors(10), 4, 4, &mut rng).unwrap()
        };
        let a = draw();
        assert_eq!(a, draw());
        for sub in &a {
            assert_eq!(sub.len(), 4);
            let unique: HashSet<&str> = sub.iter().map(|c| c.sample_id.as_str()).collect();
            assert_eq!(unique.len(), 4);
        }
    }

    #[test]
    fn select_top_orders_and_clamps() {
        let ps: Vec<Prompt> = ["A", "B", "C", "D", "E"]
            .iter()
            .map(|t| prompt_at(t, 1))
            .collect();
        let scores: BTreeMap<String, f64> = ps
            .iter()
            .zip([0.9, 0.8, 0.8, 0.7, 0.6])
            .map(|(p, s)| (p.id.clone(), s))
            .collect();
        let (kept, tau) = select_top(&ps, &scores, 4);
        let texts: HashSet<&str> = kept.iter().map(|p| p.text.as_str()).collect();
        assert_eq!(texts, HashSet::from(["A", "B", "C", "D"]));
        assert_eq!(tau, 0.7);
        let (kept, _) = select_top(&ps[..2], &scores, 4);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn boundary_ties_use_creation_then_id() {
        let old = prompt_at("old", 1);
        let new = prompt_at("new", 2);
        let scores = BTreeMap::from([(old.id.clone(), 0.5), (new.id.clone(), 0.5)]);
        let (kept, _) = select_top(&[new.clone(), old.clone()], &scores, 1);
        assert_eq!(kept[0].id, old.id);
        let x = prompt_at("x", 1);
        let y = prompt_at("y", 1);
        let scores = BTreeMap::from([(x.id.clone(), 0.5), (y.id.clone(), 0.5)]);
        let (kept, _) = select_top(&[x.clone(), y.clone()], &scores, 1);
        assert_eq!(kept[0].id, x.id.clone().min(y.id.clone()));
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig::default().validate().is_ok());
        assert!(RunConfig {
            b: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RunConfig {
            n_phase2: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!(RunConfig::default().single_phase().n_phase1, 0);
    }

    proptest::proptest! {
        #[test]
        fn select_top_size_and_threshold(scores in proptest::collection::vec(0u8..5, 1..20), b in 1usize..8) {
            let ps: Vec<Prompt> = (0..scores.len()).map(|i| prompt_at(&format!("p{i}"), (i % 3) as u32)).collect();
            let map: BTreeMap<String, f64> = ps.iter().zip(&scores).map(|(p, s)| (p.id.clone(), *s as f64)).collect();
            let (kept, tau) = select_top(&ps, &map, b);
            proptest::prop_assert_eq!(kept.len(), b.min(ps.len()));
            let kept_ids: HashSet<&str> = kept.iter().map(|p| p.id.as_str()).collect();
            for p in &ps {
                if !kept_ids.contains(p.id.as_str()) {
                    proptest::prop_assert!(map[&p.id] <= tau);
                }
            }
            for k in &kept {
                proptest::prop_assert!(map[&k.id] >= tau);
            }
        }
    }
}
