//! Held-out evaluation, confidence intervals, trajectories and embedding separation.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{
    Description, Label, LabelSet, Phase, Predicted, Prediction, Prompt, SampleRecord,
};
use crate::error::{Error, Result};
use crate::gateway::Gateway;
use crate::inference::{Pipeline, PredictionSet};
use crate::optimizer::IterationLog;
use crate::run_dir::write_atomic;

pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 10_000;
pub const DEFAULT_LEVEL: f64 = 0.95;
pub const PARSE_FAILURE_COLUMN: &str = "ParseFailure";

/// Rows are true labels, columns are predicted labels plus a parse-failure column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<Label>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            0.0
        } else {
            self.trace() as f64 / n as f64
        }
    }

    /// Diagonal over row sum; 0 for an empty row.
    pub fn per_class_tpr(&self) -> BTreeMap<Label, f64> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let row: usize = self.counts[i].iter().sum();
                let tpr = if row == 0 {
                    0.0
                } else {
                    self.counts[i][i] as f64 / row as f64
                };
                (l.clone(), tpr)
            })
            .collect()
    }

    /// Column totals, parse failures last.
    pub fn column_totals(&self) -> Vec<usize> {
        (0..=self.labels.len())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }
}

/// Predictions whose true label is outside the label set are skipped.
pub fn confusion_matrix(predictions: &[Prediction], labels: &LabelSet) -> ConfusionMatrix {
    let k = labels.len();
    let mut counts = vec![vec![0usize; k + 1]; k];
    for p in predictions {
        let Some(row) = labels.index_of(&p.true_label) else {
            continue;
        };
        let col = match &p.predicted {
            Predicted::Label(l) => labels.index_of(l).unwrap_or(k),
            Predicted::ParseFailure => k,
        };
        counts[row][col] += 1;
    }
    ConfusionMatrix {
        labels: labels.labels.clone(),
        counts,
    }
}

type MetricFn = fn(&ArmReport) -> f64;

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap interval of the mean of 0/1 outcomes.
pub fn bootstrap_ci(correct: &[bool], resamples: usize, level: f64, seed: u64) -> (f64, f64) {
    assert!(!correct.is_empty(), "bootstrap needs at least one outcome");
    assert!(resamples > 0, "bootstrap needs at least one resample");
    let n = correct.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| {
            let hits = (0..n).filter(|_| correct[rng.gen_range(0..n)]).count();
            hits as f64 / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    (
        quantile_sorted(&means, alpha),
        quantile_sorted(&means, 1.0 - alpha),
    )
}

/// Student-t interval over per-run accuracies.
pub fn repeated_runs_ci(accuracies: &[f64], level: f64) -> Result<(f64, f64)> {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let n = accuracies.len();
    if n < 2 {
        return Err(Error::InvalidConfig(
            "repeated-runs interval needs at least two runs".into(),
        ));
    }
    let mean = accuracies.iter().sum::<f64>() / n as f64;
    let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?
        .inverse_cdf(1.0 - (1.0 - level) / 2.0);
    let half = t * (var / n as f64).sqrt();
    Ok(((mean - half).max(0.0), (mean + half).min(1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub prompt_id: String,
    pub n_test: usize,
    pub accuracy: f64,
    pub ci95: (f64, f64),
    pub confusion: ConfusionMatrix,
    pub per_class_tpr: BTreeMap<Label, f64>,
    pub n_parse_failures: usize,
}

impl ArmReport {
    /// The interval is widened to contain the point estimate.
    pub fn from_predictions(
        set: &PredictionSet,
        labels: &LabelSet,
        resamples: usize,
        level: f64,
        seed: u64,
    ) -> Self {
        let confusion = confusion_matrix(&set.predictions, labels);
        let accuracy = confusion.accuracy();
        let outcomes: Vec<bool> = set.predictions.iter().map(|p| p.correct).collect();
        let ci95 = if outcomes.is_empty() {
            (0.0, 0.0)
        } else {
            let (lo, hi) = bootstrap_ci(&outcomes, resamples, level, seed);
            (lo.min(accuracy), hi.max(accuracy))
        };
        ArmReport {
            prompt_id: set.q_id.clone(),
            n_test: confusion.total(),
            accuracy,
            ci95,
            per_class_tpr: confusion.per_class_tpr(),
            confusion,
            n_parse_failures: set.n_parse_failures,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub backend_id: String,
    pub bootstrap_seed: u64,
    pub bootstrap_resamples: usize,
    pub level: f64,
    pub manifest_seed: Option<u64>,
    pub run_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub model: String,
    pub classifier_prompt_id: String,
    pub n_test: usize,
    pub optimized: ArmReport,
    pub initial: Option<ArmReport>,
    pub zero_shot: Option<ArmReport>,
    pub silhouette: Option<f64>,
    pub initial_silhouette: Option<f64>,
    pub provenance: ReportProvenance,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub initial: Option<Prompt>,
    pub zero_shot: bool,
    pub silhouette: bool,
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
    pub manifest_seed: Option<u64>,
    pub run_seed: Option<u64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            initial: None,
            zero_shot: false,
            silhouette: false,
            resamples: DEFAULT_BOOTSTRAP_RESAMPLES,
            level: DEFAULT_LEVEL,
            seed: 0,
            manifest_seed: None,
            run_seed: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Vec<PredictionSet>,
    pub embeddings: Option<EmbeddingMatrix>,
}

/// Runs the two-step pipeline once over `test` for q* and the optional arms.
pub fn evaluate(
    task: &str,
    test: &[SampleRecord],
    p: &Prompt,
    q_star: &Prompt,
    pipeline: &Pipeline,
    options: &EvalOptions,
) -> Result<Evaluation> {
    let labels = pipeline.labels();
    let arm = |set: &PredictionSet| {
        ArmReport::from_predictions(set, labels, options.resamples, options.level, options.seed)
    };
    let mut predictions = Vec::new();

    let (opt_set, _) = pipeline.run_split(test, p, q_star)?;
    let optimized = arm(&opt_set);
    predictions.push(opt_set);

    let initial = match &options.initial {
        Some(q0) => {
            let (set, _) = pipeline.run_split(test, p, q0)?;
            let a = arm(&set);
            predictions.push(set);
            Some(a)
        }
        None => None,
    };
    let zero_shot = if options.zero_shot {
        let set = pipeline.run_zero_shot(test, p)?;
        let a = arm(&set);
        predictions.push(set);
        Some(a)
    } else {
        None
    };

    let (silhouette, initial_silhouette, embeddings) = if options.silhouette {
        let opt = embedding_separation(
            &split_descriptions(pipeline, q_star, test),
            test,
            pipeline.gateway(),
        )?;
        let init = match &options.initial {
            Some(q0) => Some(
                embedding_separation(
                    &split_descriptions(pipeline, q0, test),
                    test,
                    pipeline.gateway(),
                )?
                .silhouette,
            ),
            None => None,
        };
        (Some(opt.silhouette), init, Some(opt.matrix))
    } else {
        (None, None, None)
    };

    let report = EvalReport {
        task: task.to_string(),
        model: pipeline.gateway().backend_id().to_string(),
        classifier_prompt_id: p.id.clone(),
        n_test: optimized.n_test,
        optimized,
        initial,
        zero_shot,
        silhouette,
        initial_silhouette,
        provenance: ReportProvenance {
            backend_id: pipeline.gateway().backend_id().to_string(),
            bootstrap_seed: options.seed,
            bootstrap_resamples: options.resamples,
            level: options.level,
            manifest_seed: options.manifest_seed,
            run_seed: options.run_seed,
        },
    };
    Ok(Evaluation {
        report,
        predictions,
        embeddings,
    })
}

/// Stored descriptions of `q` for the given records, in record order.
pub fn split_descriptions(
    pipeline: &Pipeline,
    q: &Prompt,
    records: &[SampleRecord],
) -> Vec<Description> {
    let wanted: HashSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let mut out: Vec<Description> = pipeline
        .store()
        .for_prompt(&q.id)
        .into_iter()
        .filter(|d| wanted.contains(d.sample_id.as_str()))
        .collect();
    out.dedup_by(|a, b| a.sample_id == b.sample_id);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub iteration: u32,
    pub phase: Phase,
    pub best_accuracy: f64,
    pub best_diversity: f64,
    pub tau: f64,
    pub pool: Vec<String>,
}

pub fn trajectory_report(logs: &[IterationLog]) -> Vec<TrajectoryRow> {
    logs.iter()
        .map(|l| TrajectoryRow {
            iteration: l.iteration,
            phase: l.phase,
            best_accuracy: l.best_train_accuracy,
            best_diversity: l.best_diversity,
            tau: l.tau,
            pool: l.retained.clone(),
        })
        .collect()
}

pub fn trajectory_csv(rows: &[TrajectoryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "iteration",
        "phase",
        "best_accuracy",
        "best_diversity",
        "tau",
        "pool",
    ])?;
    for r in rows {
        w.write_record([
            r.iteration.to_string(),
            r.phase.to_string(),
            format!("{:.6}", r.best_accuracy),
            format!("{:.6}", r.best_diversity),
            format!("{:.6}", r.tau),
            r.pool.join(" "),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io("trajectory.csv", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    pub ids: Vec<String>,
    pub labels: Vec<Label>,
    pub rows: Vec<Vec<f64>>,
}

impl EmbeddingMatrix {
    /// Header `id,e0..e{d-1},label`, one row per description.
    pub fn to_csv(&self) -> Result<String> {
        let dim = self.rows.first().map_or(0, Vec::len);
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["id".to_string()];
        header.extend((0..dim).map(|i| format!("e{i}")));
        header.push("label".into());
        w.write_record(&header)?;
        for ((id, label), row) in self.ids.iter().zip(&self.labels).zip(&self.rows) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            rec.push(label.clone());
            w.write_record(&rec)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::io("embeddings.csv", e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv()?.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Separation {
    pub silhouette: f64,
    pub matrix: EmbeddingMatrix,
}

/// Embeds each description and scores label clusters by mean silhouette.
pub fn embedding_separation(
    descriptions: &[Description],
    records: &[SampleRecord],
    gateway: &Gateway,
) -> Result<Separation> {
    let label_of: BTreeMap<&str, &str> = records
        .iter()
        .map(|r| (r.id.as_str(), r.label.as_str()))
        .collect();
    let labelled: Vec<(&Description, &str)> = descriptions
        .iter()
        .filter_map(|d| label_of.get(d.sample_id.as_str()).map(|l| (d, *l)))
        .collect();
    let rows: Vec<Vec<f64>> = labelled
        .par_iter()
        .map(|(d, _)| gateway.embed(&d.text))
        .collect::<std::result::Result<_, _>>()?;
    let labels: Vec<Label> = labelled.iter().map(|(_, l)| l.to_string()).collect();
    let silhouette = silhouette(&rows, &labels)?;
    Ok(Separation {
        silhouette,
        matrix: EmbeddingMatrix {
            ids: labelled.iter().map(|(d, _)| d.id()).collect(),
            labels,
            rows,
        },
    })
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Mean silhouette coefficient with Euclidean distance. A point whose
/// intra- and nearest-cluster distances are both zero scores 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[Label]) -> Result<f64> {
    let mut clusters: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        clusters.entry(l.as_str()).or_default().push(i);
    }
    if clusters.len() < 2 {
        return Err(Error::DegenerateClusters(format!(
            "{} label(s) present, need 2",
            clusters.len()
        )));
    }
    if let Some((l, m)) = clusters.iter().find(|(_, m)| m.len() < 2) {
        return Err(Error::DegenerateClusters(format!(
            "class {l:?} has {} member(s)",
            m.len()
        )));
    }
    let mean_dist = |i: usize, members: &[usize]| -> f64 {
        let others: Vec<usize> = members.iter().copied().filter(|&j| j != i).collect();
        others
            .iter()
            .map(|&j| euclidean(&points[i], &points[j]))
            .sum::<f64>()
            / others.len() as f64
    };
    let total: f64 = (0..points.len())
        .map(|i| {
            let own = labels[i].as_str();
            let a = mean_dist(i, &clusters[own]);
            let b = clusters
                .iter()
                .filter(|(l, _)| **l != own)
                .map(|(_, m)| mean_dist(i, m))
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom == 0.0 {
                0.0
            } else {
                (b - a) / denom
            }
        })
        .sum();
    Ok(total / points.len() as f64)
}

/// Accuracy with its interval as `pct [lo, hi]`.
pub fn format_cell(accuracy: f64, ci: (f64, f64)) -> String {
    format!(
        "{:.2} [{:.2}, {:.2}]",
        accuracy * 100.0,
        ci.0 * 100.0,
        ci.1 * 100.0
    )
}

/// Model / Metric rows with Init. and Opti. columns per task.
pub fn render_table(reports: &[&EvalReport]) -> String {
    let mut tasks: Vec<&str> = Vec::new();
    let mut models: Vec<&str> = Vec::new();
    for r in reports {
        if !tasks.contains(&r.task.as_str()) {
            tasks.push(&r.task);
        }
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    let mut out = String::from("| Model | Metric |");
    for t in &tasks {
        out.push_str(&format!(" {t} Init. | {t} Opti. |"));
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---|---|".repeat(tasks.len()));
    out.push('\n');
    let pct = |v: f64| format!("{:.2}", v * 100.0);
    for m in &models {
        let metrics: [(&str, MetricFn); 3] = [
            ("Accuracy", |a| a.accuracy),
            ("Lower CI", |a| a.ci95.0),
            ("Upper CI", |a| a.ci95.1),
        ];
        for (name, get) in metrics {
            out.push_str(&format!("| {m} | {name} |"));
            for t in &tasks {
                let r = reports.iter().find(|r| r.model == *m && r.task == *t);
                let init = r
                    .and_then(|r| r.initial.as_ref())
                    .map_or("-".into(), |a| pct(get(a)));
                let opti = r.map_or("-".into(), |r| pct(get(&r.optimized)));
                out.push_str(&format!(" {init} | {opti} |"));
            }
            out.push('\n');
        }
    }
    out
}

fn render_confusion(title: &str, c: &ConfusionMatrix) -> String {
    let mut out = format!("\n### {title}\n\n| true \\ predicted |");
    for l in &c.labels {
        out.push_str(&format!(" {l} |"));
    }
    out.push_str(&format!(" {PARSE_FAILURE_COLUMN} |\n|---|"));
    out.push_str(&"---|".repeat(c.labels.len() + 1));
    out.push('\n');
    for (l, row) in c.labels.iter().zip(&c.counts) {
        out.push_str(&format!("| {l} |"));
        for v in row {
            out.push_str(&format!(" {v} |"));
        }
        out.push('\n');
    }
    out
}

pub fn render_markdown(report: &EvalReport) -> String {
    let mut out = format!("# Evaluation: {}\n\n", report.task);
    out.push_str(&format!(
        "n_test = {}, backend = {}, optimized prompt = {}\n\n",
        report.n_test, report.provenance.backend_id, report.optimized.prompt_id
    ));
    out.push_str(&render_table(&[report]));
    out.push_str(&format!(
        "\nOptimized: {}\n",
        format_cell(report.optimized.accuracy, report.optimized.ci95)
    ));
    if let Some(a) = &report.initial {
        out.push_str(&format!("Initial: {}\n", format_cell(a.accuracy, a.ci95)));
    }
    if let Some(a) = &report.zero_shot {
        out.push_str(&format!("Zero-shot: {}\n", format_cell(a.accuracy, a.ci95)));
    }
    out.push_str("\n| Class | TPR |\n|---|---|\n");
    for (l, t) in &report.optimized.per_class_tpr {
        out.push_str(&format!("| {l} | {t:.4} |\n"));
    }
    if let Some(s) = report.silhouette {
        out.push_str(&format!("\nSilhouette (optimized): {s:.4}\n"));
    }
    if let Some(s) = report.initial_silhouette {
        out.push_str(&format!("Silhouette (initial): {s:.4}\n"));
    }
    if let Some(a) = &report.zero_shot {
        out.push_str(&render_confusion("Zero-shot confusion", &a.confusion));
    }
    if let Some(a) = &report.initial {
        out.push_str(&render_confusion("Initial confusion", &a.confusion));
    }
    out.push_str(&render_confusion(
        "Optimized confusion",
        &report.optimized.confusion,
    ));
    out
}
