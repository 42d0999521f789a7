//! End-to-end acceptance checks. Prints one line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use descprompt::cli::{
    cmd_dataset_build, evaluate_run, optimize_with_config, DatasetBuildArgs, EvaluateRequest,
};
use descprompt::config::{Config, Session};
use descprompt::datasets::testbed::{generate_synthetic_testbed, TestbedConfig};
use descprompt::domain::{Phase, Predicted, Prompt, SampleRecord, Split};
use descprompt::evaluation::{bootstrap_ci, confusion_matrix, embedding_separation, EvalReport};
use descprompt::gateway::{
    classifier_prompt_text, CallStats, Dialect, Gateway, RemoteBackend, RemoteConfig,
    SimulatedBackend, SimulatedConfig, DEFAULT_CLASSIFIER,
};
use descprompt::inference::{ImageSource, Pipeline};
use descprompt::optimizer::{select_top, OptimizationResult};
use descprompt::scoring::{accuracy_from_counts, count_terms, diversity_scores_prior, Lexicon};
use rand::{Rng, SeedableRng};
use serde_json::Value;

const RUNTIME_BUDGET: Duration = Duration::from_secs(60);

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

struct Check {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Check {
    fn new() -> Self {
        Check {
            failures: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn that(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        if ok {
            self.notes.push(what);
        } else {
            self.failures.push(what);
        }
    }

    fn outcome(self) -> Outcome {
        if self.failures.is_empty() {
            Outcome::Pass(self.notes.join("; "))
        } else {
            let mut detail = self.failures.join("; ");
            if !self.notes.is_empty() {
                detail.push_str(&format!(" | passed: {}", self.notes.join("; ")));
            }
            Outcome::Fail(detail)
        }
    }
}

struct Runs {
    _tmp: tempfile::TempDir,
    base: Config,
    result_a: OptimizationResult,
    result_single: OptimizationResult,
    report_a: EvalReport,
    optimize_time: Duration,
    identical_across_dirs: bool,
    warm_result_identical: bool,
    warm_report_identical: bool,
    warm_stats: BTreeMap<String, CallStats>,
}

fn eval_request() -> EvaluateRequest {
    EvaluateRequest {
        split: Split::Test,
        with_init: true,
        zero_shot: true,
        silhouette: true,
    }
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn prepare() -> descprompt::Result<Runs> {
    let tmp = tempfile::tempdir().expect("tempdir");
    let root = tmp.path().to_path_buf();
    let manifest = cmd_dataset_build(&DatasetBuildArgs {
        task: "synthetic".into(),
        catalog: None,
        labels_csv: None,
        testbed_config: None,
        seed: 42,
        out: root.join("data"),
    })?;
    let mut base = Config::default();
    base.paths.manifest = Some(manifest);

    let run_a = root.join("run-a");
    let run_b = root.join("run-b");
    let single = root.join("run-single");

    let started = Instant::now();
    let result_a = optimize_with_config(&base, &run_a)?;
    let optimize_time = started.elapsed();
    let report_a = evaluate_run(&run_a, &eval_request())?;
    optimize_with_config(&base, &run_b)?;
    let identical_across_dirs =
        read(&run_a.join("result.json")) == read(&run_b.join("result.json"));

    let mut single_cfg = base.clone();
    single_cfg.run = single_cfg.run.single_phase();
    let result_single = optimize_with_config(&single_cfg, &single)?;

    let result_before = read(&run_a.join("result.json"));
    let report_before = read(&run_a.join("report.json"));
    optimize_with_config(&base, &run_a)?;
    evaluate_run(&run_a, &eval_request())?;
    let warm_result_identical = result_before == read(&run_a.join("result.json"));
    let warm_report_identical = report_before == read(&run_a.join("report.json"));
    let warm_stats: BTreeMap<String, CallStats> =
        serde_json::from_slice(&read(&run_a.join("cache_stats.json"))).expect("cache stats parse");

    Ok(Runs {
        _tmp: tmp,
        base,
        result_a,
        result_single,
        report_a,
        optimize_time,
        identical_across_dirs,
        warm_result_identical,
        warm_report_identical,
        warm_stats,
    })
}

fn seed_train_accuracy(r: &OptimizationResult) -> f64 {
    r.train_accuracy[&r.seed_prompt.id]
}

fn criterion_1(r: &Runs) -> Outcome {
    let mut c = Check::new();
    let res = &r.result_a;
    let seed_acc = seed_train_accuracy(res);
    c.that(
        seed_acc <= 0.65,
        format!("seed train {seed_acc:.3} <= 0.65"),
    );
    c.that(
        res.q_star_train_accuracy >= 0.95,
        format!("q* train {:.3} >= 0.95", res.q_star_train_accuracy),
    );
    let test = r.report_a.optimized.accuracy;
    c.that(test >= 0.90, format!("q* test {test:.3} >= 0.90"));
    let iterations = res.logs.len().saturating_sub(1);
    let cap = res.config.n_phase1 + res.config.n_phase2;
    c.that(
        iterations <= cap,
        format!("{iterations} iterations <= {cap}"),
    );
    c.that(
        r.optimize_time < RUNTIME_BUDGET,
        format!("optimize took {:.2}s", r.optimize_time.as_secs_f64()),
    );
    c.that(
        r.identical_across_dirs,
        "result.json identical across run directories",
    );
    c.that(r.warm_result_identical, "result.json identical on rerun");
    c.outcome()
}

fn criterion_2(r: &Runs) -> Outcome {
    let mut c = Check::new();
    let res = &r.result_a;
    let phase1: Vec<f64> = res
        .logs
        .iter()
        .filter(|l| l.phase == Phase::Diversify)
        .map(|l| l.best_diversity)
        .collect();
    let monotone = phase1.windows(2).all(|w| w[1] >= w[0] - 1e-12);
    c.that(
        monotone,
        format!(
            "phase-1 best diversity non-decreasing: {}",
            phase1
                .iter()
                .map(|d| format!("{d:.3}"))
                .collect::<Vec<_>>()
                .join(" -> ")
        ),
    );
    let lex = Session::open(&r.base, None)
        .map(|s| s.lexicon)
        .unwrap_or_else(|_| Lexicon::builtin());
    let seed_terms = count_terms(&res.seed_prompt, &lex);
    let two_terms = count_terms(&res.q_star, &lex);
    let one_terms = count_terms(&r.result_single.q_star, &lex);
    c.that(
        two_terms >= 2 * seed_terms.max(1),
        format!("q* terms {seed_terms} -> {two_terms} (>= 2x)"),
    );
    c.that(
        one_terms < two_terms,
        format!("single-phase q* terms {one_terms} < two-phase {two_terms}"),
    );
    c.outcome()
}

fn criterion_3(r: &Runs) -> Outcome {
    let mut c = Check::new();
    let labels = &r.report_a.optimized.confusion.labels;
    let bias = labels.last().cloned().unwrap_or_default();
    let bias_col = labels.len() - 1;
    match &r.report_a.zero_shot {
        Some(z) => {
            let share =
                z.confusion.column_totals()[bias_col] as f64 / z.confusion.total().max(1) as f64;
            c.that(
                share >= 0.95,
                format!("zero-shot predicts {bias} for {:.1}%", 100.0 * share),
            );
        }
        None => c.that(false, "zero-shot arm missing"),
    }
    for (label, tpr) in &r.report_a.optimized.per_class_tpr {
        c.that(
            *tpr >= 0.85,
            format!("optimized TPR {label} {tpr:.3} >= 0.85"),
        );
    }
    c.outcome()
}

fn criterion_4() -> Outcome {
    let mut c = Check::new();
    let terms: Vec<String> = (0..20).map(|i| format!("term{i:02}")).collect();
    let lex = Lexicon::from_terms(terms.iter().cloned(), None).expect("lexicon");
    let text = |ids: &[usize]| {
        format!(
            "Describe {}.",
            ids.iter()
                .map(|&i| terms[i].as_str())
                .collect::<Vec<_>>()
                .join(", ")
        )
    };
    let earlier = Prompt::seed(&text(&[0, 1, 2, 3, 4, 5])).expect("prompt");
    let mut wide = Prompt::seed(&text(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9])).expect("prompt");
    let mut narrow = Prompt::seed(&text(&[0, 1, 2, 10, 11])).expect("prompt");
    wide.created_iteration = 1;
    narrow.created_iteration = 1;
    let history = [&earlier, &wide, &narrow];
    let scores = diversity_scores_prior(&[&wide, &narrow], &history, &lex);
    let t: Vec<usize> = scores.iter().map(|s| s.t).collect();
    let u: Vec<usize> = scores.iter().map(|s| s.u).collect();
    let d: Vec<f64> = scores.iter().map(|s| s.d).collect();
    c.that(t == [10, 5] && u == [4, 2], format!("T {t:?} U {u:?}"));
    c.that(
        (d[0] - 2.0).abs() < 1e-12 && (d[1] - 1.0).abs() < 1e-12,
        format!("D {d:?} == [2.0, 1.0]"),
    );
    c.that(
        scores
            .iter()
            .all(|s| (0.0..=2.0).contains(&s.d) && s.u <= s.t),
        "D in [0,2] and U <= T",
    );
    let s = accuracy_from_counts(6, 60);
    c.that((s - 0.9).abs() < 1e-12, format!("6 errors of 60 -> S {s}"));
    c.outcome()
}

fn criterion_5(r: &Runs) -> Outcome {
    let mut c = Check::new();
    let res = &r.result_a;
    let b = res.config.b;
    let l = res.config.l;
    let mut sizes_ok = true;
    let mut bound_ok = true;
    for log in res.logs.iter().skip(1) {
        let candidates = log.scores.len();
        sizes_ok &= log.retained.len() == b.min(candidates);
        bound_ok &= candidates <= log.pool_before.len() * (1 + l);
    }
    c.that(
        sizes_ok,
        format!("|Q_t| == min({b}, candidates) every iteration"),
    );
    c.that(bound_ok, format!("candidates <= |Q_(t-1)| * (1 + {l})"));

    let a = Prompt::seed("Describe the stroma.").expect("prompt");
    let mut later = a
        .child("Describe the stroma and nuclei.", 2, Phase::Optimize)
        .expect("prompt");
    let mut early = a
        .child("Describe the stroma and mitoses.", 1, Phase::Optimize)
        .expect("prompt");
    later.created_iteration = 2;
    early.created_iteration = 1;
    let scores: BTreeMap<String, f64> = [
        (a.id.clone(), 0.5),
        (later.id.clone(), 0.5),
        (early.id.clone(), 0.5),
    ]
    .into_iter()
    .collect();
    let (kept, _) = select_top(&[later.clone(), early.clone(), a.clone()], &scores, 2);
    let (kept_again, _) = select_top(&[a.clone(), early.clone(), later.clone()], &scores, 2);
    c.that(
        kept.iter().map(|p| &p.id).eq([&a.id, &early.id]) && kept == kept_again,
        "ties broken by creation iteration then id, independent of input order",
    );

    match res.history() {
        Ok(h) => {
            let all_reach = res
                .final_pool
                .iter()
                .chain(std::iter::once(&res.q_star))
                .all(|p| h.lineage(&p.id).last() == Some(&res.seed_prompt.id));
            c.that(all_reach, "every retained prompt traces back to the seed");
        }
        Err(e) => c.that(false, format!("history: {e}")),
    }
    c.outcome()
}

fn criterion_6(r: &Runs) -> Outcome {
    let mut c = Check::new();
    let ones = bootstrap_ci(&[true; 50], 1000, 0.95, 1);
    let zeros = bootstrap_ci(&[false; 50], 1000, 0.95, 1);
    c.that(ones == (1.0, 1.0), format!("all correct -> {ones:?}"));
    c.that(zeros == (0.0, 0.0), format!("all wrong -> {zeros:?}"));
    let mut rng = rand::rngs::StdRng::seed_from_u64(2024);
    let draws: Vec<bool> = (0..160).map(|_| rng.gen_bool(0.9)).collect();
    let (lo, hi) = bootstrap_ci(&draws, 1000, 0.95, 0);
    c.that(
        lo <= 0.9 && 0.9 <= hi && hi - lo < 0.12,
        format!("Bernoulli(0.9) n=160 -> [{lo:.3}, {hi:.3}]"),
    );
    let rep = &r.report_a;
    let arms = std::iter::once(&rep.optimized)
        .chain(rep.initial.as_ref())
        .chain(rep.zero_shot.as_ref());
    c.that(
        arms.into_iter().all(|a| a.confusion.total() == rep.n_test),
        format!("confusion totals == {}", rep.n_test),
    );
    c.outcome()
}

fn criterion_7(r: &Runs) -> Outcome {
    let mut c = Check::new();
    match (r.report_a.silhouette, r.report_a.initial_silhouette) {
        (Some(opt), Some(init)) => c.that(
            opt > init,
            format!("silhouette optimized {opt:.4} > seed {init:.4}"),
        ),
        _ => c.that(false, "silhouette missing from report"),
    }

    let (_, mut tb) =
        generate_synthetic_testbed(&TestbedConfig::default(), 42, "testbed.json").expect("testbed");
    let words: Vec<String> = (0..12).map(|i| format!("marker{i:02}")).collect();
    tb.lexicon = Lexicon::from_terms(words.iter().cloned(), None).expect("lexicon");
    let backend =
        SimulatedBackend::new(Arc::new(tb), &SimulatedConfig::default()).expect("backend");
    let gateway = Gateway::new(Arc::new(backend));
    let group = |shared: &[usize], own: usize| {
        shared
            .iter()
            .chain(std::iter::once(&own))
            .map(|&i| words[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let texts = [
        ("a1", "A", group(&[0, 1, 2, 3], 8)),
        ("a2", "A", group(&[0, 1, 2, 3], 9)),
        ("b1", "B", group(&[4, 5, 6, 7], 10)),
        ("b2", "B", group(&[4, 5, 6, 7], 11)),
    ];
    let records: Vec<SampleRecord> = texts
        .iter()
        .map(|(id, label, _)| SampleRecord {
            id: id.to_string(),
            image_ref: id.to_string(),
            label: label.to_string(),
            split: Split::Test,
            dataset: "analytic".into(),
        })
        .collect();
    let descriptions: Vec<descprompt::domain::Description> = texts
        .iter()
        .map(|(id, _, text)| descprompt::domain::Description {
            sample_id: id.to_string(),
            prompt_id: "analytic".into(),
            text: text.clone(),
            backend_id: "simulated".into(),
            params_hash: String::new(),
        })
        .collect();
    let expected = 1.0 - 1.0 / 5f64.sqrt();
    match embedding_separation(&descriptions, &records, &gateway) {
        Ok(sep) => c.that(
            (sep.silhouette - expected).abs() < 1e-9 && sep.silhouette > 0.5,
            format!("analytic silhouette {:.6} == {expected:.6}", sep.silhouette),
        ),
        Err(e) => c.that(false, format!("analytic silhouette: {e}")),
    }
    c.outcome()
}

fn criterion_8() -> Outcome {
    let mut c = Check::new();
    let path =
        Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/oracle_expectations.json");
    let fixture: Value = match std::fs::read(&path).map(|b| serde_json::from_slice(&b)) {
        Ok(Ok(v)) => v,
        _ => return Outcome::Fail(format!("cannot read {}", path.display())),
    };
    let cfg: TestbedConfig =
        serde_json::from_value(fixture["testbed_config"].clone()).expect("testbed config");
    let seed = fixture["testbed_seed"].as_u64().expect("seed");
    let bias = fixture["bias_label"].as_str().expect("bias").to_string();
    let (manifest, tb) = generate_synthetic_testbed(&cfg, seed, "testbed.json").expect("testbed");
    let tb = Arc::new(tb);
    let sim = SimulatedConfig {
        bias_label: Some(bias),
        ..SimulatedConfig::default()
    };
    let gateway = Arc::new(Gateway::new(Arc::new(
        SimulatedBackend::new(tb.clone(), &sim).expect("backend"),
    )));
    let pipeline = Pipeline::new(
        gateway,
        ImageSource::Synthetic(tb),
        manifest.label_set.clone(),
    );
    let p = Prompt::classifier(&classifier_prompt_text(
        DEFAULT_CLASSIFIER,
        &manifest.label_set.labels,
    ))
    .expect("classifier");
    c.that(
        fixture["classifier_prompt"].as_str() == Some(p.text.as_str()),
        "classifier prompt matches",
    );

    let mut checked = 0;
    for scenario in fixture["scenarios"].as_array().expect("scenarios") {
        let id = scenario["id"].as_str().unwrap_or("?");
        for split in [Split::Train, Split::Test] {
            let key = if split == Split::Train {
                "train"
            } else {
                "test"
            };
            let want = &scenario[key];
            let records = manifest.split_records(split);
            let set = match scenario["prompt"].as_str() {
                Some(q) => {
                    let q = Prompt::seed(q).expect("prompt");
                    pipeline.run_split(&records, &p, &q).map(|(set, _)| set)
                }
                None => pipeline.run_zero_shot(&records, &p),
            };
            let set = match set {
                Ok(s) => s,
                Err(e) => {
                    c.that(false, format!("{id}/{key}: {e}"));
                    continue;
                }
            };
            let confusion = confusion_matrix(&set.predictions, &manifest.label_set);
            let want_confusion: Vec<Vec<usize>> =
                serde_json::from_value(want["confusion"].clone()).unwrap_or_default();
            let mut errors: Vec<String> = set
                .predictions
                .iter()
                .filter(|pr| pr.predicted != Predicted::Label(pr.true_label.clone()))
                .map(|pr| pr.sample_id.clone())
                .collect();
            errors.sort();
            let mut want_errors: Vec<String> =
                serde_json::from_value(want["errors"].clone()).unwrap_or_default();
            want_errors.sort();
            let accuracy = accuracy_from_counts(errors.len(), set.len());
            let exact = set.n_correct as u64 == want["n_correct"].as_u64().unwrap_or(u64::MAX)
                && Some(accuracy) == want["accuracy"].as_f64()
                && confusion.counts == want_confusion
                && errors == want_errors;
            c.that(exact, format!("{id}/{key} {}/{}", set.n_correct, set.len()));
            checked += 1;
        }
    }
    c.that(checked >= 10, format!("{checked} scenario splits compared"));
    c.outcome()
}

fn criterion_9(r: &Runs) -> Outcome {
    let mut c = Check::new();
    for (command, stats) in &r.warm_stats {
        c.that(
            stats.calls == 0,
            format!(
                "{command}: {} backend calls, {} cache hits",
                stats.calls, stats.cache_hits
            ),
        );
    }
    c.that(
        r.warm_stats.contains_key("optimize") && r.warm_stats.contains_key("evaluate"),
        "stats recorded",
    );
    c.that(r.warm_result_identical, "result.json byte-identical");
    c.that(r.warm_report_identical, "report.json byte-identical");
    c.outcome()
}

/// Remote endpoints to probe: a config file named by `DESCPROMPT_LIVE_CONFIG`,
/// or the default endpoints whose key variables are set.
fn live_endpoints() -> Vec<RemoteConfig> {
    if let Some(path) = std::env::var_os("DESCPROMPT_LIVE_CONFIG") {
        return Config::load(Path::new(&path))
            .ok()
            .and_then(|c| c.backend.remote)
            .into_iter()
            .collect();
    }
    let defaults = [
        (
            Dialect::ChatCompletions,
            "https://api.openai.com/v1",
            "OPENAI_API_KEY",
            "gpt-4o",
        ),
        (
            Dialect::GenerateContent,
            "https://generativelanguage.googleapis.com/v1beta",
            "GEMINI_API_KEY",
            "gemini-2.0-flash",
        ),
    ];
    defaults
        .into_iter()
        .map(|(dialect, base_url, key, model)| RemoteConfig {
            dialect,
            base_url: base_url.into(),
            api_key_env: key.into(),
            model: model.into(),
            embed_model: None,
            timeout_secs: 120,
        })
        .collect()
}

fn criterion_10() -> Outcome {
    let endpoints: Vec<RemoteConfig> = live_endpoints()
        .into_iter()
        .filter(|e| {
            std::env::var(&e.api_key_env)
                .map(|k| !k.is_empty())
                .unwrap_or(false)
        })
        .collect();
    if endpoints.is_empty() {
        return Outcome::Skip("no API key variable set for any remote endpoint".into());
    }
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let record = SampleRecord {
        id: "probe".into(),
        image_ref: "probe_tile.png".into(),
        label: "Normal".into(),
        split: Split::Test,
        dataset: "probe".into(),
    };
    let labels = descprompt::domain::LabelSet::plain(&["Normal", "Invasive"]).expect("labels");
    let p = Prompt::classifier(&classifier_prompt_text(DEFAULT_CLASSIFIER, &labels.labels))
        .expect("classifier");
    let q = Prompt::seed(descprompt::gateway::DEFAULT_SEED_DESCRIPTION).expect("seed");
    let mut c = Check::new();
    for e in endpoints {
        let name = format!("{:?} {}", e.dialect, e.model);
        let backend = match RemoteBackend::new(e) {
            Ok(b) => b,
            Err(err) => {
                c.that(false, format!("{name}: {err}"));
                continue;
            }
        };
        let pipeline = Pipeline::new(
            Arc::new(Gateway::new(Arc::new(backend))),
            ImageSource::files(fixtures.clone()),
            labels.clone(),
        );
        let outcome = pipeline
            .generate_description(&record, &q)
            .and_then(|s| pipeline.predict(&record, &p, &s));
        match outcome {
            Ok(pred) => c.that(
                matches!(pred.predicted, Predicted::Label(_)),
                format!("{name}: parsed {:?}", pred.predicted),
            ),
            Err(err) => c.that(false, format!("{name}: {err}")),
        }
    }
    c.outcome()
}

fn main() {
    let runs = prepare();
    let needs_runs = |f: fn(&Runs) -> Outcome| match &runs {
        Ok(r) => f(r),
        Err(e) => Outcome::Fail(format!("pipeline run failed: {e}")),
    };
    let outcomes = [
        needs_runs(criterion_1),
        needs_runs(criterion_2),
        needs_runs(criterion_3),
        criterion_4(),
        needs_runs(criterion_5),
        needs_runs(criterion_6),
        needs_runs(criterion_7),
        criterion_8(),
        needs_runs(criterion_9),
        criterion_10(),
    ];
    let mut failed = 0;
    for (i, o) in outcomes.iter().enumerate() {
        let (tag, detail) = match o {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("criterion {}: {tag}: {detail}", i + 1);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
