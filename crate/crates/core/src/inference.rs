//! Describe-then-classify inference over manifest samples.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::image::{prepare_image, DEFAULT_JPEG_QUALITY, DEFAULT_MAX_SIDE};
use crate::datasets::testbed::Testbed;
use crate::domain::{
    compose_classification_input, parse_label, Description, ErrorCase, ErrorSet, LabelSet,
    Predicted, Prediction, Prompt, PromptRole, SampleRecord,
};
use crate::error::{Error, Result};
use crate::gateway::{Gateway, GatewayError, GenerationParams, ImagePart};

/// Where sample images come from.
pub enum ImageSource {
    /// `image_ref` is `<file>#<sample id>` into a synthetic testbed.
    Synthetic(Arc<Testbed>),
    /// `image_ref` is a path, relative refs resolved against `root`.
    Files {
        root: PathBuf,
        max_side: u32,
        jpeg_quality: u8,
        encoded: Mutex<HashMap<String, ImagePart>>,
    },
}

impl ImageSource {
    pub fn files(root: impl Into<PathBuf>) -> Self {
        ImageSource::Files {
            root: root.into(),
            max_side: DEFAULT_MAX_SIDE,
            jpeg_quality: DEFAULT_JPEG_QUALITY,
            encoded: Mutex::new(HashMap::new()),
        }
    }

    pub fn resolve(&self, record: &SampleRecord) -> Result<ImagePart> {
        match self {
            ImageSource::Synthetic(tb) => {
                let id = record
                    .image_ref
                    .rsplit_once('#')
                    .map(|(_, id)| id)
                    .unwrap_or(&record.image_ref);
                let sample = tb.sample(id).ok_or_else(|| {
                    Error::InvalidManifest(format!("sample {id} is not in the testbed"))
                })?;
                Ok(ImagePart::Synthetic {
                    sample_id: sample.id.clone(),
                    source_hash: sample.source_hash(),
                })
            }
            ImageSource::Files {
                root,
                max_side,
                jpeg_quality,
                encoded,
            } => {
                if let Some(hit) = encoded
                    .lock()
                    .expect("image memo lock")
                    .get(&record.image_ref)
                {
                    return Ok(hit.clone());
                }
                let path = root.join(&record.image_ref);
                let part = ImagePart::Encoded(prepare_image(&path, *max_side, *jpeg_quality)?);
                encoded
                    .lock()
                    .expect("image memo lock")
                    .insert(record.image_ref.clone(), part.clone());
                Ok(part)
            }
        }
    }
}

/// Generated descriptions keyed by sample, prompt, backend and parameters.
#[derive(Default)]
pub struct DescriptionStore {
    entries: Mutex<HashMap<String, Description>>,
}

impl DescriptionStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: &str) -> Option<Description> {
        self.entries.lock().expect("store lock").get(id).cloned()
    }

    pub fn insert(&self, d: Description) {
        self.entries.lock().expect("store lock").insert(d.id(), d);
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All descriptions produced by one prompt, sorted by sample id.
    pub fn for_prompt(&self, prompt_id: &str) -> Vec<Description> {
        let mut v: Vec<Description> = self
            .entries
            .lock()
            .expect("store lock")
            .values()
            .filter(|d| d.prompt_id == prompt_id)
            .cloned()
            .collect();
        v.sort_by(|a, b| {
            a.sample_id
                .cmp(&b.sample_id)
                .then(a.params_hash.cmp(&b.params_hash))
        });
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub q_id: String,
    pub p_id: String,
    pub predictions: Vec<Prediction>,
    pub n_correct: usize,
    pub n_parse_failures: usize,
}

impl PredictionSet {
    pub fn from_predictions(q_id: &str, p_id: &str, mut predictions: Vec<Prediction>) -> Self {
        predictions.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        PredictionSet {
            q_id: q_id.to_string(),
            p_id: p_id.to_string(),
            n_correct: predictions.iter().filter(|p| p.correct).count(),
            n_parse_failures: predictions
                .iter()
                .filter(|p| p.predicted == Predicted::ParseFailure)
                .count(),
            predictions,
        }
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn accuracy(&self) -> f64 {
        if self.predictions.is_empty() {
            0.0
        } else {
            let n = self.predictions.len();
            crate::scoring::accuracy_from_counts(n - self.n_correct, n)
        }
    }
}

#[derive(Serialize)]
struct PredictionLogLine<'a> {
    sample_id: &'a str,
    q_id: &'a str,
    p_id: &'a str,
    predicted: String,
    #[serde(rename = "true")]
    true_label: &'a str,
    correct: bool,
    raw_len: usize,
}

/// Appends one JSON object per prediction to `path`.
pub fn append_prediction_log(path: &Path, set: &PredictionSet) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    for p in &set.predictions {
        let line = PredictionLogLine {
            sample_id: &p.sample_id,
            q_id: &set.q_id,
            p_id: &set.p_id,
            predicted: p.predicted.to_string(),
            true_label: &p.true_label,
            correct: p.correct,
            raw_len: p.raw_output.len(),
        };
        serde_json::to_writer(&mut buf, &line)?;
        buf.push(b'\n');
    }
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub struct Pipeline {
    gateway: Arc<Gateway>,
    images: ImageSource,
    labels: LabelSet,
    store: DescriptionStore,
    pool: rayon::ThreadPool,
    /// Runs abort when more than this fraction of samples fail terminally.
    pub max_failure_fraction: f64,
}

impl Pipeline {
    pub fn new(gateway: Arc<Gateway>, images: ImageSource, labels: LabelSet) -> Self {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(gateway.max_in_flight())
            .build()
            .expect("thread pool builds");
        Pipeline {
            gateway,
            images,
            labels,
            store: DescriptionStore::new(),
            pool,
            max_failure_fraction: 0.2,
        }
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn store(&self) -> &DescriptionStore {
        &self.store
    }

    pub fn images(&self) -> &ImageSource {
        &self.images
    }

    fn describe_params(&self, trial: u32) -> GenerationParams {
        let mut p = self.gateway.params().describe.clone();
        p.trial = trial;
        p
    }

    fn classify_params(&self, trial: u32) -> GenerationParams {
        let mut p = self.gateway.params().classify.clone();
        p.trial = trial;
        p
    }

    /// Looks up the store first and only calls the model on a miss.
    pub fn generate_description(&self, record: &SampleRecord, q: &Prompt) -> Result<Description> {
        self.generate_description_trial(record, q, 0)
    }

    pub fn generate_description_trial(
        &self,
        record: &SampleRecord,
        q: &Prompt,
        trial: u32,
    ) -> Result<Description> {
        if q.role != PromptRole::DescriptionGen {
            return Err(Error::RoleMismatch {
                expected: PromptRole::DescriptionGen,
                found: q.role,
            });
        }
        let params = self.describe_params(trial);
        let mut d = Description {
            sample_id: record.id.clone(),
            prompt_id: q.id.clone(),
            text: String::new(),
            backend_id: self.gateway.backend_id().to_string(),
            params_hash: params.params_hash(),
        };
        if let Some(hit) = self.store.get(&d.id()) {
            return Ok(hit);
        }
        let image = self.images.resolve(record)?;
        d.text = self.gateway.describe_with(&image, q, &params)?;
        self.store.insert(d.clone());
        Ok(d)
    }

    /// Classifies `[p, s]` and parses the label.
    pub fn predict(
        &self,
        record: &SampleRecord,
        p: &Prompt,
        s: &Description,
    ) -> Result<Prediction> {
        self.predict_trial(record, p, s, 0)
    }

    fn predict_trial(
        &self,
        record: &SampleRecord,
        p: &Prompt,
        s: &Description,
        trial: u32,
    ) -> Result<Prediction> {
        let composed = compose_classification_input(p, &s.text)?;
        let image = self.images.resolve(record)?;
        let raw = self
            .gateway
            .classify_with(&image, &composed, &self.classify_params(trial))?;
        let predicted = parse_label(&raw, &self.labels);
        Ok(Prediction::new(
            &record.id,
            &record.label,
            predicted,
            raw,
            Some(s.id()),
        ))
    }

    /// Direct classification with `p` alone, no description.
    pub fn zero_shot_predict(&self, record: &SampleRecord, p: &Prompt) -> Result<Prediction> {
        if p.role != PromptRole::Classifier {
            return Err(Error::RoleMismatch {
                expected: PromptRole::Classifier,
                found: p.role,
            });
        }
        let image = self.images.resolve(record)?;
        let raw = self.gateway.classify(&image, &p.text)?;
        let predicted = parse_label(&raw, &self.labels);
        Ok(Prediction::new(
            &record.id,
            &record.label,
            predicted,
            raw,
            None,
        ))
    }

    fn one_sample(
        &self,
        record: &SampleRecord,
        p: &Prompt,
        q: &Prompt,
        trial: u32,
    ) -> Result<(Prediction, String, bool)> {
        let d = match self.generate_description_trial(record, q, trial) {
            Ok(d) => d,
            Err(Error::Gateway(e)) => {
                log::warn!("description unavailable for {}: {e}", record.id);
                return Ok((
                    Prediction::unavailable(&record.id, &record.label, e.to_string()),
                    String::new(),
                    true,
                ));
            }
            Err(e) => return Err(e),
        };
        match self.predict_trial(record, p, &d, trial) {
            Ok(pred) => Ok((pred, d.text, false)),
            Err(Error::Gateway(e)) => {
                log::warn!("classification failed for {}: {e}", record.id);
                let mut pred = Prediction::new(
                    &record.id,
                    &record.label,
                    Predicted::ParseFailure,
                    e.to_string(),
                    Some(d.id()),
                );
                pred.correct = false;
                Ok((pred, d.text, true))
            }
            Err(e) => Err(e),
        }
    }

    /// Predicts every record and collects the misclassified ones.
    pub fn run_split(
        &self,
        records: &[SampleRecord],
        p: &Prompt,
        q: &Prompt,
    ) -> Result<(PredictionSet, ErrorSet)> {
        self.run_split_trial(records, p, q, 0)
    }

    pub fn run_split_trial(
        &self,
        records: &[SampleRecord],
        p: &Prompt,
        q: &Prompt,
        trial: u32,
    ) -> Result<(PredictionSet, ErrorSet)> {
        for r in records {
            if !self.labels.contains(&r.label) {
                return Err(Error::InvalidManifest(format!(
                    "sample {} has label {} outside the label set",
                    r.id, r.label
                )));
            }
        }
        let outcomes: Vec<Result<(Prediction, String, bool)>> = self.pool.install(|| {
            records
                .par_iter()
                .map(|r| self.one_sample(r, p, q, trial))
                .collect()
        });
        let mut rows = Vec::with_capacity(records.len());
        for o in outcomes {
            rows.push(o?);
        }
        let failed = rows.iter().filter(|r| r.2).count();
        self.check_failures(failed, records.len())?;
        rows.sort_by(|a, b| a.0.sample_id.cmp(&b.0.sample_id));
        let cases = rows
            .iter()
            .filter(|(pred, _, _)| !pred.correct)
            .map(|(pred, text, _)| ErrorCase {
                sample_id: pred.sample_id.clone(),
                true_label: pred.true_label.clone(),
                predicted: pred.predicted.clone(),
                description_id: pred.used_description_id.clone(),
                description: text.clone(),
            })
            .collect();
        let set =
            PredictionSet::from_predictions(&q.id, &p.id, rows.into_iter().map(|r| r.0).collect());
        Ok((
            set,
            ErrorSet {
                prompt_id: q.id.clone(),
                cases,
            },
        ))
    }

    /// Zero-shot predictions for every record.
    pub fn run_zero_shot(&self, records: &[SampleRecord], p: &Prompt) -> Result<PredictionSet> {
        let outcomes: Vec<Result<(Prediction, bool)>> = self.pool.install(|| {
            records
                .par_iter()
                .map(|r| match self.zero_shot_predict(r, p) {
                    Ok(pred) => Ok((pred, false)),
                    Err(Error::Gateway(e)) => Ok((
                        Prediction::new(
                            &r.id,
                            &r.label,
                            Predicted::ParseFailure,
                            e.to_string(),
                            None,
                        ),
                        true,
                    )),
                    Err(e) => Err(e),
                })
                .collect()
        });
        let mut preds = Vec::with_capacity(records.len());
        let mut failed = 0;
        for o in outcomes {
            let (pred, f) = o?;
            failed += f as usize;
            preds.push(pred);
        }
        self.check_failures(failed, records.len())?;
        Ok(PredictionSet::from_predictions("zero-shot", &p.id, preds))
    }

    fn check_failures(&self, failed: usize, total: usize) -> Result<()> {
        if total > 0 && failed as f64 > self.max_failure_fraction * total as f64 {
            return Err(Error::RunAborted {
                failed,
                total,
                limit_pct: self.max_failure_fraction * 100.0,
            });
        }
        Ok(())
    }
}

/// Errors from a backend after all retries, as seen by callers that only
/// need to know whether the failure was terminal.
pub fn is_exhaustion(e: &Error) -> bool {
    matches!(e, Error::Gateway(GatewayError::Exhausted { .. }))
}
