//! Uniform contract for model calls, fronted by a content-addressed cache.
//!
//! Every call is expressed as a [`GatewayRequest`]. The request's canonical
//! serialization is the cache key, so a backend only ever sees cache misses.

mod cache;
mod remote;
mod simulated;
mod templates;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{canonicalize_prompt, sha256_hex, Phase, Predicted, Prompt, PromptRole};

pub use cache::{CacheEntry, CacheLookup, ResponseCache};
pub use remote::{Dialect, RemoteBackend, RemoteConfig};
pub use simulated::{SimulatedBackend, SimulatedConfig, NO_MISSING_CRITERIA};
pub use templates::{
    classifier_prompt_text, Templates, DEFAULT_CLASSIFIER, DEFAULT_SEED_DESCRIPTION,
};

pub const EMBEDDING_DIM: usize = 768;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("bad response: {0}")]
    BadResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("retries exhausted after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            GatewayError::Transport(_) | GatewayError::RateLimited(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RequestKind {
    Describe,
    Classify,
    Reflect,
    Modify,
    Embed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub backend_id: String,
    /// Image preparation settings; part of the key so re-encoding invalidates.
    #[serde(default)]
    pub image_max_side: u32,
    #[serde(default)]
    pub jpeg_quality: u8,
    /// Repetition index for repeated-trial evaluation. Trial 0 is the default.
    #[serde(default)]
    pub trial: u32,
}

impl GenerationParams {
    pub fn new(backend_id: &str, temperature: f64) -> Self {
        GenerationParams {
            temperature,
            max_output_tokens: 2048,
            backend_id: backend_id.to_string(),
            image_max_side: crate::datasets::image::DEFAULT_MAX_SIDE,
            jpeg_quality: crate::datasets::image::DEFAULT_JPEG_QUALITY,
            trial: 0,
        }
    }

    pub fn params_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("params serialize");
        sha256_hex(canonical.as_bytes())[..16].to_string()
    }
}

/// Default per-kind parameters: deterministic classification, creative
/// description and revision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub describe: GenerationParams,
    pub classify: GenerationParams,
    pub reflect: GenerationParams,
    pub modify: GenerationParams,
    pub embed: GenerationParams,
}

impl ParamSet {
    pub fn defaults(backend_id: &str) -> Self {
        ParamSet {
            describe: GenerationParams::new(backend_id, 0.7),
            classify: GenerationParams::new(backend_id, 0.0),
            reflect: GenerationParams::new(backend_id, 0.7),
            modify: GenerationParams::new(backend_id, 0.7),
            embed: GenerationParams::new(backend_id, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedImage {
    pub media_type: String,
    pub bytes_b64: String,
    pub source_hash: String,
    pub width: u32,
    pub height: u32,
}

/// The image sent with a request: a real encoded file or a reference to a
/// synthetic testbed sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImagePart {
    Encoded(EncodedImage),
    Synthetic {
        sample_id: String,
        source_hash: String,
    },
}

impl ImagePart {
    pub fn source_hash(&self) -> &str {
        match self {
            ImagePart::Encoded(e) => &e.source_hash,
            ImagePart::Synthetic { source_hash, .. } => source_hash,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayRequest {
    pub kind: RequestKind,
    /// Describe: `[q]`; Classify: `[composed]`; Embed: `[text]`.
    /// Reflect: `[rendered, q, case_json...]`.
    /// Modify: `[rendered, phase, q, reflection, feedback, case_json...]`.
    pub text_parts: Vec<String>,
    pub image_part: Option<ImagePart>,
    pub params: GenerationParams,
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    backend_id: &'a str,
    kind: RequestKind,
    text_parts: &'a [String],
    image_source_hash: Option<&'a str>,
    params: &'a GenerationParams,
}

impl GatewayRequest {
    pub fn new(
        kind: RequestKind,
        text_parts: Vec<String>,
        image_part: Option<ImagePart>,
        params: GenerationParams,
    ) -> Result<Self, GatewayError> {
        let needs_image = matches!(kind, RequestKind::Describe | RequestKind::Classify);
        if needs_image != image_part.is_some() {
            return Err(GatewayError::InvalidRequest(format!(
                "{kind:?} {} an image",
                if needs_image { "requires" } else { "forbids" }
            )));
        }
        if text_parts.is_empty() {
            return Err(GatewayError::InvalidRequest(format!(
                "{kind:?} has no text"
            )));
        }
        Ok(GatewayRequest {
            kind,
            text_parts,
            image_part,
            params,
        })
    }

    /// Canonical serialization used for cache keys. Image bytes are excluded;
    /// the original file's hash stands in for them.
    pub fn canonical(&self) -> String {
        serde_json::to_string(&KeyMaterial {
            backend_id: &self.params.backend_id,
            kind: self.kind,
            text_parts: &self.text_parts,
            image_source_hash: self.image_part.as_ref().map(|i| i.source_hash()),
            params: &self.params,
        })
        .expect("key material serializes")
    }

    pub fn cache_key(&self) -> String {
        sha256_hex(self.canonical().as_bytes())
    }
}

pub trait Backend: Send + Sync {
    fn backend_id(&self) -> &str;
    fn dispatch(&self, req: &GatewayRequest) -> Result<String, GatewayError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 4,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_retries: u32) -> Self {
        RetryPolicy {
            max_retries,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        let ms = self
            .base_delay_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_delay_ms);
        Duration::from_millis(ms)
    }
}

/// Counting semaphore bounding in-flight backend calls.
struct InFlight {
    limit: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut used = self.used.lock().expect("in-flight lock");
        while *used >= self.limit {
            used = self.freed.wait(used).expect("in-flight lock");
        }
        *used += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().expect("in-flight lock") -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallStats {
    /// Backend dispatches, including retries.
    pub calls: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub failures: u64,
}

impl CallStats {
    pub fn since(&self, earlier: &CallStats) -> CallStats {
        CallStats {
            calls: self.calls - earlier.calls,
            cache_hits: self.cache_hits - earlier.cache_hits,
            cache_misses: self.cache_misses - earlier.cache_misses,
            failures: self.failures - earlier.failures,
        }
    }
}

#[derive(Default)]
struct Counters {
    calls: AtomicU64,
    hits: AtomicU64,
    misses: AtomicU64,
    failures: AtomicU64,
}

/// One reflection/modification case as shown to the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionCase {
    pub sample_id: String,
    pub true_label: String,
    pub predicted: Predicted,
    pub description: String,
}

impl ReflectionCase {
    fn to_json(&self) -> String {
        serde_json::to_string(self).expect("case serializes")
    }
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    in_flight: InFlight,
    params: ParamSet,
    templates: Templates,
    counters: Counters,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        let params = ParamSet::defaults(backend.backend_id());
        Gateway {
            backend,
            cache: None,
            retry: RetryPolicy::default(),
            in_flight: InFlight {
                limit: 8,
                used: Mutex::new(0),
                freed: Condvar::new(),
            },
            params,
            templates: Templates::default(),
            counters: Counters::default(),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.in_flight.limit = limit.max(1);
        self
    }

    pub fn with_params(mut self, params: ParamSet) -> Self {
        self.params = params;
        self
    }

    pub fn with_templates(mut self, templates: Templates) -> Self {
        self.templates = templates;
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.backend_id()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn max_in_flight(&self) -> usize {
        self.in_flight.limit
    }

    pub fn cache(&self) -> Option<&ResponseCache> {
        self.cache.as_ref()
    }

    pub fn stats(&self) -> CallStats {
        CallStats {
            calls: self.counters.calls.load(Ordering::Relaxed),
            cache_hits: self.counters.hits.load(Ordering::Relaxed),
            cache_misses: self.counters.misses.load(Ordering::Relaxed),
            failures: self.counters.failures.load(Ordering::Relaxed),
        }
    }

    /// Cache lookup, then dispatch with retries on a miss.
    pub fn cached_call(&self, req: &GatewayRequest) -> Result<String, GatewayError> {
        let key = req.cache_key();
        if let Some(cache) = &self.cache {
            if let CacheLookup::Hit(resp) = cache.get(&key) {
                self.counters.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(resp);
            }
            self.counters.misses.fetch_add(1, Ordering::Relaxed);
        }
        let resp = self.dispatch_with_retry(req)?;
        if let Some(cache) = &self.cache {
            if let Err(e) = cache.put(&key, &req.canonical(), &resp) {
                log::warn!("cache write failed for {key}: {e}");
            }
        }
        Ok(resp)
    }

    fn dispatch_with_retry(&self, req: &GatewayRequest) -> Result<String, GatewayError> {
        let mut attempt = 0u32;
        loop {
            let result = {
                let _slot = self.in_flight.acquire();
                self.counters.calls.fetch_add(1, Ordering::Relaxed);
                self.backend.dispatch(req)
            };
            match result {
                Ok(r) => return Ok(r),
                Err(e) if e.is_retryable() && attempt < self.retry.max_retries => {
                    let wait = self.retry.delay(attempt);
                    log::debug!(
                        "retrying {:?} after {e} (attempt {})",
                        req.kind,
                        attempt + 1
                    );
                    if !wait.is_zero() {
                        std::thread::sleep(wait);
                    }
                    attempt += 1;
                }
                Err(e) => {
                    self.counters.failures.fetch_add(1, Ordering::Relaxed);
                    if e.is_retryable() {
                        return Err(GatewayError::Exhausted {
                            attempts: attempt + 1,
                            last: e.to_string(),
                        });
                    }
                    return Err(e);
                }
            }
        }
    }

    fn require_role(p: &Prompt, role: PromptRole) -> Result<(), GatewayError> {
        if p.role != role {
            return Err(GatewayError::InvalidRequest(format!(
                "expected a {role:?} prompt, got {:?}",
                p.role
            )));
        }
        Ok(())
    }

    pub fn describe(&self, image: &ImagePart, q: &Prompt) -> Result<String, GatewayError> {
        self.describe_with(image, q, &self.params.describe)
    }

    pub fn describe_with(
        &self,
        image: &ImagePart,
        q: &Prompt,
        params: &GenerationParams,
    ) -> Result<String, GatewayError> {
        Self::require_role(q, PromptRole::DescriptionGen)?;
        let req = GatewayRequest::new(
            RequestKind::Describe,
            vec![q.text.clone()],
            Some(image.clone()),
            params.clone(),
        )?;
        self.cached_call(&req)
    }

    pub fn classify(&self, image: &ImagePart, composed: &str) -> Result<String, GatewayError> {
        self.classify_with(image, composed, &self.params.classify)
    }

    pub fn classify_with(
        &self,
        image: &ImagePart,
        composed: &str,
        params: &GenerationParams,
    ) -> Result<String, GatewayError> {
        let req = GatewayRequest::new(
            RequestKind::Classify,
            vec![composed.to_string()],
            Some(image.clone()),
            params.clone(),
        )?;
        self.cached_call(&req)
    }

    pub fn reflect(
        &self,
        p: &Prompt,
        q: &Prompt,
        cases: &[ReflectionCase],
    ) -> Result<String, GatewayError> {
        Self::require_role(p, PromptRole::Classifier)?;
        Self::require_role(q, PromptRole::DescriptionGen)?;
        if cases.is_empty() {
            return Err(GatewayError::InvalidRequest(
                "reflection needs error cases".into(),
            ));
        }
        let rendered = self.templates.render_reflect(&q.text, &p.text, cases);
        let mut parts = vec![rendered, q.text.clone()];
        parts.extend(cases.iter().map(ReflectionCase::to_json));
        let req = GatewayRequest::new(
            RequestKind::Reflect,
            parts,
            None,
            self.params.reflect.clone(),
        )?;
        self.cached_call(&req)
    }

    /// Asks for a revised prompt. The child carries `q` as parent and is
    /// stamped with `iteration` and `phase`.
    #[allow(clippy::too_many_arguments)]
    pub fn modify(
        &self,
        q: &Prompt,
        reflection: &str,
        cases: &[ReflectionCase],
        feedback_ctx: Option<&str>,
        phase: Phase,
        iteration: u32,
    ) -> Result<Prompt, ModifyError> {
        Self::require_role(q, PromptRole::DescriptionGen)?;
        if reflection.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("empty reflection".into()).into());
        }
        let rendered =
            self.templates
                .render_modify(phase, &q.text, reflection, cases, feedback_ctx);
        let mut parts = vec![
            rendered,
            phase.to_string(),
            q.text.clone(),
            reflection.to_string(),
            feedback_ctx.unwrap_or_default().to_string(),
        ];
        parts.extend(cases.iter().map(ReflectionCase::to_json));
        let req =
            GatewayRequest::new(RequestKind::Modify, parts, None, self.params.modify.clone())?;
        let raw = self.cached_call(&req)?;
        let text = strip_fences(&raw);
        match canonicalize_prompt(text) {
            Ok(c) if c == q.text => Err(ModifyError::Degenerate),
            Ok(c) => Ok(q
                .child(&c, iteration, phase)
                .expect("canonical text is non-empty")),
            Err(_) => Err(ModifyError::Gateway(GatewayError::BadResponse(
                "empty revised prompt".into(),
            ))),
        }
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::InvalidRequest(
                "cannot embed empty text".into(),
            ));
        }
        let req = GatewayRequest::new(
            RequestKind::Embed,
            vec![text.to_string()],
            None,
            self.params.embed.clone(),
        )?;
        let raw = self.cached_call(&req)?;
        let v: Vec<f64> = serde_json::from_str(&raw).map_err(|e| {
            GatewayError::BadResponse(format!("embedding is not a float array: {e}"))
        })?;
        if v.len() != EMBEDDING_DIM {
            return Err(GatewayError::BadResponse(format!(
                "embedding has {} dimensions, expected {EMBEDDING_DIM}",
                v.len()
            )));
        }
        Ok(v)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModifyError {
    #[error("revised prompt is identical to its parent")]
    Degenerate,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn strip_fences(raw: &str) -> &str {
    let t = raw.trim();
    if let Some(inner) = t.strip_prefix("```") {
        let inner = inner.split_once('\n').map(|(_, rest)| rest).unwrap_or("");
        return inner.strip_suffix("```").unwrap_or(inner).trim();
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    struct Flaky {
        fail_first: u32,
        error: GatewayError,
        seen: AtomicU32,
    }

    impl Backend for Flaky {
        fn backend_id(&self) -> &str {
            "flaky"
        }
        fn dispatch(&self, _req: &GatewayRequest) -> Result<String, GatewayError> {
            let n = self.seen.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                Err(self.error.clone())
            } else {
                Ok("ok".into())
            }
        }
    }

    fn embed_req() -> GatewayRequest {
        GatewayRequest::new(
            RequestKind::Reflect,
            vec!["x".into()],
            None,
            GenerationParams::new("flaky", 0.7),
        )
        .unwrap()
    }

    fn flaky(fail_first: u32, error: GatewayError) -> (Arc<Flaky>, Gateway) {
        let b = Arc::new(Flaky {
            fail_first,
            error,
            seen: AtomicU32::new(0),
        });
        let g = Gateway::new(b.clone()).with_retry(RetryPolicy::no_delay(4));
        (b, g)
    }

    #[test]
    fn retries_transient_errors() {
        let (b, g) = flaky(3, GatewayError::RateLimited("429".into()));
        assert_eq!(g.cached_call(&embed_req()).unwrap(), "ok");
        assert_eq!(b.seen.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn gives_up_after_max_retries() {
        let (b, g) = flaky(100, GatewayError::Transport("reset".into()));
        let err = g.cached_call(&embed_req()).unwrap_err();
        assert!(matches!(err, GatewayError::Exhausted { attempts: 5, .. }));
        assert_eq!(b.seen.load(Ordering::SeqCst), 5);
        assert_eq!(g.stats().failures, 1);
    }

    #[test]
    fn never_retries_bad_response() {
        let (b, g) = flaky(100, GatewayError::BadResponse("schema".into()));
        assert!(matches!(
            g.cached_call(&embed_req()),
            Err(GatewayError::BadResponse(_))
        ));
        assert_eq!(b.seen.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn backoff_is_exponential_and_capped() {
        let r = RetryPolicy {
            max_retries: 4,
            base_delay_ms: 100,
            max_delay_ms: 500,
        };
        assert_eq!(r.delay(0), Duration::from_millis(100));
        assert_eq!(r.delay(2), Duration::from_millis(400));
        assert_eq!(r.delay(3), Duration::from_millis(500));
    }

    #[test]
    fn image_presence_is_validated() {
        let p = GenerationParams::new("b", 0.0);
        assert!(
            GatewayRequest::new(RequestKind::Describe, vec!["q".into()], None, p.clone()).is_err()
        );
        let img = ImagePart::Synthetic {
            sample_id: "s".into(),
            source_hash: "h".into(),
        };
        assert!(GatewayRequest::new(
            RequestKind::Reflect,
            vec!["q".into()],
            Some(img.clone()),
            p.clone()
        )
        .is_err());
        assert!(GatewayRequest::new(RequestKind::Classify, vec!["q".into()], Some(img), p).is_ok());
    }

    #[test]
    fn temperature_changes_key() {
        let a = embed_req();
        let mut b = a.clone();
        b.params.temperature = 0.0;
        assert_ne!(a.cache_key(), b.cache_key());
        assert_eq!(a.cache_key(), embed_req().cache_key());
    }

    #[test]
    fn image_key_uses_source_hash_only() {
        let img = |b64: &str| {
            ImagePart::Encoded(EncodedImage {
                media_type: "image/jpeg".into(),
                bytes_b64: b64.into(),
                source_hash: "abc".into(),
                width: 1,
                height: 1,
            })
        };
        let p = GenerationParams::new("b", 0.0);
        let a = GatewayRequest::new(
            RequestKind::Classify,
            vec!["x".into()],
            Some(img("AAA")),
            p.clone(),
        )
        .unwrap();
        let b = GatewayRequest::new(RequestKind::Classify, vec!["x".into()], Some(img("BBB")), p)
            .unwrap();
        assert_eq!(a.cache_key(), b.cache_key());
    }

    #[test]
    fn fences_are_stripped() {
        assert_eq!(strip_fences("```text\nhello\n```"), "hello");
        assert_eq!(strip_fences("  plain  "), "plain");
    }

    #[test]
    fn in_flight_limit_is_respected() {
        struct Slow {
            current: AtomicU32,
            peak: AtomicU32,
        }
        impl Backend for Slow {
            fn backend_id(&self) -> &str {
                "slow"
            }
            fn dispatch(&self, _r: &GatewayRequest) -> Result<String, GatewayError> {
                let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(5));
                self.current.fetch_sub(1, Ordering::SeqCst);
                Ok(String::new())
            }
        }
        let b = Arc::new(Slow {
            current: AtomicU32::new(0),
            peak: AtomicU32::new(0),
        });
        let g = Gateway::new(b.clone()).with_max_in_flight(3);
        std::thread::scope(|s| {
            for _ in 0..12 {
                s.spawn(|| g.cached_call(&embed_req()).unwrap());
            }
        });
        assert!(b.peak.load(Ordering::SeqCst) <= 3);
    }
}
