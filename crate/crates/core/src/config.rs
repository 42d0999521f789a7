//! Effective configuration and the pipeline session it assembles.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::datasets::testbed::Testbed;
use crate::datasets::Manifest;
use crate::domain::Prompt;
use crate::error::{Error, Result};
use crate::evaluation::{DEFAULT_BOOTSTRAP_RESAMPLES, DEFAULT_LEVEL};
use crate::feedback::DEFAULT_CONTEXT_ITEMS;
use crate::gateway::{
    classifier_prompt_text, Backend, Gateway, RemoteBackend, RemoteConfig, ResponseCache,
    RetryPolicy, SimulatedBackend, SimulatedConfig, Templates, DEFAULT_CLASSIFIER,
    DEFAULT_SEED_DESCRIPTION,
};
use crate::inference::{ImageSource, Pipeline};
use crate::optimizer::RunConfig;
use crate::run_dir::{read_json, RunDir};
use crate::scoring::Lexicon;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    #[default]
    Simulated,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub simulated: SimulatedConfig,
    pub remote: Option<RemoteConfig>,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub cache: bool,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Simulated,
            simulated: SimulatedConfig::default(),
            remote: None,
            max_in_flight: 8,
            retry: RetryPolicy::default(),
            cache: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    /// Root for relative image refs; defaults to the manifest's directory.
    pub image_root: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    /// Response cache; defaults to `<run>/cache`.
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub seed_prompt: Option<String>,
    /// Classifier template with a `{labels}` placeholder.
    pub classifier_template: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            resamples: DEFAULT_BOOTSTRAP_RESAMPLES,
            level: DEFAULT_LEVEL,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeedbackConfig {
    pub ratings: Option<PathBuf>,
    /// Defaults to `keymap.json` beside the ratings file.
    pub keymap: Option<PathBuf>,
    pub k: usize,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        FeedbackConfig {
            ratings: None,
            keymap: None,
            k: DEFAULT_CONTEXT_ITEMS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub run: RunConfig,
    pub backend: BackendConfig,
    pub paths: PathsConfig,
    pub prompts: PromptConfig,
    pub evaluation: EvalConfig,
    pub feedback: FeedbackConfig,
}

impl Config {
    /// JSON or TOML, chosen by extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        match ext {
            "toml" => toml::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display()))),
            "json" => serde_json::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display()))),
            _ => Err(Error::InvalidConfig(format!(
                "{}: config must end in .json or .toml",
                path.display()
            ))),
        }
    }

    pub fn from_run_dir(dir: &RunDir) -> Result<Self> {
        read_json(&dir.config())
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        if self.backend.kind == BackendKind::Remote && self.backend.remote.is_none() {
            return Err(Error::InvalidConfig(
                "remote backend selected but [backend.remote] is missing".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.evaluation.level) || self.evaluation.resamples == 0 {
            return Err(Error::InvalidConfig(
                "evaluation level must be in (0,1) and resamples > 0".into(),
            ));
        }
        Ok(())
    }

    /// Makes every configured path absolute against `base`.
    pub fn absolutize(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.paths.manifest);
        fix(&mut self.paths.image_root);
        fix(&mut self.paths.lexicon);
        fix(&mut self.paths.templates);
        fix(&mut self.paths.cache_dir);
        fix(&mut self.feedback.ratings);
        fix(&mut self.feedback.keymap);
    }
}

/// Manifest, gateway, pipeline and prompts assembled from a [`Config`].
pub struct Session {
    pub config: Config,
    pub manifest: Manifest,
    pub testbed: Option<Arc<Testbed>>,
    pub gateway: Arc<Gateway>,
    pub pipeline: Pipeline,
    pub lexicon: Lexicon,
    pub seed_prompt: Prompt,
    pub classifier: Prompt,
}

/// Testbed file named by the first synthetic image ref, relative to the manifest.
fn testbed_path(manifest: &Manifest, manifest_path: &Path) -> Result<PathBuf> {
    let first = manifest
        .records
        .first()
        .ok_or_else(|| Error::InvalidManifest("manifest has no records".into()))?;
    let file = first
        .image_ref
        .split_once('#')
        .map(|(f, _)| f)
        .ok_or_else(|| {
            Error::InvalidManifest(format!(
                "synthetic image ref {:?} lacks '#'",
                first.image_ref
            ))
        })?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    Ok(dir.join(file))
}

impl Session {
    pub fn open(config: &Config, cache_dir: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let manifest_path = config
            .paths
            .manifest
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("no manifest given".into()))?;
        let manifest = Manifest::read(manifest_path)?;
        let synthetic = manifest.dataset == "synthetic";
        let testbed = if synthetic {
            Some(Arc::new(Testbed::load(&testbed_path(
                &manifest,
                manifest_path,
            )?)?))
        } else {
            None
        };

        let backend: Arc<dyn Backend> = match config.backend.kind {
            BackendKind::Simulated => {
                let tb = testbed.clone().ok_or_else(|| {
                    Error::InvalidConfig("the simulated backend needs a synthetic manifest".into())
                })?;
                Arc::new(SimulatedBackend::new(tb, &config.backend.simulated)?)
            }
            BackendKind::Remote => {
                let remote = config.backend.remote.clone().expect("validated");
                Arc::new(RemoteBackend::new(remote)?)
            }
        };
        let templates = match &config.paths.templates {
            Some(dir) => Templates::load_dir(dir)?,
            None => Templates::default(),
        };
        let mut gateway = Gateway::new(backend)
            .with_retry(config.backend.retry)
            .with_max_in_flight(config.backend.max_in_flight)
            .with_templates(templates);
        let cache_dir = config.paths.cache_dir.as_deref().or(cache_dir);
        if config.backend.cache {
            if let Some(dir) = cache_dir {
                gateway = gateway.with_cache(ResponseCache::open(dir)?);
            }
        }
        let gateway = Arc::new(gateway);

        let images = match (&testbed, &config.paths.image_root) {
            (Some(tb), _) if config.backend.kind == BackendKind::Simulated => {
                ImageSource::Synthetic(tb.clone())
            }
            (_, Some(root)) => ImageSource::files(root.clone()),
            _ => ImageSource::files(
                manifest_path
                    .parent()
                    .unwrap_or(Path::new("."))
                    .to_path_buf(),
            ),
        };
        let pipeline = Pipeline::new(gateway.clone(), images, manifest.label_set.clone());

        let lexicon = match (&config.paths.lexicon, &testbed) {
            (Some(p), _) => Lexicon::load(p)?,
            (None, Some(tb)) => tb.lexicon.clone(),
            (None, None) => Lexicon::builtin(),
        };
        let seed_prompt = Prompt::seed(
            config
                .prompts
                .seed_prompt
                .as_deref()
                .unwrap_or(DEFAULT_SEED_DESCRIPTION),
        )?;
        let template = config
            .prompts
            .classifier_template
            .as_deref()
            .unwrap_or(DEFAULT_CLASSIFIER);
        let classifier = Prompt::classifier(&classifier_prompt_text(
            template,
            &manifest.label_set.labels,
        ))?;
        Ok(Session {
            config: config.clone(),
            manifest,
            testbed,
            gateway,
            pipeline,
            lexicon,
            seed_prompt,
            classifier,
        })
    }
}
