//! Closed-world synthetic testbed standing in for labelled pathology images.
//!
//! Each class owns one feature per morphologic group (invasion, architecture,
//! nuclear, stroma, mitotic). Every feature phrase contains its group keyword,
//! so a prompt that names a feature also covers the whole group. A sample
//! carries `features_per_sample` of its own class's features and, with
//! probability `cross_class_prob`, one feature of another class.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Manifest, Provenance};
use crate::domain::{sha256_hex, Label, LabelSet, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::scoring::Lexicon;

/// (group keyword, [(class, feature phrase, synonyms)])
type GroupSpec = (
    &'static str,
    [(&'static str, &'static str, [&'static str; 2]); 3],
);

const GROUPS: [GroupSpec; 5] = [
    (
        "invasion",
        [
            (
                "Normal",
                "absent invasion",
                ["intact basement membrane", "preserved lobular units"],
            ),
            (
                "DCIS",
                "contained invasion margin",
                ["intact myoepithelial layer", "duct-confined proliferation"],
            ),
            (
                "Invasive",
                "stromal invasion",
                ["infiltrative growth", "single-file infiltration"],
            ),
        ],
    ),
    (
        "architecture",
        [
            (
                "Normal",
                "lobular architecture",
                ["organized acini", "terminal duct lobular unit"],
            ),
            (
                "DCIS",
                "solid duct architecture",
                ["expanded ducts", "comedo necrosis"],
            ),
            (
                "Invasive",
                "cribriform architecture",
                ["punched-out lumens", "back-to-back glands"],
            ),
        ],
    ),
    (
        "nuclear",
        [
            (
                "Normal",
                "uniform nuclear size",
                ["bland chromatin", "evenly spaced nuclei"],
            ),
            (
                "DCIS",
                "nuclear enlargement",
                ["hyperchromasia", "coarse chromatin"],
            ),
            (
                "Invasive",
                "nuclear pleomorphism",
                ["cellular atypia", "prominent nucleoli"],
            ),
        ],
    ),
    (
        "stroma",
        [
            (
                "Normal",
                "fibrous stroma",
                ["collagenous background", "hypocellular collagen"],
            ),
            (
                "DCIS",
                "periductal stroma",
                ["periductal fibrosis", "periductal inflammation"],
            ),
            (
                "Invasive",
                "desmoplastic stroma",
                ["desmoplastic reaction", "reactive fibroblasts"],
            ),
        ],
    ),
    (
        "mitotic",
        [
            (
                "Normal",
                "rare mitotic figures",
                ["low proliferation", "quiescent epithelium"],
            ),
            (
                "DCIS",
                "scattered mitotic figures",
                ["moderate proliferation", "intermediate grade"],
            ),
            (
                "Invasive",
                "frequent mitotic figures",
                ["high proliferative index", "atypical mitoses"],
            ),
        ],
    ),
];

pub const STUB_DESCRIPTION: &str = "tissue section with unremarkable appearance";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feature {
    pub phrase: String,
    pub group: String,
    pub class: Label,
}

/// Class-feature dictionary: which feature belongs to which class and group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDictionary {
    /// Group keywords in fixed order.
    pub groups: Vec<String>,
    pub features: Vec<Feature>,
}

impl FeatureDictionary {
    pub fn features_of<'a>(&'a self, class: &'a str) -> impl Iterator<Item = &'a Feature> + 'a {
        self.features.iter().filter(move |f| f.class == class)
    }

    pub fn get(&self, phrase: &str) -> Option<&Feature> {
        self.features.iter().find(|f| f.phrase == phrase)
    }
}

pub type SynonymTable = BTreeMap<String, Vec<String>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulatedSample {
    pub id: String,
    pub true_label: Label,
    pub features: BTreeSet<String>,
    /// Cross-class confounders present in `features`.
    pub artifacts: BTreeSet<String>,
    pub split: Split,
}

impl SimulatedSample {
    /// Stable hash of the sample content; plays the role of an image hash.
    pub fn source_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("sample serializes");
        sha256_hex(canonical.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestbedConfig {
    pub classes: Vec<Label>,
    pub features_per_class: usize,
    pub features_per_sample: usize,
    pub cross_class_prob: f64,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for TestbedConfig {
    fn default() -> Self {
        TestbedConfig {
            classes: vec!["Normal".into(), "Invasive".into()],
            features_per_class: 5,
            features_per_sample: 3,
            cross_class_prob: 0.2,
            n_train: 60,
            n_test: 80,
        }
    }
}

impl TestbedConfig {
    fn validate(&self) -> Result<()> {
        let known: Vec<&str> = GROUPS[0].1.iter().map(|(c, _, _)| *c).collect();
        if self.classes.len() < 2 {
            return Err(Error::InvalidConfig(
                "testbed needs at least two classes".into(),
            ));
        }
        for c in &self.classes {
            if !known.contains(&c.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "testbed class {c:?} not in built-in dictionary {known:?}"
                )));
            }
        }
        if self.features_per_class == 0 || self.features_per_class > GROUPS.len() {
            return Err(Error::InvalidConfig(format!(
                "features_per_class must be in 1..={}",
                GROUPS.len()
            )));
        }
        if self.features_per_sample == 0 || self.features_per_sample > self.features_per_class {
            return Err(Error::InvalidConfig(
                "features_per_sample must be in 1..=features_per_class".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.cross_class_prob) {
            return Err(Error::InvalidConfig(
                "cross_class_prob must be in [0,1]".into(),
            ));
        }
        let k = self.classes.len();
        if !self.n_train.is_multiple_of(k) || !self.n_test.is_multiple_of(k) {
            return Err(Error::InvalidConfig(format!(
                "n_train and n_test must be divisible by the class count {k} for balance"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Testbed {
    pub config: TestbedConfig,
    pub seed: u64,
    pub dictionary: FeatureDictionary,
    pub synonyms: SynonymTable,
    pub lexicon: Lexicon,
    pub samples: Vec<SimulatedSample>,
}

impl Testbed {
    pub fn sample(&self, id: &str) -> Option<&SimulatedSample> {
        self.samples
            .binary_search_by(|s| s.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.samples[i])
    }

    pub fn label_set(&self) -> LabelSet {
        LabelSet::new(self.config.classes.clone(), BTreeMap::new()).expect("validated classes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Builds the testbed and its manifest. `testbed_file` is the file name the
/// manifest's image refs point into.
pub fn generate_synthetic_testbed(
    config: &TestbedConfig,
    seed: u64,
    testbed_file: &str,
) -> Result<(Manifest, Testbed)> {
    config.validate()?;
    let groups = &GROUPS[..config.features_per_class];
    let mut features = Vec::new();
    let mut synonyms = SynonymTable::new();
    for (group, per_class) in groups {
        for (class, phrase, syns) in per_class {
            if config.classes.iter().any(|c| c == class) {
                features.push(Feature {
                    phrase: phrase.to_string(),
                    group: group.to_string(),
                    class: class.to_string(),
                });
                synonyms.insert(
                    phrase.to_string(),
                    syns.iter().map(|s| s.to_string()).collect(),
                );
            }
        }
    }
    let dictionary = FeatureDictionary {
        groups: groups.iter().map(|(g, _)| g.to_string()).collect(),
        features,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for (split, total) in [(Split::Train, config.n_train), (Split::Test, config.n_test)] {
        let per_class = total / config.classes.len();
        let mut n = 0usize;
        for class in &config.classes {
            let own: Vec<&str> = dictionary
                .features_of(class)
                .map(|f| f.phrase.as_str())
                .collect();
            let other: Vec<&str> = dictionary
                .features
                .iter()
                .filter(|f| &f.class != class)
                .map(|f| f.phrase.as_str())
                .collect();
            for _ in 0..per_class {
                n += 1;
                let mut feats: BTreeSet<String> = own
                    .choose_multiple(&mut rng, config.features_per_sample)
                    .map(|s| s.to_string())
                    .collect();
                let mut artifacts = BTreeSet::new();
                if rng.gen_bool(config.cross_class_prob) {
                    let f = other.choose(&mut rng).expect("other classes exist");
                    feats.insert(f.to_string());
                    artifacts.insert(f.to_string());
                }
                samples.push(SimulatedSample {
                    id: format!("syn-{split}-{n:04}"),
                    true_label: class.clone(),
                    features: feats,
                    artifacts,
                    split,
                });
            }
        }
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));

    let lexicon = Lexicon::builtin();
    let testbed = Testbed {
        config: config.clone(),
        seed,
        dictionary,
        synonyms,
        lexicon,
        samples,
    };
    let label_set = testbed.label_set();
    let records = testbed
        .samples
        .iter()
        .map(|s| SampleRecord {
            id: s.id.clone(),
            image_ref: format!("{testbed_file}#{}", s.id),
            label: s.true_label.clone(),
            split: s.split,
            dataset: "synthetic".into(),
        })
        .collect();
    let mut params = BTreeMap::new();
    params.insert("testbed".to_string(), serde_json::to_value(config)?);
    let manifest = Manifest {
        dataset: "synthetic".into(),
        task: "synthetic".into(),
        label_set,
        records,
        provenance: Provenance {
            seed,
            params,
            ..Default::default()
        },
    };
    manifest.validate()?;
    Ok((manifest, testbed))
}
