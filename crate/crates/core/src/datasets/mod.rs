//! Manifests, task split construction, image preparation and the synthetic
//! testbed.

pub mod catalog;
pub mod image;
pub mod testbed;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{sha256_hex, Label, LabelSet, SampleRecord, Split};
use crate::error::{Error, Result};

pub use catalog::CatalogEntry;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    /// Realized per-class counts, keyed `"<split>/<label>"`.
    #[serde(default)]
    pub counts: BTreeMap<String, usize>,
    #[serde(default)]
    pub params: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    pub task: String,
    pub label_set: LabelSet,
    pub records: Vec<SampleRecord>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    dataset: String,
    task: String,
    label_set: LabelSet,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: ManifestHeader,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_records(&self, split: Split) -> Vec<SampleRecord> {
        self.split(split).cloned().collect()
    }

    pub fn count(&self, split: Split, label: &str) -> usize {
        self.split(split).filter(|r| r.label == label).count()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        let mut refs: BTreeMap<&str, Split> = BTreeMap::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::InvalidManifest(format!(
                    "duplicate sample id {}",
                    r.id
                )));
            }
            if !self.label_set.contains(&r.label) {
                return Err(Error::InvalidManifest(format!(
                    "sample {} has label {:?} outside the label set",
                    r.id, r.label
                )));
            }
            if let Some(prev) = refs.insert(r.image_ref.as_str(), r.split) {
                return Err(Error::InvalidManifest(format!(
                    "image {} appears twice ({prev} and {})",
                    r.image_ref, r.split
                )));
            }
        }
        Ok(())
    }

    /// Writes JSONL: one header object, then one record per line.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let header = HeaderLine {
            header: ManifestHeader {
                dataset: self.dataset.clone(),
                task: self.task.clone(),
                label_set: self.label_set.clone(),
                provenance: self.provenance.clone(),
            },
        };
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::InvalidManifest(format!("{} is empty", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let HeaderLine { header } = serde_json::from_str(&first)
            .map_err(|e| Error::InvalidManifest(format!("bad header line: {e}")))?;
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(&line)
                .map_err(|e| Error::InvalidManifest(format!("line {}: {e}", i + 2)))?;
            records.push(rec);
        }
        let m = Manifest {
            dataset: header.dataset,
            task: header.task,
            label_set: header.label_set,
            records,
            provenance: header.provenance,
        };
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskId {
    BracsNIc,
    BracsDcisIc,
    Bracs3class,
    BachNIc,
    SicapBinary,
    Synthetic,
}

impl TaskId {
    pub const ALL: [TaskId; 6] = [
        TaskId::BracsNIc,
        TaskId::BracsDcisIc,
        TaskId::Bracs3class,
        TaskId::BachNIc,
        TaskId::SicapBinary,
        TaskId::Synthetic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::BracsNIc => "bracs-n-ic",
            TaskId::BracsDcisIc => "bracs-dcis-ic",
            TaskId::Bracs3class => "bracs-3class",
            TaskId::BachNIc => "bach-n-ic",
            TaskId::SicapBinary => "sicap-binary",
            TaskId::Synthetic => "synthetic",
        }
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown task {s:?}")))
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestCounts {
    /// Sample exactly this many per class from what remains after training.
    PerClass(BTreeMap<Label, usize>),
    /// Take every catalog entry marked as published test data.
    PublishedSplit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub dataset: String,
    pub label_set: LabelSet,
    /// Lower-cased original label -> task label. Unlisted labels are dropped.
    pub grouping: BTreeMap<String, Label>,
    pub train_per_class: BTreeMap<Label, usize>,
    pub test: TestCounts,
}

fn counts(pairs: &[(&str, usize)]) -> BTreeMap<Label, usize> {
    pairs.iter().map(|(l, n)| (l.to_string(), *n)).collect()
}

fn grouping(pairs: &[(&str, &str)]) -> BTreeMap<String, Label> {
    pairs
        .iter()
        .map(|(from, to)| (from.to_lowercase(), to.to_string()))
        .collect()
}

impl TaskSpec {
    /// Built-in split protocol for a task. The synthetic task has no catalog;
    /// it is produced by [`testbed::generate_synthetic_testbed`].
    pub fn for_task(id: TaskId) -> Result<Self> {
        let bracs_grouping = grouping(&[
            ("0_N", "Normal"),
            ("N", "Normal"),
            ("Normal", "Normal"),
            ("5_DCIS", "DCIS"),
            ("DCIS", "DCIS"),
            ("6_IC", "Invasive"),
            ("IC", "Invasive"),
            ("Invasive", "Invasive"),
        ]);
        let bracs = |labels: &[&str]| -> Result<TaskSpec> {
            let label_set = LabelSet::plain(labels)?;
            let g = bracs_grouping
                .iter()
                .filter(|(_, to)| labels.contains(&to.as_str()))
                .map(|(a, b)| (a.clone(), b.clone()))
                .collect();
            Ok(TaskSpec {
                id,
                dataset: "BRACS".into(),
                train_per_class: labels.iter().map(|l| (l.to_string(), 30)).collect(),
                label_set,
                grouping: g,
                test: TestCounts::PublishedSplit,
            })
        };
        match id {
            TaskId::BracsNIc => bracs(&["Normal", "Invasive"]),
            TaskId::BracsDcisIc => bracs(&["DCIS", "Invasive"]),
            TaskId::Bracs3class => bracs(&["Normal", "DCIS", "Invasive"]),
            TaskId::BachNIc => Ok(TaskSpec {
                id,
                dataset: "BACH".into(),
                label_set: LabelSet::plain(&["Normal", "Invasive"])?,
                grouping: grouping(&[("Normal", "Normal"), ("Invasive", "Invasive")]),
                train_per_class: counts(&[("Normal", 60), ("Invasive", 60)]),
                test: TestCounts::PerClass(counts(&[("Normal", 40), ("Invasive", 40)])),
            }),
            TaskId::SicapBinary => Ok(TaskSpec {
                id,
                dataset: "SICAPv2".into(),
                label_set: LabelSet::plain(&["Non-cancer", "Cancer"])?,
                grouping: grouping(&[
                    ("NC", "Non-cancer"),
                    ("Non-cancer", "Non-cancer"),
                    ("G3", "Cancer"),
                    ("G4", "Cancer"),
                    ("G5", "Cancer"),
                ]),
                train_per_class: counts(&[("Non-cancer", 100), ("Cancer", 100)]),
                test: TestCounts::PerClass(counts(&[("Non-cancer", 644), ("Cancer", 642)])),
            }),
            TaskId::Synthetic => Err(Error::InvalidConfig(
                "the synthetic task is generated, not built from a catalog".into(),
            )),
        }
    }
}

fn class_rng(seed: u64, class_index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (class_index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn record_id(path: &str) -> String {
    let stem = Path::new(path)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("img");
    format!("{stem}-{}", &sha256_hex(path.as_bytes())[..8])
}

/// Applies label grouping, then seeded per-class sampling without replacement.
pub fn build_task_split(catalog: &[CatalogEntry], spec: &TaskSpec, seed: u64) -> Result<Manifest> {
    let mut seen_paths = BTreeSet::new();
    let mut by_class: BTreeMap<&str, Vec<&CatalogEntry>> = BTreeMap::new();
    for e in catalog {
        if !seen_paths.insert(e.path.as_str()) {
            return Err(Error::InvalidManifest(format!(
                "catalog lists {} twice",
                e.path
            )));
        }
        if let Some(label) = spec.grouping.get(&e.label.to_lowercase()) {
            by_class.entry(label.as_str()).or_default().push(e);
        }
    }

    let mut records = Vec::new();
    let mut realized = BTreeMap::new();
    let mut push = |entries: &[&CatalogEntry], label: &str, split: Split| {
        for e in entries {
            records.push(SampleRecord {
                id: record_id(&e.path),
                image_ref: e.path.clone(),
                label: label.to_string(),
                split,
                dataset: spec.dataset.clone(),
            });
        }
        realized.insert(format!("{split}/{label}"), entries.len());
    };

    for (ci, label) in spec.label_set.labels.iter().enumerate() {
        let mut pool: Vec<&CatalogEntry> =
            by_class.get(label.as_str()).cloned().unwrap_or_default();
        pool.sort_by(|a, b| a.path.cmp(&b.path));
        let n_train = spec.train_per_class.get(label).copied().unwrap_or(0);
        let mut rng = class_rng(seed, ci);
        match &spec.test {
            TestCounts::PerClass(test_counts) => {
                let n_test = test_counts.get(label).copied().unwrap_or(0);
                if pool.len() < n_train + n_test {
                    return Err(Error::InsufficientSamples {
                        class: label.clone(),
                        needed: n_train + n_test,
                        available: pool.len(),
                    });
                }
                pool.shuffle(&mut rng);
                push(&pool[..n_train], label, Split::Train);
                push(&pool[n_train..n_train + n_test], label, Split::Test);
            }
            TestCounts::PublishedSplit => {
                let (mut train_pool, test_pool): (Vec<&CatalogEntry>, Vec<&CatalogEntry>) = pool
                    .into_iter()
                    .partition(|e| e.published_split != Some(Split::Test));
                if train_pool.len() < n_train {
                    return Err(Error::InsufficientSamples {
                        class: label.clone(),
                        needed: n_train,
                        available: train_pool.len(),
                    });
                }
                if test_pool.is_empty() {
                    return Err(Error::InsufficientSamples {
                        class: format!("{label} (published test split)"),
                        needed: 1,
                        available: 0,
                    });
                }
                train_pool.shuffle(&mut rng);
                push(&train_pool[..n_train], label, Split::Train);
                push(&test_pool, label, Split::Test);
            }
        }
    }
    records.sort_by(|a, b| (a.split == Split::Test, &a.id).cmp(&(b.split == Split::Test, &b.id)));

    let mut params = BTreeMap::new();
    params.insert("grouping".into(), serde_json::to_value(&spec.grouping)?);
    params.insert("catalog_size".into(), serde_json::json!(catalog.len()));
    let manifest = Manifest {
        dataset: spec.dataset.clone(),
        task: spec.id.to_string(),
        label_set: spec.label_set.clone(),
        records,
        provenance: Provenance {
            seed,
            counts: realized,
            params,
        },
    };
    manifest.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries(label: &str, n: usize, split: Option<Split>) -> Vec<CatalogEntry> {
        (0..n)
            .map(|i| CatalogEntry {
                path: format!("{label}/{label}_{i:04}.tif"),
                label: label.into(),
                published_split: split,
            })
            .collect()
    }

    #[test]
    fn bach_split_counts() {
        let mut cat = entries("Normal", 100, None);
        cat.extend(entries("Invasive", 100, None));
        cat.extend(entries("Benign", 100, None));
        let spec = TaskSpec::for_task(TaskId::BachNIc).unwrap();
        let m = build_task_split(&cat, &spec, 11).unwrap();
        assert_eq!(m.count(Split::Train, "Normal"), 60);
        assert_eq!(m.count(Split::Train, "Invasive"), 60);
        assert_eq!(m.count(Split::Test, "Normal"), 40);
        assert_eq!(m.count(Split::Test, "Invasive"), 40);
        assert_eq!(m.records.len(), 200);
    }

    #[test]
    fn sicap_grouping_and_counts() {
        let mut cat = entries("NC", 900, None);
        cat.extend(entries("G3", 300, None));
        cat.extend(entries("G4", 300, None));
        cat.extend(entries("G5", 200, None));
        let spec = TaskSpec::for_task(TaskId::SicapBinary).unwrap();
        let m = build_task_split(&cat, &spec, 3).unwrap();
        assert_eq!(m.count(Split::Train, "Non-cancer"), 100);
        assert_eq!(m.count(Split::Train, "Cancer"), 100);
        assert_eq!(m.count(Split::Test, "Non-cancer"), 644);
        assert_eq!(m.count(Split::Test, "Cancer"), 642);
        assert_eq!(m.split(Split::Test).count(), 1286);
        // every grouped record comes from a G3/G4/G5 entry
        for r in m.records.iter().filter(|r| r.label == "Cancer") {
            assert!(r.image_ref.starts_with('G'));
        }
    }

    #[test]
    fn insufficient_samples_names_class_and_shortfall() {
        let mut cat = entries("Normal", 100, None);
        cat.extend(entries("Invasive", 90, None));
        let spec = TaskSpec::for_task(TaskId::BachNIc).unwrap();
        let err = build_task_split(&cat, &spec, 1).unwrap_err();
        match &err {
            Error::InsufficientSamples {
                class,
                needed,
                available,
            } => {
                assert_eq!(class, "Invasive");
                assert_eq!((*needed, *available), (100, 90));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("short by 10"));
    }

    #[test]
    fn bracs_uses_published_test_split() {
        let mut cat = entries("0_N", 200, Some(Split::Train));
        cat.extend(entries("6_IC", 200, Some(Split::Train)));
        cat.extend(entries("5_DCIS", 200, Some(Split::Train)));
        let mut test = entries("0_N", 37, Some(Split::Test));
        for e in &mut test {
            e.path = format!("test/{}", e.path);
        }
        cat.extend(test);
        let mut test = entries("6_IC", 41, Some(Split::Test));
        for e in &mut test {
            e.path = format!("test/{}", e.path);
        }
        cat.extend(test);
        let spec = TaskSpec::for_task(TaskId::BracsNIc).unwrap();
        let m = build_task_split(&cat, &spec, 5).unwrap();
        assert_eq!(m.count(Split::Train, "Normal"), 30);
        assert_eq!(m.count(Split::Train, "Invasive"), 30);
        assert_eq!(m.count(Split::Test, "Normal"), 37);
        assert_eq!(m.count(Split::Test, "Invasive"), 41);
        assert_eq!(m.provenance.counts["test/Invasive"], 41);
        assert!(m.records.iter().all(|r| r.label != "DCIS"));
    }

    #[test]
    fn deterministic_and_disjoint() {
        let mut cat = entries("Normal", 100, None);
        cat.extend(entries("Invasive", 100, None));
        let spec = TaskSpec::for_task(TaskId::BachNIc).unwrap();
        let a = build_task_split(&cat, &spec, 9).unwrap();
        let b = build_task_split(&cat, &spec, 9).unwrap();
        let c = build_task_split(&cat, &spec, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.records, c.records);
        let train: BTreeSet<_> = a.split(Split::Train).map(|r| &r.image_ref).collect();
        assert!(a.split(Split::Test).all(|r| !train.contains(&r.image_ref)));
    }

    #[test]
    fn manifest_roundtrip() {
        let mut cat = entries("Normal", 100, None);
        cat.extend(entries("Invasive", 100, None));
        let spec = TaskSpec::for_task(TaskId::BachNIc).unwrap();
        let m = build_task_split(&cat, &spec, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.jsonl");
        m.write(&p).unwrap();
        assert_eq!(Manifest::read(&p).unwrap(), m);
    }

    #[test]
    fn duplicate_image_across_splits_is_invalid() {
        let ls = LabelSet::plain(&["A", "B"]).unwrap();
        let rec = |id: &str, split| SampleRecord {
            id: id.into(),
            image_ref: "same.png".into(),
            label: "A".into(),
            split,
            dataset: "x".into(),
        };
        let m = Manifest {
            dataset: "x".into(),
            task: "x".into(),
            label_set: ls,
            records: vec![rec("a", Split::Train), rec("b", Split::Test)],
            provenance: Provenance::default(),
        };
        assert!(m.validate().is_err());
    }
}
