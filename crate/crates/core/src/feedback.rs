//! Blinded review bundles, ratings ingestion and feedback context for revisions.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{sha256_hex, Description};
use crate::error::{Error, Result};
use crate::run_dir::{read_json, write_atomic, write_json};

pub const BUNDLE_FILE: &str = "bundle.csv";
pub const KEYMAP_FILE: &str = "keymap.json";
pub const SCORE_RANGE: std::ops::RangeInclusive<u8> = 1..=5;
pub const DEFAULT_CONTEXT_ITEMS: usize = 5;
const EXCERPT_CHARS: usize = 240;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub masked_item_id: String,
    pub image_ref: String,
    pub description: String,
}

/// Confidential mapping from a masked item back to its source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyEntry {
    pub sample_id: String,
    pub source_prompt_id: String,
    pub description_id: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Keymap {
    pub confidential: bool,
    pub bundle_id: String,
    pub seed: u64,
    pub items: BTreeMap<String, KeyEntry>,
}

impl Keymap {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn unmask(&self, masked_item_id: &str) -> Option<&KeyEntry> {
        self.items.get(masked_item_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReviewBundle {
    pub bundle_id: String,
    pub seed: u64,
    pub items: Vec<ReviewItem>,
    pub keymap: Keymap,
}

/// A description with the image it was generated from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReviewSource {
    pub description: Description,
    pub image_ref: String,
}

/// Picks `n_items` descriptions (round-robin over source prompts when
/// `comparative`), shuffles them with `seed` and writes bundle.csv and
/// keymap.json into `out_dir`.
pub fn export_review_bundle(
    sources: &[ReviewSource],
    n_items: usize,
    seed: u64,
    comparative: bool,
    out_dir: &Path,
) -> Result<ReviewBundle> {
    let bundle = build_review_bundle(sources, n_items, seed, comparative)?;
    write_bundle(&bundle, out_dir)?;
    Ok(bundle)
}

pub fn build_review_bundle(
    sources: &[ReviewSource],
    n_items: usize,
    seed: u64,
    comparative: bool,
) -> Result<ReviewBundle> {
    if n_items == 0 {
        return Err(Error::InsufficientItems("requested zero items".into()));
    }
    let mut by_source: BTreeMap<&str, Vec<&ReviewSource>> = BTreeMap::new();
    for s in sources {
        by_source
            .entry(s.description.prompt_id.as_str())
            .or_default()
            .push(s);
    }
    if comparative && by_source.len() < 2 {
        return Err(Error::InsufficientItems(format!(
            "comparative mode needs at least 2 source prompts, found {}",
            by_source.len()
        )));
    }
    if sources.len() < n_items {
        return Err(Error::InsufficientItems(format!(
            "requested {n_items} items, only {} descriptions available",
            sources.len()
        )));
    }
    for list in by_source.values_mut() {
        list.sort_by(|a, b| a.description.sample_id.cmp(&b.description.sample_id));
    }
    let mut chosen: Vec<&ReviewSource> = Vec::with_capacity(n_items);
    if comparative {
        let mut round = 0;
        while chosen.len() < n_items {
            for list in by_source.values() {
                if let Some(s) = list.get(round) {
                    if chosen.len() < n_items {
                        chosen.push(s);
                    }
                }
            }
            round += 1;
        }
    } else {
        chosen.extend(by_source.values().flatten().take(n_items));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    chosen.shuffle(&mut rng);

    let fingerprint: Vec<String> = chosen.iter().map(|s| s.description.id()).collect();
    let bundle_id =
        sha256_hex(format!("{seed}\0{}", fingerprint.join("\0")).as_bytes())[..12].to_string();
    let width = n_items.to_string().len().max(3);
    let mut items = Vec::with_capacity(n_items);
    let mut keys = BTreeMap::new();
    for (i, s) in chosen.iter().enumerate() {
        let masked = format!("item-{:0width$}", i + 1);
        items.push(ReviewItem {
            masked_item_id: masked.clone(),
            image_ref: s.image_ref.clone(),
            description: s.description.text.clone(),
        });
        keys.insert(
            masked,
            KeyEntry {
                sample_id: s.description.sample_id.clone(),
                source_prompt_id: s.description.prompt_id.clone(),
                description_id: s.description.id(),
                description: s.description.text.clone(),
            },
        );
    }
    Ok(ReviewBundle {
        keymap: Keymap {
            confidential: true,
            bundle_id: bundle_id.clone(),
            seed,
            items: keys,
        },
        bundle_id,
        seed,
        items,
    })
}

pub fn bundle_csv(items: &[ReviewItem]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for item in items {
        w.serialize(item)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(BUNDLE_FILE, e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_bundle(bundle: &ReviewBundle, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let csv_path = out_dir.join(BUNDLE_FILE);
    let key_path = out_dir.join(KEYMAP_FILE);
    write_atomic(&csv_path, bundle_csv(&bundle.items)?.as_bytes())?;
    write_json(&key_path, &bundle.keymap)?;
    Ok((csv_path, key_path))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub masked_item_id: String,
    pub rater_id: String,
    pub precision_score: u8,
    pub accuracy_score: u8,
    #[serde(default)]
    pub comments: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnmaskedRating {
    pub rating: RatingRecord,
    pub key: KeyEntry,
}

impl UnmaskedRating {
    pub fn mean_score(&self) -> f64 {
        (self.rating.precision_score as f64 + self.rating.accuracy_score as f64) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub n: usize,
    pub mean_precision: f64,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RatingsSet {
    pub ratings: Vec<UnmaskedRating>,
    pub per_source: BTreeMap<String, SourceSummary>,
}

impl RatingsSet {
    pub fn from_ratings(mut ratings: Vec<UnmaskedRating>) -> Self {
        ratings.sort_by(|a, b| {
            (&a.rating.masked_item_id, &a.rating.rater_id)
                .cmp(&(&b.rating.masked_item_id, &b.rating.rater_id))
        });
        let mut sums: BTreeMap<String, (usize, f64, f64)> = BTreeMap::new();
        for r in &ratings {
            let e = sums.entry(r.key.source_prompt_id.clone()).or_default();
            e.0 += 1;
            e.1 += r.rating.precision_score as f64;
            e.2 += r.rating.accuracy_score as f64;
        }
        let per_source = sums
            .into_iter()
            .map(|(k, (n, p, a))| {
                (
                    k,
                    SourceSummary {
                        n,
                        mean_precision: p / n as f64,
                        mean_accuracy: a / n as f64,
                    },
                )
            })
            .collect();
        RatingsSet {
            ratings,
            per_source,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.ratings.is_empty()
    }

    pub fn len(&self) -> usize {
        self.ratings.len()
    }
}

/// `(after - before) / before`.
pub fn relative_improvement(before: f64, after: f64) -> f64 {
    (after - before) / before
}

/// Reads ratings.csv, rejecting the whole file on any bad row.
pub fn ingest_ratings(path: &Path, keymap: &Keymap) -> Result<RatingsSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ratings(&text, keymap)
}

pub fn parse_ratings(text: &str, keymap: &Keymap) -> Result<RatingsSet> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::Fields)
        .from_reader(text.as_bytes());
    let mut problems = Vec::new();
    let mut seen: BTreeMap<(String, String), u64> = BTreeMap::new();
    let mut out = Vec::new();
    let headers = reader.headers()?.clone();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let rec: RatingRecord = match row.deserialize(Some(&headers)) {
            Ok(rec) => rec,
            Err(e) => {
                problems.push(format!("line {line}: {e}"));
                continue;
            }
        };
        for (name, v) in [
            ("precision_score", rec.precision_score),
            ("accuracy_score", rec.accuracy_score),
        ] {
            if !SCORE_RANGE.contains(&v) {
                problems.push(format!("line {line}: {name} {v} outside 1-5"));
            }
        }
        let key = (rec.masked_item_id.clone(), rec.rater_id.clone());
        if let Some(first) = seen.get(&key) {
            problems.push(format!(
                "line {line}: duplicate rating of {} by {} (first on line {first})",
                key.0, key.1
            ));
            continue;
        }
        seen.insert(key, line);
        match keymap.unmask(&rec.masked_item_id) {
            Some(k) => out.push(UnmaskedRating {
                key: k.clone(),
                rating: rec,
            }),
            None => problems.push(format!("line {line}: unknown item {}", rec.masked_item_id)),
        }
    }
    if !problems.is_empty() {
        return Err(Error::RatingsRejected(problems));
    }
    if out.is_empty() {
        log::warn!("ratings file contains no ratings");
    }
    Ok(RatingsSet::from_ratings(out))
}

fn excerpt(text: &str) -> String {
    let flat = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if flat.chars().count() <= EXCERPT_CHARS {
        flat
    } else {
        let cut: String = flat.chars().take(EXCERPT_CHARS).collect();
        format!("{cut}...")
    }
}

/// Text block listing the `k` lowest-rated items and the `k` most frequent comments.
pub fn compose_feedback_context(ratings: &RatingsSet, k: usize) -> String {
    struct Item<'a> {
        id: &'a str,
        key: &'a KeyEntry,
        precision: Vec<u8>,
        accuracy: Vec<u8>,
        comments: Vec<&'a str>,
    }
    let mut items: BTreeMap<&str, Item<'_>> = BTreeMap::new();
    for r in &ratings.ratings {
        let it = items
            .entry(&r.rating.masked_item_id)
            .or_insert_with(|| Item {
                id: &r.rating.masked_item_id,
                key: &r.key,
                precision: Vec::new(),
                accuracy: Vec::new(),
                comments: Vec::new(),
            });
        it.precision.push(r.rating.precision_score);
        it.accuracy.push(r.rating.accuracy_score);
        let c = r.rating.comments.trim();
        if !c.is_empty() {
            it.comments.push(c);
        }
    }
    let mean = |v: &[u8]| v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
    let mut ranked: Vec<(f64, &Item<'_>)> = items
        .values()
        .map(|it| ((mean(&it.precision) + mean(&it.accuracy)) / 2.0, it))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(b.1.id)));

    let mut out = String::from("EXPERT FEEDBACK\nLowest-rated descriptions:\n");
    for (i, (score, it)) in ranked.iter().take(k).enumerate() {
        out.push_str(&format!(
            "{}. [{}] mean {:.2} (precision {:.2}, accuracy {:.2}): \"{}\"\n",
            i + 1,
            it.id,
            score,
            mean(&it.precision),
            mean(&it.accuracy),
            excerpt(&it.key.description)
        ));
        for c in &it.comments {
            out.push_str(&format!("   comment: {c}\n"));
        }
    }

    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &ratings.ratings {
        let c = r.rating.comments.trim();
        if !c.is_empty() {
            *freq.entry(c).or_default() += 1;
        }
    }
    if !freq.is_empty() {
        let mut themes: Vec<(&str, usize)> = freq.into_iter().collect();
        themes.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        out.push_str("Common comments:\n");
        for (c, n) in themes.into_iter().take(k) {
            out.push_str(&format!("- \"{c}\" ({n})\n"));
        }
    }
    out
}

/// Reads the ratings next to a keymap and composes the context block.
pub fn feedback_context_from_files(
    ratings: &Path,
    keymap: &Path,
    k: usize,
) -> Result<Option<String>> {
    let set = ingest_ratings(ratings, &Keymap::load(keymap)?)?;
    Ok((!set.is_empty()).then(|| compose_feedback_context(&set, k)))
}

/// Source prompt ids present in a bundle, for blinding checks.
pub fn bundle_sources(bundle: &ReviewBundle) -> HashSet<String> {
    bundle
        .keymap
        .items
        .values()
        .map(|k| k.source_prompt_id.clone())
        .collect()
}
