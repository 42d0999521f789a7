//! Raw catalog scanners for the supported datasets.
//!
//! * BACH: one folder per class (`Normal/`, `Benign/`, `InSitu/`, `Invasive/`).
//! * BRACS: the published ROI release, `<root>/{train,val,test}/<class>/...`
//!   with class folders such as `0_N`, `5_DCIS`, `6_IC`.
//! * SICAPv2: an annotation CSV with an `image_name` column and either a
//!   `label` column or one-hot `NC,G3,G4,G5` columns.

use std::path::Path;

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::domain::Split;
use crate::error::{Error, Result};

const IMAGE_EXTS: [&str; 5] = ["png", "jpg", "jpeg", "tif", "tiff"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub path: String,
    /// Original dataset label before task grouping.
    pub label: String,
    /// Split assigned by the dataset publisher, when there is one.
    pub published_split: Option<Split>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn require_dir(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "catalog directory not found"),
        ));
    }
    Ok(())
}

fn scan_labelled(dir: &Path, split: Option<Split>, out: &mut Vec<CatalogEntry>) -> Result<()> {
    let mut class_dirs: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    for class_dir in class_dirs {
        let label = class_dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        for entry in WalkDir::new(&class_dir).sort_by_file_name() {
            let entry =
                entry.map_err(|e| Error::io(&class_dir, std::io::Error::other(e.to_string())))?;
            if entry.file_type().is_file() && is_image(entry.path()) {
                out.push(CatalogEntry {
                    path: entry.path().to_string_lossy().into_owned(),
                    label: label.clone(),
                    published_split: split,
                });
            }
        }
    }
    Ok(())
}

/// Class-per-folder layout (BACH).
pub fn scan_class_folders(dir: &Path) -> Result<Vec<CatalogEntry>> {
    require_dir(dir)?;
    let mut out = Vec::new();
    scan_labelled(dir, None, &mut out)?;
    Ok(out)
}

/// BRACS ROI release. `val` images join the training pool.
pub fn scan_bracs(dir: &Path) -> Result<Vec<CatalogEntry>> {
    require_dir(dir)?;
    let mut out = Vec::new();
    for (sub, split) in [
        ("train", Split::Train),
        ("val", Split::Train),
        ("test", Split::Test),
    ] {
        let d = dir.join(sub);
        if d.is_dir() {
            scan_labelled(&d, Some(split), &mut out)?;
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidManifest(format!(
            "{} has no train/val/test class folders",
            dir.display()
        )));
    }
    Ok(out)
}

/// SICAPv2 annotation CSV. Image names are resolved against `image_dir`.
pub fn load_sicap_csv(csv_path: &Path, image_dir: &Path) -> Result<Vec<CatalogEntry>> {
    let mut rdr = csv::Reader::from_path(csv_path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(csv_path, io),
        other => Error::InvalidManifest(format!("{}: {other:?}", csv_path.display())),
    })?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
    };
    let name_col = col("image_name").ok_or_else(|| {
        Error::InvalidManifest(format!("{}: missing image_name column", csv_path.display()))
    })?;
    let label_col = col("label");
    let onehot: Vec<(usize, &str)> = ["NC", "G3", "G4", "G5"]
        .iter()
        .filter_map(|g| col(g).map(|i| (i, *g)))
        .collect();
    if label_col.is_none() && onehot.is_empty() {
        return Err(Error::InvalidManifest(format!(
            "{}: need a label column or NC/G3/G4/G5 columns",
            csv_path.display()
        )));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let name = row.get(name_col).unwrap_or_default().trim();
        let label = match label_col {
            Some(c) => row.get(c).unwrap_or_default().trim().to_string(),
            None => {
                let hot: Vec<&str> = onehot
                    .iter()
                    .filter(|(c, _)| {
                        row.get(*c)
                            .and_then(|v| v.trim().parse::<f64>().ok())
                            .map(|v| v > 0.5)
                            .unwrap_or(false)
                    })
                    .map(|(_, g)| *g)
                    .collect();
                match hot.as_slice() {
                    [one] => one.to_string(),
                    _ => {
                        return Err(Error::InvalidManifest(format!(
                            "{} line {line}: expected exactly one grade column set",
                            csv_path.display()
                        )))
                    }
                }
            }
        };
        out.push(CatalogEntry {
            path: image_dir.join(name).to_string_lossy().into_owned(),
            label,
            published_split: None,
        });
    }
    Ok(out)
}
