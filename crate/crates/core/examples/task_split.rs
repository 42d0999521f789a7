//! Samples a fixed train/test split from an image catalog.

use descprompt::datasets::{build_task_split, CatalogEntry, TaskId, TaskSpec};
use descprompt::domain::Split;

fn main() -> descprompt::Result<()> {
    let catalog: Vec<CatalogEntry> = ["Normal", "Invasive", "Benign"]
        .iter()
        .flat_map(|label| {
            (0..120).map(move |i| CatalogEntry {
                path: format!("{label}/{label}_{i:03}.tif"),
                label: label.to_string(),
                published_split: None,
            })
        })
        .collect();
    let spec = TaskSpec::for_task(TaskId::BachNIc)?;
    let manifest = build_task_split(&catalog, &spec, 42)?;
    for split in [Split::Train, Split::Test] {
        let records = manifest.split_records(split);
        let normal = records.iter().filter(|r| r.label == "Normal").count();
        println!("{split:?}: {} records ({normal} Normal)", records.len());
    }
    let again = build_task_split(&catalog, &spec, 42)?;
    println!("same seed reproduces the split: {}", again == manifest);
    Ok(())
}
