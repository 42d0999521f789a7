//! Generates the synthetic testbed and shows what the simulated backend sees.

use descprompt::datasets::testbed::{generate_synthetic_testbed, TestbedConfig};
use descprompt::domain::Split;

fn main() -> descprompt::Result<()> {
    let (manifest, testbed) =
        generate_synthetic_testbed(&TestbedConfig::default(), 42, "testbed.json")?;
    println!(
        "task {} with classes {:?}: {} train / {} test",
        manifest.task,
        manifest.label_set.labels,
        manifest.split(Split::Train).count(),
        manifest.split(Split::Test).count()
    );
    println!("lexicon: {} terms", testbed.lexicon.len());
    for record in manifest.split_records(Split::Train).iter().take(4) {
        let sample = testbed.sample(&record.id).expect("sample exists");
        println!(
            "{} [{}] features {:?}",
            record.id, record.label, sample.features
        );
    }
    Ok(())
}
