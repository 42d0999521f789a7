//! Runs the two-phase optimization against the simulated backend.

use std::sync::Arc;

use descprompt::datasets::testbed::{generate_synthetic_testbed, TestbedConfig};
use descprompt::domain::{Prompt, Split};
use descprompt::gateway::{
    classifier_prompt_text, Gateway, SimulatedBackend, SimulatedConfig, DEFAULT_CLASSIFIER,
    DEFAULT_SEED_DESCRIPTION,
};
use descprompt::inference::{ImageSource, Pipeline};
use descprompt::optimizer::{run_two_phase, RunConfig};

fn main() -> descprompt::Result<()> {
    let (manifest, testbed) =
        generate_synthetic_testbed(&TestbedConfig::default(), 42, "testbed.json")?;
    let testbed = Arc::new(testbed);
    let backend = SimulatedBackend::new(testbed.clone(), &SimulatedConfig::default())?;
    let gateway = Arc::new(Gateway::new(Arc::new(backend)));
    let pipeline = Pipeline::new(
        gateway,
        ImageSource::Synthetic(testbed.clone()),
        manifest.label_set.clone(),
    );

    let seed = Prompt::seed(DEFAULT_SEED_DESCRIPTION)?;
    let classifier = Prompt::classifier(&classifier_prompt_text(
        DEFAULT_CLASSIFIER,
        &manifest.label_set.labels,
    ))?;
    let train = manifest.split_records(Split::Train);
    let result = run_two_phase(
        &RunConfig::default(),
        &train,
        &seed,
        &classifier,
        &pipeline,
        &testbed.lexicon,
        None,
        None,
    )?;
    for log in &result.logs {
        println!(
            "iteration {} {:?}: accuracy {:.3} diversity {:.3} pool {}",
            log.iteration,
            log.phase,
            log.best_train_accuracy,
            log.best_diversity,
            log.retained.len()
        );
    }
    println!(
        "q* (train {:.3}): {}",
        result.q_star_train_accuracy, result.q_star.text
    );
    Ok(())
}
