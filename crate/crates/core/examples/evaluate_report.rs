//! Builds a dataset, optimizes, evaluates and prints the report, using a
//! temporary run directory.

use descprompt::cli::{
    cmd_dataset_build, evaluate_run, optimize_with_config, DatasetBuildArgs, EvaluateRequest,
};
use descprompt::config::Config;
use descprompt::domain::Split;
use descprompt::evaluation::{render_markdown, render_table};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let work = tempfile::tempdir()?;
    let manifest = cmd_dataset_build(&DatasetBuildArgs {
        task: "synthetic".into(),
        catalog: None,
        labels_csv: None,
        testbed_config: None,
        seed: 42,
        out: work.path().join("data"),
    })?;
    let mut config = Config::default();
    config.paths.manifest = Some(manifest);
    let run = work.path().join("run");
    optimize_with_config(&config, &run)?;
    let report = evaluate_run(
        &run,
        &EvaluateRequest {
            split: Split::Test,
            with_init: true,
            zero_shot: true,
            silhouette: true,
        },
    )?;
    print!("{}", render_markdown(&report));
    println!();
    print!("{}", render_table(&[&report]));
    Ok(())
}
