//! Loads a remote backend section from TOML. The API key is read from the
//! environment variable the config names; pass `--live` to send one
//! describe request for a local image.

use std::path::Path;
use std::sync::Arc;

use descprompt::config::Config;
use descprompt::domain::{LabelSet, Prompt, SampleRecord, Split};
use descprompt::gateway::{Gateway, RemoteBackend, DEFAULT_SEED_DESCRIPTION};
use descprompt::inference::{ImageSource, Pipeline};

const CONFIG: &str = r#"
[backend]
kind = "remote"

[backend.remote]
dialect = "chat-completions"
base_url = "https://api.openai.com/v1"
api_key_env = "OPENAI_API_KEY"
model = "gpt-4o"
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("remote.toml");
    std::fs::write(&path, CONFIG)?;
    let config = Config::load(&path)?;
    config.validate()?;
    let remote = config.backend.remote.clone().expect("remote section");
    println!(
        "{:?} endpoint {} model {}",
        remote.dialect, remote.base_url, remote.model
    );

    let backend = match RemoteBackend::new(remote.clone()) {
        Ok(b) => b,
        Err(e) => {
            println!("backend unavailable: {e}");
            return Ok(());
        }
    };
    if !std::env::args().any(|a| a == "--live") {
        println!(
            "key found in {}; rerun with --live to send a request",
            remote.api_key_env
        );
        return Ok(());
    }
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let record = SampleRecord {
        id: "probe".into(),
        image_ref: "probe_tile.png".into(),
        label: "Normal".into(),
        split: Split::Test,
        dataset: "probe".into(),
    };
    let pipeline = Pipeline::new(
        Arc::new(Gateway::new(Arc::new(backend))),
        ImageSource::files(fixtures),
        LabelSet::plain(&["Normal", "Invasive"])?,
    );
    let description =
        pipeline.generate_description(&record, &Prompt::seed(DEFAULT_SEED_DESCRIPTION)?)?;
    println!("{}", description.text);
    Ok(())
}
