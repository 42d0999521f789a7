//! Writes the expectation fixture (default: the core crate's tests/fixtures).

fn main() {
    let path = std::env::args_os()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(descprompt_oracle::fixture_path);
    let e = descprompt_oracle::default_expectations();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).expect("create fixture directory");
    }
    std::fs::write(&path, descprompt_oracle::render(&e)).expect("write fixture");
    for s in &e.scenarios {
        println!(
            "{:<15} train {:>2}/{} test {:>2}/{}",
            s.id, s.train.n_correct, s.train.n, s.test.n_correct, s.test.n
        );
    }
    println!("wrote {}", path.display());
}
