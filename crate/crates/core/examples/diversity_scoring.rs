//! Scores a small prompt pool for term richness and uniqueness.

use descprompt::domain::Prompt;
use descprompt::scoring::{accuracy_from_counts, diversity_scores, Lexicon};

fn main() -> descprompt::Result<()> {
    let lexicon = Lexicon::builtin();
    let texts = [
        "Describe the tissue morphology visible in this histology image.",
        "Describe nuclear pleomorphism, mitotic figures and the stroma.",
        "Describe gland architecture, the stroma and any necrosis.",
    ];
    let pool: Vec<Prompt> = texts
        .iter()
        .map(|t| Prompt::seed(t))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&Prompt> = pool.iter().collect();
    for (p, s) in pool.iter().zip(diversity_scores(&refs, &refs, &lexicon)) {
        println!("D {:.3} (T {} U {})  {}", s.d, s.t, s.u, p.text);
    }
    println!(
        "accuracy score for 6 errors out of 60: {}",
        accuracy_from_counts(6, 60)
    );
    Ok(())
}
