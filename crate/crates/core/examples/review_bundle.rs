//! Exports a blinded review bundle, fills in ratings and turns them into
//! revision context.

use std::fmt::Write;

use descprompt::domain::Description;
use descprompt::feedback::{
    compose_feedback_context, export_review_bundle, parse_ratings, ReviewSource,
};

fn description(sample: &str, prompt: &str, text: &str) -> ReviewSource {
    ReviewSource {
        description: Description {
            sample_id: sample.into(),
            prompt_id: prompt.into(),
            text: text.into(),
            backend_id: "simulated".into(),
            params_hash: "example".into(),
        },
        image_ref: format!("images/{sample}.png"),
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sources: Vec<ReviewSource> = (0..4)
        .flat_map(|i| {
            let s = format!("s{i}");
            [
                description(&s, "seed", "tissue section with unremarkable appearance"),
                description(
                    &s,
                    "optimized",
                    "infiltrative glands within desmoplastic stroma, marked nuclear pleomorphism",
                ),
            ]
        })
        .collect();
    let out = tempfile::tempdir()?;
    let bundle = export_review_bundle(&sources, 6, 7, true, out.path())?;
    println!(
        "bundle {} with {} masked items",
        bundle.bundle_id,
        bundle.items.len()
    );

    let mut csv = String::from("masked_item_id,rater_id,precision_score,accuracy_score,comments\n");
    for item in &bundle.items {
        let key = bundle.keymap.unmask(&item.masked_item_id).expect("keyed");
        let (score, comment) = if key.source_prompt_id == "seed" {
            (1, "too vague")
        } else {
            (4, "")
        };
        writeln!(
            csv,
            "{},rater-1,{score},{score},{comment}",
            item.masked_item_id
        )
        .expect("string write");
    }
    let ratings = parse_ratings(&csv, &bundle.keymap)?;
    for (source, summary) in &ratings.per_source {
        println!(
            "{source}: n {} precision {:.2} accuracy {:.2}",
            summary.n, summary.mean_precision, summary.mean_accuracy
        );
    }
    println!("\n{}", compose_feedback_context(&ratings, 3));
    Ok(())
}
