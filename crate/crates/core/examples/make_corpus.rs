//! Writes the bundled toy corpora into a directory (default `data/`).
//!
//! `cargo run --example make_corpus -- data`

use std::fs;
use std::path::PathBuf;

use embed_langevin::model::corpus::{multimodal_corpus, sentiment_corpus, SENTIMENT_LABELS};

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data".into()));
    fs::create_dir_all(&dir)?;

    let mut labeled = String::new();
    for (text, label) in sentiment_corpus(2000, 1) {
        labeled.push_str(&format!("{}\t{text}\n", SENTIMENT_LABELS[label]));
    }
    fs::write(dir.join("sentiment.tsv"), labeled)?;

    // Held out from the constraint classifier, used to train the judge.
    let mut judge = String::new();
    for (text, label) in sentiment_corpus(1500, 3) {
        judge.push_str(&format!("{}\t{text}\n", SENTIMENT_LABELS[label]));
    }
    fs::write(dir.join("sentiment_judge.tsv"), judge)?;

    let lines = multimodal_corpus(4, 4, 12, 400, 5);
    fs::write(dir.join("multimodal.txt"), lines.join("\n") + "\n")?;

    fs::write(dir.join("prompts.txt"), "the movie\nthe food\nthe book\nthe hotel\nthe staff\n")?;
    println!("wrote corpora to {}", dir.display());
    Ok(())
}
