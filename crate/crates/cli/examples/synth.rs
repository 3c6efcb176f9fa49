//! Writes the synthetic inputs the shipped configs expect.
//!
//! cargo run --release -p pkmlab-cli --example synth -- [dir=data]

use std::fs;
use std::path::PathBuf;

use pkmlab_cli::data::{synthetic_corpus, synthetic_reviews};

fn main() -> anyhow::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data".into()));
    fs::create_dir_all(&dir)?;
    let reviews = synthetic_reviews(2000, 1);
    // Review text goes into the pretraining corpus too, so its words get vocabulary ids.
    let mut corpus = synthetic_corpus(1_000_000, 2000, 1);
    corpus.extend(reviews.iter().map(|(_, t)| t.clone()));
    fs::write(dir.join("corpus.txt"), corpus.join("\n") + "\n")?;
    let tsv: String = reviews.iter().map(|(l, t)| format!("{l}\t{t}\n")).collect();
    fs::write(dir.join("reviews.tsv"), tsv)?;
    println!("{}", dir.display());
    Ok(())
}
