//! Parses the bundled forum exports, applies the per-forum tag sets and
//! writes a corpus file.
//!
//! cargo run --example ingest_exports [out.jsonl]

use std::path::PathBuf;

use qse_core::ingest::{apply_tag_filter, parse_exports, write_corpus, Forum, TagFilter};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/exports");
    let sources = vec![
        (dir.join("so_questions.csv"), Forum::StackOverflow),
        (dir.join("qcse_questions.csv"), Forum::QuantumComputing),
        (dir.join("csse_questions.csv"), Forum::ComputerScience),
        (dir.join("aise_questions.csv"), Forum::ArtificialIntelligence),
    ];
    let mut corpus = Vec::new();
    for ((path, forum), parsed) in sources.iter().zip(parse_exports(&sources)) {
        let parsed = parsed?;
        for r in &parsed.rejects {
            println!("  {} line {}: {}", path.display(), r.line, r.reason);
        }
        let parsed_n = parsed.posts.len();
        let kept = apply_tag_filter(parsed.posts, &TagFilter::study(*forum))?;
        println!("{forum}: {parsed_n} parsed, {} kept", kept.len());
        corpus.extend(kept);
    }
    for p in &corpus {
        println!("{:<10} {:>2} answers  {}", p.key(), p.answers.len(), p.title);
    }
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("qse_corpus.jsonl"));
    write_corpus(&corpus, &out)?;
    println!("wrote {} posts to {}", corpus.len(), out.display());
    Ok(())
}
