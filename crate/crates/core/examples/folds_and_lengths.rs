//! Token-length analysis and a stratified fold plan with upsampled
//! training sets, on the synthetic keyword corpus.
//!
//! cargo run --example folds_and_lengths

use qse_core::dataset::{analyze_lengths, fold_data, stratified_folds, tokenize};
use qse_core::synthetic::KeywordCorpus;
use qse_core::tokenizer::{ModelFamily, TextTokenizer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let gold = KeywordCorpus {
        per_class: 13,
        ..KeywordCorpus::default()
    }
    .generate();
    let tokenizer = TextTokenizer::train(ModelFamily::Bert, gold.iter().map(|g| g.body_text.as_str()), 200)?;

    let lengths = analyze_lengths(&gold, &tokenizer)?;
    println!(
        "lengths: p50 {} p90 {} p95 {} p99 {} max {}; recommended max_len {} covers {:.1}%",
        lengths.p50,
        lengths.p90,
        lengths.p95,
        lengths.p99,
        lengths.max,
        lengths.recommended_max_len,
        100.0 * lengths.coverage_at_recommended
    );
    print!("{}", lengths.histogram_csv(2));

    let plan = stratified_folds(&gold, 5, 42)?;
    let examples = tokenize(&gold, &tokenizer)?;
    for fold in 0..plan.k {
        let data = fold_data(&examples, &plan, fold, 42)?;
        println!(
            "fold {fold}: {} validation, {} training after upsampling {:?}, leaked {}",
            data.validation.len(),
            data.train.examples.len(),
            data.train.class_counts.values().collect::<Vec<_>>(),
            data.leaked_ids().len()
        );
    }
    Ok(())
}
