//! Cross-validates the smallest supported encoder on the keyword toy corpus.
//!
//! cargo run --release --example keyword_sanity [runs-dir]

use std::time::Instant;

use qse_core::dataset::stratified_folds;
use qse_core::evaluator::aggregate;
use qse_core::synthetic::KeywordCorpus;
use qse_core::trainer::{cross_validate, Checkpoint, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let runs = std::env::args().nth(1);
    let gold = KeywordCorpus::default().generate();
    let cfg = TrainConfig {
        checkpoint_id: qse_core::model::SMALLEST_CHECKPOINT.into(),
        max_len: 16,
        vocab_size: 200,
        ..TrainConfig::default()
    };
    let checkpoint = Checkpoint::resolve(&cfg, gold.iter().map(|g| g.body_text.as_str()))?;
    let plan = stratified_folds(&gold, 5, cfg.seed)?;
    let start = Instant::now();
    let results = cross_validate(&gold, &plan, &cfg, &checkpoint, runs.as_deref().map(std::path::Path::new))?;
    for r in &results {
        let last = r.logs.last().expect("epochs ran");
        println!(
            "fold {}: best epoch {} val acc {:.3}, final train acc {:.3}",
            r.fold, r.model.best_epoch, r.model.best_val_acc, last.train_acc
        );
    }
    let reports: Vec<_> = results.iter().map(|r| r.report.clone()).collect();
    println!("{}", aggregate(&reports)?.markdown());
    println!("elapsed {:.0}s", start.elapsed().as_secs_f64());
    Ok(())
}
