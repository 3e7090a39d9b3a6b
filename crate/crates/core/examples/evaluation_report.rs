//! Builds an evaluation report from noisy synthetic predictions and renders
//! metrics, confusion matrix and ROC curves.
//!
//! cargo run --example evaluation_report [outdir]

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qse_core::evaluator::EvalReport;
use qse_core::taxonomy::NUM_CATEGORIES;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut actual = Vec::new();
    let mut probs = Vec::new();
    for i in 0..600 {
        let label = i % NUM_CATEGORIES;
        // Logit bump on the true class; larger for low indices.
        let bump = 2.5 - 0.3 * label as f64;
        let logits: [f64; NUM_CATEGORIES] =
            std::array::from_fn(|c| rng.random::<f64>() * 2.0 + if c == label { bump } else { 0.0 });
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        actual.push(label);
        probs.push(logits.map(|l| l.exp() / z));
    }
    let report = EvalReport::from_probabilities(&actual, &probs)?;
    println!("{}", report.markdown("synthetic"));
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("qse_eval"));
    report.render(&out, "synthetic")?;
    println!("rendered to {}", out.display());
    Ok(())
}
