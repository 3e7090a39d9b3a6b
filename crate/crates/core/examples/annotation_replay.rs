//! Human labels plus recorded LLM replies: agreement, conflict negotiation
//! from a decisions script, then the gold export.
//!
//! cargo run --example annotation_replay

use std::path::PathBuf;
use std::sync::Arc;

use qse_core::annotation::{read_annotation_csv, AnnotationRecord, AnnotationStore};
use qse_core::cli::read_decisions;
use qse_core::ingest::read_corpus;
use qse_core::llm::{LlmClient, LlmConfig, ReplayTransport};
use qse_core::taxonomy::frequency_report;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/annotation");
    let posts = read_corpus(dir.join("posts.jsonl"))?;
    let llm = LlmClient::new(
        Arc::new(ReplayTransport::from_jsonl(dir.join("llm_replay.jsonl"))?),
        LlmConfig {
            model_id: "gpt-3.5-turbo".into(),
            ..LlmConfig::default()
        },
    );

    let mut store = AnnotationStore::in_memory(posts.clone());
    for r in read_annotation_csv(dir.join("human_labels.csv"))? {
        store.record(r)?;
    }
    for p in &posts {
        let reply = llm.annotate(p)?;
        store.record(AnnotationRecord::new(p.key(), llm.annotator_id(), reply.category, 1).with_rationale(reply.rationale))?;
    }

    let (human, model) = ("human:A1", llm.annotator_id());
    let stats = store.agreement(human, &model, 1)?;
    println!(
        "{} posts, {} agree, Po {:.3}, Pe {:.3}, kappa {:.4} (95% CI {:.3}..{:.3})",
        stats.n_items,
        stats.n_agree,
        stats.percent_agreement,
        stats.expected_agreement,
        stats.kappa,
        stats.kappa_ci95.0,
        stats.kappa_ci95.1
    );
    store.open_conflicts(human, &model, 1)?;

    let mut reviewer = read_decisions(&dir.join("decisions.json"))?;
    let open: Vec<String> = store.open_cases().iter().map(|c| c.post_id.clone()).collect();
    for id in open {
        let case = store.negotiate(&id, 3, &llm, &mut reviewer)?;
        println!("\n{id}: human {} vs llm {}", case.human_label, case.llm_label);
        for t in &case.turns {
            println!("  {:?}: {}", t.speaker, t.message);
        }
        if let Some(r) = case.resolution {
            println!("  -> {} ({:?} conceded, {} round(s))", r.final_label, r.conceded_by, case.rounds);
        }
    }

    let labels: Vec<_> = store.final_labels().into_values().collect();
    println!("\n{}", frequency_report(&labels)?.to_csv());
    Ok(())
}
