//! Serves the adjudication API over the annotation fixture, with recorded
//! LLM replies for elaboration. Pass a trained model directory (a fold
//! directory from `qse train`) to enable /classify.
//!
//! cargo run --example serve_fixture [model-dir] [port]

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use qse_core::annotation::{read_annotation_csv, AnnotationRecord, AnnotationStore};
use qse_core::ingest::read_corpus;
use qse_core::llm::{LlmClient, LlmConfig, ReplayTransport};
use qse_core::service::{serve, AppState};
use qse_core::trainer::ModelHandle;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
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
    let open = store.open_conflicts("human:A1", &llm.annotator_id(), 1)?;
    println!("{open} open conflicts; try GET /conflicts, POST /conflicts/SO:202/decision");

    let mut args = std::env::args().skip(1);
    let mut state = AppState::new().with_store(store).with_elaborator(Arc::new(llm));
    if let Some(model_dir) = args.next().filter(|a| a != "-") {
        state = state.with_model(ModelHandle::load(&model_dir)?);
    }
    let port: u16 = args.next().map(|p| p.parse()).transpose()?.unwrap_or(8080);
    serve(state, SocketAddr::from(([127, 0, 0, 1], port)), None).await?;
    Ok(())
}
