use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use qse_core::annotation::{
    read_annotation_csv, read_gold, AnnotationRecord, AnnotationStore, CaseStatus, ConcededBy,
};
use qse_core::cli::{main_with_args, read_decisions};
use qse_core::ingest::read_corpus;
use qse_core::llm::{LlmClient, LlmConfig, ReplayTransport, Speaker};
use qse_core::ChallengeCategory::{self, *};

const HUMAN: &str = "human:A1";
const LLM: &str = "llm:gpt-3.5-turbo";

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/annotation")
}

fn replay_client() -> LlmClient {
    LlmClient::new(
        Arc::new(ReplayTransport::from_jsonl(fixture().join("llm_replay.jsonl")).unwrap()),
        LlmConfig {
            model_id: "gpt-3.5-turbo".into(),
            ..LlmConfig::default()
        },
    )
}

/// Human labels imported, LLM labels from the recorded replies.
fn labelled_store(path: Option<&Path>) -> AnnotationStore {
    let posts = read_corpus(fixture().join("posts.jsonl")).unwrap();
    let mut store = match path {
        Some(p) => AnnotationStore::open(p, posts.clone()).unwrap(),
        None => AnnotationStore::in_memory(posts.clone()),
    };
    for r in read_annotation_csv(fixture().join("human_labels.csv")).unwrap() {
        store.record(r).unwrap();
    }
    let llm = replay_client();
    for p in &posts {
        let r = llm.annotate(p).unwrap();
        store
            .record(AnnotationRecord::new(p.key(), llm.annotator_id(), r.category, 1).with_rationale(r.rationale))
            .unwrap();
    }
    store
}

#[test]
fn agreement_matches_hand_computed_kappa() {
    let mut store = labelled_store(None);
    let stats = store.agreement(HUMAN, LLM, 1).unwrap();
    assert_eq!((stats.n_items, stats.n_agree), (10, 7));
    assert!((stats.percent_agreement - 0.7).abs() < 1e-12);
    assert!((stats.expected_agreement - 0.18).abs() < 1e-12);
    assert!((stats.kappa - 0.52 / 0.82).abs() < 1e-9);
    assert_eq!(store.open_conflicts(HUMAN, LLM, 1).unwrap(), 3);
    let ids: Vec<&str> = store.open_cases().iter().map(|c| c.post_id.as_str()).collect();
    assert_eq!(ids, ["QCSE:301", "QCSE:304", "SO:202"]);
    // Cases start from whatever reasons the annotators gave; the fixture's
    // human rows carry none.
    let case = store.case("SO:202").unwrap();
    assert_eq!(case.rounds, 0);
    assert_eq!(case.turns.len(), 1);
    assert_eq!(case.turns[0].speaker, Speaker::Llm);
    assert_eq!(case.turns[0].proposed_category, Some(ApiUsage));
}

#[test]
fn export_is_blocked_until_every_case_resolves() {
    let mut store = labelled_store(None);
    assert!(store.export_gold(tempfile::tempdir().unwrap().path().join("g.jsonl")).is_err());
    store.open_conflicts(HUMAN, LLM, 1).unwrap();
    let err = store.gold_records().unwrap_err().to_string();
    assert!(err.contains("QCSE:301"), "{err}");
}

#[test]
fn scripted_negotiation_reaches_the_expected_gold_set() {
    let mut store = labelled_store(None);
    store.open_conflicts(HUMAN, LLM, 1).unwrap();
    let llm = replay_client();
    let mut reviewer = read_decisions(&fixture().join("decisions.json")).unwrap();
    let expected: [(&str, ChallengeCategory, ConcededBy, u32); 3] = [
        ("QCSE:301", Conceptual, ConcededBy::Llm, 1),
        ("QCSE:304", Tooling, ConcededBy::Llm, 2),
        ("SO:202", ApiUsage, ConcededBy::Human, 1),
    ];
    for (id, label, by, rounds) in expected {
        let case = store.negotiate(id, 3, &llm, &mut reviewer).unwrap();
        assert_eq!(case.status, CaseStatus::Resolved, "{id}");
        let r = case.resolution.unwrap();
        assert_eq!((r.final_label, r.conceded_by, case.rounds), (label, by, rounds), "{id}");
    }

    let dir = tempfile::tempdir().unwrap();
    let hist = store.export_gold(dir.path().join("gold.jsonl")).unwrap();
    let counts: Vec<usize> = ChallengeCategory::ALL.iter().map(|c| hist.count(*c)).collect();
    assert_eq!(counts, [2, 1, 1, 2, 2, 2]);
    let gold = read_gold(dir.path().join("gold.jsonl")).unwrap();
    assert_eq!(gold.len(), 10);
    let label = |id: &str| gold.iter().find(|g| g.post_id == id).unwrap().category();
    assert_eq!(label("SO:202"), ApiUsage);
    assert_eq!(label("QCSE:304"), Tooling);
    assert_eq!(label("SO:201"), Tooling);
}

#[test]
fn round_limit_flags_for_senior_review() {
    let mut store = labelled_store(None);
    store.open_conflicts(HUMAN, LLM, 1).unwrap();
    let mut reviewer = read_decisions(&fixture().join("decisions.json")).unwrap();
    let case = store.negotiate("QCSE:304", 1, &replay_client(), &mut reviewer).unwrap();
    assert!(case.is_open());
    assert!(case.needs_senior_review);
    assert_eq!(case.rounds, 1);
}

#[test]
fn store_survives_a_restart_mid_negotiation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("annotations.jsonl");
    {
        let mut store = labelled_store(Some(&path));
        store.open_conflicts(HUMAN, LLM, 1).unwrap();
        let mut reviewer = read_decisions(&fixture().join("decisions.json")).unwrap();
        store.negotiate("SO:202", 3, &replay_client(), &mut reviewer).unwrap();
    }
    let posts = read_corpus(fixture().join("posts.jsonl")).unwrap();
    let store = AnnotationStore::open(&path, posts).unwrap();
    assert_eq!(store.case("SO:202").unwrap().resolution.unwrap().final_label, ApiUsage);
    assert!(store.case("QCSE:301").unwrap().is_open());
    assert_eq!(store.open_cases().len(), 2);
    assert_eq!(store.labels(HUMAN, 1).len(), 10);
}

fn write_config(dir: &Path) -> PathBuf {
    fs::copy(fixture().join("posts.jsonl"), dir.join("corpus.jsonl")).unwrap();
    let cfg = format!(
        r#"workdir = "{dir}"

[llm]
model = "gpt-3.5-turbo"
replay = "{fx}/llm_replay.jsonl"

[annotation]
human_labels = "{fx}/human_labels.csv"
decisions = "{fx}/decisions.json"
"#,
        dir = dir.display(),
        fx = fixture().display()
    );
    let path = dir.join("qse.toml");
    fs::write(&path, cfg).unwrap();
    path
}

fn qse(cfg: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["qse".to_string(), "-c".into(), cfg.display().to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    main_with_args(argv)
}

#[test]
fn cli_stages_produce_the_same_gold_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    assert_eq!(qse(&cfg, &["import-annotations"]), 0);
    assert_eq!(qse(&cfg, &["annotate-llm"]), 0);
    // Export before adjudication is a domain error.
    assert_eq!(qse(&cfg, &["export-gold"]), 1);
    assert_eq!(qse(&cfg, &["agreement"]), 0);
    assert_eq!(qse(&cfg, &["export-gold"]), 1);

    let csv = fs::read_to_string(dir.path().join("agreement.csv")).unwrap();
    assert!(csv.contains("0.634146"), "{csv}");
    assert!(dir.path().join("agreement_confusion.csv").exists());

    assert_eq!(qse(&cfg, &["negotiate"]), 0);
    assert_eq!(qse(&cfg, &["export-gold"]), 0);
    let gold = read_gold(dir.path().join("gold.jsonl")).unwrap();
    assert_eq!(gold.len(), 10);
    assert_eq!(gold.iter().find(|g| g.post_id == "QCSE:304").unwrap().category(), Tooling);

    // One audit line per LLM call: 10 labels and 4 negotiation turns.
    let audit = fs::read_to_string(dir.path().join("llm_audit.jsonl")).unwrap();
    assert_eq!(audit.lines().count(), 14);

    assert_eq!(qse(&cfg, &["report-frequencies"]), 0);
    let freq = fs::read_to_string(dir.path().join("frequencies.csv")).unwrap();
    assert!(freq.contains("Tooling,0,2,20.00"), "{freq}");
    assert!(freq.contains("Conceptual,1,1,10.00"), "{freq}");
    assert!(freq.contains("Total,,10,"), "{freq}");

    // Re-running the LLM stage does not relabel anything.
    assert_eq!(qse(&cfg, &["annotate-llm"]), 0);
    assert_eq!(fs::read_to_string(dir.path().join("llm_audit.jsonl")).unwrap().lines().count(), 14);
}
