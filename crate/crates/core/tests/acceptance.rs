//! One PASS/FAIL line per primary acceptance criterion. Runs as a plain
//! binary (`harness = false`) so the lines always reach stdout.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qse_core::annotation::{cohen_kappa, read_annotation_csv, AnnotationRecord, AnnotationStore, CaseStatus};
use qse_core::cli::read_decisions;
use qse_core::dataset::{balance_upsample, fold_data, stratified_folds, stratified_folds_by_label, TokenizedExample};
use qse_core::evaluator::{accuracy, auc, confusion_matrix, precision_recall_f1, roc_curve};
use qse_core::explainer::{
    explain_encoded, explain_text, occlude_word, CoalitionModel, ExplainError, ExplainerConfig, GlobalSummary,
    LocalExplanation, Probs,
};
use qse_core::ingest::{
    apply_tag_filter, classifier_text, clean_text, parse_exports, read_corpus, write_corpus, Forum, TagFilter,
};
use qse_core::llm::{LlmClient, LlmConfig, ReplayTransport};
use qse_core::synthetic::{keywords, KeywordCorpus};
use qse_core::tokenizer::Encoded;
use qse_core::trainer::{cross_validate, Checkpoint, FoldResult, LinearSchedule, TrainConfig};
use qse_core::ChallengeCategory::{self, *};

const N: usize = 6;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

// ---------------------------------------------------------------------------
// Metrics oracle

fn metrics_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut degenerate_seen = 0;
    for instance in 0..1000 {
        let n = rng.random_range(1..=40);
        // Narrow label ranges leave classes empty so zero divisions occur.
        let hi = rng.random_range(1..=N);
        let actual: Vec<usize> = (0..n).map(|_| rng.random_range(0..hi)).collect();
        let predicted: Vec<usize> = (0..n).map(|_| rng.random_range(0..N)).collect();
        let m = confusion_matrix(&actual, &predicted).map_err(|e| e.to_string())?;
        let metrics = precision_recall_f1(&m);
        let mut correct = 0;
        for c in 0..N {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for (&a, &p) in actual.iter().zip(&predicted) {
                match (a == c, p == c) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    _ => {}
                }
                if c == 0 && a == p {
                    correct += 1;
                }
            }
            for r in 0..N {
                let cell = actual.iter().zip(&predicted).filter(|&(&a, &p)| a == r && p == c).count() as u64;
                ensure!(m[r][c] == cell, "instance {instance}: confusion[{r}][{c}] {} != {cell}", m[r][c]);
            }
            let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
            let f1 = if 2 * tp + fp + fn_ == 0 || tp == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
            };
            let got = &metrics[c];
            ensure!(got.precision == precision, "instance {instance} class {c}: precision {} vs {precision}", got.precision);
            ensure!(got.recall == recall, "instance {instance} class {c}: recall {} vs {recall}", got.recall);
            ensure!((got.f1 - f1).abs() < 1e-12, "instance {instance} class {c}: f1 {} vs {f1}", got.f1);
            ensure!(got.support == tp + fn_, "instance {instance} class {c}: support");
            let zero_div = tp + fp == 0 || tp + fn_ == 0 || tp == 0;
            ensure!(got.degenerate == zero_div, "instance {instance} class {c}: degenerate flag {}", got.degenerate);
            degenerate_seen += zero_div as usize;
        }
        ensure!(accuracy(&m) == correct as f64 / n as f64, "instance {instance}: accuracy");
    }
    let elapsed = start.elapsed();
    ensure!(degenerate_seen > 0, "no zero-division case was generated");
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("1000 instances, {degenerate_seen} zero-division cells, {:.2}s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------------------
// Kappa

fn kappa_fixtures() -> Outcome {
    let perfect = cohen_kappa(&[[10u64, 0], [0, 10]]);
    ensure!((perfect.kappa - 1.0).abs() < 1e-9, "perfect agreement gave {}", perfect.kappa);
    let chance = cohen_kappa(&[[25u64, 25], [25, 25]]);
    ensure!(chance.kappa.abs() < 1e-9, "chance table gave {}", chance.kappa);
    let third = cohen_kappa(&[[10u64, 5], [5, 10]]);
    ensure!((third.kappa - 1.0 / 3.0).abs() < 1e-9, "[[10,5],[5,10]] gave {}", third.kappa);

    // Study-shaped table: 2829 posts, 2547 on the diagonal.
    let diag = [540u64, 380, 730, 150, 540, 207];
    let mut table = [[0u64; N]; N];
    for (i, d) in diag.iter().enumerate() {
        table[i][i] = *d;
    }
    let mut off = 2829 - diag.iter().sum::<u64>();
    let mut k = 0;
    while off > 0 {
        let (i, j) = (k % N, (k + 1 + k / N) % N);
        if i != j {
            table[i][j] += 1;
            off -= 1;
        }
        k += 1;
    }
    let study = cohen_kappa(&table);
    let total: u64 = table.iter().flatten().sum();
    ensure!(total == 2829, "table total {total}");
    ensure!((study.po - 0.9003).abs() <= 1e-4, "Po {}", study.po);
    Ok(format!("1, 0, 1/3 exact; Po(2547/2829) = {:.6}", study.po))
}

// ---------------------------------------------------------------------------
// Splits and balance

const TABLE6: [(ChallengeCategory, usize); 6] = [
    (Tooling, 596),
    (Theoretical, 415),
    (Learning, 166),
    (Conceptual, 610),
    (Errors, 815),
    (ApiUsage, 227),
];

fn splits_and_balance() -> Outcome {
    let mut items = Vec::new();
    for (c, n) in TABLE6 {
        for i in 0..n {
            items.push((format!("{}-{i}", c.slug()), c));
        }
    }
    let plan = stratified_folds_by_label(&items, 5, 42).map_err(|e| e.to_string())?;
    let counts = plan.class_counts(items.iter().map(|(p, c)| (p.as_str(), *c)));
    for (c, _) in TABLE6 {
        let per: Vec<usize> = counts.iter().map(|f| f[&c]).collect();
        ensure!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1, "{c}: {per:?}");
    }
    let examples: Vec<TokenizedExample> = items
        .iter()
        .map(|(p, c)| TokenizedExample {
            post_id: p.clone(),
            input_ids: vec![2, 3],
            attention_mask: vec![1, 1],
            label_index: c.index(),
        })
        .collect();
    for fold in 0..5 {
        let data = fold_data(&examples, &plan, fold, 42).map_err(|e| e.to_string())?;
        let sizes: BTreeSet<usize> = data.train.class_counts.values().copied().collect();
        ensure!(sizes.len() == 1 && data.train.class_counts.len() == 6, "fold {fold}: {:?}", data.train.class_counts);
        let val: BTreeSet<&str> = data.validation.iter().map(|e| e.post_id.as_str()).collect();
        let overlap = data.train.post_ids().intersection(&val).count();
        ensure!(overlap == 0, "fold {fold}: {overlap} post ids leak into training");
    }
    let full = balance_upsample(0, &examples, 1).map_err(|e| e.to_string())?;
    ensure!(full.examples.len() == 4890, "balanced size {}", full.examples.len());
    ensure!(full.class_counts.values().all(|&n| n == 815), "{:?}", full.class_counts);
    Ok("per-class fold spread <= 1, equal post-balance counts, no leakage, 6x815 = 4890".into())
}

// ---------------------------------------------------------------------------
// Training sanity

struct Trained {
    results: Vec<FoldResult>,
    elapsed: Duration,
}

fn train_keyword_model() -> Result<Trained, String> {
    let gold = KeywordCorpus::default().generate();
    let cfg = TrainConfig {
        checkpoint_id: qse_core::model::SMALLEST_CHECKPOINT.into(),
        max_len: 16,
        vocab_size: 200,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let checkpoint = Checkpoint::resolve(&cfg, gold.iter().map(|g| g.body_text.as_str())).map_err(|e| e.to_string())?;
    let plan = stratified_folds(&gold, 5, cfg.seed).map_err(|e| e.to_string())?;
    let results = cross_validate(&gold, &plan, &cfg, &checkpoint, None).map_err(|e| e.to_string())?;
    Ok(Trained {
        results,
        elapsed: start.elapsed(),
    })
}

fn training_sanity(trained: &Result<Trained, String>) -> Outcome {
    let cfg = TrainConfig::default();
    ensure!(cfg.epochs == 30 && cfg.learning_rate == 2e-5, "defaults changed: {cfg:?}");

    // Piecewise-linear schedule peaking at 2e-5.
    let schedule = LinearSchedule::new(2e-5, 120, 0.1);
    let trace = schedule.trace();
    let peak = trace.iter().cloned().fold(0.0, f64::max);
    ensure!((peak - 2e-5).abs() < 1e-15, "peak {peak}");
    ensure!(trace[0] == 0.0 && *trace.last().unwrap() == 0.0, "endpoints {} {}", trace[0], trace.last().unwrap());
    let knot = schedule.warmup_steps;
    for (i, w) in trace.windows(3).enumerate() {
        let second = w[2] - 2.0 * w[1] + w[0];
        ensure!(i + 1 == knot || second.abs() < 1e-18, "kink at step {}", i + 1);
    }

    let t = trained.as_ref().map_err(|e| format!("training failed: {e}"))?;
    let mut train_best = Vec::new();
    for r in &t.results {
        ensure!(r.logs.len() <= 30, "fold {} ran {} epochs", r.fold, r.logs.len());
        ensure!(r.logs.iter().all(|l| l.lr_at_end <= 2e-5 + 1e-15), "fold {} exceeded the peak rate", r.fold);
        let best = r.logs.iter().map(|l| l.train_acc).fold(0.0, f64::max);
        ensure!(best >= 0.95, "fold {} best training accuracy {best:.3}", r.fold);
        train_best.push(best);
    }
    let correct: f64 = t.results.iter().map(|r| r.report.overall_accuracy * r.validation_ids.len() as f64).sum();
    let total: usize = t.results.iter().map(|r| r.validation_ids.len()).sum();
    let val = correct / total as f64;
    ensure!(total == 60, "validation covered {total} posts");
    ensure!(val >= 0.90, "cross-validated accuracy {val:.3}");
    ensure!(t.elapsed < Duration::from_secs(15 * 60), "took {:?}", t.elapsed);
    let min_train = train_best.iter().cloned().fold(1.0, f64::min);
    Ok(format!(
        "{}: train acc >= {min_train:.3} every fold, CV accuracy {val:.3}, {:.0}s",
        qse_core::model::SMALLEST_CHECKPOINT,
        t.elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// ROC / AUC

fn mann_whitney(positive: &[bool], scores: &[f64]) -> f64 {
    let mut u = 0.0;
    let (mut np, mut nn) = (0.0, 0.0);
    for (i, &pi) in positive.iter().enumerate() {
        if pi {
            np += 1.0;
        } else {
            nn += 1.0;
            continue;
        }
        for (j, &pj) in positive.iter().enumerate() {
            if !pj {
                u += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    u / (np * nn)
}

fn roc_auc_checks() -> Outcome {
    let labels: Vec<bool> = (0..20).map(|i| i % 3 == 0).collect();
    let perfect: Vec<f64> = labels.iter().map(|&p| if p { 0.9 } else { 0.1 }).collect();
    let anti: Vec<f64> = perfect.iter().map(|s| 1.0 - s).collect();
    let a = auc(&roc_curve(&labels, &perfect));
    let b = auc(&roc_curve(&labels, &anti));
    ensure!(a == 1.0, "perfect ranking {a}");
    ensure!(b == 0.0, "anti ranking {b}");

    let mut rng = ChaCha8Rng::seed_from_u64(2000);
    let random_labels: Vec<bool> = (0..2000).map(|_| rng.random_bool(0.5)).collect();
    let random_scores: Vec<f64> = (0..2000).map(|_| rng.random::<f64>()).collect();
    let r = auc(&roc_curve(&random_labels, &random_scores));
    ensure!((r - 0.5).abs() <= 0.05, "label-independent scores {r}");

    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let n = rng.random_range(2..60);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        // Coarse scores so ties are common.
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
        let gap = (auc(&roc_curve(&labels, &scores)) - mann_whitney(&labels, &scores)).abs();
        ensure!(gap < 1e-9, "case {case}: AUC differs from U by {gap}");
        worst = worst.max(gap);
    }
    Ok(format!("1.0 / 0.0 exact, random {r:.4}, max |AUC - U| {worst:.1e} over 200 tied fixtures"))
}

// ---------------------------------------------------------------------------
// Explainer

/// Softmax over summed per-token class weights; masked tokens contribute nothing.
struct BagModel {
    weights: HashMap<u32, [f64; N]>,
}

impl CoalitionModel for BagModel {
    fn probabilities(&self, rows: &[(Vec<u32>, Vec<u32>)]) -> Result<Vec<Probs>, ExplainError> {
        Ok(rows
            .iter()
            .map(|(ids, mask)| {
                let mut logits = [0.0; N];
                for (id, m) in ids.iter().zip(mask) {
                    if *m == 1 {
                        if let Some(w) = self.weights.get(id) {
                            for c in 0..N {
                                logits[c] += w[c];
                            }
                        }
                    }
                }
                let max = logits.iter().cloned().fold(f64::MIN, f64::max);
                let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let sum: f64 = exp.iter().sum();
                std::array::from_fn(|c| exp[c] / sum)
            })
            .collect())
    }
}

const MASK: u32 = 4;

/// [CLS] cue filler piece ##piece filler2 [SEP] pad pad, with the cue word
/// planted for class `c`.
fn class_fixture(c: usize, rng: &mut ChaCha8Rng) -> (BagModel, Encoded) {
    let mut weights = HashMap::new();
    let mut planted = [0.0; N];
    planted[c] = 3.0;
    weights.insert(10, planted);
    for id in 11..15 {
        let w: [f64; N] = std::array::from_fn(|_| rng.random_range(-0.6..0.6));
        weights.insert(id, w);
    }
    let enc = Encoded {
        ids: vec![2, 10, 11, 12, 13, 14, 3, 0, 0],
        attention_mask: vec![1, 1, 1, 1, 1, 1, 1, 0, 0],
        special: vec![1, 0, 0, 0, 0, 0, 1, 1, 1],
        word_ids: vec![None, Some(0), Some(1), Some(2), Some(2), Some(3), None, None, None],
        tokens: ["[CLS]", "cue", "the", "oper", "##ator", "now", "[SEP]", "[PAD]", "[PAD]"]
            .map(String::from)
            .to_vec(),
        words: ["cue", "the", "operator", "now"].map(String::from).to_vec(),
    };
    (BagModel { weights }, enc)
}

fn explainer_checks(trained: &Result<Trained, String>) -> Outcome {
    const TAU: f64 = 1e-3;
    let cfg = ExplainerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut occlusion_ok = 0;
    let mut occlusion_total = 0;
    let mut worst_gap: f64 = 0.0;
    for c in 0..N {
        let (model, enc) = class_fixture(c, &mut rng);
        let e = explain_encoded(&model, &format!("FX:{c}"), &enc, MASK, &cfg).map_err(|e| e.to_string())?;
        ensure!(e.predicted.index() == c, "fixture {c} predicted {}", e.predicted);
        ensure!(!e.approximate, "fixture {c} fell back to approximate mode");
        worst_gap = worst_gap.max(e.additivity_gap());
        ensure!(e.additivity_gap() <= TAU, "fixture {c}: additivity gap {}", e.additivity_gap());
        for i in [0, 6, 7, 8] {
            ensure!(e.tokens[i].value == 0.0, "fixture {c}: special/pad position {i} got {}", e.tokens[i].value);
        }
        let (before, after) = occlusion(&model, &enc, &e, MASK)?;
        occlusion_total += 1;
        occlusion_ok += (after <= before) as usize;
    }

    let t = trained.as_ref().map_err(|e| format!("no keyword model: {e}"))?;
    let model = &t.results[0].model;
    let mask = model.tokenizer().special_ids().mask;
    let gold = KeywordCorpus::default().generate();
    let mut locals: Vec<LocalExplanation> = Vec::new();
    for g in &gold {
        let text = classifier_text(&g.title, &g.body_text);
        let e = explain_text(model, &g.post_id, &text, &cfg).map_err(|e| e.to_string())?;
        worst_gap = worst_gap.max(e.additivity_gap());
        ensure!(e.additivity_gap() <= TAU, "{}: additivity gap {}", g.post_id, e.additivity_gap());
        let enc = model.tokenizer().encode(&text).map_err(|e| e.to_string())?;
        for (i, m) in enc.attention_mask.iter().enumerate() {
            ensure!(*m == 1 || e.tokens[i].value == 0.0, "{}: padding position {i} attributed", g.post_id);
        }
        let (before, after) = occlusion(model, &enc, &e, mask)?;
        occlusion_total += 1;
        occlusion_ok += (after <= before) as usize;
        locals.push(e);
    }
    let rate = occlusion_ok as f64 / occlusion_total as f64;
    ensure!(rate >= 0.9, "occlusion consistency {rate:.3} ({occlusion_ok}/{occlusion_total})");

    let summary = GlobalSummary::from_locals(&locals, usize::MAX).map_err(|e| e.to_string())?;
    for c in ChallengeCategory::ALL {
        let top: Vec<&str> = summary.top_for_class(c, 3).iter().map(|f| f.token.as_str()).collect();
        let planted = keywords(c);
        ensure!(
            top.iter().all(|w| planted.contains(w)),
            "{c}: top-3 {top:?} not all among {planted:?}"
        );
    }
    Ok(format!(
        "max additivity gap {worst_gap:.1e} (tau {TAU}), occlusion {occlusion_ok}/{occlusion_total}, planted keywords top every class"
    ))
}

/// Predicted-class probability before and after masking the top positive word.
fn occlusion(model: &dyn CoalitionModel, enc: &Encoded, e: &LocalExplanation, mask: u32) -> Result<(f64, f64), String> {
    let top = e
        .words
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.value.total_cmp(&b.1.value))
        .map(|(i, _)| i)
        .ok_or("no words")?;
    occlude_word(model, enc, mask, e, top).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// Annotation workflow

fn annotation_workflow() -> Outcome {
    let dir = fixtures().join("annotation");
    let posts = read_corpus(dir.join("posts.jsonl")).map_err(|e| e.to_string())?;
    ensure!(posts.len() == 10, "{} posts", posts.len());
    let llm = LlmClient::new(
        Arc::new(ReplayTransport::from_jsonl(dir.join("llm_replay.jsonl")).map_err(|e| e.to_string())?),
        LlmConfig {
            model_id: "gpt-3.5-turbo".into(),
            ..LlmConfig::default()
        },
    );
    let mut store = AnnotationStore::in_memory(posts.clone());
    for r in read_annotation_csv(dir.join("human_labels.csv")).map_err(|e| e.to_string())? {
        store.record(r).map_err(|e| e.to_string())?;
    }
    for p in &posts {
        let r = llm.annotate(p).map_err(|e| e.to_string())?;
        store
            .record(AnnotationRecord::new(p.key(), llm.annotator_id(), r.category, 1).with_rationale(r.rationale))
            .map_err(|e| e.to_string())?;
    }
    let (a, b) = ("human:A1", "llm:gpt-3.5-turbo");
    let stats = store.agreement(a, b, 1).map_err(|e| e.to_string())?;
    ensure!(stats.n_agree == 7 && (stats.kappa - 0.52 / 0.82).abs() < 1e-9, "agreement {stats:?}");
    ensure!(store.open_conflicts(a, b, 1).map_err(|e| e.to_string())? == 3, "expected 3 conflicts");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let gold_path = tmp.path().join("gold.jsonl");
    ensure!(store.export_gold(&gold_path).is_err(), "export allowed with open cases");
    let mut reviewer = read_decisions(&dir.join("decisions.json")).map_err(|e| e.to_string())?;
    let open: Vec<String> = store.open_cases().iter().map(|c| c.post_id.clone()).collect();
    for id in &open {
        let case = store.negotiate(id, 3, &llm, &mut reviewer).map_err(|e| e.to_string())?;
        ensure!(case.status == CaseStatus::Resolved, "{id} left open");
    }
    let hist = store.export_gold(&gold_path).map_err(|e| e.to_string())?;
    let counts: Vec<usize> = ChallengeCategory::ALL.iter().map(|c| hist.count(*c)).collect();
    ensure!(counts == [2, 1, 1, 2, 2, 2], "gold histogram {counts:?}");
    Ok(format!("kappa {:.4}, 3 cases resolved, gold histogram {counts:?}", stats.kappa))
}

// ---------------------------------------------------------------------------
// Ingestion

fn ingestion() -> Outcome {
    let exports = fixtures().join("exports");
    let sources = vec![
        (exports.join("so_questions.csv"), Forum::StackOverflow),
        (exports.join("qcse_questions.csv"), Forum::QuantumComputing),
        (exports.join("csse_questions.csv"), Forum::ComputerScience),
        (exports.join("aise_questions.csv"), Forum::ArtificialIntelligence),
    ];
    let mut posts = Vec::new();
    let mut per_forum = BTreeMap::new();
    for ((_, forum), parsed) in sources.iter().zip(parse_exports(&sources)) {
        let parsed = parsed.map_err(|e| e.to_string())?;
        let kept = apply_tag_filter(parsed.posts, &TagFilter::study(*forum)).map_err(|e| e.to_string())?;
        per_forum.insert(forum.code(), kept.len());
        posts.extend(kept);
    }
    let want = BTreeMap::from([("AISE", 1), ("CSSE", 2), ("QCSE", 4), ("SO", 5)]);
    ensure!(per_forum == want, "per-forum counts {per_forum:?}");

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (p1, p2) = (tmp.path().join("a.jsonl"), tmp.path().join("b.jsonl"));
    write_corpus(&posts, &p1).map_err(|e| e.to_string())?;
    write_corpus(&read_corpus(&p1).map_err(|e| e.to_string())?, &p2).map_err(|e| e.to_string())?;
    let (b1, b2) = (std::fs::read(&p1).map_err(|e| e.to_string())?, std::fs::read(&p2).map_err(|e| e.to_string())?);
    ensure!(b1 == b2, "corpus round trip is not byte-stable");

    let golden = fixtures().join("clean_text");
    let mut n = 0;
    for entry in std::fs::read_dir(&golden).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        if path.extension().is_some_and(|e| e == "html") {
            let html = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
            let want = std::fs::read_to_string(path.with_extension("txt")).map_err(|e| e.to_string())?;
            ensure!(clean_text(&html) == want, "{} mismatch", path.display());
            n += 1;
        }
    }
    ensure!(n == 5, "{n} golden files");
    Ok(format!("{} posts {per_forum:?}, byte-stable round trip, {n} golden files", posts.len()))
}

// ---------------------------------------------------------------------------

fn main() {
    let start = Instant::now();
    let trained = train_keyword_model();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("metrics oracle equivalence", Box::new(metrics_oracle)),
        ("kappa correctness", Box::new(kappa_fixtures)),
        ("split/balance invariants", Box::new(splits_and_balance)),
        ("training-loop sanity", Box::new(|| training_sanity(&trained))),
        ("ROC/AUC", Box::new(roc_auc_checks)),
        ("explainer", Box::new(|| explainer_checks(&trained))),
        ("annotation workflow", Box::new(annotation_workflow)),
        ("ingestion", Box::new(ingestion)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{}] {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {}/{} passed in {:.0}s",
        criteria.len() - failed,
        criteria.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
