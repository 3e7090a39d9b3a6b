//! Annotation store, inter-annotator agreement, conflict detection,
//! negotiation to consensus and export of the conflict-free dataset.
//!
//! The store is an append-only event log. Records and case updates are new
//! events; nothing already written is rewritten except by [`AnnotationStore::compact`],
//! which replaces the log with an equivalent snapshot.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::Post;
use crate::llm::{LlmError, NegotiationTurn, Speaker};
use crate::taxonomy::{CategoryHistogram, ChallengeCategory};

const N: usize = ChallengeCategory::ALL.len();

/// Default cap on negotiation rounds before a case is escalated.
pub const DEFAULT_MAX_ROUNDS: u32 = 3;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("unknown post {0}")]
    UnknownPost(String),
    #[error("round must be at least 1 (got {0})")]
    InvalidRound(u32),
    #[error("annotator {0} has no round-{1} records")]
    UnknownAnnotator(String, u32),
    #[error("{a} and {b} annotated different posts ({only_a} only by {a}, {only_b} only by {b})")]
    MismatchedPosts {
        a: String,
        b: String,
        only_a: usize,
        only_b: usize,
    },
    #[error("no conflict case for {0}")]
    UnknownCase(String),
    #[error("case {0} is already resolved")]
    AlreadyResolved(String),
    #[error("invalid decision: {0}")]
    InvalidDecision(String),
    #[error("negotiation for {post_id} stopped: {source}")]
    Llm {
        post_id: String,
        #[source]
        source: LlmError,
    },
    #[error("export blocked: {0}")]
    ExportBlocked(BlockReason),
    #[error("annotation log line {line}: {message}")]
    Log { line: usize, message: String },
    #[error("annotation import: {0}")]
    Import(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockReason {
    OpenCases(Vec<String>),
    Empty,
    NoAdjudication,
}

impl std::fmt::Display for BlockReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BlockReason::OpenCases(ids) => {
                write!(f, "{} open conflict case(s): {}", ids.len(), ids.join(", "))
            }
            BlockReason::Empty => f.write_str("empty"),
            BlockReason::NoAdjudication => {
                f.write_str("no annotator pair compared yet (run conflict detection first)")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub post_id: String,
    pub annotator_id: String,
    pub category: ChallengeCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    pub round: u32,
    pub timestamp: DateTime<Utc>,
}

impl AnnotationRecord {
    pub fn new(
        post_id: impl Into<String>,
        annotator_id: impl Into<String>,
        category: ChallengeCategory,
        round: u32,
    ) -> Self {
        AnnotationRecord {
            post_id: post_id.into(),
            annotator_id: annotator_id.into(),
            category,
            rationale: None,
            round,
            timestamp: Utc::now(),
        }
    }

    pub fn with_rationale(mut self, rationale: impl Into<String>) -> Self {
        self.rationale = Some(rationale.into());
        self
    }

    pub fn id(&self) -> String {
        format!("{}/{}/{}", self.post_id, self.annotator_id, self.round)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseStatus {
    Open,
    Resolved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConcededBy {
    Human,
    Llm,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub final_label: ChallengeCategory,
    pub conceded_by: ConcededBy,
}

/// A post the two annotators labelled differently. `human_label` holds the
/// first annotator's label and `llm_label` the second's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictCase {
    pub post_id: String,
    pub human_label: ChallengeCategory,
    pub llm_label: ChallengeCategory,
    pub turns: Vec<NegotiationTurn>,
    pub status: CaseStatus,
    pub resolution: Option<Resolution>,
    #[serde(default)]
    pub rounds: u32,
    #[serde(default)]
    pub needs_senior_review: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionAction {
    Concede,
    Hold,
    AcceptFinal,
}

/// What the human does after reading the LLM's latest turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub action: DecisionAction,
    #[serde(default)]
    pub label: Option<ChallengeCategory>,
    #[serde(default)]
    pub rationale: Option<String>,
}

impl Decision {
    pub fn concede() -> Self {
        Decision {
            action: DecisionAction::Concede,
            label: None,
            rationale: None,
        }
    }

    pub fn hold(rationale: impl Into<String>) -> Self {
        Decision {
            action: DecisionAction::Hold,
            label: None,
            rationale: Some(rationale.into()),
        }
    }

    pub fn accept_final() -> Self {
        Decision {
            action: DecisionAction::AcceptFinal,
            label: None,
            rationale: None,
        }
    }

    pub fn with_rationale(mut self, rationale: impl Into<String>) -> Self {
        self.rationale = Some(rationale.into());
        self
    }

    pub fn with_label(mut self, label: ChallengeCategory) -> Self {
        self.label = Some(label);
        self
    }
}

impl ConflictCase {
    pub fn new(post_id: impl Into<String>, human_label: ChallengeCategory, llm_label: ChallengeCategory) -> Self {
        ConflictCase {
            post_id: post_id.into(),
            human_label,
            llm_label,
            turns: Vec::new(),
            status: CaseStatus::Open,
            resolution: None,
            rounds: 0,
            needs_senior_review: false,
        }
    }

    pub fn is_open(&self) -> bool {
        self.status == CaseStatus::Open
    }

    fn latest(&self, speaker: Speaker) -> Option<ChallengeCategory> {
        self.turns
            .iter()
            .rev()
            .filter(|t| t.speaker == speaker)
            .find_map(|t| t.proposed_category)
    }

    /// The label the LLM side currently argues for.
    pub fn llm_position(&self) -> ChallengeCategory {
        self.latest(Speaker::Llm).unwrap_or(self.llm_label)
    }

    /// The label the human side currently argues for.
    pub fn human_position(&self) -> ChallengeCategory {
        self.latest(Speaker::Human).unwrap_or(self.human_label)
    }

    fn conceded_by_for(&self, final_label: ChallengeCategory) -> ConcededBy {
        if final_label == self.human_label {
            ConcededBy::Llm
        } else if final_label == self.llm_label {
            ConcededBy::Human
        } else {
            ConcededBy::Both
        }
    }

    pub fn push_turn(&mut self, turn: NegotiationTurn) -> Result<(), AnnotationError> {
        if !self.is_open() {
            return Err(AnnotationError::AlreadyResolved(self.post_id.clone()));
        }
        if turn.message.trim().is_empty() && turn.proposed_category.is_none() {
            return Err(AnnotationError::InvalidDecision(
                "a turn needs a message or a proposed category".into(),
            ));
        }
        if turn.speaker == Speaker::Llm {
            self.rounds += 1;
        }
        self.turns.push(turn);
        Ok(())
    }

    /// Applies the consensus rule. A party concedes only by explicitly
    /// taking the other side's label; holding never resolves a case.
    pub fn apply(&mut self, decision: &Decision) -> Result<(), AnnotationError> {
        if !self.is_open() {
            return Err(AnnotationError::AlreadyResolved(self.post_id.clone()));
        }
        let rationale = decision
            .rationale
            .as_deref()
            .map(str::trim)
            .filter(|r| !r.is_empty())
            .map(str::to_string);
        match decision.action {
            DecisionAction::Concede => {
                let target = self.llm_position();
                if let Some(label) = decision.label {
                    if label != target {
                        return Err(AnnotationError::InvalidDecision(format!(
                            "conceding means adopting {target}, not {label}"
                        )));
                    }
                }
                let message = rationale.unwrap_or_else(|| format!("I accept {target}."));
                self.turns
                    .push(NegotiationTurn::new(Speaker::Human, message, Some(target)));
                self.resolve(target);
            }
            DecisionAction::Hold => {
                let Some(message) = rationale else {
                    return Err(AnnotationError::InvalidDecision(
                        "hold requires a rationale".into(),
                    ));
                };
                let label = decision.label.unwrap_or_else(|| self.human_position());
                self.turns
                    .push(NegotiationTurn::new(Speaker::Human, message, Some(label)));
            }
            DecisionAction::AcceptFinal => {
                let (human, llm) = (self.human_position(), self.llm_position());
                if human != llm {
                    return Err(AnnotationError::InvalidDecision(format!(
                        "positions still differ ({human} vs {llm}); concede or hold instead"
                    )));
                }
                if let Some(label) = decision.label {
                    if label != human {
                        return Err(AnnotationError::InvalidDecision(format!(
                            "accept_final must confirm the agreed label {human}"
                        )));
                    }
                }
                let message = rationale.unwrap_or_else(|| format!("Agreed on {human}."));
                self.turns
                    .push(NegotiationTurn::new(Speaker::Human, message, Some(human)));
                self.resolve(human);
            }
        }
        Ok(())
    }

    fn resolve(&mut self, final_label: ChallengeCategory) {
        self.resolution = Some(Resolution {
            final_label,
            conceded_by: self.conceded_by_for(final_label),
        });
        self.status = CaseStatus::Resolved;
        self.needs_senior_review = false;
    }
}

/// Source of LLM negotiation turns.
pub trait Elaborator {
    fn elaborate(
        &self,
        case: &ConflictCase,
        title: &str,
        body: &str,
    ) -> Result<NegotiationTurn, LlmError>;
}

/// The human side of a negotiation.
pub trait HumanReviewer {
    fn review(&mut self, case: &ConflictCase) -> Decision;
}

/// Replays a fixed list of decisions per post; answers `hold` with a note
/// once a post's script runs out.
#[derive(Debug, Default, Clone)]
pub struct ScriptedReviewer {
    scripts: BTreeMap<String, std::collections::VecDeque<Decision>>,
}

impl ScriptedReviewer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn script(mut self, post_id: impl Into<String>, decisions: Vec<Decision>) -> Self {
        self.scripts.insert(post_id.into(), decisions.into());
        self
    }
}

impl HumanReviewer for ScriptedReviewer {
    fn review(&mut self, case: &ConflictCase) -> Decision {
        self.scripts
            .get_mut(&case.post_id)
            .and_then(|q| q.pop_front())
            .unwrap_or_else(|| Decision::hold("No further input; keeping my label."))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub po: f64,
    pub pe: f64,
    pub kappa: f64,
    pub se: f64,
    pub ci95: (f64, f64),
    /// Set when chance agreement is 1 and kappa is fixed by convention.
    pub degenerate: bool,
}

/// Cohen's kappa for a square contingency table (rows: rater A, columns: rater B).
///
/// The confidence interval uses the asymptotic standard error
/// `sqrt(Po (1 - Po) / (n (1 - Pe)^2))`, clipped to [-1, 1].
pub fn cohen_kappa<R: AsRef<[u64]>>(table: &[R]) -> Kappa {
    let k = table.len();
    let n: u64 = table.iter().map(|r| r.as_ref().iter().sum::<u64>()).sum();
    assert!(n > 0, "kappa of an empty table");
    let nf = n as f64;
    let diag: u64 = (0..k).map(|i| table[i].as_ref()[i]).sum();
    let po = diag as f64 / nf;
    let pe: f64 = (0..k)
        .map(|i| {
            let row: u64 = table[i].as_ref().iter().sum();
            let col: u64 = table.iter().map(|r| r.as_ref()[i]).sum();
            (row as f64 / nf) * (col as f64 / nf)
        })
        .sum();
    if (1.0 - pe).abs() < 1e-12 {
        let kappa = if diag == n { 1.0 } else { 0.0 };
        return Kappa {
            po,
            pe,
            kappa,
            se: 0.0,
            ci95: (kappa, kappa),
            degenerate: true,
        };
    }
    let kappa = (po - pe) / (1.0 - pe);
    let se = (po * (1.0 - po) / (nf * (1.0 - pe).powi(2))).sqrt();
    let ci95 = (
        (kappa - 1.96 * se).max(-1.0),
        (kappa + 1.96 * se).min(1.0),
    );
    Kappa {
        po,
        pe,
        kappa,
        se,
        ci95,
        degenerate: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub annotator_a: String,
    pub annotator_b: String,
    pub round: u32,
    pub n_items: usize,
    pub n_agree: usize,
    pub percent_agreement: f64,
    pub expected_agreement: f64,
    pub kappa: f64,
    pub kappa_ci95: (f64, f64),
    pub kappa_degenerate: bool,
    /// Rows: annotator A's label index; columns: annotator B's.
    pub per_category_confusion: [[u64; N]; N],
}

impl AgreementStats {
    pub fn from_pairs<I>(annotator_a: &str, annotator_b: &str, round: u32, pairs: I) -> Self
    where
        I: IntoIterator<Item = (ChallengeCategory, ChallengeCategory)>,
    {
        let mut table = [[0u64; N]; N];
        for (a, b) in pairs {
            table[a.index()][b.index()] += 1;
        }
        let kappa = cohen_kappa(&table);
        let n_items = table.iter().flatten().sum::<u64>() as usize;
        let n_agree = (0..N).map(|i| table[i][i]).sum::<u64>() as usize;
        if kappa.degenerate {
            log::warn!("chance agreement is 1 for {annotator_a} vs {annotator_b}; kappa set to {}", kappa.kappa);
        }
        AgreementStats {
            annotator_a: annotator_a.to_string(),
            annotator_b: annotator_b.to_string(),
            round,
            n_items,
            n_agree,
            percent_agreement: n_agree as f64 / n_items as f64,
            expected_agreement: kappa.pe,
            kappa: kappa.kappa,
            kappa_ci95: kappa.ci95,
            kappa_degenerate: kappa.degenerate,
            per_category_confusion: table,
        }
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let rows: [(&str, String); 8] = [
            ("n_items", self.n_items.to_string()),
            ("n_agree", self.n_agree.to_string()),
            ("percent_agreement", format!("{:.6}", self.percent_agreement)),
            ("expected_agreement", format!("{:.6}", self.expected_agreement)),
            ("kappa", format!("{:.6}", self.kappa)),
            ("kappa_ci95_lo", format!("{:.6}", self.kappa_ci95.0)),
            ("kappa_ci95_hi", format!("{:.6}", self.kappa_ci95.1)),
            ("kappa_degenerate", self.kappa_degenerate.to_string()),
        ];
        for (k, v) in rows {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }

    /// 6×6 cross-tabulation with category names on both axes.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("label");
        for c in ChallengeCategory::ALL {
            out.push(',');
            out.push_str(c.name());
        }
        out.push('\n');
        for (i, c) in ChallengeCategory::ALL.iter().enumerate() {
            out.push_str(c.name());
            for v in self.per_category_confusion[i] {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// One line of the gold dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub post_id: String,
    pub title: String,
    pub body_text: String,
    pub label_index: usize,
}

impl GoldRecord {
    pub fn category(&self) -> ChallengeCategory {
        ChallengeCategory::from_index(self.label_index).expect("gold labels are validated on read")
    }
}

pub fn read_gold(path: impl AsRef<Path>) -> Result<Vec<GoldRecord>, AnnotationError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GoldRecord = serde_json::from_str(&line).map_err(|e| AnnotationError::Log {
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.label_index >= N {
            return Err(AnnotationError::Log {
                line: i + 1,
                message: format!("label_index {} out of range", rec.label_index),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_gold(records: &[GoldRecord], path: impl AsRef<Path>) -> Result<(), AnnotationError> {
    let mut out = BufWriter::new(File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut out, rec).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjudicationPair {
    pub a: String,
    pub b: String,
    pub round: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Record(AnnotationRecord),
    Pair(AdjudicationPair),
    Case(ConflictCase),
}

/// In-memory annotation state backed by an optional JSONL event log.
pub struct AnnotationStore {
    posts: BTreeMap<String, Post>,
    records: BTreeMap<(String, String, u32), AnnotationRecord>,
    cases: BTreeMap<String, ConflictCase>,
    pair: Option<AdjudicationPair>,
    log: Option<(PathBuf, BufWriter<File>)>,
    events_since_compaction: usize,
}

impl AnnotationStore {
    /// Store over a corpus, without persistence.
    pub fn in_memory(posts: impl IntoIterator<Item = Post>) -> Self {
        AnnotationStore {
            posts: posts.into_iter().map(|p| (p.key(), p)).collect(),
            records: BTreeMap::new(),
            cases: BTreeMap::new(),
            pair: None,
            log: None,
            events_since_compaction: 0,
        }
    }

    /// Opens (or creates) a store log and replays it.
    pub fn open(
        path: impl AsRef<Path>,
        posts: impl IntoIterator<Item = Post>,
    ) -> Result<Self, AnnotationError> {
        let path = path.as_ref().to_path_buf();
        let mut store = Self::in_memory(posts);
        if path.exists() {
            for (i, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let event: Event = serde_json::from_str(&line).map_err(|e| AnnotationError::Log {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                store.apply_event(event);
                store.events_since_compaction += 1;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        store.log = Some((path, BufWriter::new(file)));
        Ok(store)
    }

    fn apply_event(&mut self, event: Event) {
        match event {
            Event::Record(r) => {
                self.records
                    .insert((r.post_id.clone(), r.annotator_id.clone(), r.round), r);
            }
            Event::Pair(p) => self.pair = Some(p),
            Event::Case(c) => {
                self.cases.insert(c.post_id.clone(), c);
            }
        }
    }

    fn persist(&mut self, event: Event) -> Result<(), AnnotationError> {
        if let Some((_, out)) = &mut self.log {
            serde_json::to_writer(&mut *out, &event).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
            out.flush()?;
            self.events_since_compaction += 1;
        }
        self.apply_event(event);
        Ok(())
    }

    /// Rewrites the log as one event per live record, pair and case.
    pub fn compact(&mut self) -> Result<(), AnnotationError> {
        let Some((path, _)) = &self.log else {
            return Ok(());
        };
        let path = path.clone();
        let tmp = path.with_extension("compact.tmp");
        {
            let mut out = BufWriter::new(File::create(&tmp)?);
            let events = self
                .records
                .values()
                .cloned()
                .map(Event::Record)
                .chain(self.pair.clone().map(Event::Pair))
                .chain(self.cases.values().cloned().map(Event::Case));
            for event in events {
                serde_json::to_writer(&mut out, &event).map_err(std::io::Error::from)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
        std::fs::rename(&tmp, &path)?;
        let file = OpenOptions::new().append(true).open(&path)?;
        self.log = Some((path, BufWriter::new(file)));
        self.events_since_compaction = self.records.len() + self.cases.len() + self.pair.iter().count();
        Ok(())
    }

    pub fn log_len(&self) -> usize {
        self.events_since_compaction
    }

    pub fn post(&self, post_id: &str) -> Option<&Post> {
        self.posts.get(post_id)
    }

    pub fn post_count(&self) -> usize {
        self.posts.len()
    }

    /// Stores a record, replacing (with a warning) any earlier record for
    /// the same post, annotator and round.
    pub fn record(&mut self, record: AnnotationRecord) -> Result<String, AnnotationError> {
        if !self.posts.contains_key(&record.post_id) {
            return Err(AnnotationError::UnknownPost(record.post_id));
        }
        if record.round == 0 {
            return Err(AnnotationError::InvalidRound(0));
        }
        let key = (record.post_id.clone(), record.annotator_id.clone(), record.round);
        if self.records.contains_key(&key) {
            log::warn!("replacing annotation {}", record.id());
        }
        let id = record.id();
        self.persist(Event::Record(record))?;
        Ok(id)
    }

    pub fn get(&self, post_id: &str, annotator_id: &str, round: u32) -> Option<&AnnotationRecord> {
        self.records
            .get(&(post_id.to_string(), annotator_id.to_string(), round))
    }

    pub fn records(&self) -> impl Iterator<Item = &AnnotationRecord> {
        self.records.values()
    }

    pub fn annotators(&self) -> BTreeSet<String> {
        self.records.values().map(|r| r.annotator_id.clone()).collect()
    }

    /// Labels by post for one annotator and round.
    pub fn labels(&self, annotator_id: &str, round: u32) -> BTreeMap<String, ChallengeCategory> {
        self.records
            .values()
            .filter(|r| r.annotator_id == annotator_id && r.round == round)
            .map(|r| (r.post_id.clone(), r.category))
            .collect()
    }

    fn paired(
        &self,
        a: &str,
        b: &str,
        round: u32,
    ) -> Result<Vec<(String, ChallengeCategory, ChallengeCategory)>, AnnotationError> {
        let la = self.labels(a, round);
        let lb = self.labels(b, round);
        if la.is_empty() {
            return Err(AnnotationError::UnknownAnnotator(a.to_string(), round));
        }
        if lb.is_empty() {
            return Err(AnnotationError::UnknownAnnotator(b.to_string(), round));
        }
        let only_a = la.keys().filter(|k| !lb.contains_key(*k)).count();
        let only_b = lb.keys().filter(|k| !la.contains_key(*k)).count();
        if only_a + only_b > 0 {
            return Err(AnnotationError::MismatchedPosts {
                a: a.to_string(),
                b: b.to_string(),
                only_a,
                only_b,
            });
        }
        Ok(la
            .into_iter()
            .map(|(post, ca)| {
                let cb = lb[&post];
                (post, ca, cb)
            })
            .collect())
    }

    pub fn agreement(&self, a: &str, b: &str, round: u32) -> Result<AgreementStats, AnnotationError> {
        let pairs = self.paired(a, b, round)?;
        Ok(AgreementStats::from_pairs(
            a,
            b,
            round,
            pairs.into_iter().map(|(_, x, y)| (x, y)),
        ))
    }

    /// Open cases for every post the two annotators label differently,
    /// ordered by post id. Each case starts with both round rationales as
    /// turns. Does not modify the store.
    pub fn detect_conflicts(&self, a: &str, b: &str, round: u32) -> Result<Vec<ConflictCase>, AnnotationError> {
        let pairs = self.paired(a, b, round)?;
        Ok(pairs
            .into_iter()
            .filter(|(_, x, y)| x != y)
            .map(|(post, x, y)| {
                let mut case = ConflictCase::new(post.clone(), x, y);
                for (annotator, speaker, label) in [(a, Speaker::Human, x), (b, Speaker::Llm, y)] {
                    if let Some(r) = self.get(&post, annotator, round).and_then(|r| r.rationale.clone()) {
                        case.turns.push(NegotiationTurn {
                            speaker,
                            message: r,
                            proposed_category: Some(label),
                            timestamp: self.get(&post, annotator, round).unwrap().timestamp,
                        });
                    }
                }
                case
            })
            .collect())
    }

    /// Records `(a, b, round)` as the adjudication pair and opens a case
    /// for each disagreement that has none yet. Returns the number of new cases.
    pub fn open_conflicts(&mut self, a: &str, b: &str, round: u32) -> Result<usize, AnnotationError> {
        let cases = self.detect_conflicts(a, b, round)?;
        self.persist(Event::Pair(AdjudicationPair {
            a: a.to_string(),
            b: b.to_string(),
            round,
        }))?;
        let mut opened = 0;
        for case in cases {
            if !self.cases.contains_key(&case.post_id) {
                self.persist(Event::Case(case))?;
                opened += 1;
            }
        }
        Ok(opened)
    }

    pub fn adjudication_pair(&self) -> Option<&AdjudicationPair> {
        self.pair.as_ref()
    }

    pub fn case(&self, post_id: &str) -> Option<&ConflictCase> {
        self.cases.get(post_id)
    }

    pub fn cases(&self) -> impl Iterator<Item = &ConflictCase> {
        self.cases.values()
    }

    pub fn open_cases(&self) -> Vec<&ConflictCase> {
        self.cases.values().filter(|c| c.is_open()).collect()
    }

    fn open_case(&self, post_id: &str) -> Result<ConflictCase, AnnotationError> {
        let case = self
            .cases
            .get(post_id)
            .ok_or_else(|| AnnotationError::UnknownCase(post_id.to_string()))?;
        if !case.is_open() {
            return Err(AnnotationError::AlreadyResolved(post_id.to_string()));
        }
        Ok(case.clone())
    }

    /// Applies a human decision to an open case.
    pub fn decide(&mut self, post_id: &str, decision: &Decision) -> Result<ConflictCase, AnnotationError> {
        let mut case = self.open_case(post_id)?;
        case.apply(decision)?;
        self.persist(Event::Case(case.clone()))?;
        Ok(case)
    }

    /// Appends a turn to an open case.
    pub fn add_turn(&mut self, post_id: &str, turn: NegotiationTurn) -> Result<ConflictCase, AnnotationError> {
        let mut case = self.open_case(post_id)?;
        case.push_turn(turn)?;
        self.persist(Event::Case(case.clone()))?;
        Ok(case)
    }

    fn flag_for_review(&mut self, post_id: &str) -> Result<ConflictCase, AnnotationError> {
        let mut case = self.open_case(post_id)?;
        case.needs_senior_review = true;
        self.persist(Event::Case(case.clone()))?;
        Ok(case)
    }

    /// Runs LLM/human rounds on one case until it resolves or `max_rounds`
    /// LLM turns have been taken, after which it is flagged for senior review.
    /// An LLM failure stops the negotiation and leaves the transcript so far.
    pub fn negotiate(
        &mut self,
        post_id: &str,
        max_rounds: u32,
        llm: &dyn Elaborator,
        human: &mut dyn HumanReviewer,
    ) -> Result<ConflictCase, AnnotationError> {
        let mut case = self.open_case(post_id)?;
        let (title, body) = {
            let post = self
                .posts
                .get(post_id)
                .ok_or_else(|| AnnotationError::UnknownPost(post_id.to_string()))?;
            (post.title.clone(), post.body_text.clone())
        };
        while case.is_open() && case.rounds < max_rounds {
            let turn = llm
                .elaborate(&case, &title, &body)
                .map_err(|source| AnnotationError::Llm {
                    post_id: post_id.to_string(),
                    source,
                })?;
            case = self.add_turn(post_id, turn)?;
            // A rejected decision counts as the human passing this round.
            let decision = human.review(&case);
            match self.decide(post_id, &decision) {
                Ok(updated) => case = updated,
                Err(AnnotationError::InvalidDecision(msg)) => {
                    log::warn!("ignoring invalid decision on {post_id}: {msg}");
                }
                Err(e) => return Err(e),
            }
        }
        if case.is_open() {
            case = self.flag_for_review(post_id)?;
        }
        Ok(case)
    }

    /// Consensus label per post for the adjudication pair: the shared label
    /// where the annotators agreed, the resolution where they did not.
    /// Posts whose case is still open are left out.
    pub fn final_labels(&self) -> BTreeMap<String, ChallengeCategory> {
        let Some(pair) = &self.pair else {
            return BTreeMap::new();
        };
        let la = self.labels(&pair.a, pair.round);
        let lb = self.labels(&pair.b, pair.round);
        la.into_iter()
            .filter_map(|(post, a)| {
                let b = *lb.get(&post)?;
                if a == b {
                    return Some((post, a));
                }
                let resolution = self.cases.get(&post)?.resolution?;
                Some((post, resolution.final_label))
            })
            .collect()
    }

    pub fn gold_records(&self) -> Result<Vec<GoldRecord>, AnnotationError> {
        if self.pair.is_none() {
            return Err(AnnotationError::ExportBlocked(if self.records.is_empty() {
                BlockReason::Empty
            } else {
                BlockReason::NoAdjudication
            }));
        }
        let open: Vec<String> = self.open_cases().iter().map(|c| c.post_id.clone()).collect();
        if !open.is_empty() {
            return Err(AnnotationError::ExportBlocked(BlockReason::OpenCases(open)));
        }
        let labels = self.final_labels();
        if labels.is_empty() {
            return Err(AnnotationError::ExportBlocked(BlockReason::Empty));
        }
        Ok(labels
            .into_iter()
            .map(|(post_id, label)| {
                let post = &self.posts[&post_id];
                GoldRecord {
                    title: post.title.clone(),
                    body_text: post.body_text.clone(),
                    label_index: label.index(),
                    post_id,
                }
            })
            .collect())
    }

    /// Writes the conflict-free dataset. Blocked while any case is open.
    pub fn export_gold(&self, path: impl AsRef<Path>) -> Result<CategoryHistogram, AnnotationError> {
        let records = self.gold_records()?;
        write_gold(&records, path)?;
        Ok(CategoryHistogram::from_labels(records.iter().map(GoldRecord::category)))
    }
}

/// Reads `post_id,annotator_id,category[,rationale[,round]]` CSV rows.
pub fn read_annotation_csv(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>, AnnotationError> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| AnnotationError::Import(e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| AnnotationError::Import(e.to_string()))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let (Some(pid), Some(ann), Some(cat)) = (col("post_id"), col("annotator_id"), col("category")) else {
        return Err(AnnotationError::Import(
            "header must contain post_id, annotator_id and category".into(),
        ));
    };
    let (rat, rnd) = (col("rationale"), col("round"));
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| AnnotationError::Import(e.to_string()))?;
        let field = |c: usize| row.get(c).unwrap_or("").trim();
        let category: ChallengeCategory = field(cat)
            .parse()
            .map_err(|e| AnnotationError::Import(format!("row {}: {e}", i + 2)))?;
        let round = match rnd.map(field).filter(|s| !s.is_empty()) {
            Some(s) => s
                .parse()
                .map_err(|_| AnnotationError::Import(format!("row {}: bad round {s:?}", i + 2)))?,
            None => 1,
        };
        let mut rec = AnnotationRecord::new(field(pid), field(ann), category, round);
        if let Some(r) = rat.map(field).filter(|s| !s.is_empty()) {
            rec = rec.with_rationale(r);
        }
        out.push(rec);
    }
    Ok(out)
}
