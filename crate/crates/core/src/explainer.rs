//! Token attributions for the classifier.
//!
//! Players are the non-special tokens of one encoded post. They are arranged
//! in a binary partition tree: words are split into contiguous halves down to
//! single words, and multi-piece words are split again down to pieces. Values
//! are Owen values of that hierarchy for the game "class probabilities when
//! only the coalition is visible", where hidden tokens are replaced by the
//! mask token. Owen values are efficient, so `base + sum == output` holds up
//! to float error, also in budgeted mode where a subtree's value is shared
//! evenly by its tokens.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::argmax;
use crate::ingest::Post;
use crate::plot;
use crate::taxonomy::{ChallengeCategory, NUM_CATEGORIES};
use crate::tokenizer::{Encoded, TokenizerError};
use crate::trainer::{ModelHandle, TrainError};

pub type Probs = [f64; NUM_CATEGORIES];

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("empty sample")]
    EmptySample,
    #[error("model evaluation failed: {0}")]
    Model(String),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<TrainError> for ExplainError {
    fn from(e: TrainError) -> Self {
        ExplainError::Model(e.to_string())
    }
}

/// Anything that maps encoded rows (ids, attention mask) to class probabilities.
pub trait CoalitionModel {
    fn probabilities(&self, rows: &[(Vec<u32>, Vec<u32>)]) -> Result<Vec<Probs>, ExplainError>;
}

impl CoalitionModel for ModelHandle {
    fn probabilities(&self, rows: &[(Vec<u32>, Vec<u32>)]) -> Result<Vec<Probs>, ExplainError> {
        let refs: Vec<(&[u32], &[u32])> = rows.iter().map(|(i, m)| (i.as_slice(), m.as_slice())).collect();
        Ok(self.predict_rows(&refs)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplainerConfig {
    /// Most distinct model evaluations per post before falling back to a
    /// coarser partition.
    pub max_evals: usize,
    /// Evaluations per forward batch.
    pub batch_size: usize,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        ExplainerConfig {
            max_evals: 4096,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenValue {
    #[serde(rename = "t")]
    pub token: String,
    #[serde(rename = "v")]
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalExplanation {
    pub post_id: String,
    pub predicted: ChallengeCategory,
    /// Softmax probability of the predicted class.
    pub confidence: f64,
    /// Predicted-class probability with every player masked.
    pub base_value: f64,
    /// One entry per encoded position for the predicted class; special
    /// tokens and padding are 0.
    pub tokens: Vec<TokenValue>,
    /// Word-level values (pieces summed) for the predicted class.
    pub words: Vec<TokenValue>,
    /// Word-level values for every class, codec order.
    pub word_values_by_class: Vec<Vec<f64>>,
    pub base_by_class: Probs,
    pub output_by_class: Probs,
    /// True when the budget forced a coarser partition.
    pub approximate: bool,
    pub evaluations: usize,
}

impl LocalExplanation {
    /// `|base + sum - output|` for the predicted class.
    pub fn additivity_gap(&self) -> f64 {
        let sum: f64 = self.tokens.iter().map(|t| t.value).sum();
        (self.base_value + sum - self.confidence).abs()
    }

    /// Word with the largest positive value, if any.
    pub fn top_word(&self) -> Option<usize> {
        self.words
            .iter()
            .enumerate()
            .filter(|(_, w)| w.value > 0.0)
            .max_by(|a, b| a.1.value.total_cmp(&b.1.value))
            .map(|(i, _)| i)
    }
}

#[derive(Debug, Clone)]
struct Node {
    players: Vec<usize>,
    children: Option<Box<(Node, Node)>>,
}

impl Node {
    fn leaf(players: Vec<usize>) -> Self {
        Node { players, children: None }
    }

    fn split(groups: &[Vec<usize>], inner: &dyn Fn(&[usize]) -> Node) -> Node {
        if groups.len() == 1 {
            return inner(&groups[0]);
        }
        let mid = groups.len() / 2;
        let left = Node::split(&groups[..mid], inner);
        let right = Node::split(&groups[mid..], inner);
        Node {
            players: groups.concat(),
            children: Some(Box::new((left, right))),
        }
    }

    fn pieces(players: &[usize]) -> Node {
        if players.len() == 1 {
            return Node::leaf(players.to_vec());
        }
        let groups: Vec<Vec<usize>> = players.iter().map(|&p| vec![p]).collect();
        Node::split(&groups, &|g| Node::leaf(g.to_vec()))
    }

    fn depth(&self) -> usize {
        match &self.children {
            None => 0,
            Some(c) => 1 + c.0.depth().max(c.1.depth()),
        }
    }
}

type Coalition = Vec<u64>;

fn with(c: &Coalition, players: &[usize]) -> Coalition {
    let mut out = c.clone();
    for &p in players {
        out[p / 64] |= 1 << (p % 64);
    }
    out
}

/// Coalitions needed to evaluate the tree down to `max_depth`.
fn collect(node: &Node, contexts: &[(f64, Coalition)], depth: usize, max_depth: usize, out: &mut Vec<Coalition>) {
    for (_, s) in contexts {
        out.push(s.clone());
        out.push(with(s, &node.players));
    }
    if depth >= max_depth {
        return;
    }
    if let Some(ch) = &node.children {
        let (l, r) = (&ch.0, &ch.1);
        collect(l, &child_contexts(contexts, &r.players), depth + 1, max_depth, out);
        collect(r, &child_contexts(contexts, &l.players), depth + 1, max_depth, out);
    }
}

fn child_contexts(contexts: &[(f64, Coalition)], sibling: &[usize]) -> Vec<(f64, Coalition)> {
    let mut out = Vec::with_capacity(contexts.len() * 2);
    for (w, s) in contexts {
        out.push((w / 2.0, s.clone()));
        out.push((w / 2.0, with(s, sibling)));
    }
    out
}

fn assign(
    node: &Node,
    contexts: &[(f64, Coalition)],
    depth: usize,
    max_depth: usize,
    f: &HashMap<Coalition, Probs>,
    values: &mut [Probs],
) {
    let stop = depth >= max_depth || node.children.is_none();
    if stop {
        let mut total = [0.0; NUM_CATEGORIES];
        for (w, s) in contexts {
            let a = &f[&with(s, &node.players)];
            let b = &f[s];
            for c in 0..NUM_CATEGORIES {
                total[c] += w * (a[c] - b[c]);
            }
        }
        let share = 1.0 / node.players.len() as f64;
        for &p in &node.players {
            for c in 0..NUM_CATEGORIES {
                values[p][c] += total[c] * share;
            }
        }
        return;
    }
    let ch = node.children.as_ref().expect("checked");
    let (l, r) = (&ch.0, &ch.1);
    assign(l, &child_contexts(contexts, &r.players), depth + 1, max_depth, f, values);
    assign(r, &child_contexts(contexts, &l.players), depth + 1, max_depth, f, values);
}

/// Raw Owen values for an arbitrary game over `n` players grouped by `words`
/// (each inner vec is one word's pieces, in order). Returns per-player values,
/// the empty- and full-coalition outputs, whether the budget cut the tree and
/// the number of distinct evaluations.
pub fn owen_values(
    words: &[Vec<usize>],
    n: usize,
    max_evals: usize,
    game: &mut dyn FnMut(&[Coalition]) -> Result<Vec<Probs>, ExplainError>,
) -> Result<(Vec<Probs>, Probs, Probs, bool, usize), ExplainError> {
    let empty: Coalition = vec![0; n.div_ceil(64).max(1)];
    if words.is_empty() {
        let out = game(std::slice::from_ref(&empty))?;
        return Ok((vec![], out[0], out[0], false, 1));
    }
    let root = Node::split(words, &Node::pieces);
    let full_depth = root.depth();
    let root_ctx = vec![(1.0, empty.clone())];
    let mut depth = full_depth;
    let needed = loop {
        let mut c = Vec::new();
        collect(&root, &root_ctx, 0, depth, &mut c);
        c.sort();
        c.dedup();
        if c.len() <= max_evals.max(2) || depth == 0 {
            break c;
        }
        depth -= 1;
    };
    let outputs = game(&needed)?;
    let evals = needed.len();
    let f: HashMap<Coalition, Probs> = needed.into_iter().zip(outputs).collect();
    let mut values = vec![[0.0; NUM_CATEGORIES]; n];
    assign(&root, &root_ctx, 0, depth, &f, &mut values);
    let all: Vec<usize> = words.iter().flatten().copied().collect();
    Ok((values, f[&empty], f[&with(&empty, &all)], depth < full_depth, evals))
}

/// Players (positions) of an encoding grouped by word, skipping special
/// tokens and padding.
fn word_groups(enc: &Encoded) -> (Vec<usize>, Vec<Vec<usize>>, Vec<String>) {
    let positions: Vec<usize> = (0..enc.ids.len())
        .filter(|&i| enc.attention_mask[i] == 1 && enc.special[i] == 0)
        .collect();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut labels = Vec::new();
    let mut last: Option<u32> = None;
    for (player, &pos) in positions.iter().enumerate() {
        let wid = enc.word_ids[pos];
        if wid.is_some() && wid == last {
            groups.last_mut().expect("started").push(player);
        } else {
            groups.push(vec![player]);
            labels.push(
                wid.and_then(|w| enc.words.get(w as usize).cloned())
                    .unwrap_or_else(|| enc.tokens[pos].clone()),
            );
        }
        last = wid;
    }
    (positions, groups, labels)
}

/// Explains one encoded input against `model`, masking hidden tokens with `mask_id`.
pub fn explain_encoded(
    model: &dyn CoalitionModel,
    post_id: &str,
    enc: &Encoded,
    mask_id: u32,
    cfg: &ExplainerConfig,
) -> Result<LocalExplanation, ExplainError> {
    let (positions, groups, labels) = word_groups(enc);
    let n = positions.len();
    let mut game = |coalitions: &[Coalition]| -> Result<Vec<Probs>, ExplainError> {
        let mut out = Vec::with_capacity(coalitions.len());
        for chunk in coalitions.chunks(cfg.batch_size.max(1)) {
            let rows: Vec<(Vec<u32>, Vec<u32>)> = chunk
                .iter()
                .map(|c| {
                    let mut ids = enc.ids.clone();
                    for (player, &pos) in positions.iter().enumerate() {
                        if c[player / 64] & (1 << (player % 64)) == 0 {
                            ids[pos] = mask_id;
                        }
                    }
                    (ids, enc.attention_mask.clone())
                })
                .collect();
            out.extend(model.probabilities(&rows)?);
        }
        Ok(out)
    };
    let (values, base, output, approximate, evaluations) = owen_values(&groups, n, cfg.max_evals, &mut game)?;
    let predicted = argmax(&output);
    let mut tokens: Vec<TokenValue> = enc
        .tokens
        .iter()
        .map(|t| TokenValue {
            token: t.clone(),
            value: 0.0,
        })
        .collect();
    for (player, &pos) in positions.iter().enumerate() {
        tokens[pos].value = values[player][predicted];
    }
    let word_values_by_class: Vec<Vec<f64>> = (0..NUM_CATEGORIES)
        .map(|c| groups.iter().map(|g| g.iter().map(|&p| values[p][c]).sum()).collect())
        .collect();
    let words = labels
        .iter()
        .zip(&word_values_by_class[predicted])
        .map(|(w, &v)| TokenValue {
            token: w.clone(),
            value: v,
        })
        .collect();
    Ok(LocalExplanation {
        post_id: post_id.to_string(),
        predicted: ChallengeCategory::from_index(predicted).expect("argmax in range"),
        confidence: output[predicted],
        base_value: base[predicted],
        tokens,
        words,
        word_values_by_class,
        base_by_class: base,
        output_by_class: output,
        approximate,
        evaluations,
    })
}

pub fn explain_local(model: &ModelHandle, post: &Post, cfg: &ExplainerConfig) -> Result<LocalExplanation, ExplainError> {
    explain_text(model, &post.key(), &post.classifier_text(), cfg)
}

pub fn explain_text(
    model: &ModelHandle,
    post_id: &str,
    text: &str,
    cfg: &ExplainerConfig,
) -> Result<LocalExplanation, ExplainError> {
    let enc = model.tokenizer().encode(text)?;
    explain_encoded(model, post_id, &enc, model.tokenizer().special_ids().mask, cfg)
}

/// Masks every piece of word `word` and returns the predicted-class
/// probability before and after.
pub fn occlude_word(
    model: &dyn CoalitionModel,
    enc: &Encoded,
    mask_id: u32,
    explanation: &LocalExplanation,
    word: usize,
) -> Result<(f64, f64), ExplainError> {
    let (positions, groups, _) = word_groups(enc);
    let mut ids = enc.ids.clone();
    for &p in &groups[word] {
        ids[positions[p]] = mask_id;
    }
    let out = model.probabilities(&[(enc.ids.clone(), enc.attention_mask.clone()), (ids, enc.attention_mask.clone())])?;
    let c = explanation.predicted.index();
    Ok((out[0][c], out[1][c]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalFeature {
    pub token: String,
    pub mean_abs_value: f64,
    pub per_class: BTreeMap<ChallengeCategory, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalSummary {
    pub sample_size: usize,
    pub features: Vec<GlobalFeature>,
}

impl GlobalSummary {
    /// Aggregates local explanations. Each post contributes the |value| of
    /// its words toward its predicted class, summed over repeated words
    /// (lowercased), to that class's component; components are means over
    /// the whole sample. `mean_abs_value` is the sum of the components.
    pub fn from_locals(locals: &[LocalExplanation], top_n: usize) -> Result<Self, ExplainError> {
        if locals.is_empty() {
            return Err(ExplainError::EmptySample);
        }
        let m = locals.len() as f64;
        let mut acc: BTreeMap<String, [f64; NUM_CATEGORIES]> = BTreeMap::new();
        for local in locals {
            let c = local.predicted.index();
            for w in &local.words {
                acc.entry(w.token.to_lowercase()).or_insert([0.0; NUM_CATEGORIES])[c] += w.value.abs() / m;
            }
        }
        let mut features: Vec<GlobalFeature> = acc
            .into_iter()
            .map(|(token, v)| GlobalFeature {
                token,
                mean_abs_value: v.iter().sum(),
                per_class: ChallengeCategory::ALL.iter().map(|&c| (c, v[c.index()])).collect(),
            })
            .collect();
        features.sort_by(|a, b| b.mean_abs_value.total_cmp(&a.mean_abs_value).then_with(|| a.token.cmp(&b.token)));
        features.truncate(top_n);
        Ok(GlobalSummary {
            sample_size: locals.len(),
            features,
        })
    }

    /// Features ranked by one class component.
    pub fn top_for_class(&self, class: ChallengeCategory, n: usize) -> Vec<&GlobalFeature> {
        let mut f: Vec<&GlobalFeature> = self.features.iter().collect();
        f.sort_by(|a, b| b.per_class[&class].total_cmp(&a.per_class[&class]).then_with(|| a.token.cmp(&b.token)));
        f.truncate(n);
        f
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,token,mean_abs_value");
        for c in ChallengeCategory::ALL {
            let _ = write!(out, ",{}", c.slug());
        }
        out.push('\n');
        for (i, f) in self.features.iter().enumerate() {
            let _ = write!(out, "{},{},{:.6}", i + 1, csv_field(&f.token), f.mean_abs_value);
            for c in ChallengeCategory::ALL {
                let _ = write!(out, ",{:.6}", f.per_class[&c]);
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Explains every post of the sample and aggregates the top `top_n` words.
pub fn explain_global(
    model: &ModelHandle,
    sample: &[Post],
    top_n: usize,
    cfg: &ExplainerConfig,
) -> Result<(GlobalSummary, Vec<LocalExplanation>), ExplainError> {
    if sample.is_empty() {
        return Err(ExplainError::EmptySample);
    }
    let locals = sample
        .iter()
        .map(|p| explain_local(model, p, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((GlobalSummary::from_locals(&locals, top_n)?, locals))
}

#[derive(Serialize, Deserialize)]
struct Sidecar<'a> {
    predicted: ChallengeCategory,
    confidence: f64,
    base_value: f64,
    tokens: std::borrow::Cow<'a, [TokenValue]>,
    words: std::borrow::Cow<'a, [TokenValue]>,
    approximate: bool,
}

pub fn file_stem(post_id: &str) -> String {
    post_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.:".contains(c) { c } else { '_' })
        .collect()
}

/// Force-style strip: words laid out left to right, red pushes toward the
/// predicted class, blue away, opacity by magnitude.
pub fn force_plot(e: &LocalExplanation) -> String {
    let max = e.words.iter().map(|w| w.value.abs()).fold(1e-12, f64::max);
    let mut x = 10.0;
    let mut cells = String::new();
    for w in &e.words {
        let width = 14.0 + 7.5 * w.token.chars().count() as f64;
        let (r, g, b) = if w.value >= 0.0 { (214, 39, 40) } else { (31, 119, 180) };
        let alpha = 0.15 + 0.85 * w.value.abs() / max;
        let _ = write!(
            cells,
            r#"<rect x="{x:.1}" y="60" width="{width:.1}" height="28" fill="rgba({r},{g},{b},{alpha:.3})"><title>{}: {:+.5}</title></rect><text x="{:.1}" y="79" text-anchor="middle">{}</text>"#,
            plot::escape(&w.token),
            w.value,
            x + width / 2.0,
            plot::escape(&w.token)
        );
        x += width + 2.0;
    }
    let width = (x + 10.0).max(420.0);
    format!(
        concat!(
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="110" font-family="sans-serif" font-size="12">"#,
            r#"<rect width="{w:.0}" height="110" fill="white"/>"#,
            r#"<text x="10" y="22" font-size="14">{id}: {cat} ({conf:.6})</text>"#,
            r#"<text x="10" y="44">base value {base:.4}, output {conf:.4}</text>{cells}</svg>"#,
            "\n"
        ),
        w = width,
        id = plot::escape(&e.post_id),
        cat = e.predicted.name(),
        conf = e.confidence,
        base = e.base_value,
        cells = cells
    )
}

/// Writes `explanations/<post>.json` and `.svg` per local explanation and,
/// when given, `global_summary.csv` and `global_summary.svg`.
pub fn render_explanations(
    locals: &[LocalExplanation],
    global: Option<&GlobalSummary>,
    outdir: impl AsRef<Path>,
) -> Result<(), ExplainError> {
    if locals.is_empty() && global.is_none() {
        return Err(ExplainError::EmptySample);
    }
    let outdir = outdir.as_ref();
    let dir = outdir.join("explanations");
    std::fs::create_dir_all(&dir)?;
    for e in locals {
        let stem = file_stem(&e.post_id);
        let side = Sidecar {
            predicted: e.predicted,
            confidence: e.confidence,
            base_value: e.base_value,
            tokens: e.tokens.as_slice().into(),
            words: e.words.as_slice().into(),
            approximate: e.approximate,
        };
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&side)?)?;
        std::fs::write(dir.join(format!("{stem}.svg")), force_plot(e))?;
    }
    if let Some(g) = global {
        std::fs::write(outdir.join("global_summary.csv"), g.to_csv())?;
        let labels: Vec<String> = g.features.iter().map(|f| f.token.clone()).collect();
        let values: Vec<f64> = g.features.iter().map(|f| f.mean_abs_value).collect();
        std::fs::write(
            outdir.join("global_summary.svg"),
            plot::bar_chart("Mean |attribution| by word", &labels, &values),
        )?;
        std::fs::write(outdir.join("global_summary.json"), serde_json::to_string_pretty(g)?)?;
    }
    Ok(())
}

/// Reads back the JSON sidecar of one explanation: predicted class,
/// confidence, base value and per-position tokens.
pub fn read_sidecar(path: impl AsRef<Path>) -> Result<(ChallengeCategory, f64, f64, Vec<TokenValue>), ExplainError> {
    let text = std::fs::read_to_string(path)?;
    let s: Sidecar = serde_json::from_str(&text)?;
    Ok((s.predicted, s.confidence, s.base_value, s.tokens.into_owned()))
}
