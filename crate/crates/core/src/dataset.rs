//! Model-ready material from the gold dataset: tokenization, length
//! analysis, stratified folds and training-side upsampling.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::GoldRecord;
use crate::ingest::classifier_text;
use crate::taxonomy::ChallengeCategory;
use crate::tokenizer::{TextTokenizer, TokenizerError};

/// Sequence length used unless configured otherwise.
pub const DEFAULT_MAX_LEN: usize = 128;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset is empty")]
    Empty,
    #[error("class {category} has {count} example(s), fewer than k={k}")]
    ClassTooSmall {
        category: ChallengeCategory,
        count: usize,
        k: usize,
    },
    #[error("k must be at least 2 (got {0})")]
    InvalidK(usize),
    #[error("class {0} is absent from the training portion")]
    MissingClass(ChallengeCategory),
    #[error("label index {0} out of range")]
    BadLabel(usize),
    #[error("fold {fold} out of range for k={k}")]
    BadFold { fold: usize, k: usize },
    #[error("post {0} is not in the fold plan")]
    Unplanned(String),
    #[error("fold plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedExample {
    pub post_id: String,
    pub input_ids: Vec<u32>,
    pub attention_mask: Vec<u32>,
    pub label_index: usize,
}

impl TokenizedExample {
    pub fn category(&self) -> ChallengeCategory {
        ChallengeCategory::from_index(self.label_index).expect("labels are validated on tokenization")
    }
}

/// Encodes `title + " " + body_text` of every record, padded to the tokenizer's max length.
pub fn tokenize(gold: &[GoldRecord], tokenizer: &TextTokenizer) -> Result<Vec<TokenizedExample>, DatasetError> {
    gold.iter()
        .map(|rec| {
            if rec.label_index >= ChallengeCategory::ALL.len() {
                return Err(DatasetError::BadLabel(rec.label_index));
            }
            let enc = tokenizer.encode(&classifier_text(&rec.title, &rec.body_text))?;
            Ok(TokenizedExample {
                post_id: rec.post_id.clone(),
                input_ids: enc.ids,
                attention_mask: enc.attention_mask,
                label_index: rec.label_index,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthAnalysis {
    /// Token count (with special tokens, untruncated) per post.
    pub counts: Vec<(String, usize)>,
    pub p50: usize,
    pub p90: usize,
    pub p95: usize,
    pub p99: usize,
    pub max: usize,
    /// Share of posts that fit without truncation at the recommended length.
    pub coverage_at_recommended: f64,
    pub recommended_max_len: usize,
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[usize], p: f64) -> usize {
    assert!(!sorted.is_empty());
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl LengthAnalysis {
    /// Histogram with fixed-width bins: `(bin_start, count)`.
    pub fn histogram(&self, bin_width: usize) -> Vec<(usize, usize)> {
        let bin_width = bin_width.max(1);
        let mut bins = vec![0usize; self.max / bin_width + 1];
        for (_, c) in &self.counts {
            bins[c / bin_width] += 1;
        }
        bins.into_iter()
            .enumerate()
            .map(|(i, n)| (i * bin_width, n))
            .collect()
    }

    pub fn histogram_csv(&self, bin_width: usize) -> String {
        let mut out = String::from("bin_start,bin_end,count\n");
        for (start, n) in self.histogram(bin_width) {
            out.push_str(&format!("{start},{},{n}\n", start + bin_width - 1));
        }
        out
    }

    pub fn percentiles_csv(&self) -> String {
        format!(
            "percentile,tokens\n50,{}\n90,{}\n95,{}\n99,{}\nmax,{}\n",
            self.p50, self.p90, self.p95, self.p99, self.max
        )
    }
}

pub fn analyze_lengths(gold: &[GoldRecord], tokenizer: &TextTokenizer) -> Result<LengthAnalysis, DatasetError> {
    analyze_lengths_with(gold, tokenizer, DEFAULT_MAX_LEN)
}

pub fn analyze_lengths_with(
    gold: &[GoldRecord],
    tokenizer: &TextTokenizer,
    recommended_max_len: usize,
) -> Result<LengthAnalysis, DatasetError> {
    if gold.is_empty() {
        return Err(DatasetError::Empty);
    }
    let counts = gold
        .iter()
        .map(|r| {
            let n = tokenizer.count_tokens(&classifier_text(&r.title, &r.body_text))?;
            Ok((r.post_id.clone(), n))
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    let mut sorted: Vec<usize> = counts.iter().map(|(_, n)| *n).collect();
    sorted.sort_unstable();
    let fits = sorted.iter().filter(|&&n| n <= recommended_max_len).count();
    Ok(LengthAnalysis {
        p50: percentile(&sorted, 50.0),
        p90: percentile(&sorted, 90.0),
        p95: percentile(&sorted, 95.0),
        p99: percentile(&sorted, 99.0),
        max: *sorted.last().unwrap(),
        coverage_at_recommended: fits as f64 / sorted.len() as f64,
        recommended_max_len,
        counts,
    })
}

/// Assignment of every post to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, post_id: &str) -> Option<usize> {
        self.assignment.get(post_id).copied()
    }

    pub fn validation_ids(&self, fold: usize) -> BTreeSet<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(p, _)| p.as_str())
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("post_id,fold\n");
        for (post, fold) in &self.assignment {
            out.push_str(&format!("{post},{fold}\n"));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Reads a plan written by [`FoldPlan::write_csv`]; `seed` is not stored in the CSV.
    pub fn read_csv(path: impl AsRef<Path>, seed: u64) -> Result<Self, DatasetError> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| DatasetError::Plan(e.to_string()))?;
        let mut assignment = BTreeMap::new();
        for row in reader.records() {
            let row = row.map_err(|e| DatasetError::Plan(e.to_string()))?;
            let fold: usize = row
                .get(1)
                .and_then(|f| f.trim().parse().ok())
                .ok_or_else(|| DatasetError::Plan(format!("bad row {row:?}")))?;
            assignment.insert(row.get(0).unwrap_or("").to_string(), fold);
        }
        let k = assignment.values().max().map(|m| m + 1).unwrap_or(0);
        Ok(FoldPlan { k, seed, assignment })
    }

    /// Per-class counts in each fold.
    pub fn class_counts<'a, I>(&self, labelled: I) -> Vec<BTreeMap<ChallengeCategory, usize>>
    where
        I: IntoIterator<Item = (&'a str, ChallengeCategory)>,
    {
        let mut out = vec![BTreeMap::new(); self.k];
        for (post, c) in labelled {
            if let Some(f) = self.fold_of(post) {
                *out[f].entry(c).or_insert(0) += 1;
            }
        }
        out
    }
}

/// Stratified k-fold plan over `(post_id, label)` pairs.
///
/// Within each class (taken in codec order, posts sorted by id) the posts
/// are shuffled with a seeded generator and dealt round-robin. The dealing
/// position carries over between classes so fold sizes stay balanced too.
pub fn stratified_folds_by_label<S: AsRef<str>>(
    items: &[(S, ChallengeCategory)],
    k: usize,
    seed: u64,
) -> Result<FoldPlan, DatasetError> {
    if k < 2 {
        return Err(DatasetError::InvalidK(k));
    }
    if items.is_empty() {
        return Err(DatasetError::Empty);
    }
    let mut by_class: BTreeMap<ChallengeCategory, Vec<&str>> = BTreeMap::new();
    for (post, c) in items {
        by_class.entry(*c).or_default().push(post.as_ref());
    }
    for (&category, posts) in &by_class {
        if posts.len() < k {
            return Err(DatasetError::ClassTooSmall {
                category,
                count: posts.len(),
                k,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = BTreeMap::new();
    let mut offset = 0;
    for posts in by_class.values_mut() {
        posts.sort_unstable();
        posts.shuffle(&mut rng);
        for (j, post) in posts.iter().enumerate() {
            assignment.insert(post.to_string(), (offset + j) % k);
        }
        offset = (offset + posts.len()) % k;
    }
    Ok(FoldPlan { k, seed, assignment })
}

pub fn stratified_folds(gold: &[GoldRecord], k: usize, seed: u64) -> Result<FoldPlan, DatasetError> {
    let items: Vec<(&str, ChallengeCategory)> = gold
        .iter()
        .map(|r| {
            ChallengeCategory::from_index(r.label_index)
                .map(|c| (r.post_id.as_str(), c))
                .map_err(|_| DatasetError::BadLabel(r.label_index))
        })
        .collect::<Result<_, _>>()?;
    stratified_folds_by_label(&items, k, seed)
}

/// Indices into `labels` after upsampling every minority label, with
/// replacement and a seeded generator, up to the majority count. Original
/// items come first in input order; duplicates follow, grouped by label.
pub fn upsample_indices<L: Ord + Clone>(labels: &[L], seed: u64) -> Vec<usize> {
    let mut groups: BTreeMap<L, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l.clone()).or_default().push(i);
    }
    let target = groups.values().map(Vec::len).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<usize> = (0..labels.len()).collect();
    for members in groups.values() {
        for _ in members.len()..target {
            out.push(*members.choose(&mut rng).expect("groups are nonempty"));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancedTrainSet {
    pub fold: usize,
    pub examples: Vec<TokenizedExample>,
    pub class_counts: BTreeMap<ChallengeCategory, usize>,
}

impl BalancedTrainSet {
    pub fn post_ids(&self) -> BTreeSet<&str> {
        self.examples.iter().map(|e| e.post_id.as_str()).collect()
    }
}

/// Upsamples the training portion of a fold so all six classes match the majority.
pub fn balance_upsample(
    fold: usize,
    train: &[TokenizedExample],
    seed: u64,
) -> Result<BalancedTrainSet, DatasetError> {
    if train.is_empty() {
        return Err(DatasetError::Empty);
    }
    let present: BTreeSet<usize> = train.iter().map(|e| e.label_index).collect();
    for c in ChallengeCategory::ALL {
        if !present.contains(&c.index()) {
            return Err(DatasetError::MissingClass(c));
        }
    }
    let labels: Vec<usize> = train.iter().map(|e| e.label_index).collect();
    let examples: Vec<TokenizedExample> = upsample_indices(&labels, seed)
        .into_iter()
        .map(|i| train[i].clone())
        .collect();
    let mut class_counts = BTreeMap::new();
    for e in &examples {
        *class_counts.entry(e.category()).or_insert(0) += 1;
    }
    Ok(BalancedTrainSet {
        fold,
        examples,
        class_counts,
    })
}

#[derive(Debug, Clone)]
pub struct FoldData {
    pub fold: usize,
    pub train: BalancedTrainSet,
    pub validation: Vec<TokenizedExample>,
}

impl FoldData {
    /// Post ids present in both the training multiset and the validation set.
    pub fn leaked_ids(&self) -> Vec<String> {
        let train = self.train.post_ids();
        self.validation
            .iter()
            .filter(|e| train.contains(e.post_id.as_str()))
            .map(|e| e.post_id.clone())
            .collect()
    }
}

/// Splits by the plan, then upsamples the training side only.
pub fn fold_data(
    examples: &[TokenizedExample],
    plan: &FoldPlan,
    fold: usize,
    seed: u64,
) -> Result<FoldData, DatasetError> {
    if fold >= plan.k {
        return Err(DatasetError::BadFold { fold, k: plan.k });
    }
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for e in examples {
        match plan.fold_of(&e.post_id) {
            Some(f) if f == fold => validation.push(e.clone()),
            Some(_) => train.push(e.clone()),
            None => return Err(DatasetError::Unplanned(e.post_id.clone())),
        }
    }
    let train = balance_upsample(fold, &train, seed.wrapping_add(fold as u64))?;
    Ok(FoldData {
        fold,
        train,
        validation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::ModelFamily;
    use ChallengeCategory::*;

    const TABLE6: [(ChallengeCategory, usize); 6] = [
        (Tooling, 596),
        (Theoretical, 415),
        (Learning, 166),
        (Conceptual, 610),
        (Errors, 815),
        (ApiUsage, 227),
    ];

    fn study_items() -> Vec<(String, ChallengeCategory)> {
        let mut items = Vec::new();
        for (c, n) in TABLE6 {
            for i in 0..n {
                items.push((format!("{}-{i}", c.slug()), c));
            }
        }
        items
    }

    fn example(id: &str, label: usize) -> TokenizedExample {
        TokenizedExample {
            post_id: id.into(),
            input_ids: vec![2, 3],
            attention_mask: vec![1, 1],
            label_index: label,
        }
    }

    #[test]
    fn table6_fold_counts() {
        let items = study_items();
        assert_eq!(items.len(), 2829);
        let plan = stratified_folds_by_label(&items, 5, 7).unwrap();
        let counts = plan.class_counts(items.iter().map(|(p, c)| (p.as_str(), *c)));
        for fold in &counts {
            assert_eq!(fold[&Errors], 163);
            assert!((119..=120).contains(&fold[&Tooling]));
        }
        for (c, _) in TABLE6 {
            let per: Vec<usize> = counts.iter().map(|f| f[&c]).collect();
            assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1, "{c}: {per:?}");
        }
        let sizes: Vec<usize> = (0..5).map(|f| plan.validation_ids(f).len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert_eq!(plan, stratified_folds_by_label(&items, 5, 7).unwrap());
        assert_ne!(plan, stratified_folds_by_label(&items, 5, 8).unwrap());
    }

    #[test]
    fn full_corpus_balance_is_6x815() {
        let examples: Vec<TokenizedExample> = study_items()
            .iter()
            .map(|(p, c)| example(p, c.index()))
            .collect();
        let balanced = balance_upsample(0, &examples, 1).unwrap();
        assert_eq!(balanced.examples.len(), 4890);
        assert!(balanced.class_counts.values().all(|&n| n == 815));
        assert_eq!(balanced.post_ids().len(), 2829);
    }

    #[test]
    fn two_class_toy() {
        let idx = upsample_indices(&["A", "A", "B"], 3);
        assert_eq!(idx, vec![0, 1, 2, 2]);
    }

    #[test]
    fn balanced_input_is_fixpoint() {
        let examples: Vec<TokenizedExample> = (0..12).map(|i| example(&format!("p{i}"), i % 6)).collect();
        let balanced = balance_upsample(0, &examples, 5).unwrap();
        assert_eq!(balanced.examples, examples);
    }

    #[test]
    fn missing_class_and_small_class_errors() {
        let examples: Vec<TokenizedExample> = (0..5).map(|i| example(&format!("p{i}"), i)).collect();
        assert!(matches!(
            balance_upsample(0, &examples, 1),
            Err(DatasetError::MissingClass(Learning))
        ));
        let items = vec![("a", Errors), ("b", Errors), ("c", Tooling)];
        match stratified_folds_by_label(&items, 2, 0) {
            Err(DatasetError::ClassTooSmall { category, count, k }) => {
                assert_eq!((category, count, k), (Tooling, 1, 2))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fold_data_has_no_leakage() {
        let items = study_items();
        let examples: Vec<TokenizedExample> = items.iter().map(|(p, c)| example(p, c.index())).collect();
        let plan = stratified_folds_by_label(&items, 5, 11).unwrap();
        let mut seen = BTreeSet::new();
        for fold in 0..5 {
            let data = fold_data(&examples, &plan, fold, 11).unwrap();
            assert!(data.leaked_ids().is_empty());
            assert!(data.train.class_counts.values().all(|&n| n == data.train.class_counts[&Errors]));
            for e in &data.validation {
                assert!(seen.insert(e.post_id.clone()));
            }
        }
        assert_eq!(seen.len(), examples.len());
    }

    #[test]
    fn plan_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let items = study_items();
        let plan = stratified_folds_by_label(&items, 5, 3).unwrap();
        let path = dir.path().join("folds.csv");
        plan.write_csv(&path).unwrap();
        assert_eq!(FoldPlan::read_csv(&path, 3).unwrap(), plan);
    }

    fn gold(texts: &[(&str, &str)]) -> Vec<GoldRecord> {
        texts
            .iter()
            .enumerate()
            .map(|(i, (t, b))| GoldRecord {
                post_id: format!("p{i}"),
                title: t.to_string(),
                body_text: b.to_string(),
                label_index: i % 6,
            })
            .collect()
    }

    #[test]
    fn tokenize_contract() {
        let recs = gold(&[("install simulator", "the simulator fails to install"), ("why", "")]);
        let texts: Vec<String> = recs.iter().map(|r| format!("{} {}", r.title, r.body_text)).collect();
        let tok = TextTokenizer::train(ModelFamily::Bert, texts, 200)
            .unwrap()
            .with_max_len(8)
            .unwrap();
        let out = tokenize(&recs, &tok).unwrap();
        assert!(out.iter().all(|e| e.input_ids.len() == 8 && e.attention_mask.len() == 8));
        assert!(out[0].attention_mask.iter().all(|&m| m == 1));
        assert_eq!(out[1].attention_mask, vec![1, 1, 1, 0, 0, 0, 0, 0]);

        let lengths = analyze_lengths(&recs, &tok).unwrap();
        assert_eq!(lengths.counts[1].1, 3);
        assert!(lengths.max >= 9);
        assert!(matches!(analyze_lengths(&[], &tok), Err(DatasetError::Empty)));
    }

    #[test]
    fn percentile_single_value() {
        assert_eq!(percentile(&[10], 50.0), 10);
        assert_eq!(percentile(&[1, 2, 3, 4], 50.0), 2);
        assert_eq!(percentile(&[1, 2, 3, 4], 99.0), 4);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn stratification_and_partition(
                counts in prop::collection::vec(5usize..40, 6),
                k in 2usize..6,
                seed in any::<u64>(),
            ) {
                let mut items = Vec::new();
                for (c, n) in ChallengeCategory::ALL.iter().zip(&counts) {
                    for i in 0..*n {
                        items.push((format!("{}-{i}", c.slug()), *c));
                    }
                }
                let plan = stratified_folds_by_label(&items, k, seed).unwrap();
                prop_assert_eq!(plan.assignment.len(), items.len());
                let per = plan.class_counts(items.iter().map(|(p, c)| (p.as_str(), *c)));
                for c in ChallengeCategory::ALL {
                    let v: Vec<usize> = per.iter().map(|f| f.get(&c).copied().unwrap_or(0)).collect();
                    prop_assert!(v.iter().max().unwrap() - v.iter().min().unwrap() <= 1);
                }
            }

            #[test]
            fn upsampling_preserves_support(labels in prop::collection::vec(0usize..6, 1..80), seed in any::<u64>()) {
                let idx = upsample_indices(&labels, seed);
                let distinct: BTreeSet<usize> = idx.iter().copied().collect();
                prop_assert_eq!(distinct.len(), labels.len());
                let mut counts = BTreeMap::new();
                for i in &idx {
                    *counts.entry(labels[*i]).or_insert(0usize) += 1;
                }
                let first = *counts.values().next().unwrap();
                prop_assert!(counts.values().all(|&n| n == first));
            }
        }
    }
}
