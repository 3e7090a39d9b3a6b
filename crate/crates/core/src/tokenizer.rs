//! Tokenizer handles for the supported encoder families.
//!
//! BERT and DistilBERT use lower-cased WordPiece, RoBERTa uses byte-level
//! BPE. When no pretrained vocabulary is available a tokenizer of the right
//! kind is trained on the corpus.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::path::Path;
use std::str::FromStr;

use ahash::AHashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokenizers::decoders::byte_level::ByteLevel as ByteLevelDecoder;
use tokenizers::decoders::wordpiece::WordPiece as WordPieceDecoder;
use tokenizers::models::bpe::BPE;
use tokenizers::models::wordpiece::WordPiece;
use tokenizers::normalizers::BertNormalizer;
use tokenizers::pre_tokenizers::bert::BertPreTokenizer;
use tokenizers::pre_tokenizers::byte_level::ByteLevel;
use tokenizers::processors::bert::BertProcessing;
use tokenizers::processors::roberta::RobertaProcessing;
use tokenizers::utils::padding::{PaddingDirection, PaddingParams, PaddingStrategy};
use tokenizers::utils::truncation::{TruncationDirection, TruncationParams, TruncationStrategy};
use tokenizers::{
    AddedToken, Normalizer, NormalizerWrapper, OffsetReferential, OffsetType, PreTokenizedString, PreTokenizer,
    PreTokenizerWrapper, Tokenizer,
};

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("unknown checkpoint family {0:?} (expected bert, distilbert or roberta)")]
    UnknownFamily(String),
    #[error("max_len must be at least 8 (got {0})")]
    MaxLenTooSmall(usize),
    #[error("tokenizer is missing special token {0}")]
    MissingSpecial(String),
    #[error("tokenizer: {0}")]
    Backend(String),
}

impl From<tokenizers::Error> for TokenizerError {
    fn from(e: tokenizers::Error) -> Self {
        TokenizerError::Backend(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Bert,
    DistilBert,
    Roberta,
}

impl ModelFamily {
    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::Bert => "bert",
            ModelFamily::DistilBert => "distilbert",
            ModelFamily::Roberta => "roberta",
        }
    }

    /// Special tokens in vocabulary order.
    pub fn special_tokens(self) -> SpecialTokens {
        match self {
            ModelFamily::Bert | ModelFamily::DistilBert => SpecialTokens {
                pad: "[PAD]",
                unk: "[UNK]",
                cls: "[CLS]",
                sep: "[SEP]",
                mask: "[MASK]",
            },
            ModelFamily::Roberta => SpecialTokens {
                pad: "<pad>",
                unk: "<unk>",
                cls: "<s>",
                sep: "</s>",
                mask: "<mask>",
            },
        }
    }
}

impl std::fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelFamily {
    type Err = TokenizerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bert" => Ok(ModelFamily::Bert),
            "distilbert" => Ok(ModelFamily::DistilBert),
            "roberta" => Ok(ModelFamily::Roberta),
            other => Err(TokenizerError::UnknownFamily(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SpecialTokens {
    pub pad: &'static str,
    pub unk: &'static str,
    pub cls: &'static str,
    pub sep: &'static str,
    pub mask: &'static str,
}

impl SpecialTokens {
    fn in_vocab_order(&self, family: ModelFamily) -> [&'static str; 5] {
        match family {
            ModelFamily::Roberta => [self.cls, self.pad, self.sep, self.unk, self.mask],
            _ => [self.pad, self.unk, self.cls, self.sep, self.mask],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub sep: u32,
    pub mask: u32,
}

/// One encoded, padded sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u32>,
    /// 1 for special tokens and padding.
    pub special: Vec<u32>,
    /// Word index of each token (`None` for special tokens and padding).
    pub word_ids: Vec<Option<u32>>,
    pub tokens: Vec<String>,
    /// Surface text of each word, in order.
    pub words: Vec<String>,
}

impl Encoded {
    /// Number of non-padding positions.
    pub fn len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone)]
pub struct TextTokenizer {
    family: ModelFamily,
    inner: Tokenizer,
    special: SpecialIds,
    max_len: usize,
}

impl std::fmt::Debug for TextTokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TextTokenizer")
            .field("family", &self.family)
            .field("vocab_size", &self.vocab_size())
            .field("max_len", &self.max_len)
            .finish()
    }
}

impl TextTokenizer {
    /// Trains a family-appropriate tokenizer on `texts`.
    pub fn train<I, S>(family: ModelFamily, texts: I, vocab_size: usize) -> Result<Self, TokenizerError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str> + Send,
    {
        let names = family.special_tokens();
        let specials = names.in_vocab_order(family);
        let (normalizer, pre_tokenizer, prefix): (Option<NormalizerWrapper>, PreTokenizerWrapper, &str) = match family {
            ModelFamily::Bert | ModelFamily::DistilBert => (
                Some(BertNormalizer::new(true, true, None, true).into()),
                BertPreTokenizer.into(),
                "##",
            ),
            ModelFamily::Roberta => (None, ByteLevel::new(true, true, true).into(), ""),
        };
        let counts = word_counts(texts, normalizer.as_ref(), &pre_tokenizer)?;
        let alphabet: BTreeSet<String> = match family {
            ModelFamily::Roberta => ByteLevel::alphabet().into_iter().map(String::from).collect(),
            _ => BTreeSet::new(),
        };
        let learned = learn_merges(&counts, prefix, alphabet, vocab_size.saturating_sub(specials.len()));
        let mut vocab = AHashMap::new();
        for token in specials.iter().map(|t| t.to_string()).chain(learned.tokens) {
            let next = vocab.len() as u32;
            vocab.entry(token).or_insert(next);
        }
        let mut tokenizer = match family {
            ModelFamily::Roberta => {
                let mut t = Tokenizer::new(BPE::builder().vocab_and_merges(vocab, learned.merges).build()?);
                t.with_decoder(Some(ByteLevelDecoder::default()));
                t
            }
            _ => {
                let mut t = Tokenizer::new(
                    WordPiece::builder()
                        .vocab(vocab)
                        .unk_token(names.unk.to_string())
                        .continuing_subword_prefix(prefix.to_string())
                        .build()?,
                );
                t.with_decoder(Some(WordPieceDecoder::default()));
                t
            }
        };
        tokenizer.with_normalizer(normalizer)?;
        tokenizer.with_pre_tokenizer(Some(pre_tokenizer));
        let added: Vec<AddedToken> = specials.iter().map(|t| AddedToken::from(t.to_string(), true)).collect();
        tokenizer.add_special_tokens(added)?;
        let special = lookup_special(&tokenizer, family)?;
        match family {
            ModelFamily::Roberta => {
                tokenizer.with_post_processor(Some(RobertaProcessing::new(
                    (names.sep.to_string(), special.sep),
                    (names.cls.to_string(), special.cls),
                )));
            }
            _ => {
                tokenizer.with_post_processor(Some(BertProcessing::new(
                    (names.sep.to_string(), special.sep),
                    (names.cls.to_string(), special.cls),
                )));
            }
        }
        Ok(TextTokenizer {
            family,
            inner: tokenizer,
            special,
            max_len: 0,
        }
        .with_max_len(128)?)
    }

    /// Loads a `tokenizer.json`.
    pub fn load(path: impl AsRef<Path>, family: ModelFamily) -> Result<Self, TokenizerError> {
        let inner = Tokenizer::from_file(path)?;
        let special = lookup_special(&inner, family)?;
        TextTokenizer {
            family,
            inner,
            special,
            max_len: 0,
        }
        .with_max_len(128)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        self.inner.save(path, false)?;
        Ok(())
    }

    /// Fixes the padded/truncated sequence length.
    pub fn with_max_len(mut self, max_len: usize) -> Result<Self, TokenizerError> {
        if max_len < 8 {
            return Err(TokenizerError::MaxLenTooSmall(max_len));
        }
        self.inner.with_truncation(Some(TruncationParams {
            direction: TruncationDirection::Right,
            max_length: max_len,
            strategy: TruncationStrategy::LongestFirst,
            stride: 0,
        }))?;
        self.inner.with_padding(Some(PaddingParams {
            strategy: PaddingStrategy::Fixed(max_len),
            direction: PaddingDirection::Right,
            pad_to_multiple_of: None,
            pad_id: self.special.pad,
            pad_type_id: 0,
            pad_token: self.family.special_tokens().pad.to_string(),
        }));
        self.max_len = max_len;
        Ok(self)
    }

    pub fn family(&self) -> ModelFamily {
        self.family
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn special_ids(&self) -> SpecialIds {
        self.special
    }

    pub fn vocab_size(&self) -> usize {
        self.inner.get_vocab_size(true)
    }

    pub fn token_to_id(&self, token: &str) -> Option<u32> {
        self.inner.token_to_id(token)
    }

    pub fn id_to_token(&self, id: u32) -> Option<String> {
        self.inner.id_to_token(id)
    }

    /// Encodes with special tokens, truncation and padding to `max_len`.
    pub fn encode(&self, text: &str) -> Result<Encoded, TokenizerError> {
        let enc = self.inner.encode(text, true)?;
        let word_ids = enc.get_word_ids().to_vec();
        let offsets = enc.get_offsets();
        let mut words: Vec<String> = Vec::new();
        let mut spans: Vec<(usize, usize)> = Vec::new();
        for (i, w) in word_ids.iter().enumerate() {
            let Some(w) = *w else { continue };
            let w = w as usize;
            if spans.len() <= w {
                spans.resize(w + 1, (usize::MAX, 0));
            }
            let (start, end) = offsets[i];
            spans[w].0 = spans[w].0.min(start);
            spans[w].1 = spans[w].1.max(end);
        }
        for (start, end) in spans {
            let surface = text
                .get(start.min(text.len())..end.min(text.len()))
                .unwrap_or("")
                .trim();
            words.push(surface.to_string());
        }
        let special: Vec<u32> = enc
            .get_special_tokens_mask()
            .iter()
            .zip(enc.get_attention_mask())
            .map(|(&s, &m)| if s == 1 || m == 0 { 1 } else { 0 })
            .collect();
        Ok(Encoded {
            ids: enc.get_ids().to_vec(),
            attention_mask: enc.get_attention_mask().to_vec(),
            special,
            word_ids,
            tokens: enc.get_tokens().to_vec(),
            words,
        })
    }

    /// Token count of `text` with special tokens, ignoring `max_len`.
    pub fn count_tokens(&self, text: &str) -> Result<usize, TokenizerError> {
        let mut plain = self.inner.clone();
        plain.with_truncation(None)?;
        plain.with_padding(None);
        Ok(plain.encode(text, true)?.get_ids().len())
    }
}

/// Word frequencies after the family's normalizer and pre-tokenizer.
fn word_counts<I, S>(
    texts: I,
    normalizer: Option<&NormalizerWrapper>,
    pre_tokenizer: &PreTokenizerWrapper,
) -> Result<BTreeMap<String, u64>, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut counts = BTreeMap::new();
    for text in texts {
        let mut s = PreTokenizedString::from(text.as_ref());
        if let Some(n) = normalizer {
            s.normalize(|x| n.normalize(x))?;
        }
        pre_tokenizer.pre_tokenize(&mut s)?;
        for (word, _, _) in s.get_splits(OffsetReferential::Original, OffsetType::Byte) {
            *counts.entry(word.to_string()).or_insert(0) += 1;
        }
    }
    Ok(counts)
}

struct Learned {
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
}

/// Greedy pair merging over word counts until `budget` tokens exist.
///
/// The library trainers break count ties by hash order, so two runs on the
/// same corpus can disagree. Here ties go to the lexicographically smallest
/// pair and the vocabulary is a pure function of the counts.
fn learn_merges(counts: &BTreeMap<String, u64>, prefix: &str, alphabet: BTreeSet<String>, budget: usize) -> Learned {
    let mut alphabet = alphabet;
    let split: Vec<(Vec<String>, u64)> = counts
        .iter()
        .map(|(w, &c)| {
            let pieces: Vec<String> = w
                .chars()
                .enumerate()
                .map(|(i, ch)| if i == 0 { ch.to_string() } else { format!("{prefix}{ch}") })
                .collect();
            alphabet.extend(pieces.iter().cloned());
            (pieces, c)
        })
        .collect();
    let mut tokens: Vec<String> = alphabet.into_iter().collect();
    let mut symbols: Vec<String> = tokens.clone();
    let mut ids: HashMap<String, u32> = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
    let mut words: Vec<(Vec<u32>, u64)> = split
        .into_iter()
        .map(|(pieces, c)| (pieces.iter().map(|p| ids[p]).collect(), c))
        .collect();

    let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut where_: HashMap<(u32, u32), BTreeSet<usize>> = HashMap::new();
    for (wi, (w, c)) in words.iter().enumerate() {
        for p in w.windows(2) {
            let pair = (p[0], p[1]);
            *pair_counts.entry(pair).or_default() += c;
            where_.entry(pair).or_default().insert(wi);
        }
    }
    let entry = |symbols: &[String], pair: (u32, u32), count: u64| {
        let key = (symbols[pair.0 as usize].clone(), symbols[pair.1 as usize].clone());
        (count, Reverse(key), pair)
    };
    let mut heap: BinaryHeap<_> = pair_counts.iter().map(|(&p, &c)| entry(&symbols, p, c)).collect();
    let mut merges = Vec::new();
    let mut in_vocab: BTreeSet<String> = tokens.iter().cloned().collect();

    while tokens.len() < budget {
        let Some((_, Reverse((left, right)), pair)) = std::iter::from_fn(|| heap.pop())
            .find(|(c, _, p)| *c > 0 && pair_counts.get(p) == Some(c))
        else {
            break;
        };
        let merged = format!("{left}{}", right.strip_prefix(prefix).unwrap_or(&right));
        let new_id = *ids.entry(merged.clone()).or_insert_with(|| {
            symbols.push(merged.clone());
            (symbols.len() - 1) as u32
        });
        merges.push((left, right));
        if in_vocab.insert(merged.clone()) {
            tokens.push(merged);
        }
        let mut changed = BTreeSet::new();
        for wi in where_.remove(&pair).unwrap_or_default() {
            let (w, c) = &mut words[wi];
            for p in w.windows(2) {
                let old = (p[0], p[1]);
                *pair_counts.get_mut(&old).expect("counted") -= *c;
                changed.insert(old);
            }
            let mut next = Vec::with_capacity(w.len());
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && (w[i], w[i + 1]) == pair {
                    next.push(new_id);
                    i += 2;
                } else {
                    next.push(w[i]);
                    i += 1;
                }
            }
            for p in next.windows(2) {
                let new = (p[0], p[1]);
                *pair_counts.entry(new).or_default() += *c;
                where_.entry(new).or_default().insert(wi);
                changed.insert(new);
            }
            *w = next;
        }
        for p in changed {
            let c = pair_counts[&p];
            if c > 0 {
                heap.push(entry(&symbols, p, c));
            }
        }
    }
    Learned { tokens, merges }
}

fn lookup_special(tokenizer: &Tokenizer, family: ModelFamily) -> Result<SpecialIds, TokenizerError> {
    let names = family.special_tokens();
    let id = |t: &str| {
        tokenizer
            .token_to_id(t)
            .ok_or_else(|| TokenizerError::MissingSpecial(t.to_string()))
    };
    Ok(SpecialIds {
        pad: id(names.pad)?,
        unk: id(names.unk)?,
        cls: id(names.cls)?,
        sep: id(names.sep)?,
        mask: id(names.mask)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Vec<String> {
        [
            "How do I install the Qiskit simulator?",
            "Why is superposition possible at all?",
            "Error: module qiskit not found when importing Aer",
            "Is graph isomorphism NP-complete for quantum computers?",
            "What is the Q# equivalent of break in a loop?",
            "Can you recommend a book to learn quantum programming?",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    }

    #[test]
    fn merge_ties_break_lexicographically() {
        let counts: BTreeMap<String, u64> = [("ab", 2), ("ac", 2), ("b", 1)]
            .into_iter()
            .map(|(w, c)| (w.to_string(), c))
            .collect();
        let learned = learn_merges(&counts, "##", BTreeSet::new(), 10);
        assert_eq!(learned.tokens, vec!["##b", "##c", "a", "b", "ab", "ac"]);
        assert_eq!(
            learned.merges,
            vec![("a".to_string(), "##b".to_string()), ("a".to_string(), "##c".to_string())]
        );
        // The budget caps merges, never the alphabet.
        let capped = learn_merges(&counts, "##", BTreeSet::new(), 5);
        assert_eq!(capped.tokens.len(), 5);
        assert_eq!(capped.tokens[4], "ab");
    }

    #[test]
    fn training_is_reproducible() {
        for family in [ModelFamily::Bert, ModelFamily::Roberta] {
            let dir = tempfile::tempdir().unwrap();
            let paths: Vec<_> = (0..3).map(|i| dir.path().join(format!("t{i}.json"))).collect();
            for p in &paths {
                TextTokenizer::train(family, corpus(), 120).unwrap().save(p).unwrap();
            }
            let first = std::fs::read(&paths[0]).unwrap();
            for p in &paths[1..] {
                assert_eq!(std::fs::read(p).unwrap(), first, "{family}");
            }
        }
    }

    #[test]
    fn wordpiece_layout() {
        let tok = TextTokenizer::train(ModelFamily::Bert, corpus(), 300)
            .unwrap()
            .with_max_len(16)
            .unwrap();
        let sp = tok.special_ids();
        assert_eq!((sp.pad, sp.unk, sp.cls, sp.sep, sp.mask), (0, 1, 2, 3, 4));
        let enc = tok.encode("Install the simulator").unwrap();
        assert_eq!(enc.ids.len(), 16);
        assert_eq!(enc.ids[0], sp.cls);
        assert_eq!(enc.words, vec!["Install", "the", "simulator"]);
        let n = enc.len();
        assert_eq!(enc.ids[n - 1], sp.sep);
        assert!(enc.attention_mask[..n].iter().all(|&m| m == 1));
        assert!(enc.attention_mask[n..].iter().all(|&m| m == 0));
        assert!(enc.ids[n..].iter().all(|&id| id == sp.pad));
        assert_eq!(enc.special[0], 1);
        assert_eq!(enc.special[1], 0);
    }

    #[test]
    fn truncation_keeps_specials() {
        let tok = TextTokenizer::train(ModelFamily::Bert, corpus(), 300)
            .unwrap()
            .with_max_len(8)
            .unwrap();
        let long = "install the simulator ".repeat(20);
        let enc = tok.encode(&long).unwrap();
        assert_eq!(enc.ids.len(), 8);
        assert!(enc.attention_mask.iter().all(|&m| m == 1));
        assert_eq!(enc.ids[7], tok.special_ids().sep);
        assert!(tok.count_tokens(&long).unwrap() > 8);
    }

    #[test]
    fn empty_text_is_specials_then_padding() {
        let tok = TextTokenizer::train(ModelFamily::Roberta, corpus(), 400).unwrap();
        let enc = tok.encode("").unwrap();
        let sp = tok.special_ids();
        assert_eq!(enc.ids.len(), 128);
        assert_eq!(&enc.ids[..2], &[sp.cls, sp.sep]);
        assert_eq!(enc.len(), 2);
        assert!(enc.words.is_empty());
    }

    #[test]
    fn roberta_words_keep_case_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tok = TextTokenizer::train(ModelFamily::Roberta, corpus(), 400).unwrap();
        let enc = tok.encode("Qiskit simulator").unwrap();
        assert_eq!(enc.words, vec!["Qiskit", "simulator"]);
        let path = dir.path().join("tokenizer.json");
        tok.save(&path).unwrap();
        let back = TextTokenizer::load(&path, ModelFamily::Roberta).unwrap();
        assert_eq!(back.encode("Qiskit simulator").unwrap(), enc);
    }

    #[test]
    fn rejects_short_max_len_and_unknown_family() {
        let tok = TextTokenizer::train(ModelFamily::DistilBert, corpus(), 300).unwrap();
        assert!(matches!(tok.with_max_len(4), Err(TokenizerError::MaxLenTooSmall(4))));
        assert!("gpt".parse::<ModelFamily>().is_err());
        assert_eq!("RoBERTa".parse::<ModelFamily>().unwrap(), ModelFamily::Roberta);
    }
}
