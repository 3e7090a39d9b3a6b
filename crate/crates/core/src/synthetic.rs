//! Keyword-separable toy corpus used by the sanity experiments and the
//! explainer checks. Each class owns five planted keywords; every post mixes
//! a few of them with shared filler words.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::annotation::GoldRecord;
use crate::taxonomy::ChallengeCategory;

/// Planted keywords by codec index.
pub const KEYWORDS: [[&str; 5]; 6] = [
    ["simulator", "ide", "install", "plugin", "toolkit"],
    ["concept", "meaning", "intuition", "understand", "explain"],
    ["error", "exception", "traceback", "crash", "failed"],
    ["complexity", "proof", "theorem", "bound", "hamiltonian"],
    ["api", "method", "function", "parameter", "call"],
    ["tutorial", "book", "course", "resources", "beginner"],
];

pub const FILLER: [&str; 24] = [
    "the", "a", "of", "to", "in", "and", "is", "for", "on", "with", "my", "this", "that", "it", "from", "how",
    "can", "i", "when", "using", "what", "qubit", "circuit", "gate",
];

#[derive(Debug, Clone, Copy)]
pub struct KeywordCorpus {
    pub per_class: usize,
    pub keywords_per_post: usize,
    pub filler_per_post: usize,
    pub seed: u64,
}

impl Default for KeywordCorpus {
    fn default() -> Self {
        KeywordCorpus {
            per_class: 10,
            keywords_per_post: 5,
            filler_per_post: 3,
            seed: 1,
        }
    }
}

impl KeywordCorpus {
    /// Posts `SYN:<n>` in class-major order, title empty.
    pub fn generate(&self) -> Vec<GoldRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::with_capacity(6 * self.per_class);
        for c in ChallengeCategory::ALL {
            for _ in 0..self.per_class {
                let mut words: Vec<&str> = Vec::new();
                for _ in 0..self.keywords_per_post {
                    words.push(KEYWORDS[c.index()].choose(&mut rng).expect("nonempty"));
                }
                for _ in 0..self.filler_per_post {
                    words.push(FILLER.choose(&mut rng).expect("nonempty"));
                }
                words.shuffle(&mut rng);
                out.push(GoldRecord {
                    post_id: format!("SYN:{}", out.len() + 1),
                    title: String::new(),
                    body_text: words.join(" "),
                    label_index: c.index(),
                });
            }
        }
        out
    }
}

pub fn keywords(category: ChallengeCategory) -> &'static [&'static str; 5] {
    &KEYWORDS[category.index()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_keyword_bearing() {
        let gold = KeywordCorpus::default().generate();
        assert_eq!(gold.len(), 60);
        for rec in &gold {
            let kws = &KEYWORDS[rec.label_index];
            let hits = rec.body_text.split(' ').filter(|w| kws.contains(w)).count();
            assert_eq!(hits, 5);
            for other in (0..6).filter(|&o| o != rec.label_index) {
                assert!(!rec.body_text.split(' ').any(|w| KEYWORDS[other].contains(&w)));
            }
        }
        assert_eq!(gold, KeywordCorpus::default().generate());
    }

    #[test]
    fn keyword_sets_are_disjoint_from_filler() {
        for kws in KEYWORDS {
            for k in kws {
                assert!(!FILLER.contains(&k));
            }
        }
    }
}
