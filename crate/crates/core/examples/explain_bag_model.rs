//! Owen-value token attributions for a small bag-of-words scorer, with the
//! additivity check, an occlusion probe and rendered force plots.
//!
//! cargo run --example explain_bag_model [outdir]

use std::collections::HashMap;
use std::path::PathBuf;

use qse_core::explainer::{
    explain_encoded, occlude_word, render_explanations, CoalitionModel, ExplainError, ExplainerConfig,
    GlobalSummary, Probs,
};
use qse_core::tokenizer::Encoded;
use qse_core::ChallengeCategory;

/// Softmax over the summed class weights of unmasked tokens.
struct Bag(HashMap<u32, [f64; 6]>);

impl CoalitionModel for Bag {
    fn probabilities(&self, rows: &[(Vec<u32>, Vec<u32>)]) -> Result<Vec<Probs>, ExplainError> {
        Ok(rows
            .iter()
            .map(|(ids, mask)| {
                let mut logits = [0.0; 6];
                for (id, _) in ids.iter().zip(mask).filter(|(_, m)| **m == 1) {
                    if let Some(w) = self.0.get(id) {
                        (0..6).for_each(|c| logits[c] += w[c]);
                    }
                }
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                logits.map(|l| l.exp() / z)
            })
            .collect())
    }
}

const MASK: u32 = 4;

fn encode(words: &[&str], vocab: &HashMap<&str, u32>) -> Encoded {
    let mut e = Encoded {
        ids: vec![2],
        attention_mask: vec![1],
        special: vec![1],
        word_ids: vec![None],
        tokens: vec!["[CLS]".into()],
        words: words.iter().map(|w| w.to_string()).collect(),
    };
    for (i, w) in words.iter().enumerate() {
        e.ids.push(vocab[w]);
        e.attention_mask.push(1);
        e.special.push(0);
        e.word_ids.push(Some(i as u32));
        e.tokens.push(w.to_string());
    }
    e.ids.extend([3, 0, 0]);
    e.attention_mask.extend([1, 0, 0]);
    e.special.extend([1, 1, 1]);
    e.word_ids.extend([None, None, None]);
    e.tokens.extend(["[SEP]", "[PAD]", "[PAD]"].map(String::from));
    e
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let words = [
        ("install", [2.0, 0.0, 0.3, 0.0, 0.2, 0.0]),
        ("superposition", [0.0, 1.8, 0.0, 0.6, 0.0, 0.0]),
        ("traceback", [0.2, 0.0, 2.2, 0.0, 0.1, 0.0]),
        ("np-complete", [0.0, 0.4, 0.0, 2.4, 0.0, 0.0]),
        ("endpoint", [0.3, 0.0, 0.0, 0.0, 2.0, 0.0]),
        ("tutorial", [0.0, 0.2, 0.0, 0.0, 0.0, 2.1]),
        ("the", [0.05, 0.05, 0.0, 0.0, 0.0, 0.05]),
        ("my", [0.0, 0.0, 0.05, 0.0, 0.05, 0.0]),
    ];
    let vocab: HashMap<&str, u32> = words.iter().enumerate().map(|(i, (w, _))| (*w, 10 + i as u32)).collect();
    let model = Bag(words.iter().map(|(w, v)| (vocab[w], *v)).collect());
    let posts: [&[&str]; 6] = [
        &["install", "the", "my"],
        &["superposition", "the", "my"],
        &["traceback", "my", "install"],
        &["np-complete", "superposition", "the"],
        &["endpoint", "my", "the"],
        &["tutorial", "the", "my"],
    ];

    let cfg = ExplainerConfig::default();
    let mut locals = Vec::new();
    for (i, p) in posts.iter().enumerate() {
        let enc = encode(p, &vocab);
        let e = explain_encoded(&model, &format!("DEMO:{i}"), &enc, MASK, &cfg)?;
        let top = e.top_word().expect("words present");
        let (before, after) = occlude_word(&model, &enc, MASK, &e, top)?;
        println!(
            "{}: {} p={:.3} base={:.3} gap={:.1e} | {} | masking {:?}: {:.3} -> {:.3}",
            e.post_id,
            e.predicted,
            e.confidence,
            e.base_value,
            e.additivity_gap(),
            e.words.iter().map(|w| format!("{} {:+.3}", w.token, w.value)).collect::<Vec<_>>().join(", "),
            e.words[top].token,
            before,
            after
        );
        locals.push(e);
    }
    let global = GlobalSummary::from_locals(&locals, 10)?;
    for c in ChallengeCategory::ALL {
        let top: Vec<String> = global
            .top_for_class(c, 2)
            .iter()
            .filter(|f| f.per_class[&c] > 0.0)
            .map(|f| format!("{} {:.3}", f.token, f.per_class[&c]))
            .collect();
        println!("{c}: {top:?}");
    }
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("qse_explain"));
    render_explanations(&locals, Some(&global), &out)?;
    println!("rendered to {}", out.display());
    Ok(())
}
