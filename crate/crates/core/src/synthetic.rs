//! A toy parallel corpus in which one source word can only be translated
//! correctly by looking at an earlier sentence of the same document.
//!
//! Each document opens with a sentence carrying a topic marker (`mA` or
//! `mB`). Every later sentence contains the ambiguous word `amb`, which
//! translates to `amb_a` under topic A and `amb_b` under topic B. All other
//! words translate one-to-one (`wK` to `tK`), keeping word order.
//!
//! Filler words form a Markov chain: with probability `coherence` the next
//! word is the fixed successor of the previous one, otherwise it is drawn
//! uniformly. This gives the source side structure a masked language model
//! can learn from.
//!
//! With `variant_rate > 0`, a filler word is sometimes spelled `vK` instead of
//! `wK`. Both spellings translate to `tK` and occur in the same contexts, so
//! only distributional evidence links them.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Document, Sentence};
use crate::error::{Error, Result};

pub const AMBIGUOUS: &str = "amb";
pub const MARKERS: [&str; 2] = ["mA", "mB"];
pub const SENSES: [&str; 2] = ["amb_a", "amb_b"];
const MARKER_TARGETS: [&str; 2] = ["tA", "tB"];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub documents: usize,
    /// Sentences per document, including the marker sentence.
    pub sentences: usize,
    /// Size of the unambiguous word inventory.
    pub words: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a filler word follows its predecessor's successor.
    pub coherence: f64,
    /// Probability that a source filler word uses its variant spelling.
    pub variant_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig { documents: 2000, sentences: 3, words: 20, min_len: 3, max_len: 5, coherence: 0.8, variant_rate: 0.0, seed: 0 }
    }
}

fn filler(rng: &mut ChaCha8Rng, successor: &[usize], coherence: f64, len: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(len);
    for _ in 0..len {
        let next = match out.last() {
            Some(&prev) if rng.gen_bool(coherence) => successor[prev],
            _ => rng.gen_range(0..successor.len()),
        };
        out.push(next);
    }
    out
}

fn render(ids: &[usize], prefix: &str) -> Sentence {
    ids.iter().map(|k| format!("{prefix}{k}")).collect()
}

fn render_source(rng: &mut ChaCha8Rng, ids: &[usize], variant_rate: f64) -> Sentence {
    ids.iter()
        .map(|k| if variant_rate > 0.0 && rng.gen_bool(variant_rate) { format!("v{k}") } else { format!("w{k}") })
        .collect()
}

/// Generates `cfg.documents` parallel documents.
pub fn generate(cfg: &SyntheticConfig) -> Result<Vec<Document>> {
    if cfg.sentences < 2
        || cfg.words == 0
        || cfg.min_len == 0
        || cfg.min_len > cfg.max_len
        || !(0.0..=1.0).contains(&cfg.coherence)
        || !(0.0..=1.0).contains(&cfg.variant_rate)
    {
        return Err(Error::Config(
            "synthetic corpus needs sentences >= 2, words >= 1, 1 <= min_len <= max_len, and coherence and variant_rate in [0, 1]"
                .into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Spelling draws use their own stream so variants never alter the structure.
    let mut spelling = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7661_7269);
    let mut successor: Vec<usize> = (0..cfg.words).collect();
    successor.shuffle(&mut rng);
    let mut docs = Vec::with_capacity(cfg.documents);
    for id in 0..cfg.documents {
        let topic = rng.gen_range(0..2);
        let mut sources = Vec::with_capacity(cfg.sentences);
        let mut targets = Vec::with_capacity(cfg.sentences);

        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let words = filler(&mut rng, &successor, cfg.coherence, len - 1);
        let at = rng.gen_range(0..len);
        let mut src = render_source(&mut spelling, &words, cfg.variant_rate);
        let mut tgt = render(&words, "t");
        src.insert(at, MARKERS[topic].to_string());
        tgt.insert(at, MARKER_TARGETS[topic].to_string());
        sources.push(src);
        targets.push(tgt);

        for _ in 1..cfg.sentences {
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            let words = filler(&mut rng, &successor, cfg.coherence, len - 1);
            let at = rng.gen_range(0..len);
            let mut src = render_source(&mut spelling, &words, cfg.variant_rate);
            let mut tgt = render(&words, "t");
            src.insert(at, AMBIGUOUS.to_string());
            tgt.insert(at, SENSES[topic].to_string());
            sources.push(src);
            targets.push(tgt);
        }
        docs.push(Document { id, sentences: sources, targets: Some(targets) });
    }
    Ok(docs)
}

/// Splits documents into a training and a held-out part, shuffled by `seed`.
pub fn split(mut docs: Vec<Document>, held_out: usize, seed: u64) -> (Vec<Document>, Vec<Document>) {
    docs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = docs.split_off(docs.len().saturating_sub(held_out));
    (docs, held)
}

/// The sense a sentence's `amb` should take, if it has one.
pub fn expected_sense(doc: &Document, index: usize) -> Option<&'static str> {
    if !doc.sentences[index].iter().any(|w| w == AMBIGUOUS) {
        return None;
    }
    let topic = doc.sentences.iter().flatten().find_map(|w| MARKERS.iter().position(|m| m == w))?;
    Some(SENSES[topic])
}

/// Fraction of ambiguous sentences whose hypothesis contains the right
/// sense and not the wrong one. `hyps[d][i]` translates sentence `i` of
/// document `d`.
pub fn disambiguation_accuracy<S: AsRef<str>>(docs: &[Document], hyps: &[Vec<Vec<S>>]) -> f64 {
    let (mut right, mut total) = (0usize, 0usize);
    for (doc, doc_hyps) in docs.iter().zip(hyps) {
        for (i, hyp) in doc_hyps.iter().enumerate() {
            let Some(sense) = expected_sense(doc, i) else { continue };
            total += 1;
            let has = |w: &str| hyp.iter().any(|h| h.as_ref() == w);
            let wrong = SENSES.iter().find(|&&s| s != sense).copied().unwrap_or_default();
            if has(sense) && !has(wrong) {
                right += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        right as f64 / total as f64
    }
}
