//! Beam search with the GNMT length penalty.

use std::cmp::Ordering;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::context_window::{assemble, ContextPolicy, ExtendedInput};
use crate::corpus::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{EncoderOutput, Model};
use crate::numerics::{lit, Scalar};

pub const DEFAULT_BEAM: usize = 4;
pub const DEFAULT_ALPHA: f64 = 1.0;

/// `((5 + length) / 6)^alpha`.
pub fn length_penalty(length: usize, alpha: f64) -> f64 {
    assert!(length >= 1, "length penalty is defined from length 1");
    ((5.0 + length as f64) / 6.0).powf(alpha)
}

/// Output length cap used when none is given.
pub fn default_max_len(source_len: usize) -> usize {
    2 * source_len + 10
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Starts with `[BOS]`; ends with `[EOS]` unless forced to stop.
    pub tokens: Vec<usize>,
    /// Sum of the token log-probabilities.
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated tokens, counting `[EOS]` but not `[BOS]`.
    pub fn len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(self.len().max(1), alpha)
    }

    /// The translation without `[BOS]` and the closing `[EOS]`.
    pub fn output(&self) -> &[usize] {
        let end = if self.tokens.last() == Some(&EOS) { self.tokens.len() - 1 } else { self.tokens.len() };
        &self.tokens[1..end]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    pub beam: usize,
    /// Maximum generated tokens; `None` uses [`default_max_len`].
    pub max_len: Option<usize>,
    pub alpha: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { beam: DEFAULT_BEAM, max_len: None, alpha: DEFAULT_ALPHA }
    }
}

fn next_log_probs<T: Scalar>(model: &Model<T>, enc: &EncoderOutput<T>, prefix: &[usize]) -> Result<Vec<f64>> {
    let logits = model.decode(prefix, enc)?;
    let last: Vec<f64> = logits.row(logits.rows() - 1).iter().map(|v| v.to_f64_lossy()).collect();
    let max = last.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = last.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    Ok(last.into_iter().map(|v| v - lse).collect())
}

fn generatable(token: usize) -> bool {
    token != PAD && token != BOS
}

fn by_score_then_tokens(alpha: f64) -> impl Fn(&Hypothesis, &Hypothesis) -> Ordering {
    move |a, b| b.score(alpha).total_cmp(&a.score(alpha)).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over an already encoded input.
///
/// Each step extends every active hypothesis by every token except `[PAD]`
/// and `[BOS]`, and keeps the `beam` best candidates by cumulative
/// log-probability (ties go to the lexicographically smaller sequence).
/// Candidates ending in `[EOS]` take their slot and leave the beam as
/// finished. Search stops once nothing is active, once no active
/// hypothesis can still beat the best finished score, or at `max_len`
/// generated tokens, where the survivors are finished as they stand.
pub fn beam_search_encoded<T: Scalar>(
    model: &Model<T>,
    enc: &EncoderOutput<T>,
    beam: usize,
    max_len: usize,
    alpha: f64,
) -> Result<Hypothesis> {
    if beam == 0 || max_len == 0 {
        return Err(Error::Config("beam and max_len must be at least 1".into()));
    }
    let mut active = vec![Hypothesis { tokens: vec![BOS], log_prob: 0.0, finished: false }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 1..=max_len {
        let mut candidates: Vec<(f64, Vec<usize>)> = Vec::new();
        for h in &active {
            let lp = next_log_probs(model, enc, &h.tokens)?;
            for (tok, &l) in lp.iter().enumerate().filter(|(t, _)| generatable(*t)) {
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                candidates.push((h.log_prob + l, tokens));
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        candidates.truncate(beam);

        active.clear();
        for (log_prob, tokens) in candidates {
            let done = tokens.last() == Some(&EOS) || step == max_len;
            let h = Hypothesis { tokens, log_prob, finished: done };
            if done {
                finished.push(h);
            } else {
                active.push(h);
            }
        }
        if active.is_empty() {
            break;
        }
        if let Some(best) = finished.iter().map(|h| h.score(alpha)).max_by(f64::total_cmp) {
            // Log-probabilities only fall and the penalty only grows, so an
            // active hypothesis can at most reach log_prob / lp(max_len).
            let bound = active
                .iter()
                .map(|h| h.log_prob / length_penalty(max_len, alpha))
                .fold(f64::NEG_INFINITY, f64::max);
            if best > bound {
                break;
            }
        }
    }
    finished.sort_by(by_score_then_tokens(alpha));
    Ok(finished.into_iter().next().expect("at least one hypothesis finishes"))
}

pub fn beam_search<T: Scalar>(model: &Model<T>, x: &ExtendedInput, cfg: &SearchConfig) -> Result<Hypothesis> {
    let enc = model.encode(x)?;
    let max_len = cfg.max_len.unwrap_or_else(|| default_max_len(x.source_len()));
    beam_search_encoded(model, &enc, cfg.beam, max_len, cfg.alpha)
}

/// Picks the most likely token at every step until `[EOS]` or `max_len`.
pub fn greedy<T: Scalar>(model: &Model<T>, x: &ExtendedInput, max_len: usize) -> Result<Hypothesis> {
    let enc = model.encode(x)?;
    let mut h = Hypothesis { tokens: vec![BOS], log_prob: 0.0, finished: false };
    while h.len() < max_len {
        let lp = next_log_probs(model, &enc, &h.tokens)?;
        let (tok, l) = lp
            .iter()
            .enumerate()
            .filter(|(t, _)| generatable(*t))
            .fold((usize::MAX, f64::NEG_INFINITY), |best, (t, &l)| if l > best.1 { (t, l) } else { best });
        h.tokens.push(tok);
        h.log_prob += l;
        if tok == EOS {
            break;
        }
    }
    h.finished = true;
    Ok(h)
}

/// Translates one document sentence by sentence, giving each sentence the
/// preceding source sentences of the same document as context.
///
/// With `noise`, encoder states at context positions are overwritten with
/// random values before decoding; under the context mask the output must
/// not change.
pub fn translate_document<T: Scalar>(
    model: &Model<T>,
    sources: &[Vec<usize>],
    policy: ContextPolicy,
    cfg: &SearchConfig,
    mut noise: Option<&mut ChaCha8Rng>,
) -> Result<Vec<Hypothesis>> {
    let limit = model.config.max_positions;
    let mode = model.config.position_mode;
    let mut out = Vec::with_capacity(sources.len());
    for i in 0..sources.len() {
        let x = assemble(policy.select(sources, i), &sources[i], limit, mode)?;
        let mut enc = model.encode(&x)?;
        if let Some(rng) = noise.as_deref_mut() {
            let d = enc.hidden.cols();
            for (j, _) in x.context_mask.iter().enumerate().filter(|(_, &m)| m) {
                for v in &mut enc.hidden.data_mut()[j * d..(j + 1) * d] {
                    *v = lit(rng.gen_range(-10.0..10.0));
                }
            }
        }
        let max_len = cfg.max_len.unwrap_or_else(|| default_max_len(x.source_len()));
        out.push(beam_search_encoded(model, &enc, cfg.beam, max_len, cfg.alpha)?);
    }
    Ok(out)
}
