//! Masked-language-model corruption and the joint objective
//! `nll(Y | S) + λ · mlm(s_M | S)`, where both terms read the same masked S.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::context_window::ExtendedInput;
use crate::corpus::{MASK, NUM_SPECIALS, SEP};
use crate::error::{Error, Result};
use crate::model::{Forward, Model};
use crate::numerics::{lit, Scalar, Tensor};

pub const DEFAULT_MASK_RATE: f64 = 0.16;
pub const DEFAULT_MASK_CAP: usize = 20;

/// A source window paired with its target `[BOS] … [EOS]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub input: ExtendedInput,
    pub target: Vec<usize>,
}

impl TrainingExample {
    /// Tokens the example contributes to each side of a batch budget.
    pub fn budget_size(&self) -> usize {
        self.input.len().max(self.target.len())
    }
}

/// Outcome of MLM corruption on one window.
#[derive(Debug, Clone, PartialEq)]
pub struct Masking {
    pub input: ExtendedInput,
    /// Ascending positions chosen for prediction.
    pub positions: Vec<usize>,
    /// Uncorrupted token ids at `positions`.
    pub originals: Vec<usize>,
}

/// Picks prediction positions and corrupts them BERT-style.
///
/// Every non-`[SEP]` position is drawn independently with probability `rate`;
/// the draw is cut to `cap` positions uniformly at random, and at least one
/// position is always chosen. Chosen tokens become `[MASK]` 80% of the time,
/// a random non-special token 10%, and stay unchanged 10%.
pub fn apply_mlm_masking(
    x: &ExtendedInput,
    rate: f64,
    cap: usize,
    rng: &mut impl Rng,
    src_vocab: usize,
) -> Masking {
    assert!(rate > 0.0 && rate < 1.0, "mask rate must lie in (0, 1)");
    assert!(cap >= 1, "mask cap must be at least 1");
    let candidates: Vec<usize> = (0..x.len()).filter(|&i| x.token_ids[i] != SEP).collect();
    let mut chosen: Vec<usize> = candidates.iter().copied().filter(|_| rng.gen_bool(rate)).collect();
    if chosen.len() > cap {
        chosen.shuffle(rng);
        chosen.truncate(cap);
        chosen.sort_unstable();
    }
    if chosen.is_empty() {
        if let Some(&p) = candidates.choose(rng) {
            chosen.push(p);
        }
    }

    let mut input = x.clone();
    let mut originals = Vec::with_capacity(chosen.len());
    for &p in &chosen {
        originals.push(x.token_ids[p]);
        let r: f64 = rng.gen();
        if r < 0.8 {
            input.token_ids[p] = MASK;
        } else if r < 0.9 && src_vocab > NUM_SPECIALS {
            input.token_ids[p] = rng.gen_range(NUM_SPECIALS..src_vocab);
        }
    }
    Masking { input, positions: chosen, originals }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedExample {
    pub input: ExtendedInput,
    pub masked_positions: Vec<usize>,
    pub originals: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaskedBatch {
    pub examples: Vec<MaskedExample>,
}

impl MaskedBatch {
    /// A batch without MLM corruption.
    pub fn unmasked(examples: &[TrainingExample]) -> Self {
        MaskedBatch {
            examples: examples
                .iter()
                .map(|e| MaskedExample {
                    input: e.input.clone(),
                    masked_positions: Vec::new(),
                    originals: Vec::new(),
                    target: e.target.clone(),
                })
                .collect(),
        }
    }

    pub fn target_tokens(&self) -> usize {
        self.examples.iter().map(|e| e.target.len().saturating_sub(1)).sum()
    }

    pub fn masked_tokens(&self) -> usize {
        self.examples.iter().map(|e| e.masked_positions.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    /// Include the translation term. Off for MLM-only pretraining.
    pub translation: bool,
    pub mlm_enabled: bool,
    /// λ in `nll + λ · mlm`.
    pub mlm_weight: f64,
    pub mask_rate: f64,
    pub mask_cap: usize,
    pub label_smoothing: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            translation: true,
            mlm_enabled: false,
            mlm_weight: 1.0,
            mask_rate: DEFAULT_MASK_RATE,
            mask_cap: DEFAULT_MASK_CAP,
            label_smoothing: 0.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn mlm_only() -> Self {
        ObjectiveConfig { translation: false, mlm_enabled: true, ..Self::default() }
    }

    /// Masks every example when MLM is on, otherwise passes them through.
    pub fn prepare(&self, examples: &[TrainingExample], rng: &mut impl Rng, src_vocab: usize) -> MaskedBatch {
        if !self.mlm_enabled {
            return MaskedBatch::unmasked(examples);
        }
        let examples = examples
            .iter()
            .map(|e| {
                let m = apply_mlm_masking(&e.input, self.mask_rate, self.mask_cap, rng, src_vocab);
                MaskedExample {
                    input: m.input,
                    masked_positions: m.positions,
                    originals: m.originals,
                    target: e.target.clone(),
                }
            })
            .collect();
        MaskedBatch { examples }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            translation: if self.translation { 1.0 } else { 0.0 },
            mlm: if self.mlm_enabled { self.mlm_weight } else { 0.0 },
        }
    }
}

/// Multipliers on the two mean losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub translation: f64,
    pub mlm: f64,
}

/// Batch losses. `nll` is the mean over target tokens, `mlm` the mean over
/// masked positions (0 when nothing is masked), and `total` the weighted sum
/// that gradients are taken of.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub total: f64,
    pub nll: f64,
    pub mlm: f64,
}

/// Knobs for a gradient pass that are not part of the objective itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct PassOptions {
    /// Seed for dropout masks; `None` runs in evaluation mode.
    pub dropout_seed: Option<u64>,
    /// Plant a NaN logit in the first example (divergence drills).
    pub inject_nan: bool,
}

fn example_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64))
}

struct ExampleResult<T> {
    terms: LossTerms,
    grads: Option<Vec<Option<Tensor<T>>>>,
}

#[allow(clippy::too_many_arguments)]
fn run_example<T: Scalar>(
    model: &Model<T>,
    ex: &MaskedExample,
    index: usize,
    weights: LossWeights,
    smoothing: f64,
    norms: (f64, f64),
    opts: PassOptions,
    want_grads: bool,
) -> Result<ExampleResult<T>> {
    let mut f = match opts.dropout_seed {
        Some(seed) => Forward::train(&model.params, &model.config, example_rng(seed, index)),
        None => Forward::eval(&model.params, &model.config),
    };
    let (tgt_count, mlm_count) = norms;
    let enc = f.encode(&ex.input)?;
    let mut total = None;
    let mut terms = LossTerms::default();

    if weights.translation != 0.0 {
        let t = ex.target.len();
        if t < 2 {
            return Err(Error::InvalidData("target needs [BOS] and at least one more token".into()));
        }
        let mut logits = f.decode(&ex.target[..t - 1], &enc)?;
        if opts.inject_nan && index == 0 {
            let shape = f.graph.value(logits).shape().to_vec();
            let mut poison = Tensor::zeros(shape);
            poison.data_mut()[0] = T::nan();
            let p = f.graph.constant(poison);
            logits = f.graph.add(logits, p)?;
        }
        let ce = f.graph.cross_entropy(logits, &ex.target[1..], lit(smoothing))?;
        let nll = f.graph.scale(ce, lit(1.0 / tgt_count));
        terms.nll = f.graph.value(nll).data()[0].to_f64_lossy();
        total = Some(f.graph.scale(nll, lit(weights.translation)));
    }

    if weights.mlm != 0.0 && !ex.masked_positions.is_empty() {
        let logits = f.mlm_logits(&enc, &ex.masked_positions)?;
        let ce = f.graph.cross_entropy(logits, &ex.originals, T::zero())?;
        let mlm = f.graph.scale(ce, lit(1.0 / mlm_count));
        terms.mlm = f.graph.value(mlm).data()[0].to_f64_lossy();
        let weighted = f.graph.scale(mlm, lit(weights.mlm));
        total = Some(match total {
            Some(t) => f.graph.add(t, weighted)?,
            None => weighted,
        });
    }

    let Some(total) = total else {
        return Ok(ExampleResult { terms, grads: None });
    };
    terms.total = f.graph.value(total).data()[0].to_f64_lossy();
    if !terms.total.is_finite() {
        return Err(Error::TrainingDiverged { step: 0, reason: format!("loss is {}", terms.total) });
    }
    let grads = if want_grads {
        let mut g = f.graph.backward(total)?;
        Some(f.param_grads(&mut g))
    } else {
        None
    };
    Ok(ExampleResult { terms, grads })
}

fn run_batch<T: Scalar>(
    model: &Model<T>,
    batch: &MaskedBatch,
    weights: LossWeights,
    smoothing: f64,
    opts: PassOptions,
    want_grads: bool,
) -> Result<(LossTerms, Vec<Option<Tensor<T>>>)> {
    if batch.examples.is_empty() {
        return Err(Error::InvalidData("empty batch".into()));
    }
    let norms = (batch.target_tokens().max(1) as f64, batch.masked_tokens().max(1) as f64);
    let mut terms = LossTerms::default();
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; model.params.len()];
    for (i, ex) in batch.examples.iter().enumerate() {
        let r = run_example(model, ex, i, weights, smoothing, norms, opts, want_grads)?;
        terms.total += r.terms.total;
        terms.nll += r.terms.nll;
        terms.mlm += r.terms.mlm;
        for (acc, g) in grads.iter_mut().zip(r.grads.into_iter().flatten()) {
            let Some(g) = g else { continue };
            match acc {
                Some(a) => {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += *y;
                    }
                }
                None => *acc = Some(g),
            }
        }
    }
    Ok((terms, grads))
}

/// Evaluation-mode losses for a batch.
pub fn joint_loss<T: Scalar>(model: &Model<T>, batch: &MaskedBatch, cfg: &ObjectiveConfig) -> Result<LossTerms> {
    run_batch(model, batch, cfg.weights(), cfg.label_smoothing, PassOptions::default(), false)
        .map(|(t, _)| t)
}

/// Losses plus the gradient of `total` for every parameter, in parameter
/// order (`None` for parameters the loss does not reach).
pub fn loss_and_gradients<T: Scalar>(
    model: &Model<T>,
    batch: &MaskedBatch,
    weights: LossWeights,
    label_smoothing: f64,
    opts: PassOptions,
) -> Result<(LossTerms, Vec<Option<Tensor<T>>>)> {
    run_batch(model, batch, weights, label_smoothing, opts, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context_window::{assemble, PositionMode};
    use crate::corpus::{BOS, EOS};
    use crate::model::ModelConfig;

    fn window(len: usize) -> ExtendedInput {
        let src: Vec<usize> = (0..len).map(|i| 6 + i % 40).collect();
        assemble::<Vec<usize>>(&[], &src, 512, PositionMode::Reversed).unwrap()
    }

    #[test]
    fn single_token_is_always_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let m = apply_mlm_masking(&window(1), 0.16, 20, &mut rng, 50);
            assert_eq!(m.positions, vec![0]);
            assert_eq!(m.originals, vec![6]);
        }
    }

    #[test]
    fn cap_is_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = window(200);
        for _ in 0..500 {
            let m = apply_mlm_masking(&x, 0.16, 20, &mut rng, 50);
            assert!(!m.positions.is_empty() && m.positions.len() <= 20);
            assert!(m.positions.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn separator_never_masked_and_layout_untouched() {
        let x = assemble(&[vec![6, 7, 8]], &[9, 10], 512, PositionMode::Reversed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let m = apply_mlm_masking(&x, 0.9, 20, &mut rng, 50);
            assert!(!m.positions.contains(&3));
            assert_eq!(m.input.segment_ids, x.segment_ids);
            assert_eq!(m.input.position_ids, x.position_ids);
            assert_eq!(m.input.context_mask, x.context_mask);
            for (&p, &o) in m.positions.iter().zip(&m.originals) {
                assert_eq!(x.token_ids[p], o);
            }
        }
    }

    #[test]
    fn replacement_mix_is_roughly_80_10_10() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = window(50);
        let (mut masked, mut kept, mut swapped) = (0usize, 0usize, 0usize);
        for _ in 0..4000 {
            let m = apply_mlm_masking(&x, 0.16, 20, &mut rng, 1000);
            for (&p, &o) in m.positions.iter().zip(&m.originals) {
                match m.input.token_ids[p] {
                    MASK => masked += 1,
                    t if t == o => kept += 1,
                    _ => swapped += 1,
                }
            }
        }
        let n = (masked + kept + swapped) as f64;
        assert!((masked as f64 / n - 0.8).abs() < 0.02);
        assert!((swapped as f64 / n - 0.1).abs() < 0.02);
        assert!((kept as f64 / n - 0.1).abs() < 0.02);
    }

    #[test]
    fn masking_is_reproducible() {
        let x = window(60);
        let a = apply_mlm_masking(&x, 0.16, 20, &mut ChaCha8Rng::seed_from_u64(9), 50);
        let b = apply_mlm_masking(&x, 0.16, 20, &mut ChaCha8Rng::seed_from_u64(9), 50);
        assert_eq!(a, b);
    }

    fn tiny_model() -> Model<f64> {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            enc_layers: 1,
            dec_layers: 1,
            max_positions: 32,
            src_vocab: 12,
            tgt_vocab: 10,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    }

    fn batch() -> Vec<TrainingExample> {
        vec![
            TrainingExample {
                input: assemble(&[vec![6, 7]], &[8, 9, 10], 32, PositionMode::Reversed).unwrap(),
                target: vec![BOS, 6, 7, EOS],
            },
            TrainingExample {
                input: assemble::<Vec<usize>>(&[], &[11, 6], 32, PositionMode::Reversed).unwrap(),
                target: vec![BOS, 8, 9, 6, EOS],
            },
        ]
    }

    #[test]
    fn no_masking_means_total_is_nll() {
        let m = tiny_model();
        let b = MaskedBatch::unmasked(&batch());
        let cfg = ObjectiveConfig { mlm_enabled: true, ..ObjectiveConfig::default() };
        let t = joint_loss(&m, &b, &cfg).unwrap();
        assert_eq!(t.mlm, 0.0);
        assert_eq!(t.total, t.nll);
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let mut m = tiny_model();
        let w = m.params.get_mut("decoder.output.weight").unwrap();
        *w = Tensor::zeros(w.shape().to_vec());
        let t = joint_loss(&m, &MaskedBatch::unmasked(&batch()), &ObjectiveConfig::default()).unwrap();
        assert!((t.nll - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn total_gradient_splits_into_terms() {
        let m = tiny_model();
        let cfg = ObjectiveConfig { mlm_enabled: true, mlm_weight: 0.7, ..ObjectiveConfig::default() };
        let b = cfg.prepare(&batch(), &mut ChaCha8Rng::seed_from_u64(5), 12);
        let opts = PassOptions::default();
        let (_, both) = loss_and_gradients(&m, &b, cfg.weights(), 0.0, opts).unwrap();
        let (_, nll) =
            loss_and_gradients(&m, &b, LossWeights { translation: 1.0, mlm: 0.0 }, 0.0, opts).unwrap();
        let (_, mlm) =
            loss_and_gradients(&m, &b, LossWeights { translation: 0.0, mlm: 1.0 }, 0.0, opts).unwrap();
        for i in 0..both.len() {
            let shape = m.params.by_index(i).1.shape().to_vec();
            let z = Tensor::zeros(shape);
            let tb = both[i].as_ref().unwrap_or(&z);
            let tn = nll[i].as_ref().unwrap_or(&z);
            let tm = mlm[i].as_ref().unwrap_or(&z);
            for k in 0..tb.numel() {
                let expect = tn.data()[k] + 0.7 * tm.data()[k];
                assert!((tb.data()[k] - expect).abs() < 1e-12, "param {}", m.params.by_index(i).0);
            }
        }
    }

    #[test]
    fn nan_logit_is_reported_as_divergence() {
        let m = tiny_model();
        let b = MaskedBatch::unmasked(&batch());
        let opts = PassOptions { inject_nan: true, ..PassOptions::default() };
        let r = loss_and_gradients(&m, &b, ObjectiveConfig::default().weights(), 0.0, opts);
        assert!(matches!(r, Err(Error::TrainingDiverged { .. })));
    }

    proptest::proptest! {
        #[test]
        fn masking_invariants(
            ctx in proptest::collection::vec(6usize..30, 0..40),
            src in proptest::collection::vec(6usize..30, 1..40),
            rate in 0.01f64..0.9,
            cap in 1usize..25,
            seed in 0u64..1000,
        ) {
            let x = assemble(&[ctx], &src, 512, PositionMode::Reversed).unwrap();
            let m = apply_mlm_masking(&x, rate, cap, &mut ChaCha8Rng::seed_from_u64(seed), 30);
            proptest::prop_assert!(!m.positions.is_empty() && m.positions.len() <= cap);
            proptest::prop_assert!(m.positions.windows(2).all(|w| w[0] < w[1]));
            proptest::prop_assert_eq!(m.positions.len(), m.originals.len());
            for (&p, &o) in m.positions.iter().zip(&m.originals) {
                proptest::prop_assert_ne!(x.token_ids[p], SEP);
                proptest::prop_assert_eq!(x.token_ids[p], o);
            }
            for i in (0..x.len()).filter(|i| !m.positions.contains(i)) {
                proptest::prop_assert_eq!(m.input.token_ids[i], x.token_ids[i]);
            }
            proptest::prop_assert_eq!(&m.input.position_ids, &x.position_ids);
            proptest::prop_assert_eq!(&m.input.context_mask, &x.context_mask);
        }
    }
}
