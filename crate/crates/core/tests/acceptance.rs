//! End-to-end acceptance checks, one line of output per criterion.
//!
//! Runs without the libtest harness so the verdict lines always show up in
//! `cargo test` output. Exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use docnmt::context_window::{assemble, ContextPolicy, ExtendedInput, PositionMode};
use docnmt::corpus::{encode_parallel, Document, Vocab, BOS, EOS, NUM_SPECIALS, PAD};
use docnmt::metrics::corpus_bleu;
use docnmt::model::{Model, ModelConfig, ModelParams};
use docnmt::numerics::Tensor;
use docnmt::objective::{
    apply_mlm_masking, joint_loss, loss_and_gradients, MaskedBatch, MaskedExample, ObjectiveConfig, PassOptions,
};
use docnmt::pretrain_io::{init_encoder, Checkpoint, StoredTensor};
use docnmt::search::{beam_search, greedy, length_penalty, translate_document, SearchConfig};
use docnmt::synthetic::{self, disambiguation_accuracy, SyntheticConfig};
use docnmt::trainer::{build_examples, evaluate_nll, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
/// Name, check, and wall-clock budget if the criterion has one.
type Criterion = (&'static str, fn() -> Outcome, Option<Duration>);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_ids(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(NUM_SPECIALS..vocab)).collect()
}

fn random_input(rng: &mut ChaCha8Rng, vocab: usize, max_ctx: usize, max_src: usize, mode: PositionMode) -> ExtendedInput {
    let ctx_len = rng.gen_range(1..=max_ctx);
    let src_len = rng.gen_range(1..=max_src);
    let ctx = random_ids(rng, ctx_len, vocab);
    let src = random_ids(rng, src_len, vocab);
    assemble(&[ctx], &src, 512, mode).unwrap()
}

fn tiny_config(d: usize, layers: (usize, usize), src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        n_heads: 2,
        d_ffn: 2 * d,
        enc_layers: layers.0,
        dec_layers: layers.1,
        max_positions: 64,
        src_vocab,
        tgt_vocab,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

// Relative error |a - n| / max(|a|, |n|, 1e-4). The floor keeps gradients
// that are zero up to rounding from dividing noise by noise.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

fn gradient_integrity() -> Outcome {
    const H: f64 = 1e-5;
    let cfg = ModelConfig { max_positions: 32, ..tiny_config(16, (2, 2), 50, 50) };
    let mut r = rng(11);
    let mut model = Model::<f64>::new(cfg, &mut r).unwrap();
    // Non-trivial norm parameters so their gradients are exercised away
    // from the identity.
    for (name, t) in model.params.iter_mut() {
        if name.ends_with(".gain") || name.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.2..0.2));
        }
    }
    let examples: Vec<MaskedExample> = (0..2)
        .map(|_| {
            let x = random_input(&mut r, 50, 5, 5, PositionMode::Reversed);
            let m = apply_mlm_masking(&x, 0.3, 20, &mut r, 50);
            let mut target = vec![BOS];
            let tlen = r.gen_range(1..5);
            target.extend(random_ids(&mut r, tlen, 50));
            target.push(EOS);
            MaskedExample { input: m.input, masked_positions: m.positions, originals: m.originals, target }
        })
        .collect();
    let batch = MaskedBatch { examples };
    let obj = ObjectiveConfig { mlm_enabled: true, ..ObjectiveConfig::default() };
    let (_, grads) = loss_and_gradients(&model, &batch, obj.weights(), 0.0, PassOptions::default()).unwrap();

    let mut worst = (0.0f64, String::new());
    let mut checked = 0usize;
    for (i, grad) in grads.iter().enumerate() {
        let numel = model.params.by_index(i).1.numel();
        for j in 0..numel {
            let orig = model.params.by_index(i).1.data()[j];
            model.params.by_index_mut(i).1.data_mut()[j] = orig + H;
            let up = joint_loss(&model, &batch, &obj).unwrap().total;
            model.params.by_index_mut(i).1.data_mut()[j] = orig - H;
            let down = joint_loss(&model, &batch, &obj).unwrap().total;
            model.params.by_index_mut(i).1.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * H);
            let analytic = grad.as_ref().map_or(0.0, |g| g.data()[j]);
            let e = rel_err(analytic, numeric);
            if e > worst.0 {
                worst = (e, format!("{}[{j}]", model.params.by_index(i).0));
            }
            checked += 1;
        }
    }
    check(worst.0 <= 1e-5, format!("{checked} parameters, max relative error {:.2e} at {}", worst.0, worst.1))
}

fn context_mask_blackout() -> Outcome {
    let mut r = rng(12);
    let masked = Model::<f32>::new(tiny_config(16, (2, 2), 40, 30), &mut r).unwrap();
    let open = Model { config: ModelConfig { context_mask: false, ..masked.config.clone() }, params: masked.params.clone() };
    let (mut masked_changed, mut open_min) = (0usize, f32::INFINITY);
    for _ in 0..100 {
        let x = random_input(&mut r, 40, 8, 6, PositionMode::Reversed);
        let prefix: Vec<usize> = std::iter::once(BOS).chain(random_ids(&mut r, 3, 30)).collect();
        for (model, masked_run) in [(&masked, true), (&open, false)] {
            let clean = model.encode(&x).unwrap();
            let mut noisy = clean.clone();
            let d = noisy.hidden.cols();
            for (p, _) in x.context_mask.iter().enumerate().filter(|(_, &m)| m) {
                for v in &mut noisy.hidden.data_mut()[p * d..(p + 1) * d] {
                    *v = r.gen_range(-5.0..5.0);
                }
            }
            let a = model.decode(&prefix, &clean).unwrap();
            let b = model.decode(&prefix, &noisy).unwrap();
            if masked_run {
                masked_changed += usize::from(!a.bit_eq(&b));
            } else {
                open_min = open_min.min(a.max_abs_diff(&b));
            }
        }
    }
    check(
        masked_changed == 0 && open_min > 1e-3,
        format!("masked: {masked_changed}/100 outputs changed; unmasked: smallest per-input max change {open_min:.3e}"),
    )
}

fn reversed_position_stability() -> Outcome {
    let mut r = rng(13);
    let (mut stable, mut moved) = (0, 0);
    for _ in 0..50 {
        let src_len = r.gen_range(1..20);
        let src = random_ids(&mut r, src_len, 100);
        let ctx_lens = [0, 3, 10, 40, 200];
        let mut rev = Vec::new();
        let mut seq = Vec::new();
        for &n in &ctx_lens {
            let ctx = random_ids(&mut r, n, 100);
            for (mode, out) in [(PositionMode::Reversed, &mut rev), (PositionMode::Sequential, &mut seq)] {
                let x = assemble(std::slice::from_ref(&ctx), &src, 512, mode).unwrap();
                out.push(x.position_ids[x.source_span.0..x.source_span.1].to_vec());
            }
        }
        if rev.iter().all(|p| *p == rev[0]) {
            stable += 1;
        }
        if (0..seq.len()).all(|i| (i + 1..seq.len()).all(|j| seq[i] != seq[j])) {
            moved += 1;
        }
    }
    check(
        stable == 50 && moved == 50,
        format!("reversed identical for {stable}/50 sources, sequential distinct for {moved}/50"),
    )
}

fn mlm_sampler_statistics() -> Outcome {
    let mut r = rng(14);
    let window = |r: &mut ChaCha8Rng, len: usize| {
        let ids = random_ids(r, len, 100);
        assemble::<Vec<usize>>(&[], &ids, 4096, PositionMode::Reversed).unwrap()
    };
    let x50 = window(&mut r, 50);
    let mut total = 0usize;
    for _ in 0..10_000 {
        total += apply_mlm_masking(&x50, 0.16, 20, &mut r, 100).positions.len();
    }
    let rate = total as f64 / (10_000.0 * 50.0);
    let mut max_seen = 0;
    for _ in 0..2_000 {
        let len = r.gen_range(1..=600);
        let x = window(&mut r, len);
        max_seen = max_seen.max(apply_mlm_masking(&x, 0.16, 20, &mut r, 100).positions.len());
    }
    let x1 = window(&mut r, 1);
    let min_one = (0..1_000).all(|_| apply_mlm_masking(&x1, 0.16, 20, &mut r, 100).positions == vec![0]);
    check(
        (0.14..=0.18).contains(&rate) && max_seen <= 20 && min_one,
        format!("mean rate {rate:.4} at L=50, max |M| {max_seen} over L in 1..=600, min-1 at L=1: {min_one}"),
    )
}

// The synthetic ladder: train tiny models with and without context.
struct Ladder {
    train: Vec<Document>,
    dev: Vec<Document>,
    src: Vocab,
    tgt: Vocab,
}

impl Ladder {
    fn new(seed: u64) -> Self {
        let docs = synthetic::generate(&SyntheticConfig { documents: 2000, seed: 100 + seed, ..SyntheticConfig::default() })
            .unwrap();
        let (train, dev) = synthetic::split(docs, 100, seed);
        let src = Vocab::build_source(&train, 1000, 1);
        let tgt = Vocab::build_target(&train, 1000, 1);
        Ladder { train, dev, src, tgt }
    }

    fn model_config(&self, manipulations: bool) -> ModelConfig {
        ModelConfig {
            position_mode: if manipulations { PositionMode::Reversed } else { PositionMode::Sequential },
            segment_embeddings: manipulations,
            context_mask: manipulations,
            ..tiny_config(32, (2, 1), self.src.len(), self.tgt.len())
        }
    }

    fn examples(&self, docs: &[Document], policy: ContextPolicy, cfg: &ModelConfig) -> Vec<docnmt::objective::TrainingExample> {
        build_examples(&encode_parallel(docs, &self.src, &self.tgt), policy, cfg.max_positions, cfg.position_mode).unwrap()
    }

    fn accuracy(&self, model: &Model<f32>, policy: ContextPolicy) -> f64 {
        let search = SearchConfig::default();
        let hyps: Vec<Vec<Vec<String>>> = self
            .dev
            .iter()
            .map(|d| {
                let sources: Vec<Vec<usize>> = d.sentences.iter().map(|s| self.src.encode(s)).collect();
                translate_document(model, &sources, policy, &search, None)
                    .unwrap()
                    .iter()
                    .map(|h| self.tgt.decode(h.output()).unwrap())
                    .collect()
            })
            .collect();
        disambiguation_accuracy(&self.dev, &hyps)
    }
}

fn ladder_train_config(steps: u64, seed: u64, lr_scale: f64) -> TrainConfig {
    TrainConfig { max_steps: steps, tokens_per_batch: 200, warmup_steps: 200, lr_scale, seed, ..TrainConfig::default() }
}

const LADDER_STEPS: u64 = 600;

fn synthetic_ablation_ladder() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 1..=3 {
        let ladder = Ladder::new(seed);
        let mut acc = Vec::new();
        for (policy, manip) in [(ContextPolicy::None, false), (ContextPolicy::Large, true)] {
            let cfg = ladder.model_config(manip);
            let model = Model::<f32>::new(cfg.clone(), &mut rng(seed)).unwrap();
            let examples = ladder.examples(&ladder.train, policy, &cfg);
            let mut t =
                Trainer::new(model, examples, ladder_train_config(LADDER_STEPS, seed, 2.0), ObjectiveConfig::default())
                    .unwrap();
            t.run(|_, _| Ok(())).unwrap();
            acc.push(ladder.accuracy(&t.model, policy));
        }
        let (none, large) = (acc[0], acc[1]);
        ok &= none <= 0.60 && large >= 0.95 && large > none;
        lines.push(format!("seed {seed}: none {:.1}% large+manip {:.1}%", 100.0 * none, 100.0 * large));
    }
    check(ok, format!("{LADDER_STEPS} steps; {}", lines.join("; ")))
}

// Monolingual source text spells filler words both ways (`wK`, `vK`); the
// parallel data uses only `wK`; held-out text mixes both. Only an encoder
// that learned from monolingual context can relate the two spellings.
fn pretraining_run(seed: u64) -> (f64, f64) {
    let corpus = |documents, variant_rate, base: u64| {
        synthetic::generate(&SyntheticConfig { documents, variant_rate, seed: base + seed, ..SyntheticConfig::default() })
            .unwrap()
    };
    let mono = corpus(2000, 0.5, 200);
    let parallel = corpus(500, 0.0, 300);
    let held_out = corpus(100, 0.5, 400);
    let both: Vec<Document> = mono.iter().chain(&parallel).cloned().collect();
    let src = Vocab::build_source(&both, 1000, 1);
    let tgt = Vocab::build_target(&parallel, 1000, 1);
    let cfg = tiny_config(32, (2, 1), src.len(), tgt.len());
    let examples = |docs: &[Document]| {
        build_examples(&encode_parallel(docs, &src, &tgt), ContextPolicy::Large, cfg.max_positions, cfg.position_mode)
            .unwrap()
    };

    let donor = Model::<f32>::new(cfg.clone(), &mut rng(1000 + seed)).unwrap();
    let mut pre =
        Trainer::new(donor, examples(&mono), ladder_train_config(2000, 1000 + seed, 0.3), ObjectiveConfig::mlm_only())
            .unwrap();
    pre.run(|_, _| Ok(())).unwrap();
    let ckpt = Checkpoint::from_params(&pre.model.params).filtered("encoder.");

    let dev = examples(&held_out);
    let mut losses = [0.0; 2];
    for (slot, pretrained) in [false, true].into_iter().enumerate() {
        let mut model = Model::<f32>::new(cfg.clone(), &mut rng(seed)).unwrap();
        if pretrained {
            init_encoder(&mut model.params, &ckpt, true).unwrap();
        }
        let mut t =
            Trainer::new(model, examples(&parallel), ladder_train_config(500, seed, 1.0), ObjectiveConfig::default())
                .unwrap();
        t.run(|_, _| Ok(())).unwrap();
        losses[slot] = evaluate_nll(&t.model, &dev).unwrap();
    }
    (losses[0], losses[1])
}

fn pretraining_benefit() -> Outcome {
    let mut ok = true;
    let mut lines = Vec::new();
    for seed in 1..=3 {
        let (random, pretrained) = pretraining_run(seed);
        ok &= pretrained < random;
        lines.push(format!("seed {seed}: random {random:.4} pretrained {pretrained:.4}"));
    }
    check(ok, format!("held-out nll after 500 fine-tuning steps; {}", lines.join("; ")))
}

fn joint_objective_additivity() -> Outcome {
    let mut r = rng(17);
    let model = Model::<f64>::new(ModelConfig { max_positions: 64, ..tiny_config(16, (1, 1), 40, 30) }, &mut r).unwrap();
    let obj = ObjectiveConfig { mlm_enabled: true, ..ObjectiveConfig::default() };
    let (mut worst_sum, mut worst_oracle) = (0.0f64, 0.0f64);
    let mut exact = true;
    for _ in 0..100 {
        let n = r.gen_range(1..4);
        let examples: Vec<MaskedExample> = (0..n)
            .map(|_| {
                let x = random_input(&mut r, 40, 6, 6, PositionMode::Reversed);
                let m = apply_mlm_masking(&x, 0.16, 20, &mut r, 40);
                let mut target = vec![BOS];
                let tlen = r.gen_range(1..6);
                target.extend(random_ids(&mut r, tlen, 30));
                target.push(EOS);
                MaskedExample { input: m.input, masked_positions: m.positions, originals: m.originals, target }
            })
            .collect();
        let batch = MaskedBatch { examples };
        let terms = joint_loss(&model, &batch, &obj).unwrap();
        worst_sum = worst_sum.max((terms.total - (terms.nll + terms.mlm)).abs());

        // Independent recomputation of both terms from raw logits.
        let (mut nll, mut nt, mut mlm, mut nm) = (0.0, 0usize, 0.0, 0usize);
        for ex in &batch.examples {
            let enc = model.encode(&ex.input).unwrap();
            let logits = model.decode(&ex.target[..ex.target.len() - 1], &enc).unwrap();
            for (row, &y) in ex.target[1..].iter().enumerate() {
                nll -= log_prob(logits.row(row), y);
                nt += 1;
            }
            let ml = model.mlm_logits(&enc, &ex.masked_positions).unwrap();
            for (row, &y) in ex.originals.iter().enumerate() {
                mlm -= log_prob(ml.row(row), y);
                nm += 1;
            }
        }
        let oracle = nll / nt as f64 + mlm / nm.max(1) as f64;
        worst_oracle = worst_oracle.max((terms.total - oracle).abs());

        let plain = MaskedBatch {
            examples: batch
                .examples
                .iter()
                .map(|e| MaskedExample { masked_positions: vec![], originals: vec![], ..e.clone() })
                .collect(),
        };
        let t = joint_loss(&model, &plain, &ObjectiveConfig::default()).unwrap();
        exact &= t.total == t.nll && t.mlm == 0.0;
    }
    check(
        worst_sum <= 1e-6 && worst_oracle <= 1e-6 && exact,
        format!(
            "max |total - (nll + mlm)| {worst_sum:.1e}, max |total - oracle| {worst_oracle:.1e}, unmasked total == nll: {exact}"
        ),
    )
}

fn log_prob(row: &[f64], y: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
    row[y] - max - z.ln()
}

// Scores every sequence of at most `max_len` generated tokens.
fn exhaustive_best(model: &Model<f64>, x: &ExtendedInput, max_len: usize, alpha: f64) -> (Vec<usize>, f64) {
    let enc = model.encode(x).unwrap();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut stack = vec![(vec![BOS], 0.0f64)];
    while let Some((prefix, lp)) = stack.pop() {
        let logits = model.decode(&prefix, &enc).unwrap();
        let row = logits.row(logits.rows() - 1);
        for tok in 0..row.len() {
            if tok == PAD || tok == BOS {
                continue;
            }
            let mut seq = prefix.clone();
            seq.push(tok);
            let l = lp + log_prob(row, tok);
            let gen = seq.len() - 1;
            if tok == EOS || gen == max_len {
                let score = l / length_penalty(gen, alpha);
                let better = match &best {
                    None => true,
                    Some((s, b)) => score > *s || (score == *s && seq < *b),
                };
                if better {
                    best = Some((score, seq));
                }
            } else {
                stack.push((seq, l));
            }
        }
    }
    let (s, b) = best.unwrap();
    (b, s)
}

fn beam_search_optimality() -> Outcome {
    let mut r = rng(18);
    let mut exact = 0;
    let mut greedy_ok = 0;
    for m in 0..20 {
        let mut model = Model::<f64>::new(tiny_config(8, (1, 1), 12, 8), &mut rng(1000 + m)).unwrap();
        model.params.get_mut("decoder.output.weight").unwrap().data_mut().iter_mut().for_each(|v| *v *= 3.0);
        let x = random_input(&mut r, 12, 4, 4, PositionMode::Reversed);
        let beam = beam_search(&model, &x, &SearchConfig { beam: 4096, max_len: Some(4), alpha: 1.0 }).unwrap();
        let (best, score) = exhaustive_best(&model, &x, 4, 1.0);
        if beam.tokens == best && (beam.score(1.0) - score).abs() <= 1e-12 {
            exact += 1;
        }
        for _ in 0..5 {
            let y = random_input(&mut r, 12, 4, 4, PositionMode::Reversed);
            let b1 = beam_search(&model, &y, &SearchConfig { beam: 1, max_len: Some(8), alpha: 1.0 }).unwrap();
            if b1.tokens == greedy(&model, &y, 8).unwrap().tokens {
                greedy_ok += 1;
            }
        }
    }
    let lp_ok = length_penalty(1, 0.6) == 1.0 && length_penalty(1, 1.0) == 1.0 && length_penalty(7, 1.0) == 2.0;
    check(
        exact == 20 && greedy_ok == 100 && lp_ok,
        format!("beam 4096 == exhaustive on {exact}/20 models, beam 1 == greedy on {greedy_ok}/100 inputs, penalties exact: {lp_ok}"),
    )
}

// Reference BLEU written independently: n-grams keyed by joined strings in
// ordered maps, precisions multiplied directly rather than via logs.
fn reference_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let grams = |s: &[String], n: usize| -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        if s.len() >= n {
            for i in 0..=s.len() - n {
                *m.entry(s[i..i + n].join("\u{1}")).or_insert(0) += 1;
            }
        }
        m
    };
    let mut num = [0usize; 4];
    let mut den = [0usize; 4];
    let (mut c, mut rl) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        rl += rf.len();
        for n in 1..=4 {
            let rg = grams(rf, n);
            for (g, k) in grams(h, n) {
                num[n - 1] += k.min(*rg.get(&g).unwrap_or(&0));
                den[n - 1] += k;
            }
        }
    }
    if num.contains(&0) {
        return 0.0;
    }
    let product: f64 = (0..4).map(|i| num[i] as f64 / den[i] as f64).product();
    let bp = if c > rl { 1.0 } else { (1.0 - rl as f64 / c as f64).exp() };
    100.0 * bp * product.powf(0.25)
}

fn bleu_oracle_equivalence() -> Outcome {
    let mut r = rng(19);
    let words = ["a", "b", "c", "d", "e"];
    let mut worst = 0.0f64;
    let mut nonzero = 0;
    for _ in 0..50 {
        let n = r.gen_range(1..8);
        let mut hyps = Vec::new();
        let mut refs = Vec::new();
        for _ in 0..n {
            let len = r.gen_range(4..15);
            let rf: Vec<String> = (0..len).map(|_| words[r.gen_range(0..5)].to_string()).collect();
            let mut h: Vec<String> = rf.iter().filter(|_| r.gen_bool(0.9)).cloned().collect();
            for w in h.iter_mut() {
                if r.gen_bool(0.1) {
                    *w = words[r.gen_range(0..5)].to_string();
                }
            }
            if r.gen_bool(0.3) {
                h.push("a".into());
            }
            hyps.push(h);
            refs.push(rf);
        }
        let ours = corpus_bleu(&hyps, &refs).unwrap().score;
        let theirs = reference_bleu(&hyps, &refs);
        if theirs > 0.0 {
            nonzero += 1;
        }
        worst = worst.max((ours - theirs).abs());
    }
    let refs: Vec<Vec<String>> = (0..5).map(|i| (0..6 + i).map(|k| format!("w{k}")).collect()).collect();
    let identity = corpus_bleu(&refs, &refs).unwrap().score;
    check(
        worst <= 1e-6 && identity == 100.0 && nonzero >= 25,
        format!("max |ours - reference| {worst:.1e} over 50 corpora ({nonzero} non-zero), identity {identity}"),
    )
}

fn random_checkpoint(r: &mut ChaCha8Rng) -> Checkpoint {
    let mut c = Checkpoint::new();
    let specials = [0.0, -0.0, f64::INFINITY, f64::NEG_INFINITY, f64::NAN, f64::MIN_POSITIVE, 1e300];
    for i in 0..r.gen_range(0..12) {
        let rank = r.gen_range(0..4);
        let shape: Vec<usize> = (0..rank).map(|_| r.gen_range(0..6)).collect();
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel)
            .map(|_| if r.gen_bool(0.1) { specials[r.gen_range(0..specials.len())] } else { r.gen_range(-3.0..3.0) })
            .collect();
        let t = Tensor::new(shape, data).unwrap();
        let name = format!("t{i}.{}", "x".repeat(r.gen_range(0..30)));
        let stored = if r.gen_bool(0.5) { StoredTensor::from_tensor(&t) } else { StoredTensor::from_tensor(&t.cast::<f32>()) };
        c.insert(name, stored).unwrap();
    }
    for k in 0..r.gen_range(0..3) {
        c.metadata.insert(format!("k{k}"), "v".repeat(k * 7));
    }
    c
}

fn checkpoint_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(20);
    let mut identical = 0;
    for i in 0..20 {
        let c = random_checkpoint(&mut r);
        let path = dir.path().join(format!("c{i}.ntc"));
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        if back == c && back.to_bytes().unwrap() == std::fs::read(&path).unwrap() {
            identical += 1;
        }
    }

    let deep = tiny_config(16, (12, 1), 30, 20);
    let shallow = ModelConfig { enc_layers: 6, ..deep.clone() };
    let donor = ModelParams::<f32>::init(&deep, &mut rng(21));
    let mut params = ModelParams::<f32>::init(&shallow, &mut rng(22));
    let before = params.clone();
    let ckpt = Checkpoint::from_params(&donor).filtered("encoder.");
    let report = init_encoder(&mut params, &ckpt, true).unwrap();
    let mut wrong = Vec::new();
    for (name, t) in params.iter() {
        let expected = if name.starts_with("encoder.") { donor.get(name).unwrap() } else { before.get(name).unwrap() };
        if !t.bit_eq(expected) {
            wrong.push(name.to_string());
        }
    }
    let upper_unused = (6..12).all(|i| report.unused.iter().any(|n| n.starts_with(&format!("encoder.layer.{i}."))));
    let lower_used = !report.unused.iter().any(|n| (0..6).any(|i| n.starts_with(&format!("encoder.layer.{i}."))));
    check(
        identical == 20 && wrong.is_empty() && upper_unused && lower_used && report.coverage() == 1.0,
        format!(
            "{identical}/20 bit-identical round trips; 12->6 layer init: {} tensors copied, {} mismatched by diff, layers 6-11 unused: {upper_unused}",
            report.initialized.len(),
            wrong.len()
        ),
    )
}

fn divergence_detection() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bin = env!("CARGO_BIN_EXE_docnmt");
    let run = |args: &[&str]| Command::new(bin).args(args).current_dir(d).output().unwrap();
    let out = run(&["synth", "--out-dir", "data", "--documents", "40", "--dev", "0"]);
    assert!(out.status.success());
    let out = run(&["prepare", "--src", "data/train.src", "--tgt", "data/train.tgt", "--out-dir", "prep"]);
    assert!(out.status.success());
    let out = run(&[
        "train",
        "d_model=16",
        "n_heads=2",
        "d_ffn=32",
        "enc_layers=1",
        "dec_layers=1",
        "max_positions=64",
        "max_steps=50",
        "tokens_per_batch=100",
        "inject_nan_at_step=4",
        "train_data=prep/corpus.bin",
        "src_vocab=prep/src.vocab",
        "tgt_vocab=prep/tgt.vocab",
        "run_dir=run",
    ]);
    let code = out.status.code();
    let log = std::fs::read_to_string(d.join("run/metrics.log")).unwrap_or_default();
    let last_step = log.lines().filter_map(|l| l.strip_prefix("step=")?.split(' ').next()?.parse::<u64>().ok()).max();
    let stderr = String::from_utf8_lossy(&out.stderr);
    check(
        code == Some(3) && last_step == Some(3) && stderr.contains("diverged at step 4"),
        format!("exit code {code:?}, last logged step {last_step:?}, message {:?}", stderr.trim()),
    )
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("1 gradient integrity", gradient_integrity, Some(Duration::from_secs(60))),
        ("2 context-mask blackout", context_mask_blackout, Some(Duration::from_secs(30))),
        ("3 reversed-position stability", reversed_position_stability, None),
        ("4 MLM sampler statistics", mlm_sampler_statistics, None),
        ("5 synthetic ablation ladder", synthetic_ablation_ladder, Some(Duration::from_secs(15 * 60))),
        ("6 pretraining benefit", pretraining_benefit, Some(Duration::from_secs(10 * 60))),
        ("7 joint objective additivity", joint_objective_additivity, None),
        ("8 beam-search optimality", beam_search_optimality, None),
        ("9 BLEU oracle equivalence", bleu_oracle_equivalence, None),
        ("10 checkpoint round-trip", checkpoint_round_trip, None),
        ("11 divergence detection", divergence_detection, None),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f, limit) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.starts_with(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(d), Some(l)) if took > l => Err(format!("{d}; exceeded {}s budget", l.as_secs())),
            (o, _) => o,
        };
        match outcome {
            Ok(d) => println!("PASS criterion {name}: {d} [{:.1}s]", took.as_secs_f64()),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {name}: {d} [{:.1}s]", took.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
