//! Adam with the inverse-square-root warmup schedule, token-budget batching
//! and the training loop.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::context_window::{assemble, ContextPolicy, PositionMode};
use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{lit, Scalar, Tensor};
use crate::objective::{joint_loss, loss_and_gradients, MaskedBatch, ObjectiveConfig, PassOptions, TrainingExample};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_steps: u64,
    /// Budget on `max(source tokens, target tokens)` per batch.
    pub tokens_per_batch: usize,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Multiplier on the scheduled learning rate.
    pub lr_scale: f64,
    pub seed: u64,
    /// Save every this many steps; 0 disables periodic saves.
    pub checkpoint_every: u64,
    pub clip_norm: Option<f64>,
    /// Parameter name prefixes excluded from updates.
    pub freeze: Vec<String>,
    /// Poison the loss at this step to exercise divergence handling.
    pub inject_nan_at_step: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_steps: 300_000,
            tokens_per_batch: 3072,
            warmup_steps: 4000,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            lr_scale: 1.0,
            seed: 1,
            checkpoint_every: 0,
            clip_norm: Some(1.0),
            freeze: Vec::new(),
            inject_nan_at_step: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 || self.tokens_per_batch == 0 || self.warmup_steps == 0 {
            return Err(Error::Config("max_steps, tokens_per_batch and warmup_steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if !(self.lr_scale >= 0.0 && self.lr_scale.is_finite()) {
            return Err(Error::Config("lr_scale must be finite and non-negative".into()));
        }
        if matches!(self.clip_norm, Some(c) if c.is_nan() || c <= 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    fn is_frozen(&self, name: &str) -> bool {
        self.freeze.iter().any(|p| name.starts_with(p.as_str()))
    }
}

/// `d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_schedule(step: u64, d_model: usize, warmup: u64) -> f64 {
    assert!(step >= 1, "schedule starts at step 1");
    let s = step as f64;
    (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5))
}

/// Adam moments, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(model: &Model<T>) -> Self {
        let zeros: Vec<Tensor<T>> = model.params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        OptimizerState { step: 0, m: zeros.clone(), v: zeros }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// One bias-corrected Adam update in place; `step` counts from 1.
pub fn adam_update<T: Scalar>(param: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], step: u64, h: AdamHyper) {
    let (b1, b2) = (lit::<T>(h.beta1), lit::<T>(h.beta2));
    let c1 = lit::<T>(1.0 - h.beta1.powi(step as i32));
    let c2 = lit::<T>(1.0 - h.beta2.powi(step as i32));
    let (lr, eps) = (lit::<T>(h.lr), lit::<T>(h.epsilon));
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Splits a shuffled order of `examples` into batches, each closed before
/// its source or target token count would pass `tokens_per_batch`.
pub fn make_batches(
    examples: &[TrainingExample],
    tokens_per_batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    if let Some(e) = examples.iter().find(|e| e.budget_size() > tokens_per_batch) {
        return Err(Error::ExampleTooLong { len: e.budget_size(), budget: tokens_per_batch });
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let (mut src, mut tgt) = (0usize, 0usize);
    for i in order {
        let e = &examples[i];
        let (s, t) = (src + e.input.len(), tgt + e.target.len());
        if !current.is_empty() && s.max(t) > tokens_per_batch {
            batches.push(std::mem::take(&mut current));
            src = e.input.len();
            tgt = e.target.len();
        } else {
            src = s;
            tgt = t;
        }
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}

/// Builds one example per sentence with its same-document context.
///
/// `documents` holds `(source ids, target ids)` per sentence; targets are
/// wrapped in `[BOS] … [EOS]`.
pub fn build_examples(
    documents: &[Vec<(Vec<usize>, Vec<usize>)>],
    policy: ContextPolicy,
    limit: usize,
    mode: PositionMode,
) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for doc in documents {
        let sources: Vec<&[usize]> = doc.iter().map(|(s, _)| s.as_slice()).collect();
        for (i, (src, tgt)) in doc.iter().enumerate() {
            let input = assemble(policy.select(&sources, i), src, limit, mode)?;
            let mut target = Vec::with_capacity(tgt.len() + 2);
            target.push(BOS);
            target.extend_from_slice(tgt);
            target.push(EOS);
            out.push(TrainingExample { input, target });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub total: f64,
    pub nll: f64,
    pub mlm: f64,
    pub lr: f64,
    /// Norm of the unclipped gradient.
    pub grad_norm: f64,
}

impl fmt::Display for StepMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} total={:.6} nll={:.6} mlm={:.6} lr={:.6e} grad_norm={:.6}",
            self.step, self.total, self.nll, self.mlm, self.lr, self.grad_norm
        )
    }
}

fn dropout_seed(seed: u64, step: u64) -> u64 {
    seed.rotate_left(17) ^ step.wrapping_mul(0xD134_2543_DE82_EF95)
}

/// One forward/backward pass and Adam update.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    state: &mut OptimizerState<T>,
    batch: &MaskedBatch,
    tcfg: &TrainConfig,
    ocfg: &ObjectiveConfig,
) -> Result<StepMetrics> {
    let step = state.step + 1;
    let opts = PassOptions {
        dropout_seed: (model.config.dropout > 0.0).then(|| dropout_seed(tcfg.seed, step)),
        inject_nan: tcfg.inject_nan_at_step == Some(step),
    };
    let (terms, grads) = loss_and_gradients(model, batch, ocfg.weights(), ocfg.label_smoothing, opts)
        .map_err(|e| match e {
            Error::TrainingDiverged { reason, .. } => Error::TrainingDiverged { step, reason },
            other => other,
        })?;

    let trainable: Vec<bool> = model.params.names().map(|n| !tcfg.is_frozen(n)).collect();
    let sq: f64 = grads
        .iter()
        .zip(&trainable)
        .filter(|(_, &t)| t)
        .filter_map(|(g, _)| g.as_ref())
        .map(|g| g.sq_norm().to_f64_lossy())
        .sum();
    let grad_norm = sq.sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::TrainingDiverged { step, reason: format!("gradient norm is {grad_norm}") });
    }
    let clip = match tcfg.clip_norm {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };

    let lr = lr_schedule(step, model.config.d_model, tcfg.warmup_steps) * tcfg.lr_scale;
    let hyper = AdamHyper { lr, beta1: tcfg.beta1, beta2: tcfg.beta2, epsilon: tcfg.epsilon };
    for (i, g) in grads.into_iter().enumerate() {
        if !trainable[i] {
            continue;
        }
        let (_, p) = model.params.by_index_mut(i);
        let g = match g {
            Some(g) if clip != 1.0 => g.map(|&x| x * lit::<T>(clip)),
            Some(g) => g,
            None => Tensor::zeros(p.shape().to_vec()),
        };
        if lr == 0.0 {
            continue;
        }
        adam_update(p.data_mut(), g.data(), state.m[i].data_mut(), state.v[i].data_mut(), step, hyper);
    }
    state.step = step;
    Ok(StepMetrics { step, total: terms.total, nll: terms.nll, mlm: terms.mlm, lr, grad_norm })
}

/// Mean per-token translation loss over `examples`, without dropout.
pub fn evaluate_nll<T: Scalar>(model: &Model<T>, examples: &[TrainingExample]) -> Result<f64> {
    let batch = MaskedBatch::unmasked(examples);
    Ok(joint_loss(model, &batch, &ObjectiveConfig::default())?.nll)
}

/// Drives [`train_step`] over repeated shuffled epochs of a fixed example set.
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub state: OptimizerState<T>,
    pub train: TrainConfig,
    pub objective: ObjectiveConfig,
    examples: Vec<TrainingExample>,
    batch_rng: ChaCha8Rng,
    mask_rng: ChaCha8Rng,
    queue: Vec<Vec<usize>>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        model: Model<T>,
        examples: Vec<TrainingExample>,
        train: TrainConfig,
        objective: ObjectiveConfig,
    ) -> Result<Self> {
        train.validate()?;
        if examples.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if let Some(e) = examples.iter().find(|e| e.budget_size() > train.tokens_per_batch) {
            return Err(Error::ExampleTooLong { len: e.budget_size(), budget: train.tokens_per_batch });
        }
        let state = OptimizerState::new(&model);
        Ok(Trainer {
            batch_rng: ChaCha8Rng::seed_from_u64(train.seed),
            mask_rng: ChaCha8Rng::seed_from_u64(train.seed ^ 0x5DEE_CE66),
            model,
            state,
            train,
            objective,
            examples,
            queue: Vec::new(),
        })
    }

    pub fn step(&self) -> u64 {
        self.state.step
    }

    fn next_batch(&mut self) -> Result<MaskedBatch> {
        if self.queue.is_empty() {
            self.queue = make_batches(&self.examples, self.train.tokens_per_batch, &mut self.batch_rng)?;
            self.queue.reverse();
        }
        let ids = self.queue.pop().expect("epoch has at least one batch");
        let picked: Vec<TrainingExample> = ids.iter().map(|&i| self.examples[i].clone()).collect();
        Ok(self.objective.prepare(&picked, &mut self.mask_rng, self.model.config.src_vocab))
    }

    pub fn train_one(&mut self) -> Result<StepMetrics> {
        let batch = self.next_batch()?;
        train_step(&mut self.model, &mut self.state, &batch, &self.train, &self.objective)
    }

    /// Trains until `max_steps`, calling `on_step` after every update.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &StepMetrics) -> Result<()>) -> Result<()> {
        while self.state.step < self.train.max_steps {
            let m = self.train_one()?;
            on_step(self, &m)?;
        }
        Ok(())
    }
}
