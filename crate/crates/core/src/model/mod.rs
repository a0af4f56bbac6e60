//! Pre-norm transformer encoder-decoder over extended inputs.
//!
//! The encoder sums token, position and (optionally) segment embeddings and
//! runs unmasked self-attention over the whole window, so source states are
//! conditioned on the context. The decoder attends causally to its prefix and
//! cross-attends to encoder states with context positions hidden.

mod params;

use rand_chacha::ChaCha8Rng;

pub use params::{dec_layer, enc_layer, shape_table, ModelConfig, ModelParams};

use crate::context_window::ExtendedInput;
use crate::corpus::BOS;
use crate::error::{Error, Result};
use crate::numerics::{lit, Gradients, Graph, Scalar, Tensor, Var};

/// Encoder states for one extended input.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<T> {
    /// `[L × d_model]`
    pub hidden: Tensor<T>,
    pub context_mask: Vec<bool>,
}

/// Encoder states still attached to a tape.
#[derive(Debug, Clone)]
pub struct EncodedVar {
    pub hidden: Var,
    pub context_mask: Vec<bool>,
}

/// One forward pass over borrowed parameters, recorded on a tape.
///
/// Parameters are bound to tape leaves lazily, the first time a layer asks
/// for them.
pub struct Forward<'p, T: Scalar> {
    pub graph: Graph<'p, T>,
    params: &'p ModelParams<T>,
    cfg: &'p ModelConfig,
    bound: Vec<Option<Var>>,
    dropout: f64,
    record_attention: bool,
    cross_attention: Vec<Tensor<T>>,
}

impl<'p, T: Scalar> Forward<'p, T> {
    /// Evaluation pass: dropout disabled.
    pub fn eval(params: &'p ModelParams<T>, cfg: &'p ModelConfig) -> Self {
        Forward {
            graph: Graph::new(),
            params,
            cfg,
            bound: vec![None; params.len()],
            dropout: 0.0,
            record_attention: false,
            cross_attention: Vec::new(),
        }
    }

    /// Training pass with dropout drawn from `rng`.
    pub fn train(params: &'p ModelParams<T>, cfg: &'p ModelConfig, rng: ChaCha8Rng) -> Self {
        Forward {
            graph: Graph::with_dropout(rng),
            dropout: cfg.dropout,
            ..Self::eval(params, cfg)
        }
    }

    pub fn config(&self) -> &ModelConfig {
        self.cfg
    }

    /// Keep a copy of every cross-attention weight matrix (per layer, per head).
    pub fn record_cross_attention(&mut self) {
        self.record_attention = true;
    }

    pub fn cross_attention(&self) -> &[Tensor<T>] {
        &self.cross_attention
    }

    pub fn param(&mut self, name: &str) -> Var {
        let idx = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("model has no parameter {name}"));
        if let Some(v) = self.bound[idx] {
            return v;
        }
        let v = self.graph.param(self.params.by_index(idx).1);
        self.bound[idx] = Some(v);
        v
    }

    /// Gradients for every parameter, aligned with `ModelParams` order.
    /// Parameters the loss never touched get `None`.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.bound.iter().map(|b| b.and_then(|v| grads.take(v))).collect()
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"));
        let b = self.param(&format!("{prefix}.bias"));
        let y = self.graph.matmul(x, w)?;
        self.graph.add_row(y, b)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gain"));
        let b = self.param(&format!("{prefix}.bias"));
        self.graph.layer_norm(x, g, b, lit(self.cfg.layer_norm_eps))
    }

    fn attention(
        &mut self,
        prefix: &str,
        query_in: Var,
        kv_in: Var,
        mask: &Tensor<bool>,
        record: bool,
    ) -> Result<Var> {
        let q = self.linear(query_in, &format!("{prefix}.q"))?;
        let k = self.linear(kv_in, &format!("{prefix}.k"))?;
        let v = self.linear(kv_in, &format!("{prefix}.v"))?;
        let hd = self.cfg.head_dim();
        let scale = lit::<T>(1.0 / (hd as f64).sqrt());
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let qh = self.graph.slice_cols(q, h * hd, hd)?;
            let kh = self.graph.slice_cols(k, h * hd, hd)?;
            let vh = self.graph.slice_cols(v, h * hd, hd)?;
            let scores = self.graph.matmul_nt(qh, kh)?;
            let scores = self.graph.scale(scores, scale);
            let weights = self.graph.masked_softmax(scores, mask)?;
            if record {
                self.cross_attention.push(self.graph.value(weights).clone());
            }
            heads.push(self.graph.matmul(weights, vh)?);
        }
        let merged = self.graph.concat_cols(&heads)?;
        self.linear(merged, &format!("{prefix}.o"))
    }

    fn feed_forward(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.in"))?;
        let h = self.graph.gelu(h);
        self.linear(h, &format!("{prefix}.out"))
    }

    /// `x + dropout(sublayer)`
    fn residual(&mut self, x: Var, sub: Var) -> Result<Var> {
        let sub = self.graph.dropout(sub, self.dropout);
        self.graph.add(x, sub)
    }

    /// Token + position (+ segment) embedding sum for the encoder.
    pub fn embed_source(&mut self, x: &ExtendedInput) -> Result<Var> {
        let cfg = self.cfg;
        if x.len() > cfg.max_positions {
            return Err(Error::PositionOverflow { position: x.len() - 1, max: cfg.max_positions });
        }
        if let Some(&p) = x.position_ids.iter().find(|&&p| p >= cfg.max_positions) {
            return Err(Error::PositionOverflow { position: p, max: cfg.max_positions });
        }
        if let Some(&id) = x.token_ids.iter().find(|&&id| id >= cfg.src_vocab) {
            return Err(Error::IdOutOfRange { id, size: cfg.src_vocab });
        }
        let tok_table = self.param("encoder.embed.token");
        let pos_table = self.param("encoder.embed.position");
        let tok = self.graph.gather(tok_table, &x.token_ids)?;
        let pos = self.graph.gather(pos_table, &x.position_ids)?;
        let mut h = self.graph.add(tok, pos)?;
        if cfg.segment_embeddings {
            let seg_table = self.param("encoder.embed.segment");
            let seg = self.graph.gather(seg_table, &x.segment_ids)?;
            h = self.graph.add(h, seg)?;
        }
        Ok(h)
    }

    pub fn encode(&mut self, x: &ExtendedInput) -> Result<EncodedVar> {
        let embedded = self.embed_source(x)?;
        let mut h = self.graph.dropout(embedded, self.dropout);
        let l = x.len();
        let open = Tensor::full(vec![l, l], false);
        for i in 0..self.cfg.enc_layers {
            let a = self.norm(h, &enc_layer(i, "attn_norm"))?;
            let a = self.attention(&enc_layer(i, "attn"), a, a, &open, false)?;
            h = self.residual(h, a)?;
            let f = self.norm(h, &enc_layer(i, "ffn_norm"))?;
            let f = self.feed_forward(f, &enc_layer(i, "ffn"))?;
            h = self.residual(h, f)?;
        }
        let hidden = self.norm(h, "encoder.final_norm")?;
        Ok(EncodedVar { hidden, context_mask: x.context_mask.clone() })
    }

    /// Next-token logits `[T × tgt_vocab]` for every prefix position.
    pub fn decode(&mut self, prefix: &[usize], enc: &EncodedVar) -> Result<Var> {
        let cfg = self.cfg;
        if prefix.first() != Some(&BOS) {
            return Err(Error::EmptyPrefix);
        }
        let t = prefix.len();
        if t > cfg.max_positions {
            return Err(Error::PositionOverflow { position: t - 1, max: cfg.max_positions });
        }
        if let Some(&id) = prefix.iter().find(|&&id| id >= cfg.tgt_vocab) {
            return Err(Error::IdOutOfRange { id, size: cfg.tgt_vocab });
        }
        let l = enc.context_mask.len();
        if self.graph.value(enc.hidden).rows() != l {
            return Err(Error::ShapeMismatch("encoder states and context mask differ in length".into()));
        }
        let causal = Tensor::from_fn(vec![t, t], |i| i % t > i / t);
        let cross = Tensor::from_fn(vec![t, l], |i| cfg.context_mask && enc.context_mask[i % l]);

        let tok_table = self.param("decoder.embed.token");
        let pos_table = self.param("decoder.embed.position");
        let tok = self.graph.gather(tok_table, prefix)?;
        let positions: Vec<usize> = (0..t).collect();
        let pos = self.graph.gather(pos_table, &positions)?;
        let embedded = self.graph.add(tok, pos)?;
        let mut h = self.graph.dropout(embedded, self.dropout);
        let record = self.record_attention;
        for i in 0..cfg.dec_layers {
            let a = self.norm(h, &dec_layer(i, "self_attn_norm"))?;
            let a = self.attention(&dec_layer(i, "self_attn"), a, a, &causal, false)?;
            h = self.residual(h, a)?;
            let c = self.norm(h, &dec_layer(i, "cross_attn_norm"))?;
            let c = self.attention(&dec_layer(i, "cross_attn"), c, enc.hidden, &cross, record)?;
            h = self.residual(h, c)?;
            let f = self.norm(h, &dec_layer(i, "ffn_norm"))?;
            let f = self.feed_forward(f, &dec_layer(i, "ffn"))?;
            h = self.residual(h, f)?;
        }
        let h = self.norm(h, "decoder.final_norm")?;
        let w = self.param("decoder.output.weight");
        let b = self.param("decoder.output.bias");
        let logits = self.graph.matmul_nt(h, w)?;
        self.graph.add_row(logits, b)
    }

    /// Source-vocabulary logits `[|positions| × src_vocab]` at the requested
    /// encoder positions. The output projection is the source embedding table.
    pub fn mlm_logits(&mut self, enc: &EncodedVar, positions: &[usize]) -> Result<Var> {
        let l = enc.context_mask.len();
        if let Some(&p) = positions.iter().find(|&&p| p >= l) {
            return Err(Error::IndexOutOfRange { index: p, len: l });
        }
        let picked = self.graph.gather(enc.hidden, positions)?;
        let h = self.linear(picked, "mlm.transform")?;
        let h = self.graph.gelu(h);
        let h = self.norm(h, "mlm.norm")?;
        let table = self.param("encoder.embed.token");
        let bias = self.param("mlm.output.bias");
        let logits = self.graph.matmul_nt(h, table)?;
        self.graph.add_row(logits, bias)
    }

    /// Puts precomputed encoder states on the tape as constants.
    pub fn attach(&mut self, enc: &'p EncoderOutput<T>) -> EncodedVar {
        EncodedVar {
            hidden: self.graph.constant_ref(&enc.hidden),
            context_mask: enc.context_mask.clone(),
        }
    }
}

/// Configuration plus parameters, with tensor-level entry points.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, rng);
        Ok(Model { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        let expected = shape_table(&config);
        if params.len() != expected.len()
            || expected
                .iter()
                .any(|(n, s)| params.get(n).map(|t| t.shape() != s.as_slice()).unwrap_or(true))
        {
            return Err(Error::CheckpointMismatch(
                "parameters do not match the model configuration".into(),
            ));
        }
        Ok(Model { config, params })
    }

    pub fn forward(&self) -> Forward<'_, T> {
        Forward::eval(&self.params, &self.config)
    }

    /// Evaluation-mode encoder pass.
    pub fn encode(&self, x: &ExtendedInput) -> Result<EncoderOutput<T>> {
        let mut f = self.forward();
        let enc = f.encode(x)?;
        Ok(EncoderOutput { hidden: f.graph.value(enc.hidden).clone(), context_mask: enc.context_mask })
    }

    /// Training-mode encoder pass (dropout active).
    pub fn encode_train(&self, x: &ExtendedInput, rng: ChaCha8Rng) -> Result<EncoderOutput<T>> {
        let mut f = Forward::train(&self.params, &self.config, rng);
        let enc = f.encode(x)?;
        Ok(EncoderOutput { hidden: f.graph.value(enc.hidden).clone(), context_mask: enc.context_mask })
    }

    pub fn decode(&self, prefix: &[usize], enc: &EncoderOutput<T>) -> Result<Tensor<T>> {
        let mut f = self.forward();
        let e = f.attach(enc);
        let logits = f.decode(prefix, &e)?;
        Ok(f.graph.value(logits).clone())
    }

    /// Logits plus every cross-attention weight matrix (layer-major, then head).
    pub fn decode_with_attention(
        &self,
        prefix: &[usize],
        enc: &EncoderOutput<T>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut f = self.forward();
        f.record_cross_attention();
        let e = f.attach(enc);
        let logits = f.decode(prefix, &e)?;
        Ok((f.graph.value(logits).clone(), f.cross_attention().to_vec()))
    }

    pub fn mlm_logits(&self, enc: &EncoderOutput<T>, positions: &[usize]) -> Result<Tensor<T>> {
        let mut f = self.forward();
        let e = f.attach(enc);
        let logits = f.mlm_logits(&e, positions)?;
        Ok(f.graph.value(logits).clone())
    }

    /// The summed input embeddings the encoder sees before its first layer.
    pub fn source_embeddings(&self, x: &ExtendedInput) -> Result<Tensor<T>> {
        let mut f = self.forward();
        let v = f.embed_source(x)?;
        Ok(f.graph.value(v).clone())
    }
}
