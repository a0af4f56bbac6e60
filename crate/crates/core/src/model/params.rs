use indexmap::IndexMap;
use rand::Rng;

use crate::context_window::PositionMode;
use crate::error::{Error, Result};
use crate::numerics::{lit, Scalar, Tensor};

/// Transformer dimensions and the context-manipulation switches.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub max_positions: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub dropout: f64,
    pub position_mode: PositionMode,
    /// Add the segment table to encoder inputs.
    pub segment_embeddings: bool,
    /// Hide context positions from decoder cross-attention.
    pub context_mask: bool,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            d_ffn: 256,
            enc_layers: 2,
            dec_layers: 2,
            max_positions: 512,
            src_vocab: 1000,
            tgt_vocab: 1000,
            dropout: 0.1,
            position_mode: PositionMode::Reversed,
            segment_embeddings: true,
            context_mask: true,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("max_positions", self.max_positions),
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

pub fn enc_layer(i: usize, rest: &str) -> String {
    format!("encoder.layer.{i}.{rest}")
}

pub fn dec_layer(i: usize, rest: &str) -> String {
    format!("decoder.layer.{i}.{rest}")
}

fn push_attention(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, d: usize) {
    for proj in ["q", "k", "v", "o"] {
        out.push((format!("{prefix}.{proj}.weight"), vec![d, d]));
        out.push((format!("{prefix}.{proj}.bias"), vec![d]));
    }
}

fn push_norm(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, d: usize) {
    out.push((format!("{prefix}.gain"), vec![d]));
    out.push((format!("{prefix}.bias"), vec![d]));
}

fn push_ffn(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, d: usize, ffn: usize) {
    out.push((format!("{prefix}.in.weight"), vec![d, ffn]));
    out.push((format!("{prefix}.in.bias"), vec![ffn]));
    out.push((format!("{prefix}.out.weight"), vec![ffn, d]));
    out.push((format!("{prefix}.out.bias"), vec![d]));
}

/// Every learnable tensor with its shape, in canonical order.
///
/// Linear weights are stored `[in, out]` and applied as `x · W + b`; the
/// decoder output projection is stored `[tgt_vocab, d_model]` and applied
/// transposed. The MLM head reuses `encoder.embed.token` as its output
/// projection.
pub fn shape_table(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut out = vec![
        ("encoder.embed.token".to_string(), vec![cfg.src_vocab, d]),
        ("encoder.embed.segment".to_string(), vec![2, d]),
        ("encoder.embed.position".to_string(), vec![cfg.max_positions, d]),
    ];
    for i in 0..cfg.enc_layers {
        push_norm(&mut out, &enc_layer(i, "attn_norm"), d);
        push_attention(&mut out, &enc_layer(i, "attn"), d);
        push_norm(&mut out, &enc_layer(i, "ffn_norm"), d);
        push_ffn(&mut out, &enc_layer(i, "ffn"), d, cfg.d_ffn);
    }
    push_norm(&mut out, "encoder.final_norm", d);

    out.push(("decoder.embed.token".to_string(), vec![cfg.tgt_vocab, d]));
    out.push(("decoder.embed.position".to_string(), vec![cfg.max_positions, d]));
    for i in 0..cfg.dec_layers {
        push_norm(&mut out, &dec_layer(i, "self_attn_norm"), d);
        push_attention(&mut out, &dec_layer(i, "self_attn"), d);
        push_norm(&mut out, &dec_layer(i, "cross_attn_norm"), d);
        push_attention(&mut out, &dec_layer(i, "cross_attn"), d);
        push_norm(&mut out, &dec_layer(i, "ffn_norm"), d);
        push_ffn(&mut out, &dec_layer(i, "ffn"), d, cfg.d_ffn);
    }
    push_norm(&mut out, "decoder.final_norm", d);
    out.push(("decoder.output.weight".to_string(), vec![cfg.tgt_vocab, d]));
    out.push(("decoder.output.bias".to_string(), vec![cfg.tgt_vocab]));

    out.push(("mlm.transform.weight".to_string(), vec![d, d]));
    out.push(("mlm.transform.bias".to_string(), vec![d]));
    push_norm(&mut out, "mlm.norm", d);
    out.push(("mlm.output.bias".to_string(), vec![cfg.src_vocab]));
    out
}

/// Named parameter tensors in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let tensors = shape_table(cfg)
            .into_iter()
            .map(|(name, shape)| (name, Tensor::zeros(shape)))
            .collect();
        ModelParams { tensors }
    }

    /// Random initialization: Xavier-uniform for projections, uniform with
    /// standard deviation `d_model^-0.5` for embedding tables, ones for
    /// layer-norm gains and zeros for biases.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let emb_bound = 3f64.sqrt() / (cfg.d_model as f64).sqrt();
        let tensors = shape_table(cfg)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".gain") {
                    Tensor::full(shape, T::one())
                } else if name.ends_with(".bias") {
                    Tensor::zeros(shape)
                } else if name.contains(".embed.") {
                    Tensor::from_fn(shape, |_| lit(rng.gen_range(-emb_bound..emb_bound)))
                } else {
                    let (fan_in, fan_out) = (shape[0], shape[1]);
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Tensor::from_fn(shape, |_| lit(rng.gen_range(-bound..bound)))
                };
                (name, t)
            })
            .collect();
        ModelParams { tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.get_index_of(name)
    }

    pub fn by_index(&self, i: usize) -> (&str, &Tensor<T>) {
        let (k, v) = self.tensors.get_index(i).expect("parameter index in range");
        (k.as_str(), v)
    }

    pub fn by_index_mut(&mut self, i: usize) -> (&str, &mut Tensor<T>) {
        let (k, v) = self.tensors.get_index_mut(i).expect("parameter index in range");
        (k.as_str(), v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("no parameter named {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{name}: expected {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Rebuilds from named tensors, checking names and shapes against `cfg`.
    pub fn from_named(cfg: &ModelConfig, mut named: IndexMap<String, Tensor<T>>) -> Result<Self> {
        let mut tensors = IndexMap::new();
        for (name, shape) in shape_table(cfg) {
            let t = named
                .shift_remove(&name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::CheckpointMismatch(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
            tensors.insert(name, t);
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::CheckpointMismatch(format!("unexpected tensor {extra}")));
        }
        Ok(ModelParams { tensors })
    }

    pub fn into_named(self) -> IndexMap<String, Tensor<T>> {
        self.tensors
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}
