//! Builds the encoder input from preceding-sentence context and the current
//! source sentence: `[context…] [SEP] [source…]`, with segment ids, position
//! ids and the cross-attention context mask.

use crate::corpus::SEP;
use crate::error::{Error, Result};

/// Default window, in token positions including the separator.
pub const DEFAULT_LIMIT: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum PositionMode {
    /// Positions run left to right over the whole window.
    #[default]
    Sequential,
    /// The source takes positions `0..n` first, then `[SEP]`, then context.
    Reversed,
}

impl std::str::FromStr for PositionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(PositionMode::Sequential),
            "reversed" => Ok(PositionMode::Reversed),
            _ => Err(Error::Config(format!("unknown position mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for PositionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PositionMode::Sequential => "sequential",
            PositionMode::Reversed => "reversed",
        })
    }
}

/// How much preceding context a sentence sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ContextPolicy {
    #[default]
    None,
    /// Only the immediately previous sentence.
    Small,
    /// Every preceding sentence of the document, cut to the window.
    Large,
}

impl ContextPolicy {
    /// Context sentences for sentence `index` of a document.
    pub fn select<S>(self, sentences: &[S], index: usize) -> &[S] {
        match self {
            ContextPolicy::None => &sentences[..0],
            ContextPolicy::Small => &sentences[index.saturating_sub(1)..index],
            ContextPolicy::Large => &sentences[..index],
        }
    }
}

impl std::str::FromStr for ContextPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ContextPolicy::None),
            "small" => Ok(ContextPolicy::Small),
            "large" => Ok(ContextPolicy::Large),
            _ => Err(Error::Config(format!("unknown context policy {s:?}"))),
        }
    }
}

impl std::fmt::Display for ContextPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ContextPolicy::None => "none",
            ContextPolicy::Small => "small",
            ContextPolicy::Large => "large",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtendedInput {
    pub token_ids: Vec<usize>,
    /// 0 for context and `[SEP]`, 1 for the source sentence.
    pub segment_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    /// `[start, end)` of the source tokens.
    pub source_span: (usize, usize),
    /// `true` where the decoder must not attend.
    pub context_mask: Vec<bool>,
}

impl ExtendedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn source_len(&self) -> usize {
        self.source_span.1 - self.source_span.0
    }

    pub fn source_tokens(&self) -> &[usize] {
        &self.token_ids[self.source_span.0..self.source_span.1]
    }

    pub fn context_len(&self) -> usize {
        self.len() - self.source_len()
    }
}

/// Concatenates `context` (oldest first) and `source` into one window of at
/// most `limit` positions, dropping the oldest context tokens when needed.
pub fn assemble<S: AsRef<[usize]>>(
    context: &[S],
    source: &[usize],
    limit: usize,
    mode: PositionMode,
) -> Result<ExtendedInput> {
    if source.is_empty() {
        return Err(Error::EmptySource);
    }
    if source.len() > limit {
        return Err(Error::SourceTooLong { len: source.len(), limit });
    }
    let flat: Vec<usize> = context.iter().flat_map(|s| s.as_ref().iter().copied()).collect();
    // Room left for context once the source and the separator are placed.
    let room = limit - source.len();
    let kept: &[usize] = if room == 0 || flat.is_empty() {
        &[]
    } else {
        let keep = flat.len().min(room - 1);
        &flat[flat.len() - keep..]
    };

    let ctx_len = if kept.is_empty() { 0 } else { kept.len() + 1 };
    let total = ctx_len + source.len();
    let mut token_ids = Vec::with_capacity(total);
    if !kept.is_empty() {
        token_ids.extend_from_slice(kept);
        token_ids.push(SEP);
    }
    token_ids.extend_from_slice(source);

    let segment_ids = (0..total).map(|i| usize::from(i >= ctx_len)).collect();
    let context_mask = (0..total).map(|i| i < ctx_len).collect();
    let position_ids = match mode {
        PositionMode::Sequential => (0..total).collect(),
        PositionMode::Reversed => {
            // Source 0..n, then [SEP] at n, then the context continuing left to right.
            let n = source.len();
            let mut pos = Vec::with_capacity(total);
            pos.extend((0..kept.len()).map(|i| n + 1 + i));
            if ctx_len > 0 {
                pos.push(n);
            }
            pos.extend(0..n);
            pos
        }
    };
    Ok(ExtendedInput {
        token_ids,
        segment_ids,
        position_ids,
        source_span: (ctx_len, total),
        context_mask,
    })
}

/// The decoder-side mask over encoder positions.
pub fn cross_attention_mask(x: &ExtendedInput) -> Vec<bool> {
    x.context_mask.clone()
}
