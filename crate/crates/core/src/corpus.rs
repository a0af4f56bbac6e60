//! Document-aware corpus reading and vocabularies.
//!
//! Corpus files hold one whitespace-tokenized sentence per line; a blank line
//! ends a document. Parallel corpora are two files with identical document
//! and sentence layout.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SEP: usize = 4;
pub const MASK: usize = 5;

/// Reserved tokens, in id order.
pub const SPECIAL_TOKENS: [&str; 6] = ["[PAD]", "[UNK]", "[BOS]", "[EOS]", "[SEP]", "[MASK]"];
pub const NUM_SPECIALS: usize = SPECIAL_TOKENS.len();

pub type Sentence = Vec<String>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: usize,
    pub sentences: Vec<Sentence>,
    /// Aligned target sentences, when read from a parallel corpus.
    pub targets: Option<Vec<Sentence>>,
}

/// Splits corpus text into documents at blank lines.
pub fn parse_documents(text: &str) -> Vec<Document> {
    let mut docs = Vec::new();
    let mut current: Vec<Sentence> = Vec::new();
    for line in text.lines() {
        let tokens: Sentence = line.split_whitespace().map(str::to_owned).collect();
        if tokens.is_empty() {
            if !current.is_empty() {
                docs.push(Document {
                    id: docs.len(),
                    sentences: std::mem::take(&mut current),
                    targets: None,
                });
            }
        } else {
            current.push(tokens);
        }
    }
    if !current.is_empty() {
        docs.push(Document { id: docs.len(), sentences: current, targets: None });
    }
    docs
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_documents(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let docs = parse_documents(&read_text(path.as_ref())?);
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(docs)
}

/// Pairs two document lists sentence by sentence.
pub fn align(sources: Vec<Document>, targets: Vec<Document>) -> Result<Vec<Document>> {
    if sources.len() != targets.len() {
        return Err(Error::AlignmentMismatch(format!(
            "{} source documents vs {} target documents",
            sources.len(),
            targets.len()
        )));
    }
    sources
        .into_iter()
        .zip(targets)
        .map(|(mut src, tgt)| {
            if src.sentences.len() != tgt.sentences.len() {
                return Err(Error::AlignmentMismatch(format!(
                    "document {} has {} source and {} target sentences",
                    src.id,
                    src.sentences.len(),
                    tgt.sentences.len()
                )));
            }
            src.targets = Some(tgt.sentences);
            Ok(src)
        })
        .collect()
}

pub fn load_parallel(src: impl AsRef<Path>, tgt: impl AsRef<Path>) -> Result<Vec<Document>> {
    let sources = load_documents(src)?;
    let targets = match load_documents(tgt.as_ref()) {
        Err(Error::Io { path, source }) if source.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::AlignmentMismatch(format!(
                "target file {} does not exist",
                path.display()
            )))
        }
        other => other?,
    };
    align(sources, targets)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// A vocabulary holding only the reserved tokens.
    pub fn specials_only() -> Self {
        Self::from_tokens(Vec::new()).expect("specials are distinct")
    }

    /// Builds from non-special tokens, which receive ids from 6 upward.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut all: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidData(format!("token {t:?} listed twice")));
            }
        }
        Ok(Vocab { tokens: all, index })
    }

    /// Frequency-ranked vocabulary; ties break lexicographically. Tokens seen
    /// fewer than `min_count` times are dropped, and the result never exceeds
    /// `max_size` entries including the six specials.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>, max_size: usize, min_count: usize) -> Self {
        assert!(max_size > NUM_SPECIALS, "max_size must leave room beyond the specials");
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in tokens {
            if !SPECIAL_TOKENS.contains(&t) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> =
            counts.into_iter().filter(|&(_, c)| c >= min_count.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - NUM_SPECIALS);
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t.to_owned()).collect())
            .expect("counted tokens are distinct")
    }

    pub fn build_source(docs: &[Document], max_size: usize, min_count: usize) -> Self {
        let toks = docs.iter().flat_map(|d| d.sentences.iter().flatten().map(String::as_str));
        Self::build(toks, max_size, min_count)
    }

    pub fn build_target(docs: &[Document], max_size: usize, min_count: usize) -> Self {
        let toks = docs
            .iter()
            .filter_map(|d| d.targets.as_ref())
            .flat_map(|s| s.iter().flatten().map(String::as_str));
        Self::build(toks, max_size, min_count)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::UnknownId { id, size: self.tokens.len() })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter().map(|&id| self.token(id).map(str::to_owned)).collect()
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < NUM_SPECIALS || lines[..NUM_SPECIALS] != SPECIAL_TOKENS {
            return Err(Error::InvalidData(
                "vocabulary must start with the six reserved tokens".into(),
            ));
        }
        Self::from_tokens(lines[NUM_SPECIALS..].iter().map(|s| s.to_string()).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&read_text(path.as_ref())?)
    }
}

/// Source and target ids per sentence, document by document.
pub type EncodedDocument = Vec<(Vec<usize>, Vec<usize>)>;

/// Maps parallel documents to ids; documents without targets get empty ones.
pub fn encode_parallel(docs: &[Document], src: &Vocab, tgt: &Vocab) -> Vec<EncodedDocument> {
    docs.iter()
        .map(|d| {
            d.sentences
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let t = d.targets.as_ref().map(|t| tgt.encode(&t[i])).unwrap_or_default();
                    (src.encode(s), t)
                })
                .collect()
        })
        .collect()
}

pub const BINARY_MAGIC: &[u8; 4] = b"DNB1";
pub const DOCUMENT_MARKER: u8 = b'D';
pub const SENTENCE_MARKER: u8 = b'S';

/// Serializes encoded documents.
///
/// After the `DNB1` magic, each document is a `D` byte and a `u32` sentence
/// count, and each sentence an `S` byte followed by the source and target
/// id lists, each a `u32` length and `u32` ids. Integers are little-endian.
pub fn write_binarized(docs: &[EncodedDocument]) -> Vec<u8> {
    let mut out = BINARY_MAGIC.to_vec();
    let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    for doc in docs {
        out.push(DOCUMENT_MARKER);
        put(&mut out, doc.len());
        for (src, tgt) in doc {
            out.push(SENTENCE_MARKER);
            for ids in [src, tgt] {
                put(&mut out, ids.len());
                ids.iter().for_each(|&id| put(&mut out, id));
            }
        }
    }
    out
}

pub fn read_binarized(bytes: &[u8]) -> Result<Vec<EncodedDocument>> {
    let bad = |what: &str| Error::InvalidData(format!("binarized corpus: {what}"));
    if bytes.get(..4) != Some(BINARY_MAGIC.as_slice()) {
        return Err(Error::BadMagic { expected: "DNB1" });
    }
    let mut pos = 4;
    let byte = |pos: &mut usize| -> Result<u8> {
        let b = *bytes.get(*pos).ok_or(Error::TruncatedFile("binarized corpus"))?;
        *pos += 1;
        Ok(b)
    };
    let word = |pos: &mut usize| -> Result<usize> {
        let w = bytes.get(*pos..*pos + 4).ok_or(Error::TruncatedFile("binarized corpus"))?;
        *pos += 4;
        Ok(u32::from_le_bytes(w.try_into().expect("four bytes")) as usize)
    };
    let mut docs = Vec::new();
    while pos < bytes.len() {
        if byte(&mut pos)? != DOCUMENT_MARKER {
            return Err(bad("expected a document marker"));
        }
        let n = word(&mut pos)?;
        let mut doc = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            if byte(&mut pos)? != SENTENCE_MARKER {
                return Err(bad("expected a sentence marker"));
            }
            let mut pair: [Vec<usize>; 2] = Default::default();
            for side in &mut pair {
                let len = word(&mut pos)?;
                *side = (0..len).map(|_| word(&mut pos)).collect::<Result<_>>()?;
            }
            let [src, tgt] = pair;
            doc.push((src, tgt));
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn save_binarized(path: impl AsRef<Path>, docs: &[EncodedDocument]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_binarized(docs)).map_err(|e| Error::io(path, e))
}

pub fn load_binarized(path: impl AsRef<Path>) -> Result<Vec<EncodedDocument>> {
    let path = path.as_ref();
    read_binarized(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
