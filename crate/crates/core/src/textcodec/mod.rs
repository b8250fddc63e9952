//! Word-level tokenization, vocabulary construction and fixed-width
//! instruction encoding.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::numerics::{Tensor, MASK_NEG};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<cls>", "<eos>", "<unk>"];
/// Encoded width: 40 content tokens plus CLS and EOS.
pub const MAX_INSTR: usize = 42;
pub const MAX_CONTENT: usize = MAX_INSTR - 2;

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("unknown token id {0}")]
    UnknownId(usize),
    #[error("vocabulary file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Lowercases and splits on whitespace and punctuation. Apostrophes stay
/// inside words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// The token sequence joined by single spaces.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Tokens with at least `min_count` occurrences, ordered by descending
    /// frequency then lexicographically, after the four reserved ids.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in corpus {
            for tok in tokenize(text.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str, CodecError> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(CodecError::UnknownId(id))
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> EncodedInstruction {
        let mut ids = Vec::with_capacity(MAX_INSTR);
        ids.push(CLS);
        ids.extend(tokenize(text).iter().take(MAX_CONTENT).map(|t| self.id(t)));
        ids.push(EOS);
        let length = ids.len();
        ids.resize(MAX_INSTR, PAD);
        EncodedInstruction { ids, length }
    }

    /// Drops PAD, CLS and EOS and joins the rest with single spaces. UNK
    /// renders as `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> Result<String, CodecError> {
        let mut words = Vec::new();
        for &id in ids {
            let tok = self.token(id)?;
            if !matches!(id, PAD | CLS | EOS) {
                words.push(tok);
            }
        }
        Ok(words.join(" "))
    }

    /// `{"token": id, ...}`, sorted by id.
    pub fn to_json(&self) -> String {
        let entries: Vec<String> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{}:{i}", serde_json::Value::String(t.clone())))
            .collect();
        format!("{{{}}}", entries.join(","))
    }

    pub fn from_json(text: &str) -> Result<Self, CodecError> {
        let map: HashMap<String, usize> = serde_json::from_str(text)?;
        let mut tokens = vec![None; map.len()];
        for (tok, id) in map {
            let slot = tokens
                .get_mut(id)
                .ok_or_else(|| CodecError::Format(format!("id {id} leaves a gap")))?;
            *slot = Some(tok);
        }
        let tokens: Vec<String> = tokens
            .into_iter()
            .enumerate()
            .map(|(i, t)| t.ok_or_else(|| CodecError::Format(format!("id {i} missing"))))
            .collect::<Result<_, _>>()?;
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(CodecError::Format(format!("reserved id {i} must be {r}")));
            }
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CodecError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CodecError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedInstruction {
    /// Exactly [`MAX_INSTR`] ids.
    pub ids: Vec<usize>,
    /// Real tokens including CLS and EOS.
    pub length: usize,
}

impl EncodedInstruction {
    /// Additive key mask: 0 on real tokens, [`MASK_NEG`] on PAD slots.
    pub fn attention_mask(&self) -> Vec<f64> {
        (0..self.ids.len())
            .map(|i| if i < self.length { 0.0 } else { MASK_NEG })
            .collect()
    }

    pub fn mask_row(&self) -> Tensor {
        Tensor::row(self.attention_mask()).expect("finite mask")
    }

    /// Content ids between CLS and EOS.
    /// Re-frames generated ids: anything before EOS after a leading CLS
    /// becomes content, truncated to the content budget.
    pub fn from_ids(generated: &[usize]) -> Self {
        let body = generated.strip_prefix(&[CLS]).unwrap_or(generated);
        let end = body.iter().position(|&i| i == EOS).unwrap_or(body.len());
        let mut ids = Vec::with_capacity(MAX_INSTR);
        ids.push(CLS);
        ids.extend(body[..end].iter().copied().filter(|&i| i != PAD && i != CLS).take(MAX_CONTENT));
        ids.push(EOS);
        let length = ids.len();
        ids.resize(MAX_INSTR, PAD);
        Self { ids, length }
    }

    pub fn content(&self) -> &[usize] {
        &self.ids[1..self.length - 1]
    }
}
