use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ForwardCtx, Init, ParamStore};
use crate::autograd::{ParamId, Var};
use crate::error::{arg_err, dim_err, Result};
use crate::tensor::Scalar;

pub const PAD_ID: u32 = 0;
pub const OOV_ID: u32 = 1;

/// Maps strings to fixed-length integer id sequences over a fitted
/// vocabulary. Ids 0 and 1 are reserved for padding and unknown tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VectorizerRepr", into = "VectorizerRepr")]
pub struct Vectorizer {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    max_tokens: usize,
}

#[derive(Serialize, Deserialize)]
struct VectorizerRepr {
    max_tokens: usize,
    tokens: Vec<String>,
}

impl From<VectorizerRepr> for Vectorizer {
    fn from(r: VectorizerRepr) -> Self {
        Vectorizer::from_tokens(r.tokens, r.max_tokens)
    }
}

impl From<Vectorizer> for VectorizerRepr {
    fn from(v: Vectorizer) -> Self {
        VectorizerRepr {
            max_tokens: v.max_tokens,
            tokens: v.tokens,
        }
    }
}

/// Lowercases, drops every character that is neither alphanumeric nor
/// whitespace, and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

impl Vectorizer {
    /// Keeps the `max_vocab − 2` most frequent tokens; ids follow descending
    /// frequency, ties broken lexicographically.
    pub fn fit<S: AsRef<str>>(corpus: &[S], max_vocab: usize, max_tokens: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(arg_err!("cannot fit a vocabulary on an empty corpus"));
        }
        if max_vocab < 2 {
            return Err(arg_err!("max_vocab must leave room for pad and OOV ids"));
        }
        if max_tokens == 0 {
            return Err(arg_err!("max_tokens must be positive"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for doc in corpus {
            for tok in tokenize(doc.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));
        ranked.truncate(max_vocab - 2);
        Ok(Vectorizer::from_tokens(
            ranked.into_iter().map(|(t, _)| t).collect(),
            max_tokens,
        ))
    }

    fn from_tokens(tokens: Vec<String>, max_tokens: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32 + 2))
            .collect();
        Vectorizer {
            tokens,
            index,
            max_tokens,
        }
    }

    /// Number of ids including pad and OOV.
    pub fn vocab_size(&self) -> usize {
        self.tokens.len() + 2
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Kept tokens in id order, starting at id 2.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Token ids right-padded with [`PAD_ID`] and truncated to `max_tokens`.
    pub fn vectorize(&self, text: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = tokenize(text)
            .iter()
            .take(self.max_tokens)
            .map(|t| self.id(t).unwrap_or(OOV_ID))
            .collect();
        ids.resize(self.max_tokens, PAD_ID);
        ids
    }

    pub fn vectorize_batch<S: AsRef<str>>(&self, texts: &[S]) -> TokenBatch {
        let ids = texts
            .iter()
            .flat_map(|t| self.vectorize(t.as_ref()))
            .map(|i| i as usize)
            .collect();
        TokenBatch {
            rows: texts.len(),
            len: self.max_tokens,
            ids,
        }
    }
}

/// `rows × len` matrix of token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub rows: usize,
    pub len: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(rows: usize, len: usize, ids: Vec<usize>) -> Result<Self> {
        if rows * len != ids.len() || rows == 0 || len == 0 {
            return Err(dim_err!("{} ids do not form a {rows}×{len} batch", ids.len()));
        }
        Ok(TokenBatch { rows, len, ids })
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.len..(r + 1) * self.len]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab_size: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let table = store.add_param(
            format!("{name}.table"),
            Init::Normal { std: 0.05 }.tensor(&[vocab_size, dim], rng),
        );
        EmbeddingTable { table, vocab_size, dim }
    }

    pub fn param_count(&self) -> usize {
        self.vocab_size * self.dim
    }
}

/// Looks up `ids` and averages over the sequence axis. Padding positions
/// take part in the average.
///
/// Returns `(sequence B×L×E, pooled B×E)`.
pub fn embed_and_pool<T: Scalar>(
    ctx: &mut ForwardCtx<'_, T>,
    table: &EmbeddingTable,
    ids: &TokenBatch,
) -> Result<(Var, Var)> {
    let t = ctx.param(table.table);
    let seq = ctx.tape.gather_rows(t, &ids.ids, &[ids.rows, ids.len])?;
    let pooled = ctx.tape.mean(seq, &[1])?;
    Ok((seq, pooled))
}
