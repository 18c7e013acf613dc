//! Query text to sentence capsules: embedding lookup, three parallel 1-D
//! convolutions, max-pooling and a fully connected capsule head.

use std::collections::BTreeMap;

use rand::Rng;

use crate::capsule::POSE_DIM;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{randn, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Queries are truncated or padded to this many tokens.
pub const MAX_TOKENS: usize = 16;
pub const PAD_INDEX: usize = 0;
pub const OOV_INDEX: usize = 1;
/// Indices below this are reserved (padding, out-of-vocabulary).
pub const RESERVED: usize = 2;

/// Closed token set. Index of the token on line `i` of the serialized form
/// is `i + RESERVED`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from any token stream; order and duplicates do not matter.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut sorted: Vec<String> = tokens.into_iter().map(|t| t.as_ref().to_lowercase()).collect();
        sorted.sort();
        sorted.dedup();
        let index = sorted.iter().enumerate().map(|(i, t)| (t.clone(), i + RESERVED)).collect();
        Vocabulary { tokens: sorted, index }
    }

    /// Total index range including reserved entries.
    pub fn size(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn index_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(OOV_INDEX)
    }

    /// One token per line, sorted.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        if tokens.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format("vocabulary file must be sorted and unique".into()));
        }
        Ok(Self::from_tokens(tokens))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    pub indices: [usize; MAX_TOKENS],
    /// Real tokens before padding.
    pub length: usize,
}

/// Lowercases, splits on whitespace, maps to indices and pads/truncates to
/// [`MAX_TOKENS`].
pub fn tokenize_and_pad(query: &str, vocab: &Vocabulary) -> TokenSeq {
    let mut indices = [PAD_INDEX; MAX_TOKENS];
    let mut length = 0;
    for (slot, tok) in indices.iter_mut().zip(query.split_whitespace()) {
        *slot = vocab.index_of(&tok.to_lowercase());
        length += 1;
    }
    TokenSeq { indices, length }
}

/// Sentence capsules bound to a graph: poses `[m, 4, 4]`, activations `[m]`.
#[derive(Clone, Copy, Debug)]
pub struct SentenceCapsules {
    pub poses: Var,
    pub activations: Var,
    pub types: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceEncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub branch_channels: usize,
    pub kernel_sizes: Vec<usize>,
    pub capsule_types: usize,
}

impl SentenceEncoderConfig {
    pub fn desk(vocab_size: usize) -> Self {
        SentenceEncoderConfig {
            vocab_size,
            embed_dim: 32,
            branch_channels: 64,
            kernel_sizes: vec![2, 3, 4],
            capsule_types: 8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SentenceEncoder {
    pub config: SentenceEncoderConfig,
    pub table: ParamId,
    branches: Vec<(ParamId, ParamId)>,
    pose_w: ParamId,
    pose_b: ParamId,
    act_w: ParamId,
    act_b: ParamId,
}

/// Pooled sentence vector `[C]` plus the capsules derived from it.
#[derive(Clone, Copy, Debug)]
pub struct EncodedSentence {
    pub vector: Var,
    pub capsules: SentenceCapsules,
}

impl SentenceEncoder {
    pub fn new<F: Real>(store: &mut ParamStore<F>, config: SentenceEncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = config.embed_dim;
        let c = config.branch_channels;
        let table = store.add("sentence.embedding", randn(rng, &[config.vocab_size, d], 1.0))?;
        let mut branches = Vec::new();
        for &k in &config.kernel_sizes {
            let w = store.add(format!("sentence.conv{k}.w"), randn(rng, &[c, d, k], (2.0 / (d * k) as f64).sqrt()))?;
            let b = store.add(format!("sentence.conv{k}.b"), Tensor::zeros(&[c]))?;
            branches.push((w, b));
        }
        let m = config.capsule_types;
        let std = (1.0 / c as f64).sqrt();
        let pose_w = store.add("sentence.pose_w", randn(rng, &[m * POSE_DIM, c], std))?;
        let pose_b = store.add("sentence.pose_b", Tensor::zeros(&[m * POSE_DIM]))?;
        let act_w = store.add("sentence.act_w", randn(rng, &[m, c], std))?;
        let act_b = store.add("sentence.act_b", Tensor::zeros(&[m]))?;
        Ok(SentenceEncoder { config, table, branches, pose_w, pose_b, act_w, act_b })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, tokens: &TokenSeq) -> Result<EncodedSentence> {
        let table = g.param(store, self.table);
        let emb = embed(g, tokens, table)?;
        self.encode(g, store, emb, tokens.length)
    }

    /// Encodes `emb: [16, D]` whose first `length` rows are real tokens.
    pub fn encode<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, emb: Var, length: usize) -> Result<EncodedSentence> {
        let branches: Vec<(Var, Var)> =
            self.branches.iter().map(|&(w, b)| (g.param(store, w), g.param(store, b))).collect();
        let head = [
            g.param(store, self.pose_w),
            g.param(store, self.pose_b),
            g.param(store, self.act_w),
            g.param(store, self.act_b),
        ];
        encode_sentence(g, emb, length, &branches, head)
    }
}

/// Embedding rows for every position, padding included: `[16, D]`.
pub fn embed<F: Real>(g: &mut Graph<F>, tokens: &TokenSeq, table: Var) -> Result<Var> {
    g.gather_rows(table, &tokens.indices)
}

/// Sentence network body.
///
/// Each branch `(w: [C, D, k], b: [C])` is a ReLU 1-D convolution max-pooled
/// over the window positions lying entirely inside the first `length` tokens
/// (a branch with no such window pools to zero). The three branch vectors are
/// max-pooled across branches into one `[C]` vector, from which a fully
/// connected head produces `m` poses (linear) and activations (sigmoid).
/// `head` is `[pose_w, pose_b, act_w, act_b]`.
pub fn encode_sentence<F: Real>(
    g: &mut Graph<F>,
    emb: Var,
    length: usize,
    branches: &[(Var, Var)],
    head: [Var; 4],
) -> Result<EncodedSentence> {
    let shape = g.shape(emb).to_vec();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!("sentence embedding must be [L, D], got {shape:?}")));
    }
    let length = length.min(shape[0]);
    let x = g.permute(emb, &[1, 0])?; // [D, L]
    let mut pooled = Vec::with_capacity(branches.len());
    for &(w, b) in branches {
        let k = g.shape(w)[2];
        let c = g.shape(w)[0];
        let y = g.conv1d(x, w, Some(b))?;
        let y = g.relu(y);
        let v = if length >= k {
            let valid = g.slice(y, 1, 0, length - k + 1)?;
            g.max_axis(valid, 1)?
        } else {
            g.constant(Tensor::zeros(&[c, 1]))
        };
        pooled.push(v);
    }
    let stacked = g.concat(&pooled, 1)?; // [C, branches]
    let vector = g.max_axis(stacked, 1)?;
    let c = g.shape(vector)[0];
    let vector = g.reshape(vector, &[c])?;
    let row = g.reshape(vector, &[1, c])?;
    let [pose_w, pose_b, act_w, act_b] = head;
    let types = g.shape(act_w)[0];
    let poses = g.linear(row, pose_w, Some(pose_b))?;
    let poses = g.reshape(poses, &[types, 4, 4])?;
    let acts = g.linear(row, act_w, Some(act_b))?;
    let acts = g.sigmoid(acts);
    let acts = g.reshape(acts, &[types])?;
    Ok(EncodedSentence { vector, capsules: SentenceCapsules { poses, activations: acts, types } })
}
