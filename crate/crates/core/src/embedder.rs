//! Self-attentive embedder: token embeddings, a shared BiLSTM, and label
//! attention producing the intent-aware and slot-aware features `H_I`, `H_S`.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{xavier_uniform, Graph, Matrix, NodeId, ParamStore};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

pub const TOKEN_EMBEDDING: &str = "embedder.tokens";
pub const PROJ_WEIGHT: &str = "embedder.proj.W";
pub const PROJ_BIAS: &str = "embedder.proj.b";
pub const INTENT_LABELS: &str = "embedder.intent_labels";
pub const SLOT_LABELS: &str = "embedder.slot_labels";

/// Token inventory with `<pad>` at 0 and `<unk>` at 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.add(PAD);
        v.add(UNK);
        v
    }

    /// Builds a vocabulary in first-seen order.
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::new();
        for t in tokens {
            v.add(t);
        }
        v
    }

    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK_ID)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(PAD) || tokens.get(1).map(String::as_str) != Some(UNK) {
            return Err(Error::Invalid(format!("vocabulary must start with {PAD} and {UNK}")));
        }
        let mut v = Self::new();
        for t in &tokens[2..] {
            if v.get(t).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token `{t}`")));
            }
            v.add(t);
        }
        Ok(v)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

/// Sizes of the embedder parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedderDims {
    pub vocab: usize,
    pub embedding: usize,
    pub hidden: usize,
    pub intents: usize,
    pub slots: usize,
}

fn lstm_names(direction: &str) -> [String; 3] {
    [
        format!("embedder.lstm.{direction}.W_ih"),
        format!("embedder.lstm.{direction}.W_hh"),
        format!("embedder.lstm.{direction}.b"),
    ]
}

/// Adds freshly initialized embedder parameters to `store`.
pub fn init_embedder<R: Rng + ?Sized>(store: &mut ParamStore, dims: EmbedderDims, rng: &mut R) -> Result<()> {
    let h = dims.hidden;
    store.insert(TOKEN_EMBEDDING, xavier_uniform(dims.vocab, dims.embedding, rng))?;
    for dir in ["fwd", "bwd"] {
        let [w_ih, w_hh, b] = lstm_names(dir);
        store.insert(w_ih, xavier_uniform(dims.embedding, 4 * h, rng))?;
        store.insert(w_hh, xavier_uniform(h, 4 * h, rng))?;
        store.insert(b, Matrix::zeros(1, 4 * h))?;
    }
    store.insert(PROJ_WEIGHT, xavier_uniform(2 * h, h, rng))?;
    store.insert(PROJ_BIAS, Matrix::zeros(1, h))?;
    store.insert(INTENT_LABELS, xavier_uniform(dims.intents, h, rng))?;
    store.insert(SLOT_LABELS, xavier_uniform(dims.slots, h, rng))?;
    Ok(())
}

/// One LSTM direction. Gate columns are laid out `[input | forget | cell | output]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    pub w_ih: NodeId,
    pub w_hh: NodeId,
    pub bias: NodeId,
}

impl LstmWeights {
    pub fn load(g: &mut Graph, store: &ParamStore, direction: &str) -> Result<Self> {
        let [w_ih, w_hh, b] = lstm_names(direction);
        Ok(Self {
            w_ih: g.param(store, &w_ih)?,
            w_hh: g.param(store, &w_hh)?,
            bias: g.param(store, &b)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EmbedderWeights {
    pub tokens: NodeId,
    pub forward: LstmWeights,
    pub backward: LstmWeights,
    pub proj_w: NodeId,
    pub proj_b: NodeId,
    pub intent_labels: NodeId,
    pub slot_labels: NodeId,
}

impl EmbedderWeights {
    pub fn load(g: &mut Graph, store: &ParamStore) -> Result<Self> {
        Ok(Self {
            tokens: g.param(store, TOKEN_EMBEDDING)?,
            forward: LstmWeights::load(g, store, "fwd")?,
            backward: LstmWeights::load(g, store, "bwd")?,
            proj_w: g.param(store, PROJ_WEIGHT)?,
            proj_b: g.param(store, PROJ_BIAS)?,
            intent_labels: g.param(store, INTENT_LABELS)?,
            slot_labels: g.param(store, SLOT_LABELS)?,
        })
    }
}

/// Embedding lookup, one row per token id.
pub fn embed_tokens(g: &mut Graph, table: NodeId, ids: &[usize]) -> Result<NodeId> {
    g.gather_rows(table, ids)
}

/// Hidden states of one LSTM direction, returned in input order.
///
/// With `reverse` the recurrence runs from the last position to the first.
pub fn lstm_states(g: &mut Graph, x: NodeId, w: &LstmWeights, reverse: bool) -> Result<NodeId> {
    let n = g.shape(x).0;
    let h = g.shape(w.w_hh).0;
    if n == 0 {
        return Err(Error::shape("lstm", "at least one position", "0 rows"));
    }
    let projected = g.matmul(x, w.w_ih)?;
    let projected = g.add_row(projected, w.bias)?;

    let mut states: Vec<Option<NodeId>> = vec![None; n];
    let mut prev: Option<(NodeId, NodeId)> = None;
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for t in order {
        let mut gates = g.row(projected, t)?;
        if let Some((h_prev, _)) = prev {
            let recurrent = g.matmul(h_prev, w.w_hh)?;
            gates = g.add(gates, recurrent)?;
        }
        let i = g.slice_cols(gates, 0, h)?;
        let i = g.sigmoid(i)?;
        let f = g.slice_cols(gates, h, h)?;
        let f = g.sigmoid(f)?;
        let cand = g.slice_cols(gates, 2 * h, h)?;
        let cand = g.tanh(cand)?;
        let o = g.slice_cols(gates, 3 * h, h)?;
        let o = g.sigmoid(o)?;

        let mut cell = g.hadamard(i, cand)?;
        if let Some((_, c_prev)) = prev {
            let kept = g.hadamard(f, c_prev)?;
            cell = g.add(kept, cell)?;
        }
        let squashed = g.tanh(cell)?;
        let hidden = g.hadamard(o, squashed)?;
        states[t] = Some(hidden);
        prev = Some((hidden, cell));
    }
    let states: Vec<NodeId> = states.into_iter().map(|s| s.expect("every step visited")).collect();
    g.concat_rows(&states)
}

/// `[forward ; backward]` hidden states, `n x 2h`.
pub fn bilstm_states(g: &mut Graph, x: NodeId, forward: &LstmWeights, backward: &LstmWeights) -> Result<NodeId> {
    let f = lstm_states(g, x, forward, false)?;
    let b = lstm_states(g, x, backward, true)?;
    g.concat_cols(&[f, b])
}

/// BiLSTM states projected back to the hidden size: `H`, `n x d`.
pub fn bilstm(g: &mut Graph, x: NodeId, w: &EmbedderWeights) -> Result<NodeId> {
    let states = bilstm_states(g, x, &w.forward, &w.backward)?;
    let h = g.matmul(states, w.proj_w)?;
    g.add_row(h, w.proj_b)
}

/// Scaled dot-product attention from hidden states onto label embeddings.
///
/// Returns `(softmax(H Lᵀ / √d) L, attention weights)`.
pub fn label_attention(g: &mut Graph, hidden: NodeId, labels: NodeId) -> Result<(NodeId, NodeId)> {
    let d = g.shape(hidden).1;
    let scores = g.matmul_nt(hidden, labels)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    let weights = g.softmax_rows(scores)?;
    let out = g.matmul(weights, labels)?;
    Ok((out, weights))
}

#[derive(Debug, Clone, Copy)]
pub struct EmbedderOutput {
    pub hidden: NodeId,
    pub intent: NodeId,
    pub slot: NodeId,
    pub intent_attention: NodeId,
    pub slot_attention: NodeId,
}

/// Runs the embedder. With `residual` the label-attended features are added
/// to the BiLSTM states (`H + A L`); otherwise they are used alone (`A L`).
pub fn embed(g: &mut Graph, w: &EmbedderWeights, ids: &[usize], residual: bool) -> Result<EmbedderOutput> {
    let x = embed_tokens(g, w.tokens, ids)?;
    let hidden = bilstm(g, x, w)?;
    let (mut intent, intent_attention) = label_attention(g, hidden, w.intent_labels)?;
    let (mut slot, slot_attention) = label_attention(g, hidden, w.slot_labels)?;
    if residual {
        intent = g.add(hidden, intent)?;
        slot = g.add(hidden, slot)?;
    }
    Ok(EmbedderOutput {
        hidden,
        intent,
        slot,
        intent_attention,
        slot_attention,
    })
}

/// Pretrained vectors read from a `token v1 v2 ...` text file.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVectors {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

impl WordVectors {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut dim = None;
        let mut vectors = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    path: source.to_string(),
                    line: lineno + 1,
                    msg: format!("bad vector component: {e}"),
                })?;
            let expected = *dim.get_or_insert(values.len());
            if values.len() != expected || expected == 0 || values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: lineno + 1,
                    msg: format!("expected {expected} finite components, got {}", values.len()),
                });
            }
            vectors.insert(token.to_string(), values);
        }
        Ok(Self {
            dim: dim.unwrap_or(0),
            vectors,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Overwrites embedding rows of tokens present in both `vocab` and the file.
    /// Returns the number of rows replaced.
    pub fn apply(&self, store: &mut ParamStore, vocab: &Vocab) -> Result<usize> {
        let table = store.param_mut(TOKEN_EMBEDDING)?;
        if self.dim != table.value.cols() && !self.vectors.is_empty() {
            return Err(Error::shape(
                "word vectors",
                format!("dimension {}", table.value.cols()),
                format!("dimension {}", self.dim),
            ));
        }
        let mut replaced = 0;
        for (id, token) in vocab.tokens().iter().enumerate() {
            if let Some(v) = self.vectors.get(token) {
                table.value.row_mut(id).copy_from_slice(v);
                replaced += 1;
            }
        }
        Ok(replaced)
    }
}
