//! BiLinear attention block.
//!
//! For a query `q` and key/value rows `k_i`, `v_i` (all width `d`):
//!
//! ```text
//! B_i   = act(W_k k_i) ⊙ act(W_qk q)          low-rank bilinear pooling
//! B'_i  = ReLU(W_Bk B_i)
//! β^s   = softmax_i(W_b B'_i)                 contextual attention
//! β^c   = σ(W_e · mean_i B'_i)                channel attention (squeeze + excite)
//! Bv_i  = act(W_v v_i) ⊙ act(W_qv q)
//! v̂     = β^c ⊙ Σ_i β^s_i Bv_i
//! ```
//!
//! Weight matrices are stored in `W x` orientation (`d x d`, `W_b` is `1 x d`).
//! All queries are evaluated together: the pairwise maps are stacked into
//! `(n_q * n_kv) x d` matrices whose row `t * n_kv + i` belongs to query `t` and
//! key `i`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{xavier_uniform, Activation, Graph, Matrix, NodeId, ParamStore};

/// Activation applied inside the two bilinear poolings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PoolingActivation {
    Relu,
    #[default]
    Elu,
    Exp,
}

impl PoolingActivation {
    pub fn as_activation(self) -> Activation {
        match self {
            PoolingActivation::Relu => Activation::Relu,
            PoolingActivation::Elu => Activation::Elu,
            PoolingActivation::Exp => Activation::Exp,
        }
    }
}

impl std::str::FromStr for PoolingActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Self::Relu),
            "elu" => Ok(Self::Elu),
            "exp" => Ok(Self::Exp),
            other => Err(Error::Config(format!(
                "unknown pooling activation `{other}` (expected relu, elu or exp)"
            ))),
        }
    }
}

impl std::fmt::Display for PoolingActivation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.as_activation().fmt(f)
    }
}

/// How the channel descriptor is squeezed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    /// One `β^c` per query, averaged over that query's `B'` rows.
    #[default]
    PerQuery,
    /// A single `β^c` averaged over every query/key pair.
    Shared,
}

pub const BLOCK_PARAM_NAMES: [&str; 7] = ["W_k", "W_qk", "W_Bk", "W_b", "W_e", "W_v", "W_qv"];

/// Owned block weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub w_k: Matrix,
    pub w_qk: Matrix,
    pub w_bk: Matrix,
    pub w_b: Matrix,
    pub w_e: Matrix,
    pub w_v: Matrix,
    pub w_qv: Matrix,
    pub activation: PoolingActivation,
    pub channel: ChannelMode,
}

impl BlockParams {
    pub fn xavier<R: Rng + ?Sized>(d: usize, activation: PoolingActivation, rng: &mut R) -> Self {
        Self {
            w_k: xavier_uniform(d, d, rng),
            w_qk: xavier_uniform(d, d, rng),
            w_bk: xavier_uniform(d, d, rng),
            w_b: xavier_uniform(1, d, rng),
            w_e: xavier_uniform(d, d, rng),
            w_v: xavier_uniform(d, d, rng),
            w_qv: xavier_uniform(d, d, rng),
            activation,
            channel: ChannelMode::PerQuery,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_k.rows()
    }

    fn matrices(&self) -> [&Matrix; 7] {
        [&self.w_k, &self.w_qk, &self.w_bk, &self.w_b, &self.w_e, &self.w_v, &self.w_qv]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (name, m) in BLOCK_PARAM_NAMES.iter().zip(self.matrices()) {
            let expected = if *name == "W_b" { (1, d) } else { (d, d) };
            if m.shape() != expected {
                return Err(Error::shape(
                    "block params",
                    format!("{name} {}x{}", expected.0, expected.1),
                    format!("{}x{}", m.rows(), m.cols()),
                ));
            }
        }
        Ok(())
    }

    /// Stores the matrices as `<prefix>.W_k`, `<prefix>.W_qk`, ...
    pub fn insert_into(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        for (name, m) in BLOCK_PARAM_NAMES.iter().zip(self.matrices()) {
            store.insert(format!("{prefix}.{name}"), m.clone())?;
        }
        Ok(())
    }

    pub fn from_store(store: &ParamStore, prefix: &str, activation: PoolingActivation, channel: ChannelMode) -> Result<Self> {
        let get = |n: &str| store.get(&format!("{prefix}.{n}")).cloned();
        let params = Self {
            w_k: get("W_k")?,
            w_qk: get("W_qk")?,
            w_bk: get("W_Bk")?,
            w_b: get("W_b")?,
            w_e: get("W_e")?,
            w_v: get("W_v")?,
            w_qv: get("W_qv")?,
            activation,
            channel,
        };
        params.validate()?;
        Ok(params)
    }

    /// Loads the matrices into `g` as constants.
    pub fn to_graph(&self, g: &mut Graph) -> BlockWeights {
        BlockWeights {
            w_k: g.constant(self.w_k.clone()),
            w_qk: g.constant(self.w_qk.clone()),
            w_bk: g.constant(self.w_bk.clone()),
            w_b: g.constant(self.w_b.clone()),
            w_e: g.constant(self.w_e.clone()),
            w_v: g.constant(self.w_v.clone()),
            w_qv: g.constant(self.w_qv.clone()),
            activation: self.activation,
            channel: self.channel,
        }
    }
}

/// Graph handles for a block's weights.
#[derive(Debug, Clone, Copy)]
pub struct BlockWeights {
    pub w_k: NodeId,
    pub w_qk: NodeId,
    pub w_bk: NodeId,
    pub w_b: NodeId,
    pub w_e: NodeId,
    pub w_v: NodeId,
    pub w_qv: NodeId,
    pub activation: PoolingActivation,
    pub channel: ChannelMode,
}

impl BlockWeights {
    /// Loads `<prefix>.W_*` parameters from `store` as trainable leaves.
    pub fn load(g: &mut Graph, store: &ParamStore, prefix: &str, activation: PoolingActivation, channel: ChannelMode) -> Result<Self> {
        let mut p = |n: &str| g.param(store, &format!("{prefix}.{n}"));
        Ok(Self {
            w_k: p("W_k")?,
            w_qk: p("W_qk")?,
            w_bk: p("W_Bk")?,
            w_b: p("W_b")?,
            w_e: p("W_e")?,
            w_v: p("W_v")?,
            w_qv: p("W_qv")?,
            activation,
            channel,
        })
    }
}

/// Nodes produced by one block evaluation.
#[derive(Debug, Clone, Copy)]
pub struct BlockNodes {
    /// `V̂`, `n_q x d`.
    pub output: NodeId,
    /// `β^s`, `n_q x n_kv`.
    pub beta_s: NodeId,
    /// `β^c`, `n_q x d` per query or `1 x d` when shared.
    pub beta_c: NodeId,
    /// Stacked `B` maps, `(n_q * n_kv) x d`.
    pub bilinear_k: NodeId,
    /// Stacked `B'` maps, `(n_q * n_kv) x d`.
    pub bilinear_k_prime: NodeId,
}

/// Attention weights and bilinear maps retained for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockTrace {
    /// Contextual weights, one row per query; every row sums to one.
    pub beta_s: Matrix,
    /// Channel gates, one row per query, entries in (0, 1).
    pub beta_c: Matrix,
    /// Stacked `B` maps; row `t * n_kv + i` pairs query `t` with key `i`.
    pub bilinear_k: Matrix,
    /// Stacked `B'` maps in the same layout.
    pub bilinear_k_prime: Matrix,
}

impl BlockNodes {
    pub fn trace(&self, g: &Graph) -> BlockTrace {
        let beta_s = g.value(self.beta_s).clone();
        let mut beta_c = g.value(self.beta_c).clone();
        if beta_c.rows() == 1 && beta_s.rows() != 1 {
            let row = beta_c.row(0).to_vec();
            let rows: Vec<Vec<f64>> = (0..beta_s.rows()).map(|_| row.clone()).collect();
            beta_c = Matrix::from_rows(&rows).expect("equal widths");
        }
        BlockTrace {
            beta_s,
            beta_c,
            bilinear_k: g.value(self.bilinear_k).clone(),
            bilinear_k_prime: g.value(self.bilinear_k_prime).clone(),
        }
    }
}

/// `act(a W_aᵀ) ⊙ act(b W_bᵀ)` for row-stacked inputs of equal row count.
pub fn bilinear_pool_graph(g: &mut Graph, a: NodeId, b: NodeId, wa: NodeId, wb: NodeId, act: PoolingActivation) -> Result<NodeId> {
    let kind = act.as_activation();
    let pa = g.matmul_nt(a, wa)?;
    let pa = g.activation(pa, kind)?;
    let pb = g.matmul_nt(b, wb)?;
    let pb = g.activation(pb, kind)?;
    g.hadamard(pa, pb)
}

/// Pairwise pooling: row `t * n_b + i` is `act(W_a a_t) ⊙ act(W_b b_i)`.
fn pairwise_pool(g: &mut Graph, a: NodeId, b: NodeId, wa: NodeId, wb: NodeId, act: PoolingActivation) -> Result<NodeId> {
    let kind = act.as_activation();
    let pa = g.matmul_nt(a, wa)?;
    let pa = g.activation(pa, kind)?;
    let pb = g.matmul_nt(b, wb)?;
    let pb = g.activation(pb, kind)?;
    g.pair_product(pa, pb)
}

fn check_block_inputs(g: &Graph, keys: NodeId, values: NodeId, queries: NodeId) -> Result<()> {
    let (k, v, q) = (g.shape(keys), g.shape(values), g.shape(queries));
    if k.0 != v.0 {
        return Err(Error::shape("f_bilinear", format!("{} value rows", k.0), format!("{} value rows", v.0)));
    }
    if k.0 == 0 || q.0 == 0 {
        return Err(Error::shape("f_bilinear", "at least one key and one query", format!("{} keys, {} queries", k.0, q.0)));
    }
    if k.1 != q.1 || v.1 != q.1 {
        return Err(Error::shape(
            "f_bilinear",
            format!("width {}", q.1),
            format!("key width {}, value width {}", k.1, v.1),
        ));
    }
    Ok(())
}

/// `β^s`, `B`, and `B'` for every query against every key.
fn contextual_nodes(g: &mut Graph, keys: NodeId, queries: NodeId, w: &BlockWeights) -> Result<(NodeId, NodeId, NodeId)> {
    let (n_q, n_kv) = (g.shape(queries).0, g.shape(keys).0);
    let bilinear = pairwise_pool(g, queries, keys, w.w_qk, w.w_k, w.activation)?;
    let transformed = g.matmul_nt(bilinear, w.w_bk)?;
    let transformed = g.relu(transformed)?;
    let logits = g.matmul_nt(transformed, w.w_b)?;
    let logits = g.reshape(logits, n_q, n_kv)?;
    let beta_s = g.softmax_rows(logits)?;
    Ok((beta_s, bilinear, transformed))
}

fn channel_nodes(g: &mut Graph, transformed: NodeId, n_kv: usize, w: &BlockWeights) -> Result<NodeId> {
    let squeezed = match w.channel {
        ChannelMode::PerQuery => g.group_mean(transformed, n_kv)?,
        ChannelMode::Shared => g.mean_rows(transformed)?,
    };
    let excited = g.matmul_nt(squeezed, w.w_e)?;
    g.sigmoid(excited)
}

/// `V̂ = F_BiLinear(K, V, Q)`: one attended row per query.
pub fn f_bilinear_graph(g: &mut Graph, keys: NodeId, values: NodeId, queries: NodeId, w: &BlockWeights) -> Result<BlockNodes> {
    check_block_inputs(g, keys, values, queries)?;
    let n_kv = g.shape(keys).0;
    let (beta_s, bilinear_k, bilinear_k_prime) = contextual_nodes(g, keys, queries, w)?;
    let beta_c = channel_nodes(g, bilinear_k_prime, n_kv, w)?;
    let bilinear_v = pairwise_pool(g, queries, values, w.w_qv, w.w_v, w.activation)?;
    let attended = g.group_weighted_sum(beta_s, bilinear_v)?;
    let output = match w.channel {
        ChannelMode::PerQuery => g.hadamard(attended, beta_c)?,
        ChannelMode::Shared => g.mul_row(attended, beta_c)?,
    };
    Ok(BlockNodes {
        output,
        beta_s,
        beta_c,
        bilinear_k,
        bilinear_k_prime,
    })
}

fn vector_node(g: &mut Graph, v: &[f64]) -> Result<NodeId> {
    Ok(g.constant(Matrix::row_vector(v)?))
}

/// `act(W_a a) ⊙ act(W_b b)` for single vectors.
pub fn bilinear_pool(a: &[f64], b: &[f64], wa: &Matrix, wb: &Matrix, act: PoolingActivation) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let (an, bn) = (vector_node(&mut g, a)?, vector_node(&mut g, b)?);
    let (wan, wbn) = (g.constant(wa.clone()), g.constant(wb.clone()));
    let out = bilinear_pool_graph(&mut g, an, bn, wan, wbn, act)?;
    Ok(g.value(out).data().to_vec())
}

/// Contextual weights `β^s` of one query over `keys`, together with the
/// transformed maps `B'` (`n x d`).
pub fn contextual_attention(query: &[f64], keys: &Matrix, params: &BlockParams) -> Result<(Vec<f64>, Matrix)> {
    params.validate()?;
    let mut g = Graph::new();
    let w = params.to_graph(&mut g);
    let q = vector_node(&mut g, query)?;
    let k = g.constant(keys.clone());
    check_block_inputs(&g, k, k, q)?;
    let (beta_s, _, transformed) = contextual_nodes(&mut g, k, q, &w)?;
    Ok((g.value(beta_s).data().to_vec(), g.value(transformed).clone()))
}

/// `β^c = σ(W_e · mean_rows(B'))`.
pub fn channel_attention(b_prime: &Matrix, w_e: &Matrix) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let b = g.constant(b_prime.clone());
    let w = g.constant(w_e.clone());
    let squeezed = g.mean_rows(b)?;
    let excited = g.matmul_nt(squeezed, w)?;
    let beta_c = g.sigmoid(excited)?;
    Ok(g.value(beta_c).data().to_vec())
}

/// Attended value `v̂` for a single query.
pub fn attend(query: &[f64], keys: &Matrix, values: &Matrix, params: &BlockParams) -> Result<(Vec<f64>, BlockTrace)> {
    let (out, trace) = f_bilinear(keys, values, &Matrix::row_vector(query)?, params)?;
    Ok((out.into_data(), trace))
}

/// Evaluates the block for every query row.
pub fn f_bilinear(keys: &Matrix, values: &Matrix, queries: &Matrix, params: &BlockParams) -> Result<(Matrix, BlockTrace)> {
    params.validate()?;
    let mut g = Graph::new();
    let w = params.to_graph(&mut g);
    let (k, v, q) = (g.constant(keys.clone()), g.constant(values.clone()), g.constant(queries.clone()));
    let nodes = f_bilinear_graph(&mut g, k, v, q, &w)?;
    Ok((g.value(nodes.output).clone(), nodes.trace(&g)))
}
