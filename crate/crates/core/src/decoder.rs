//! SLU decoder: max-pooled intent classifier and linear-chain CRF slot tagger.
//!
//! A label path `y` over `n` steps scores
//! `start[y_0] + sum_i emissions[i, y_i] + sum_{i>0} transitions[y_{i-1}, y_i]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, softmax_rows, xavier_uniform, Graph, Matrix, NodeId, ParamStore};

pub const INTENT_WEIGHT: &str = "decoder.intent.W";
pub const INTENT_BIAS: &str = "decoder.intent.b";
pub const SLOT_WEIGHT: &str = "decoder.slot.W";
pub const SLOT_BIAS: &str = "decoder.slot.b";
pub const TRANSITIONS: &str = "decoder.crf.transitions";
pub const START: &str = "decoder.crf.start";

/// Graph handles for the decoder parameters.
#[derive(Debug, Clone, Copy)]
pub struct DecoderWeights {
    pub intent_w: NodeId,
    pub intent_b: NodeId,
    pub slot_w: NodeId,
    pub slot_b: NodeId,
    pub transitions: NodeId,
    pub start: NodeId,
}

impl DecoderWeights {
    pub fn load(g: &mut Graph, store: &ParamStore) -> Result<Self> {
        Ok(Self {
            intent_w: g.param(store, INTENT_WEIGHT)?,
            intent_b: g.param(store, INTENT_BIAS)?,
            slot_w: g.param(store, SLOT_WEIGHT)?,
            slot_b: g.param(store, SLOT_BIAS)?,
            transitions: g.param(store, TRANSITIONS)?,
            start: g.param(store, START)?,
        })
    }
}

/// Adds decoder parameters for hidden size `d`. CRF scores start at zero.
pub fn init_decoder<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, intents: usize, slots: usize, rng: &mut R) -> Result<()> {
    store.insert(INTENT_WEIGHT, xavier_uniform(d, intents, rng))?;
    store.insert(INTENT_BIAS, Matrix::zeros(1, intents))?;
    store.insert(SLOT_WEIGHT, xavier_uniform(d, slots, rng))?;
    store.insert(SLOT_BIAS, Matrix::zeros(1, slots))?;
    store.insert(TRANSITIONS, Matrix::zeros(slots, slots))?;
    store.insert(START, Matrix::zeros(1, slots))?;
    Ok(())
}

/// Decoded output for one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub intent: usize,
    pub intent_distribution: Vec<f64>,
    pub slots: Vec<usize>,
    pub path_score: f64,
}

pub struct IntentHead {
    /// Column-wise max over positions (`1 x d`).
    pub pooled: NodeId,
    /// Unnormalized scores (`1 x |I|`).
    pub logits: NodeId,
}

/// Max-pools `h_intent` over positions and projects to intent logits.
pub fn intent_head(g: &mut Graph, h_intent: NodeId, weight: NodeId, bias: NodeId) -> Result<IntentHead> {
    let pooled = g.column_max(h_intent)?;
    let logits = g.matmul(pooled, weight)?;
    let logits = g.add_row(logits, bias)?;
    Ok(IntentHead { pooled, logits })
}

/// Softmax of a `1 x |I|` logit row.
pub fn intent_distribution(logits: &Matrix) -> Vec<f64> {
    softmax_rows(logits).into_data()
}

/// Cross-entropy of the intent head plus `slot_weight` times the CRF loss.
pub fn joint_loss(g: &mut Graph, intent_logits: NodeId, gold_intent: usize, crf_nll: NodeId, slot_weight: f64) -> Result<NodeId> {
    let log_probs = g.log_softmax_rows(intent_logits)?;
    let picked = g.pick(log_probs, 0, gold_intent)?;
    let intent_loss = g.scale(picked, -1.0)?;
    let slot_loss = g.scale(crf_nll, slot_weight)?;
    g.add(intent_loss, slot_loss)
}

/// Scalar form of [`joint_loss`] for an already-normalized intent distribution.
pub fn joint_loss_value(intent_distribution: &[f64], gold_intent: usize, crf_nll: f64, slot_weight: f64) -> Result<f64> {
    let p = *intent_distribution.get(gold_intent).ok_or(Error::IndexOutOfRange {
        what: "intent distribution",
        index: gold_intent,
        size: intent_distribution.len(),
    })?;
    Ok(-p.ln() + slot_weight * crf_nll)
}

fn check_crf_shapes(emissions: &Matrix, transitions: &Matrix, start: &Matrix) -> Result<usize> {
    let labels = emissions.cols();
    if emissions.rows() == 0 {
        return Err(Error::shape("crf", "at least one position", "0 rows"));
    }
    if labels == 0 {
        return Err(Error::shape("crf", "at least one label", "0 columns"));
    }
    if transitions.shape() != (labels, labels) {
        return Err(Error::shape(
            "crf transitions",
            format!("{labels}x{labels}"),
            format!("{}x{}", transitions.rows(), transitions.cols()),
        ));
    }
    if start.shape() != (1, labels) {
        return Err(Error::shape(
            "crf start",
            format!("1x{labels}"),
            format!("{}x{}", start.rows(), start.cols()),
        ));
    }
    Ok(labels)
}

fn check_path(path: &[usize], n: usize, labels: usize) -> Result<()> {
    if path.len() != n {
        return Err(Error::shape("crf path", format!("length {n}"), format!("length {}", path.len())));
    }
    if let Some(&bad) = path.iter().find(|&&y| y >= labels) {
        return Err(Error::IndexOutOfRange {
            what: "slot label set",
            index: bad,
            size: labels,
        });
    }
    Ok(())
}

pub fn path_score(emissions: &Matrix, transitions: &Matrix, start: &Matrix, path: &[usize]) -> Result<f64> {
    let labels = check_crf_shapes(emissions, transitions, start)?;
    check_path(path, emissions.rows(), labels)?;
    let mut score = start.get(0, path[0]);
    for (i, &y) in path.iter().enumerate() {
        score += emissions.get(i, y);
        if i > 0 {
            score += transitions.get(path[i - 1], y);
        }
    }
    Ok(score)
}

/// Forward-algorithm log-potentials: `alpha[i][y]` is the log-sum of scores of all
/// prefixes ending in `y` at step `i`.
fn forward_table(emissions: &Matrix, transitions: &Matrix, start: &Matrix) -> Vec<Vec<f64>> {
    let (n, labels) = emissions.shape();
    let mut alpha = Vec::with_capacity(n);
    alpha.push((0..labels).map(|y| start.get(0, y) + emissions.get(0, y)).collect::<Vec<_>>());
    let mut terms = vec![0.0; labels];
    for i in 1..n {
        let prev = &alpha[i - 1];
        let row = (0..labels)
            .map(|y| {
                for (p, t) in terms.iter_mut().enumerate() {
                    *t = prev[p] + transitions.get(p, y);
                }
                emissions.get(i, y) + log_sum_exp(&terms)
            })
            .collect();
        alpha.push(row);
    }
    alpha
}

fn backward_table(emissions: &Matrix, transitions: &Matrix) -> Vec<Vec<f64>> {
    let (n, labels) = emissions.shape();
    let mut beta = vec![vec![0.0; labels]; n];
    let mut terms = vec![0.0; labels];
    for i in (0..n.saturating_sub(1)).rev() {
        for y in 0..labels {
            for (next, t) in terms.iter_mut().enumerate() {
                *t = transitions.get(y, next) + emissions.get(i + 1, next) + beta[i + 1][next];
            }
            beta[i][y] = log_sum_exp(&terms);
        }
    }
    beta
}

/// Log of the sum of `exp(score)` over all label paths.
pub fn crf_log_partition(emissions: &Matrix, transitions: &Matrix, start: &Matrix) -> Result<f64> {
    check_crf_shapes(emissions, transitions, start)?;
    let alpha = forward_table(emissions, transitions, start);
    Ok(log_sum_exp(alpha.last().expect("n >= 1")))
}

/// Negative log-likelihood of `gold`; never negative.
pub fn crf_nll(emissions: &Matrix, transitions: &Matrix, start: &Matrix, gold: &[usize]) -> Result<f64> {
    let log_z = crf_log_partition(emissions, transitions, start)?;
    let score = path_score(emissions, transitions, start, gold)?;
    // The partition dominates every single path; clamp rounding noise.
    Ok((log_z - score).max(0.0))
}

/// Gradients of [`crf_nll`] with respect to emissions, transitions and start scores.
pub struct CrfGradients {
    pub emissions: Matrix,
    pub transitions: Matrix,
    pub start: Matrix,
}

pub fn crf_nll_with_gradients(
    emissions: &Matrix,
    transitions: &Matrix,
    start: &Matrix,
    gold: &[usize],
) -> Result<(f64, CrfGradients)> {
    let labels = check_crf_shapes(emissions, transitions, start)?;
    check_path(gold, emissions.rows(), labels)?;
    let n = emissions.rows();
    let alpha = forward_table(emissions, transitions, start);
    let beta = backward_table(emissions, transitions);
    let log_z = log_sum_exp(&alpha[n - 1]);
    let score = path_score(emissions, transitions, start, gold)?;

    let mut d_emit = Matrix::zeros(n, labels);
    let mut d_trans = Matrix::zeros(labels, labels);
    let mut d_start = Matrix::zeros(1, labels);
    for i in 0..n {
        for y in 0..labels {
            let marginal = (alpha[i][y] + beta[i][y] - log_z).exp();
            d_emit.set(i, y, marginal);
            if i == 0 {
                d_start.set(0, y, marginal);
            }
        }
        if i > 0 {
            for p in 0..labels {
                for y in 0..labels {
                    let pair = (alpha[i - 1][p] + transitions.get(p, y) + emissions.get(i, y) + beta[i][y] - log_z).exp();
                    d_trans.set(p, y, d_trans.get(p, y) + pair);
                }
            }
        }
    }
    for (i, &y) in gold.iter().enumerate() {
        d_emit.set(i, y, d_emit.get(i, y) - 1.0);
        if i > 0 {
            let p = gold[i - 1];
            d_trans.set(p, y, d_trans.get(p, y) - 1.0);
        }
    }
    d_start.set(0, gold[0], d_start.get(0, gold[0]) - 1.0);

    Ok((
        (log_z - score).max(0.0),
        CrfGradients {
            emissions: d_emit,
            transitions: d_trans,
            start: d_start,
        },
    ))
}

/// Records the CRF negative log-likelihood on the tape.
pub fn crf_nll_node(g: &mut Graph, emissions: NodeId, transitions: NodeId, start: NodeId, gold: &[usize]) -> Result<NodeId> {
    let (loss, grads) = crf_nll_with_gradients(g.value(emissions), g.value(transitions), g.value(start), gold)?;
    g.scalar_fn(
        "crf_nll",
        loss,
        vec![
            (emissions, grads.emissions),
            (transitions, grads.transitions),
            (start, grads.start),
        ],
    )
}

/// Highest-scoring label path. Ties resolve toward the smaller label index.
pub fn viterbi(emissions: &Matrix, transitions: &Matrix, start: &Matrix) -> Result<(Vec<usize>, f64)> {
    let labels = check_crf_shapes(emissions, transitions, start)?;
    let n = emissions.rows();
    let mut score: Vec<f64> = (0..labels).map(|y| start.get(0, y) + emissions.get(0, y)).collect();
    let mut backptr = vec![vec![0usize; labels]; n];
    for i in 1..n {
        let mut next = vec![0.0; labels];
        for y in 0..labels {
            let mut best = 0;
            let mut best_score = score[0] + transitions.get(0, y);
            for p in 1..labels {
                let s = score[p] + transitions.get(p, y);
                if s > best_score {
                    best_score = s;
                    best = p;
                }
            }
            next[y] = best_score + emissions.get(i, y);
            backptr[i][y] = best;
        }
        score = next;
    }
    let mut last = 0;
    for y in 1..labels {
        if score[y] > score[last] {
            last = y;
        }
    }
    let mut path = vec![0; n];
    path[n - 1] = last;
    for i in (1..n).rev() {
        path[i - 1] = backptr[i][path[i]];
    }
    Ok((path, score[last]))
}
