//! Stacked cross-stream attention encoder and the gated fusion layer.
//!
//! Each layer projects both streams to queries, keys and values. The intent
//! stream queries the slot stream's keys and values and vice versa; each
//! result is added back to its input and layer-normalized.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bilinear::{f_bilinear_graph, BlockNodes, BlockParams, BlockTrace, BlockWeights, ChannelMode, PoolingActivation};
use crate::error::{Error, Result};
use crate::numerics::{xavier_uniform, Graph, Matrix, NodeId, ParamStore};

pub const LN_EPS: f64 = 1e-5;
pub const STREAMS: [&str; 2] = ["intent", "slot"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub activation: PoolingActivation,
    pub channel: ChannelMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            activation: PoolingActivation::default(),
            channel: ChannelMode::default(),
        }
    }
}

fn stream_prefix(layer: usize, stream: &str) -> String {
    format!("encoder.layer{layer}.{stream}")
}

fn insert_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.gain"), Matrix::ones(1, d))?;
    store.insert(format!("{prefix}.bias"), Matrix::zeros(1, d))?;
    Ok(())
}

/// Adds encoder and fusion parameters for hidden size `d` to `store`.
pub fn init_encoder<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, config: &EncoderConfig, rng: &mut R) -> Result<()> {
    if config.layers == 0 {
        return Err(Error::Config("encoder needs at least one layer".into()));
    }
    for layer in 0..config.layers {
        for stream in STREAMS {
            let p = stream_prefix(layer, stream);
            for proj in ["W_q", "W_k", "W_v"] {
                store.insert(format!("{p}.{proj}"), xavier_uniform(d, d, rng))?;
            }
            BlockParams::xavier(d, config.activation, rng).insert_into(store, &format!("{p}.block"))?;
            insert_layer_norm(store, &format!("{p}.ln"), d)?;
        }
    }
    let d_ff = 2 * d;
    store.insert(FUSION_W_INTENT, xavier_uniform(2 * d, d, rng))?;
    store.insert(FUSION_W_SLOT, xavier_uniform(2 * d, d, rng))?;
    store.insert(FUSION_B_INTENT, Matrix::zeros(1, d))?;
    store.insert(FUSION_B_SLOT, Matrix::zeros(1, d))?;
    store.insert(FFN_W1, xavier_uniform(d, d_ff, rng))?;
    store.insert(FFN_B1, Matrix::zeros(1, d_ff))?;
    store.insert(FFN_W2, xavier_uniform(d_ff, d, rng))?;
    store.insert(FFN_B2, Matrix::zeros(1, d))?;
    insert_layer_norm(store, "fusion.ln_intent", d)?;
    insert_layer_norm(store, "fusion.ln_slot", d)?;
    Ok(())
}

pub const FUSION_W_INTENT: &str = "fusion.W_I";
pub const FUSION_W_SLOT: &str = "fusion.W_S";
pub const FUSION_B_INTENT: &str = "fusion.b_I";
pub const FUSION_B_SLOT: &str = "fusion.b_S";
pub const FFN_W1: &str = "fusion.ffn.W1";
pub const FFN_B1: &str = "fusion.ffn.b1";
pub const FFN_W2: &str = "fusion.ffn.W2";
pub const FFN_B2: &str = "fusion.ffn.b2";

#[derive(Debug, Clone, Copy)]
pub struct LayerNormWeights {
    pub gain: NodeId,
    pub bias: NodeId,
}

impl LayerNormWeights {
    fn load(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            gain: g.param(store, &format!("{prefix}.gain"))?,
            bias: g.param(store, &format!("{prefix}.bias"))?,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        g.layer_norm(x, self.gain, self.bias, LN_EPS)
    }
}

/// One stream of one layer.
#[derive(Debug, Clone, Copy)]
pub struct StreamWeights {
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
    pub block: BlockWeights,
    pub ln: LayerNormWeights,
}

impl StreamWeights {
    fn load(g: &mut Graph, store: &ParamStore, layer: usize, stream: &str, config: &EncoderConfig) -> Result<Self> {
        let p = stream_prefix(layer, stream);
        Ok(Self {
            w_q: g.param(store, &format!("{p}.W_q"))?,
            w_k: g.param(store, &format!("{p}.W_k"))?,
            w_v: g.param(store, &format!("{p}.W_v"))?,
            block: BlockWeights::load(g, store, &format!("{p}.block"), config.activation, config.channel)?,
            ln: LayerNormWeights::load(g, store, &format!("{p}.ln"))?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerWeights {
    pub intent: StreamWeights,
    pub slot: StreamWeights,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionWeights {
    pub w_intent: NodeId,
    pub w_slot: NodeId,
    pub b_intent: NodeId,
    pub b_slot: NodeId,
    pub ffn_w1: NodeId,
    pub ffn_b1: NodeId,
    pub ffn_w2: NodeId,
    pub ffn_b2: NodeId,
    pub ln_intent: LayerNormWeights,
    pub ln_slot: LayerNormWeights,
}

impl FusionWeights {
    pub fn load(g: &mut Graph, store: &ParamStore) -> Result<Self> {
        Ok(Self {
            w_intent: g.param(store, FUSION_W_INTENT)?,
            w_slot: g.param(store, FUSION_W_SLOT)?,
            b_intent: g.param(store, FUSION_B_INTENT)?,
            b_slot: g.param(store, FUSION_B_SLOT)?,
            ffn_w1: g.param(store, FFN_W1)?,
            ffn_b1: g.param(store, FFN_B1)?,
            ffn_w2: g.param(store, FFN_W2)?,
            ffn_b2: g.param(store, FFN_B2)?,
            ln_intent: LayerNormWeights::load(g, store, "fusion.ln_intent")?,
            ln_slot: LayerNormWeights::load(g, store, "fusion.ln_slot")?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct EncoderWeights {
    pub layers: Vec<LayerWeights>,
    pub fusion: FusionWeights,
}

impl EncoderWeights {
    pub fn load(g: &mut Graph, store: &ParamStore, config: &EncoderConfig) -> Result<Self> {
        if config.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        let layers = (0..config.layers)
            .map(|l| {
                Ok(LayerWeights {
                    intent: StreamWeights::load(g, store, l, "intent", config)?,
                    slot: StreamWeights::load(g, store, l, "slot", config)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            fusion: FusionWeights::load(g, store)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNodes {
    pub h_intent: NodeId,
    pub h_slot: NodeId,
    pub q_intent: NodeId,
    pub q_slot: NodeId,
    pub intent_block: BlockNodes,
    pub slot_block: BlockNodes,
}

/// Attention traces of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub intent: BlockTrace,
    pub slot: BlockTrace,
}

impl LayerNodes {
    pub fn trace(&self, g: &Graph) -> LayerTrace {
        LayerTrace {
            intent: self.intent_block.trace(g),
            slot: self.slot_block.trace(g),
        }
    }
}

/// One cross-stream sublayer.
pub fn encoder_layer(g: &mut Graph, h_intent: NodeId, h_slot: NodeId, w: &LayerWeights) -> Result<LayerNodes> {
    if g.shape(h_intent) != g.shape(h_slot) {
        let (a, b) = (g.shape(h_intent), g.shape(h_slot));
        return Err(Error::shape("encoder_layer", format!("{}x{}", a.0, a.1), format!("{}x{}", b.0, b.1)));
    }
    let q_i = g.matmul(h_intent, w.intent.w_q)?;
    let k_i = g.matmul(h_intent, w.intent.w_k)?;
    let v_i = g.matmul(h_intent, w.intent.w_v)?;
    let q_s = g.matmul(h_slot, w.slot.w_q)?;
    let k_s = g.matmul(h_slot, w.slot.w_k)?;
    let v_s = g.matmul(h_slot, w.slot.w_v)?;

    let intent_block = f_bilinear_graph(g, k_s, v_s, q_i, &w.intent.block)?;
    let slot_block = f_bilinear_graph(g, k_i, v_i, q_s, &w.slot.block)?;

    let r_i = g.add(h_intent, intent_block.output)?;
    let r_s = g.add(h_slot, slot_block.output)?;
    Ok(LayerNodes {
        h_intent: w.intent.ln.apply(g, r_i)?,
        h_slot: w.slot.ln.apply(g, r_s)?,
        q_intent: q_i,
        q_slot: q_s,
        intent_block,
        slot_block,
    })
}

/// Applies every layer in order. The last entry holds the final outputs and queries.
pub fn run_encoder(g: &mut Graph, h_intent: NodeId, h_slot: NodeId, layers: &[LayerWeights]) -> Result<Vec<LayerNodes>> {
    let mut out = Vec::with_capacity(layers.len());
    let (mut hi, mut hs) = (h_intent, h_slot);
    for w in layers {
        let nodes = encoder_layer(g, hi, hs, w)?;
        hi = nodes.h_intent;
        hs = nodes.h_slot;
        out.push(nodes);
    }
    if out.is_empty() {
        return Err(Error::Config("encoder needs at least one layer".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct FusionNodes {
    pub alpha_intent: NodeId,
    pub alpha_slot: NodeId,
    pub fused: NodeId,
    pub h_intent: NodeId,
    pub h_slot: NodeId,
}

/// Gated fusion of both streams followed by a shared FFN and per-stream residual LN.
pub fn dynamic_fuse(
    g: &mut Graph,
    q_intent: NodeId,
    h_intent: NodeId,
    q_slot: NodeId,
    h_slot: NodeId,
    w: &FusionWeights,
) -> Result<FusionNodes> {
    let gate = |g: &mut Graph, q: NodeId, h: NodeId, weight: NodeId, bias: NodeId| -> Result<NodeId> {
        let cat = g.concat_cols(&[q, h])?;
        let z = g.matmul(cat, weight)?;
        let z = g.add_row(z, bias)?;
        g.sigmoid(z)
    };
    let alpha_intent = gate(g, q_intent, h_intent, w.w_intent, w.b_intent)?;
    let alpha_slot = gate(g, q_slot, h_slot, w.w_slot, w.b_slot)?;
    let gi = g.hadamard(alpha_intent, h_intent)?;
    let gs = g.hadamard(alpha_slot, h_slot)?;
    let fused = g.add(gi, gs)?;

    let inner = g.matmul(fused, w.ffn_w1)?;
    let inner = g.add_row(inner, w.ffn_b1)?;
    let inner = g.relu(inner)?;
    let ffn = g.matmul(inner, w.ffn_w2)?;
    let ffn = g.add_row(ffn, w.ffn_b2)?;

    let ri = g.add(ffn, h_intent)?;
    let rs = g.add(ffn, h_slot)?;
    Ok(FusionNodes {
        alpha_intent,
        alpha_slot,
        fused,
        h_intent: w.ln_intent.apply(g, ri)?,
        h_slot: w.ln_slot.apply(g, rs)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bilinear::f_bilinear;
    use crate::numerics::gradcheck::{numerical_gradient, relative_error};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_for(d: usize, config: &EncoderConfig, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_encoder(&mut s, d, config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        s
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    fn ln_rows(x: &Matrix) -> Matrix {
        let rows: Vec<Vec<f64>> = x
            .iter_rows()
            .map(|r| {
                let mean = r.iter().sum::<f64>() / r.len() as f64;
                let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r.len() as f64;
                r.iter().map(|v| (v - mean) / (var + LN_EPS).sqrt()).collect()
            })
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    fn zero(store: &mut ParamStore, name: &str) {
        let (r, c) = store.get(name).unwrap().shape();
        store.set(name, Matrix::zeros(r, c)).unwrap();
    }

    fn one_layer(store: &ParamStore, config: &EncoderConfig, hi: &Matrix, hs: &Matrix) -> (Matrix, Matrix) {
        let mut g = Graph::new();
        let w = EncoderWeights::load(&mut g, store, config).unwrap();
        let (a, b) = (g.constant(hi.clone()), g.constant(hs.clone()));
        let out = encoder_layer(&mut g, a, b, &w.layers[0]).unwrap();
        (g.value(out.h_intent).clone(), g.value(out.h_slot).clone())
    }

    #[test]
    fn zero_value_path_reduces_to_layer_norm() {
        let config = EncoderConfig {
            layers: 2,
            activation: PoolingActivation::Relu,
            ..Default::default()
        };
        let mut store = store_for(4, &config, 1);
        for l in 0..2 {
            for s in STREAMS {
                zero(&mut store, &format!("{}.block.W_v", stream_prefix(l, s)));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (hi, hs) = (random(3, 4, &mut rng), random(3, 4, &mut rng));
        let (oi, os) = one_layer(&store, &config, &hi, &hs);
        assert!(oi.max_abs_diff(&ln_rows(&hi)) < 1e-12);
        assert!(os.max_abs_diff(&ln_rows(&hs)) < 1e-12);

        let mut g = Graph::new();
        let w = EncoderWeights::load(&mut g, &store, &config).unwrap();
        let (a, b) = (g.constant(hi.clone()), g.constant(hs.clone()));
        let layers = run_encoder(&mut g, a, b, &w.layers).unwrap();
        let last = layers.last().unwrap();
        assert!(g.value(last.h_intent).max_abs_diff(&ln_rows(&ln_rows(&hi))) < 1e-9);
    }

    #[test]
    fn single_position_layer_matches_oracle() {
        let config = EncoderConfig::default();
        let store = store_for(2, &config, 2);
        let hi = Matrix::from_rows(&[[0.7, -0.3]]).unwrap();
        let hs = Matrix::from_rows(&[[-0.2, 0.9]]).unwrap();
        let (oi, os) = one_layer(&store, &config, &hi, &hs);

        let p = |s: &str, n: &str| store.get(&format!("{}.{n}", stream_prefix(0, s))).unwrap().clone();
        let mm = |x: &Matrix, w: &Matrix| x.matmul(w).unwrap();
        let block = |s: &str| BlockParams::from_store(&store, &format!("{}.block", stream_prefix(0, s)), config.activation, config.channel).unwrap();
        let (qi, ki, vi) = (mm(&hi, &p("intent", "W_q")), mm(&hi, &p("intent", "W_k")), mm(&hi, &p("intent", "W_v")));
        let (qs, ks, vs) = (mm(&hs, &p("slot", "W_q")), mm(&hs, &p("slot", "W_k")), mm(&hs, &p("slot", "W_v")));
        let (ai, _) = f_bilinear(&ks, &vs, &qi, &block("intent")).unwrap();
        let (as_, _) = f_bilinear(&ki, &vi, &qs, &block("slot")).unwrap();
        let add = |a: &Matrix, b: &Matrix| Matrix::new(1, 2, vec![a.get(0, 0) + b.get(0, 0), a.get(0, 1) + b.get(0, 1)]).unwrap();
        assert!(oi.max_abs_diff(&ln_rows(&add(&hi, &ai))) < 1e-12);
        assert!(os.max_abs_diff(&ln_rows(&add(&hs, &as_))) < 1e-12);
    }

    #[test]
    fn symmetric_streams_give_identical_outputs() {
        let config = EncoderConfig::default();
        let mut store = store_for(3, &config, 3);
        let names: Vec<String> = store.names().filter(|n| n.contains(".intent.")).map(String::from).collect();
        for n in names {
            let v = store.get(&n).unwrap().clone();
            store.set(&n.replace(".intent.", ".slot."), v).unwrap();
        }
        let h = random(4, 3, &mut ChaCha8Rng::seed_from_u64(4));
        let (oi, os) = one_layer(&store, &config, &h, &h);
        assert_eq!(oi, os);
    }

    #[test]
    fn mismatched_streams_are_rejected() {
        let config = EncoderConfig::default();
        let store = store_for(3, &config, 5);
        let mut g = Graph::new();
        let w = EncoderWeights::load(&mut g, &store, &config).unwrap();
        let a = g.constant(Matrix::zeros(2, 3));
        let b = g.constant(Matrix::zeros(3, 3));
        assert!(matches!(encoder_layer(&mut g, a, b, &w.layers[0]), Err(Error::Shape { .. })));
        assert!(init_encoder(&mut ParamStore::new(), 3, &EncoderConfig { layers: 0, ..config }, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn stacked_layers_compose() {
        let config = EncoderConfig::default();
        let store = store_for(3, &config, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (hi, hs) = (random(3, 3, &mut rng), random(3, 3, &mut rng));

        let mut g = Graph::new();
        let w = EncoderWeights::load(&mut g, &store, &config).unwrap();
        let (a, b) = (g.constant(hi.clone()), g.constant(hs.clone()));
        let stacked = run_encoder(&mut g, a, b, &w.layers).unwrap();
        let first = encoder_layer(&mut g, a, b, &w.layers[0]).unwrap();
        let second = encoder_layer(&mut g, first.h_intent, first.h_slot, &w.layers[1]).unwrap();
        assert_eq!(g.value(stacked[0].h_intent), g.value(first.h_intent));
        assert_eq!(g.value(stacked[1].h_intent), g.value(second.h_intent));
        assert_eq!(g.value(stacked[1].h_slot), g.value(second.h_slot));
        assert_eq!(g.value(stacked[1].q_slot), g.value(second.q_slot));
    }

    #[test]
    fn zero_gates_average_streams_and_zero_ffn_is_layer_norm() {
        let config = EncoderConfig::default();
        let mut store = store_for(2, &config, 8);
        for n in [FUSION_W_INTENT, FUSION_W_SLOT, FFN_W1, FFN_W2] {
            zero(&mut store, n);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (qi, hi, qs, hs) = (random(2, 2, &mut rng), random(2, 2, &mut rng), random(2, 2, &mut rng), random(2, 2, &mut rng));
        let mut g = Graph::new();
        let w = FusionWeights::load(&mut g, &store).unwrap();
        let ids: Vec<NodeId> = [&qi, &hi, &qs, &hs].iter().map(|m| g.constant((*m).clone())).collect();
        let out = dynamic_fuse(&mut g, ids[0], ids[1], ids[2], ids[3], &w).unwrap();
        assert!(g.value(out.alpha_intent).data().iter().all(|&a| a == 0.5));
        for (i, v) in g.value(out.fused).data().iter().enumerate() {
            assert!((v - 0.5 * (hi.data()[i] + hs.data()[i])).abs() < 1e-15);
        }
        assert!(g.value(out.h_intent).max_abs_diff(&ln_rows(&hi)) < 1e-12);
        assert!(g.value(out.h_slot).max_abs_diff(&ln_rows(&hs)) < 1e-12);
    }

    #[test]
    fn fusion_matches_oracle() {
        let config = EncoderConfig::default();
        let mut store = store_for(2, &config, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for n in [FUSION_B_INTENT, FUSION_B_SLOT, FFN_B1, FFN_B2] {
            let (r, c) = store.get(n).unwrap().shape();
            store.set(n, random(r, c, &mut rng)).unwrap();
        }
        let (qi, hi, qs, hs) = (random(2, 2, &mut rng), random(2, 2, &mut rng), random(2, 2, &mut rng), random(2, 2, &mut rng));
        let mut g = Graph::new();
        let w = FusionWeights::load(&mut g, &store).unwrap();
        let ids: Vec<NodeId> = [&qi, &hi, &qs, &hs].iter().map(|m| g.constant((*m).clone())).collect();
        let out = dynamic_fuse(&mut g, ids[0], ids[1], ids[2], ids[3], &w).unwrap();

        let p = |n: &str| store.get(n).unwrap();
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let gate = |q: &Matrix, h: &Matrix, wn: &str, bn: &str, t: usize, j: usize| {
            let cat: Vec<f64> = q.row(t).iter().chain(h.row(t)).copied().collect();
            sig((0..4).map(|k| cat[k] * p(wn).get(k, j)).sum::<f64>() + p(bn).get(0, j))
        };
        let mut fused = vec![vec![0.0; 2]; 2];
        for (t, row) in fused.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = gate(&qi, &hi, FUSION_W_INTENT, FUSION_B_INTENT, t, j) * hi.get(t, j)
                    + gate(&qs, &hs, FUSION_W_SLOT, FUSION_B_SLOT, t, j) * hs.get(t, j);
            }
        }
        let ffn: Vec<Vec<f64>> = fused
            .iter()
            .map(|x| {
                let inner: Vec<f64> = (0..4).map(|k| ((0..2).map(|j| x[j] * p(FFN_W1).get(j, k)).sum::<f64>() + p(FFN_B1).get(0, k)).max(0.0)).collect();
                (0..2).map(|j| (0..4).map(|k| inner[k] * p(FFN_W2).get(k, j)).sum::<f64>() + p(FFN_B2).get(0, j)).collect()
            })
            .collect();
        let residual = |h: &Matrix| {
            let rows: Vec<Vec<f64>> = (0..2).map(|t| (0..2).map(|j| ffn[t][j] + h.get(t, j)).collect()).collect();
            ln_rows(&Matrix::from_rows(&rows).unwrap())
        };
        assert!(g.value(out.h_intent).max_abs_diff(&residual(&hi)) < 1e-12);
        assert!(g.value(out.h_slot).max_abs_diff(&residual(&hs)) < 1e-12);
    }

    #[test]
    fn end_to_end_gradient_check() {
        let config = EncoderConfig::default();
        let mut store = store_for(4, &config, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        store.insert("input.intent", random(3, 4, &mut rng)).unwrap();
        store.insert("input.slot", random(3, 4, &mut rng)).unwrap();
        let mix = random(3, 4, &mut rng);
        let forward = |s: &ParamStore| -> Result<(Graph, NodeId)> {
            let mut g = Graph::new();
            let w = EncoderWeights::load(&mut g, s, &config)?;
            let (a, b) = (g.param(s, "input.intent")?, g.param(s, "input.slot")?);
            let layers = run_encoder(&mut g, a, b, &w.layers)?;
            let last = layers.last().unwrap();
            let f = dynamic_fuse(&mut g, last.q_intent, last.h_intent, last.q_slot, last.h_slot, &w.fusion)?;
            let both = g.add(f.h_intent, f.h_slot)?;
            let r = g.constant(mix.clone());
            let weighted = g.hadamard(both, r)?;
            let loss = g.sum(weighted)?;
            Ok((g, loss))
        };
        let (g, loss) = forward(&store).unwrap();
        g.backward(loss).unwrap().accumulate_into(&g, &mut store).unwrap();
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in names {
            let numeric = numerical_gradient(&store, &name, 1e-5, |s| {
                let (g, l) = forward(s)?;
                Ok(g.value(l).data()[0])
            })
            .unwrap();
            let err = relative_error(store.grad(&name).unwrap(), &numeric);
            assert!(err < 1e-3, "{name}: {err:e}");
        }
    }

    #[test]
    fn outputs_finite_over_many_seeds() {
        let config = EncoderConfig::default();
        for seed in 0..100 {
            let store = store_for(4, &config, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let (hi, hs) = (random(5, 4, &mut rng), random(5, 4, &mut rng));
            let mut g = Graph::new();
            let w = EncoderWeights::load(&mut g, &store, &config).unwrap();
            let (a, b) = (g.constant(hi), g.constant(hs));
            let layers = run_encoder(&mut g, a, b, &w.layers).unwrap();
            let last = layers.last().unwrap();
            let f = dynamic_fuse(&mut g, last.q_intent, last.h_intent, last.q_slot, last.h_slot, &w.fusion).unwrap();
            assert!(g.value(f.h_intent).is_finite() && g.value(f.h_slot).is_finite());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn gates_open_interval_and_shapes_preserved(seed in 0u64..10_000, n in 1usize..5) {
            let config = EncoderConfig::default();
            let store = store_for(3, &config, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
            let (hi, hs) = (random(n, 3, &mut rng), random(n, 3, &mut rng));
            let mut g = Graph::new();
            let w = EncoderWeights::load(&mut g, &store, &config).unwrap();
            let (a, b) = (g.constant(hi), g.constant(hs));
            let layers = run_encoder(&mut g, a, b, &w.layers).unwrap();
            for l in &layers {
                prop_assert_eq!(g.shape(l.h_intent), (n, 3));
                prop_assert_eq!(g.shape(l.h_slot), (n, 3));
            }
            let last = layers.last().unwrap();
            let f = dynamic_fuse(&mut g, last.q_intent, last.h_intent, last.q_slot, last.h_slot, &w.fusion).unwrap();
            for id in [f.alpha_intent, f.alpha_slot] {
                prop_assert!(g.value(id).data().iter().all(|&a| a > 0.0 && a < 1.0));
            }
            prop_assert_eq!(g.shape(f.h_intent), (n, 3));
        }
    }
}
