//! The full joint model: embedder, encoder, fusion and decoder over one parameter store.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bilinear::{ChannelMode, PoolingActivation};
use crate::corpus::{evaluate, Dataset, EncodedLabels, EvalReport, Utterance};
use crate::decoder::{crf_nll_node, init_decoder, intent_distribution, intent_head, joint_loss, viterbi, DecoderWeights, Prediction};
use crate::embedder::{embed, init_embedder, EmbedderDims, EmbedderWeights, Vocab};
use crate::encoder::{dynamic_fuse, init_encoder, run_encoder, EncoderConfig, EncoderWeights, FusionNodes, LayerNodes, LayerTrace};
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, ParamStore};

pub const CHECKPOINT_FORMAT: &str = "han-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden size `d`.
    pub hidden: usize,
    /// Token embedding width.
    pub embedding: usize,
    /// Encoder depth `N`.
    pub layers: usize,
    pub activation: PoolingActivation,
    pub channel: ChannelMode,
    /// Weight of the CRF term in the joint loss.
    pub slot_loss_weight: f64,
    /// Add the BiLSTM states to the label-attention output.
    pub label_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            embedding: 128,
            layers: 2,
            activation: PoolingActivation::Elu,
            channel: ChannelMode::PerQuery,
            slot_loss_weight: 1.0,
            label_residual: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.embedding == 0 {
            return Err(Error::Config("hidden and embedding sizes must be positive".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if !(self.slot_loss_weight.is_finite() && self.slot_loss_weight >= 0.0) {
            return Err(Error::Config(format!("invalid slot loss weight {}", self.slot_loss_weight)));
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            activation: self.activation,
            channel: self.channel,
        }
    }
}

/// Node handles from one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub layers: Vec<LayerNodes>,
    pub fusion: FusionNodes,
    pub intent_logits: NodeId,
    pub emissions: NodeId,
    pub decoder: DecoderWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HanModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub intents: Vec<String>,
    pub slot_labels: Vec<String>,
    pub params: ParamStore,
}

impl HanModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, vocab: Vocab, intents: Vec<String>, slot_labels: Vec<String>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if intents.is_empty() || slot_labels.is_empty() {
            return Err(Error::Config("model needs at least one intent and one slot label".into()));
        }
        let mut params = ParamStore::new();
        let dims = EmbedderDims {
            vocab: vocab.len(),
            embedding: config.embedding,
            hidden: config.hidden,
            intents: intents.len(),
            slots: slot_labels.len(),
        };
        init_embedder(&mut params, dims, rng)?;
        init_encoder(&mut params, config.hidden, &config.encoder(), rng)?;
        init_decoder(&mut params, config.hidden, intents.len(), slot_labels.len(), rng)?;
        Ok(Self {
            config,
            vocab,
            intents,
            slot_labels,
            params,
        })
    }

    /// A fresh model sized for the inventories of `data`.
    pub fn for_dataset<R: Rng + ?Sized>(config: ModelConfig, data: &Dataset, rng: &mut R) -> Result<Self> {
        Self::new(config, data.vocab.clone(), data.intents.clone(), data.slot_labels.clone(), rng)
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        self.vocab.encode(tokens)
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Result<Forward> {
        if ids.is_empty() {
            return Err(Error::Invalid("cannot run the model on an empty utterance".into()));
        }
        let ew = EmbedderWeights::load(g, &self.params)?;
        let enc = EncoderWeights::load(g, &self.params, &self.config.encoder())?;
        let decoder = DecoderWeights::load(g, &self.params)?;

        let emb = embed(g, &ew, ids, self.config.label_residual)?;
        let layers = run_encoder(g, emb.intent, emb.slot, &enc.layers)?;
        let last = *layers.last().expect("at least one layer");
        let fusion = dynamic_fuse(g, last.q_intent, last.h_intent, last.q_slot, last.h_slot, &enc.fusion)?;
        let head = intent_head(g, fusion.h_intent, decoder.intent_w, decoder.intent_b)?;
        let emissions = g.matmul(fusion.h_slot, decoder.slot_w)?;
        let emissions = g.add_row(emissions, decoder.slot_b)?;
        Ok(Forward {
            layers,
            fusion,
            intent_logits: head.logits,
            emissions,
            decoder,
        })
    }

    /// Joint loss of one utterance.
    pub fn loss(&self, g: &mut Graph, ids: &[usize], gold: &EncodedLabels) -> Result<NodeId> {
        if gold.slots.len() != ids.len() {
            return Err(Error::shape("loss", format!("{} slot labels", ids.len()), format!("{}", gold.slots.len())));
        }
        let f = self.forward(g, ids)?;
        let crf = crf_nll_node(g, f.emissions, f.decoder.transitions, f.decoder.start, &gold.slots)?;
        joint_loss(g, f.intent_logits, gold.intent, crf, self.config.slot_loss_weight)
    }

    pub fn predict_ids(&self, ids: &[usize]) -> Result<Prediction> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, ids)?;
        let dist = intent_distribution(g.value(f.intent_logits));
        let intent = argmax(&dist);
        let (slots, path_score) = viterbi(g.value(f.emissions), g.value(f.decoder.transitions), g.value(f.decoder.start))?;
        Ok(Prediction {
            intent,
            intent_distribution: dist,
            slots,
            path_score,
        })
    }

    /// Labels `tokens`, returning intent and slot strings.
    pub fn predict<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Utterance> {
        let p = self.predict_ids(&self.encode_tokens(tokens))?;
        Ok(Utterance {
            tokens: tokens.iter().map(|t| t.as_ref().to_string()).collect(),
            slots: p.slots.iter().map(|&s| self.slot_labels[s].clone()).collect(),
            intent: self.intents[p.intent].clone(),
        })
    }

    pub fn predict_all(&self, utterances: &[Utterance]) -> Result<Vec<Utterance>> {
        utterances.iter().map(|u| self.predict(&u.tokens)).collect()
    }

    pub fn evaluate(&self, gold: &[Utterance]) -> Result<EvalReport> {
        evaluate(gold, &self.predict_all(gold)?)
    }

    /// Per-layer attention traces for one utterance.
    pub fn attention<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<LayerTrace>> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, &self.encode_tokens(tokens))?;
        Ok(f.layers.iter().map(|l| l.trace(&g)).collect())
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::json!({
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": serde_json::to_value(self.config)?,
            "vocab": serde_json::to_value(&self.vocab)?,
            "intents": self.intents,
            "slot_labels": self.slot_labels,
            "params": self.params.to_json(),
        }))
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Doc {
            format: String,
            version: u32,
            config: ModelConfig,
            vocab: Vocab,
            intents: Vec<String>,
            slot_labels: Vec<String>,
            params: serde_json::Value,
        }
        let doc: Doc = serde_json::from_value(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if doc.format != CHECKPOINT_FORMAT || doc.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, found {} v{}",
                doc.format, doc.version
            )));
        }
        doc.config.validate()?;
        let model = Self {
            config: doc.config,
            vocab: doc.vocab,
            intents: doc.intents,
            slot_labels: doc.slot_labels,
            params: ParamStore::from_json(doc.params)?,
        };
        // compare against a freshly initialized model of the same architecture
        let reference = Self::new(
            model.config,
            model.vocab.clone(),
            model.intents.clone(),
            model.slot_labels.clone(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        for (name, p) in reference.params.iter() {
            let got = model.params.get(name).map_err(|_| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if got.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    p.value.shape()
                )));
            }
        }
        if let Some(extra) = model.params.names().find(|n| !reference.params.contains(n)) {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(&self.to_json()?)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(value)
    }
}

/// Index of the largest entry; ties go to the smaller index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
