//! Attention maps of one utterance as a JSON document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bilinear::BlockTrace;
use crate::error::{Error, Result};
use crate::model::HanModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamAttention {
    /// Contextual weights, rows are query positions and columns key positions.
    pub beta_s: Vec<Vec<f64>>,
    /// Channel gates, one row per query position.
    pub beta_c: Vec<Vec<f64>>,
}

impl From<&BlockTrace> for StreamAttention {
    fn from(t: &BlockTrace) -> Self {
        Self {
            beta_s: t.beta_s.to_rows(),
            beta_c: t.beta_c.to_rows(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAttention {
    pub layer: usize,
    pub intent: StreamAttention,
    pub slot: StreamAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub tokens: Vec<String>,
    pub layers: Vec<LayerAttention>,
}

pub fn attention_dump<S: AsRef<str>>(model: &HanModel, tokens: &[S]) -> Result<AttentionDump> {
    let traces = model.attention(tokens)?;
    Ok(AttentionDump {
        tokens: tokens.iter().map(|t| t.as_ref().to_string()).collect(),
        layers: traces
            .iter()
            .enumerate()
            .map(|(layer, t)| LayerAttention {
                layer,
                intent: (&t.intent).into(),
                slot: (&t.slot).into(),
            })
            .collect(),
    })
}

impl AttentionDump {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::Vocab;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> HanModel {
        let config = ModelConfig {
            hidden: 6,
            embedding: 6,
            ..Default::default()
        };
        let vocab = Vocab::from_tokens(["what", "film", "is", "playing", "nearby"]);
        let labels = ["O", "B-movie_type", "B-spatial_relation"].map(String::from).to_vec();
        HanModel::new(config, vocab, vec!["SearchScreeningEvent".into()], labels, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn five_token_query_gives_square_maps() {
        let tokens = ["What", "film", "is", "playing", "nearby"];
        let dump = attention_dump(&model(), &tokens).unwrap();
        assert_eq!(dump.tokens, tokens);
        assert_eq!(dump.layers.len(), 2);
        for l in &dump.layers {
            for s in [&l.intent, &l.slot] {
                assert_eq!(s.beta_s.len(), 5);
                assert!(s.beta_s.iter().all(|r| r.len() == 5));
                for row in &s.beta_s {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
                assert_eq!(s.beta_c.len(), 5);
                assert!(s.beta_c.iter().flatten().all(|&c| c > 0.0 && c < 1.0));
            }
        }
    }

    #[test]
    fn single_token_weights_are_one() {
        let dump = attention_dump(&model(), &["film"]).unwrap();
        for l in &dump.layers {
            assert_eq!(l.intent.beta_s, [[1.0]]);
            assert_eq!(l.slot.beta_s, [[1.0]]);
        }
    }

    #[test]
    fn saved_document_parses_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("att.json");
        let dump = attention_dump(&model(), &["what", "film"]).unwrap();
        dump.save(&path).unwrap();
        let back: AttentionDump = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back, dump);
    }
}
