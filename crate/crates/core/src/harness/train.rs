//! Mini-batch training with per-epoch evaluation and best-checkpoint tracking.

use std::io::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{load_conll, Dataset, EncodedLabels, EvalReport, Utterance};
use crate::embedder::WordVectors;
use crate::error::{Error, Result};
use crate::model::HanModel;
use crate::numerics::Graph;

use super::config::Config;
use super::optim::{radam_step, TrainState};

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-utterance loss over the epoch; absent for the initial evaluation.
    pub train_loss: Option<f64>,
    pub steps: u64,
    pub dev: EvalReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev overall accuracy.
    pub best: HanModel,
    /// Parameters after the last epoch.
    pub last: HanModel,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn best_report(&self) -> &EvalReport {
        &self.log[self.best_epoch].dev
    }

    /// The metrics log as JSON lines.
    pub fn metrics_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for entry in &self.log {
            out.push_str(&serde_json::to_string(entry)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn lowercase_all(utterances: &mut [Utterance]) {
    for u in utterances {
        for t in &mut u.tokens {
            *t = t.to_lowercase();
        }
    }
}

/// Training and dev sets named by `config`. Dev labels must be covered by the
/// training inventories.
pub fn load_data(config: &Config) -> Result<(Dataset, Dataset)> {
    let mut train = match &config.train {
        Some(path) => load_conll(path)?,
        None => config.synthetic().generate(),
    };
    if config.lowercase {
        lowercase_all(&mut train.utterances);
        train = Dataset::from_utterances(train.utterances)?;
    }
    if train.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let dev = match &config.dev {
        Some(path) => {
            let mut utts = load_conll(path)?.utterances;
            if config.lowercase {
                lowercase_all(&mut utts);
            }
            Dataset::with_inventories(utts, &train)?
        }
        None => train.clone(),
    };
    Ok((train, dev))
}

/// Loads the data named by `config` and trains on it.
pub fn train(config: &Config) -> Result<TrainOutcome> {
    let (train_set, dev_set) = load_data(config)?;
    train_on(config, &train_set, &dev_set)
}

/// Trains a fresh model on `train_set`, evaluating on `dev_set` after every epoch.
pub fn train_on(config: &Config, train_set: &Dataset, dev_set: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    if dev_set.slot_labels != train_set.slot_labels || dev_set.intents != train_set.intents {
        Dataset::with_inventories(dev_set.utterances.clone(), train_set)?;
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = HanModel::for_dataset(config.model(), train_set, &mut init_rng)?;
    if let Some(path) = &config.word_vectors {
        WordVectors::load(path)?.apply(&mut model.params, &model.vocab)?;
    }

    let index = train_set.index();
    let examples: Vec<(Vec<usize>, EncodedLabels)> = train_set
        .utterances
        .iter()
        .map(|u| Ok((model.encode_tokens(&u.tokens), index.encode(u)?)))
        .collect::<Result<_>>()?;

    let optimizer = config.optimizer();
    let mut state = TrainState::default();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..examples.len()).collect();

    let mut log = vec![EpochLog {
        epoch: 0,
        train_loss: None,
        steps: 0,
        dev: model.evaluate(&dev_set.utterances)?,
    }];
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut metrics_file = match &config.metrics_log {
        Some(path) => Some(std::fs::File::create(path).map_err(|e| Error::io(path, e))?),
        None => None,
    };
    let mut emit = |entry: &EpochLog| -> Result<()> {
        if let (Some(f), Some(path)) = (metrics_file.as_mut(), &config.metrics_log) {
            writeln!(f, "{}", serde_json::to_string(entry)?).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    };
    emit(&log[0])?;

    for epoch in 1..=config.epochs {
        if reached(config, &log.last().expect("non-empty").dev) {
            break;
        }
        order.shuffle(&mut shuffle_rng);
        let mut total_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            model.params.zero_grads();
            for &i in batch {
                let (ids, gold) = &examples[i];
                let mut g = Graph::new();
                let loss = model.loss(&mut g, ids, gold)?;
                total_loss += g.value(loss).data()[0];
                g.backward(loss)?.accumulate_into(&g, &mut model.params)?;
            }
            let scale = 1.0 / batch.len() as f64;
            for (_, p) in model.params.iter_mut() {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
            }
            radam_step(&mut model.params, &mut state, &optimizer)?;
        }
        let entry = EpochLog {
            epoch,
            train_loss: Some(total_loss / examples.len() as f64),
            steps: state.step,
            dev: model.evaluate(&dev_set.utterances)?,
        };
        emit(&entry)?;
        if entry.dev.overall_acc > log[best_epoch].dev.overall_acc {
            best = model.clone();
            best_epoch = epoch;
        }
        log.push(entry);
    }

    best.params.zero_grads();
    model.params.zero_grads();
    if let Some(path) = &config.checkpoint {
        best.save(path)?;
    }
    Ok(TrainOutcome {
        best,
        last: model,
        best_epoch,
        log,
    })
}

fn reached(config: &Config, report: &EvalReport) -> bool {
    config.stop_at_overall.is_some_and(|t| report.overall_acc >= t)
}
