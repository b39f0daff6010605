//! Seeded template corpus where labels are a function of the tokens.
//!
//! Each intent owns two keyword tokens and each slot type owns four value
//! tokens. A span of one or two value tokens is always preceded by a filler
//! token, so adjacent spans never touch.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Utterance, OUTSIDE};

const FILLERS: [&str; 8] = ["the", "a", "please", "me", "for", "some", "to", "now"];
const KEYWORDS_PER_INTENT: usize = 2;
const VALUES_PER_TYPE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub utterances: usize,
    pub intents: usize,
    pub slot_types: usize,
    /// Upper bound on tokens per utterance; values below 3 are raised to 3.
    pub max_len: usize,
}

impl SyntheticSpec {
    pub fn generate(&self) -> Dataset {
        let n_intents = self.intents.max(1);
        let n_types = self.slot_types.max(1);
        let max_len = self.max_len.max(3);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut utterances = Vec::with_capacity(self.utterances);
        for i in 0..self.utterances {
            // the first utterances cycle through labels so every one appears
            let intent = if i < n_intents { i } else { rng.random_range(0..n_intents) };
            let keyword = format!("verb{intent}_{}", rng.random_range(0..KEYWORDS_PER_INTENT));
            let mut segments: Vec<Vec<(String, String)>> = vec![vec![(keyword, OUTSIDE.to_string())]];
            let mut used = 1;
            let wanted = rng.random_range(1..=3);
            for s in 0..wanted {
                let len = rng.random_range(1..=2);
                if used + 1 + len > max_len {
                    break;
                }
                let ty = if s == 0 && i < n_types { i } else { rng.random_range(0..n_types) };
                let mut seg = vec![(filler(&mut rng), OUTSIDE.to_string())];
                for k in 0..len {
                    let prefix = if k == 0 { "B" } else { "I" };
                    seg.push((format!("val{ty}_{}", rng.random_range(0..VALUES_PER_TYPE)), format!("{prefix}-TYPE{ty}")));
                }
                segments.push(seg);
                used += 1 + len;
            }
            if used < max_len && rng.random_bool(0.3) {
                segments.push(vec![(filler(&mut rng), OUTSIDE.to_string())]);
            }
            segments.shuffle(&mut rng);
            let (tokens, slots) = segments.into_iter().flatten().unzip();
            utterances.push(Utterance {
                tokens,
                slots,
                intent: format!("INTENT_{intent}"),
            });
        }
        Dataset::from_utterances(utterances).expect("generated utterances are well formed")
    }
}

fn filler(rng: &mut ChaCha8Rng) -> String {
    FILLERS.choose(rng).expect("non-empty").to_string()
}

pub fn gen_synthetic(seed: u64, utterances: usize, intents: usize, slot_types: usize, max_len: usize) -> Dataset {
    SyntheticSpec {
        seed,
        utterances,
        intents,
        slot_types,
        max_len,
    }
    .generate()
}
