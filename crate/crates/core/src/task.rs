//! Synthetic needle task: a few payload tokens hidden among noise must be
//! copied, in position order, to the output.
//!
//! Token ids are laid out as the specials, then the payload vocabulary, then
//! the noise vocabulary. The payload vocabulary is split into one slot per
//! payload; the i-th payload in position order is drawn from slot i.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::model::{EOS, SPECIAL_TOKENS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub seq_len: usize,
    pub payload_count: usize,
    pub payload_vocab: usize,
    pub noise_vocab: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            seq_len: 256,
            payload_count: 8,
            payload_vocab: 32,
            noise_vocab: 64,
            seed: 0,
        }
    }
}

impl TaskConfig {
    /// Checks `payload_count <= pool_k <= seq_len` and the vocabulary split.
    pub fn validate(&self, pool_k: usize) -> Result<()> {
        if self.payload_count == 0 {
            return Err(config("payload_count must be positive"));
        }
        if self.payload_count > pool_k || pool_k > self.seq_len {
            return Err(config(format!(
                "need payload_count {} <= pooled length {} <= seq_len {}",
                self.payload_count, pool_k, self.seq_len
            )));
        }
        if self.payload_vocab < self.payload_count {
            return Err(config(format!(
                "payload_vocab {} cannot give each of {} payloads its own slot",
                self.payload_vocab, self.payload_count
            )));
        }
        if self.noise_vocab == 0 {
            return Err(config("noise_vocab must be positive"));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        SPECIAL_TOKENS + self.payload_vocab + self.noise_vocab
    }

    /// Target length including the end token.
    pub fn target_len(&self) -> usize {
        self.payload_count + 1
    }

    pub fn is_payload(&self, token: usize) -> bool {
        (SPECIAL_TOKENS..SPECIAL_TOKENS + self.payload_vocab).contains(&token)
    }

    fn slot_width(&self) -> usize {
        self.payload_vocab / self.payload_count
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeedleSample {
    pub tokens: Vec<usize>,
    /// Ascending positions of the payload tokens.
    pub payload_positions: Vec<usize>,
    /// Payload tokens in position order followed by the end token.
    pub target: Vec<usize>,
}

impl NeedleSample {
    /// Per-position flag: is this a payload token.
    pub fn payload_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.tokens.len()];
        for &p in &self.payload_positions {
            mask[p] = true;
        }
        mask
    }
}

/// Deterministic stream of samples for one seed.
#[derive(Clone, Debug)]
pub struct NeedleGenerator {
    config: TaskConfig,
    rng: ChaCha8Rng,
}

impl NeedleGenerator {
    pub fn new(config: TaskConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self { config, rng }
    }

    /// Stream seeded independently of [`TaskConfig::seed`] but derived from it.
    pub fn with_stream(config: TaskConfig, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(stream);
        Self { config, rng }
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    pub fn sample(&mut self) -> NeedleSample {
        let c = &self.config;
        let noise_start = SPECIAL_TOKENS + c.payload_vocab;
        let mut tokens: Vec<usize> = (0..c.seq_len)
            .map(|_| noise_start + self.rng.gen_range(0..c.noise_vocab))
            .collect();
        let mut positions = sample(&mut self.rng, c.seq_len, c.payload_count).into_vec();
        positions.sort_unstable();
        let width = c.slot_width();
        let mut target = Vec::with_capacity(c.payload_count + 1);
        for (slot, &p) in positions.iter().enumerate() {
            let token = SPECIAL_TOKENS + slot * width + self.rng.gen_range(0..width);
            tokens[p] = token;
            target.push(token);
        }
        target.push(EOS);
        NeedleSample {
            tokens,
            payload_positions: positions,
            target,
        }
    }

    pub fn batch(&mut self, size: usize) -> Vec<NeedleSample> {
        (0..size).map(|_| self.sample()).collect()
    }
}
