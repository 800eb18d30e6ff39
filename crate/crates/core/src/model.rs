//! Pooled encoder-decoder: blockwise encoder layers with optional pooling
//! after each layer, and a causal decoder cross-attending to the pooled
//! memory. Input and output embeddings are shared.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    decoder_layer, encoder_layer, layer_norm, sinusoidal_positions, AttentionConfig, DecoderLayerParams,
    EncoderLayerParams, NormParams,
};
use crate::error::{config, contract, Error, Result};
use crate::matrix::Matrix;
use crate::params::{Bound, ParamId, ParamStore};
use crate::scorers::{compute_scores, window_pool, ScorerSpec};
use crate::tape::{Tape, Var};
use crate::topk::{hard_topk, successive_halving_topk, PoolConfig, PAD_SCORE_OFFSET};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Number of reserved token ids.
pub const SPECIAL_TOKENS: usize = 3;

/// Output length after each encoder layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct PoolSchedule(Vec<usize>);

impl PoolSchedule {
    pub fn new(lengths: Vec<usize>) -> Result<Self> {
        if lengths.is_empty() {
            return Err(config("pool schedule is empty"));
        }
        if lengths.contains(&0) {
            return Err(config("pool schedule entries must be positive"));
        }
        for w in lengths.windows(2) {
            if w[1] > w[0] {
                return Err(config(format!("pool schedule increases from {} to {}", w[0], w[1])));
            }
            check_ratio(w[0], w[1])?;
        }
        Ok(Self(lengths))
    }

    /// No pooling: every layer keeps all `n` rows.
    pub fn identity(n: usize, layers: usize) -> Result<Self> {
        Self::new(vec![n; layers])
    }

    /// A single pooling step to `k` after the last layer.
    pub fn single_pool(n: usize, layers: usize, k: usize) -> Result<Self> {
        if layers == 0 {
            return Err(config("pool schedule is empty"));
        }
        let mut lengths = vec![n; layers];
        lengths[layers - 1] = k;
        Self::new(lengths)
    }

    pub fn lengths(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Decoder memory size.
    pub fn final_len(&self) -> usize {
        *self.0.last().expect("validated non-empty")
    }

    /// Checks the step from the input length to the first entry.
    pub fn validate_for(&self, n: usize) -> Result<()> {
        if self.0[0] > n {
            return Err(config(format!("pool schedule starts at {} above input length {n}", self.0[0])));
        }
        check_ratio(n, self.0[0])
    }
}

fn check_ratio(from: usize, to: usize) -> Result<()> {
    if from % to != 0 || !(from / to).is_power_of_two() {
        return Err(config(format!("reduction {from} -> {to} is not a power-of-two ratio")));
    }
    Ok(())
}

impl TryFrom<Vec<usize>> for PoolSchedule {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PoolSchedule> for Vec<usize> {
    fn from(s: PoolSchedule) -> Self {
        s.0
    }
}

/// Comma-separated lengths, e.g. `512,512,128,32`.
impl FromStr for PoolSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lengths = s
            .split(',')
            .map(|part| {
                let part = part.trim();
                part.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad schedule entry {part:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(lengths)
    }
}

impl fmt::Display for PoolSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

/// Selection operator used where the schedule shrinks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PoolerKind {
    SuccessiveHalving { tau: f64, sort: bool },
    /// Exact top-k; scorers receive no gradient through it.
    Hard,
}

impl Default for PoolerKind {
    fn default() -> Self {
        PoolerKind::SuccessiveHalving { tau: 1.0, sort: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_input_len: usize,
    pub max_target_len: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub attention: AttentionConfig,
    pub schedule: PoolSchedule,
    /// Window kinds pool with window and stride equal to the reduction
    /// ratio of each step; index kinds mark the step's output length.
    pub scorer: ScorerSpec,
    #[serde(default)]
    pub pooler: PoolerKind,
    /// Start the final decoder norm gain at zero so initial logits are flat.
    pub zero_init_head: bool,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Desk-scale model: d 64, 4 heads, ffn 256, blocks of 64, pooling
    /// 256 rows to 32 after the last of two encoder layers.
    pub fn desk(vocab_size: usize, max_target_len: usize) -> Self {
        Self {
            vocab_size,
            max_input_len: 256,
            max_target_len,
            encoder_layers: 2,
            decoder_layers: 2,
            attention: AttentionConfig::default(),
            schedule: PoolSchedule::single_pool(256, 2, 32).expect("valid"),
            scorer: ScorerSpec::Linear,
            pooler: PoolerKind::default(),
            zero_init_head: true,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.vocab_size <= SPECIAL_TOKENS {
            return Err(config(format!("vocabulary of {} leaves no regular tokens", self.vocab_size)));
        }
        if self.max_input_len == 0 || self.max_target_len == 0 {
            return Err(config("input and target lengths must be positive"));
        }
        if self.encoder_layers == 0 {
            return Err(config("at least one encoder layer is required"));
        }
        if self.schedule.len() != self.encoder_layers {
            return Err(config(format!(
                "schedule has {} entries for {} encoder layers",
                self.schedule.len(),
                self.encoder_layers
            )));
        }
        self.schedule.validate_for(self.max_input_len)?;
        if self.attention.d_model % 2 != 0 {
            return Err(config("d_model must be even for positional encodings"));
        }
        self.scorer.validate(self.attention.d_model)?;
        if let PoolerKind::SuccessiveHalving { tau, .. } = self.pooler {
            if !(tau >= 1.0 && tau.is_finite()) {
                return Err(config(format!("tau must be finite and at least 1, got {tau}")));
            }
        }
        Ok(())
    }

    /// Lengths entering each encoder layer followed by the memory length.
    fn length_steps(&self) -> Vec<usize> {
        let mut v = vec![self.max_input_len];
        v.extend_from_slice(self.schedule.lengths());
        v
    }
}

/// Parameter handles of a [`Model`], in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub embedding: ParamId,
    pub encoder: Vec<EncoderLayerParams>,
    /// Scorer parameters used after each encoder layer (empty when the
    /// layer does not pool or the scorer is not trainable).
    pub scorers: Vec<Vec<ParamId>>,
    pub encoder_norm: NormParams,
    pub decoder: Vec<DecoderLayerParams>,
    pub decoder_norm: NormParams,
}

/// Scores seen by the pooler at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTrace {
    pub layer: usize,
    /// Original input position each scored row is attributed to.
    pub positions: Vec<usize>,
    pub scores: Vec<f64>,
    /// Smallest neighbour gap seen by the tournament sort; infinite for
    /// the hard pooler.
    pub min_gap: f64,
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub memory: Var,
    /// Rows of memory that are real tokens; `None` when all are.
    pub memory_valid: Option<Vec<bool>>,
    /// Output length of every encoder layer.
    pub lengths: Vec<usize>,
    pub traces: Vec<ScoreTrace>,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    /// Mean token cross-entropy, `1 x 1`.
    pub loss: Var,
    /// `len x vocab`.
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

fn mix_seed(seed: u64, nonce: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ nonce.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let d = config.attention.d_model;
        let mut params = ParamStore::new();

        let a = (3.0 / d as f64).sqrt();
        let embedding = params.add("embedding", Matrix::uniform(config.vocab_size, d, -a, a, &mut rng));
        let steps = config.length_steps();
        let mut encoder = Vec::with_capacity(config.encoder_layers);
        let mut scorers = Vec::with_capacity(config.encoder_layers);
        for layer in 0..config.encoder_layers {
            let name = format!("encoder.{layer}");
            encoder.push(EncoderLayerParams::init(&mut params, &name, &config.attention, &mut rng));
            let ids = if steps[layer + 1] < steps[layer] {
                let values = config.scorer.init_params(d, &mut rng);
                values
                    .into_iter()
                    .enumerate()
                    .map(|(i, m)| params.add(format!("{name}.scorer.{i}"), m))
                    .collect()
            } else {
                Vec::new()
            };
            scorers.push(ids);
        }
        let encoder_norm = NormParams::init(&mut params, "encoder.norm", d);
        let decoder = (0..config.decoder_layers)
            .map(|layer| DecoderLayerParams::init(&mut params, &format!("decoder.{layer}"), &config.attention, &mut rng))
            .collect();
        let decoder_norm = NormParams::init(&mut params, "decoder.norm", d);
        if config.zero_init_head {
            *params.get_mut(decoder_norm.gain) = Matrix::zeros(1, d);
        }
        let layout = Layout {
            embedding,
            encoder,
            scorers,
            encoder_norm,
            decoder,
            decoder_norm,
        };
        Ok(Self { config, params, layout })
    }

    /// Rebuilds a model from a configuration and stored parameter values.
    pub fn from_parts(config: ModelConfig, values: Vec<Matrix>) -> Result<Self> {
        let mut model = Self::new(config)?;
        if values.len() != model.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                values.len()
            )));
        }
        for (slot, value) in model.params.values_mut().iter_mut().zip(values) {
            if slot.shape() != value.shape() {
                return Err(Error::Format(format!(
                    "parameter shape {:?} does not match {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Ids of every scorer parameter.
    pub fn scorer_params(&self) -> Vec<ParamId> {
        self.layout.scorers.iter().flatten().copied().collect()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(contract(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn embed(&self, tape: &mut Tape, b: &Bound, tokens: &[usize]) -> Result<Var> {
        let e = tape.gather_rows(b[self.layout.embedding], tokens)?;
        Ok(tape.scale(e, (self.config.attention.d_model as f64).sqrt()))
    }

    /// Runs the encoder on up to `max_input_len` tokens, padding the rest.
    /// `nonce` varies the random scorer between calls.
    pub fn encode(&self, tape: &mut Tape, b: &Bound, tokens: &[usize], nonce: u64) -> Result<Encoded> {
        let cfg = &self.config;
        let n = cfg.max_input_len;
        if tokens.is_empty() || tokens.len() > n {
            return Err(contract(format!("expected 1..={n} input tokens, got {}", tokens.len())));
        }
        self.check_tokens(tokens)?;
        let mut ids = tokens.to_vec();
        ids.resize(n, PAD);
        let mut key_valid = (tokens.len() < n).then(|| (0..n).map(|i| i < tokens.len()).collect::<Vec<_>>());

        let emb = self.embed(tape, b, &ids)?;
        let pos = tape.leaf(sinusoidal_positions(n, cfg.attention.d_model)?);
        let mut x = tape.add(emb, pos)?;
        let mut origin: Vec<usize> = (0..n).collect();
        let mut lengths = Vec::with_capacity(cfg.encoder_layers);
        let mut traces = Vec::new();

        for (layer, params) in self.layout.encoder.iter().enumerate() {
            let out = encoder_layer(tape, x, params, &cfg.attention, key_valid.as_deref(), b)?;
            x = out.out;
            let len = tape.shape(x).0;
            let target = cfg.schedule.lengths()[layer];
            if target < len {
                let ratio = len / target;
                if let Some((mode, _, _)) = cfg.scorer.window() {
                    x = window_pool(tape, x, mode, ratio, ratio)?;
                    origin = origin.into_iter().step_by(ratio).collect();
                } else {
                    let ctx = matches!(cfg.scorer, ScorerSpec::PowerLike).then(|| out.attention.averaged_probs(tape));
                    let spec = match cfg.scorer {
                        ScorerSpec::Index { .. } => ScorerSpec::Index { k: target },
                        ScorerSpec::Random { seed } => ScorerSpec::Random {
                            seed: mix_seed(seed, nonce ^ (layer as u64) << 48),
                        },
                        ref other => other.clone(),
                    };
                    let scorer_vars: Vec<Var> = self.layout.scorers[layer].iter().map(|&id| b[id]).collect();
                    let mut v = compute_scores(tape, x, &spec, &scorer_vars, ctx.as_ref())?;

                    let raw = tape.value(v).data().to_vec();
                    let valid_rows: Vec<usize> = match &key_valid {
                        Some(valid) => (0..len).filter(|&i| valid[i]).collect(),
                        None => (0..len).collect(),
                    };
                    let mut trace = ScoreTrace {
                        layer,
                        positions: valid_rows.iter().map(|&i| origin[i]).collect(),
                        scores: valid_rows.iter().map(|&i| raw[i]).collect(),
                        min_gap: f64::INFINITY,
                    };
                    if let Some(valid) = &key_valid {
                        let penalty = Matrix::new(
                            len,
                            1,
                            valid.iter().map(|&ok| if ok { 0.0 } else { -PAD_SCORE_OFFSET }).collect(),
                        )?;
                        let penalty = tape.leaf(penalty);
                        v = tape.add(v, penalty)?;
                    }

                    let picked = match cfg.pooler {
                        PoolerKind::SuccessiveHalving { tau, sort } => {
                            let pool = PoolConfig {
                                k: target,
                                tau,
                                sort,
                                restore_order: true,
                            };
                            let out = successive_halving_topk(tape, x, v, &pool)?;
                            x = out.pooled;
                            trace.min_gap = out.min_score_gap;
                            out.provenance
                        }
                        PoolerKind::Hard => {
                            let (pooled, idx) = hard_topk(tape, x, v, target)?;
                            x = pooled;
                            idx
                        }
                    };
                    origin = picked.into_iter().map(|i| origin[i]).collect();
                    traces.push(trace);
                }
                key_valid = None;
            }
            lengths.push(tape.shape(x).0);
        }
        let memory = layer_norm(tape, x, &self.layout.encoder_norm, b)?;
        Ok(Encoded {
            memory,
            memory_valid: key_valid,
            lengths,
            traces,
        })
    }

    /// Decoder logits for `input` tokens over `memory`.
    pub fn decoder_logits(
        &self,
        tape: &mut Tape,
        b: &Bound,
        memory: Var,
        memory_valid: Option<&[bool]>,
        input: &[usize],
    ) -> Result<Var> {
        self.check_tokens(input)?;
        let mut x = self.embed(tape, b, input)?;
        for params in &self.layout.decoder {
            x = decoder_layer(tape, x, memory, params, &self.config.attention, memory_valid, b)?.out;
        }
        let h = layer_norm(tape, x, &self.layout.decoder_norm, b)?;
        let et = tape.transpose(b[self.layout.embedding]);
        tape.matmul(h, et)
    }

    /// Teacher-forced decoding of `targets` (which should end with
    /// [`EOS`]); the decoder input is `BOS` followed by all but the last
    /// target.
    pub fn decode_train(&self, tape: &mut Tape, b: &Bound, encoded: &Encoded, targets: &[usize]) -> Result<Decoded> {
        let t = self.config.max_target_len;
        if targets.is_empty() || targets.len() > t {
            return Err(contract(format!("expected 1..={t} target tokens, got {}", targets.len())));
        }
        self.check_tokens(targets)?;
        let mut input = Vec::with_capacity(targets.len());
        input.push(BOS);
        input.extend_from_slice(&targets[..targets.len() - 1]);
        let logits = self.decoder_logits(tape, b, encoded.memory, encoded.memory_valid.as_deref(), &input)?;
        let gold: Vec<Option<usize>> = targets.iter().map(|&t| Some(t)).collect();
        let loss = tape.cross_entropy(logits, &gold)?;
        Ok(Decoded { loss, logits })
    }

    /// Loss and parameter gradients (declaration order) for one example.
    pub fn loss_and_grads(&self, tokens: &[usize], targets: &[usize], nonce: u64) -> Result<(f64, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let enc = self.encode(&mut tape, &b, tokens, nonce)?;
        let dec = self.decode_train(&mut tape, &b, &enc, targets)?;
        let grads = tape.backward(dec.loss)?;
        let g = b.vars().iter().map(|&v| grads.get(v)).collect();
        Ok((tape.value(dec.loss).item(), g))
    }

    /// Encoder memory as plain values.
    pub fn encode_values(&self, tokens: &[usize], nonce: u64) -> Result<(Matrix, Option<Vec<bool>>, Vec<ScoreTrace>)> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let enc = self.encode(&mut tape, &b, tokens, nonce)?;
        Ok((tape.value(enc.memory).clone(), enc.memory_valid, enc.traces))
    }

    /// Argmax decoding from `BOS` until [`EOS`] or `max_len` tokens. The
    /// returned sequence excludes `EOS`; ties go to the lowest id.
    pub fn greedy_decode(&self, memory: &Matrix, memory_valid: Option<&[bool]>, max_len: usize) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let mem = tape.leaf(memory.clone());
        let mut input = vec![BOS];
        let mut out = Vec::new();
        while out.len() < max_len {
            let logits = self.decoder_logits(&mut tape, &b, mem, memory_valid, &input)?;
            let z = tape.value(logits);
            let last = z.row(z.rows() - 1);
            let mut best = 0;
            for (i, &x) in last.iter().enumerate() {
                if x > last[best] {
                    best = i;
                }
            }
            if best == EOS {
                break;
            }
            out.push(best);
            input.push(best);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::Rng;

    fn micro(pooler: PoolerKind, zero_head: bool, seed: u64) -> Model {
        Model::new(ModelConfig {
            vocab_size: 11,
            max_input_len: 16,
            max_target_len: 5,
            encoder_layers: 1,
            decoder_layers: 1,
            attention: AttentionConfig {
                d_model: 8,
                heads: 2,
                ffn_dim: 16,
                block_size: 8,
                dropout: 0.0,
            },
            schedule: PoolSchedule::new(vec![4]).unwrap(),
            scorer: ScorerSpec::Linear,
            pooler,
            zero_init_head: zero_head,
            init_seed: seed,
        })
        .unwrap()
    }

    fn sample(seed: u64, n: usize, vocab: usize) -> (Vec<usize>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = (0..n).map(|_| rng.gen_range(SPECIAL_TOKENS..vocab)).collect();
        let mut targets: Vec<usize> = (0..3).map(|_| rng.gen_range(SPECIAL_TOKENS..vocab)).collect();
        targets.push(EOS);
        (tokens, targets)
    }

    #[test]
    fn schedule_parsing_and_validation() {
        let s: PoolSchedule = "512, 512,128,32,32,32".parse().unwrap();
        assert_eq!(s.lengths(), &[512, 512, 128, 32, 32, 32]);
        assert_eq!(s.to_string(), "512,512,128,32,32,32");
        assert_eq!(s.final_len(), 32);
        assert!("512,640".parse::<PoolSchedule>().is_err());
        assert!("512,96".parse::<PoolSchedule>().is_err());
        assert!(matches!("a,b".parse::<PoolSchedule>(), Err(Error::Format(_))));
        assert!("".parse::<PoolSchedule>().is_err());
        assert!("0".parse::<PoolSchedule>().is_err());
        assert!(s.validate_for(512).is_ok());
        assert!(s.validate_for(768).is_err());
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, "[512,512,128,32,32,32]");
        assert!(serde_json::from_str::<PoolSchedule>("[4,8]").is_err());
    }

    #[test]
    fn config_rejects_mismatched_schedule() {
        let mut c = ModelConfig::desk(40, 9);
        c.encoder_layers = 3;
        assert!(matches!(Model::new(c), Err(Error::Config(_))));
        let mut c = ModelConfig::desk(40, 9);
        c.schedule = PoolSchedule::new(vec![512, 32]).unwrap();
        assert!(Model::new(c).is_err());
    }

    #[test]
    fn schedule_shapes_memory() {
        let mut c = ModelConfig::desk(40, 9);
        c.max_input_len = 512;
        c.encoder_layers = 6;
        c.decoder_layers = 1;
        c.attention.d_model = 16;
        c.attention.ffn_dim = 16;
        c.schedule = "512,512,128,32,32,32".parse().unwrap();
        let model = Model::new(c).unwrap();
        let tokens = vec![5; 512];
        let mut tape = Tape::new();
        let b = model.params().bind(&mut tape);
        let enc = model.encode(&mut tape, &b, &tokens, 0).unwrap();
        assert_eq!(enc.lengths, vec![512, 512, 128, 32, 32, 32]);
        assert_eq!(tape.shape(enc.memory), (32, 16));
        assert_eq!(enc.traces.len(), 2);
    }

    #[test]
    fn memory_rows_follow_schedule_for_short_inputs() {
        let model = micro(PoolerKind::default(), false, 1);
        for len in [1, 3, 4, 9, 16] {
            let (tokens, _) = sample(len as u64, len, 11);
            let (memory, valid, traces) = model.encode_values(&tokens, 0).unwrap();
            assert_eq!(memory.rows(), 4);
            assert!(valid.is_none());
            assert_eq!(traces[0].positions.len(), len);
        }
        assert!(model.encode_values(&[], 0).is_err());
        assert!(model.encode_values(&[3; 17], 0).is_err());
    }

    #[test]
    fn identity_schedule_keeps_all_rows() {
        let mut c = ModelConfig::desk(20, 4);
        c.max_input_len = 32;
        c.attention.block_size = 8;
        c.schedule = PoolSchedule::identity(32, 2).unwrap();
        let model = Model::new(c).unwrap();
        assert!(model.scorer_params().is_empty());
        let (memory, valid, traces) = model.encode_values(&[4; 20], 0).unwrap();
        assert_eq!(memory.rows(), 32);
        assert_eq!(valid.unwrap().iter().filter(|&&v| v).count(), 20);
        assert!(traces.is_empty());
    }

    #[test]
    fn zero_head_gives_uniform_loss() {
        let model = micro(PoolerKind::default(), true, 2);
        let (tokens, targets) = sample(3, 16, 11);
        let (loss, _) = model.loss_and_grads(&tokens, &targets, 0).unwrap();
        assert_eq!(loss, 11f64.ln());
        let (memory, valid, _) = model.encode_values(&tokens, 0).unwrap();
        let out = model.greedy_decode(&memory, valid.as_deref(), 6).unwrap();
        assert_eq!(out, vec![0; 6]);
    }

    #[test]
    fn greedy_output_is_bounded() {
        let model = micro(PoolerKind::default(), false, 4);
        for seed in 0..5 {
            let (tokens, _) = sample(seed, 16, 11);
            let (memory, valid, _) = model.encode_values(&tokens, 0).unwrap();
            for max_len in [0, 1, 3, 7] {
                assert!(model.greedy_decode(&memory, valid.as_deref(), max_len).unwrap().len() <= max_len);
            }
        }
    }

    #[test]
    fn unknown_tokens_rejected() {
        let model = micro(PoolerKind::default(), false, 5);
        let (tokens, mut targets) = sample(6, 16, 11);
        targets[0] = 11;
        assert!(matches!(model.loss_and_grads(&tokens, &targets, 0), Err(Error::Contract(_))));
        assert!(model.loss_and_grads(&[11; 16], &[EOS], 0).is_err());
        assert!(model.loss_and_grads(&tokens, &[3; 6], 0).is_err());
    }

    #[test]
    fn scorer_gradient_depends_on_pooler() {
        let soft = micro(PoolerKind::default(), false, 7);
        let hard = micro(PoolerKind::Hard, false, 7);
        let ids = soft.scorer_params();
        assert_eq!(ids.len(), 2);
        let (tokens, targets) = sample(8, 16, 11);
        let (_, gs) = soft.loss_and_grads(&tokens, &targets, 0).unwrap();
        let (_, gh) = hard.loss_and_grads(&tokens, &targets, 0).unwrap();
        assert!(gs[ids[0].index()].data().iter().any(|&x| x != 0.0));
        for id in ids {
            assert!(gh[id.index()].data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn micro_model_gradients_match_finite_differences() {
        let mut checked = 0;
        for seed in 0..4 {
            let mut model = micro(PoolerKind::SuccessiveHalving { tau: 1.0, sort: true }, false, 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            for m in model.params_mut().values_mut() {
                let (r, c) = m.shape();
                *m = m.add(&Matrix::uniform(r, c, -0.2, 0.2, &mut rng)).unwrap();
            }
            let (tokens, targets) = sample(300 + seed, 16, 11);
            let report = check_gradients(model.params().values(), 1e-5, 1e-5, |t, v| {
                let b = Bound::new(v.to_vec());
                let enc = model.encode(t, &b, &tokens, 0)?;
                Ok(model.decode_train(t, &b, &enc, &targets)?.loss)
            })
            .unwrap();
            assert!(report.pass, "seed {seed}: worst {}", report.worst());
            checked += 1;
        }
        assert_eq!(checked, 4);
    }

    #[test]
    fn random_scorer_varies_with_nonce() {
        let mut c = micro(PoolerKind::default(), false, 9).config().clone();
        c.scorer = ScorerSpec::Random { seed: 3 };
        let model = Model::new(c).unwrap();
        let (tokens, _) = sample(10, 16, 11);
        let a = model.encode_values(&tokens, 0).unwrap().2;
        let b = model.encode_values(&tokens, 0).unwrap().2;
        let c = model.encode_values(&tokens, 1).unwrap().2;
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn every_scorer_kind_runs() {
        let base = micro(PoolerKind::default(), false, 11).config().clone();
        let (tokens, targets) = sample(12, 16, 11);
        for name in ["linear", "nonlinear", "power-like", "embedding", "random", "index", "mean-window", "max-window"] {
            let mut c = base.clone();
            c.scorer = ScorerSpec::from_name(name).unwrap();
            let model = Model::new(c).unwrap();
            let (loss, _) = model.loss_and_grads(&tokens, &targets, 0).unwrap();
            assert!(loss.is_finite(), "{name}");
            let (memory, _, _) = model.encode_values(&tokens, 0).unwrap();
            assert_eq!(memory.rows(), 4, "{name}");
        }
    }
}
