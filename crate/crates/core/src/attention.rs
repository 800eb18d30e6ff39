//! Transformer building blocks: projections, layer norm, multi-head and
//! blockwise attention, pre-norm encoder and decoder layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::matrix::Matrix;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Additive logit for masked keys. Finite so fully masked rows stay defined.
pub const MASKED: f64 = -1e9;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Rows per self-attention chunk; 0 attends over the whole sequence.
    pub block_size: usize,
    /// Kept for configuration parity. Only 0 is accepted: training is
    /// deterministic and gradients are checked exactly.
    #[serde(default)]
    pub dropout: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            ffn_dim: 256,
            block_size: 64,
            dropout: 0.0,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(config("d_model, heads and ffn_dim must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.dropout != 0.0 {
            return Err(config(format!("dropout {} is not supported, use 0", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Chunk length used for a sequence of `len` rows.
    pub fn block_for(&self, len: usize) -> usize {
        if self.block_size == 0 {
            len
        } else {
            self.block_size.min(len)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: store.add_glorot(format!("{name}.weight"), d_in, d_out, rng),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, d_out)),
        }
    }
}

pub fn linear(tape: &mut Tape, x: Var, p: &LinearParams, b: &Bound) -> Result<Var> {
    let y = tape.matmul(x, b[p.weight])?;
    tape.add_row(y, b[p.bias])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    pub fn init(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Matrix::ones(1, d)),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, d)),
        }
    }
}

pub fn layer_norm(tape: &mut Tape, x: Var, p: &NormParams, b: &Bound) -> Result<Var> {
    tape.layer_norm(x, b[p.gain], b[p.bias], LAYER_NORM_EPS)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultiHeadParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub output: LinearParams,
}

impl MultiHeadParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        Self {
            query: LinearParams::init(store, &format!("{name}.query"), d, d, rng),
            key: LinearParams::init(store, &format!("{name}.key"), d, d, rng),
            value: LinearParams::init(store, &format!("{name}.value"), d, d, rng),
            output: LinearParams::init(store, &format!("{name}.output"), d, d, rng),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeedForwardParams {
    pub inner: LinearParams,
    pub outer: LinearParams,
}

impl FeedForwardParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, ffn: usize, rng: &mut R) -> Self {
        Self {
            inner: LinearParams::init(store, &format!("{name}.inner"), d, ffn, rng),
            outer: LinearParams::init(store, &format!("{name}.outer"), ffn, d, rng),
        }
    }
}

/// Two-layer ReLU network applied row-wise.
pub fn feed_forward(tape: &mut Tape, x: Var, p: &FeedForwardParams, b: &Bound) -> Result<Var> {
    let h = linear(tape, x, &p.inner, b)?;
    let h = tape.relu(h);
    linear(tape, h, &p.outer, b)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderLayerParams {
    pub attn_norm: NormParams,
    pub attn: MultiHeadParams,
    pub ffn_norm: NormParams,
    pub ffn: FeedForwardParams,
}

impl EncoderLayerParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &AttentionConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Self {
            attn_norm: NormParams::init(store, &format!("{name}.attn_norm"), d),
            attn: MultiHeadParams::init(store, &format!("{name}.attn"), d, rng),
            ffn_norm: NormParams::init(store, &format!("{name}.ffn_norm"), d),
            ffn: FeedForwardParams::init(store, &format!("{name}.ffn"), d, cfg.ffn_dim, rng),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderLayerParams {
    pub self_norm: NormParams,
    pub self_attn: MultiHeadParams,
    pub cross_norm: NormParams,
    pub cross_attn: MultiHeadParams,
    pub ffn_norm: NormParams,
    pub ffn: FeedForwardParams,
}

impl DecoderLayerParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &AttentionConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Self {
            self_norm: NormParams::init(store, &format!("{name}.self_norm"), d),
            self_attn: MultiHeadParams::init(store, &format!("{name}.self_attn"), d, rng),
            cross_norm: NormParams::init(store, &format!("{name}.cross_norm"), d),
            cross_attn: MultiHeadParams::init(store, &format!("{name}.cross_attn"), d, rng),
            ffn_norm: NormParams::init(store, &format!("{name}.ffn_norm"), d),
            ffn: FeedForwardParams::init(store, &format!("{name}.ffn"), d, cfg.ffn_dim, rng),
        }
    }
}

/// `softmax(Q K^T / sqrt(d_h) + mask) V`, returning the output and the
/// attention probabilities.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: Option<&Matrix>) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (tape.shape(q), tape.shape(k), tape.shape(v));
    if qs.1 != ks.1 {
        return Err(Error::Shape {
            op: "attention query/key",
            left: qs,
            right: ks,
        });
    }
    if ks.0 != vs.0 {
        return Err(Error::Shape {
            op: "attention key/value",
            left: ks,
            right: vs,
        });
    }
    let kt = tape.transpose(k);
    let logits = tape.matmul(q, kt)?;
    let mut logits = tape.scale(logits, 1.0 / (qs.1 as f64).sqrt());
    if let Some(mask) = mask {
        if mask.shape() != (qs.0, ks.0) {
            return Err(Error::Shape {
                op: "attention mask",
                left: (qs.0, ks.0),
                right: mask.shape(),
            });
        }
        let m = tape.leaf(mask.clone());
        logits = tape.add(logits, m)?;
    }
    let probs = tape.row_softmax(logits);
    let out = tape.matmul(probs, v)?;
    Ok((out, probs))
}

/// Output of a multi-head attention call.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    /// One probability matrix per head.
    pub probs: Vec<Var>,
}

fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Vec<Var>> {
    let dh = tape.shape(x).1 / heads;
    (0..heads).map(|h| tape.slice_cols(x, h * dh, dh)).collect()
}

/// Multi-head attention of `query_in` rows over `memory_in` rows.
pub fn multi_head_attention(
    tape: &mut Tape,
    query_in: Var,
    memory_in: Var,
    p: &MultiHeadParams,
    heads: usize,
    mask: Option<&Matrix>,
    b: &Bound,
) -> Result<AttentionOutput> {
    let q = linear(tape, query_in, &p.query, b)?;
    let k = linear(tape, memory_in, &p.key, b)?;
    let v = linear(tape, memory_in, &p.value, b)?;
    let (qh, kh, vh) = (split_heads(tape, q, heads)?, split_heads(tape, k, heads)?, split_heads(tape, v, heads)?);
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (o, pr) = scaled_dot_attention(tape, qh[h], kh[h], vh[h], mask)?;
        outs.push(o);
        probs.push(pr);
    }
    let joined = tape.concat_cols(&outs)?;
    let out = linear(tape, joined, &p.output, b)?;
    Ok(AttentionOutput { out, probs })
}

/// Output of [`blockwise_self_attention`].
#[derive(Clone, Debug)]
pub struct BlockwiseOutput {
    pub out: Var,
    pub block_size: usize,
    /// `probs[block][head]`, each `len x len` for that block.
    pub probs: Vec<Vec<Var>>,
}

impl BlockwiseOutput {
    /// Head-averaged probabilities as a full `n x n` block-diagonal matrix.
    pub fn averaged_probs(&self, tape: &Tape) -> Matrix {
        let n = tape.shape(self.out).0;
        let mut full = Matrix::zeros(n, n);
        let mut start = 0;
        for block in &self.probs {
            let heads = block.len() as f64;
            for &p in block {
                let pm = tape.value(p);
                for i in 0..pm.rows() {
                    for (j, &x) in pm.row(i).iter().enumerate() {
                        full[(start + i, start + j)] += x / heads;
                    }
                }
            }
            start += tape.shape(block[0]).0;
        }
        full
    }
}

fn key_mask(rows: usize, valid: &[bool]) -> Option<Matrix> {
    if valid.iter().all(|&v| v) {
        return None;
    }
    let mut m = Matrix::zeros(rows, valid.len());
    for i in 0..rows {
        for (x, &ok) in m.row_mut(i).iter_mut().zip(valid) {
            if !ok {
                *x = MASKED;
            }
        }
    }
    Some(m)
}

/// Multi-head self-attention inside consecutive chunks of
/// [`AttentionConfig::block_for`] rows. A shorter final chunk behaves as if
/// padded with masked keys. `key_valid` masks padding keys.
pub fn blockwise_self_attention(
    tape: &mut Tape,
    x: Var,
    p: &MultiHeadParams,
    cfg: &AttentionConfig,
    key_valid: Option<&[bool]>,
    b: &Bound,
) -> Result<BlockwiseOutput> {
    let n = tape.shape(x).0;
    if let Some(valid) = key_valid {
        if valid.len() != n {
            return Err(contract(format!("{} validity flags for {n} rows", valid.len())));
        }
    }
    let block = cfg.block_for(n);
    let q = linear(tape, x, &p.query, b)?;
    let k = linear(tape, x, &p.key, b)?;
    let v = linear(tape, x, &p.value, b)?;

    let mut block_outs = Vec::new();
    let mut probs = Vec::new();
    let mut start = 0;
    while start < n {
        let len = block.min(n - start);
        let (qb, kb, vb) = if len == n {
            (q, k, v)
        } else {
            (
                tape.slice_rows(q, start, len)?,
                tape.slice_rows(k, start, len)?,
                tape.slice_rows(v, start, len)?,
            )
        };
        let mask = key_valid.and_then(|valid| key_mask(len, &valid[start..start + len]));
        let (qh, kh, vh) = (
            split_heads(tape, qb, cfg.heads)?,
            split_heads(tape, kb, cfg.heads)?,
            split_heads(tape, vb, cfg.heads)?,
        );
        let mut heads = Vec::with_capacity(cfg.heads);
        let mut block_probs = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let (o, pr) = scaled_dot_attention(tape, qh[h], kh[h], vh[h], mask.as_ref())?;
            heads.push(o);
            block_probs.push(pr);
        }
        block_outs.push(tape.concat_cols(&heads)?);
        probs.push(block_probs);
        start += len;
    }
    let joined = if block_outs.len() == 1 {
        block_outs[0]
    } else {
        tape.concat_rows(&block_outs)?
    };
    let out = linear(tape, joined, &p.output, b)?;
    Ok(BlockwiseOutput {
        out,
        block_size: block,
        probs,
    })
}

/// `t x t` mask hiding keys after each query position.
pub fn causal_mask(t: usize) -> Matrix {
    let mut m = Matrix::zeros(t, t);
    for i in 0..t {
        for j in i + 1..t {
            m[(i, j)] = MASKED;
        }
    }
    m
}

#[derive(Clone, Debug)]
pub struct EncoderLayerOutput {
    pub out: Var,
    pub attention: BlockwiseOutput,
}

/// Pre-norm block: `x + attn(norm(x))`, then `+ ffn(norm(.))`.
pub fn encoder_layer(
    tape: &mut Tape,
    x: Var,
    p: &EncoderLayerParams,
    cfg: &AttentionConfig,
    key_valid: Option<&[bool]>,
    b: &Bound,
) -> Result<EncoderLayerOutput> {
    let h = layer_norm(tape, x, &p.attn_norm, b)?;
    let attention = blockwise_self_attention(tape, h, &p.attn, cfg, key_valid, b)?;
    let x = tape.add(x, attention.out)?;
    let h = layer_norm(tape, x, &p.ffn_norm, b)?;
    let f = feed_forward(tape, h, &p.ffn, b)?;
    let out = tape.add(x, f)?;
    Ok(EncoderLayerOutput { out, attention })
}

#[derive(Clone, Debug)]
pub struct DecoderLayerOutput {
    pub out: Var,
    /// Cross-attention probabilities per head, each `t x k`.
    pub cross_probs: Vec<Var>,
}

/// Causal self-attention, cross-attention over `memory`, then the
/// feed-forward block, each pre-norm with a residual.
pub fn decoder_layer(
    tape: &mut Tape,
    x: Var,
    memory: Var,
    p: &DecoderLayerParams,
    cfg: &AttentionConfig,
    memory_valid: Option<&[bool]>,
    b: &Bound,
) -> Result<DecoderLayerOutput> {
    let t = tape.shape(x).0;
    let k = tape.shape(memory).0;
    if tape.shape(memory).1 != tape.shape(x).1 {
        return Err(Error::Shape {
            op: "decoder memory",
            left: tape.shape(x),
            right: tape.shape(memory),
        });
    }
    let causal = causal_mask(t);
    let h = layer_norm(tape, x, &p.self_norm, b)?;
    let s = multi_head_attention(tape, h, h, &p.self_attn, cfg.heads, Some(&causal), b)?;
    let x = tape.add(x, s.out)?;

    let memory_mask = match memory_valid {
        Some(valid) if valid.len() != k => {
            return Err(contract(format!("{} validity flags for {k} memory rows", valid.len())))
        }
        Some(valid) => key_mask(t, valid),
        None => None,
    };
    let h = layer_norm(tape, x, &p.cross_norm, b)?;
    let c = multi_head_attention(tape, h, memory, &p.cross_attn, cfg.heads, memory_mask.as_ref(), b)?;
    let x = tape.add(x, c.out)?;

    let h = layer_norm(tape, x, &p.ffn_norm, b)?;
    let f = feed_forward(tape, h, &p.ffn, b)?;
    let out = tape.add(x, f)?;
    Ok(DecoderLayerOutput {
        out,
        cross_probs: c.probs,
    })
}

/// Interleaved sinusoidal encoding: column `2i` holds
/// `sin(pos / 10000^(2i/d))` and column `2i + 1` the matching cosine.
pub fn sinusoidal_positions(n: usize, d: usize) -> Result<Matrix> {
    if d % 2 != 0 {
        return Err(contract(format!("positional encoding needs an even dimension, got {d}")));
    }
    let mut pe = Matrix::zeros(n, d);
    for pos in 0..n {
        let row = pe.row_mut(pos);
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            row[2 * i] = angle.sin();
            row[2 * i + 1] = angle.cos();
        }
    }
    Ok(pe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn cfg(d: usize, heads: usize, block: usize) -> AttentionConfig {
        AttentionConfig {
            d_model: d,
            heads,
            ffn_dim: 2 * d,
            block_size: block,
            dropout: 0.0,
        }
    }

    /// Parameters with non-trivial biases and norms.
    fn randomize(store: &mut ParamStore, seed: u64) {
        let mut r = rng(seed);
        for m in store.values_mut() {
            let (rows, cols) = m.shape();
            *m = m.add(&Matrix::uniform(rows, cols, -0.3, 0.3, &mut r)).unwrap();
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(8, 2, 0).validate().is_ok());
        assert!(cfg(8, 3, 0).validate().is_err());
        let mut c = cfg(8, 2, 0);
        c.dropout = 0.1;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn identical_keys_average_values() {
        let mut tape = Tape::new();
        let q = tape.leaf(Matrix::uniform(3, 4, -1.0, 1.0, &mut rng(1)));
        let k = tape.leaf(Matrix::from_rows(&[[0.3, -0.2, 0.5, 1.0]; 5]).unwrap());
        let vm = Matrix::uniform(5, 4, -1.0, 1.0, &mut rng(2));
        let v = tape.leaf(vm.clone());
        let (out, probs) = scaled_dot_attention(&mut tape, q, k, v, None).unwrap();
        assert!(tape.value(probs).data().iter().all(|p| (p - 0.2).abs() < 1e-15));
        let mean = Matrix::filled(1, 5, 0.2).matmul(&vm).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((tape.value(out)[(i, j)] - mean[(0, j)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_key_returns_value() {
        let mut tape = Tape::new();
        let q = tape.leaf(Matrix::from_rows(&[[0.7, -1.2]]).unwrap());
        let k = tape.leaf(Matrix::from_rows(&[[2.0, 0.1]]).unwrap());
        let v = tape.leaf(Matrix::from_rows(&[[5.0, -3.0]]).unwrap());
        let (out, _) = scaled_dot_attention(&mut tape, q, k, v, None).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0, -3.0]);
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let q = tape.leaf(Matrix::zeros(2, 3));
        let k = tape.leaf(Matrix::zeros(4, 2));
        let v = tape.leaf(Matrix::zeros(4, 2));
        assert!(matches!(scaled_dot_attention(&mut tape, q, k, v, None), Err(Error::Shape { .. })));
        let k = tape.leaf(Matrix::zeros(4, 3));
        let v = tape.leaf(Matrix::zeros(3, 3));
        assert!(scaled_dot_attention(&mut tape, q, k, v, None).is_err());
    }

    #[test]
    fn causal_probs_are_lower_triangular() {
        let mut tape = Tape::new();
        let x = Matrix::uniform(6, 4, -2.0, 2.0, &mut rng(3));
        let q = tape.leaf(x.clone());
        let k = tape.leaf(x.clone());
        let v = tape.leaf(x);
        let (_, probs) = scaled_dot_attention(&mut tape, q, k, v, Some(&causal_mask(6))).unwrap();
        let p = tape.value(probs);
        for i in 0..6 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in i + 1..6 {
                assert_eq!(p[(i, j)], 0.0);
            }
        }
    }

    fn attention_setup(n: usize, d: usize, seed: u64) -> (ParamStore, MultiHeadParams, Matrix) {
        let mut store = ParamStore::new();
        let p = MultiHeadParams::init(&mut store, "attn", d, &mut rng(seed));
        randomize(&mut store, seed + 1);
        let x = Matrix::uniform(n, d, -1.0, 1.0, &mut rng(seed + 2));
        (store, p, x)
    }

    #[test]
    fn single_block_equals_dense() {
        for seed in 0..5 {
            let (store, p, x) = attention_setup(12, 8, seed * 10);
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let xv = tape.leaf(x);
            let blocked = blockwise_self_attention(&mut tape, xv, &p, &cfg(8, 2, 12), None, &b).unwrap();
            let dense = multi_head_attention(&mut tape, xv, xv, &p, 2, None, &b).unwrap();
            assert!(tape.value(blocked.out).max_abs_diff(tape.value(dense.out)) <= 1e-12);
            let zero_block = blockwise_self_attention(&mut tape, xv, &p, &cfg(8, 2, 0), None, &b).unwrap();
            assert_eq!(tape.value(zero_block.out), tape.value(blocked.out));
        }
    }

    #[test]
    fn unit_blocks_return_value_projection() {
        let (store, p, x) = attention_setup(5, 8, 40);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let xv = tape.leaf(x);
        let out = blockwise_self_attention(&mut tape, xv, &p, &cfg(8, 2, 1), None, &b).unwrap();
        let v = linear(&mut tape, xv, &p.value, &b).unwrap();
        let expected = linear(&mut tape, v, &p.output, &b).unwrap();
        assert!(tape.value(out.out).max_abs_diff(tape.value(expected)) < 1e-15);
    }

    #[test]
    fn blocks_match_block_diagonal_mask() {
        let (n, m) = (8, 4);
        let mut mask = Matrix::filled(n, n, MASKED);
        for i in 0..n {
            for j in 0..n {
                if i / m == j / m {
                    mask[(i, j)] = 0.0;
                }
            }
        }
        for seed in 0..5 {
            let (store, p, x) = attention_setup(n, 8, 100 + seed * 10);
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let xv = tape.leaf(x);
            let blocked = blockwise_self_attention(&mut tape, xv, &p, &cfg(8, 2, m), None, &b).unwrap();
            let dense = multi_head_attention(&mut tape, xv, xv, &p, 2, Some(&mask), &b).unwrap();
            assert!(tape.value(blocked.out).max_abs_diff(tape.value(dense.out)) < 1e-12);
            let full = blocked.averaged_probs(&tape);
            for i in 0..n {
                assert!((full.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for j in 0..n {
                    if i / m != j / m {
                        assert_eq!(full[(i, j)], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn ragged_last_block_matches_masked_padding() {
        // 6 rows in blocks of 4 equal 8 rows whose last two are masked keys.
        let (store, p, x) = attention_setup(6, 8, 7);
        let mut padded = Matrix::zeros(8, 8);
        for i in 0..6 {
            padded.row_mut(i).copy_from_slice(x.row(i));
        }
        let valid = [true, true, true, true, true, true, false, false];
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let xv = tape.leaf(x);
        let pv = tape.leaf(padded);
        let ragged = blockwise_self_attention(&mut tape, xv, &p, &cfg(8, 2, 4), None, &b).unwrap();
        let masked = blockwise_self_attention(&mut tape, pv, &p, &cfg(8, 2, 4), Some(&valid), &b).unwrap();
        let top = tape.value(masked.out).slice_rows(0, 6);
        assert!(tape.value(ragged.out).max_abs_diff(&top) < 1e-12);
    }

    fn encoder_setup(seed: u64) -> (ParamStore, EncoderLayerParams, AttentionConfig) {
        let c = cfg(8, 2, 0);
        let mut store = ParamStore::new();
        let p = EncoderLayerParams::init(&mut store, "enc", &c, &mut rng(seed));
        (store, p, c)
    }

    #[test]
    fn zero_projections_give_identity() {
        let (mut store, p, c) = encoder_setup(5);
        for id in [p.attn.output.weight, p.attn.output.bias, p.ffn.outer.weight, p.ffn.outer.bias] {
            let (r, k) = store.get(id).shape();
            *store.get_mut(id) = Matrix::zeros(r, k);
        }
        let x = Matrix::uniform(6, 8, -1.0, 1.0, &mut rng(6));
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let out = encoder_layer(&mut tape, xv, &p, &c, None, &b).unwrap();
        assert_eq!(tape.value(out.out), &x);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (mut store, p, c) = encoder_setup(11);
        randomize(&mut store, 12);
        let x = Matrix::uniform(6, 8, -1.0, 1.0, &mut rng(13));
        let probe = Matrix::uniform(6, 8, -1.0, 1.0, &mut rng(14));
        let mut inputs = vec![x];
        inputs.extend(store.values().iter().cloned());
        let report = check_gradients(&inputs, 1e-5, 1e-6, |t, v| {
            let b = Bound::new(v[1..].to_vec());
            let out = encoder_layer(t, v[0], &p, &c, None, &b)?;
            let w = t.leaf(probe.clone());
            let y = t.mul(out.out, w)?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert_eq!(report.max_rel_error.len(), 1 + store.len());
        assert!(report.pass, "worst {}", report.worst());
    }

    fn decoder_setup(seed: u64) -> (ParamStore, DecoderLayerParams, AttentionConfig) {
        let c = cfg(8, 2, 0);
        let mut store = ParamStore::new();
        let p = DecoderLayerParams::init(&mut store, "dec", &c, &mut rng(seed));
        randomize(&mut store, seed + 1);
        (store, p, c)
    }

    #[test]
    fn cross_probs_normalized() {
        let (store, p, c) = decoder_setup(20);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let t = tape.leaf(Matrix::uniform(4, 8, -1.0, 1.0, &mut rng(21)));
        let mem = tape.leaf(Matrix::uniform(2, 8, -1.0, 1.0, &mut rng(22)));
        let out = decoder_layer(&mut tape, t, mem, &p, &c, None, &b).unwrap();
        assert_eq!(tape.shape(out.out), (4, 8));
        for &pr in &out.cross_probs {
            let m = tape.value(pr);
            assert_eq!(m.shape(), (4, 2));
            for i in 0..4 {
                assert!((m.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_memory_row_cross_attention() {
        let (store, p, _) = decoder_setup(30);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let t = tape.leaf(Matrix::uniform(3, 8, -1.0, 1.0, &mut rng(31)));
        let mem = tape.leaf(Matrix::uniform(1, 8, -1.0, 1.0, &mut rng(32)));
        let out = multi_head_attention(&mut tape, t, mem, &p.cross_attn, 2, None, &b).unwrap();
        let v = linear(&mut tape, mem, &p.cross_attn.value, &b).unwrap();
        let expected = linear(&mut tape, v, &p.cross_attn.output, &b).unwrap();
        let (got, row) = (tape.value(out.out), tape.value(expected));
        for i in 0..3 {
            for j in 0..8 {
                assert!((got[(i, j)] - row[(0, j)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn decoder_is_causal() {
        let (store, p, c) = decoder_setup(40);
        let x = Matrix::uniform(5, 8, -1.0, 1.0, &mut rng(41));
        let memory = Matrix::uniform(3, 8, -1.0, 1.0, &mut rng(42));
        let run = |x: &Matrix| {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let xv = tape.leaf(x.clone());
            let mv = tape.leaf(memory.clone());
            let out = decoder_layer(&mut tape, xv, mv, &p, &c, None, &b).unwrap();
            tape.value(out.out).clone()
        };
        let base = run(&x);
        let mut r = rng(43);
        for pos in 0..5 {
            let mut perturbed = x.clone();
            for i in pos + 1..5 {
                perturbed.row_mut(i).copy_from_slice(Matrix::uniform(1, 8, -5.0, 5.0, &mut r).data());
            }
            let out = run(&perturbed);
            for i in 0..=pos {
                assert_eq!(out.row(i), base.row(i), "position {pos} row {i}");
            }
        }
    }

    #[test]
    fn positions_examples() {
        let pe = sinusoidal_positions(50, 6).unwrap();
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(pe.data().iter().all(|x| x.abs() <= 1.0));
        assert!((pe[(1, 0)] - 1f64.sin()).abs() < 1e-15);
        assert!((pe[(3, 3)] - (3.0 / 10000f64.powf(2.0 / 6.0)).cos()).abs() < 1e-15);
        assert!(matches!(sinusoidal_positions(4, 5), Err(Error::Contract(_))));
    }

    #[test]
    fn positions_are_distinct() {
        let n = 10_000;
        let pe = sinusoidal_positions(n, 64).unwrap();
        let mut rows: Vec<&[f64]> = (0..n).map(|i| pe.row(i)).collect();
        rows.sort_by(|a, b| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        assert!(rows.windows(2).all(|w| w[0] != w[1]));
    }
}
