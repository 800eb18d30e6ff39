//! Closed-form multiplication counts for attention architectures.
//!
//! Symbols: `l` layers, `n` input length, `d` model dimension, `t` target
//! length, `m` block size, `k` pooled length. The attention items count
//! only the score and weighted-sum contractions; projections and
//! feed-forward blocks are itemized separately.

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::model::PoolSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Vanilla,
    Blockwise,
    Transpooler,
    Pyramidion,
}

impl std::str::FromStr for Architecture {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "vanilla" => Architecture::Vanilla,
            "blockwise" => Architecture::Blockwise,
            "transpooler" => Architecture::Transpooler,
            "pyramidion" => Architecture::Pyramidion,
            other => return Err(config(format!("unknown architecture {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub arch: Architecture,
    pub l: u64,
    pub n: u64,
    pub d: u64,
    pub t: u64,
    pub m: u64,
    pub k: u64,
    /// Per-layer encoder lengths; pyramidion only.
    #[serde(default)]
    pub schedule: Option<Vec<u64>>,
    /// Feed-forward width; defaults to `4 d`.
    #[serde(default)]
    pub ffn: Option<u64>,
}

impl ArchSpec {
    pub fn new(arch: Architecture, l: u64, n: u64, d: u64, t: u64, m: u64, k: u64) -> Self {
        Self {
            arch,
            l,
            n,
            d,
            t,
            m,
            k,
            schedule: None,
            ffn: None,
        }
    }

    pub fn with_schedule(mut self, schedule: Vec<u64>) -> Self {
        self.schedule = Some(schedule);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if [self.l, self.n, self.d, self.t].contains(&0) {
            return Err(config("l, n, d and t must be positive"));
        }
        if self.arch != Architecture::Vanilla && (self.m == 0 || self.m > self.n) {
            return Err(config(format!("block size m = {} must be in 1..=n", self.m)));
        }
        if matches!(self.arch, Architecture::Transpooler | Architecture::Pyramidion) && (self.k == 0 || self.k > self.n) {
            return Err(config(format!("bottleneck k = {} must be in 1..=n", self.k)));
        }
        if self.arch == Architecture::Pyramidion {
            let schedule = self
                .schedule
                .as_ref()
                .ok_or_else(|| config("pyramidion needs a schedule"))?;
            if schedule.len() as u64 != self.l {
                return Err(config(format!("schedule has {} entries for l = {}", schedule.len(), self.l)));
            }
            let lengths = schedule
                .iter()
                .map(|&x| usize::try_from(x).map_err(|_| config("schedule entry too large")))
                .collect::<Result<Vec<_>>>()?;
            let s = PoolSchedule::new(lengths)?;
            s.validate_for(self.n as usize)?;
            if s.final_len() as u64 != self.k {
                return Err(config(format!("schedule ends at {} but k = {}", s.final_len(), self.k)));
            }
        }
        Ok(())
    }

    /// Sequence length each encoder layer is counted at.
    fn encoder_lengths(&self) -> Vec<u64> {
        match (&self.arch, &self.schedule) {
            (Architecture::Pyramidion, Some(s)) => s.clone(),
            _ => vec![self.n; self.l as usize],
        }
    }

    /// Rows visible to the decoder's cross-attention.
    fn memory_len(&self) -> u64 {
        match self.arch {
            Architecture::Vanilla | Architecture::Blockwise => self.n,
            Architecture::Transpooler | Architecture::Pyramidion => self.k,
        }
    }
}

/// Itemized multiplication counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCountReport {
    pub encoder_self_attention: u64,
    pub decoder_cross_attention: u64,
    pub decoder_self_attention: u64,
    pub encoder_projections: u64,
    pub decoder_projections: u64,
    pub encoder_ffn: u64,
    pub decoder_ffn: u64,
    /// Sum of the three attention items.
    pub attention_total: u64,
    /// Every decoder item. How this compares across architectures depends
    /// on which items are counted.
    pub decoder_total: u64,
    pub total: u64,
}

impl OpCountReport {
    pub fn items(&self) -> [(&'static str, u64); 10] {
        [
            ("encoder_self_attention", self.encoder_self_attention),
            ("decoder_cross_attention", self.decoder_cross_attention),
            ("decoder_self_attention", self.decoder_self_attention),
            ("encoder_projections", self.encoder_projections),
            ("decoder_projections", self.decoder_projections),
            ("encoder_ffn", self.encoder_ffn),
            ("decoder_ffn", self.decoder_ffn),
            ("attention_total", self.attention_total),
            ("decoder_total", self.decoder_total),
            ("total", self.total),
        ]
    }
}

fn product(parts: &[u64]) -> Result<u64> {
    parts
        .iter()
        .try_fold(1u64, |acc, &x| acc.checked_mul(x))
        .ok_or_else(|| config("operation count overflows u64"))
}

fn total(parts: &[u64]) -> Result<u64> {
    parts
        .iter()
        .try_fold(0u64, |acc, &x| acc.checked_add(x))
        .ok_or_else(|| config("operation count overflows u64"))
}

pub fn attn_mults(spec: &ArchSpec) -> Result<OpCountReport> {
    spec.validate()?;
    let ArchSpec { l, n, d, t, m, .. } = *spec;
    let ffn = match spec.ffn {
        Some(f) => f,
        None => product(&[4, d])?,
    };
    let lengths = spec.encoder_lengths();
    let memory = spec.memory_len();

    let encoder_self_attention = match spec.arch {
        Architecture::Vanilla => product(&[l, n, n, d])?,
        Architecture::Blockwise | Architecture::Transpooler => product(&[l, m, n, d])?,
        Architecture::Pyramidion => {
            let per_layer = lengths
                .iter()
                .map(|&len| product(&[len, m.min(len), d]))
                .collect::<Result<Vec<_>>>()?;
            total(&per_layer)?
        }
    };
    let decoder_cross_attention = product(&[l, t, memory, d])?;
    let decoder_self_attention = product(&[l, t, t, d])?;

    let per_layer_proj = lengths
        .iter()
        .map(|&len| product(&[4, len, d, d]))
        .collect::<Result<Vec<_>>>()?;
    let encoder_projections = total(&per_layer_proj)?;
    // self-attention Q, K, V, O and cross-attention Q, O on t rows; cross K, V on memory
    let decoder_projections = total(&[product(&[l, 6, t, d, d])?, product(&[l, 2, memory, d, d])?])?;
    let per_layer_ffn = lengths
        .iter()
        .map(|&len| product(&[2, len, d, ffn]))
        .collect::<Result<Vec<_>>>()?;
    let encoder_ffn = total(&per_layer_ffn)?;
    let decoder_ffn = product(&[l, 2, t, d, ffn])?;

    let attention_total = total(&[encoder_self_attention, decoder_cross_attention, decoder_self_attention])?;
    let decoder_total = total(&[decoder_cross_attention, decoder_self_attention, decoder_projections, decoder_ffn])?;
    let total = total(&[attention_total, encoder_projections, decoder_projections, encoder_ffn, decoder_ffn])?;
    Ok(OpCountReport {
        encoder_self_attention,
        decoder_cross_attention,
        decoder_self_attention,
        encoder_projections,
        decoder_projections,
        encoder_ffn,
        decoder_ffn,
        attention_total,
        decoder_total,
        total,
    })
}

/// One line of a [`compare`] table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub item: &'static str,
    pub baseline: u64,
    pub variant: u64,
    /// `baseline / variant`; NaN when both are zero.
    pub ratio: f64,
}

pub fn compare(baseline: &OpCountReport, variant: &OpCountReport) -> Vec<RatioRow> {
    baseline
        .items()
        .into_iter()
        .zip(variant.items())
        .map(|((item, b), (_, v))| RatioRow {
            item,
            baseline: b,
            variant: v,
            ratio: b as f64 / v as f64,
        })
        .collect()
}

fn power_of_two(x: u64, name: &str) -> Result<()> {
    if !x.is_power_of_two() {
        return Err(contract(format!("{name} = {x} is not a power of two")));
    }
    Ok(())
}

/// `(2 - k/n) m n d`.
pub fn pyramid_memory_closed_form(n: u64, k: u64, m: u64, d: u64) -> f64 {
    (2.0 - k as f64 / n as f64) * (m as f64) * (n as f64) * (d as f64)
}

/// Attention memory of a stack that halves `n` down to `k`, one layer per
/// length: `sum_{i=0}^{p} 2^-i m n d` with `p = log2(n / k)`. Fails if the
/// sum disagrees with [`pyramid_memory_closed_form`].
pub fn pyramid_memory(n: u64, k: u64, m: u64, d: u64) -> Result<f64> {
    power_of_two(n, "n")?;
    power_of_two(k, "k")?;
    if k > n {
        return Err(contract(format!("k = {k} exceeds n = {n}")));
    }
    let base = (m as f64) * (n as f64) * (d as f64);
    let p = (n / k).trailing_zeros();
    let sum: f64 = (0..=p).map(|i| base * 0.5f64.powi(i as i32)).sum();
    let closed = pyramid_memory_closed_form(n, k, m, d);
    if (sum - closed).abs() > 1e-12 * closed.abs() {
        return Err(contract(format!("geometric sum {sum} differs from closed form {closed}")));
    }
    Ok(sum)
}
