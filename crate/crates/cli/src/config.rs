//! Subcommand options: command-line flags layered over an optional JSON
//! file with the same keys, then validated into run configurations.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::Args;
use halvingpool::complexity::{ArchSpec, Architecture};
use halvingpool::model::{ModelConfig, PoolSchedule, PoolerKind};
use halvingpool::scorers::ScorerSpec;
use halvingpool::task::TaskConfig;
use serde::de::DeserializeOwned;
use serde::Deserialize;

/// A rejected configuration value.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid value for `{}`: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

/// Parses a JSON options object, naming the offending key on failure.
pub fn parse_options<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        let field = msg
            .split('`')
            .nth(1)
            .filter(|_| msg.starts_with("unknown field") || msg.starts_with("missing field"))
            .unwrap_or("config");
        ConfigError::new(field, msg.clone())
    })
}

pub fn read_options<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| ConfigError::new("config", format!("cannot read {}: {e}", p.display())))?;
            parse_options(&text)
        }
    }
}

/// Fills every unset field of `$flags` from `$file`.
macro_rules! overlay {
    ($flags:ident, $file:ident; $($field:ident),+ $(,)?) => {
        $( if $flags.$field.is_none() { $flags.$field = $file.$field; } )+
    };
}

fn positive(field: &str, value: usize) -> Result<usize> {
    if value == 0 {
        return Err(ConfigError::new(field, "must be positive"));
    }
    Ok(value)
}

fn tau(field: &str, value: f64) -> Result<f64> {
    if !(value >= 1.0 && value.is_finite()) {
        return Err(ConfigError::new(field, format!("must be finite and at least 1, got {value}")));
    }
    Ok(value)
}

#[derive(Args, Debug, Clone, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct BenchOptions {
    /// Input lengths to sweep, comma separated.
    #[arg(long = "n", value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    /// Output sizes to sweep; every k must be below every n.
    #[arg(long = "k", value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    /// Softmax sharpness shared by all soft variants.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Random instances per (n, k) point.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Columns of the random matrices.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Timed repetitions per cell; the median is reported.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Untimed repetitions before timing.
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file (CSV). Standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Accepted for uniformity; this command always emits CSV.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(default)]
    pub csv: Option<bool>,
    /// JSON file with default values for these flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub ns: Vec<usize>,
    pub ks: Vec<usize>,
    pub tau: f64,
    pub seeds: usize,
    pub dim: usize,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl BenchOptions {
    pub fn merge(mut self, file: Self) -> Self {
        overlay!(self, file; n, k, tau, seeds, dim, reps, warmup, seed, out, csv);
        self
    }

    pub fn validate(self) -> Result<BenchConfig> {
        let ns = self.n.unwrap_or_else(|| vec![64, 256, 1024]);
        let ks = self.k.unwrap_or_else(|| vec![8, 16]);
        if ns.is_empty() {
            return Err(ConfigError::new("n", "sweep list is empty"));
        }
        if ks.is_empty() {
            return Err(ConfigError::new("k", "sweep list is empty"));
        }
        if ks.contains(&0) {
            return Err(ConfigError::new("k", "entries must be positive"));
        }
        for &n in &ns {
            if let Some(&k) = ks.iter().find(|&&k| k >= n) {
                return Err(ConfigError::new("k", format!("k = {k} is not below n = {n}")));
            }
        }
        let reps = positive("reps", self.reps.unwrap_or(10))?;
        Ok(BenchConfig {
            ns,
            ks,
            tau: tau("tau", self.tau.unwrap_or(1.0))?,
            seeds: positive("seeds", self.seeds.unwrap_or(10))?,
            dim: positive("dim", self.dim.unwrap_or(64))?,
            reps,
            warmup: self.warmup.unwrap_or(2),
            seed: self.seed.unwrap_or(0),
            out: self.out,
        })
    }
}

#[derive(Args, Debug, Clone, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct GradCheckOptions {
    /// Random points checked per operation.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Largest accepted relative error for the end-to-end model.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Largest accepted relative error for single operations.
    #[arg(long)]
    pub op_tolerance: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report file (CSV).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the report as CSV instead of a table.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(default)]
    pub csv: Option<bool>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Corrupts the analytic gradient of the named check.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub seeds: usize,
    pub tolerance: f64,
    pub op_tolerance: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub csv: bool,
    pub inject_fault: Option<String>,
}

impl GradCheckOptions {
    pub fn merge(mut self, file: Self) -> Self {
        overlay!(self, file; seeds, tolerance, op_tolerance, seed, out, csv, inject_fault);
        self
    }

    pub fn validate(self) -> Result<GradCheckConfig> {
        let tolerance = self.tolerance.unwrap_or(1e-5);
        if !(tolerance > 0.0 && tolerance.is_finite()) {
            return Err(ConfigError::new("tolerance", "must be positive and finite"));
        }
        let op_tolerance = self.op_tolerance.unwrap_or(1e-6);
        if !(op_tolerance > 0.0 && op_tolerance.is_finite()) {
            return Err(ConfigError::new("op-tolerance", "must be positive and finite"));
        }
        Ok(GradCheckConfig {
            seeds: positive("seeds", self.seeds.unwrap_or(50))?,
            tolerance,
            op_tolerance,
            seed: self.seed.unwrap_or(0),
            out: self.out,
            csv: self.csv.unwrap_or(false),
            inject_fault: self.inject_fault,
        })
    }
}

#[derive(Args, Debug, Clone, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ComplexityOptions {
    /// Reference architecture: vanilla, blockwise, transpooler or pyramidion.
    #[arg(long)]
    pub baseline: Option<String>,
    /// Architecture compared against the baseline.
    #[arg(long)]
    pub variant: Option<String>,
    /// Encoder layers.
    #[arg(long)]
    pub l: Option<u64>,
    /// Input length.
    #[arg(long)]
    pub n: Option<u64>,
    /// Model width.
    #[arg(long)]
    pub d: Option<u64>,
    /// Target length.
    #[arg(long)]
    pub t: Option<u64>,
    /// Attention block size.
    #[arg(long)]
    pub m: Option<u64>,
    /// Pooled length seen by the decoder.
    #[arg(long)]
    pub k: Option<u64>,
    /// Per-layer lengths for pyramidion, comma separated.
    #[arg(long)]
    pub schedule: Option<String>,
    /// Feed-forward width (default 4 d).
    #[arg(long)]
    pub ffn: Option<u64>,
    /// Unused; accepted so every subcommand shares the same flags.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report file (CSV).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print CSV instead of a table.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(default)]
    pub csv: Option<bool>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityConfig {
    pub baseline: ArchSpec,
    pub variant: ArchSpec,
    pub out: Option<PathBuf>,
    pub csv: bool,
}

impl ComplexityOptions {
    pub fn merge(mut self, file: Self) -> Self {
        overlay!(self, file; baseline, variant, l, n, d, t, m, k, schedule, ffn, seed, out, csv);
        self
    }

    pub fn validate(self) -> Result<ComplexityConfig> {
        let arch = |field: &str, v: Option<String>, default: Architecture| -> Result<Architecture> {
            match v {
                None => Ok(default),
                Some(s) => s.parse().map_err(|e: halvingpool::Error| ConfigError::new(field, e.to_string())),
            }
        };
        let baseline = arch("baseline", self.baseline, Architecture::Blockwise)?;
        let variant = arch("variant", self.variant, Architecture::Pyramidion)?;
        let schedule = self
            .schedule
            .unwrap_or_else(|| "8192,8192,2048,512,512,512".to_string())
            .parse::<PoolSchedule>()
            .map_err(|e| ConfigError::new("schedule", e.to_string()))?;
        let build = |a: Architecture| {
            let mut spec = ArchSpec::new(
                a,
                self.l.unwrap_or(6),
                self.n.unwrap_or(8192),
                self.d.unwrap_or(768),
                self.t.unwrap_or(512),
                self.m.unwrap_or(512),
                self.k.unwrap_or(512),
            );
            spec.ffn = self.ffn;
            if a == Architecture::Pyramidion {
                spec.schedule = Some(schedule.lengths().iter().map(|&x| x as u64).collect());
            }
            spec
        };
        let (b, v) = (build(baseline), build(variant));
        for (field, spec) in [("baseline", &b), ("variant", &v)] {
            spec.validate().map_err(|e| {
                let msg = e.to_string();
                let name = ["schedule", "reduction", "block size", "bottleneck"]
                    .iter()
                    .zip(["schedule", "schedule", "m", "k"])
                    .find(|(needle, _)| msg.contains(**needle))
                    .map_or(field, |(_, f)| f);
                ConfigError::new(name, msg)
            })?;
        }
        Ok(ComplexityConfig {
            baseline: b,
            variant: v,
            out: self.out,
            csv: self.csv.unwrap_or(false),
        })
    }
}

#[derive(Args, Debug, Clone, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainOptions {
    /// Scorer kind: linear, nonlinear, power-like, embedding, random,
    /// index, mean-window or max-window.
    #[arg(long)]
    pub scorer: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub eval_samples: Option<usize>,
    /// Input sequence length.
    #[arg(long = "n")]
    pub n: Option<usize>,
    /// Decoder memory size.
    #[arg(long = "k")]
    pub k: Option<usize>,
    /// Per-layer encoder output lengths; defaults to pooling to k after
    /// the last encoder layer.
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub payload_count: Option<usize>,
    #[arg(long)]
    pub payload_vocab: Option<usize>,
    #[arg(long)]
    pub noise_vocab: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub block_size: Option<usize>,
    #[arg(long)]
    pub encoder_layers: Option<usize>,
    #[arg(long)]
    pub decoder_layers: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Seeds the task, the initialization and the random scorer.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Log file (CSV). Standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Accepted for uniformity; this command always emits CSV.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(default)]
    pub csv: Option<bool>,
    /// Save the trained model to this file.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainToyConfig {
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub train: halvingpool::train::TrainConfig,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl TrainOptions {
    pub fn merge(mut self, file: Self) -> Self {
        overlay!(self, file; scorer, steps, batch_size, lr, eval_every, eval_samples, n, k, schedule,
            payload_count, payload_vocab, noise_vocab, d_model, heads, ffn_dim, block_size,
            encoder_layers, decoder_layers, tau, seed, out, csv, checkpoint);
        self
    }

    pub fn validate(self) -> Result<TrainToyConfig> {
        let seed = self.seed.unwrap_or(0);
        let task = TaskConfig {
            seq_len: positive("n", self.n.unwrap_or(256))?,
            payload_count: self.payload_count.unwrap_or(8),
            payload_vocab: self.payload_vocab.unwrap_or(32),
            noise_vocab: self.noise_vocab.unwrap_or(64),
            seed,
        };
        let k = self.k.unwrap_or(32);
        let encoder_layers = positive("encoder-layers", self.encoder_layers.unwrap_or(2))?;
        task.validate(k).map_err(|e| {
            let msg = e.to_string();
            let field = if msg.contains("vocab") {
                if msg.contains("noise") {
                    "noise-vocab"
                } else {
                    "payload-vocab"
                }
            } else if msg.contains("pooled length") && k > task.seq_len {
                "k"
            } else {
                "payload-count"
            };
            ConfigError::new(field, msg)
        })?;

        let scorer_name = self.scorer.unwrap_or_else(|| "linear".to_string());
        let mut scorer = ScorerSpec::from_name(&scorer_name).map_err(|e| ConfigError::new("scorer", e.to_string()))?;
        if let ScorerSpec::Random { .. } = scorer {
            scorer = ScorerSpec::Random { seed };
        }
        let schedule = match self.schedule {
            Some(s) => s.parse::<PoolSchedule>().map_err(|e| ConfigError::new("schedule", e.to_string()))?,
            None => PoolSchedule::single_pool(task.seq_len, encoder_layers, k)
                .map_err(|e| ConfigError::new("k", e.to_string()))?,
        };
        if schedule.final_len() != k {
            return Err(ConfigError::new(
                "schedule",
                format!("ends at {} but k = {k}", schedule.final_len()),
            ));
        }
        if schedule.len() != encoder_layers {
            return Err(ConfigError::new(
                "schedule",
                format!("has {} entries for {encoder_layers} encoder layers", schedule.len()),
            ));
        }
        let model = ModelConfig {
            vocab_size: task.vocab_size(),
            max_input_len: task.seq_len,
            max_target_len: task.target_len(),
            encoder_layers,
            decoder_layers: self.decoder_layers.unwrap_or(2),
            attention: halvingpool::attention::AttentionConfig {
                d_model: positive("d-model", self.d_model.unwrap_or(64))?,
                heads: positive("heads", self.heads.unwrap_or(4))?,
                ffn_dim: positive("ffn-dim", self.ffn_dim.unwrap_or(256))?,
                block_size: self.block_size.unwrap_or(64),
                dropout: 0.0,
            },
            schedule,
            scorer,
            pooler: PoolerKind::SuccessiveHalving {
                tau: tau("tau", self.tau.unwrap_or(1.0))?,
                sort: true,
            },
            zero_init_head: true,
            init_seed: seed,
        };
        model.validate().map_err(|e| {
            let msg = e.to_string();
            let field = if msg.contains("heads") || msg.contains("d_model") {
                "d-model"
            } else if msg.contains("schedule") || msg.contains("reduction") {
                "schedule"
            } else {
                "config"
            };
            ConfigError::new(field, msg)
        })?;
        let lr = self.lr.unwrap_or(1e-3);
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(ConfigError::new("lr", "must be positive and finite"));
        }
        let train = halvingpool::train::TrainConfig {
            steps: self.steps.unwrap_or(600),
            batch_size: positive("batch-size", self.batch_size.unwrap_or(8))?,
            optimizer: halvingpool::optim::AdamConfig::with_learning_rate(lr),
            eval_every: positive("eval-every", self.eval_every.unwrap_or(100))?,
            eval_samples: positive("eval-samples", self.eval_samples.unwrap_or(32))?,
        };
        Ok(TrainToyConfig {
            model,
            task,
            train,
            out: self.out,
            checkpoint: self.checkpoint,
        })
    }
}

/// A fully validated invocation.
#[derive(Debug, Clone, PartialEq)]
pub enum RunConfig {
    TopkBench(BenchConfig),
    GradCheck(GradCheckConfig),
    Complexity(ComplexityConfig),
    TrainToy(TrainToyConfig),
}

impl RunConfig {
    /// Validates a JSON options object for `subcommand` with no flags set.
    pub fn from_json(subcommand: &str, text: &str) -> Result<Self> {
        Ok(match subcommand {
            "topk-bench" => RunConfig::TopkBench(parse_options::<BenchOptions>(text)?.validate()?),
            "grad-check" => RunConfig::GradCheck(parse_options::<GradCheckOptions>(text)?.validate()?),
            "complexity" => RunConfig::Complexity(parse_options::<ComplexityOptions>(text)?.validate()?),
            "train-toy" => RunConfig::TrainToy(parse_options::<TrainOptions>(text)?.validate()?),
            other => return Err(ConfigError::new("subcommand", format!("unknown subcommand {other:?}"))),
        })
    }
}
