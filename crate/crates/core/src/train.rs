//! Adam training of a pooled model on the needle task.

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::matrix::Matrix;
use crate::metrics::ranking_auc;
use crate::model::Model;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::task::{NeedleGenerator, NeedleSample, TaskConfig};
use crate::tape::Tape;

/// Nonces at or above this value are used for evaluation forwards.
const EVAL_NONCE: u64 = 1 << 62;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Evaluate every this many steps (and always at the start and end).
    pub eval_every: usize,
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            optimizer: AdamConfig::default(),
            eval_every: 250,
            eval_samples: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Mean token cross-entropy.
    pub loss: f64,
    /// Mean per-sample AUC of the first pooling layer's scores, payload
    /// positions against noise. `None` for scorer-free pooling.
    pub auc: Option<f64>,
    /// Fraction of samples decoded exactly.
    pub seq_accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub eval: Evaluation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training-batch loss of every step.
    pub losses: Vec<f64>,
    pub log: Vec<LogRow>,
    pub final_eval: Evaluation,
    pub steps: usize,
    pub seed: u64,
}

/// Evaluates `model` on fixed samples without updating it.
pub fn evaluate(model: &Model, samples: &[NeedleSample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(config("evaluation needs at least one sample"));
    }
    let max_len = model.config().max_target_len;
    let mut loss = 0.0;
    let mut aucs = Vec::new();
    let mut correct = 0;
    for (i, s) in samples.iter().enumerate() {
        let mut tape = Tape::new();
        let b = model.params().bind(&mut tape);
        let enc = model.encode(&mut tape, &b, &s.tokens, EVAL_NONCE + i as u64)?;
        let dec = model.decode_train(&mut tape, &b, &enc, &s.target)?;
        loss += tape.value(dec.loss).item();
        if let Some(trace) = enc.traces.first() {
            let mask = s.payload_mask();
            let labels: Vec<bool> = trace.positions.iter().map(|&p| mask[p]).collect();
            aucs.push(ranking_auc(&trace.scores, &labels)?);
        }
        let memory = tape.value(enc.memory).clone();
        let decoded = model.greedy_decode(&memory, enc.memory_valid.as_deref(), max_len)?;
        if decoded == s.target[..s.target.len() - 1] {
            correct += 1;
        }
    }
    let count = samples.len() as f64;
    Ok(Evaluation {
        loss: loss / count,
        auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
        seq_accuracy: correct as f64 / count,
    })
}

fn check_compatible(model: &Model, task: &TaskConfig) -> Result<()> {
    let mc = model.config();
    task.validate(mc.schedule.final_len())?;
    if task.vocab_size() > mc.vocab_size {
        return Err(config(format!(
            "task needs {} token ids, model has {}",
            task.vocab_size(),
            mc.vocab_size
        )));
    }
    if task.seq_len > mc.max_input_len {
        return Err(config(format!(
            "task sequences of {} exceed model input length {}",
            task.seq_len, mc.max_input_len
        )));
    }
    if task.target_len() > mc.max_target_len {
        return Err(config(format!(
            "task targets of {} exceed model target length {}",
            task.target_len(),
            mc.max_target_len
        )));
    }
    Ok(())
}

fn batch_gradient(model: &Model, batch: &[NeedleSample], first_nonce: u64) -> Result<(f64, Vec<Matrix>)> {
    let params: &ParamStore = model.params();
    let mut total: Vec<Matrix> = params.values().iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    let mut loss = 0.0;
    for (i, s) in batch.iter().enumerate() {
        let (l, grads) = model.loss_and_grads(&s.tokens, &s.target, first_nonce + i as u64)?;
        loss += l;
        for (t, g) in total.iter_mut().zip(&grads) {
            t.accumulate(g);
        }
    }
    let scale = 1.0 / batch.len() as f64;
    Ok((loss * scale, total.into_iter().map(|m| m.scale(scale)).collect()))
}

/// Trains on fresh generated batches. Fully determined by the model's
/// initial parameters, `task.seed` and `cfg`.
pub fn train_toy(model: &mut Model, task: &TaskConfig, cfg: &TrainConfig) -> Result<TrainReport> {
    check_compatible(model, task)?;
    if cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(config("batch_size and eval_every must be positive"));
    }
    let mut train = NeedleGenerator::with_stream(task.clone(), 0);
    let eval_set = NeedleGenerator::with_stream(task.clone(), 1).batch(cfg.eval_samples);
    let mut adam = Adam::new(model.params().values(), cfg.optimizer);

    let mut losses = Vec::with_capacity(cfg.steps);
    let mut log = vec![LogRow {
        step: 0,
        eval: evaluate(model, &eval_set)?,
    }];
    for step in 1..=cfg.steps {
        let batch = train.batch(cfg.batch_size);
        let (loss, grads) = batch_gradient(model, &batch, (step * cfg.batch_size) as u64)?;
        adam.step(model.params_mut().values_mut(), &grads)?;
        losses.push(loss);
        if step % cfg.eval_every == 0 || step == cfg.steps {
            log.push(LogRow {
                step,
                eval: evaluate(model, &eval_set)?,
            });
        }
    }
    let final_eval = log.last().expect("initial row").eval;
    Ok(TrainReport {
        losses,
        log,
        final_eval,
        steps: cfg.steps,
        seed: task.seed,
    })
}
