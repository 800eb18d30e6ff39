use halvingpool::attention::AttentionConfig;
use halvingpool::checkpoint::{decode, encode};
use halvingpool::model::{Model, ModelConfig, PoolSchedule, PoolerKind};
use halvingpool::scorers::ScorerSpec;
use halvingpool::task::{NeedleGenerator, TaskConfig};
use halvingpool::train::{evaluate, train_toy, TrainConfig};

fn tiny(pooler: PoolerKind) -> (ModelConfig, TaskConfig) {
    let task = TaskConfig {
        seq_len: 16,
        payload_count: 2,
        payload_vocab: 4,
        noise_vocab: 8,
        seed: 3,
    };
    let model = ModelConfig {
        vocab_size: task.vocab_size(),
        max_input_len: 16,
        max_target_len: task.target_len(),
        encoder_layers: 1,
        decoder_layers: 1,
        attention: AttentionConfig {
            d_model: 16,
            heads: 2,
            ffn_dim: 16,
            block_size: 8,
            dropout: 0.0,
        },
        schedule: PoolSchedule::single_pool(16, 1, 4).unwrap(),
        scorer: ScorerSpec::Linear,
        pooler,
        zero_init_head: true,
        init_seed: 9,
    };
    (model, task)
}

fn short_run() -> TrainConfig {
    TrainConfig {
        steps: 30,
        batch_size: 4,
        eval_every: 10,
        eval_samples: 4,
        ..Default::default()
    }
}

#[test]
fn training_lowers_loss_and_checkpoint_preserves_behaviour() {
    let (cfg, task) = tiny(PoolerKind::default());
    let mut model = Model::new(cfg).unwrap();
    let report = train_toy(&mut model, &task, &short_run()).unwrap();
    assert_eq!(report.losses.len(), 30);
    let head: f64 = report.losses[..5].iter().sum();
    let tail: f64 = report.losses[25..].iter().sum();
    assert!(tail < head, "loss went from {head} to {tail}");

    let restored = decode(&encode(&model).unwrap()).unwrap();
    let samples = NeedleGenerator::with_stream(task, 77).batch(4);
    assert_eq!(evaluate(&model, &samples).unwrap(), evaluate(&restored, &samples).unwrap());
}

#[test]
fn hard_pooling_trains_but_reports_scores() {
    let (cfg, task) = tiny(PoolerKind::Hard);
    let mut model = Model::new(cfg).unwrap();
    let before = model.params().clone();
    train_toy(&mut model, &task, &short_run()).unwrap();
    let eval = evaluate(&model, &NeedleGenerator::with_stream(task, 5).batch(4)).unwrap();
    assert!(eval.auc.is_some());
    // the decoder still learns even though the scorer gets no gradient
    assert_ne!(&before, model.params());
    for id in model.scorer_params() {
        assert_eq!(before.values()[id.index()], model.params().values()[id.index()]);
    }
}
