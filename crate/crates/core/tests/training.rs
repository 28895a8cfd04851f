use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use routed_attention::attention::Aggregator;
use routed_attention::checkpoint;
use routed_attention::config::ExperimentConfig;
use routed_attention::harness::{self, CHECKPOINT_FILE, METRICS_FILE};
use routed_attention::model::Encoder;
use routed_attention::tasks::{generate, Split, TaskKind, TaskSpec};
use routed_attention::{Category, Error};

fn small(dir: &Path, aggregator: Aggregator) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk("small", TaskKind::BigramShift, aggregator, 5);
    c.task.train_size = 96;
    c.task.valid_size = 32;
    c.task.test_size = 32;
    c.task.max_len = 8;
    c.model.width = 8;
    c.model.heads = 2;
    c.model.ffn_width = 8;
    c.model.layers = 1;
    c.model.aggregators.truncate(1);
    c.model.routing.width = 8;
    c.model.routing.input_caps = 2;
    c.model.routing.output_caps = 2;
    c.batch_size = 16;
    c.epochs = 3;
    c.output_dir = dir.to_path_buf();
    c
}

#[test]
fn same_config_twice_gives_identical_metrics() {
    for agg in [Aggregator::Linear, Aggregator::Em] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let first = harness::train(&small(a.path(), agg)).unwrap();
        let second = harness::train(&small(b.path(), agg)).unwrap();
        let read = |d: &Path| std::fs::read(d.join(METRICS_FILE)).unwrap();
        assert_eq!(read(a.path()), read(b.path()), "{agg}");
        // checkpoint meta embeds each run's own output_dir, so compare tensors
        let (_, pa) = checkpoint::load(&a.path().join(CHECKPOINT_FILE)).unwrap();
        let (_, pb) = checkpoint::load(&second.checkpoint).unwrap();
        assert!(pa.iter().zip(pb.iter()).all(|(x, y)| x.2 == y.2), "{agg}");
        assert_eq!(first.best_epoch, second.best_epoch);
    }
}

#[test]
fn zero_learning_rate_freezes_parameters_and_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), Aggregator::Simple);
    cfg.optimizer.learning_rate = 0.0;
    let out = harness::train(&cfg).unwrap();
    let fresh = Encoder::new(cfg.model.clone(), cfg.dims(), &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    for ((_, name, a), (_, _, b)) in out.model.params.iter().zip(fresh.params.iter()) {
        assert_eq!(a, b, "{name} moved");
    }
    let first = out.train_loss(1).unwrap();
    for e in 2..=cfg.epochs {
        assert!((out.train_loss(e).unwrap() - first).abs() < 1e-12);
    }
}

#[test]
fn corrupted_checkpoint_is_a_checkpoint_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = harness::train(&small(dir.path(), Aggregator::Linear)).unwrap();
    let mut bytes = std::fs::read(&out.checkpoint).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, &bytes).unwrap();
    let err = harness::evaluate(&bad, Split::Test).unwrap_err();
    assert_eq!(err.category(), Category::Checkpoint, "{err}");
    std::fs::write(&bad, &bytes[..mid]).unwrap();
    assert!(matches!(harness::evaluate(&bad, Split::Test), Err(Error::Checkpoint(_))));
}

#[test]
fn evaluate_after_reload_matches_training_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = harness::train(&small(dir.path(), Aggregator::Em)).unwrap();
    let rec = harness::evaluate(&out.checkpoint, Split::Test).unwrap();
    assert_eq!(rec.loss, out.test.loss);
    assert_eq!(rec.accuracy, out.test.accuracy);
    let valid = harness::evaluate(&out.checkpoint, Split::Valid).unwrap();
    assert_eq!(valid.accuracy, out.best_valid.accuracy);
}

#[test]
fn fresh_model_is_at_chance_on_a_balanced_task() {
    let spec = TaskSpec::desk(TaskKind::BigramShift, 42);
    let data = generate(&spec).unwrap();
    for agg in [Aggregator::Linear, Aggregator::Simple, Aggregator::Em] {
        let cfg = ExperimentConfig::desk("fresh", TaskKind::BigramShift, agg, 42);
        let model = Encoder::new(cfg.model.clone(), cfg.dims(), &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        let (_, acc) = harness::evaluate_examples(&model, &data.test, 100).unwrap();
        assert!((acc - 0.5).abs() <= 0.05, "{agg}: {acc}");
    }
}

#[test]
fn comparison_rows_share_the_task_and_count_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let cfgs: Vec<ExperimentConfig> = [Aggregator::Linear, Aggregator::Simple, Aggregator::Em]
        .into_iter()
        .map(|a| {
            let mut c = small(&dir.path().join(a.to_string()), a);
            c.name = a.to_string();
            c.epochs = 1;
            c
        })
        .collect();
    let cmp = harness::compare(&cfgs, &mut |_, _| {}).unwrap();
    assert_eq!(cmp.rows.len(), 3);
    assert!(cmp.rows.iter().all(|r| r.task == TaskKind::BigramShift));
    let m = &cfgs[0].model;
    let (d, n) = (m.width as i64, m.routing.output_caps as i64);
    let base = cmp.rows[0].param_count as i64;
    assert_eq!(cmp.rows[1].param_count as i64 - base, d * d + d);
    assert_eq!(cmp.rows[2].param_count as i64 - base, d * d + d + 2 * n);
}
