//! Trains the three aggregators on a reduced `bigram_shift` and prints the
//! comparison table. Pass `--full` for the desk-scale run.
//!
//! ```text
//! cargo run --release --example compare_aggregators
//! ```

use routed_attention::attention::Aggregator;
use routed_attention::config::ExperimentConfig;
use routed_attention::harness;
use routed_attention::tasks::TaskKind;

fn main() -> routed_attention::Result<()> {
    let full = std::env::args().any(|a| a == "--full");
    let out = std::env::temp_dir().join("routed-attention-compare");
    let configs: Vec<ExperimentConfig> = Aggregator::ALL
        .into_iter()
        .map(|agg| {
            let mut c = ExperimentConfig::desk(agg.as_str(), TaskKind::BigramShift, agg, 42);
            if !full {
                c.task.train_size = 2000;
                c.epochs = 5;
            }
            c.output_dir = out.join(agg.as_str());
            c
        })
        .collect();
    let cmp = harness::compare(&configs, &mut |name, r| {
        eprintln!("[{name}] epoch {} {} acc {:.4}", r.epoch, r.split, r.accuracy);
    })?;
    print!("{}", cmp.to_table());
    Ok(())
}
