//! Trains one encoder on `bigram_shift` from a config file, then reloads the
//! best checkpoint and scores it again.
//!
//! ```text
//! cargo run --release --example train_bigram_shift -- configs/bigram_shift_em.toml
//! ```

use std::path::PathBuf;

use routed_attention::config::ExperimentConfig;
use routed_attention::harness;
use routed_attention::tasks::Split;

fn main() -> routed_attention::Result<()> {
    let path = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "configs/bigram_shift_linear.toml".into());
    let cfg = ExperimentConfig::load(&path)?;
    let data = routed_attention::tasks::generate(&cfg.task)?;
    let out = harness::train_on(&cfg, &data, &mut |r| {
        println!("epoch {:>2} {:<5} loss {:.4} acc {:.4}", r.epoch, r.split, r.loss, r.accuracy);
    })?;
    println!(
        "best epoch {}: test acc {:.4}, {} parameters, {:.1} steps/s",
        out.best_epoch, out.test.accuracy, out.param_count, out.steps_per_second
    );
    let again = harness::evaluate(&out.checkpoint, Split::Test)?;
    println!("reloaded {}: test acc {:.4}", out.checkpoint.display(), again.accuracy);
    Ok(())
}
