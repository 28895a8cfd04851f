//! Finite-difference gradient check of attention followed by each
//! aggregator, over a handful of seeds.
//!
//! ```text
//! cargo run --release --example gradcheck -- 20
//! ```

use routed_attention::attention::Aggregator;
use routed_attention::gradcheck::attention_grad_check;

fn main() -> routed_attention::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    for kind in Aggregator::ALL {
        let mut worst: f64 = 0.0;
        let mut coords = 0;
        for seed in 0..seeds {
            let r = attention_grad_check(kind, seed)?;
            worst = worst.max(r.max_rel_error);
            coords = r.coordinates;
        }
        println!("{kind:<7} seeds={seeds} coordinates={coords} max_rel_error={worst:.3e}");
    }
    Ok(())
}
