//! Generates each probing task at a small size and prints a few examples,
//! the class histogram and whether every label agrees with the oracle.
//!
//! ```text
//! cargo run --release --example synthetic_tasks
//! ```

use routed_attention::tasks::{generate, label_oracle, TaskKind, TaskSpec};

fn main() -> routed_attention::Result<()> {
    for kind in [TaskKind::SeqLenBucket, TaskKind::WordContent, TaskKind::BigramShift, TaskKind::TokenCountParity] {
        let spec = TaskSpec { train_size: 2000, valid_size: 200, test_size: 200, ..TaskSpec::desk(kind, 42) };
        let data = generate(&spec)?;
        let mut hist = vec![0; spec.classes];
        let mut agree = true;
        for e in &data.train {
            hist[e.label] += 1;
            agree &= label_oracle(&spec, &e.tokens)? == e.label;
        }
        println!("{kind}: {} classes, histogram {hist:?}, oracle agrees {agree}", spec.classes);
        for e in data.train.iter().take(3) {
            println!("  {} <- {:?}", e.label, e.tokens);
        }
    }
    Ok(())
}
