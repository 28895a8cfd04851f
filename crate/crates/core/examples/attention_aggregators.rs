//! One multi-head attention layer with each aggregator on the same input:
//! output shape, parameter count and a check that permuting the positions
//! permutes the outputs.
//!
//! ```text
//! cargo run --release --example attention_aggregators
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use routed_attention::attention::{multi_head_attention, Aggregator, AggregatorParams, AttentionParams};
use routed_attention::params::ParamStore;
use routed_attention::routing::{RoutingConfig, RoutingKind};
use routed_attention::{Tape, Tensor};

fn main() -> routed_attention::Result<()> {
    let (j, d, heads) = (6, 16, 4);
    let routing = RoutingConfig::new(RoutingKind::Em, heads, 8, 3, d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn([j, d], 1.0, &mut rng);
    let perm: Vec<usize> = (0..j).rev().collect();
    let x_perm = Tensor::from_fn([j, d], |i| x.data()[perm[i / d] * d + i % d]);

    for kind in Aggregator::ALL {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let att = AttentionParams::init(&mut store, "att", d, heads, &mut rng)?;
        let agg = AggregatorParams::init(&mut store, "agg", kind, d, &routing, &mut rng)?;
        let run = |input: &Tensor| -> routed_attention::Result<Tensor> {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape, false);
            let xv = tape.constant(input.clone());
            let out = multi_head_attention(&mut tape, xv, xv, xv, &att.bind(&b), &agg.bind(&b), None)?;
            Ok(tape.value(out).clone())
        };
        let (out, out_perm) = (run(&x)?, run(&x_perm)?);
        let equivariant = (0..j).all(|r| out_perm.data()[r * d..(r + 1) * d] == out.data()[perm[r] * d..(perm[r] + 1) * d]);
        println!(
            "{kind:<7} output {:?} parameters {:>5} permutation-equivariant {equivariant}",
            out.shape(),
            store.count()
        );
    }
    Ok(())
}
