//! EM routing on random votes: per-iteration assignment weights, then the
//! final means, variances and activations of each output capsule.
//!
//! ```text
//! cargo run --release --example em_routing -- 7
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use routed_attention::routing::{em_routing, RoutingConfig, RoutingKind};
use routed_attention::{Tape, Tensor};

fn main() -> routed_attention::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, n, width) = (4, 3, 12);
    let k = width / n;
    let cfg = RoutingConfig::new(RoutingKind::Em, h, n, 3, width)?;
    println!("lambda schedule {:?}, variance floor {:e}", cfg.lambda_schedule, cfg.var_floor);

    let mut tape = Tape::new();
    let votes = tape.constant(Tensor::randn([1, h, n, k], 1.0, &mut rng));
    let beta_a = tape.constant(Tensor::zeros([n]));
    let beta_mu = tape.constant(Tensor::zeros([n]));
    let out = em_routing(&mut tape, votes, &cfg, beta_a, beta_mu)?;

    for (t, c) in out.weight_history.iter().enumerate() {
        println!("E-step {}:", t + 1);
        for (i, row) in tape.value(*c).data().chunks(n).enumerate() {
            let cells: Vec<String> = row.iter().map(|x| format!("{x:.3}")).collect();
            println!("  head {i}: [{}]", cells.join(", "));
        }
    }
    let m = &out.m_step;
    let (mu, var, act) = (tape.value(m.mu).data(), tape.value(m.sigma2).data(), tape.value(m.activation).data());
    for j in 0..n {
        println!(
            "capsule {j}: mu {:?} var {:?} activation {:.4}",
            mu[j * k..(j + 1) * k].iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>(),
            var[j * k..(j + 1) * k].iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>(),
            act[j]
        );
    }
    Ok(())
}
