//! Routing-by-agreement on a hand-built set of votes: three heads agree on
//! capsule 0 and one dissents, so the dissenter's weight on capsule 0 falls
//! with each iteration.
//!
//! ```text
//! cargo run --release --example simple_routing
//! ```

use routed_attention::routing::simple_routing;
use routed_attention::{Tape, Tensor};

fn main() -> routed_attention::Result<()> {
    // [R=1, H=4, N=2, k=2]
    #[rustfmt::skip]
    let votes = vec![
        1.0, 1.0,    0.2, -0.1,
        1.1, 0.9,   -0.3,  0.2,
        0.9, 1.0,    0.1,  0.0,
       -1.0, -1.0,   0.4,  0.3,
    ];
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new([1, 4, 2, 2], votes)?);
    let out = simple_routing(&mut tape, v, 4, 1e-12)?;
    for (t, c) in out.weight_history.iter().enumerate() {
        println!("iteration {}:", t + 1);
        for (h, row) in tape.value(*c).data().chunks(2).enumerate() {
            println!("  head {h}: C = [{:.4}, {:.4}]", row[0], row[1]);
        }
    }
    for (n, cap) in tape.value(out.capsules).data().chunks(2).enumerate() {
        let norm = cap.iter().map(|x| x * x).sum::<f64>().sqrt();
        println!("capsule {n}: [{:.4}, {:.4}] length {norm:.4}", cap[0], cap[1]);
    }
    Ok(())
}
