//! Multi-head scaled dot-product attention with a pluggable head
//! aggregator.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{scaled_normal, Bound, ParamId, ParamStore};
use crate::routing::{aggregate_routing, CapsuleParams, CapsuleVars, RoutingConfig, RoutingKind};
use crate::tape::{Tape, Var};

/// How the `H` head outputs become the final `J×d` states.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    /// Concatenation followed by `W^O`.
    Linear,
    /// Simple routing-by-agreement.
    Simple,
    /// EM routing-by-agreement.
    Em,
}

impl Aggregator {
    pub const ALL: [Aggregator; 3] = [Aggregator::Linear, Aggregator::Simple, Aggregator::Em];

    pub fn routing_kind(self) -> Option<RoutingKind> {
        match self {
            Aggregator::Linear => None,
            Aggregator::Simple => Some(RoutingKind::Simple),
            Aggregator::Em => Some(RoutingKind::Em),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Aggregator::Linear => "linear",
            Aggregator::Simple => "simple",
            Aggregator::Em => "em",
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Aggregator::Linear),
            "simple" | "simple_routing" => Ok(Aggregator::Simple),
            "em" | "em_routing" => Ok(Aggregator::Em),
            other => Err(Error::Config(format!("unknown aggregator {other:?} (expected linear, simple or em)"))),
        }
    }
}

/// Projection parameters of one attention block.
///
/// The per-head matrices `W_h^Q, W_h^K, W_h^V ∈ ℝ^{d×d/H}` are stored
/// side by side in one `[d, d]` matrix each: head `h` owns columns
/// `[h·d/H, (h+1)·d/H)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub heads: usize,
    pub width: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        check_heads(width, heads)?;
        let mut mat = |name: &str, store: &mut ParamStore| store.insert(format!("{prefix}.{name}"), scaled_normal(&[width, width], width, rng));
        let w_q = mat("w_q", store)?;
        let w_k = mat("w_k", store)?;
        let w_v = mat("w_v", store)?;
        Ok(AttentionParams { heads, width, w_q, w_k, w_v })
    }

    pub fn bind(&self, bound: &Bound) -> AttentionVars {
        AttentionVars {
            heads: self.heads,
            w_q: bound.var(self.w_q),
            w_k: bound.var(self.w_k),
            w_v: bound.var(self.w_v),
        }
    }
}

/// [`AttentionParams`] recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub heads: usize,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

/// Aggregation parameters of one attention block.
#[derive(Clone, Debug, PartialEq)]
pub enum AggregatorParams {
    Linear { w_o: ParamId },
    Routing { caps: CapsuleParams, config: RoutingConfig },
}

impl AggregatorParams {
    /// `routing` supplies `N`, `T` and the numeric settings; its kind is
    /// overridden by `kind`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        kind: Aggregator,
        width: usize,
        routing: &RoutingConfig,
        rng: &mut R,
    ) -> Result<Self> {
        match kind.routing_kind() {
            None => Ok(AggregatorParams::Linear {
                w_o: store.insert(format!("{prefix}.w_o"), scaled_normal(&[width, width], width, rng))?,
            }),
            Some(rk) => {
                let mut config = routing.clone();
                config.kind = rk;
                config.width = width;
                config.validate()?;
                let caps = CapsuleParams::init(store, &format!("{prefix}.routing"), &config, rng)?;
                Ok(AggregatorParams::Routing { caps, config })
            }
        }
    }

    pub fn kind(&self) -> Aggregator {
        match self {
            AggregatorParams::Linear { .. } => Aggregator::Linear,
            AggregatorParams::Routing { config, .. } => match config.kind {
                RoutingKind::Simple => Aggregator::Simple,
                RoutingKind::Em => Aggregator::Em,
            },
        }
    }

    pub fn bind(&self, bound: &Bound) -> AggregatorVars {
        match self {
            AggregatorParams::Linear { w_o } => AggregatorVars::Linear { w_o: bound.var(*w_o) },
            AggregatorParams::Routing { caps, config } => AggregatorVars::Routing { caps: caps.bind(bound), config: config.clone() },
        }
    }
}

/// [`AggregatorParams`] recorded on a tape.
#[derive(Clone, Debug)]
pub enum AggregatorVars {
    Linear { w_o: Var },
    Routing { caps: CapsuleVars, config: RoutingConfig },
}

/// Per-head outputs of one attention call.
#[derive(Clone, Debug)]
pub struct HeadOutputs {
    /// `O_h`, each `[.., J, d/H]`, in head order.
    pub heads: Vec<Var>,
    /// `Ô = [O_1, .., O_H]`, `[.., J, d]`.
    pub concat: Var,
}

fn check_heads(width: usize, heads: usize) -> Result<()> {
    if heads == 0 || width == 0 || width % heads != 0 {
        return Err(Error::Config(format!("model width {width} is not divisible by {heads} heads")));
    }
    Ok(())
}

fn check_width(tape: &Tape, op: &'static str, x: Var, width: usize) -> Result<()> {
    let s = tape.shape(x);
    if s.len() < 2 || *s.last().unwrap() != width {
        return Err(Error::shape(op, format!("expected [.., {width}] input, got {s:?}")));
    }
    Ok(())
}

/// `Q_h, K_h, V_h = Q W_h^Q, K W_h^K, V W_h^V` for every head.
pub fn project_heads(tape: &mut Tape, q: Var, k: Var, v: Var, p: &AttentionVars) -> Result<Vec<(Var, Var, Var)>> {
    let width = tape.shape(p.w_q)[0];
    check_heads(width, p.heads)?;
    for x in [q, k, v] {
        check_width(tape, "project_heads", x, width)?;
    }
    let dk = width / p.heads;
    let mut out = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let wq = tape.narrow(p.w_q, 1, h * dk, dk)?;
        let wk = tape.narrow(p.w_k, 1, h * dk, dk)?;
        let wv = tape.narrow(p.w_v, 1, h * dk, dk)?;
        let qh = tape.matmul(q, wq)?;
        let kh = tape.matmul(k, wk)?;
        let vh = tape.matmul(v, wv)?;
        out.push((qh, kh, vh));
    }
    Ok(out)
}

/// Attention weights `softmax(Q_h K_hᵀ / √dk + mask)`, row-stochastic over
/// keys. `mask` is added to the logits and must broadcast to them.
pub fn attention_weights(tape: &mut Tape, qh: Var, kh: Var, mask: Option<Var>) -> Result<Var> {
    let dk = *tape.shape(qh).last().ok_or_else(|| Error::shape("attention", "rank-0 query"))?;
    let kt = tape.transpose(kh)?;
    let logits = tape.matmul(qh, kt)?;
    let mut logits = tape.scale(logits, 1.0 / (dk as f64).sqrt())?;
    if let Some(m) = mask {
        logits = tape.add(logits, m)?;
    }
    let axis = tape.shape(logits).len() - 1;
    tape.softmax(logits, axis)
}

/// `O_h = softmax(Q_h K_hᵀ / √dk) V_h`.
pub fn scaled_dot_attention(tape: &mut Tape, qh: Var, kh: Var, vh: Var) -> Result<Var> {
    let w = attention_weights(tape, qh, kh, None)?;
    tape.matmul_sorted(w, vh)
}

/// `O = Ô W^O`.
pub fn aggregate_linear(tape: &mut Tape, o_hat: Var, w_o: Var) -> Result<Var> {
    tape.matmul(o_hat, w_o)
}

/// Computes every head with the per-head path and concatenates them.
pub fn head_outputs(tape: &mut Tape, q: Var, k: Var, v: Var, p: &AttentionVars) -> Result<HeadOutputs> {
    let proj = project_heads(tape, q, k, v, p)?;
    let mut heads = Vec::with_capacity(proj.len());
    for (qh, kh, vh) in proj {
        heads.push(scaled_dot_attention(tape, qh, kh, vh)?);
    }
    let axis = tape.shape(heads[0]).len() - 1;
    let concat = tape.concat(&heads, axis)?;
    Ok(HeadOutputs { heads, concat })
}

/// Concatenated head outputs `Ô` for `q: [B, J, d]`, `k, v: [B, M, d]`,
/// computed with fused projections. `mask`, when given, is added to the
/// `[B, H, J, M]` logits (typically `[B, 1, 1, M]` with `-1e9` at padding).
pub fn concat_heads_batched(tape: &mut Tape, q: Var, k: Var, v: Var, p: &AttentionVars, mask: Option<Var>) -> Result<Var> {
    let width = tape.shape(p.w_q)[0];
    check_heads(width, p.heads)?;
    let (h, dk) = (p.heads, width / p.heads);
    let split = |tape: &mut Tape, x: Var, w: Var| -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != width {
            return Err(Error::shape("multi_head_attention", format!("expected [B, J, {width}], got {s:?}")));
        }
        let y = tape.matmul(x, w)?;
        let y = tape.reshape(y, &[s[0], s[1], h, dk])?;
        tape.permute(y, &[0, 2, 1, 3])
    };
    let qh = split(tape, q, p.w_q)?;
    let kh = split(tape, k, p.w_k)?;
    let vh = split(tape, v, p.w_v)?;
    let w = attention_weights(tape, qh, kh, mask)?;
    let o = tape.matmul_sorted(w, vh)?;
    let o = tape.permute(o, &[0, 2, 1, 3])?;
    let s = tape.shape(o).to_vec();
    tape.reshape(o, &[s[0], s[1], width])
}

/// Applies an aggregator to `Ô` of shape `[.., J, d]`; routing runs per
/// position.
pub fn aggregate(tape: &mut Tape, o_hat: Var, agg: &AggregatorVars) -> Result<Var> {
    match agg {
        AggregatorVars::Linear { w_o } => aggregate_linear(tape, o_hat, *w_o),
        AggregatorVars::Routing { caps, config } => {
            let shape = tape.shape(o_hat).to_vec();
            let d = *shape.last().ok_or_else(|| Error::shape("aggregate", "rank-0 input"))?;
            let rows = shape.iter().product::<usize>() / d;
            let flat = tape.reshape(o_hat, &[rows, d])?;
            let out = aggregate_routing(tape, flat, caps, config)?;
            tape.reshape(out, &shape)
        }
    }
}

/// Multi-head attention `[.., J, d] -> [.., J, d]`: heads, then the chosen
/// aggregator. Accepts unbatched `[J, d]` or batched `[B, J, d]` inputs.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    p: &AttentionVars,
    agg: &AggregatorVars,
    mask: Option<Var>,
) -> Result<Var> {
    let rank = tape.shape(q).len();
    let o_hat = match rank {
        2 => {
            let lift = |tape: &mut Tape, x: Var| tape.unsqueeze(x, 0);
            let (q3, k3, v3) = (lift(tape, q)?, lift(tape, k)?, lift(tape, v)?);
            let o = concat_heads_batched(tape, q3, k3, v3, p, mask)?;
            let s = tape.shape(o)[1..].to_vec();
            tape.reshape(o, &s)?
        }
        3 => concat_heads_batched(tape, q, k, v, p, mask)?,
        _ => {
            return Err(Error::shape("multi_head_attention", format!("expected rank 2 or 3 input, got {:?}", tape.shape(q))));
        }
    };
    aggregate(tape, o_hat, agg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(width: usize, heads: usize, kind: Aggregator, seed: u64) -> (ParamStore, AttentionParams, AggregatorParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let att = AttentionParams::init(&mut store, "att", width, heads, &mut rng).unwrap();
        let rc = RoutingConfig::new(RoutingKind::Simple, heads, 1, 2, width).unwrap();
        let agg = AggregatorParams::init(&mut store, "agg", kind, width, &rc, &mut rng).unwrap();
        (store, att, agg)
    }

    #[test]
    fn unknown_aggregator_is_config_error() {
        assert!(matches!("maxpool".parse::<Aggregator>(), Err(Error::Config(_))));
        assert_eq!("em".parse::<Aggregator>().unwrap(), Aggregator::Em);
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        assert!(matches!(AttentionParams::init(&mut store, "a", 6, 4, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn single_key_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::randn([3, 2], 1.0, &mut rng));
        let k = tape.constant(Tensor::randn([1, 2], 1.0, &mut rng));
        let v = tape.constant(Tensor::randn([1, 2], 1.0, &mut rng));
        let o = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        let vv = tape.value(v).data().to_vec();
        for j in 0..3 {
            assert_eq!(&tape.value(o).data()[j * 2..j * 2 + 2], &vv[..]);
        }
    }

    #[test]
    fn orthogonal_query_averages_values() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::new([1, 2], vec![1.0, 0.0]).unwrap());
        let k = tape.constant(Tensor::new([3, 2], vec![0.0, 1.0, 0.0, -2.0, 0.0, 5.0]).unwrap());
        let v = tape.constant(Tensor::new([3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap());
        let o = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        let o = tape.value(o).data();
        assert!((o[0] - 3.0).abs() < 1e-15 && (o[1] - 5.0).abs() < 1e-15);
    }

    #[test]
    fn fused_path_matches_per_head_path() {
        let (store, att, _) = setup(8, 4, Aggregator::Linear, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let av = att.bind(&bound);
        let x = tape.constant(Tensor::randn([5, 8], 1.0, &mut rng));
        let per_head = head_outputs(&mut tape, x, x, x, &av).unwrap();
        let x3 = tape.unsqueeze(x, 0).unwrap();
        let fused = concat_heads_batched(&mut tape, x3, x3, x3, &av, None).unwrap();
        let fused = tape.reshape(fused, &[5, 8]).unwrap();
        assert!(tape.value(fused).max_abs_diff(tape.value(per_head.concat)) < 1e-13);
        // slicing Ô recovers each head
        for (h, &oh) in per_head.heads.iter().enumerate() {
            let s = tape.narrow(per_head.concat, 1, h * 2, 2).unwrap();
            assert_eq!(tape.value(s), tape.value(oh));
        }
    }

    #[test]
    fn output_shape_is_j_by_d_for_every_aggregator() {
        for kind in Aggregator::ALL {
            let (store, att, agg) = setup(8, 2, kind, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, false);
            let x = tape.constant(Tensor::randn([6, 8], 1.0, &mut rng));
            let o = multi_head_attention(&mut tape, x, x, x, &att.bind(&bound), &agg.bind(&bound), None).unwrap();
            assert_eq!(tape.shape(o), &[6, 8], "{kind}");
        }
    }
}
