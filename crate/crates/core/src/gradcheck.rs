//! Central finite-difference checks of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{multi_head_attention, Aggregator, AggregatorParams, AttentionParams};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::routing::{RoutingConfig, RoutingKind};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Finite-difference step used by [`attention_grad_check`].
pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of a gradient check over one or more inputs.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over all coordinates of `|analytic - numeric| / max(1e-8, |numeric|)`.
    pub max_rel_error: f64,
    /// Same quantity restricted to each input, in input order.
    pub per_input: Vec<f64>,
    /// Number of coordinates probed.
    pub coordinates: usize,
}

/// Scalar function recorded on a fresh tape from bound inputs.
pub trait TapeFn: Fn(&mut Tape, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Tape, &[Var]) -> Result<Var>> TapeFn for F {}

fn eval<F: TapeFn>(f: &F, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::Contract(format!("grad_check needs a scalar function, got shape {:?}", v.shape())));
    }
    let y = v.item();
    if !y.is_finite() {
        return Err(Error::numeric("grad_check", "non-finite function value while probing"));
    }
    Ok(y)
}

/// Analytic gradients of `f` at `inputs` via one backward pass.
pub fn analytic_grads<F: TapeFn>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect())
}

/// Compares tape gradients with central differences of step `h` for every
/// coordinate of every input.
pub fn grad_check_many<F: TapeFn>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport> {
    let analytic = analytic_grads(&f, inputs)?;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut coordinates = 0;
    for (which, grad) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for k in 0..inputs[which].numel() {
            let orig = inputs[which].data()[k];
            probe[which].data_mut()[k] = orig + h;
            let up = eval(&f, &probe)?;
            probe[which].data_mut()[k] = orig - h;
            let down = eval(&f, &probe)?;
            probe[which].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (grad.data()[k] - numeric).abs() / numeric.abs().max(1e-8);

            worst = worst.max(err);
            coordinates += 1;
        }
        per_input.push(worst);
    }
    let max_rel_error = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, per_input, coordinates })
}

/// Single-input form: returns the max relative error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = grad_check_many(|tape: &mut Tape, vars: &[Var]| f(tape, vars[0]), std::slice::from_ref(x), h)?;
    Ok(report.max_rel_error)
}

/// End-to-end check of self-attention followed by `kind` aggregation and
/// the scalar loss `Σ O ⊙ R` for a fixed random `R`.
///
/// The instance is small (`J=4, d=16, H=4, N=8, T=3`) and fully determined
/// by `seed`. Every coordinate of the input and of every parameter is
/// probed.
pub fn attention_grad_check(kind: Aggregator, seed: u64) -> Result<GradCheckReport> {
    let (j, d, h) = (4, 16, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let att = AttentionParams::init(&mut store, "att", d, h, &mut rng)?;
    let routing = RoutingConfig::new(RoutingKind::Em, h, 8, 3, d)?;
    let agg = AggregatorParams::init(&mut store, "agg", kind, d, &routing, &mut rng)?;
    let x = Tensor::randn([j, d], 1.0, &mut rng);
    let r = Tensor::randn([j, d], 1.0, &mut rng);
    let mut inputs = vec![x];
    inputs.extend(store.iter().map(|(_, _, t)| t.clone()));
    let f = |tape: &mut Tape, vars: &[Var]| {
        let bound = Bound::from_vars(vars[1..].to_vec());
        let o = multi_head_attention(tape, vars[0], vars[0], vars[0], &att.bind(&bound), &agg.bind(&bound), None)?;
        let rv = tape.constant(r.clone());
        let weighted = tape.mul(o, rv)?;
        tape.sum_all(weighted)
    };
    grad_check_many(f, &inputs, DEFAULT_STEP)
}
