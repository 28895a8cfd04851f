//! Routing-by-agreement aggregation of attention heads.
//!
//! Head outputs `Ô` (one row per sequence position) are turned into `H`
//! input capsules, each input capsule casts one vote per output capsule,
//! and an iterative routing procedure decides how much each vote counts.
//! The `N` output capsules of width `d/N` are concatenated back to width
//! `d`. Routing runs independently at every position.
//!
//! Tensor layout used throughout, with `R` = number of positions:
//!
//! | quantity            | shape             |
//! |---------------------|-------------------|
//! | input capsules      | `[R, H, d/H]`     |
//! | votes `V[h][n]`     | `[R, H, N, d/N]`  |
//! | weights `C`, logits | `[R, H, N]`       |
//! | `μ`, `σ²`, outputs  | `[R, N, d/N]`     |
//! | `A`, `χ`            | `[R, N]`          |

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{scaled_normal, Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which agreement procedure to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingKind {
    Simple,
    Em,
}

/// How per-dimension Gaussian densities combine into `P[h][n]` in the
/// E-step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteDensity {
    /// Product over dimensions (a diagonal Gaussian), evaluated as a sum of
    /// log-densities.
    #[default]
    Product,
    /// Sum over dimensions of the per-dimension densities, evaluated with a
    /// log-sum-exp.
    Sum,
}

pub const DEFAULT_VAR_FLOOR: f64 = 1e-6;
pub const DEFAULT_DENOM_EPS: f64 = 1e-12;
pub const DEFAULT_ITERATIONS: usize = 3;

/// Shape and numeric settings of one routing aggregator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingConfig {
    pub kind: RoutingKind,
    /// `H`, one input capsule per attention head.
    pub input_caps: usize,
    /// `N`.
    pub output_caps: usize,
    /// `T`.
    pub iterations: usize,
    /// Model width `d`.
    pub width: usize,
    /// Lower bound applied to every EM variance.
    pub var_floor: f64,
    /// Inverse temperature `λ` used by the M-step of each iteration.
    pub lambda_schedule: Vec<f64>,
    /// Floor on `Σ_h C[h][n]` wherever it is a denominator.
    pub denom_eps: f64,
    pub density: VoteDensity,
}

impl RoutingConfig {
    /// Config with `λ = [1, 2, .., T]`, variance floor `1e-6` and
    /// denominator floor `1e-12`.
    pub fn new(kind: RoutingKind, input_caps: usize, output_caps: usize, iterations: usize, width: usize) -> Result<Self> {
        let cfg = RoutingConfig {
            kind,
            input_caps,
            output_caps,
            iterations,
            width,
            var_floor: DEFAULT_VAR_FLOOR,
            lambda_schedule: (1..=iterations).map(|t| t as f64).collect(),
            denom_eps: DEFAULT_DENOM_EPS,
            density: VoteDensity::Product,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full-scale setting: as many output capsules as the model width and
    /// three iterations.
    pub fn full_scale(kind: RoutingKind, heads: usize, width: usize) -> Result<Self> {
        Self::new(kind, heads, width, DEFAULT_ITERATIONS, width)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.input_caps == 0 || self.output_caps == 0 || self.width == 0 {
            return err(format!(
                "routing sizes must be positive (H={}, N={}, d={})",
                self.input_caps, self.output_caps, self.width
            ));
        }
        if self.width % self.input_caps != 0 {
            return err(format!("width {} not divisible by {} input capsules", self.width, self.input_caps));
        }
        if self.width % self.output_caps != 0 {
            return err(format!("width {} not divisible by {} output capsules", self.width, self.output_caps));
        }
        if self.iterations == 0 {
            return err("routing needs at least one iteration".into());
        }
        if self.lambda_schedule.len() != self.iterations {
            return err(format!(
                "lambda schedule has {} entries for {} iterations",
                self.lambda_schedule.len(),
                self.iterations
            ));
        }
        if self.lambda_schedule.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return err(format!("lambda schedule must be positive: {:?}", self.lambda_schedule));
        }
        if !(self.var_floor > 0.0) || !(self.denom_eps > 0.0) {
            return err("variance floor and denominator floor must be positive".into());
        }
        Ok(())
    }

    /// `d/H`.
    pub fn input_width(&self) -> usize {
        self.width / self.input_caps
    }

    /// `d/N`.
    pub fn output_width(&self) -> usize {
        self.width / self.output_caps
    }

    /// Scalar parameters owned by one routing aggregator: the `H` input
    /// transforms (`d×d/H` weights plus biases), `H·N` vote matrices of
    /// `(d/H)×(d/N)`, and `β_A`, `β_μ` per output capsule for EM.
    pub fn param_count(&self) -> usize {
        let d = self.width;
        let transforms = d * d + d;
        let votes = self.input_caps * self.output_caps * self.input_width() * self.output_width();
        let betas = match self.kind {
            RoutingKind::Simple => 0,
            RoutingKind::Em => 2 * self.output_caps,
        };
        transforms + votes + betas
    }
}

/// Parameter handles of one routing aggregator.
///
/// `transform_w` is `[d, d]`: columns `[h·d/H, (h+1)·d/H)` hold the affine
/// map of head `h`. `votes` is `[H, d/H, N·d/N]`: columns
/// `[n·d/N, (n+1)·d/N)` of `votes[h]` hold `W[h→n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsuleParams {
    pub transform_w: ParamId,
    pub transform_b: ParamId,
    pub votes: ParamId,
    pub beta_a: Option<ParamId>,
    pub beta_mu: Option<ParamId>,
}

impl CapsuleParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &RoutingConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let (h, n, din, dout) = (cfg.input_caps, cfg.output_caps, cfg.input_width(), cfg.output_width());
        let transform_w = store.insert(format!("{prefix}.transform_w"), scaled_normal(&[d, d], d, rng))?;
        let transform_b = store.insert(format!("{prefix}.transform_b"), Tensor::zeros([d]))?;
        let votes = store.insert(format!("{prefix}.votes"), scaled_normal(&[h, din, n * dout], din, rng))?;
        let (beta_a, beta_mu) = match cfg.kind {
            RoutingKind::Simple => (None, None),
            RoutingKind::Em => (
                Some(store.insert(format!("{prefix}.beta_a"), Tensor::zeros([n]))?),
                Some(store.insert(format!("{prefix}.beta_mu"), Tensor::zeros([n]))?),
            ),
        };
        Ok(CapsuleParams { transform_w, transform_b, votes, beta_a, beta_mu })
    }

    pub fn bind(&self, bound: &Bound) -> CapsuleVars {
        CapsuleVars {
            transform_w: bound.var(self.transform_w),
            transform_b: bound.var(self.transform_b),
            votes: bound.var(self.votes),
            beta_a: self.beta_a.map(|p| bound.var(p)),
            beta_mu: self.beta_mu.map(|p| bound.var(p)),
        }
    }
}

/// [`CapsuleParams`] recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct CapsuleVars {
    pub transform_w: Var,
    pub transform_b: Var,
    pub votes: Var,
    pub beta_a: Option<Var>,
    pub beta_mu: Option<Var>,
}

/// Input capsules `Ω_in[h] = tanh(Ô W_h + b_h)` for every position:
/// `[R, d]` to `[R, H, d/H]`.
pub fn build_input_capsules(tape: &mut Tape, o_hat: Var, caps: &CapsuleVars, heads: usize) -> Result<Var> {
    let shape = tape.shape(o_hat).to_vec();
    if shape.len() != 2 || shape[1] % heads != 0 {
        return Err(Error::shape("build_input_capsules", format!("expected [R, d] with H={heads} | d, got {shape:?}")));
    }
    let (r, d) = (shape[0], shape[1]);
    let lin = tape.matmul(o_hat, caps.transform_w)?;
    let lin = tape.add(lin, caps.transform_b)?;
    let act = tape.tanh(lin)?;
    tape.reshape(act, &[r, heads, d / heads])
}

/// Votes `V[h→n] = Ω_in[h] W[h→n]`: `[R, H, d/H]` to `[R, H, N, d/N]`.
pub fn compute_votes(tape: &mut Tape, omega_in: Var, vote_w: Var, output_caps: usize) -> Result<Var> {
    let s = tape.shape(omega_in).to_vec();
    let w = tape.shape(vote_w).to_vec();
    if s.len() != 3 || w.len() != 3 || w[0] != s[1] || w[1] != s[2] || w[2] % output_caps != 0 {
        return Err(Error::shape(
            "compute_votes",
            format!("capsules {s:?} incompatible with vote weights {w:?} for N={output_caps}"),
        ));
    }
    let (r, h) = (s[0], s[1]);
    let dout = w[2] / output_caps;
    let by_head = tape.permute(omega_in, &[1, 0, 2])?;
    let v = tape.matmul(by_head, vote_w)?;
    let v = tape.reshape(v, &[h, r, output_caps, dout])?;
    tape.permute(v, &[1, 0, 2, 3])
}

/// Weighted mean of votes per output capsule:
/// `Ω[n] = Σ_h C[h][n] V[h][n] / max(Σ_h C[h][n], eps)`.
/// `weights: [R, H, N]`, `votes: [R, H, N, d/N]`, output `[R, N, d/N]`.
pub fn output_capsule(tape: &mut Tape, weights: Var, votes: Var, eps: f64) -> Result<Var> {
    let (num, denom) = weighted_sums(tape, weights, votes, eps)?;
    tape.div(num, denom)
}

/// Numerator `[R, N, d/N]` and floored denominator `[R, N, 1]` of the
/// weighted vote mean.
fn weighted_sums(tape: &mut Tape, weights: Var, votes: Var, eps: f64) -> Result<(Var, Var)> {
    let ws = tape.shape(weights).to_vec();
    let vs = tape.shape(votes).to_vec();
    if vs.len() != 4 || ws[..] != vs[..3] {
        return Err(Error::shape("output_capsule", format!("weights {ws:?} do not match votes {vs:?}")));
    }
    let w4 = tape.unsqueeze(weights, 3)?;
    let weighted = tape.mul(w4, votes)?;
    let num = tape.sum(weighted, 1)?;
    let total = tape.sum(weights, 1)?;
    let total = tape.clamp_min(total, eps)?;
    let denom = tape.unsqueeze(total, 2)?;
    Ok((num, denom))
}

/// Result of [`simple_routing`].
#[derive(Clone, Debug)]
pub struct SimpleRouting {
    /// Squashed output capsules `[R, N, d/N]`.
    pub capsules: Var,
    /// Routing logits `B` after the last update, `[R, H, N]`.
    pub logits: Var,
    /// Weights `C` used by the last iteration.
    pub weights: Var,
    /// `C` of every iteration, in order.
    pub weight_history: Vec<Var>,
}

/// Iterative simple routing: `B = 0`; repeat `T` times
/// { `C = softmax_n(B)`; `Ω = squash(weighted vote mean)`; `B += Ω · V` }.
pub fn simple_routing(tape: &mut Tape, votes: Var, iterations: usize, eps: f64) -> Result<SimpleRouting> {
    if iterations == 0 {
        return Err(Error::Config("routing needs at least one iteration".into()));
    }
    let vs = tape.shape(votes).to_vec();
    if vs.len() != 4 {
        return Err(Error::shape("simple_routing", format!("votes must be [R, H, N, d], got {vs:?}")));
    }
    let mut logits = tape.constant(Tensor::zeros(&vs[..3]));
    let mut history = Vec::with_capacity(iterations);
    let mut capsules = None;
    for _ in 0..iterations {
        let c = tape.softmax(logits, 2)?;
        history.push(c);
        let s = output_capsule(tape, c, votes, eps)?;
        let out = tape.squash(s)?;
        let out4 = tape.unsqueeze(out, 1)?;
        let prod = tape.mul(out4, votes)?;
        let agreement = tape.sum(prod, 3)?;
        logits = tape.add(logits, agreement)?;
        capsules = Some(out);
    }
    Ok(SimpleRouting {
        capsules: capsules.expect("at least one iteration"),
        logits,
        weights: *history.last().expect("at least one iteration"),
        weight_history: history,
    })
}

/// Quantities produced by one EM M-step.
#[derive(Clone, Copy, Debug)]
pub struct MStep {
    /// `μ[n]`, `[R, N, d/N]`.
    pub mu: Var,
    /// `σ²[n]`, floored, `[R, N, d/N]`.
    pub sigma2: Var,
    /// `Σ_h C[h][n]`, `[R, N]`.
    pub weight_sum: Var,
    /// `χ[n]`, `[R, N]`.
    pub cost: Var,
    /// `A[n]`, `[R, N]`.
    pub activation: Var,
    /// `log A[n]`, evaluated stably.
    pub log_activation: Var,
    /// `(V[h][n] - μ[n])²`, `[R, H, N, d/N]`.
    pub sq_dev: Var,
}

/// EM M-step with weights held fixed:
///
/// * `μ = Σ_h C V / Σ_h C`
/// * `σ² = max(Σ_h C (V-μ)² / Σ_h C, floor)`
/// * `χ = Σ_i (log σ_i + (1 + log 2π)/2) · Σ_h C`, with `log σ_i = ½ log σ²_i`
/// * `A = logistic(λ (β_A - β_μ Σ_h C - χ))`
pub fn em_m_step(
    tape: &mut Tape,
    votes: Var,
    weights: Var,
    beta_a: Var,
    beta_mu: Var,
    lambda: f64,
    cfg: &RoutingConfig,
) -> Result<MStep> {
    let (num, denom) = weighted_sums(tape, weights, votes, cfg.denom_eps)?;
    let mu = tape.div(num, denom)?;
    let weight_sum = tape.sum(weights, 1)?;

    let mu4 = tape.unsqueeze(mu, 1)?;
    let dev = tape.sub(votes, mu4)?;
    let sq_dev = tape.square(dev)?;
    let w4 = tape.unsqueeze(weights, 3)?;
    let wsq = tape.mul(w4, sq_dev)?;
    let var_num = tape.sum(wsq, 1)?;
    let var = tape.div(var_num, denom)?;
    let sigma2 = tape.clamp_min(var, cfg.var_floor)?;

    let log_var = tape.log(sigma2)?;
    let log_sigma = tape.scale(log_var, 0.5)?;
    let per_dim = tape.add_scalar(log_sigma, 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln()))?;
    let per_cap = tape.sum(per_dim, 2)?;
    let cost = tape.mul(per_cap, weight_sum)?;

    let pull = tape.mul(beta_mu, weight_sum)?;
    let net = tape.sub(beta_a, pull)?;
    let net = tape.sub(net, cost)?;
    let logit = tape.scale(net, lambda)?;
    let activation = tape.logistic(logit)?;
    let log_activation = tape.log_sigmoid(logit)?;
    Ok(MStep { mu, sigma2, weight_sum, cost, activation, log_activation, sq_dev })
}

/// EM E-step: `C[h][n] = A[n] P[h][n] / Σ_n' A[n'] P[h][n']`, computed as a
/// softmax over `n` of `log A[n] + log P[h][n]`.
pub fn em_e_step(tape: &mut Tape, m: &MStep, density: VoteDensity) -> Result<Var> {
    // per-dimension Gaussian log density: -½ log(2π σ²) - (v-μ)² / (2σ²)
    let two_var = tape.scale(m.sigma2, 2.0)?;
    let two_var4 = tape.unsqueeze(two_var, 1)?;
    let z = tape.div(m.sq_dev, two_var4)?;
    let log_var = tape.log(m.sigma2)?;
    let norm = tape.add_scalar(log_var, (2.0 * std::f64::consts::PI).ln())?;
    let norm = tape.scale(norm, -0.5)?;
    let norm4 = tape.unsqueeze(norm, 1)?;
    let log_dens = tape.sub(norm4, z)?;
    let log_p = match density {
        VoteDensity::Product => tape.sum(log_dens, 3)?,
        VoteDensity::Sum => tape.logsumexp(log_dens, 3)?,
    };
    let log_a = tape.unsqueeze(m.log_activation, 1)?;
    let score = tape.add(log_p, log_a)?;
    tape.softmax(score, 2)
}

/// Result of [`em_routing`].
#[derive(Clone, Debug)]
pub struct EmRouting {
    /// `A[n] · μ[n]`, `[R, N, d/N]`.
    pub capsules: Var,
    /// Last M-step.
    pub m_step: MStep,
    /// `C` after the last E-step.
    pub weights: Var,
    /// `C` after every E-step, in order.
    pub weight_history: Vec<Var>,
}

/// Iterative EM routing: `C = 1/N`; repeat `T` times {M-step, E-step};
/// output `A[n] · μ[n]` from the last M-step.
pub fn em_routing(tape: &mut Tape, votes: Var, cfg: &RoutingConfig, beta_a: Var, beta_mu: Var) -> Result<EmRouting> {
    cfg.validate()?;
    let vs = tape.shape(votes).to_vec();
    if vs.len() != 4 || vs[2] != cfg.output_caps {
        return Err(Error::shape("em_routing", format!("votes {vs:?} do not have N={} capsules", cfg.output_caps)));
    }
    let n = cfg.output_caps;
    let mut weights = tape.constant(Tensor::full(&vs[..3], 1.0 / n as f64));
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut last = None;
    for &lambda in &cfg.lambda_schedule {
        let m = em_m_step(tape, votes, weights, beta_a, beta_mu, lambda, cfg)?;
        weights = em_e_step(tape, &m, cfg.density)?;
        history.push(weights);
        last = Some(m);
    }
    let m = last.expect("at least one iteration");
    let a = tape.unsqueeze(m.activation, 2)?;
    let capsules = tape.mul(a, m.mu)?;
    Ok(EmRouting { capsules, m_step: m, weights, weight_history: history })
}

/// Routes precomputed votes with the configured procedure and returns the
/// output capsules `[R, N, d/N]`.
pub fn route(tape: &mut Tape, votes: Var, caps: &CapsuleVars, cfg: &RoutingConfig) -> Result<Var> {
    match cfg.kind {
        RoutingKind::Simple => Ok(simple_routing(tape, votes, cfg.iterations, cfg.denom_eps)?.capsules),
        RoutingKind::Em => {
            let (Some(ba), Some(bm)) = (caps.beta_a, caps.beta_mu) else {
                return Err(Error::Config("EM routing needs beta_a and beta_mu parameters".into()));
            };
            Ok(em_routing(tape, votes, cfg, ba, bm)?.capsules)
        }
    }
}

/// Full routed aggregation `[R, d] -> [R, d]`: input capsules, votes,
/// routing, then concatenation of the `N` output capsules.
pub fn aggregate_routing(tape: &mut Tape, o_hat: Var, caps: &CapsuleVars, cfg: &RoutingConfig) -> Result<Var> {
    cfg.validate()?;
    let shape = tape.shape(o_hat).to_vec();
    if shape.len() != 2 || shape[1] != cfg.width {
        return Err(Error::shape("aggregate_routing", format!("expected [R, {}], got {shape:?}", cfg.width)));
    }
    let omega_in = build_input_capsules(tape, o_hat, caps, cfg.input_caps)?;
    let votes = compute_votes(tape, omega_in, caps.votes, cfg.output_caps)?;
    let out = route(tape, votes, caps, cfg)?;
    tape.reshape(out, &[shape[0], cfg.width])
}
