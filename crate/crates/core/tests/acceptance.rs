//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits nonzero if any failed.
//!
//! ```text
//! cargo test --release --test acceptance
//! ```
//!
//! Criterion 7 trains the three checked-in bigram_shift configs for their
//! full 20 epochs, so this target takes several minutes.

mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use routed_attention::attention::{multi_head_attention, Aggregator, AggregatorParams, AttentionParams};
use routed_attention::config::ExperimentConfig;
use routed_attention::gradcheck::attention_grad_check;
use routed_attention::harness::{self, TrainOutcome, METRICS_FILE};
use routed_attention::model::Encoder;
use routed_attention::params::ParamStore;
use routed_attention::routing::{em_routing, simple_routing, RoutingConfig, RoutingKind};
use routed_attention::tasks::{generate, Split};
use routed_attention::{Tape, Tensor};

type Outcome = Result<String, String>;

const SIZES: [usize; 4] = [1, 2, 4, 8];
const OUT_WIDTHS: [usize; 3] = [2, 4, 8];

fn random_votes(h: usize, n: usize, k: usize, scale: f64, rng: &mut ChaCha8Rng) -> (Tensor, common::Votes) {
    let nested: common::Votes =
        (0..h).map(|_| (0..n).map(|_| (0..k).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).collect()).collect();
    let data: Vec<f64> = nested.iter().flatten().flatten().copied().collect();
    (Tensor::new([1, h, n, k], data).unwrap(), nested)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest `|Σ_n C[h][n] - 1|` over every `(h)` row of `c: [1, H, N]`.
fn simplex_error(c: &Tensor) -> f64 {
    let n = c.shape()[2];
    c.data().chunks(n).map(|row| (row.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

/// EM settings for `n` capsules and `t` iterations with random `λ` and `β`.
fn em_instance(n: usize, t: usize, rng: &mut ChaCha8Rng) -> (RoutingConfig, Tensor, Tensor) {
    let mut cfg = RoutingConfig::new(RoutingKind::Em, 1, n, t, n).unwrap();
    cfg.lambda_schedule = (0..t).map(|_| rng.random_range(0.5..3.0)).collect();
    let ba = Tensor::from_fn([n], |_| rng.random_range(-1.0..1.0));
    let bm = Tensor::from_fn([n], |_| rng.random_range(-1.0..1.0));
    (cfg, ba, bm)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let h = SIZES[rng.random_range(0..4)];
        let n = SIZES[rng.random_range(0..4)];
        let k = OUT_WIDTHS[rng.random_range(0..3)];
        let t = rng.random_range(1..=3);
        let scale = [0.1, 1.0, 10.0][rng.random_range(0..3)];
        let (votes, _) = random_votes(h, n, k, scale, &mut rng);
        let (cfg, ba, bm) = em_instance(n, t, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(votes);
        let simple = simple_routing(&mut tape, v, t, 1e-12).map_err(|e| e.to_string())?;
        let (ba, bm) = (tape.constant(ba), tape.constant(bm));
        let em = em_routing(&mut tape, v, &cfg, ba, bm).map_err(|e| e.to_string())?;
        for c in simple.weight_history.iter().chain(&em.weight_history) {
            worst = worst.max(simplex_error(tape.value(*c)));
        }
    }
    let elapsed = start.elapsed();
    let detail = format!("1000 instances, max |Σ_n C - 1| = {worst:.1e}, {:.2}s", elapsed.as_secs_f64());
    if worst <= 1e-12 && elapsed < Duration::from_secs(30) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut norm_err, mut dir_err): (f64, f64) = (0.0, 0.0);
    let total = 100_000;
    let per_width = total / 8;
    for k in 1..=8 {
        let data: Vec<f64> = (0..per_width * k)
            .map(|i| {
                // one magnitude per vector, spanning 1e-3 to 1e3
                let mag = 10f64.powf(-3.0 + 6.0 * ((i / k) as f64 / per_width as f64));
                mag * rng.random_range(-1.0..1.0)
            })
            .collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([per_width, k], data.clone()).unwrap());
        let y = tape.squash(x).map_err(|e| e.to_string())?;
        for (s, o) in data.chunks(k).zip(tape.value(y).data().chunks(k)) {
            let n = common::norm(s);
            let expected = n * n / (1.0 + n * n);
            norm_err = norm_err.max((common::norm(o) - expected).abs());
            // direction: o is a non-negative multiple of s
            let cos = common::dot(s, o) / (n * common::norm(o));
            dir_err = dir_err.max((1.0 - cos).abs());
        }
    }
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros([3, 4]));
    let zy = tape.squash(z).map_err(|e| e.to_string())?;
    let zero_exact = tape.value(zy).data().iter().all(|&v| v == 0.0);
    let detail = format!(
        "{} vectors, max norm error {norm_err:.1e}, max 1-cos {dir_err:.1e}, squash(0)=0 exactly: {zero_exact}",
        per_width * 8
    );
    if norm_err <= 1e-12 && dir_err <= 1e-12 && zero_exact {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let (h, n, k) = (SIZES[rng.random_range(0..4)], SIZES[rng.random_range(0..4)], OUT_WIDTHS[rng.random_range(0..3)]);
        let (votes, nested) = random_votes(h, n, k, 3.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(votes);
        let out = simple_routing(&mut tape, v, 1, 1e-12).map_err(|e| e.to_string())?;
        let got = tape.value(out.capsules).data().to_vec();
        let mut expected = Vec::new();
        for j in 0..n {
            let mean: Vec<f64> = (0..k).map(|t| (0..h).map(|i| nested[i][j][t]).sum::<f64>() / h as f64).collect();
            expected.extend(common::squash(&mean));
        }
        worst = worst.max(max_diff(&got, &expected));
    }
    let detail = format!("500 instances, max |Ω - squash(mean V)| = {worst:.1e}");
    if worst <= 1e-14 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut simple_err, mut em_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..200 {
        let (h, n) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let (k, t) = (rng.random_range(1..=4), rng.random_range(1..=3));
        let (votes, nested) = random_votes(h, n, k, 1.5, &mut rng);
        let (cfg, ba, bm) = em_instance(n, t, &mut rng);
        let (ba_v, bm_v) = (ba.data().to_vec(), bm.data().to_vec());
        let mut tape = Tape::new();
        let v = tape.constant(votes);

        let simple = simple_routing(&mut tape, v, t, 1e-12).map_err(|e| e.to_string())?;
        let (caps, history) = common::simple_routing(&nested, t);
        simple_err = simple_err.max(max_diff(tape.value(simple.capsules).data(), &caps.concat()));
        for (c, oc) in simple.weight_history.iter().zip(&history) {
            simple_err = simple_err.max(max_diff(tape.value(*c).data(), &oc.concat()));
        }

        let (ba, bm) = (tape.constant(ba), tape.constant(bm));
        let em = em_routing(&mut tape, v, &cfg, ba, bm).map_err(|e| e.to_string())?;
        let (caps, history) = common::em_routing(&nested, &ba_v, &bm_v, &cfg.lambda_schedule, cfg.var_floor);
        em_err = em_err.max(max_diff(tape.value(em.capsules).data(), &caps.concat()));
        for (c, oc) in em.weight_history.iter().zip(&history) {
            em_err = em_err.max(max_diff(tape.value(*c).data(), &oc.concat()));
        }
    }
    let detail = format!("200 instances, max deviation simple {simple_err:.1e}, em {em_err:.1e}");
    if simple_err <= 1e-10 && em_err <= 1e-10 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for kind in Aggregator::ALL {
        let mut worst: f64 = 0.0;
        for seed in 0..20 {
            let r = attention_grad_check(kind, seed).map_err(|e| e.to_string())?;
            worst = worst.max(r.max_rel_error);
        }
        ok &= worst < 1e-4;
        parts.push(format!("{kind} {worst:.1e}"));
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(300);
    let detail = format!("20 seeds, h=1e-5, max rel error: {}; {:.1}s", parts.join(", "), elapsed.as_secs_f64());
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut checked = 0;
    for kind in Aggregator::ALL {
        for (j, d, h, n) in [(5, 8, 2, 4), (7, 16, 4, 8), (1, 8, 4, 2), (12, 32, 4, 8)] {
            let mut store = ParamStore::new();
            let att = AttentionParams::init(&mut store, "att", d, h, &mut rng).unwrap();
            let rc = RoutingConfig::new(RoutingKind::Em, h, n, 3, d).unwrap();
            let agg = AggregatorParams::init(&mut store, "agg", kind, d, &rc, &mut rng).unwrap();
            let x = Tensor::randn([j, d], 1.0, &mut rng);
            let mut perm: Vec<usize> = (0..j).collect();
            for i in (1..j).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let xp = Tensor::from_fn([j, d], |i| x.data()[perm[i / d] * d + i % d]);
            let run = |input: Tensor| -> Result<Tensor, String> {
                let mut tape = Tape::new();
                let bound = store.bind(&mut tape, false);
                let xv = tape.constant(input);
                let o = multi_head_attention(&mut tape, xv, xv, xv, &att.bind(&bound), &agg.bind(&bound), None)
                    .map_err(|e| e.to_string())?;
                Ok(tape.value(o).clone())
            };
            let (o, op) = (run(x)?, run(xp)?);
            if o.shape() != [j, d] {
                return Err(format!("{kind}: output shape {:?}, expected [{j}, {d}]", o.shape()));
            }
            for (row, &src) in perm.iter().enumerate() {
                let a = &op.data()[row * d..(row + 1) * d];
                let b = &o.data()[src * d..(src + 1) * d];
                if a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                    return Err(format!("{kind} J={j} d={d}: permuted output row {row} differs from row {src}"));
                }
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} cases across linear/simple/em: J×d outputs, permutation-equivariant bit for bit"))
}

fn acceptance_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn load(name: &str, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&acceptance_dir().join(name)).expect("acceptance config loads");
    cfg.output_dir = out.join(&cfg.name);
    cfg
}

struct Run {
    cfg: ExperimentConfig,
    outcome: TrainOutcome,
}

fn criterion_7(kind: Aggregator, runs: &mut Vec<Run>, out: &Path) -> Outcome {
    let cfg = load(&format!("bigram_shift_{kind}.toml"), out);
    let data = generate(&cfg.task).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let outcome = harness::train_on(&cfg, &data, &mut |_| {}).map_err(|e| e.to_string())?;
    let seconds = start.elapsed().as_secs_f64();
    let detail = format!(
        "{kind}: test accuracy {:.4} (best epoch {} of {}), {seconds:.0}s",
        outcome.test.accuracy, outcome.best_epoch, cfg.epochs
    );
    let ok = outcome.test.accuracy >= 0.95 && cfg.epochs <= 20 && seconds < 600.0;
    runs.push(Run { cfg, outcome });
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let out = std::env::temp_dir();
    let base = load("bigram_shift_linear.toml", &out);
    let count = |agg: Aggregator, rng: &mut ChaCha8Rng| -> usize {
        let mut c = base.model.clone();
        c.aggregators = vec![agg; c.layers];
        Encoder::new(c, base.dims(), rng).unwrap().param_count()
    };
    let linear = count(Aggregator::Linear, &mut rng);
    let (d, n, layers) = (base.model.width as i64, base.model.routing.output_caps as i64, base.model.layers as i64);
    let mut parts = Vec::new();
    for (agg, em) in [(Aggregator::Simple, 0), (Aggregator::Em, 1)] {
        let measured = count(agg, &mut rng) as i64 - linear as i64;
        // per layer: input transforms d² + d, H·N vote matrices of
        // (d/H)×(d/N) totalling d², two β per capsule for EM, minus W^O (d²)
        let closed = layers * (d * d + d + 2 * n * em);
        if measured != closed || measured <= 0 {
            return Err(format!("{agg}: measured delta {measured}, closed form {closed}"));
        }
        parts.push(format!("{agg} +{measured} ({:+.1}%)", 100.0 * measured as f64 / linear as f64));
    }
    Ok(format!("linear {linear} params; {}; same direction as the full-size reference (+12.6M on 88.0M, +14.3%)", parts.join(", ")))
}

fn criterion_9(runs: &[Run], out: &Path) -> Outcome {
    let first = runs.iter().find(|r| r.cfg.model.aggregators[0] == Aggregator::Linear).ok_or("no linear run")?;
    let mut again = first.cfg.clone();
    again.output_dir = out.join("determinism_rerun");
    harness::train(&again).map_err(|e| e.to_string())?;
    let a = std::fs::read(first.cfg.output_dir.join(METRICS_FILE)).map_err(|e| e.to_string())?;
    let b = std::fs::read(again.output_dir.join(METRICS_FILE)).map_err(|e| e.to_string())?;
    let detail = format!("{} rerun: metrics files {} bytes, identical: {}", first.cfg.name, a.len(), a == b);
    if a == b && !a.is_empty() {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Harness properties observed on the criterion-7 runs.
fn run_checks(runs: &[Run]) -> Outcome {
    let mut notes = Vec::new();
    for r in runs {
        let name = &r.cfg.name;
        let (l1, l5) = (r.outcome.train_loss(1), r.outcome.train_loss(5));
        match (l1, l5) {
            (Some(a), Some(b)) if b < a => notes.push(format!("{name} loss {a:.3}->{b:.3}")),
            _ => return Err(format!("{name}: training loss did not decrease from epoch 1 to 5 ({l1:?} -> {l5:?})")),
        }
        let rec = harness::evaluate(&r.outcome.checkpoint, Split::Test).map_err(|e| e.to_string())?;
        if (rec.loss, rec.accuracy) != (r.outcome.test.loss, r.outcome.test.accuracy) {
            return Err(format!("{name}: evaluate after reload differs from train's test metrics"));
        }
    }
    let sps = |k: Aggregator| runs.iter().find(|r| r.cfg.model.aggregators[0] == k).map(|r| r.outcome.steps_per_second);
    if let (Some(lin), Some(em)) = (sps(Aggregator::Linear), sps(Aggregator::Em)) {
        if em >= lin {
            return Err(format!("em steps/s {em:.1} not below linear {lin:.1}"));
        }
        notes.push(format!("steps/s linear {lin:.1} > em {em:.1}"));
    }
    notes.push("checkpoint reload reproduces test metrics".into());
    Ok(notes.join("; "))
}

fn report(label: &str, outcome: Outcome, failures: &mut usize) {
    match outcome {
        Ok(d) => println!("PASS  {label}: {d}"),
        Err(d) => {
            *failures += 1;
            println!("FAIL  {label}: {d}");
        }
    }
}

fn main() {
    let mut failures = 0;
    let tmp = tempfile::tempdir().expect("temp dir");
    report("criterion 1 (routing simplex)", criterion_1(), &mut failures);
    report("criterion 2 (squash contract)", criterion_2(), &mut failures);
    report("criterion 3 (T=1 closed form)", criterion_3(), &mut failures);
    report("criterion 4 (oracle equivalence)", criterion_4(), &mut failures);
    report("criterion 5 (gradient check)", criterion_5(), &mut failures);
    report("criterion 6 (shape and equivariance)", criterion_6(), &mut failures);
    let mut runs = Vec::new();
    for kind in Aggregator::ALL {
        report(&format!("criterion 7 (trainability, {kind})"), criterion_7(kind, &mut runs, tmp.path()), &mut failures);
    }
    report("criterion 8 (parameter accounting)", criterion_8(), &mut failures);
    report("criterion 9 (determinism)", criterion_9(&runs, tmp.path()), &mut failures);
    report("harness checks on criterion 7 runs", run_checks(&runs), &mut failures);
    if failures > 0 {
        println!("{failures} acceptance check(s) failed");
        std::process::exit(1);
    }
    println!("all acceptance checks passed");
}
