//! Straight-line reference implementations used as test oracles.
//!
//! Everything here is plain loops over nested `Vec`s. Nothing calls into
//! the tape, so agreement with the library is evidence of correctness
//! rather than of shared code.

#![allow(dead_code)]

use std::f64::consts::PI;

pub type Mat = Vec<Vec<f64>>;

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            c[i][j] = s;
        }
    }
    c
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Textbook form `‖s‖² / (1 + ‖s‖²) · s / ‖s‖`.
pub fn squash(s: &[f64]) -> Vec<f64> {
    let n = norm(s);
    if n == 0.0 {
        return vec![0.0; s.len()];
    }
    let scale = n * n / (1.0 + n * n) / n;
    s.iter().map(|x| x * scale).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Votes for one position, `v[h][n][k]`.
pub type Votes = Vec<Vec<Vec<f64>>>;

/// Routing-by-agreement with dot-product agreement, one position.
/// Returns the capsules and `C` from every iteration.
pub fn simple_routing(v: &Votes, iterations: usize) -> (Vec<Vec<f64>>, Vec<Mat>) {
    let (h, n, k) = (v.len(), v[0].len(), v[0][0].len());
    let mut b = vec![vec![0.0; n]; h];
    let mut history = Vec::new();
    let mut out = vec![vec![0.0; k]; n];
    for _ in 0..iterations {
        let c: Mat = b.iter().map(|row| softmax(row)).collect();
        for j in 0..n {
            let mut s = vec![0.0; k];
            let mut total = 0.0;
            for i in 0..h {
                total += c[i][j];
                for t in 0..k {
                    s[t] += c[i][j] * v[i][j][t];
                }
            }
            let total = total.max(1e-12);
            let s: Vec<f64> = s.iter().map(|x| x / total).collect();
            out[j] = squash(&s);
        }
        for i in 0..h {
            for j in 0..n {
                b[i][j] += dot(&out[j], &v[i][j]);
            }
        }
        history.push(c);
    }
    (out, history)
}

/// EM routing, one position, with explicit probability-domain E-step:
/// `C = A·P / Σ_n A·P` where `P` is the product of per-dimension normal
/// densities. Returns `A·μ` from the last M-step and every E-step's `C`.
pub fn em_routing(
    v: &Votes,
    beta_a: &[f64],
    beta_mu: &[f64],
    lambdas: &[f64],
    var_floor: f64,
) -> (Vec<Vec<f64>>, Vec<Mat>) {
    let (h, n, k) = (v.len(), v[0].len(), v[0][0].len());
    let mut c = vec![vec![1.0 / n as f64; n]; h];
    let mut history = Vec::new();
    let mut out = vec![vec![0.0; k]; n];
    for &lambda in lambdas {
        let mut mu = vec![vec![0.0; k]; n];
        let mut var = vec![vec![0.0; k]; n];
        let mut act = vec![0.0; n];
        for j in 0..n {
            let r: f64 = (0..h).map(|i| c[i][j]).sum();
            let denom = r.max(1e-12);
            for t in 0..k {
                mu[j][t] = (0..h).map(|i| c[i][j] * v[i][j][t]).sum::<f64>() / denom;
            }
            for t in 0..k {
                let s: f64 = (0..h).map(|i| c[i][j] * (v[i][j][t] - mu[j][t]).powi(2)).sum();
                var[j][t] = (s / denom).max(var_floor);
            }
            let mut cost = 0.0;
            for t in 0..k {
                cost += (0.5 * var[j][t].ln() + (1.0 + (2.0 * PI).ln()) / 2.0) * r;
            }
            let z = lambda * (beta_a[j] - beta_mu[j] * r - cost);
            act[j] = 1.0 / (1.0 + (-z).exp());
        }
        for i in 0..h {
            let mut p = vec![0.0; n];
            for j in 0..n {
                let mut dens = 1.0;
                for t in 0..k {
                    let d = v[i][j][t] - mu[j][t];
                    dens *= (-(d * d) / (2.0 * var[j][t])).exp() / (2.0 * PI * var[j][t]).sqrt();
                }
                p[j] = act[j] * dens;
            }
            let total: f64 = p.iter().sum();
            for j in 0..n {
                c[i][j] = p[j] / total;
            }
        }
        for j in 0..n {
            for t in 0..k {
                out[j][t] = act[j] * mu[j][t];
            }
        }
        history.push(c.clone());
    }
    (out, history)
}

/// One head of scaled dot-product self-attention on `x: [J, d]` with
/// per-head projections `[d, dk]`.
pub fn attention_head(x: &Mat, wq: &Mat, wk: &Mat, wv: &Mat) -> Mat {
    let q = matmul(x, wq);
    let k = matmul(x, wk);
    let v = matmul(x, wv);
    let dk = wq[0].len() as f64;
    let j = x.len();
    let mut out = vec![vec![0.0; wv[0].len()]; j];
    for a in 0..j {
        let scores: Vec<f64> = (0..j).map(|b| dot(&q[a], &k[b]) / dk.sqrt()).collect();
        let w = softmax(&scores);
        for b in 0..j {
            for t in 0..out[a].len() {
                out[a][t] += w[b] * v[b][t];
            }
        }
    }
    out
}

/// Columns `[lo, hi)` of `m`.
pub fn columns(m: &Mat, lo: usize, hi: usize) -> Mat {
    m.iter().map(|row| row[lo..hi].to_vec()).collect()
}
