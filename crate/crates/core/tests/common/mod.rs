//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod ops;

use std::path::PathBuf;

use pepnet::autodiff::{Graph, Var};
use pepnet::data::Mask;
use pepnet::gaussian::{GaussianD, GaussianK, Projection};
use pepnet::linalg::Matrix;
use pepnet::net::ModelConfig;
use pepnet::train::TrainConfig;
use pepnet::{Result, Tensor};
use rand::{Rng, RngExt};
use rand_distr::{Distribution, StandardNormal};

pub fn tmp_dir(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("pepnet-it-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    d
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal(rng) as f32).collect()).unwrap()
}

/// Tensor with entries uniform in `±[lo, hi]`, random sign; keeps inputs
/// away from kinks at zero.
pub fn rand_away_from_zero<R: Rng + ?Sized>(
    shape: &[usize],
    lo: f32,
    hi: f32,
    rng: &mut R,
) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Batch of `n` random SPD `k×k` matrices, row-major per row: `A Aᵀ/k + s·I`.
pub fn spd_batch<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Tensor {
    let mut out = Vec::with_capacity(n * k * k);
    for _ in 0..n {
        let a: Vec<f64> = (0..k * k).map(|_| normal(rng)).collect();
        let shift = rng.random_range(0.5..1.5);
        for i in 0..k {
            for j in 0..k {
                let dot: f64 = (0..k).map(|l| a[i * k + l] * a[j * k + l]).sum();
                out.push((dot / k as f64 + if i == j { shift } else { 0.0 }) as f32);
            }
        }
    }
    Tensor::new(vec![n, k * k], out).unwrap()
}

/// Outcome of one finite-difference check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Largest `|a − n| / max(|a|, |n|, 1)` over all checked coordinates.
    pub max_rel_err: f64,
    pub coords: usize,
}

/// Compares reverse-mode gradients of `loss = Σ r ⊙ f(inputs)` with central
/// differences, `r` a fixed random cotangent. Inputs flagged in `wrt` are
/// differentiated; the rest are constants. The loss is re-accumulated in
/// f64 outside the graph so the difference quotient sees only the op's own
/// f32 rounding.
pub fn gradcheck<R, F>(inputs: &[Tensor], wrt: &[bool], h: f32, rng: &mut R, f: F) -> GradCheck
where
    R: Rng + ?Sized,
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    assert_eq!(inputs.len(), wrt.len());
    let forward = |vals: &[Tensor]| -> Tensor {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        g.take(out)
    };
    let shape = forward(inputs).shape().to_vec();
    let cotangent = randn(&shape, rng);
    let weighted = |t: &Tensor| -> f64 {
        t.data()
            .iter()
            .zip(cotangent.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(wrt)
        .map(|(t, &w)| {
            if w {
                g.variable(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
        .collect();
    let out = f(&mut g, &vars).unwrap();
    let r = g.constant(cotangent.clone());
    let prod = g.mul(out, r).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();

    let mut max_rel_err = 0.0f64;
    let mut coords = 0;
    for (i, (&v, &w)) in vars.iter().zip(wrt).enumerate() {
        if !w {
            continue;
        }
        let analytic = g
            .grad(v)
            .expect("differentiated input has a gradient")
            .to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let x = inputs[i].data()[j];
            let (xp, xm) = (x + h, x - h);
            plus[i].data_mut()[j] = xp;
            minus[i].data_mut()[j] = xm;
            let numeric =
                (weighted(&forward(&plus)) - weighted(&forward(&minus))) / (xp as f64 - xm as f64);
            let a = a as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            max_rel_err = max_rel_err.max(rel);
            coords += 1;
        }
    }
    GradCheck {
        max_rel_err,
        coords,
    }
}

/// Pairwise `1 − IoU` straight from the boolean planes.
pub fn brute_distance(a: &Mask, b: &Mask) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as u64;
        union += (x || y) as u64;
    }
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

pub fn brute_ged(preds: &[Mask], raters: &[Mask]) -> f64 {
    let mean = |a: &[Mask], b: &[Mask]| {
        let mut s = 0.0;
        for x in a {
            for y in b {
                s += brute_distance(x, y);
            }
        }
        s / (a.len() * b.len()) as f64
    };
    (2.0 * mean(preds, raters) - mean(preds, preds) - mean(raters, raters))
        .max(0.0)
        .sqrt()
}

pub fn random_mask<R: Rng + ?Sized>(h: usize, w: usize, density: f64, rng: &mut R) -> Mask {
    Mask::new(h, w, (0..h * w).map(|_| rng.random_bool(density)).collect()).unwrap()
}

/// Closed-form KL between diagonal Gaussians in R^D.
pub fn diag_kl(q: &GaussianD, p: &GaussianD) -> f64 {
    0.5 * q
        .mu
        .iter()
        .zip(&q.log_var)
        .zip(p.mu.iter().zip(&p.log_var))
        .map(|((mq, lq), (mp, lp))| lp - lq + (lq.exp() + (mq - mp).powi(2)) / lp.exp() - 1.0)
        .sum::<f64>()
}

fn log_density(g: &GaussianK, chol: &Matrix, log_det: f64, x: &[f64]) -> f64 {
    // chol is lower-triangular L with Σ = L Lᵀ.
    let k = g.dim();
    let mut y = vec![0.0; k];
    for i in 0..k {
        let mut s = x[i] - g.mu[i];
        for (j, yj) in y.iter().enumerate().take(i) {
            s -= chol.row(i)[j] * yj;
        }
        y[i] = s / chol.row(i)[i];
    }
    -0.5 * (y.iter().map(|v| v * v).sum::<f64>()
        + log_det
        + k as f64 * (2.0 * std::f64::consts::PI).ln())
}

fn lower_cholesky(a: &Matrix) -> Matrix {
    let n = a.rows();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a.row(i)[j] - (0..j).map(|t| l[i * n + t] * l[j * n + t]).sum::<f64>();
            l[i * n + j] = if i == j { s.sqrt() } else { s / l[j * n + j] };
        }
    }
    Matrix::from_vec(n, n, l).unwrap()
}

/// Monte-Carlo estimate of KL(q‖p) and its standard error from `draws`
/// samples of `log q(x) − log p(x)`, `x ~ q`.
pub fn mc_kl<R: Rng + ?Sized>(
    q: &GaussianK,
    p: &GaussianK,
    draws: usize,
    rng: &mut R,
) -> (f64, f64) {
    let (lq, lp) = (lower_cholesky(&q.cov), lower_cholesky(&p.cov));
    let det = |l: &Matrix| (0..l.rows()).map(|i| 2.0 * l.row(i)[i].ln()).sum::<f64>();
    let (dq, dp) = (det(&lq), det(&lp));
    let k = q.dim();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let mut eps = vec![0.0; k];
    let mut x = vec![0.0; k];
    for _ in 0..draws {
        for e in eps.iter_mut() {
            *e = normal(rng);
        }
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = q.mu[i] + (0..=i).map(|j| lq.row(i)[j] * eps[j]).sum::<f64>();
        }
        let v = log_density(q, &lq, dq, &x) - log_density(p, &lp, dp, &x);
        sum += v;
        sum_sq += v * v;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Random orthonormal D×k basis (Gram–Schmidt on Gaussian columns) and mean.
pub fn random_projection<R: Rng + ?Sized>(d: usize, k: usize, rng: &mut R) -> Projection {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        for _ in 0..2 {
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    let mut data = vec![0.0; d * k];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..d {
            data[i * k + j] = c[i];
        }
    }
    let mean = (0..d).map(|_| normal(rng)).collect();
    Projection::new(mean, Matrix::from_vec(d, k, data).unwrap()).unwrap()
}

pub fn random_gaussian_d<R: Rng + ?Sized>(d: usize, rng: &mut R) -> GaussianD {
    let mu = (0..d).map(|_| 2.0 * normal(rng)).collect();
    let log_var = (0..d).map(|_| rng.random_range(-3.0..2.0)).collect();
    GaussianD::new(mu, log_var).unwrap()
}

pub fn random_gaussian_k<R: Rng + ?Sized>(k: usize, rng: &mut R) -> GaussianK {
    let cov = spd_batch(1, k, rng);
    let cov = Matrix::from_vec(k, k, cov.data().iter().map(|&v| v as f64).collect())
        .unwrap()
        .symmetrized();
    GaussianK::new((0..k).map(|_| normal(rng)).collect(), cov).unwrap()
}

/// 8×8 single-level network, small enough for exhaustive checks.
pub fn micro_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        base_channels: 4,
        depth: 1,
        adapter_depth: 1,
        ..ModelConfig::default()
    }
}

pub fn micro_train_config() -> TrainConfig {
    TrainConfig {
        base_channels: 4,
        depth: 1,
        adapter_depth: 1,
        batch_size: 4,
        epochs: 4,
        warmup_epochs: 1,
        ..TrainConfig::default()
    }
}
