//! Helpers shared by the integration tests.
#![allow(dead_code)]

use al2lab::analysis::RepresentationMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> RepresentationMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RepresentationMatrix::new(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect())
}

pub fn transform(a: &[f64], k: usize, r: &RepresentationMatrix) -> RepresentationMatrix {
    let mut out = vec![0.0; k * r.cols];
    for i in 0..k {
        for j in 0..r.rows {
            for c in 0..r.cols {
                out[i * r.cols + c] += a[i * r.rows + j] * r.get(j, c);
            }
        }
    }
    RepresentationMatrix::new(k, r.cols, out)
}

// Well-conditioned: identity plus a small perturbation.
pub fn near_identity(k: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k * k).map(|i| if i % (k + 1) == 0 { 1.0 } else { 0.0 } + rng.random_range(-0.3..0.3)).collect()
}

pub fn correlated_pair(a: usize, b: usize, n: usize, seed: u64) -> (RepresentationMatrix, RepresentationMatrix) {
    let shared = gaussian(a.min(b), n, seed);
    let r1 = gaussian(a, n, seed + 1000);
    let r2 = gaussian(b, n, seed + 2000);
    let mix = |r: RepresentationMatrix, w: f64| {
        let mut d = r.data.clone();
        for i in 0..shared.rows {
            for c in 0..n {
                d[i * n + c] += w * shared.get(i, c);
            }
        }
        RepresentationMatrix::new(r.rows, n, d)
    };
    (mix(r1, 1.5), mix(r2, 0.8))
}

pub fn project(w: [f64; 2], r: &RepresentationMatrix) -> Vec<f64> {
    (0..r.cols).map(|c| w[0] * r.get(0, c) + w[1] * r.get(1, c)).collect()
}

pub fn covariance(x: &[f64], y: &[f64]) -> f64 {
    let mx = x.iter().sum::<f64>() / x.len() as f64;
    let my = y.iter().sum::<f64>() / y.len() as f64;
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>()
}

pub fn corr(x: &[f64], y: &[f64]) -> f64 {
    covariance(x, y) / (covariance(x, x) * covariance(y, y)).sqrt()
}

pub fn unit(t: f64) -> [f64; 2] {
    [t.cos(), t.sin()]
}

// Direct maximization of corr(w1ᵀR1, w2ᵀR2) over unit vectors by grid
// search then coordinate refinement; the second pair is the direction in
// each 2-D view uncorrelated with the first.
pub fn oracle_2x2(r1: &RepresentationMatrix, r2: &RepresentationMatrix) -> [f64; 2] {
    let f = |t1: f64, t2: f64| corr(&project(unit(t1), r1), &project(unit(t2), r2)).abs();
    let steps = 720;
    let mut best = (0.0, 0.0, -1.0);
    for i in 0..steps {
        for j in 0..steps {
            let (t1, t2) = (std::f64::consts::PI * i as f64 / steps as f64, std::f64::consts::PI * j as f64 / steps as f64);
            let v = f(t1, t2);
            if v > best.2 {
                best = (t1, t2, v);
            }
        }
    }
    let (mut t1, mut t2, mut v) = best;
    let mut step = std::f64::consts::PI / steps as f64;
    while step > 1e-12 {
        let mut moved = false;
        for (d1, d2) in [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)] {
            let c = f(t1 + d1, t2 + d2);
            if c > v {
                (t1, t2, v, moved) = (t1 + d1, t2 + d2, c, true);
            }
        }
        if !moved {
            step /= 2.0;
        }
    }
    let orth = |t: f64, r: &RepresentationMatrix| {
        let u = project(unit(t), r);
        let e0 = project([1.0, 0.0], r);
        let e1 = project([0.0, 1.0], r);
        // w ⟂ Σ w_t: solve w·(Σ w_t) = 0 in 2-D.
        let s = [covariance(&e0, &u), covariance(&e1, &u)];
        [-s[1], s[0]]
    };
    let second = corr(&project(orth(t1, r1), r1), &project(orth(t2, r2), r2)).abs();
    [v, second]
}

