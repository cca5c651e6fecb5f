//! Test-only oracles, independent of the library's computational paths.
#![allow(dead_code)]

use ndarray::{Array1, Array2, Array4};
use partsplit::{ActivationBatch, ActivationSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal via Box-Muller.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || normal(rng))
}

pub fn random_batch(n: usize, c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> ActivationBatch {
    let samples = (0..n)
        .map(|_| ActivationSample::new(gaussian(c, h * w, rng), h, w).unwrap())
        .collect();
    ActivationBatch::new(samples).unwrap()
}

/// Loss formed literally: explicit `A Aᵀ` and `P Pᵀ` products.
pub fn literal_loss(batch: &ActivationBatch, a: &Array2<f64>, p: &Array2<f64>) -> f64 {
    let abar = a.dot(&a.t());
    let pbar = p.dot(&p.t());
    batch
        .samples()
        .iter()
        .map(|s| {
            let z = s.data();
            let r = &z - &abar.dot(&z).dot(&pbar);
            r.iter().map(|v| v * v).sum::<f64>()
        })
        .sum()
}

/// Central finite-difference gradient of `f` at `x`.
pub fn fd_gradient(x: &Array2<f64>, step: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (i, j) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[i, j]];
        probe[[i, j]] = orig + step;
        let up = f(&probe);
        probe[[i, j]] = orig - step;
        let down = f(&probe);
        probe[[i, j]] = orig;
        g[[i, j]] = (up - down) / (2.0 * step);
    }
    g
}

pub fn rel_error(got: &Array2<f64>, want: &Array2<f64>) -> f64 {
    let diff: f64 = (got - want).iter().map(|v| v * v).sum::<f64>().sqrt();
    let norm: f64 = want.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm.max(f64::MIN_POSITIVE)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix; returns (values, vectors as columns)
/// sorted by descending eigenvalue.
pub fn jacobi_eigen(m: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = m.nrows();
    let mut a = m.clone();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[[i, j]] * a[[i, j]])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].total_cmp(&a[[i, i]]));
    let values = Array1::from_iter(order.iter().map(|&i| a[[i, i]]));
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| v[[r, order[c]]]);
    (values, vectors)
}

/// Gram-Schmidt orthonormalization of a random Gaussian matrix.
pub fn random_orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut q = gaussian(rows, cols, rng);
    for k in 0..cols {
        for j in 0..k {
            let proj = q.column(j).dot(&q.column(k));
            let qj = q.column(j).to_owned();
            q.column_mut(k).scaled_add(-proj, &qj);
        }
        let norm = q.column(k).dot(&q.column(k)).sqrt();
        q.column_mut(k).mapv_inplace(|v| v / norm);
    }
    q
}

/// Locality ratio computed from its definition, one sample at a time with explicit loops.
pub fn naive_roir(mask: &Array2<f64>, x: &Array4<f64>, y: &Array4<f64>) -> Vec<Option<f64>> {
    let (n, h, w, c) = x.dim();
    (0..n)
        .map(|i| {
            let (mut num, mut den) = (0.0f64, 0.0f64);
            for hh in 0..h {
                for ww in 0..w {
                    for cc in 0..c {
                        let d = x[[i, hh, ww, cc]] - y[[i, hh, ww, cc]];
                        let m = mask[[hh, ww]];
                        num += ((1.0 - m) * d) * ((1.0 - m) * d);
                        den += (m * d) * (m * d);
                    }
                }
            }
            if den == 0.0 {
                None
            } else {
                Some(num.sqrt() / den.sqrt())
            }
        })
        .collect()
}
