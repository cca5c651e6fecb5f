//! Planted-model generator and recovery scoring.
//!
//! Planted data follow `Z_i = A* Λ_i P*ᵀ + ε` with orthonormal `A*`, parts
//! `P*` given by contiguous row-major blocks of the spatial grid (unit-norm
//! indicator columns), coefficients `Λ_i ~ U[0.5, 1.5]` and Gaussian noise.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorization::FactorModel;
use crate::linalg::{largest_principal_angle, orthonormal_basis};
use crate::metrics::iou;
use crate::tensor::{ActivationBatch, ActivationSample};

/// Relative threshold defining a part's spatial support.
pub const SUPPORT_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantDims {
    pub samples: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl PlantDims {
    pub fn spatial(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTruth {
    pub appearance: Array2<f64>,
    pub parts: Array2<f64>,
    pub lambdas: Vec<Array2<f64>>,
    pub noise_sigma: f64,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
}

impl PlantedTruth {
    pub fn ranks(&self) -> (usize, usize) {
        (self.appearance.ncols(), self.parts.ncols())
    }
}

/// Unit-norm indicator columns over `rank` equal contiguous blocks of `spatial` positions.
pub fn block_parts(spatial: usize, rank: usize) -> Result<Array2<f64>> {
    if rank == 0 || rank > spatial || !spatial.is_multiple_of(rank) {
        return Err(Error::InvalidConfig(format!(
            "parts rank {rank} must divide S = {spatial} into equal blocks"
        )));
    }
    let block = spatial / rank;
    let value = 1.0 / (block as f64).sqrt();
    Ok(Array2::from_shape_fn((spatial, rank), |(s, k)| {
        if s / block == k {
            value
        } else {
            0.0
        }
    }))
}

/// Cyclically shifts every parts column on the `height × width` grid by `(dy, dx)`.
pub fn shift_parts(parts: ArrayView2<'_, f64>, height: usize, width: usize, dy: isize, dx: isize) -> Result<Array2<f64>> {
    if parts.nrows() != height * width {
        return Err(Error::shape(format!(
            "parts have {} rows, grid is {height}x{width}",
            parts.nrows()
        )));
    }
    let (h, w) = (height as isize, width as isize);
    let mut out = Array2::zeros(parts.raw_dim());
    for s in 0..parts.nrows() {
        let (y, x) = ((s / width) as isize, (s % width) as isize);
        let dst = ((y + dy).rem_euclid(h) * w + (x + dx).rem_euclid(w)) as usize;
        out.row_mut(dst).assign(&parts.row(s));
    }
    Ok(out)
}

/// Samples a planted batch and its ground truth.
pub fn plant(dims: PlantDims, ranks: (usize, usize), noise_sigma: f64, seed: u64) -> Result<(ActivationBatch, PlantedTruth)> {
    let PlantDims {
        samples: n,
        channels: c,
        height,
        width,
    } = dims;
    let s = dims.spatial();
    let (rc, rs) = ranks;
    if n == 0 || c == 0 || s == 0 {
        return Err(Error::InvalidConfig(format!("invalid planted dims {dims:?}")));
    }
    if rc == 0 || rc > c {
        return Err(Error::InvalidConfig(format!("appearance rank must be in [1, C={c}], got {rc}")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    let parts = block_parts(s, rs)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Array2::from_shape_simple_fn((c, rc), || StandardNormal.sample(&mut rng));
    let mut appearance = orthonormal_basis(gauss.view());
    for k in 0..rc {
        let mut col = appearance.column_mut(k);
        let pivot = col.iter().copied().fold(0.0_f64, |b, v| if v.abs() > b.abs() { v } else { b });
        if pivot < 0.0 {
            col.mapv_inplace(|v| -v);
        }
    }

    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut lambdas = Vec::with_capacity(n);
    let mut batch = Vec::with_capacity(n);
    for _ in 0..n {
        let lambda = Array2::from_shape_simple_fn((rc, rs), || rng.random_range(0.5..=1.5));
        let mut z = appearance.dot(&lambda).dot(&parts.t());
        if noise_sigma > 0.0 {
            z.mapv_inplace(|v| v + noise.sample(&mut rng));
        }
        batch.push(ActivationSample::new(z, height, width)?);
        lambdas.push(lambda);
    }

    Ok((
        ActivationBatch::new(batch)?,
        PlantedTruth {
            appearance,
            parts,
            lambdas,
            noise_sigma,
            seed,
            height,
            width,
        },
    ))
}

/// Positions where a column reaches at least [`SUPPORT_THRESHOLD`] of its maximum.
pub fn support(column: ndarray::ArrayView1<'_, f64>) -> Vec<bool> {
    let max = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_nan() || max <= 0.0 {
        return vec![false; column.len()];
    }
    column.iter().map(|&v| v >= SUPPORT_THRESHOLD * max).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryScore {
    /// Largest principal angle between fitted and planted appearance spans (radians).
    pub appearance_angle: f64,
    /// IoU per planted part, in planted column order, after matching.
    pub part_iou: Vec<f64>,
    /// `matching[k]` is the fitted column assigned to planted column `k`.
    pub matching: Vec<usize>,
}

impl RecoveryScore {
    pub fn mean_part_iou(&self) -> f64 {
        self.part_iou.iter().sum::<f64>() / self.part_iou.len() as f64
    }
}

fn cosine(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// Greedy one-to-one matching of fitted to planted parts by normalized correlation.
pub fn match_parts(fitted: ArrayView2<'_, f64>, planted: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    if fitted.dim() != planted.dim() {
        return Err(Error::shape(format!(
            "fitted parts {:?} vs planted parts {:?}",
            fitted.dim(),
            planted.dim()
        )));
    }
    let r = planted.ncols();
    let mut pairs = Vec::with_capacity(r * r);
    for f in 0..r {
        for t in 0..r {
            pairs.push((cosine(fitted.column(f), planted.column(t)), f, t));
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut matching = vec![usize::MAX; r];
    let mut used = vec![false; r];
    for (_, f, t) in pairs {
        if matching[t] == usize::MAX && !used[f] {
            matching[t] = f;
            used[f] = true;
        }
    }
    Ok(matching)
}

/// Scores a fitted model against planted ground truth.
pub fn recovery_score(model: &FactorModel, truth: &PlantedTruth) -> Result<RecoveryScore> {
    score_factors(model.appearance(), model.parts(), truth)
}

pub fn score_factors(appearance: ArrayView2<'_, f64>, parts: ArrayView2<'_, f64>, truth: &PlantedTruth) -> Result<RecoveryScore> {
    if (appearance.ncols(), parts.ncols()) != truth.ranks() {
        return Err(Error::shape(format!(
            "model ranks ({}, {}) differ from planted ranks {:?}",
            appearance.ncols(),
            parts.ncols(),
            truth.ranks()
        )));
    }
    let appearance_angle = largest_principal_angle(appearance, truth.appearance.view())?;
    let matching = match_parts(parts, truth.parts.view())?;
    let part_iou = matching
        .iter()
        .enumerate()
        .map(|(t, &f)| iou(&support(parts.column(f)), &support(truth.parts.column(t))))
        .collect::<Result<Vec<_>>>()?;
    Ok(RecoveryScore {
        appearance_angle,
        part_iou,
        matching,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorization::{loss, FitStats};

    fn dims() -> PlantDims {
        PlantDims {
            samples: 20,
            channels: 16,
            height: 8,
            width: 8,
        }
    }

    #[test]
    fn noiseless_plant_is_exact() {
        let (batch, truth) = plant(dims(), (4, 4), 0.0, 3).unwrap();
        let l = loss(&batch, truth.appearance.view(), truth.parts.view()).unwrap();
        assert!(l < 1e-18, "loss {l}");
        let gram = truth.appearance.t().dot(&truth.appearance);
        for ((i, j), v) in gram.indexed_iter() {
            assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
        }
        let pgram = truth.parts.t().dot(&truth.parts);
        for ((i, j), v) in pgram.indexed_iter() {
            assert_eq!(*v != 0.0, i == j, "parts supports must be disjoint");
        }
    }

    #[test]
    fn plant_is_deterministic() {
        let (b1, t1) = plant(dims(), (4, 4), 0.01, 9).unwrap();
        let (b2, t2) = plant(dims(), (4, 4), 0.01, 9).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(t1, t2);
        let (b3, _) = plant(dims(), (4, 4), 0.01, 10).unwrap();
        assert_ne!(b1, b3);
    }

    #[test]
    fn noise_residual_is_small() {
        let (batch, truth) = plant(dims(), (4, 4), 0.01, 1).unwrap();
        let mut resid = 0.0;
        for (z, lam) in batch.samples().iter().zip(&truth.lambdas) {
            let clean = truth.appearance.dot(lam).dot(&truth.parts.t());
            resid += (&z.data() - &clean).iter().map(|v| v * v).sum::<f64>();
        }
        let rel = (resid / batch.squared_norm()).sqrt();
        assert!(rel > 0.0 && rel < 0.1, "relative residual {rel}");
    }

    #[test]
    fn invalid_dims_rejected() {
        assert!(plant(dims(), (4, 3), 0.0, 0).is_err());
        assert!(plant(dims(), (17, 4), 0.0, 0).is_err());
        assert!(plant(PlantDims { samples: 0, ..dims() }, (4, 4), 0.0, 0).is_err());
        assert!(plant(dims(), (4, 4), -1.0, 0).is_err());
    }

    #[test]
    fn truth_scores_perfectly_even_when_permuted_and_flipped() {
        let (_, truth) = plant(dims(), (4, 4), 0.0, 5).unwrap();
        let model = FactorModel::new(truth.appearance.clone(), truth.parts.clone(), 8, 8, true, FitStats::default()).unwrap();
        let score = recovery_score(&model, &truth).unwrap();
        assert!(score.appearance_angle < 1e-7);
        assert!(score.part_iou.iter().all(|&v| v == 1.0));

        let perm = [2usize, 0, 3, 1];
        let mut a = truth.appearance.clone();
        let mut p = truth.parts.clone();
        for (dst, &src) in perm.iter().enumerate() {
            a.column_mut(dst).assign(&(-&truth.appearance.column(src)));
            p.column_mut(dst).assign(&truth.parts.column(src));
        }
        let score = score_factors(a.view(), p.view(), &truth).unwrap();
        assert!(score.appearance_angle < 1e-7);
        assert!(score.part_iou.iter().all(|&v| v == 1.0));
        assert_eq!(score.matching, vec![1, 3, 0, 2]);
    }

    #[test]
    fn rank_mismatch_rejected() {
        let (_, truth) = plant(dims(), (4, 4), 0.0, 5).unwrap();
        let a = truth.appearance.slice(ndarray::s![.., 0..3]).to_owned();
        assert!(score_factors(a.view(), truth.parts.view(), &truth).is_err());
    }

    #[test]
    fn shift_moves_blocks() {
        let p = block_parts(16, 2).unwrap();
        let shifted = shift_parts(p.view(), 4, 4, 1, 0).unwrap();
        // block 0 covers rows 0-1, after shifting rows 1-2
        let col: Vec<bool> = shifted.column(0).iter().map(|&v| v > 0.0).collect();
        let expect: Vec<bool> = (0..16).map(|s| (1..3).contains(&(s / 4))).collect();
        assert_eq!(col, expect);
    }
}
