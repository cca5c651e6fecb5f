//! Concept saliency maps, mean-threshold masks and factor diagnostics.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::tensor::{fold_spatial, ActivationBatch, ActivationSample};

/// Per-position magnitude `a_kᵀ Z_i` of appearance concept `k` in one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub values: Array1<f64>,
    pub concept: usize,
    pub sample: Option<usize>,
    pub height: usize,
    pub width: usize,
}

impl SaliencyMap {
    pub fn new(values: Array1<f64>, concept: usize, height: usize, width: usize) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "saliency has {} values, grid is {height}x{width}",
                values.len()
            )));
        }
        Ok(Self {
            values,
            concept,
            sample: None,
            height,
            width,
        })
    }

    pub fn folded(&self) -> Array2<f64> {
        fold_spatial(self.values.view(), self.height, self.width).expect("length checked on construction")
    }

    /// Min-max normalized copy for display; constant maps become all zeros.
    pub fn normalized(&self) -> Array1<f64> {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            self.values.mapv(|v| (v - lo) / (hi - lo))
        } else {
            Array1::zeros(self.values.len())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptMask {
    pub bits: Vec<bool>,
    pub threshold: f64,
    pub height: usize,
    pub width: usize,
}

impl ConceptMask {
    pub fn folded(&self) -> Array2<bool> {
        Array2::from_shape_fn((self.height, self.width), |(h, w)| self.bits[h * self.width + w])
    }
}

pub fn saliency(sample: &ActivationSample, appearance: ArrayView2<'_, f64>, k: usize) -> Result<SaliencyMap> {
    if appearance.nrows() != sample.channels() {
        return Err(Error::shape(format!(
            "appearance has {} rows, sample has C = {}",
            appearance.nrows(),
            sample.channels()
        )));
    }
    if k >= appearance.ncols() {
        return Err(Error::InvalidInput(format!(
            "concept {k} out of range (R_C = {})",
            appearance.ncols()
        )));
    }
    let values = appearance.column(k).dot(&sample.data());
    SaliencyMap::new(values, k, sample.height(), sample.width())
}

/// Thresholds maps at their grand mean `μ = mean over samples and positions`;
/// a position is in the mask when its value is `≥ μ`.
pub fn threshold_maps(maps: &[SaliencyMap]) -> Result<(f64, Vec<ConceptMask>)> {
    let total: usize = maps.iter().map(|m| m.values.len()).sum();
    if total == 0 {
        return Err(Error::EmptyResult("no saliency values to threshold".into()));
    }
    let mu = maps.iter().map(|m| m.values.sum()).sum::<f64>() / total as f64;
    let masks = maps
        .iter()
        .map(|m| ConceptMask {
            bits: m.values.iter().map(|&v| v >= mu).collect(),
            threshold: mu,
            height: m.height,
            width: m.width,
        })
        .collect();
    Ok((mu, masks))
}

/// Saliency of concept `k` for every sample, thresholded at the batch mean.
pub fn concept_threshold(
    batch: &ActivationBatch,
    appearance: ArrayView2<'_, f64>,
    k: usize,
) -> Result<(f64, Vec<SaliencyMap>, Vec<ConceptMask>)> {
    let maps = batch
        .samples()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            saliency(s, appearance, k).map(|mut m| {
                m.sample = Some(i);
                m
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (mu, masks) = threshold_maps(&maps)?;
    Ok((mu, maps, masks))
}

/// Mean absolute entry of `AᵀA − I`.
pub fn orthogonality_residual(a: ArrayView2<'_, f64>) -> f64 {
    let gram = a.t().dot(&a);
    let r = gram.nrows();
    if r == 0 {
        return 0.0;
    }
    let total: f64 = gram
        .indexed_iter()
        .map(|((i, j), v)| (v - if i == j { 1.0 } else { 0.0 }).abs())
        .sum();
    total / (r * r) as f64
}

/// Hoyer sparsity of one vector; zero vectors count as maximally sparse.
pub fn hoyer(v: ArrayView1<'_, f64>) -> f64 {
    let n = v.len() as f64;
    let l1: f64 = v.iter().map(|x| x.abs()).sum();
    let l2: f64 = v.dot(&v).sqrt();
    if l2 == 0.0 || v.len() <= 1 {
        return 1.0;
    }
    (n.sqrt() - l1 / l2) / (n.sqrt() - 1.0)
}

/// Hoyer sparsity of every parts column.
pub fn part_sparsity(p: ArrayView2<'_, f64>) -> Vec<f64> {
    p.columns().into_iter().map(hoyer).collect()
}

/// Column index of the largest entry in each row of `p`; ties go to the lowest index.
pub fn part_assignment(p: ArrayView2<'_, f64>) -> Vec<usize> {
    p.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
