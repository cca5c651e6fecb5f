//! Rank-one feature-map edits `Z' = Z + α a_j p̂ᵀ` and part construction helpers.

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ActivationSample;

/// How a part vector is scaled before it is used as an edit footprint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartNorm {
    /// Divide by the maximum entry, so the peak position receives the full `α`.
    #[default]
    Max,
    /// Divide by the Euclidean norm.
    L2,
}

impl std::str::FromStr for PartNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(PartNorm::Max),
            "l2" => Ok(PartNorm::L2),
            other => Err(Error::InvalidConfig(format!("unknown part normalization {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditSpec {
    pub appearance_index: usize,
    pub part: Array1<f64>,
    pub magnitude: f64,
    pub norm: PartNorm,
}

impl EditSpec {
    pub fn new(appearance_index: usize, part: Array1<f64>, magnitude: f64) -> Result<Self> {
        check_part(part.view())?;
        if !magnitude.is_finite() {
            return Err(Error::InvalidInput(format!("edit magnitude must be finite, got {magnitude}")));
        }
        if part.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidInput("edit part is all zeros".into()));
        }
        Ok(Self {
            appearance_index,
            part,
            magnitude,
            norm: PartNorm::Max,
        })
    }

    pub fn with_norm(mut self, norm: PartNorm) -> Self {
        self.norm = norm;
        self
    }
}

fn check_part(p: ArrayView1<'_, f64>) -> Result<()> {
    if let Some((i, v)) = p.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::InvalidInput(format!("part entry {i} = {v} is not a finite nonnegative value")));
    }
    Ok(())
}

/// Scales a nonnegative part so that its maximum is 1.
pub fn normalize_part(p: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    normalize_part_with(p, PartNorm::Max)
}

pub fn normalize_part_with(p: ArrayView1<'_, f64>, norm: PartNorm) -> Result<Array1<f64>> {
    check_part(p)?;
    let scale = match norm {
        PartNorm::Max => p.iter().copied().fold(0.0, f64::max),
        PartNorm::L2 => p.dot(&p).sqrt(),
    };
    if scale == 0.0 {
        return Err(Error::InvalidInput("cannot normalize an all-zero part".into()));
    }
    Ok(p.mapv(|v| v / scale))
}

/// Applies `Z + α a_j p̂ᵀ`. Columns where `p̂` is zero are copied untouched.
pub fn edit_features(sample: &ActivationSample, appearance: ArrayView2<'_, f64>, spec: &EditSpec) -> Result<ActivationSample> {
    if appearance.nrows() != sample.channels() {
        return Err(Error::shape(format!(
            "appearance has {} rows, sample has C = {}",
            appearance.nrows(),
            sample.channels()
        )));
    }
    if spec.appearance_index >= appearance.ncols() {
        return Err(Error::InvalidInput(format!(
            "appearance index {} out of range (R_C = {})",
            spec.appearance_index,
            appearance.ncols()
        )));
    }
    if spec.part.len() != sample.spatial() {
        return Err(Error::shape(format!(
            "part has length {}, sample has S = {}",
            spec.part.len(),
            sample.spatial()
        )));
    }
    if spec.magnitude == 0.0 {
        return Ok(sample.clone());
    }
    let p_hat = normalize_part_with(spec.part.view(), spec.norm)?;
    let a = appearance.column(spec.appearance_index);
    let mut z = sample.data().to_owned();
    for (s, &w) in p_hat.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let coef = spec.magnitude * w;
        z.column_mut(s).scaled_add(coef, &a);
    }
    ActivationSample::new(z, sample.height(), sample.width())
}

/// Nonnegative weighted sum of parts.
pub fn combine_parts(parts: &[ArrayView1<'_, f64>], weights: &[f64]) -> Result<Array1<f64>> {
    if parts.is_empty() {
        return Err(Error::InvalidInput("no parts to combine".into()));
    }
    if parts.len() != weights.len() {
        return Err(Error::shape(format!(
            "{} parts but {} weights",
            parts.len(),
            weights.len()
        )));
    }
    let len = parts[0].len();
    let mut out = Array1::zeros(len);
    for (p, &w) in parts.iter().zip(weights) {
        if p.len() != len {
            return Err(Error::shape(format!("part lengths differ: {} vs {len}", p.len())));
        }
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::InvalidInput(format!("weight {w} must be finite and nonnegative")));
        }
        check_part(*p)?;
        out.scaled_add(w, p);
    }
    out.mapv_inplace(|v: f64| v.max(0.0));
    Ok(out)
}

/// Restricts a part to a 0/1 spatial mask (flattened row-major).
pub fn mask_part(part: ArrayView1<'_, f64>, mask: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if part.len() != mask.len() {
        return Err(Error::shape(format!(
            "part has length {}, mask has length {}",
            part.len(),
            mask.len()
        )));
    }
    if let Some(v) = mask.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidInput(format!("mask entries must be 0 or 1, found {v}")));
    }
    check_part(part)?;
    Ok(&part * &mask)
}

/// Paints the appearance at `background_index` over the region given by `part`.
pub fn remove_foreground(
    sample: &ActivationSample,
    appearance: ArrayView2<'_, f64>,
    background_index: usize,
    part: ArrayView1<'_, f64>,
    magnitude: f64,
) -> Result<ActivationSample> {
    let spec = EditSpec::new(background_index, part.to_owned(), magnitude)?;
    edit_features(sample, appearance, &spec)
}
