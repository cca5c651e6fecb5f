//! Edit-locality and segmentation metrics.

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView4, Axis, Zip};

use crate::error::{Error, Result};
use crate::tensor::check_finite;

/// A batch of images (or feature maps) laid out `N × H × W × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    data: Array4<f64>,
}

impl ImageBatch {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::shape(format!("image batch has empty shape {:?}", data.dim())));
        }
        check_finite(data.view(), "image batch")?;
        Ok(Self { data })
    }

    pub fn data(&self) -> ArrayView4<'_, f64> {
        self.data.view()
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }
}

/// Spatial region of interest with weights in `[0, 1]`, broadcast along channels.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiMask {
    values: Array2<f64>,
}

impl RoiMask {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(((h, w), v)) = values.indexed_iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "mask entry ({h}, {w}) = {v} outside [0, 1]"
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    /// The complementary mask `1 − M`.
    pub fn complement(&self) -> Self {
        Self {
            values: self.values.mapv(|v| 1.0 - v),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoirReport {
    /// `(sample index, ratio)` for every sample with a nonzero change inside the ROI.
    pub per_sample: Vec<(usize, f64)>,
    /// Samples whose in-ROI change was exactly zero.
    pub excluded: Vec<usize>,
    pub mean: f64,
    /// Population standard deviation of the per-sample ratios.
    pub std: f64,
}

fn check_pair(x: &ImageBatch, y: &ImageBatch) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::shape(format!(
            "paired batches differ: {:?} vs {:?}",
            x.dim(),
            y.dim()
        )));
    }
    Ok(())
}

/// Ratio of the change outside the ROI to the change inside it, per sample,
/// averaged over samples. Lower means a more local edit.
pub fn roir(mask: &RoiMask, original: &ImageBatch, edited: &ImageBatch) -> Result<RoirReport> {
    check_pair(original, edited)?;
    let (_, h, w, _) = original.dim();
    if mask.values.dim() != (h, w) {
        return Err(Error::shape(format!(
            "mask is {:?}, images are {h}x{w}",
            mask.values.dim()
        )));
    }

    let mut per_sample = Vec::new();
    let mut excluded = Vec::new();
    for (i, (x, y)) in original
        .data
        .outer_iter()
        .zip(edited.data.outer_iter())
        .enumerate()
    {
        let (mut outside, mut inside) = (0.0, 0.0);
        Zip::indexed(&x).and(&y).for_each(|(hh, ww, _), &xv, &yv| {
            let d = xv - yv;
            let m = mask.values[[hh, ww]];
            outside += ((1.0 - m) * d).powi(2);
            inside += (m * d).powi(2);
        });
        if inside == 0.0 {
            excluded.push(i);
        } else {
            per_sample.push((i, outside.sqrt() / inside.sqrt()));
        }
    }
    if per_sample.is_empty() {
        return Err(Error::EmptyResult(format!(
            "all {} samples have zero change inside the region of interest",
            excluded.len()
        )));
    }
    let n = per_sample.len() as f64;
    let mean = per_sample.iter().map(|(_, r)| r).sum::<f64>() / n;
    let var = per_sample.iter().map(|(_, r)| (r - mean).powi(2)).sum::<f64>() / n;
    Ok(RoirReport {
        per_sample,
        excluded,
        mean,
        std: var.sqrt(),
    })
}

/// Per-pixel squared difference averaged over channels, one `H × W` map per sample.
pub fn mse_map(original: &ImageBatch, edited: &ImageBatch) -> Result<Array3<f64>> {
    check_pair(original, edited)?;
    let c = original.dim().3 as f64;
    let mut sq = &original.data - &edited.data;
    sq.mapv_inplace(|v| v * v);
    Ok(sq.sum_axis(Axis(3)) / c)
}

/// Intersection over union of two equally sized boolean masks; two empty masks give 1.
pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("mask lengths differ: {} vs {}", a.len(), b.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// [`iou`] for 2-D masks.
pub fn iou_2d(a: ArrayView2<'_, bool>, b: ArrayView2<'_, bool>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("mask shapes differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let a: Vec<bool> = a.iter().copied().collect();
    let b: Vec<bool> = b.iter().copied().collect();
    iou(&a, &b)
}
