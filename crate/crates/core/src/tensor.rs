//! Dense multi-way array primitives and the activation data model.
//!
//! A feature map `H × W × C` is stored through its mode-3 unfolding: a
//! `C × S` matrix whose column `s = h·W + w` is the channel fiber at spatial
//! position `(h, w)`. Spatial flattening is row-major throughout the crate.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

/// One sample's mode-3 unfolded feature map (`C × S`, with `S = H·W`).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSample {
    data: Array2<f64>,
    height: usize,
    width: usize,
}

impl ActivationSample {
    pub fn new(data: Array2<f64>, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "spatial dims must be positive, got {height}x{width}"
            )));
        }
        if data.ncols() != height * width {
            return Err(Error::shape(format!(
                "sample has {} spatial columns but H*W = {}*{} = {}",
                data.ncols(),
                height,
                width,
                height * width
            )));
        }
        if data.nrows() == 0 {
            return Err(Error::shape("sample has zero channels"));
        }
        check_finite(data.view(), "activation sample")?;
        Ok(Self {
            data,
            height,
            width,
        })
    }

    pub fn data(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn spatial(&self) -> usize {
        self.data.ncols()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Refolds the unfolding back into an `H × W × C` array.
    pub fn to_raw(&self) -> Array3<f64> {
        let c = self.channels();
        Array3::from_shape_fn((self.height, self.width, c), |(h, w, ch)| {
            self.data[[ch, h * self.width + w]]
        })
    }
}

/// An ordered batch of samples sharing the same `(C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    samples: Vec<ActivationSample>,
}

impl ActivationBatch {
    pub fn new(samples: Vec<ActivationSample>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::shape("batch must contain at least one sample"))?;
        let dims = (first.channels(), first.height(), first.width());
        for (i, s) in samples.iter().enumerate() {
            let d = (s.channels(), s.height(), s.width());
            if d != dims {
                return Err(Error::shape(format!(
                    "sample {i} has (C,H,W) = {d:?}, expected {dims:?}"
                )));
            }
        }
        Ok(Self { samples })
    }

    /// Builds a batch from an `N × C × S` array.
    pub fn from_array3(array: ArrayView3<'_, f64>, height: usize, width: usize) -> Result<Self> {
        let samples = array
            .outer_iter()
            .map(|z| ActivationSample::new(z.to_owned(), height, width))
            .collect::<Result<Vec<_>>>()?;
        Self::new(samples)
    }

    /// Stacks the batch into one `N × C × S` array.
    pub fn to_array3(&self) -> Array3<f64> {
        let (n, c, s) = (self.len(), self.channels(), self.spatial());
        let mut out = Array3::zeros((n, c, s));
        for (mut dst, src) in out.outer_iter_mut().zip(&self.samples) {
            dst.assign(&src.data);
        }
        out
    }

    pub fn samples(&self) -> &[ActivationSample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> Option<&ActivationSample> {
        self.samples.get(i)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.samples[0].channels()
    }

    pub fn spatial(&self) -> usize {
        self.samples[0].spatial()
    }

    pub fn height(&self) -> usize {
        self.samples[0].height()
    }

    pub fn width(&self) -> usize {
        self.samples[0].width()
    }

    /// Sum of squared entries over every sample.
    pub fn squared_norm(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| s.data.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    /// A new batch made of the samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let samples = indices
            .iter()
            .map(|&i| {
                self.samples.get(i).cloned().ok_or_else(|| {
                    Error::InvalidInput(format!("sample index {i} out of range (N={})", self.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(samples)
    }
}

/// Mode-3 unfolding of an `H × W × C` array into a `C × (H·W)` sample.
pub fn mode3_unfold(raw: ArrayView3<'_, f64>) -> Result<ActivationSample> {
    let (h, w, c) = raw.dim();
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::shape(format!("raw array dims must be positive, got {h}x{w}x{c}")));
    }
    check_finite(raw, "raw feature map")?;
    let data = Array2::from_shape_fn((c, h * w), |(ch, s)| raw[[s / w, s % w, ch]]);
    ActivationSample::new(data, h, w)
}

/// Row-major fold of a length-`H·W` vector into an `H × W` matrix.
pub fn fold_spatial(v: ArrayView1<'_, f64>, height: usize, width: usize) -> Result<Array2<f64>> {
    if v.len() != height * width {
        return Err(Error::shape(format!(
            "cannot fold length {} into {height}x{width}",
            v.len()
        )));
    }
    Ok(Array2::from_shape_fn((height, width), |(h, w)| v[h * width + w]))
}

/// Row-major flattening, the inverse of [`fold_spatial`].
pub fn flatten_spatial(x: ArrayView2<'_, f64>) -> Array1<f64> {
    x.iter().copied().collect()
}

/// Mode-3 product of every sample with `basis` (`R × S`): returns `Z_i · basisᵀ` per sample.
pub fn mode3_product(batch: &ActivationBatch, basis: ArrayView2<'_, f64>) -> Result<Vec<Array2<f64>>> {
    if basis.ncols() != batch.spatial() {
        return Err(Error::shape(format!(
            "basis has {} columns, batch has S = {}",
            basis.ncols(),
            batch.spatial()
        )));
    }
    Ok(batch
        .samples()
        .iter()
        .map(|z| z.data().dot(&basis.t()))
        .collect())
}

pub(crate) fn check_finite<D: ndarray::Dimension>(
    a: ndarray::ArrayView<'_, f64, D>,
    what: &str,
) -> Result<()> {
    if let Some((idx, _)) = a.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            location: format!("{what} index {:?}", idx),
        });
    }
    Ok(())
}

pub(crate) fn check_dims(what: &str, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    if got != want {
        return Err(Error::shape(format!("{what} is {}x{}, expected {}x{}", got.0, got.1, want.0, want.1)));
    }
    Ok(())
}
