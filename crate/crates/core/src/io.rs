//! `.npy` (format version 1.0) arrays, activation batch files and model archives.
//!
//! Arrays are read as little-endian `f8`/`f4` (or `u1`/`b1` masks) in C order
//! and widened to `f64`; they are always written as little-endian `f8`, or
//! `u1` for masks. Batches are `N × C × S` arrays with a JSON sidecar holding
//! the spatial grid. A model archive is a directory with `appearance.npy`,
//! `parts.npy` and `model.json`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayD, ArrayViewD, Axis, Ix2, Ix3, IxDyn};
use serde::{Deserialize, Serialize};

use crate::editing::PartNorm;
use crate::error::{Error, Result};
use crate::factorization::{FactorModel, FitConfig, FitStats};
use crate::synthetic::PlantedTruth;
use crate::tensor::ActivationBatch;

pub const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";
const NPY_ALIGN: usize = 64;
pub const FORMAT_VERSION: u32 = 1;

pub const APPEARANCE_FILE: &str = "appearance.npy";
pub const PARTS_FILE: &str = "parts.npy";
pub const METADATA_FILE: &str = "model.json";
pub const LAMBDAS_FILE: &str = "lambdas.npy";
pub const TRUTH_FILE: &str = "truth.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    F8,
    F4,
    U1,
    B1,
}

impl Dtype {
    fn parse(descr: &str) -> Result<Self> {
        match descr {
            "<f8" => Ok(Dtype::F8),
            "<f4" => Ok(Dtype::F4),
            "|u1" | "<u1" => Ok(Dtype::U1),
            "|b1" => Ok(Dtype::B1),
            d if d.starts_with('>') => Err(Error::Format(format!("big-endian dtype {d:?} is not supported"))),
            d => Err(Error::Format(format!(
                "unsupported dtype {d:?} (expected <f8, <f4, |u1 or |b1)"
            ))),
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F8 => 8,
            Dtype::F4 => 4,
            Dtype::U1 | Dtype::B1 => 1,
        }
    }
}

fn shape_literal(shape: &[usize]) -> String {
    match shape {
        [n] => format!("({n},)"),
        dims => format!(
            "({})",
            dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    }
}

fn encode(descr: &str, shape: &[usize], payload: &[u8]) -> Vec<u8> {
    let mut header = format!(
        "{{'descr': '{descr}', 'fortran_order': False, 'shape': {}, }}",
        shape_literal(shape)
    );
    let unpadded = NPY_MAGIC.len() + 2 + 2 + header.len() + 1;
    let pad = (NPY_ALIGN - unpadded % NPY_ALIGN) % NPY_ALIGN;
    header.extend(std::iter::repeat_n(' ', pad));
    header.push('\n');

    let mut out = Vec::with_capacity(10 + header.len() + payload.len());
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(payload);
    out
}

/// Serializes an array as a version 1.0 `<f8` C-order `.npy` byte stream.
pub fn encode_npy(array: ArrayViewD<'_, f64>) -> Vec<u8> {
    let payload: Vec<u8> = array.iter().flat_map(|v| v.to_le_bytes()).collect();
    encode("<f8", array.shape(), &payload)
}

/// Serializes a boolean mask as a `|u1` array of 0/1 bytes.
pub fn encode_mask_npy(mask: ArrayViewD<'_, bool>) -> Vec<u8> {
    let payload: Vec<u8> = mask.iter().map(|&b| b as u8).collect();
    encode("|u1", mask.shape(), &payload)
}

struct Header {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

/// Parser for the Python dict literal stored in the header.
struct HeaderParser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn err(&self, what: &str) -> Error {
        Error::Format(format!("header: {what} at byte {}", self.pos))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        self.skip_ws();
        if self.src.get(self.pos) == Some(&c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.err(&format!("expected '{}'", c as char)))
        }
    }

    fn string(&mut self) -> Result<String> {
        self.skip_ws();
        let quote = match self.src.get(self.pos) {
            Some(&q @ (b'\'' | b'"')) => q,
            _ => return Err(self.err("expected string")),
        };
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos >= self.src.len() {
            return Err(self.err("unterminated string"));
        }
        let s = String::from_utf8_lossy(&self.src[start..self.pos]).into_owned();
        self.pos += 1;
        Ok(s)
    }

    fn word(&mut self) -> &'a [u8] {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        &self.src[start..self.pos]
    }

    fn boolean(&mut self) -> Result<bool> {
        match self.word() {
            b"True" => Ok(true),
            b"False" => Ok(false),
            _ => Err(self.err("expected True or False")),
        }
    }

    fn tuple(&mut self) -> Result<Vec<usize>> {
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            if self.eat(b')') {
                return Ok(dims);
            }
            let w = self.word();
            let text = std::str::from_utf8(w).map_err(|_| self.err("invalid dimension"))?;
            let text = text.strip_suffix('L').unwrap_or(text);
            let d = text.parse::<usize>().map_err(|_| self.err(&format!("invalid dimension {text:?}")))?;
            dims.push(d);
            if !self.eat(b',') {
                self.expect(b')')?;
                return Ok(dims);
            }
        }
    }

    fn parse(mut self) -> Result<Header> {
        self.expect(b'{')?;
        let (mut descr, mut fortran, mut shape) = (None, None, None);
        loop {
            if self.eat(b'}') {
                break;
            }
            let key = self.string()?;
            self.expect(b':')?;
            match key.as_str() {
                "descr" => descr = Some(self.string()?),
                "fortran_order" => fortran = Some(self.boolean()?),
                "shape" => shape = Some(self.tuple()?),
                other => return Err(Error::Format(format!("header: unexpected key {other:?}"))),
            }
            if !self.eat(b',') {
                self.expect(b'}')?;
                break;
            }
        }
        Ok(Header {
            descr: descr.ok_or_else(|| Error::Format("header: missing 'descr'".into()))?,
            fortran_order: fortran.ok_or_else(|| Error::Format("header: missing 'fortran_order'".into()))?,
            shape: shape.ok_or_else(|| Error::Format("header: missing 'shape'".into()))?,
        })
    }
}

/// Parses a version 1.0 `.npy` byte stream into an `f64` array.
pub fn decode_npy(bytes: &[u8]) -> Result<ArrayD<f64>> {
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(Error::Format("bad magic (not an .npy file)".into()));
    }
    if (bytes[6], bytes[7]) != (1, 0) {
        return Err(Error::Format(format!(
            "unsupported format version {}.{} (only 1.0)",
            bytes[6], bytes[7]
        )));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_start = 10 + header_len;
    if bytes.len() < data_start {
        return Err(Error::Format(format!(
            "header length {header_len} exceeds file size {}",
            bytes.len()
        )));
    }
    let header = HeaderParser {
        src: &bytes[10..data_start],
        pos: 0,
    }
    .parse()?;
    if header.fortran_order {
        return Err(Error::Format("Fortran-order arrays are not supported".into()));
    }
    let dtype = Dtype::parse(&header.descr)?;
    if header.shape.is_empty() {
        return Err(Error::Format("0-dimensional arrays are not supported".into()));
    }
    if header.shape.contains(&0) {
        return Err(Error::Format(format!("empty shape {:?}", header.shape)));
    }
    let count = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("shape overflows".into()))?;
    let payload = &bytes[data_start..];
    if payload.len() != count * dtype.size() {
        return Err(Error::Format(format!(
            "payload is {} bytes, shape {:?} of {} needs {}",
            payload.len(),
            header.shape,
            header.descr,
            count * dtype.size()
        )));
    }
    let values: Vec<f64> = match dtype {
        Dtype::F8 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
        Dtype::F4 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
            .collect(),
        Dtype::U1 => payload.iter().map(|&b| b as f64).collect(),
        Dtype::B1 => payload.iter().map(|&b| (b != 0) as u8 as f64).collect(),
    };
    ArrayD::from_shape_vec(IxDyn(&header.shape), values).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_array(path: impl AsRef<Path>) -> Result<ArrayD<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_npy(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_array(array: ArrayViewD<'_, f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_npy(array)).map_err(|e| Error::io(path, e))
}

pub fn write_mask(mask: ArrayViewD<'_, bool>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mask_npy(mask)).map_err(|e| Error::io(path, e))
}

/// Reads a 2-D array.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let a = read_array(path)?;
    let shape = a.shape().to_vec();
    a.into_dimensionality::<Ix2>()
        .map_err(|_| Error::shape(format!("{}: expected a 2-D array, got shape {shape:?}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchMetadata {
    pub format_version: u32,
    pub height: usize,
    pub width: usize,
}

/// Sidecar metadata path for a batch file: `acts.npy` → `acts.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Metadata {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Metadata {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

pub fn write_batch(batch: &ActivationBatch, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_array(batch.to_array3().into_dyn().view(), path)?;
    write_json(
        &BatchMetadata {
            format_version: FORMAT_VERSION,
            height: batch.height(),
            width: batch.width(),
        },
        &sidecar_path(path),
    )
}

/// Reads an `N × C × S` batch whose spatial grid comes from the JSON sidecar.
pub fn read_batch(path: impl AsRef<Path>) -> Result<ActivationBatch> {
    let path = path.as_ref();
    let a = read_array3(path)?;
    let meta: BatchMetadata = read_json(&sidecar_path(path))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Metadata {
            path: sidecar_path(path),
            message: format!("unsupported format_version {}", meta.format_version),
        });
    }
    ActivationBatch::from_array3(a.view(), meta.height, meta.width)
}

pub fn read_batch_with_dims(path: impl AsRef<Path>, height: usize, width: usize) -> Result<ActivationBatch> {
    let a = read_array3(path.as_ref())?;
    ActivationBatch::from_array3(a.view(), height, width)
}

fn read_array3(path: &Path) -> Result<Array3<f64>> {
    let a = read_array(path)?;
    let shape = a.shape().to_vec();
    a.into_dimensionality::<Ix3>()
        .map_err(|_| Error::shape(format!("{}: expected N x C x S, got shape {shape:?}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub format_version: u32,
    pub channels: usize,
    pub spatial: usize,
    pub height: usize,
    pub width: usize,
    pub rank_appearance: usize,
    pub rank_parts: usize,
    pub nonneg: bool,
    pub fit_config: Option<FitConfig>,
    pub stats: FitStats,
}

/// A model directory on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArchive {
    pub dir: PathBuf,
    pub metadata: ModelMetadata,
}

pub fn save_model(model: &FactorModel, config: Option<&FitConfig>, dir: impl AsRef<Path>) -> Result<ModelArchive> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (height, width) = model.spatial_dims();
    let (rank_appearance, rank_parts) = model.ranks();
    let metadata = ModelMetadata {
        format_version: FORMAT_VERSION,
        channels: model.channels(),
        spatial: model.spatial(),
        height,
        width,
        rank_appearance,
        rank_parts,
        nonneg: model.nonneg(),
        fit_config: config.cloned(),
        stats: model.stats().clone(),
    };
    write_array(model.appearance().into_dyn(), dir.join(APPEARANCE_FILE))?;
    write_array(model.parts().into_dyn(), dir.join(PARTS_FILE))?;
    write_json(&metadata, &dir.join(METADATA_FILE))?;
    Ok(ModelArchive {
        dir: dir.to_owned(),
        metadata,
    })
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<(FactorModel, ModelArchive)> {
    let dir = dir.as_ref();
    let meta_path = dir.join(METADATA_FILE);
    let metadata: ModelMetadata = read_json(&meta_path)?;
    let inconsistent = |message: String| Error::Metadata {
        path: meta_path.clone(),
        message,
    };
    if metadata.format_version != FORMAT_VERSION {
        return Err(inconsistent(format!(
            "unsupported format_version {}",
            metadata.format_version
        )));
    }
    if metadata.spatial != metadata.height * metadata.width {
        return Err(inconsistent(format!(
            "spatial {} != height {} * width {}",
            metadata.spatial, metadata.height, metadata.width
        )));
    }
    let appearance = read_matrix(dir.join(APPEARANCE_FILE))?;
    let parts = read_matrix(dir.join(PARTS_FILE))?;
    if appearance.dim() != (metadata.channels, metadata.rank_appearance) {
        return Err(inconsistent(format!(
            "appearance.npy is {:?}, metadata says ({}, {})",
            appearance.dim(),
            metadata.channels,
            metadata.rank_appearance
        )));
    }
    if parts.dim() != (metadata.spatial, metadata.rank_parts) {
        return Err(inconsistent(format!(
            "parts.npy is {:?}, metadata says ({}, {})",
            parts.dim(),
            metadata.spatial,
            metadata.rank_parts
        )));
    }
    let model = FactorModel::new(
        appearance,
        parts,
        metadata.height,
        metadata.width,
        metadata.nonneg,
        metadata.stats.clone(),
    )?;
    Ok((
        model,
        ModelArchive {
            dir: dir.to_owned(),
            metadata,
        },
    ))
}

/// Text record describing one edit. `part_path` is resolved relative to the record's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub appearance_index: usize,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part_index: Option<usize>,
    #[serde(default)]
    pub norm: PartNorm,
}

impl EditRecord {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rec: EditRecord = read_json(path)?;
        if rec.part_path.is_some() == rec.part_index.is_some() {
            return Err(Error::Metadata {
                path: path.to_owned(),
                message: "exactly one of part_path and part_index must be given".into(),
            });
        }
        if let (Some(p), Some(base)) = (rec.part_path.as_mut(), path.parent()) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(rec)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path.as_ref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthMetadata {
    pub format_version: u32,
    pub noise_sigma: f64,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
}

/// Writes planted ground truth as `appearance.npy`, `parts.npy`,
/// `lambdas.npy` (`N × R_C × R_S`) and `truth.json`.
pub fn save_truth(truth: &PlantedTruth, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (rc, rs) = truth.ranks();
    let mut lambdas = Array3::zeros((truth.lambdas.len(), rc, rs));
    for (mut slot, lam) in lambdas.outer_iter_mut().zip(&truth.lambdas) {
        slot.assign(lam);
    }
    write_array(truth.appearance.view().into_dyn(), dir.join(APPEARANCE_FILE))?;
    write_array(truth.parts.view().into_dyn(), dir.join(PARTS_FILE))?;
    write_array(lambdas.view().into_dyn(), dir.join(LAMBDAS_FILE))?;
    write_json(
        &TruthMetadata {
            format_version: FORMAT_VERSION,
            noise_sigma: truth.noise_sigma,
            seed: truth.seed,
            height: truth.height,
            width: truth.width,
        },
        &dir.join(TRUTH_FILE),
    )
}

pub fn load_truth(dir: impl AsRef<Path>) -> Result<PlantedTruth> {
    let dir = dir.as_ref();
    let meta_path = dir.join(TRUTH_FILE);
    let meta: TruthMetadata = read_json(&meta_path)?;
    let bad = |message: String| Error::Metadata {
        path: meta_path.clone(),
        message,
    };
    if meta.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format_version {}", meta.format_version)));
    }
    let appearance = read_matrix(dir.join(APPEARANCE_FILE))?;
    let parts = read_matrix(dir.join(PARTS_FILE))?;
    let lambdas_path = dir.join(LAMBDAS_FILE);
    let raw = read_array(&lambdas_path)?;
    let shape = raw.shape().to_vec();
    let raw = raw
        .into_dimensionality::<Ix3>()
        .map_err(|_| Error::shape(format!("{}: expected N x R_C x R_S, got {shape:?}", lambdas_path.display())))?;
    if parts.nrows() != meta.height * meta.width {
        return Err(bad(format!(
            "parts have {} rows, grid is {}x{}",
            parts.nrows(),
            meta.height,
            meta.width
        )));
    }
    if (raw.shape()[1], raw.shape()[2]) != (appearance.ncols(), parts.ncols()) {
        return Err(bad(format!(
            "lambdas are {shape:?}, ranks are ({}, {})",
            appearance.ncols(),
            parts.ncols()
        )));
    }
    Ok(PlantedTruth {
        appearance,
        parts,
        lambdas: raw.axis_iter(Axis(0)).map(|l| l.to_owned()).collect(),
        noise_sigma: meta.noise_sigma,
        seed: meta.seed,
        height: meta.height,
        width: meta.width,
    })
}
