//! Flat weight vectors and the arithmetic shared by interpolation, averaging
//! and distance computations.
//!
//! Every model in the crate is a [`ParamVector`]: one contiguous run of `f64`
//! weights whose layout is described by a [`ShapeSpec`]. Sums are always
//! accumulated left to right in input order so results are reproducible
//! bit-for-bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Index;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|sum(weights) - 1|` accepted by [`weighted_average`].
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    /// Wraps `values`, rejecting empty or non-finite input.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("parameter vector"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ParamVector::new"));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "parameter vector must be non-empty");
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * x`, in place.
    pub(crate) fn add_scaled(&mut self, alpha: f64, x: &[f64]) {
        debug_assert_eq!(self.0.len(), x.len());
        for (y, x) in self.0.iter_mut().zip(x) {
            *y += alpha * x;
        }
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn check_dims(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::DimMismatch { left: a, right: b })
    }
}

/// Euclidean distance between two weight vectors.
pub fn l2_distance(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    check_dims(a.dim(), b.dim())?;
    Ok(raw_distance(a.as_slice(), b.as_slice()))
}

pub(crate) fn raw_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Elementwise `sum_i weights[i] * models[i]`.
///
/// Weights must be non-negative and sum to one within
/// [`WEIGHT_SUM_TOLERANCE`]. Accumulation starts from the first model's term,
/// so a single model with weight `1.0` is returned bit-exactly.
pub fn weighted_average(models: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    let refs: Vec<&ParamVector> = models.iter().collect();
    weighted_average_refs(&refs, weights)
}

pub(crate) fn weighted_average_refs(models: &[&ParamVector], weights: &[f64]) -> Result<ParamVector> {
    if models.is_empty() {
        return Err(Error::Empty("model list"));
    }
    if models.len() != weights.len() {
        return Err(Error::InvalidWeights(format!(
            "{} models but {} weights",
            models.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidWeights(format!("weight {w} is negative or not finite")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Error::InvalidWeights(format!("weights sum to {total}, expected 1")));
    }
    let dim = models[0].dim();
    for m in &models[1..] {
        check_dims(dim, m.dim())?;
    }

    let mut out: Vec<f64> = models[0].as_slice().iter().map(|v| weights[0] * v).collect();
    for (m, &w) in models[1..].iter().zip(&weights[1..]) {
        for (o, v) in out.iter_mut().zip(m.as_slice()) {
            *o += w * v;
        }
    }
    let out = ParamVector(out);
    out.ensure_finite("weighted_average")?;
    Ok(out)
}

/// Uniform weights `1/n` for `n` models.
pub fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Returns `y + alpha * x`.
pub fn axpy(y: &ParamVector, alpha: f64, x: &ParamVector) -> Result<ParamVector> {
    check_dims(y.dim(), x.dim())?;
    let mut out = y.clone();
    out.add_scaled(alpha, x.as_slice());
    out.ensure_finite("axpy")?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
    pub has_bias: bool,
}

impl LayerShape {
    pub fn param_count(&self) -> usize {
        self.rows * self.cols + if self.has_bias { self.rows } else { 0 }
    }
}

/// How a flat vector maps onto dense layers. Each layer stores a row-major
/// `rows x cols` weight block (rows = outputs) followed by `rows` biases.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub layers: Vec<LayerShape>,
}

impl ShapeSpec {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerShape::param_count).sum()
    }

    pub fn describes(&self, params: &ParamVector) -> bool {
        self.param_count() == params.dim()
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LSSW";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes `"LSSW" | version u32 | dim u64 | dim x f64 | layer count u64 |
/// (rows u64, cols u64, has_bias u8)*`, all little-endian.
pub fn write_checkpoint<W: Write>(mut w: W, params: &ParamVector, shape: &ShapeSpec) -> Result<()> {
    if !shape.layers.is_empty() && !shape.describes(params) {
        return Err(Error::DimMismatch {
            left: shape.param_count(),
            right: params.dim(),
        });
    }
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.dim() as u64).to_le_bytes())?;
    for v in params.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(shape.layers.len() as u64).to_le_bytes())?;
    for layer in &shape.layers {
        w.write_all(&(layer.rows as u64).to_le_bytes())?;
        w.write_all(&(layer.cols as u64).to_le_bytes())?;
        w.write_all(&[layer.has_bias as u8])?;
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Malformed {
            what: "checkpoint",
            detail: "truncated".into(),
        },
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ParamVector, ShapeSpec)> {
    let magic: [u8; 4] = read_array(&mut r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            what: "checkpoint",
            expected: u32::from_be_bytes(*CHECKPOINT_MAGIC),
            actual: u32::from_be_bytes(magic),
        });
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Malformed {
            what: "checkpoint",
            detail: format!("unsupported version {version}"),
        });
    }
    let dim = read_u64(&mut r)? as usize;
    if dim == 0 {
        return Err(Error::Malformed {
            what: "checkpoint",
            detail: "zero dimension".into(),
        });
    }
    let mut values = Vec::with_capacity(dim.min(1 << 24));
    for _ in 0..dim {
        values.push(f64::from_le_bytes(read_array(&mut r)?));
    }
    let n_layers = read_u64(&mut r)? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(1 << 16));
    for _ in 0..n_layers {
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let [flag] = read_array::<1, _>(&mut r)?;
        layers.push(LayerShape {
            rows,
            cols,
            has_bias: flag != 0,
        });
    }
    let shape = ShapeSpec { layers };
    let params = ParamVector::new(values).map_err(|e| Error::Malformed {
        what: "checkpoint",
        detail: e.to_string(),
    })?;
    if !shape.layers.is_empty() && !shape.describes(&params) {
        return Err(Error::Malformed {
            what: "checkpoint",
            detail: format!("shape describes {} parameters, found {}", shape.param_count(), params.dim()),
        });
    }
    Ok((params, shape))
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParamVector, shape: &ShapeSpec) -> Result<()> {
    let file = File::create(path)?;
    write_checkpoint(BufWriter::new(file), params, shape)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParamVector, ShapeSpec)> {
    let file = File::open(path)?;
    read_checkpoint(BufReader::new(file))
}
