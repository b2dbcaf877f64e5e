//! Dense 3-way arrays with an observation mask.
//!
//! Layout is a single contiguous buffer with the time index fastest, then
//! measure, then subject: entry `(t, m, i)` lives at `t + a * (m + b * i)`.
//! Each frontal slice is therefore one contiguous column-major `a x b` block.
//!
//! Unfoldings follow the Kolda-Bader convention: the mode-k unfolding has the
//! mode-k index as row and the remaining indices as column, with the
//! lower-numbered remaining mode varying fastest. For this layout that gives
//!
//! * mode 1: `a x (b n)`, equal to `[M_1, M_2, ..., M_n]`;
//! * mode 2: `b x (a n)`, equal to `[M_1^T, M_2^T, ..., M_n^T]`;
//! * mode 3: `n x (a b)`, row `i` equal to `vec(M_i)^T`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    /// Time points.
    pub a: usize,
    /// Measures.
    pub b: usize,
    /// Subjects.
    pub n: usize,
}

impl Dims {
    pub fn new(a: usize, b: usize, n: usize) -> Self {
        Self { a, b, n }
    }

    pub fn len(&self) -> usize {
        self.a * self.b * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, t: usize, m: usize, i: usize) -> usize {
        t + self.a * (m + self.b * i)
    }

    /// Inverse of [`Dims::index`].
    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let t = idx % self.a;
        let rest = idx / self.a;
        (t, rest % self.b, rest / self.b)
    }

    fn along(&self, mode: usize) -> Result<usize> {
        match mode {
            1 => Ok(self.a),
            2 => Ok(self.b),
            3 => Ok(self.n),
            _ => Err(Error::InvalidMode(mode)),
        }
    }

    fn with(&self, mode: usize, size: usize) -> Dims {
        match mode {
            1 => Dims::new(size, self.b, self.n),
            2 => Dims::new(self.a, size, self.n),
            _ => Dims::new(self.a, self.b, size),
        }
    }
}

/// Dense 3-way real array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: Dims,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::ShapeMismatch(format!(
                "buffer of length {} for dims {}x{}x{}",
                data.len(),
                dims.a,
                dims.b,
                dims.n
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for i in 0..dims.n {
            for m in 0..dims.b {
                for t in 0..dims.a {
                    data.push(f(t, m, i));
                }
            }
        }
        Self { dims, data }
    }

    /// Stacks equally shaped `a x b` slices along the subject mode.
    pub fn from_slices(slices: &[DMatrix<f64>]) -> Result<Self> {
        let first = slices.first().ok_or(Error::EmptyData)?;
        let (a, b) = first.shape();
        let mut data = Vec::with_capacity(a * b * slices.len());
        for s in slices {
            if s.shape() != (a, b) {
                return Err(Error::ShapeMismatch(format!(
                    "slice of shape {:?}, expected {:?}",
                    s.shape(),
                    (a, b)
                )));
            }
            data.extend_from_slice(s.as_slice());
        }
        Ok(Self {
            dims: Dims::new(a, b, slices.len()),
            data,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, t: usize, m: usize, i: usize) -> f64 {
        self.data[self.dims.index(t, m, i)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, m: usize, i: usize, v: f64) {
        let idx = self.dims.index(t, m, i);
        self.data[idx] = v;
    }

    /// Frontal slice `M_i` as an owned `a x b` matrix.
    pub fn slice(&self, i: usize) -> DMatrix<f64> {
        let ab = self.dims.a * self.dims.b;
        DMatrix::from_column_slice(self.dims.a, self.dims.b, &self.data[i * ab..(i + 1) * ab])
    }

    pub fn slices(&self) -> Vec<DMatrix<f64>> {
        (0..self.dims.n).map(|i| self.slice(i)).collect()
    }

    pub fn set_slice(&mut self, i: usize, m: &DMatrix<f64>) {
        let ab = self.dims.a * self.dims.b;
        self.data[i * ab..(i + 1) * ab].copy_from_slice(m.as_slice());
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A frontal slice `M_i` together with its observation pattern `Omega_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontalSlice {
    pub matrix: DMatrix<f64>,
    pub slice_mask: DMatrix<bool>,
    pub subject_index: usize,
}

/// Dense tensor plus observation mask (`true` = observed).
///
/// Stored values at unobserved positions are meaningless; everything that
/// measures fit goes through the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedTensor {
    values: Tensor3,
    mask: Vec<bool>,
}

impl MaskedTensor {
    pub fn new(values: Tensor3, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != values.dims().len() {
            return Err(Error::ShapeMismatch(format!(
                "mask of length {} for tensor with {} entries",
                mask.len(),
                values.dims().len()
            )));
        }
        Ok(Self { values, mask })
    }

    pub fn fully_observed(values: Tensor3) -> Self {
        let mask = vec![true; values.dims().len()];
        Self { values, mask }
    }

    pub fn dims(&self) -> Dims {
        self.values.dims()
    }

    pub fn values(&self) -> &Tensor3 {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_observed(&self, t: usize, m: usize, i: usize) -> bool {
        self.mask[self.dims().index(t, m, i)]
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&o| o).count()
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|&o| o)
    }

    /// Same values with a different mask.
    pub fn with_mask(&self, mask: Vec<bool>) -> Result<Self> {
        Self::new(self.values.clone(), mask)
    }

    pub fn slice_mask(&self, i: usize) -> DMatrix<bool> {
        let d = self.dims();
        let ab = d.a * d.b;
        DMatrix::from_column_slice(d.a, d.b, &self.mask[i * ab..(i + 1) * ab])
    }

    /// Values with every unobserved entry replaced by `fill`.
    pub fn filled(&self, fill: f64) -> Tensor3 {
        let mut out = self.values.clone();
        for (v, &o) in out.as_mut_slice().iter_mut().zip(&self.mask) {
            if !o {
                *v = fill;
            }
        }
        out
    }

    /// Sum of squares over observed entries.
    pub fn observed_norm_sq(&self) -> f64 {
        self.values
            .as_slice()
            .iter()
            .zip(&self.mask)
            .filter(|(_, &o)| o)
            .map(|(v, _)| v * v)
            .sum()
    }

    /// Time rows and measure columns with no observation across all subjects.
    pub fn empty_fibers(&self) -> (Vec<usize>, Vec<usize>) {
        let d = self.dims();
        let mut time_seen = vec![false; d.a];
        let mut measure_seen = vec![false; d.b];
        for (idx, &o) in self.mask.iter().enumerate() {
            if o {
                let (t, m, _) = d.coords(idx);
                time_seen[t] = true;
                measure_seen[m] = true;
            }
        }
        let missing = |seen: Vec<bool>| {
            seen.iter()
                .enumerate()
                .filter(|(_, &s)| !s)
                .map(|(k, _)| k)
                .collect::<Vec<_>>()
        };
        (missing(time_seen), missing(measure_seen))
    }
}

pub fn frontal_slice(t: &MaskedTensor, i: usize) -> Result<FrontalSlice> {
    let n = t.dims().n;
    if i >= n {
        return Err(Error::IndexOutOfRange { index: i, len: n });
    }
    Ok(FrontalSlice {
        matrix: t.values().slice(i),
        slice_mask: t.slice_mask(i),
        subject_index: i,
    })
}

/// Mode-k unfolding (k in 1..=3).
pub fn unfold(t: &Tensor3, mode: usize) -> Result<DMatrix<f64>> {
    let d = t.dims();
    match mode {
        1 => Ok(DMatrix::from_column_slice(d.a, d.b * d.n, t.as_slice())),
        2 => Ok(DMatrix::from_fn(d.b, d.a * d.n, |m, col| {
            t.get(col % d.a, m, col / d.a)
        })),
        3 => Ok(DMatrix::from_fn(d.n, d.a * d.b, |i, col| {
            t.get(col % d.a, col / d.a, i)
        })),
        _ => Err(Error::InvalidMode(mode)),
    }
}

/// Inverse of [`unfold`] for a tensor of shape `dims`.
pub fn fold(m: &DMatrix<f64>, mode: usize, dims: Dims) -> Result<Tensor3> {
    let rows = dims.along(mode)?;
    if m.nrows() != rows || m.nrows() * m.ncols() != dims.len() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} matrix cannot fold into mode-{mode} of {}x{}x{}",
            m.nrows(),
            m.ncols(),
            dims.a,
            dims.b,
            dims.n
        )));
    }
    Ok(match mode {
        1 => Tensor3 {
            dims,
            data: m.as_slice().to_vec(),
        },
        2 => Tensor3::from_fn(dims, |t, mm, i| m[(mm, t + dims.a * i)]),
        _ => Tensor3::from_fn(dims, |t, mm, i| m[(i, t + dims.a * mm)]),
    })
}

/// `t x_k u`: contracts the mode-k index of `t` against the columns of `u`.
pub fn mode_product(t: &Tensor3, u: &DMatrix<f64>, mode: usize) -> Result<Tensor3> {
    let d = t.dims();
    let len = d.along(mode)?;
    if u.ncols() != len {
        return Err(Error::ShapeMismatch(format!(
            "mode-{mode} product with {}x{} matrix on dimension {len}",
            u.nrows(),
            u.ncols()
        )));
    }
    let product = u * unfold(t, mode)?;
    fold(&product, mode, d.with(mode, u.nrows()))
}

/// Squared Frobenius norm over the entries where `omega` is true.
pub fn restricted_norm_sq(m: &DMatrix<f64>, omega: &DMatrix<bool>) -> Result<f64> {
    if m.shape() != omega.shape() {
        return Err(Error::ShapeMismatch(format!(
            "matrix {:?} vs mask {:?}",
            m.shape(),
            omega.shape()
        )));
    }
    Ok(m.iter()
        .zip(omega.iter())
        .filter(|(_, &o)| o)
        .map(|(v, _)| v * v)
        .sum())
}
