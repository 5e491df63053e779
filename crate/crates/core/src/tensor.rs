//! Dense row-major fp64 arrays.
//!
//! [`SeqTensor`] carries sequences (one row per position) and [`State`] the
//! `dk x dv` recurrent memory. Both reject non-finite values on construction
//! and are immutable afterwards. All reductions sum in ascending index order
//! so that two code paths performing the same arithmetic agree bitwise.

use std::fmt;

use crate::error::{GlaError, Result};

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(GlaError::NonFinite {
            index,
            value: data[index],
        }),
        None => Ok(()),
    }
}

/// A `rows x cols` matrix stored row-major.
#[derive(Clone, PartialEq)]
pub struct SeqTensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for SeqTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SeqTensor")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("data", &self.data)
            .finish()
    }
}

impl SeqTensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(GlaError::shape(
                "SeqTensor::new",
                format!("{} values ({rows}x{cols})", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        check_finite(&data)?;
        Ok(SeqTensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        SeqTensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Result<Self> {
        SeqTensor::new(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = SeqTensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a tensor from nested rows; all rows must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(GlaError::shape("SeqTensor::from_rows", cols, bad.len()));
        }
        SeqTensor::new(rows.len(), cols, rows.concat())
    }

    /// Skips the finiteness scan; callers guarantee the invariant.
    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        debug_assert!(data.iter().all(|x| x.is_finite()));
        SeqTensor { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Rows `start..end` as a contiguous slice.
    #[inline]
    pub fn rows_slice(&self, start: usize, end: usize) -> &[f64] {
        &self.data[start * self.cols..end * self.cols]
    }

    /// Returns a copy with a single element replaced. Used by perturbation
    /// checks; the new value must be finite.
    pub fn with_element(&self, r: usize, c: usize, value: f64) -> Result<Self> {
        check_finite(&[value])?;
        let mut out = self.clone();
        out.data[r * self.cols + c] = value;
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        SeqTensor::new(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn add(&self, other: &SeqTensor) -> Result<Self> {
        self.zip("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &SeqTensor) -> Result<Self> {
        self.zip("sub", other, |a, b| a - b)
    }

    fn zip(&self, op: &'static str, other: &SeqTensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(GlaError::shape(
                op,
                fmt_shape(self.shape()),
                fmt_shape(other.shape()),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        SeqTensor::new(self.rows, self.cols, data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn transpose(&self) -> SeqTensor {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        SeqTensor::from_vec_unchecked(self.cols, self.rows, data)
    }
}

pub(crate) fn fmt_shape((r, c): (usize, usize)) -> String {
    format!("{r}x{c}")
}

/// Dense product `a * b`. Each output element sums over the inner index in
/// ascending order, starting from zero.
pub fn matmul(a: &SeqTensor, b: &SeqTensor) -> Result<SeqTensor> {
    if a.cols != b.rows {
        return Err(GlaError::shape(
            "matmul",
            format!("inner dimension {}", a.cols),
            format!("{} (b is {})", b.rows, fmt_shape(b.shape())),
        ));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate().take(k) {
            let brow = b.row(p);
            for (o, &bpj) in orow.iter_mut().zip(brow) {
                *o += aip * bpj;
            }
        }
    }
    SeqTensor::new(m, n, out)
}

/// Elementwise product. `b` may either match `a` or be a single row that is
/// broadcast across every row of `a`.
pub fn hadamard(a: &SeqTensor, b: &SeqTensor) -> Result<SeqTensor> {
    if a.shape() == b.shape() {
        return a.zip("hadamard", b, |x, y| x * y);
    }
    if b.rows == 1 && b.cols == a.cols {
        return hadamard_row(a, b.row(0));
    }
    Err(GlaError::shape(
        "hadamard",
        format!("{} or 1x{}", fmt_shape(a.shape()), a.cols),
        fmt_shape(b.shape()),
    ))
}

/// Multiplies every row of `a` elementwise by `row`.
pub fn hadamard_row(a: &SeqTensor, row: &[f64]) -> Result<SeqTensor> {
    if row.len() != a.cols {
        return Err(GlaError::shape("hadamard_row", a.cols, row.len()));
    }
    let data = a
        .data
        .chunks_exact(a.cols.max(1))
        .flat_map(|r| r.iter().zip(row).map(|(&x, &y)| x * y))
        .collect::<Vec<_>>();
    SeqTensor::new(a.rows, a.cols, data)
}

/// Reverse cumulative sum along rows: `out[t] = sum_{i >= t} x[i]`,
/// accumulated from the last row towards the first.
pub fn suffix_sum(x: &SeqTensor) -> Result<SeqTensor> {
    if x.rows == 0 {
        return Err(GlaError::Empty("suffix_sum"));
    }
    let c = x.cols;
    let mut out = x.data.clone();
    for t in (0..x.rows - 1).rev() {
        for j in 0..c {
            out[t * c + j] += out[(t + 1) * c + j];
        }
    }
    SeqTensor::new(x.rows, c, out)
}

/// The `dk x dv` recurrent state.
#[derive(Clone, PartialEq)]
pub struct State {
    dk: usize,
    dv: usize,
    data: Vec<f64>,
}

impl fmt::Debug for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("State")
            .field("dk", &self.dk)
            .field("dv", &self.dv)
            .field("data", &self.data)
            .finish()
    }
}

impl State {
    pub fn zeros(dk: usize, dv: usize) -> Self {
        State {
            dk,
            dv,
            data: vec![0.0; dk * dv],
        }
    }

    pub fn new(dk: usize, dv: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dk * dv {
            return Err(GlaError::shape("State::new", dk * dv, data.len()));
        }
        check_finite(&data)?;
        Ok(State { dk, dv, data })
    }

    pub(crate) fn from_vec_unchecked(dk: usize, dv: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), dk * dv);
        State { dk, dv, data }
    }

    pub fn dk(&self) -> usize {
        self.dk
    }

    pub fn dv(&self) -> usize {
        self.dv
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dv + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor(&self) -> SeqTensor {
        SeqTensor::from_vec_unchecked(self.dk, self.dv, self.data.clone())
    }
}
