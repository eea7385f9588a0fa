//! Dense f32 kernels the engine is built on.
//!
//! Every reduction runs in a fixed order, so identical inputs produce
//! bit-identical outputs no matter how many rows a call covers. In
//! particular, row `i` of `matmul(a, b)` only depends on row `i` of `a`,
//! which lets a one-row decode step reproduce a prefill row exactly.

use std::io::{Read, Write};

use crate::error::{Error, Result};

const LN_EPS: f32 = 1e-5;
const TENSOR_MAGIC: &[u8; 4] = b"LVT1";

/// Row-major f32 matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                op: "Matrix::new",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::LengthMismatch {
                    op: "Matrix::from_rows",
                    expected: cols,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Builds a matrix whose entries are produced in row-major order by `f`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact(0) panics, and a zero-width matrix still has rows
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Copies out the listed rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Copies out columns `start..start + width`.
    pub fn column_block(&self, start: usize, width: usize) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * width);
        for row in self.iter_rows() {
            data.extend_from_slice(&row[start..start + width]);
        }
        Matrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if self.rows > 0 && row.len() != self.cols {
            return Err(Error::LengthMismatch {
                op: "Matrix::push_row",
                expected: self.cols,
                actual: row.len(),
            });
        }
        if self.rows == 0 {
            self.cols = row.len();
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err("add_assign", self, other));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::ShapeMismatch {
        op,
        left_rows: a.rows,
        left_cols: a.cols,
        right_rows: b.rows,
        right_cols: b.cols,
    }
}

/// Dot product with sixteen interleaved partial sums combined by a fixed
/// pairwise tree. The lane split lets the compiler vectorize it while
/// keeping the result independent of target features.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let mut lo = [0.0f32; 8];
    let mut hi = [0.0f32; 8];
    let mut i = 0;
    while i + 16 <= n {
        lo = lane_madd(lo, &a[i..i + 8], &b[i..i + 8]);
        hi = lane_madd(hi, &a[i + 8..i + 16], &b[i + 8..i + 16]);
        i += 16;
    }
    let mut tail = 0.0f32;
    for j in i..n {
        tail += a[j] * b[j];
    }
    let h: [f32; 8] = std::array::from_fn(|l| lo[l] + hi[l]);
    let q = [h[0] + h[4], h[1] + h[5], h[2] + h[6], h[3] + h[7]];
    ((q[0] + q[2]) + (q[1] + q[3])) + tail
}

#[inline(always)]
fn lane_madd(acc: [f32; 8], x: &[f32], y: &[f32]) -> [f32; 8] {
    let x: &[f32; 8] = x.try_into().expect("8 lanes");
    let y: &[f32; 8] = y.try_into().expect("8 lanes");
    std::array::from_fn(|l| acc[l] + x[l] * y[l])
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(y: &mut [f32], alpha: f32, x: &[f32]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Matrix product. Each output element accumulates over the shared
/// dimension strictly left to right.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(shape_err("matmul", a, b));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(n, m);
    if m == 0 {
        return Ok(out);
    }

    // Four rows at a time share each streamed row of `b`. Per element the
    // operation sequence is the same as the single-row loop below.
    let mut i = 0;
    while i + 4 <= n {
        let (r0, rest) = out.data[i * m..(i + 4) * m].split_at_mut(m);
        let (r1, rest) = rest.split_at_mut(m);
        let (r2, r3) = rest.split_at_mut(m);
        let (a0, a1, a2, a3) = (a.row(i), a.row(i + 1), a.row(i + 2), a.row(i + 3));
        for p in 0..k {
            let brow = b.row(p);
            let (x0, x1, x2, x3) = (a0[p], a1[p], a2[p], a3[p]);
            for j in 0..m {
                let bj = brow[j];
                r0[j] += x0 * bj;
                r1[j] += x1 * bj;
                r2[j] += x2 * bj;
                r3[j] += x3 * bj;
            }
        }
        i += 4;
    }
    for i in i..n {
        let arow = a.row(i);
        let orow = &mut out.data[i * m..(i + 1) * m];
        for (p, &x) in arow.iter().enumerate() {
            axpy(orow, x, b.row(p));
        }
    }
    Ok(out)
}

/// Softmax over each row, stabilized by subtracting the row max. With
/// `causal`, row `i` only covers columns `0..=i` and everything above the
/// diagonal is exactly zero.
pub fn row_softmax(a: &Matrix, causal: bool) -> Matrix {
    let mut out = Matrix::zeros(a.rows, a.cols);
    for i in 0..a.rows {
        let row = a.row(i);
        let width = if causal { (i + 1).min(a.cols) } else { a.cols };
        softmax_into(&row[..width], &mut out.row_mut(i)[..width]);
    }
    out
}

pub(crate) fn softmax_into(logits: &[f32], out: &mut [f32]) {
    if logits.is_empty() {
        return;
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &x) in out.iter_mut().zip(logits) {
        *o = (x - max).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Per-row layer normalization followed by the affine `gain`/`bias`.
pub fn layer_norm(x: &Matrix, gain: &[f32], bias: &[f32]) -> Result<Matrix> {
    if gain.len() != x.cols || bias.len() != x.cols {
        return Err(Error::LengthMismatch {
            op: "layer_norm",
            expected: x.cols,
            actual: if gain.len() != x.cols {
                gain.len()
            } else {
                bias.len()
            },
        });
    }
    let mut out = Matrix::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        layer_norm_row(x.row(i), gain, bias, out.row_mut(i));
    }
    Ok(out)
}

fn layer_norm_row(x: &[f32], gain: &[f32], bias: &[f32], out: &mut [f32]) {
    let n = x.len() as f32;
    let mut sum = 0.0f32;
    for &v in x {
        sum += v;
    }
    let mean = sum / n;
    let mut sq = 0.0f32;
    for &v in x {
        let d = v - mean;
        sq += d * d;
    }
    let inv_std = 1.0 / (sq / n + LN_EPS).sqrt();
    for (((o, &v), &g), &b) in out.iter_mut().zip(x).zip(gain).zip(bias) {
        *o = (v - mean) * inv_std * g + b;
    }
}

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Writes `m` as an LVT1 tensor: magic, rows and cols as little-endian
/// u64, then the entries as little-endian f32.
pub fn write_tensor<W: Write>(mut w: W, m: &Matrix) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(m.rows as u64).to_le_bytes())?;
    w.write_all(&(m.cols as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(m.data.len() * 4);
    for v in &m.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Matrix> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut dim = [0u8; 8];
    r.read_exact(&mut dim)?;
    let rows = u64::from_le_bytes(dim) as usize;
    r.read_exact(&mut dim)?;
    let cols = u64::from_le_bytes(dim) as usize;
    let len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("dims {rows}x{cols} overflow")))?;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Matrix::new(rows, cols, data)
}
