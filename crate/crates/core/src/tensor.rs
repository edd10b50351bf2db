//! Dense row-major f64 matrices and the forward primitives of the model.
//!
//! Every exposed operation validates shapes and rejects non-finite outputs;
//! a NaN or infinity anywhere is treated as an error state, not a value.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fmath;

/// Dense 2-D tensor, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CoreError::ShapeMismatch {
                op: "from_vec",
                lhs_rows: rows,
                lhs_cols: cols,
                rhs_rows: data.len(),
                rhs_cols: 1,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|row| row.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(CoreError::ShapeMismatch {
                    op: "from_rows",
                    lhs_rows: r,
                    lhs_cols: c,
                    rhs_rows: 1,
                    rhs_cols: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self { rows: r, cols: c, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// The single entry of a 1x1 tensor.
    pub fn item(&self) -> Result<f64> {
        if self.rows == 1 && self.cols == 1 {
            Ok(self.data[0])
        } else {
            Err(CoreError::ShapeMismatch {
                op: "item",
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: 1,
                rhs_cols: 1,
            })
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor2D {
        let mut out = Tensor2D::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    fn same_shape(&self, other: &Tensor2D, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(op, self, other));
        }
        Ok(())
    }
}

fn shape_err(op: &'static str, a: &Tensor2D, b: &Tensor2D) -> CoreError {
    CoreError::ShapeMismatch {
        op,
        lhs_rows: a.rows,
        lhs_cols: a.cols,
        rhs_rows: b.rows,
        rhs_cols: b.cols,
    }
}

fn check_finite(t: Tensor2D, op: &'static str) -> Result<Tensor2D> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(CoreError::NonFinite { op })
    }
}

/// `a * b` with the cache-friendly i-k-j loop order.
pub fn matmul(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.rows {
        return Err(shape_err("matmul", a, b));
    }
    let mut out = Tensor2D::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &a_ik) in a_row.iter().enumerate() {
            if a_ik == 0.0 {
                continue;
            }
            let b_row = b.row(k);
            for j in 0..b.cols {
                out_row[j] += a_ik * b_row[j];
            }
        }
    }
    check_finite(out, "matmul")
}

/// `a^T * b` without materializing the transpose. Used by backward passes.
pub fn matmul_tn(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.rows != b.rows {
        return Err(shape_err("matmul_tn", a, b));
    }
    let mut out = Tensor2D::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let a_row = a.row(k);
        let b_row = b.row(k);
        for (i, &a_ki) in a_row.iter().enumerate() {
            if a_ki == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for j in 0..b.cols {
                out_row[j] += a_ki * b_row[j];
            }
        }
    }
    check_finite(out, "matmul_tn")
}

/// `a * b^T` without materializing the transpose. Used by backward passes.
pub fn matmul_nt(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.cols {
        return Err(shape_err("matmul_nt", a, b));
    }
    let mut out = Tensor2D::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            let b_row = b.row(j);
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a_row[k] * b_row[k];
            }
            out.data[i * b.rows + j] = acc;
        }
    }
    check_finite(out, "matmul_nt")
}

pub fn add(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    a.same_shape(b, "add")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    check_finite(
        Tensor2D {
            rows: a.rows,
            cols: a.cols,
            data,
        },
        "add",
    )
}

/// Adds a 1-x-cols bias row to every row of `a`.
pub fn add_bias_row(a: &Tensor2D, bias: &Tensor2D) -> Result<Tensor2D> {
    if bias.rows != 1 || bias.cols != a.cols {
        return Err(shape_err("add_bias_row", a, bias));
    }
    let mut out = a.clone();
    for i in 0..a.rows {
        let row = &mut out.data[i * a.cols..(i + 1) * a.cols];
        for (v, b) in row.iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
    check_finite(out, "add_bias_row")
}

pub fn relu(a: &Tensor2D) -> Tensor2D {
    let data = a.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
    Tensor2D {
        rows: a.rows,
        cols: a.cols,
        data,
    }
}

pub fn sigmoid(a: &Tensor2D) -> Tensor2D {
    let data = a.data.iter().map(|&x| fmath::sigmoid(x)).collect();
    Tensor2D {
        rows: a.rows,
        cols: a.cols,
        data,
    }
}

pub fn log_sigmoid(a: &Tensor2D) -> Tensor2D {
    let data = a.data.iter().map(|&x| fmath::log_sigmoid(x)).collect();
    Tensor2D {
        rows: a.rows,
        cols: a.cols,
        data,
    }
}

/// Elementwise natural log; non-positive entries are a domain error.
pub fn log_elem(a: &Tensor2D) -> Result<Tensor2D> {
    let mut data = Vec::with_capacity(a.data.len());
    for &x in &a.data {
        if x <= 0.0 {
            return Err(CoreError::NonFinite { op: "log" });
        }
        data.push(fmath::ln(x));
    }
    Ok(Tensor2D {
        rows: a.rows,
        cols: a.cols,
        data,
    })
}

pub fn mul_elem(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    a.same_shape(b, "mul_elem")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    check_finite(
        Tensor2D {
            rows: a.rows,
            cols: a.cols,
            data,
        },
        "mul_elem",
    )
}

pub fn scale(a: &Tensor2D, c: f64) -> Result<Tensor2D> {
    let data = a.data.iter().map(|&x| x * c).collect();
    check_finite(
        Tensor2D {
            rows: a.rows,
            cols: a.cols,
            data,
        },
        "scale",
    )
}

/// Horizontal concatenation `[a | b]`.
pub fn concat_cols(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.rows != b.rows {
        return Err(shape_err("concat_cols", a, b));
    }
    let cols = a.cols + b.cols;
    let mut data = Vec::with_capacity(a.rows * cols);
    for i in 0..a.rows {
        data.extend_from_slice(a.row(i));
        data.extend_from_slice(b.row(i));
    }
    Ok(Tensor2D {
        rows: a.rows,
        cols,
        data,
    })
}

/// Column-wise mean over rows: `n x c -> 1 x c`.
pub fn mean_rows(a: &Tensor2D) -> Result<Tensor2D> {
    if a.rows == 0 {
        return Err(CoreError::ShapeMismatch {
            op: "mean_rows",
            lhs_rows: 0,
            lhs_cols: a.cols,
            rhs_rows: 1,
            rhs_cols: a.cols,
        });
    }
    let mut out = Tensor2D::zeros(1, a.cols);
    for i in 0..a.rows {
        for (j, &v) in a.row(i).iter().enumerate() {
            out.data[j] += v;
        }
    }
    let inv = 1.0 / a.rows as f64;
    for v in &mut out.data {
        *v *= inv;
    }
    check_finite(out, "mean_rows")
}

pub fn sum_all(a: &Tensor2D) -> Result<Tensor2D> {
    let s: f64 = a.data.iter().sum();
    check_finite(Tensor2D::scalar(s), "sum_all")
}

/// Extracts the given rows into a new tensor, in index order.
pub fn gather_rows(a: &Tensor2D, indices: &[usize]) -> Result<Tensor2D> {
    let mut data = Vec::with_capacity(indices.len() * a.cols);
    for &i in indices {
        if i >= a.rows {
            return Err(CoreError::ShapeMismatch {
                op: "gather_rows",
                lhs_rows: a.rows,
                lhs_cols: a.cols,
                rhs_rows: i,
                rhs_cols: 0,
            });
        }
        data.extend_from_slice(a.row(i));
    }
    Ok(Tensor2D {
        rows: indices.len(),
        cols: a.cols,
        data,
    })
}

/// Row-wise softmax via the shifted-exponent form.
pub fn softmax_rows(a: &Tensor2D) -> Result<Tensor2D> {
    let mut out = a.clone();
    for i in 0..a.rows {
        let row = &mut out.data[i * a.cols..(i + 1) * a.cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for v in row.iter_mut() {
            *v = fmath::exp(*v - max);
            denom += *v;
        }
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
    check_finite(out, "softmax_rows")
}

/// Per-row negative log-likelihood of the given labels, from raw logits.
///
/// Computed as `logsumexp(row) - row[label]`; returns an `n x 1` tensor.
pub fn nll_from_logits(logits: &Tensor2D, labels: &[usize]) -> Result<Tensor2D> {
    if labels.len() != logits.rows {
        return Err(CoreError::ShapeMismatch {
            op: "nll_from_logits",
            lhs_rows: logits.rows,
            lhs_cols: logits.cols,
            rhs_rows: labels.len(),
            rhs_cols: 1,
        });
    }
    let mut out = Tensor2D::zeros(logits.rows, 1);
    for i in 0..logits.rows {
        let row = logits.row(i);
        let label = labels[i];
        if label >= logits.cols {
            return Err(CoreError::ShapeMismatch {
                op: "nll_from_logits",
                lhs_rows: logits.rows,
                lhs_cols: logits.cols,
                rhs_rows: label,
                rhs_cols: 0,
            });
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| fmath::exp(v - max)).sum();
        out.data[i] = max + fmath::ln(sum) - row[label];
    }
    check_finite(out, "nll_from_logits")
}

/// Mean negative log-likelihood over all rows (the usual cross-entropy loss).
pub fn cross_entropy_from_logits(logits: &Tensor2D, labels: &[usize]) -> Result<f64> {
    let nll = nll_from_logits(logits, labels)?;
    Ok(nll.data().iter().sum::<f64>() / nll.rows() as f64)
}
