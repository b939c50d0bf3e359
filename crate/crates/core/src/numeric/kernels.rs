//! Pure forward kernels shared by the tape and by value-level callers.

use crate::error::{ConnaError, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ConnaError::NumericDomain(format!(
            "{what}: non-finite input"
        )))
    }
}

pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(ConnaError::Shape("softmax of an empty vector".into()));
    }
    check_finite(v, "softmax")?;
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(ConnaError::Shape("log_softmax of an empty vector".into()));
    }
    check_finite(v, "log_softmax")?;
    let mut out = v.to_vec();
    log_softmax_in_place(&mut out);
    Ok(out)
}

/// Max-subtracted softmax; entries equal to `-inf` receive probability 0.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        v.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    v.iter_mut().for_each(|x| *x *= inv);
}

pub(crate) fn log_softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v.iter_mut().for_each(|x| *x -= lse);
}

pub fn layer_norm(v: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if v.len() != gain.len() || v.len() != bias.len() {
        return Err(ConnaError::Shape(format!(
            "layer_norm lengths differ: v={}, gain={}, bias={}",
            v.len(),
            gain.len(),
            bias.len()
        )));
    }
    if v.is_empty() {
        return Err(ConnaError::Shape("layer_norm of an empty vector".into()));
    }
    if !(eps > 0.0) {
        return Err(ConnaError::NumericDomain(format!(
            "layer_norm eps must be > 0, got {eps}"
        )));
    }
    let (mean, rstd) = moments(v, eps);
    Ok(v.iter()
        .zip(gain)
        .zip(bias)
        .map(|((x, g), b)| (x - mean) * rstd * g + b)
        .collect())
}

/// Mean and reciprocal standard deviation (biased variance plus `eps`).
pub(crate) fn moments(v: &[f64], eps: f64) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// `-ln dist[target]`.
pub fn cross_entropy(dist: &[f64], target: usize) -> Result<f64> {
    let p = *dist.get(target).ok_or(ConnaError::Index {
        index: target,
        len: dist.len(),
    })?;
    if !(p >= 0.0) {
        return Err(ConnaError::NumericDomain(format!(
            "probability {p} is not valid"
        )));
    }
    Ok(-p.ln())
}

/// Tanh-approximated gaussian error linear unit.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Strided view of a matrix for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `_ × cols` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

pub(crate) struct MatMut<'a> {
    pub data: &'a mut [f64],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatMut<'a> {
    pub fn rows(data: &'a mut [f64], cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            row_stride: cols,
            col_stride: 1,
        }
    }
}

/// `c = alpha * a(m×k) · b(k×n) + beta * c`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: MatMut<'_>,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        // matrixmultiply does not scale c when k == 0
        for i in 0..m {
            for j in 0..n {
                let idx = c.offset + i * c.row_stride + j * c.col_stride;
                c.data[idx] *= beta;
            }
        }
        return;
    }
    assert!(a.last_index(m, k) < a.data.len(), "gemm: lhs out of bounds");
    assert!(b.last_index(k, n) < b.data.len(), "gemm: rhs out of bounds");
    let c_last = c.offset + (m - 1) * c.row_stride + (n - 1) * c.col_stride;
    assert!(c_last < c.data.len(), "gemm: output out of bounds");
    // SAFETY: every index touched by dgemm is bounded by the asserts above and
    // the output does not alias the inputs (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.row_stride as isize,
            c.col_stride as isize,
        );
    }
}
