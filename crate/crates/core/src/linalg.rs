//! Row-major dense helpers on top of `matrixmultiply`.

/// Strided view of a matrix stored in a slice.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Column block `[col0, col0 + width)` of a row-major `rows x stride` matrix.
    pub fn columns(data: &'a [f64], rows: usize, stride: usize, col0: usize, width: usize) -> Self {
        MatRef {
            data: &data[col0..],
            rows,
            cols: width,
            row_stride: stride as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

pub(crate) struct MatMut<'a> {
    pub data: &'a mut [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
}

impl<'a> MatMut<'a> {
    pub fn new(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        MatMut {
            data,
            rows,
            cols,
            row_stride: cols as isize,
        }
    }

    pub fn columns(data: &'a mut [f64], rows: usize, stride: usize, col0: usize, width: usize) -> Self {
        MatMut {
            data: &mut data[col0..],
            rows,
            cols: width,
            row_stride: stride as isize,
        }
    }
}

/// `c = beta * c + a * b`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: MatMut<'_>) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "output shape");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
        }
    };
    assert!(a.data.len() >= span(a.rows, a.cols, a.row_stride, a.col_stride));
    assert!(b.data.len() >= span(b.rows, b.cols, b.row_stride, b.col_stride));
    assert!(c.data.len() >= span(c.rows, c.cols, c.row_stride, 1));
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.data.as_mut_ptr(),
            c.row_stride,
            1,
        );
    }
}

/// `out[rows x n] = x[rows x k] * w[k x n] + bias`.
pub(crate) fn affine(x: &[f64], rows: usize, k: usize, w: &[f64], bias: &[f64], out: &mut [f64]) {
    let n = bias.len();
    for row in out.chunks_exact_mut(n).take(rows) {
        row.copy_from_slice(bias);
    }
    gemm(MatRef::new(x, rows, k), MatRef::new(w, k, n), 1.0, MatMut::new(out, rows, n));
}

/// Backward of [`affine`]: accumulates `dw += x^T dy`, `db += colsum(dy)` and,
/// if given, `dx += dy w^T`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn affine_backward(
    x: &[f64],
    rows: usize,
    k: usize,
    w: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let n = db.len();
    gemm(MatRef::new(x, rows, k).t(), MatRef::new(dy, rows, n), 1.0, MatMut::new(dw, k, n));
    for row in dy.chunks_exact(n).take(rows) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    if let Some(dx) = dx {
        gemm(MatRef::new(dy, rows, n), MatRef::new(w, k, n).t(), 1.0, MatMut::new(dx, rows, k));
    }
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Given `p = softmax(s)` and `dp`, returns `ds` in place of `dp`.
pub(crate) fn softmax_backward_in_place(p: &[f64], dp: &mut [f64]) {
    let dot: f64 = p.iter().zip(dp.iter()).map(|(a, b)| a * b).sum();
    for (d, &pi) in dp.iter_mut().zip(p) {
        *d = pi * (*d - dot);
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise layer norm. Writes normalized values to `xhat`, `1/sigma` per
/// row to `rstd` and the scaled output to `out`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm(
    x: &[f64],
    d: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    xhat: &mut [f64],
    rstd: &mut [f64],
    out: &mut [f64],
) {
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        rstd[r] = inv;
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gamma[j] + beta[j];
        }
    }
}

/// Backward of [`layer_norm`]; overwrites `dy` with the input gradient.
pub(crate) fn layer_norm_backward(
    xhat: &[f64],
    rstd: &[f64],
    d: usize,
    gamma: &[f64],
    dy: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    for (r, row) in dy.chunks_exact_mut(d).enumerate() {
        let xh = &xhat[r * d..(r + 1) * d];
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for j in 0..d {
            dgamma[j] += row[j] * xh[j];
            dbeta[j] += row[j];
            let g = row[j] * gamma[j];
            mean_g += g;
            mean_gx += g * xh[j];
        }
        mean_g /= d as f64;
        mean_gx /= d as f64;
        for j in 0..d {
            let g = row[j] * gamma[j];
            row[j] = rstd[r] * (g - mean_g - xh[j] * mean_gx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_with_transposes() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 2), 0.0, MatMut::new(&mut c, 2, 2));
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // a^T a
        let mut g = [0.0; 9];
        gemm(MatRef::new(&a, 2, 3).t(), MatRef::new(&a, 2, 3), 0.0, MatMut::new(&mut g, 3, 3));
        assert_eq!(g, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
