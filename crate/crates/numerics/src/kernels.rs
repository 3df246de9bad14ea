//! Raw slice kernels shared by the eager tensor API, the graph ops and the
//! inference paths of the models.

/// Strided view of a row-major matrix buffer.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Column block `[start, start + width)` of a contiguous matrix.
    pub fn col_block(data: &'a [f64], rows: usize, cols: usize, start: usize, width: usize) -> Self {
        debug_assert!(start + width <= cols);
        MatRef {
            data: &data[start.min(data.len())..],
            rows,
            cols: width,
            row_stride: cols,
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

    fn fits(&self) -> bool {
        if self.rows == 0 || self.cols == 0 {
            return true;
        }
        (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride < self.data.len()
    }
}

/// Mutable strided matrix view.
#[derive(Debug)]
pub struct MatMut<'a> {
    pub data: &'a mut [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatMut<'a> {
    pub fn new(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        MatMut {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn col_block(data: &'a mut [f64], rows: usize, cols: usize, start: usize, width: usize) -> Self {
        debug_assert!(start + width <= cols);
        let len = data.len();
        MatMut {
            data: &mut data[start.min(len)..],
            rows,
            cols: width,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatMut {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn fits(&self) -> bool {
        if self.rows == 0 || self.cols == 0 {
            return true;
        }
        (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride < self.data.len()
    }
}

/// `c = alpha * a · b + beta * c`.
pub fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: MatMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner extent");
    assert_eq!(a.rows, c.rows, "gemm row extent");
    assert_eq!(b.cols, c.cols, "gemm column extent");
    assert!(a.fits() && b.fits() && c.fits(), "gemm view out of bounds");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: every view was checked to address only elements inside its
    // backing slice, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.data.as_mut_ptr(),
            c.row_stride as isize,
            c.col_stride as isize,
        );
    }
}

/// Row-major `m×k · k×n`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(
        1.0,
        MatRef::new(a, m, k),
        MatRef::new(b, k, n),
        0.0,
        MatMut::new(&mut out, m, n),
    );
    out
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes each row of `x` (width `d`), writing `xhat` and the per-row
/// reciprocal standard deviation, then applies the affine map into `out`.
pub fn layer_norm_rows(
    x: &[f64],
    d: usize,
    gain: &[f64],
    bias: &[f64],
    out: &mut [f64],
    xhat: &mut [f64],
    rstd: &mut [f64],
) {
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[r] = inv;
        let base = r * d;
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[base + j] = h;
            out[base + j] = h * gain[j] + bias[j];
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Adds `bias` to every row.
pub fn add_row_in_place(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Multi-head scaled dot-product attention for one sequence.
///
/// `q` is `tq×d`, `k`/`v` are `tk×d`. Query row `i` sits at absolute position
/// `offset + i`; with `causal` it may attend to keys `0..=offset + i` only.
/// Attention probabilities are written to `probs` (`heads×tq×tk`) when given.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    tq: usize,
    tk: usize,
    d: usize,
    heads: usize,
    causal: bool,
    offset: usize,
    out: &mut [f64],
    mut probs: Option<&mut [f64]>,
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut scores = vec![0.0; tq * tk];
    for h in 0..heads {
        let c0 = h * dh;
        gemm(
            scale,
            MatRef::col_block(q, tq, d, c0, dh),
            MatRef::col_block(k, tk, d, c0, dh).t(),
            0.0,
            MatMut::new(&mut scores, tq, tk),
        );
        for i in 0..tq {
            let row = &mut scores[i * tk..(i + 1) * tk];
            let visible = if causal { (offset + i + 1).min(tk) } else { tk };
            softmax_in_place(&mut row[..visible]);
            for s in &mut row[visible..] {
                *s = 0.0;
            }
        }
        gemm(
            1.0,
            MatRef::new(&scores, tq, tk),
            MatRef::col_block(v, tk, d, c0, dh),
            0.0,
            MatMut::col_block(out, tq, d, c0, dh),
        );
        if let Some(p) = probs.as_deref_mut() {
            p[h * tq * tk..(h + 1) * tq * tk].copy_from_slice(&scores);
        }
    }
}
