use crate::error::{NumericsError, Result};
use crate::kernels;

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(NumericsError::Dimension {
                op: "tensor",
                detail: format!("extents must be positive, got {shape:?}"),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NumericsError::Dimension {
                op: "tensor",
                detail: format!("shape {shape:?} holds {n} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for callers that already guarantee the invariants.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.as_ref().len() != cols {
                return Err(NumericsError::Dimension {
                    op: "from_rows",
                    detail: "ragged rows".into(),
                });
            }
            data.extend_from_slice(r.as_ref());
        }
        Self::new([rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Leading extent of a matrix.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Trailing extent.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub(crate) fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            other => Err(NumericsError::Dimension {
                op,
                detail: format!("expected a matrix, got shape {other:?}"),
            }),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.as_matrix("matmul")?;
        let (k2, n) = other.as_matrix("matmul")?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor::from_parts(
            vec![m, n],
            kernels::matmul(&self.data, &other.data, m, k, n),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.as_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(NumericsError::Dimension {
                op: "softmax",
                detail: format!("axis {axis} out of range for shape {:?}", self.shape),
            });
        }
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = self.data.clone();
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = out[base + j * inner];
                }
                kernels::softmax_in_place(&mut buf);
                for (j, b) in buf.iter().enumerate() {
                    out[base + j * inner] = *b;
                }
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    /// Row-wise layer normalization over the trailing axis.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let d = self.cols();
        if d < 2 {
            return Err(NumericsError::Dimension {
                op: "layer_norm",
                detail: format!("normalized width must be at least 2, got {d}"),
            });
        }
        if gain.numel() != d || bias.numel() != d {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape.clone(),
                rhs: gain.shape.clone(),
            });
        }
        let rows = self.numel() / d;
        let mut out = vec![0.0; self.numel()];
        let mut xhat = vec![0.0; self.numel()];
        let mut rstd = vec![0.0; rows];
        kernels::layer_norm_rows(
            &self.data, d, &gain.data, &bias.data, &mut out, &mut xhat, &mut rstd,
        );
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Euclidean norm of all entries.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Mean of `-log softmax(logits)[target]` over unmasked rows.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let (n, v) = logits.as_matrix("cross_entropy")?;
    check_ce_inputs(n, v, targets, mask)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..n {
        if !mask[r] {
            continue;
        }
        let row = logits.row(r);
        total += logsumexp(row) - row[targets[r]];
        count += 1;
    }
    Ok(total / count as f64)
}

pub(crate) fn check_ce_inputs(n: usize, v: usize, targets: &[usize], mask: &[bool]) -> Result<()> {
    if targets.len() != n || mask.len() != n {
        return Err(NumericsError::Dimension {
            op: "cross_entropy",
            detail: format!(
                "{n} rows but {} targets and {} mask flags",
                targets.len(),
                mask.len()
            ),
        });
    }
    for (row, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if m && t >= v {
            return Err(NumericsError::TargetOutOfRange {
                row,
                target: t,
                classes: v,
            });
        }
    }
    if !mask.iter().any(|&m| m) {
        return Err(NumericsError::AllMasked);
    }
    Ok(())
}

pub fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
