//! Minimal dense linear algebra for the classifier and the quantization
//! kernels: row-major f32 matrices, matmul, softmax, layer norm, GELU.
//!
//! Everything here is a pure function of its inputs; values can be shared
//! across threads freely. Dimension errors are contract violations and panic
//! with both shapes in the message.

/// Dense row-major matrix of f32 values.
///
/// Invariants: `data.len() == rows * cols` and every stored value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "tensor dimensions must be positive, got {rows}x{cols}");
        Tensor2D {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert!(rows > 0 && cols > 0, "tensor dimensions must be positive, got {rows}x{cols}");
        assert_eq!(
            data.len(),
            rows * cols,
            "data length {} does not match shape {rows}x{cols}",
            data.len()
        );
        assert!(
            data.iter().all(|v| v.is_finite()),
            "tensor data contains non-finite values"
        );
        Tensor2D { rows, cols, data }
    }

    /// Identity matrix of order `n`.
    pub fn identity(n: usize) -> Self {
        let mut t = Tensor2D::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Raw mutable access for gradient accumulation; callers keep the
    /// finiteness invariant.
    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        assert!(v.is_finite(), "tensor values must be finite, got {v}");
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Elementwise sum with another tensor of the same shape.
    pub fn add(&self, other: &Tensor2D) -> Tensor2D {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "add shape mismatch: {}x{} vs {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    /// Add a bias vector to every row.
    pub fn add_row_bias(&self, bias: &[f32]) -> Tensor2D {
        assert_eq!(
            bias.len(),
            self.cols,
            "bias length {} does not match column count {}",
            bias.len(),
            self.cols
        );
        let mut out = self.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] += bias[c];
            }
        }
        out
    }

    pub fn transpose(&self) -> Tensor2D {
        let mut out = Tensor2D::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// Standard matrix product `(a.rows x a.cols) * (b.rows x b.cols)`.
///
/// Panics if `a.cols != b.rows`. Accumulates in f32; the quantized path in
/// [`crate::quant`] accumulates in i32 instead.
pub fn matmul(a: &Tensor2D, b: &Tensor2D) -> Tensor2D {
    assert_eq!(
        a.cols, b.rows,
        "matmul shape mismatch: {}x{} * {}x{}",
        a.rows, a.cols, b.rows, b.cols
    );
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_val) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for j in 0..n {
                o_row[j] += a_val * b_row[j];
            }
        }
    }
    Tensor2D {
        rows: m,
        cols: n,
        data: out,
    }
}

/// Softmax of a single row, computed with max subtraction.
///
/// Panics on empty input. The output is a probability vector: nonnegative
/// entries summing to 1 within float rounding.
pub fn softmax(row: &[f32]) -> Vec<f32> {
    assert!(!row.is_empty(), "softmax of an empty vector");
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut out: Vec<f32> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Per-row layer normalization: each row is shifted to zero mean, scaled to
/// unit variance (`epsilon` added under the square root), then scaled by
/// `gain` and shifted by `bias`.
pub fn layer_norm(x: &Tensor2D, gain: &[f32], bias: &[f32], epsilon: f32) -> Tensor2D {
    assert_eq!(
        gain.len(),
        x.cols,
        "layer_norm gain length {} does not match column count {}",
        gain.len(),
        x.cols
    );
    assert_eq!(
        bias.len(),
        x.cols,
        "layer_norm bias length {} does not match column count {}",
        bias.len(),
        x.cols
    );
    assert!(epsilon > 0.0, "layer_norm epsilon must be positive, got {epsilon}");
    let mut out = Tensor2D::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let (mean, inv_std) = row_norm_stats(row, epsilon);
        let out_row = out.row_mut(r);
        for c in 0..x.cols {
            out_row[c] = (row[c] - mean) * inv_std * gain[c] + bias[c];
        }
    }
    out
}

/// Mean and inverse standard deviation of one row, as used by [`layer_norm`].
pub(crate) fn row_norm_stats(row: &[f32], epsilon: f32) -> (f32, f32) {
    let n = row.len() as f32;
    let mean = row.iter().sum::<f32>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n;
    (mean, 1.0 / (var + epsilon).sqrt())
}

/// Elementwise GELU, tanh approximation:
/// `0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3)))`.
pub fn gelu(x: &Tensor2D) -> Tensor2D {
    let data = x.data.iter().map(|&v| gelu_scalar(v)).collect();
    Tensor2D {
        rows: x.rows,
        cols: x.cols,
        data,
    }
}

pub(crate) const GELU_SQRT_2_OVER_PI: f32 = 0.797_884_56;
pub(crate) const GELU_CUBIC: f32 = 0.044_715;

pub(crate) fn gelu_scalar(v: f32) -> f32 {
    let inner = GELU_SQRT_2_OVER_PI * (v + GELU_CUBIC * v * v * v);
    0.5 * v * (1.0 + inner.tanh())
}
