//! Dense row-major f64 tensors and the hand-rolled kernels everything else
//! builds on.
//!
//! Shapes are explicit and checked; there is no broadcasting beyond
//! scalar-times-tensor and bias-add (a row vector added to every row of a
//! matrix). The matmul kernels are written so LLVM autovectorizes them; at
//! the sizes used here (hidden widths up to 786) they run close enough to
//! peak that training is matmul-bound, as it should be.

use crate::{Error, Result};

/// Dense tensor: row-major values with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    /// Row `i` of a 2-D tensor as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshaped",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        Ok(self.zip(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        Ok(self.zip(other, |a, b| a - b))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        Ok(self.zip(other, |a, b| a * b))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "div")?;
        Ok(self.zip(other, |a, b| a / b))
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// y += a * x, elementwise over the whole tensor.
    pub fn axpy_from(&mut self, a: f64, x: &Tensor) {
        debug_assert_eq!(self.shape, x.shape);
        axpy(&mut self.data, a, &x.data);
    }

    /// Add a row vector (shape [c] or [1, c]) to every row of a 2-D tensor.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let c = self.cols();
        if bias.len() != c {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let mut out = self.clone();
        for i in 0..self.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    // ---- reductions ----

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Column means of a 2-D tensor: shape [1, cols].
    pub fn col_mean(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / r as f64;
        for o in &mut out {
            *o *= inv;
        }
        Tensor {
            shape: vec![1, c],
            data: out,
        }
    }

    /// Sum of squared differences (no 1/2 factor).
    pub fn squared_error(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "squared_error")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum())
    }

    // ---- matmul family ----

    fn mm_dims(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// C = A B with A [m,k], B [k,n].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.mm_dims(other, "matmul")?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut c = vec![0.0; m * n];
        mm_nn(m, k, n, &self.data, &other.data, &mut c);
        Ok(Tensor {
            shape: vec![m, n],
            data: c,
        })
    }

    /// C = A Bᵀ with A [m,k], B [n,k].
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        self.mm_dims(other, "matmul_nt")?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (n, k2) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        // The streaming nn kernel beats any direct nt loop here by ~2x, so
        // pay for one blocked transpose and reuse it.
        let bt = other.transposed();
        let mut c = vec![0.0; m * n];
        mm_nn(m, k, n, &self.data, &bt.data, &mut c);
        Ok(Tensor {
            shape: vec![m, n],
            data: c,
        })
    }

    /// C = Aᵀ B with A [k,m], B [k,n].
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        self.mm_dims(other, "matmul_tn")?;
        let (k, m) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_tn",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut c = vec![0.0; m * n];
        mm_tn(m, k, n, &self.data, &other.data, &mut c);
        Ok(Tensor {
            shape: vec![m, n],
            data: c,
        })
    }

    pub fn transposed(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        // 8x8 tiles keep both the reads and the writes within cache lines.
        const T: usize = 8;
        for ib in (0..r).step_by(T) {
            for jb in (0..c).step_by(T) {
                for i in ib..(ib + T).min(r) {
                    for j in jb..(jb + T).min(c) {
                        out[j * r + i] = self.data[i * c + j];
                    }
                }
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }
}

/// y += a * x. The bread-and-butter kernel of the matmul family.
#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += a * xi;
    }
}

// The three kernels below process four rows at a time; the row reuse of the
// streamed operand is what lifts them from ~8 to ~11-15 GFLOP/s on one core,
// which training feasibility depends on.

fn mm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let mut i = 0;
    while i + 4 <= m {
        let (c01, c23) = c[i * n..(i + 4) * n].split_at_mut(2 * n);
        let (c0, c1) = c01.split_at_mut(n);
        let (c2, c3) = c23.split_at_mut(n);
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        for l in 0..k {
            let brow = &b[l * n..(l + 1) * n];
            let (x0, x1, x2, x3) = (a0[l], a1[l], a2[l], a3[l]);
            for j in 0..n {
                let bv = brow[j];
                c0[j] += x0 * bv;
                c1[j] += x1 * bv;
                c2[j] += x2 * bv;
                c3[j] += x3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (l, &ail) in arow.iter().enumerate() {
            axpy(crow, ail, &b[l * n..(l + 1) * n]);
        }
        i += 1;
    }
}

fn mm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let mut l = 0;
    while l + 4 <= k {
        let a0 = &a[l * m..(l + 1) * m];
        let a1 = &a[(l + 1) * m..(l + 2) * m];
        let a2 = &a[(l + 2) * m..(l + 3) * m];
        let a3 = &a[(l + 3) * m..(l + 4) * m];
        let b0 = &b[l * n..(l + 1) * n];
        let b1 = &b[(l + 1) * n..(l + 2) * n];
        let b2 = &b[(l + 2) * n..(l + 3) * n];
        let b3 = &b[(l + 3) * n..(l + 4) * n];
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            let (x0, x1, x2, x3) = (a0[i], a1[i], a2[i], a3[i]);
            for j in 0..n {
                crow[j] += x0 * b0[j] + x1 * b1[j] + x2 * b2[j] + x3 * b3[j];
            }
        }
        l += 4;
    }
    while l < k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &ali) in arow.iter().enumerate() {
            axpy(&mut c[i * n..(i + 1) * n], ali, brow);
        }
        l += 1;
    }
}

/// Dot product with eight-lane accumulation so the reduction vectorizes.
#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [0.0f64; 8];
    let mut xc = x.chunks_exact(8);
    let mut yc = y.chunks_exact(8);
    for (xb, yb) in (&mut xc).zip(&mut yc) {
        for i in 0..8 {
            acc[i] += xb[i] * yb[i];
        }
    }
    let mut s = acc.iter().sum::<f64>();
    for (xi, yi) in xc.remainder().iter().zip(yc.remainder()) {
        s += xi * yi;
    }
    s
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// SiLU activation x * sigmoid(x).
#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Derivative of SiLU.
#[inline]
pub fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut c = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a.data()[i * k + l] * b.data()[l * n + j];
                }
                c.data_mut()[i * n + j] = s;
            }
        }
        c
    }

    fn filled(shape: &[usize], seed: u64) -> Tensor {
        // Cheap deterministic fill; distribution quality is irrelevant here.
        let n: usize = shape.iter().product();
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        let data = (0..n)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state as f64 / u64::MAX as f64) - 0.5
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_shape_law() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 1]);
        assert_eq!(a.matmul(&b).unwrap().shape(), &[2, 1]);
    }

    #[test]
    fn matmul_matches_naive() {
        let a = filled(&[7, 13], 1);
        let b = filled(&[13, 9], 2);
        let c = a.matmul(&b).unwrap();
        let c0 = naive_matmul(&a, &b);
        for (x, y) in c.data().iter().zip(c0.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_nt_tn_match_explicit_transpose() {
        let a = filled(&[6, 11], 3);
        let b = filled(&[8, 11], 4);
        let c1 = a.matmul_nt(&b).unwrap();
        let c2 = a.matmul(&b.transposed()).unwrap();
        for (x, y) in c1.data().iter().zip(c2.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let a = filled(&[11, 6], 5);
        let b = filled(&[11, 8], 6);
        let c1 = a.matmul_tn(&b).unwrap();
        let c2 = a.transposed().matmul(&b).unwrap();
        for (x, y) in c1.data().iter().zip(c2.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 1]);
        assert!(matches!(
            a.matmul(&b),
            Err(Error::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn silu_at_zero_is_zero() {
        assert_eq!(silu(0.0), 0.0);
    }

    #[test]
    fn silu_prime_matches_finite_difference() {
        for &x in &[-2.0, -0.3, 0.0, 0.7, 1.9] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((silu_prime(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn bias_add_and_col_mean() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(vec![10.0, 20.0, 30.0]);
        let c = a.add_bias(&b).unwrap();
        assert_eq!(c.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let m = a.col_mean();
        assert_eq!(m.shape(), &[1, 3]);
        assert_eq!(m.data(), &[2.5, 3.5, 4.5]);
    }

    #[test]
    fn throughput_is_adequate_for_training() {
        // Training feasibility hinges on this kernel; keep a coarse floor so a
        // performance regression shows up as a test failure rather than a
        // mysteriously slow acceptance suite.
        let a = filled(&[256, 786], 7);
        let b = filled(&[786, 512], 8);
        let mut sink = 0.0;
        let t0 = std::time::Instant::now();
        let reps = 20;
        for _ in 0..reps {
            let c = a.matmul(&b).unwrap();
            sink += c.data()[0];
        }
        let secs = t0.elapsed().as_secs_f64();
        let gflops = (2.0 * 256.0 * 786.0 * 512.0 * reps as f64) / secs / 1e9;
        assert!(sink.is_finite());
        assert!(
            gflops > 2.0,
            "matmul throughput {gflops:.2} GFLOP/s is too low to train the models"
        );
    }
}
