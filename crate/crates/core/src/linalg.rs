//! Small dense matrix/vector numerics and the seeded random generator.
//!
//! Everything here is double precision and deterministic. There is no BLAS,
//! no SIMD dispatch and no sparse storage; the shapes in this project are
//! tiny and the priority is bit-reproducibility across runs and platforms.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Dense vector of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    pub data: Vec<f64>,
}

/// Unit-norm feature vector produced by an encoder path.
pub type Embedding = Vector;

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vector]) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(Error::Empty { what: "from_rows" });
        }
        let c = rows[0].dim();
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.dim() != c {
                return Err(Error::DimMismatch {
                    op: "from_rows",
                    expected: c,
                    got: row.dim(),
                });
            }
            data.extend_from_slice(&row.data);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> Vector {
        Vector {
            data: self.data[r * self.cols..(r + 1) * self.cols].to_vec(),
        }
    }

    /// `self * x` for a column vector `x`.
    pub fn matvec(&self, x: &Vector) -> Result<Vector> {
        if x.dim() != self.cols {
            return Err(Error::DimMismatch {
                op: "matvec",
                expected: self.cols,
                got: x.dim(),
            });
        }
        let mut out = vec![0.0; self.rows];
        for (r, slot) in out.iter_mut().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x.data.iter()) {
                acc += a * b;
            }
            *slot = acc;
        }
        Ok(Vector { data: out })
    }

    /// `self^T * x`.
    pub fn matvec_t(&self, x: &Vector) -> Result<Vector> {
        if x.dim() != self.rows {
            return Err(Error::DimMismatch {
                op: "matvec_t",
                expected: self.rows,
                got: x.dim(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let xr = x.data[r];
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (o, a) in out.iter_mut().zip(row.iter()) {
                *o += a * xr;
            }
        }
        Ok(Vector { data: out })
    }

    /// Accumulates the outer product `g ⊗ x` into `self` (shape rows=|g|, cols=|x|).
    pub fn add_outer(&mut self, g: &Vector, x: &Vector) {
        debug_assert_eq!(self.rows, g.dim());
        debug_assert_eq!(self.cols, x.dim());
        for r in 0..self.rows {
            let gr = g.data[r];
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (slot, xv) in row.iter_mut().zip(x.data.iter()) {
                *slot += gr * xv;
            }
        }
    }

    /// Rounds every entry to the nearest `f32`, keeping storage in `f64`.
    ///
    /// Serialized tensors are 32-bit on disk; keeping live values on the
    /// `f32` grid makes save/load round-trips exact.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector { data: vec![0.0; dim] }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Vector { data: v.to_vec() }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn add(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.dim(), other.dim());
        Vector {
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector {
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a * b` with an explicit shape check.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: (a.rows, a.cols),
            right: (b.rows, b.cols),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.get(i, k);
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow.iter()) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(x: &Vector) -> Result<Vector> {
    if x.dim() == 0 {
        return Err(Error::Empty { what: "softmax" });
    }
    Ok(Vector {
        data: softmax_slice(&x.data),
    })
}

pub(crate) fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Indices of the `k` largest entries, ties broken toward the lowest index.
pub(crate) fn topk_indices(x: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    // Stable sort keeps the lowest index first among equal values.
    idx.sort_by(|&a, &b| x[b].partial_cmp(&x[a]).unwrap());
    let mut kept: Vec<usize> = idx.into_iter().take(k).collect();
    kept.sort_unstable();
    kept
}

/// Keeps the `k` largest entries of `w` unchanged and zeroes the rest.
///
/// No renormalization is applied to the retained entries.
pub fn topk_mask(w: &Vector, k: usize) -> Result<Vector> {
    if k == 0 || k > w.dim() {
        return Err(Error::invalid_arg(format!(
            "topk_mask: k={} out of range for dim {}",
            k,
            w.dim()
        )));
    }
    let kept = topk_indices(&w.data, k);
    let mut out = vec![0.0; w.dim()];
    for &i in &kept {
        out[i] = w.data[i];
    }
    Ok(Vector { data: out })
}

/// Cosine similarity, clamped to `[-1, 1]` against rounding spill.
pub fn cosine(a: &Vector, b: &Vector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            op: "cosine",
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm { op: "cosine" });
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Scales `v` to unit norm.
pub fn normalize(v: &Vector) -> Result<Vector> {
    let n = v.norm();
    if n == 0.0 {
        return Err(Error::ZeroNorm { op: "normalize" });
    }
    Ok(v.scale(1.0 / n))
}

/// Seeded, splittable pseudorandom generator.
///
/// Backed by ChaCha8; a `(seed, stream)` pair fully determines the sample
/// sequence on every platform. Gaussian samples come from the Box-Muller
/// transform over 53-bit uniforms, so they are reproducible bit for bit
/// independent of any distribution crate.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream derived from the same seed. Each logical consumer
    /// (weight init, batch sampling, clustering, ...) gets its own stream id.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` via widening multiply.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller. One sample per call; the paired
    /// sample is discarded to keep the stream layout simple.
    pub fn gaussian(&mut self) -> f64 {
        let mut u1 = self.uniform();
        if u1 == 0.0 {
            u1 = f64::MIN_POSITIVE;
        }
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Matrix with i.i.d. Gaussian(0, scale^2) entries, rounded to the f32 grid.
    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, scale: f64) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for v in &mut m.data {
            *v = self.gaussian() * scale;
        }
        m.quantize_f32();
        m
    }

    pub fn gaussian_vector(&mut self, dim: usize, scale: f64) -> Vector {
        let mut v = Vector::zeros(dim);
        for x in &mut v.data {
            *x = self.gaussian() * scale;
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_vec(rng: &mut Rng, dim: usize) -> Vector {
        rng.gaussian_vector(dim, 1.0)
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut rng = Rng::new(7);
        let m = rng.gaussian_matrix(3, 3, 1.0);
        let id = Matrix::identity(3);
        assert_eq!(matmul(&id, &m).unwrap(), m);
        let z = Matrix::zeros(3, 4);
        let prod = matmul(&m, &z).unwrap();
        assert!(prod.data.iter().all(|&v| v == 0.0));
        assert_eq!((prod.rows, prod.cols), (3, 4));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = Rng::new(11);
        let a = rng.gaussian_matrix(3, 4, 1.0);
        let b = rng.gaussian_matrix(4, 2, 1.0);
        let got = matmul(&a, &b).unwrap();
        // Independent element-wise oracle.
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                assert!((got.get(i, j) - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_known_values() {
        let s = softmax(&Vector::from_slice(&[0.0, 0.0])).unwrap();
        assert!((s.data[0] - 0.5).abs() < 1e-15);
        assert!((s.data[1] - 0.5).abs() < 1e-15);

        // Frozen from a direct high-precision evaluation of e^x / sum.
        let s = softmax(&Vector::from_slice(&[1.0, 2.0, 3.0])).unwrap();
        let expect = [0.090_030_573_17, 0.244_728_471_05, 0.665_240_955_77];
        for (got, want) in s.data.iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(softmax(&Vector::zeros(0)).is_err());
    }

    #[test]
    fn topk_known_cases() {
        let w = Vector::from_slice(&[0.5, 0.3, 0.2]);
        assert_eq!(topk_mask(&w, 2).unwrap().data, vec![0.5, 0.3, 0.0]);
        assert_eq!(topk_mask(&w, 3).unwrap().data, w.data);
        // Tie broken toward the lowest index.
        let w = Vector::from_slice(&[0.4, 0.4, 0.2]);
        assert_eq!(topk_mask(&w, 1).unwrap().data, vec![0.4, 0.0, 0.0]);
        assert!(topk_mask(&w, 0).is_err());
        assert!(topk_mask(&w, 4).is_err());
    }

    #[test]
    fn cosine_basics() {
        let v = Vector::from_slice(&[1.0, 2.0, -3.0]);
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        let a = Vector::from_slice(&[1.0, 0.0]);
        let b = Vector::from_slice(&[0.0, 1.0]);
        assert_eq!(cosine(&a, &b).unwrap(), 0.0);
        assert!(cosine(&a, &Vector::zeros(2)).is_err());

        let mut rng = Rng::new(3);
        let a = rand_vec(&mut rng, 8);
        let b = rand_vec(&mut rng, 8);
        let direct = a.dot(&b) / (a.norm() * b.norm());
        assert!((cosine(&a, &b).unwrap() - direct).abs() <= 1e-12);
    }

    #[test]
    fn normalize_basics() {
        let v = normalize(&Vector::from_slice(&[3.0, 4.0])).unwrap();
        assert!((v.data[0] - 0.6).abs() < 1e-15);
        assert!((v.data[1] - 0.8).abs() < 1e-15);
        let u = normalize(&v).unwrap();
        for (a, b) in u.data.iter().zip(v.data.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(normalize(&Vector::zeros(3)).is_err());
    }

    #[test]
    fn rng_fixed_seed_reproduces_bit_exact() {
        let mut a = Rng::stream(42, 3);
        let mut b = Rng::stream(42, 3);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.gaussian().to_bits(), b.gaussian().to_bits());
        }
        // Distinct streams diverge.
        let mut a = Rng::stream(42, 0);
        let mut b = Rng::stream(42, 1);
        assert_ne!(a.next_u64(), b.next_u64());
    }
}
