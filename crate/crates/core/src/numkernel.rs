//! Minimal dense numeric kernel: row-major `f64` matrices and image tensors,
//! matrix multiply with a fixed accumulation order, temperature softmax and
//! reductions. Everything the attention math needs, nothing more.
//!
//! All operations are pure and the accumulation orders are fixed, so results
//! are bit-reproducible across runs and platforms.

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Matrix::new",
                format!("{}x{} needs {} entries, got {}", rows, cols, rows * cols, data.len()),
            ));
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Extract one column as a vector.
    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Kernel operations
// ---------------------------------------------------------------------------

/// Standard matrix product with a fixed `(i, j, k)` loop order.
///
/// The inner accumulation runs over `k` in increasing order with a single
/// scalar accumulator, so the result is bit-stable for identical inputs.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::dim(
            "matmul",
            format!("{}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a.data[i * a.cols + k] * b.data[k * b.cols + j];
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    Ok(out)
}

/// Row-wise softmax of `temperature * s`, with per-row max subtraction.
///
/// `softmax_rows(s, a)` equals `softmax_rows(a * s, 1.0)` exactly: the
/// temperature is applied entry-wise first and both paths then share the
/// same exponentiation and normalization code.
pub fn softmax_rows(s: &Matrix, temperature: f64) -> Result<Matrix> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::arg(
            "softmax_rows",
            format!("temperature must be positive and finite, got {temperature}"),
        ));
    }
    if !s.is_finite() {
        return Err(Error::NonFinite { op: "softmax_rows" });
    }
    if s.cols == 0 {
        return Err(Error::Empty { op: "softmax_rows" });
    }
    let scaled = if temperature == 1.0 { s.clone() } else { s.scale(temperature) };
    let mut out = scaled;
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Arithmetic mean over every entry.
pub fn mean_all(s: &Matrix) -> Result<f64> {
    if s.data.is_empty() {
        return Err(Error::Empty { op: "mean_all" });
    }
    let mut sum = 0.0;
    for v in &s.data {
        sum += v;
    }
    Ok(sum / s.data.len() as f64)
}

/// Mean of a slice; helper for mask thresholds.
pub fn mean_slice(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Empty { op: "mean_slice" });
    }
    let mut sum = 0.0;
    for x in v {
        sum += x;
    }
    Ok(sum / v.len() as f64)
}

// ---------------------------------------------------------------------------
// Image tensor
// ---------------------------------------------------------------------------

/// Dense `[channels, height, width]` tensor of 64-bit floats. Latents,
/// predicted noises and composed images all use this shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::dim(
                "Tensor::new",
                format!(
                    "[{channels},{height},{width}] needs {} entries, got {}",
                    channels * height * width,
                    data.len()
                ),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![v; channels * height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
    }

    /// Elementwise `self + factor * other`.
    pub fn add_scaled(&self, other: &Tensor, factor: f64) -> Result<Tensor> {
        if !self.same_shape(other) {
            return Err(Error::dim(
                "Tensor::add_scaled",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + factor * b)
            .collect();
        Ok(Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn clamp01(&self) -> Tensor {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------------
// Correlation
// ---------------------------------------------------------------------------

/// Normalized cross-correlation between two equal-length slices restricted to
/// the indices in `support`. Both sides are centered on their support means.
/// Returns 0 when either side is constant on the support.
pub fn masked_ncc(image: &[f64], template: &[f64], support: &[usize]) -> f64 {
    if support.is_empty() {
        return 0.0;
    }
    let n = support.len() as f64;
    let mut mi = 0.0;
    let mut mt = 0.0;
    for &i in support {
        mi += image[i];
        mt += template[i];
    }
    mi /= n;
    mt /= n;
    let mut cov = 0.0;
    let mut vi = 0.0;
    let mut vt = 0.0;
    for &i in support {
        let a = image[i] - mi;
        let b = template[i] - mt;
        cov += a * b;
        vi += a * a;
        vt += b * b;
    }
    if vi <= 0.0 || vt <= 0.0 {
        return 0.0;
    }
    cov / (vi.sqrt() * vt.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn seeded_matrix(seed: u64, rows: usize, cols: usize) -> Matrix {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-3.0..3.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    /// Independent naive triple-loop product, same (i, j, k) order as the
    /// kernel but written from the definition.
    fn matmul_oracle(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_case() {
        let i = Matrix::identity(2);
        let b = Matrix::new(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(matmul(&i, &b).unwrap(), b);
        assert_eq!(matmul(&b, &i).unwrap(), b);
    }

    #[test]
    fn matmul_hand_computed() {
        let a = Matrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Matrix::new(2, 1, vec![3.0, 4.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_oracle_bitwise() {
        for seed in 0..20 {
            let a = seeded_matrix(seed, 8, 4);
            let b = seeded_matrix(seed + 1000, 4, 8);
            let got = matmul(&a, &b).unwrap();
            let want = matmul_oracle(&a, &b);
            // 0 ULP: identical accumulation order must give identical bits.
            for (g, w) in got.data().iter().zip(want.data()) {
                assert_eq!(g.to_bits(), w.to_bits());
            }
        }
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_uniform_row() {
        let s = Matrix::new(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        for temp in [0.3, 1.0, 2.5] {
            let p = softmax_rows(&s, temp).unwrap();
            for v in p.data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_lower_temperature_flattens() {
        let s = Matrix::new(1, 2, vec![10.0, 0.0]).unwrap();
        let p1 = softmax_rows(&s, 1.0).unwrap();
        let p05 = softmax_rows(&s, 0.5).unwrap();
        assert!(p05.get(0, 0) < p1.get(0, 0));
    }

    #[test]
    fn softmax_matches_direct_exponentiation() {
        let s = Matrix::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let p = softmax_rows(&s, 1.0).unwrap();
        // Direct exp/sum oracle, no max subtraction.
        let exps: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (got, e) in p.data().iter().zip(&exps) {
            assert!((got - e / sum).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_bad_inputs() {
        let s = Matrix::new(1, 2, vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(
            softmax_rows(&s, 1.0),
            Err(Error::NonFinite { .. })
        ));
        let ok = Matrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(softmax_rows(&ok, 0.0).is_err());
        assert!(softmax_rows(&ok, -1.0).is_err());
    }

    #[test]
    fn mean_all_hand_cases() {
        let a = Matrix::new(1, 1, vec![2.0]).unwrap();
        assert_eq!(mean_all(&a).unwrap(), 2.0);
        let b = Matrix::new(2, 2, vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(mean_all(&b).unwrap(), 4.0);
        let empty = Matrix::new(0, 4, vec![]).unwrap();
        assert!(matches!(mean_all(&empty), Err(Error::Empty { .. })));
    }

    #[test]
    fn mean_all_matches_kahan_oracle() {
        let m = seeded_matrix(42, 16, 8);
        // Kahan-compensated summation oracle.
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for v in m.data() {
            let y = v - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        let want = sum / m.data().len() as f64;
        assert!((mean_all(&m).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn ncc_self_and_orthogonal() {
        let t = [1.0, -1.0, 0.5, -0.5];
        let support = [0usize, 1, 2, 3];
        assert!((masked_ncc(&t, &t, &support) - 1.0).abs() < 1e-12);
        let flat = [2.0, 2.0, 2.0, 2.0];
        assert_eq!(masked_ncc(&flat, &t, &support), 0.0);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            rows in 1usize..6,
            cols in 1usize..8,
            temp in 0.05f64..3.0,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let s = Matrix::new(rows, cols, data).unwrap();
            let p = softmax_rows(&s, temp).unwrap();
            for r in 0..rows {
                let sum: f64 = p.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(p.row(r).iter().all(|v| *v >= 0.0));
            }
        }

        #[test]
        fn softmax_temperature_is_prescaling(
            cols in 2usize..8,
            temp in 0.05f64..3.0,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..cols).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let s = Matrix::new(1, cols, data).unwrap();
            let a = softmax_rows(&s, temp).unwrap();
            let b = softmax_rows(&s.scale(temp), 1.0).unwrap();
            // Definitional identity: exact, both paths share the same code
            // after the entry-wise scaling.
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }

        #[test]
        fn softmax_max_prob_decreases_with_temperature(
            cols in 2usize..8,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut data: Vec<f64> = (0..cols).map(|_| rng.gen_range(-5.0..5.0)).collect();
            // Force a strict maximum.
            data[0] = 6.0;
            let s = Matrix::new(1, cols, data).unwrap();
            let mut last = f64::INFINITY;
            for temp in [1.0, 0.8, 0.6, 0.4, 0.2] {
                let p = softmax_rows(&s, temp).unwrap();
                let mx = p.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(mx < last);
                last = mx;
            }
        }
    }
}
