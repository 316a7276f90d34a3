//! Dense containers, tile addressing and reduced-precision storage simulation.
//!
//! Every tensor holds `f64` values, but a [`Precision`] tag records the
//! storage format the values are confined to. Constructors quantize on the
//! way in, so a `SimBF16` matrix only ever holds values that are exactly
//! representable in bfloat16.

pub mod codt;
mod precision;
mod tile;

pub use precision::{quantize, Precision};
pub use tile::{tile_coords, TileCoord, TileRegion, TileShape};

use rand::Rng;

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    precision: Precision,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize, precision: Precision) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            precision,
        }
    }

    /// Builds a matrix from row-major data, rounding each value to `precision`.
    pub fn from_vec(rows: usize, cols: usize, mut data: Vec<f64>, precision: Precision) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        for v in &mut data {
            *v = precision.quantize(*v);
        }
        Ok(Self {
            rows,
            cols,
            data,
            precision,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, precision: Precision, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(precision.quantize(f(i, j)));
            }
        }
        Self {
            rows,
            cols,
            data,
            precision,
        }
    }

    pub fn identity(n: usize, precision: Precision) -> Self {
        Self::from_fn(n, n, precision, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    /// Uniform entries in `[-1, 1)`.
    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, precision: Precision, rng: &mut R) -> Self {
        Self::from_fn(rows, cols, precision, |_, _| rng.gen_range(-1.0..1.0))
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Writes `value` rounded to this matrix's precision.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = self.precision.quantize(value);
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Re-rounds every value into another storage format.
    pub fn to_precision(&self, precision: Precision) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| precision.quantize(v)).collect(),
            precision,
        }
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| self.precision.quantize(f(v))).collect(),
            precision: self.precision,
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Size of the tensor in its storage format.
    pub fn byte_size(&self) -> u64 {
        (self.data.len() * self.precision.storage_bytes()) as u64
    }
}

/// A dense vector broadcast over rows (length N, e.g. the RMSNorm weight) or
/// over columns (length M, e.g. the inverse-rms factor).
#[derive(Clone, Debug, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
    precision: Precision,
}

impl Vector {
    pub fn zeros(len: usize, precision: Precision) -> Self {
        Self {
            data: vec![0.0; len],
            precision,
        }
    }

    pub fn filled(len: usize, value: f64, precision: Precision) -> Self {
        Self {
            data: vec![precision.quantize(value); len],
            precision,
        }
    }

    pub fn from_vec(mut data: Vec<f64>, precision: Precision) -> Self {
        for v in &mut data {
            *v = precision.quantize(*v);
        }
        Self { data, precision }
    }

    pub fn random<R: Rng + ?Sized>(len: usize, precision: Precision, rng: &mut R) -> Self {
        Self::from_vec((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), precision)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    pub fn to_precision(&self, precision: Precision) -> Self {
        Self::from_vec(self.data.clone(), precision)
    }

    pub fn byte_size(&self) -> u64 {
        (self.data.len() * self.precision.storage_bytes()) as u64
    }

    /// Views the vector as a single-column matrix.
    pub fn to_column(&self) -> Matrix {
        Matrix {
            rows: self.data.len(),
            cols: 1,
            data: self.data.clone(),
            precision: self.precision,
        }
    }
}

/// `‖approx − reference‖_F / ‖reference‖_F`.
pub fn rel_error(approx: &Matrix, reference: &Matrix) -> Result<f64> {
    if approx.shape() != reference.shape() {
        return Err(Error::Dimension(format!(
            "rel_error on {:?} vs {:?}",
            approx.shape(),
            reference.shape()
        )));
    }
    let denom = reference.frobenius_norm();
    if denom == 0.0 {
        return Err(Error::DegenerateReference);
    }
    let num = approx
        .as_slice()
        .iter()
        .zip(reference.as_slice())
        .map(|(a, r)| (a - r) * (a - r))
        .sum::<f64>()
        .sqrt();
    Ok(num / denom)
}

/// [`rel_error`] for vectors, treating them as single columns.
pub fn rel_error_vec(approx: &Vector, reference: &Vector) -> Result<f64> {
    rel_error(&approx.to_column(), &reference.to_column())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rel_error_of_identical_inputs_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Matrix::random(3, 5, Precision::Exact64, &mut rng);
        assert_eq!(rel_error(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn rel_error_of_doubled_input_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Matrix::random(4, 4, Precision::Exact64, &mut rng);
        assert_eq!(rel_error(&x.scale(2.0), &x).unwrap(), 1.0);
    }

    #[test]
    fn rel_error_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::random(4, 4, Precision::Exact64, &mut rng);
        let b = Matrix::random(4, 4, Precision::Exact64, &mut rng);
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for i in 0..4 {
            for j in 0..4 {
                let d = a.get(i, j) - b.get(i, j);
                num += d * d;
                den += b.get(i, j) * b.get(i, j);
            }
        }
        let expected = (num / den).sqrt();
        let got = rel_error(&a, &b).unwrap();
        assert!((got - expected).abs() <= 1e-15 * expected);
    }

    #[test]
    fn rel_error_rejects_bad_inputs() {
        let a = Matrix::zeros(2, 2, Precision::Exact64);
        let b = Matrix::zeros(2, 3, Precision::Exact64);
        assert!(matches!(rel_error(&a, &b), Err(Error::Dimension(_))));
        assert!(matches!(rel_error(&a, &a), Err(Error::DegenerateReference)));
    }

    #[test]
    fn from_vec_checks_length_and_quantizes() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3], Precision::Exact64).is_err());
        let m = Matrix::from_vec(1, 1, vec![1.0 + 2f64.powi(-8)], Precision::SimBF16).unwrap();
        assert_eq!(m.get(0, 0), 1.0);
    }

    proptest::proptest! {
        #[test]
        fn rel_error_is_scale_consistent(seed in 0u64..1000, c in prop_oneof_scale()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Matrix::random(5, 3, Precision::Exact64, &mut rng);
            let b = Matrix::random(5, 3, Precision::Exact64, &mut rng);
            let base = rel_error(&a, &b).unwrap();
            let scaled = rel_error(&a.scale(c), &b.scale(c)).unwrap();
            // A power-of-two factor is exact; other factors perturb each
            // element by half an ulp, which the ratio can amplify slightly.
            proptest::prop_assert!((scaled - base).abs() <= 4.0 * f64::EPSILON * base);
        }
    }

    fn prop_oneof_scale() -> impl proptest::strategy::Strategy<Value = f64> {
        proptest::prop_oneof![
            proptest::sample::select(vec![-4.0, -0.5, 0.25, 2.0, 1024.0]),
            (0.1f64..10.0),
        ]
    }
}
