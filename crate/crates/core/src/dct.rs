//! Orthonormal DCT-II / DCT-III along the time axis of each coordinate column.

use crate::error::{Error, Result};
use crate::motion::Matrix;

/// Frequency-domain trajectories: `coeffs` is `F x width`, one column of
/// DCT coefficients per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct DctCoeffs {
    coeffs: Matrix,
    original_length: usize,
}

impl DctCoeffs {
    pub fn new(coeffs: Matrix, original_length: usize) -> Result<Self> {
        if coeffs.rows() == 0 || coeffs.rows() > original_length {
            return Err(Error::range(format!(
                "{} coefficients for a length-{original_length} signal",
                coeffs.rows()
            )));
        }
        if !coeffs.is_finite() {
            return Err(Error::Numeric("non-finite DCT coefficient".into()));
        }
        Ok(DctCoeffs {
            coeffs,
            original_length,
        })
    }

    pub fn coeffs(&self) -> &Matrix {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Matrix {
        self.coeffs
    }

    pub fn original_length(&self) -> usize {
        self.original_length
    }

    pub fn num_coeffs(&self) -> usize {
        self.coeffs.rows()
    }

    pub fn truncated(&self) -> bool {
        self.coeffs.rows() < self.original_length
    }
}

/// Orthonormal DCT-II basis: `C[k][t] = s(k) cos(pi (2t+1) k / 2n)` with
/// `s(0) = sqrt(1/n)` and `s(k) = sqrt(2/n)` otherwise. Row `k` is the
/// `k`-th basis vector, so `C * x` is the forward transform and `C^T * a`
/// the inverse.
pub fn dct_matrix(n: usize) -> Matrix {
    let nf = n as f64;
    Matrix::from_fn(n, n, |k, t| {
        let scale = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        scale * (std::f64::consts::PI * (2 * t + 1) as f64 * k as f64 / (2.0 * nf)).cos()
    })
}

pub fn dct_encode(data: &Matrix, num_coeffs: usize) -> Result<DctCoeffs> {
    let n = data.rows();
    if num_coeffs == 0 || num_coeffs > n {
        return Err(Error::range(format!(
            "requested {num_coeffs} coefficients from a length-{n} signal"
        )));
    }
    let basis = dct_matrix(n);
    let cols = data.cols();
    let mut out = Matrix::zeros(num_coeffs, cols);
    for k in 0..num_coeffs {
        let b = basis.row(k);
        let dst = out.row_mut(k);
        for (t, &w) in b.iter().enumerate() {
            for (d, &x) in dst.iter_mut().zip(data.row(t)) {
                *d += w * x;
            }
        }
    }
    DctCoeffs::new(out, n)
}

pub fn idct_decode(coeffs: &DctCoeffs, out_length: usize) -> Result<Matrix> {
    if out_length != coeffs.original_length {
        return Err(Error::range(format!(
            "decode length {out_length} differs from encoded length {}",
            coeffs.original_length
        )));
    }
    let basis = dct_matrix(out_length);
    let c = &coeffs.coeffs;
    let mut out = Matrix::zeros(out_length, c.cols());
    // missing high-frequency rows are implicitly zero
    for k in 0..c.rows() {
        let b = basis.row(k);
        let src = c.row(k);
        for (t, &w) in b.iter().enumerate() {
            for (d, &a) in out.row_mut(t).iter_mut().zip(src) {
                *d += w * a;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    /// Direct cosine sum, independent of `dct_matrix`.
    fn brute_dct(x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        (0..x.len())
            .map(|k| {
                let sum: f64 = x
                    .iter()
                    .enumerate()
                    .map(|(t, &v)| v * (PI / n * (t as f64 + 0.5) * k as f64).cos())
                    .sum();
                let norm = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                norm * sum
            })
            .collect()
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn constant_column_is_pure_dc() {
        let x = Matrix::from_fn(8, 1, |_, _| 3.5);
        let a = dct_encode(&x, 8).unwrap();
        assert!((a.coeffs().get(0, 0) - 3.5 * 8f64.sqrt()).abs() < 1e-12);
        for k in 1..8 {
            assert!(a.coeffs().get(k, 0).abs() < 1e-12);
        }
        let back = idct_decode(&a, 8).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn zero_in_zero_out() {
        let a = dct_encode(&Matrix::zeros(6, 4), 6).unwrap();
        assert!(a.coeffs().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_brute_force() {
        let x = random(8, 1, 11);
        let a = dct_encode(&x, 8).unwrap();
        let expected = brute_dct(&x.column(0));
        for k in 0..8 {
            assert!((a.coeffs().get(k, 0) - expected[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn truncation_error_is_dropped_energy() {
        let x = Matrix::from_fn(16, 1, |t, _| (2.0 * PI * t as f64 / 16.0 * 1.5).sin() + 0.3 * (t as f64 * 0.2).cos());
        let full = brute_dct(&x.column(0));
        let dropped: f64 = full[4..].iter().map(|v| v * v).sum();

        let a = dct_encode(&x, 4).unwrap();
        assert!(a.truncated());
        let rec = idct_decode(&a, 16).unwrap();
        let err: f64 = (0..16).map(|t| (rec.get(t, 0) - x.get(t, 0)).powi(2)).sum();
        assert!((err - dropped).abs() < 1e-10);

        // reconstruction equals the projection onto the first 4 basis vectors
        let basis = dct_matrix(16);
        for t in 0..16 {
            let proj: f64 = (0..4).map(|k| full[k] * basis.get(k, t)).sum();
            assert!((rec.get(t, 0) - proj).abs() < 1e-10);
        }
    }

    #[test]
    fn range_errors() {
        let x = random(5, 2, 0);
        assert!(matches!(dct_encode(&x, 6), Err(Error::Range(_))));
        assert!(matches!(dct_encode(&x, 0), Err(Error::Range(_))));
        let a = dct_encode(&x, 5).unwrap();
        assert!(matches!(idct_decode(&a, 4), Err(Error::Range(_))));
    }

    #[test]
    fn columns_are_independent() {
        let x = random(9, 5, 4);
        let a = dct_encode(&x, 9).unwrap();
        for c in 0..5 {
            let col = Matrix::from_vec(9, 1, x.column(c)).unwrap();
            let ac = dct_encode(&col, 9).unwrap();
            for k in 0..9 {
                assert_eq!(ac.coeffs().get(k, 0), a.coeffs().get(k, c));
            }
        }
    }

    proptest! {
        #[test]
        fn linear(seed in any::<u64>(), rows in 2usize..20, cols in 1usize..6, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let x = random(rows, cols, seed);
            let y = random(rows, cols, seed.wrapping_add(1));
            let combo = Matrix::from_fn(rows, cols, |r, c| a * x.get(r, c) + b * y.get(r, c));
            let lhs = dct_encode(&combo, rows).unwrap();
            let ex = dct_encode(&x, rows).unwrap();
            let ey = dct_encode(&y, rows).unwrap();
            for r in 0..rows {
                for c in 0..cols {
                    let rhs = a * ex.coeffs().get(r, c) + b * ey.coeffs().get(r, c);
                    prop_assert!((lhs.coeffs().get(r, c) - rhs).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn round_trip_and_parseval(seed in any::<u64>(), rows in 2usize..40, cols in 1usize..6) {
            let x = random(rows, cols, seed);
            let a = dct_encode(&x, rows).unwrap();
            prop_assert!(idct_decode(&a, rows).unwrap().max_abs_diff(&x) < 1e-9);
            for c in 0..cols {
                let ex: f64 = x.column(c).iter().map(|v| v * v).sum();
                let ea: f64 = a.coeffs().column(c).iter().map(|v| v * v).sum();
                prop_assert!((ex - ea).abs() <= 1e-8 * ex.max(1e-300));
            }
        }
    }
}
