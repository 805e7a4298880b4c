//! Small shared numeric helpers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Compensated (Neumaier) summation; keeps loss traces stable enough for
/// tight monotonicity checks.
pub fn neumaier_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn gaussian_vector(len: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

/// Concatenates per-block factor matrices into one `rows × Σ L_r` matrix.
pub fn concat_blocks(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    DMatrix::from_columns(&blocks.iter().flat_map(|m| m.column_iter()).collect::<Vec<_>>())
}

/// Splits a `rows × L·R` matrix into R blocks of L columns.
pub fn split_blocks(m: &DMatrix<f64>, l: usize, r: usize) -> Result<Vec<DMatrix<f64>>> {
    if m.ncols() != l * r {
        return Err(Error::Dim(format!(
            "cannot split {} columns into {r} blocks of {l}",
            m.ncols()
        )));
    }
    Ok((0..r).map(|b| m.columns(b * l, l).into_owned()).collect())
}

/// Cholesky factorization of a symmetric positive-definite matrix, with an
/// explicit error instead of a panic on failure.
pub fn cholesky_spd(m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m).ok_or_else(|| {
        Error::Numerical(
            "Cholesky factorization failed; coefficient matrix is not positive definite \
             (regularization λ > 0 guarantees definiteness)"
                .into(),
        )
    })
}

/// Solves `x G = rhs` for a row vector `x`, i.e. `Gᵀ xᵀ = rhsᵀ`, using a
/// prefactorized symmetric `G`.
pub fn solve_row(chol: &Cholesky<f64, Dyn>, rhs: &DVector<f64>) -> DVector<f64> {
    chol.solve(rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn neumaier_handles_cancellation() {
        let vals = [1e16, 1.0, -1e16];
        assert_eq!(neumaier_sum(vals.into_iter()), 1.0);
    }

    #[test]
    fn concat_split_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let blocks = vec![gaussian_matrix(4, 2, &mut rng), gaussian_matrix(4, 2, &mut rng)];
        let cat = concat_blocks(&blocks);
        let back = split_blocks(&cat, 2, 2).unwrap();
        assert_eq!(back, blocks);
    }

    #[test]
    fn cholesky_solve_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = gaussian_matrix(5, 5, &mut rng);
        let spd = &g * g.transpose() + DMatrix::identity(5, 5);
        let rhs = gaussian_vector(5, &mut rng);
        let chol = cholesky_spd(spd.clone()).unwrap();
        let x = solve_row(&chol, &rhs);
        let back = &spd * &x;
        for i in 0..5 {
            assert_relative_eq!(back[i], rhs[i], max_relative = 1e-10);
        }
    }
}
