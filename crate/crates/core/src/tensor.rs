//! Dense third-order tensor algebra: LL1 synthesis, mode-n unfoldings,
//! mode products, and Khatri-Rao operations.
//!
//! Conventions (fixed once, used everywhere):
//! * `Tensor3` stores element `(i, j, k)` at linear position `(k*J + j)*I + i`.
//! * All vectorizations are column-major, so the unfolding identities
//!   `X1 = (C ⊙p B) Aᵀ`, `X2 = (C ⊙p A) Bᵀ`, `X3 = S Cᵀ` hold exactly
//!   for synthesized tensors.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Dense I×J×K tensor of received power over space × space × frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: (usize, usize, usize),
    data: Vec<f64>,
}

impl Tensor3 {
    /// Builds a tensor from its linear data, element `(i,j,k)` at `(k*J + j)*I + i`.
    pub fn new(dims: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        let (i, j, k) = dims;
        if i == 0 || j == 0 || k == 0 {
            return Err(Error::Dim(format!("tensor dims must be positive, got {dims:?}")));
        }
        if data.len() != i * j * k {
            return Err(Error::Dim(format!(
                "data length {} does not match dims {dims:?} (expected {})",
                data.len(),
                i * j * k
            )));
        }
        let t = Self { dims, data };
        t.check_finite()?;
        Ok(t)
    }

    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        Self { dims, data: vec![0.0; dims.0 * dims.1 * dims.2] }
    }

    pub fn from_fn(dims: (usize, usize, usize), mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let (ni, nj, nk) = dims;
        let mut data = vec![0.0; ni * nj * nk];
        for k in 0..nk {
            for j in 0..nj {
                for i in 0..ni {
                    data[(k * nj + j) * ni + i] = f(i, j, k);
                }
            }
        }
        Self::new(dims, data)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims.1 + j) * self.dims.0 + i
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.index(i, j, k);
        self.data[idx] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn norm_squared(&self) -> f64 {
        crate::linalg::neumaier_sum(self.data.iter().map(|v| v * v))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    /// Sum of absolute values of all entries.
    pub fn l1_norm(&self) -> f64 {
        crate::linalg::neumaier_sum(self.data.iter().map(|v| v.abs()))
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numerical("tensor contains non-finite entries".into()))
        }
    }

    /// Frontal slab `X(:,:,k)` as an I×J matrix.
    pub fn frontal_slab(&self, k: usize) -> DMatrix<f64> {
        let (ni, nj, _) = self.dims;
        let start = k * ni * nj;
        DMatrix::from_column_slice(ni, nj, &self.data[start..start + ni * nj])
    }

    /// Extracts the subtensor `X(sel_i, sel_j, sel_k)` by direct slicing.
    pub fn subtensor(&self, sel_i: &[usize], sel_j: &[usize], sel_k: &[usize]) -> Result<Tensor3> {
        let (ni, nj, nk) = self.dims;
        check_indices(sel_i, ni, "first")?;
        check_indices(sel_j, nj, "second")?;
        check_indices(sel_k, nk, "third")?;
        Tensor3::from_fn((sel_i.len(), sel_j.len(), sel_k.len()), |a, b, c| {
            self.get(sel_i[a], sel_j[b], sel_k[c])
        })
    }
}

fn check_indices(sel: &[usize], bound: usize, which: &str) -> Result<()> {
    if sel.is_empty() {
        return Err(Error::Validation(format!("empty index set along {which} mode")));
    }
    if let Some(&bad) = sel.iter().find(|&&x| x >= bound) {
        return Err(Error::Validation(format!(
            "index {bad} out of range along {which} mode (size {bound})"
        )));
    }
    Ok(())
}

/// Unfolding mode of a third-order tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    One,
    Two,
    Three,
}

impl Mode {
    pub fn from_index(m: usize) -> Result<Self> {
        match m {
            1 => Ok(Mode::One),
            2 => Ok(Mode::Two),
            3 => Ok(Mode::Three),
            _ => Err(Error::Usage(format!("invalid unfolding mode {m}, expected 1, 2, or 3"))),
        }
    }
}

/// A mode-n unfolding together with the dims it came from.
#[derive(Debug, Clone)]
pub struct UnfoldedTensor {
    pub mode: Mode,
    pub matrix: DMatrix<f64>,
    pub origin_dims: (usize, usize, usize),
}

/// Mode-n unfolding.
///
/// Mode 1 is JK×I with column i = vec(X(i,:,:)); mode 2 is IK×J; mode 3 is
/// IJ×K with column k the column-major vectorized frontal slab.
pub fn unfold(t: &Tensor3, mode: Mode) -> UnfoldedTensor {
    let (ni, nj, nk) = t.dims();
    let matrix = match mode {
        Mode::One => DMatrix::from_fn(nj * nk, ni, |row, i| {
            let (k, j) = (row / nj, row % nj);
            t.get(i, j, k)
        }),
        Mode::Two => DMatrix::from_fn(ni * nk, nj, |row, j| {
            let (k, i) = (row / ni, row % ni);
            t.get(i, j, k)
        }),
        // The storage layout is exactly the mode-3 unfolding.
        Mode::Three => DMatrix::from_column_slice(ni * nj, nk, t.data()),
    };
    UnfoldedTensor { mode, matrix, origin_dims: t.dims() }
}

/// Exact inverse of [`unfold`].
pub fn fold(matrix: &DMatrix<f64>, mode: Mode, dims: (usize, usize, usize)) -> Result<Tensor3> {
    let (ni, nj, nk) = dims;
    let expected = match mode {
        Mode::One => (nj * nk, ni),
        Mode::Two => (ni * nk, nj),
        Mode::Three => (ni * nj, nk),
    };
    if matrix.shape() != expected {
        return Err(Error::Dim(format!(
            "fold: matrix shape {:?} inconsistent with mode {mode:?} and dims {dims:?} (expected {expected:?})",
            matrix.shape()
        )));
    }
    match mode {
        Mode::One => Tensor3::from_fn(dims, |i, j, k| matrix[(k * nj + j, i)]),
        Mode::Two => Tensor3::from_fn(dims, |i, j, k| matrix[(k * ni + i, j)]),
        Mode::Three => Tensor3::new(dims, matrix.as_slice().to_vec()),
    }
}

impl UnfoldedTensor {
    pub fn fold(&self) -> Result<Tensor3> {
        fold(&self.matrix, self.mode, self.origin_dims)
    }
}

/// Mode-n product `X ×_n M`, contracting the chosen mode with the rows of `M`.
pub fn mode_product(t: &Tensor3, m: &DMatrix<f64>, mode: Mode) -> Result<Tensor3> {
    let (ni, nj, nk) = t.dims();
    let inner = match mode {
        Mode::One => ni,
        Mode::Two => nj,
        Mode::Three => nk,
    };
    if m.ncols() != inner {
        return Err(Error::Dim(format!(
            "mode product: matrix has {} columns but tensor extent along mode {mode:?} is {inner}",
            m.ncols()
        )));
    }
    let out = m.nrows();
    match mode {
        Mode::One => Tensor3::from_fn((out, nj, nk), |a, j, k| {
            (0..ni).map(|i| t.get(i, j, k) * m[(a, i)]).sum()
        }),
        Mode::Two => Tensor3::from_fn((ni, out, nk), |i, a, k| {
            (0..nj).map(|j| t.get(i, j, k) * m[(a, j)]).sum()
        }),
        Mode::Three => Tensor3::from_fn((ni, nj, out), |i, j, a| {
            (0..nk).map(|k| t.get(i, j, k) * m[(a, k)]).sum()
        }),
    }
}

/// Per-emitter factors of the rank-(L,L,1) block-term model: R spatial pairs
/// `(A_r ∈ I×L_r, B_r ∈ J×L_r)` and the power-spectrum matrix `C ∈ K×R`.
#[derive(Debug, Clone)]
pub struct Ll1Factors {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub c: DMatrix<f64>,
}

impl Ll1Factors {
    pub fn new(a: Vec<DMatrix<f64>>, b: Vec<DMatrix<f64>>, c: DMatrix<f64>) -> Result<Self> {
        let f = Self { a, b, c };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.c.ncols();
        if self.a.len() != r || self.b.len() != r {
            return Err(Error::Dim(format!(
                "factor list lengths (A: {}, B: {}) must equal the column count of C ({r})",
                self.a.len(),
                self.b.len()
            )));
        }
        if r == 0 {
            return Err(Error::Dim("at least one block term required".into()));
        }
        let (ni, nj) = (self.a[0].nrows(), self.b[0].nrows());
        for (idx, (ar, br)) in self.a.iter().zip(&self.b).enumerate() {
            if ar.nrows() != ni {
                return Err(Error::Dim(format!("A_{idx} has {} rows, expected {ni}", ar.nrows())));
            }
            if br.nrows() != nj {
                return Err(Error::Dim(format!("B_{idx} has {} rows, expected {nj}", br.nrows())));
            }
            if ar.ncols() != br.ncols() {
                return Err(Error::Dim(format!(
                    "A_{idx} has {} columns but B_{idx} has {}",
                    ar.ncols(),
                    br.ncols()
                )));
            }
            if ar.ncols() == 0 {
                return Err(Error::Dim(format!("block {idx} has zero rank")));
            }
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.c.ncols()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.a.iter().map(|m| m.ncols()).collect()
    }

    /// Block rank when all blocks share the same L.
    pub fn uniform_rank(&self) -> Option<usize> {
        let l = self.a[0].ncols();
        self.a.iter().all(|m| m.ncols() == l).then_some(l)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.a[0].nrows(), self.b[0].nrows(), self.c.nrows())
    }

    /// Per-emitter spatial fields `S_r = A_r B_rᵀ`.
    pub fn spatial_fields(&self) -> Vec<DMatrix<f64>> {
        self.a.iter().zip(&self.b).map(|(ar, br)| ar * br.transpose()).collect()
    }
}

/// Synthesizes the full tensor `X(i,j,k) = Σ_r (A_r B_rᵀ)(i,j) · C(k,r)`.
pub fn ll1_synthesize(factors: &Ll1Factors) -> Result<Tensor3> {
    factors.validate()?;
    let (ni, nj, nk) = factors.dims();
    let fields = factors.spatial_fields();
    let mut data = vec![0.0; ni * nj * nk];
    for (r, s) in fields.iter().enumerate() {
        for k in 0..nk {
            let c = factors.c[(k, r)];
            let base = k * ni * nj;
            for (dst, src) in data[base..base + ni * nj].iter_mut().zip(s.as_slice()) {
                *dst += src * c;
            }
        }
    }
    Tensor3::new((ni, nj, nk), data)
}

/// Khatri-Rao (column-wise Kronecker) product: column k is `x_k ⊗ y_k`,
/// with the (i, j) element at row i·J + j.
pub fn khatri_rao(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != y.ncols() {
        return Err(Error::Dim(format!(
            "Khatri-Rao: column counts differ ({} vs {})",
            x.ncols(),
            y.ncols()
        )));
    }
    let (ni, nj, nc) = (x.nrows(), y.nrows(), x.ncols());
    let mut out = DMatrix::zeros(ni * nj, nc);
    for c in 0..nc {
        for i in 0..ni {
            for j in 0..nj {
                out[(i * nj + j, c)] = x[(i, c)] * y[(j, c)];
            }
        }
    }
    Ok(out)
}

/// Partition-wise Khatri-Rao product `[c_1 ⊗ M_1, …, c_R ⊗ M_R]`, where
/// `c_r` is the r-th column of `C` and `M_r` the r-th block.
pub fn partition_khatri_rao(c: &DMatrix<f64>, blocks: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    if blocks.len() != c.ncols() {
        return Err(Error::Dim(format!(
            "partition-wise Khatri-Rao: {} blocks but C has {} columns",
            blocks.len(),
            c.ncols()
        )));
    }
    if blocks.is_empty() {
        return Err(Error::Dim("partition-wise Khatri-Rao: no blocks".into()));
    }
    let rows = blocks[0].nrows();
    if blocks.iter().any(|b| b.nrows() != rows) {
        return Err(Error::Dim("partition-wise Khatri-Rao: blocks have inconsistent row counts".into()));
    }
    let nk = c.nrows();
    let total: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(nk * rows, total);
    let mut col = 0;
    for (r, block) in blocks.iter().enumerate() {
        for l in 0..block.ncols() {
            for k in 0..nk {
                for j in 0..rows {
                    out[(k * rows + j, col)] = c[(k, r)] * block[(j, l)];
                }
            }
            col += 1;
        }
    }
    Ok(out)
}

/// Stacks the vectorized spatial fields: column r is `vec(A_r B_rᵀ)` with
/// the (i, j) element at row j·I + i, matching the mode-3 convention so that
/// `X3 = S Cᵀ`.
pub fn slf_matrix(factors: &Ll1Factors) -> DMatrix<f64> {
    let (ni, nj, _) = factors.dims();
    let fields = factors.spatial_fields();
    let mut s = DMatrix::zeros(ni * nj, factors.num_blocks());
    for (r, field) in fields.iter().enumerate() {
        s.set_column(r, &nalgebra::DVector::from_column_slice(field.as_slice()));
    }
    s
}

/// Same stacking as [`slf_matrix`] for already-materialized fields.
pub fn stack_fields(fields: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    if fields.is_empty() {
        return Err(Error::Dim("no fields to stack".into()));
    }
    let (ni, nj) = fields[0].shape();
    if fields.iter().any(|f| f.shape() != (ni, nj)) {
        return Err(Error::Dim("fields have inconsistent shapes".into()));
    }
    let mut s = DMatrix::zeros(ni * nj, fields.len());
    for (r, field) in fields.iter().enumerate() {
        s.set_column(r, &nalgebra::DVector::from_column_slice(field.as_slice()));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian_matrix;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_factors(
        dims: (usize, usize, usize),
        l: usize,
        r: usize,
        rng: &mut ChaCha8Rng,
    ) -> Ll1Factors {
        let (ni, nj, nk) = dims;
        Ll1Factors::new(
            (0..r).map(|_| gaussian_matrix(ni, l, rng)).collect(),
            (0..r).map(|_| gaussian_matrix(nj, l, rng)).collect(),
            gaussian_matrix(nk, r, rng),
        )
        .unwrap()
    }

    fn rel_fro(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn synthesize_outer_product() {
        let f = Ll1Factors::new(
            vec![DMatrix::from_column_slice(2, 1, &[1.0, 2.0])],
            vec![DMatrix::from_column_slice(1, 1, &[3.0])],
            DMatrix::from_column_slice(1, 1, &[5.0]),
        )
        .unwrap();
        let x = ll1_synthesize(&f).unwrap();
        assert_eq!(x.dims(), (2, 1, 1));
        assert_eq!(x.data(), &[15.0, 30.0]);
    }

    #[test]
    fn synthesize_zero_block() {
        let f = Ll1Factors::new(
            vec![DMatrix::zeros(3, 2)],
            vec![DMatrix::from_fn(4, 2, |i, j| (i + j) as f64)],
            DMatrix::from_element(5, 1, 2.0),
        )
        .unwrap();
        let x = ll1_synthesize(&f).unwrap();
        assert!(x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn synthesize_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random_factors((4, 5, 6), 2, 2, &mut rng);
        let x = ll1_synthesize(&f).unwrap();
        // Entrywise oracle: X(i,j,k) = Σ_r Σ_l A_r(i,l) B_r(j,l) C(k,r).
        for i in 0..4 {
            for j in 0..5 {
                for k in 0..6 {
                    let mut want = 0.0;
                    for r in 0..2 {
                        for l in 0..2 {
                            want += f.a[r][(i, l)] * f.b[r][(j, l)] * f.c[(k, r)];
                        }
                    }
                    assert_relative_eq!(x.get(i, j, k), want, max_relative = 1e-12, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn synthesize_rejects_shape_mismatch() {
        let f = Ll1Factors::new(
            vec![DMatrix::zeros(3, 2)],
            vec![DMatrix::zeros(4, 1)],
            DMatrix::zeros(5, 1),
        );
        assert!(matches!(f, Err(Error::Dim(_))));
    }

    #[test]
    fn unfold_degenerate_dims() {
        let t = Tensor3::new((1, 1, 1), vec![7.0]).unwrap();
        for mode in [Mode::One, Mode::Two, Mode::Three] {
            let u = unfold(&t, mode);
            assert_eq!(u.matrix, DMatrix::from_element(1, 1, 7.0));
        }
    }

    #[test]
    fn unfold_matches_index_enumeration_oracle() {
        let t = Tensor3::new((2, 2, 2), (1..=8).map(|v| v as f64).collect()).unwrap();
        let u1 = unfold(&t, Mode::One);
        let u2 = unfold(&t, Mode::Two);
        let u3 = unfold(&t, Mode::Three);
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    let v = t.get(i, j, k);
                    assert_eq!(u1.matrix[(k * 2 + j, i)], v);
                    assert_eq!(u2.matrix[(k * 2 + i, j)], v);
                    assert_eq!(u3.matrix[(j * 2 + i, k)], v);
                }
            }
        }
    }

    #[test]
    fn unfolding_identities_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let f = random_factors((6, 7, 5), 2, 3, &mut rng);
            let x = ll1_synthesize(&f).unwrap();
            let x1 = unfold(&x, Mode::One).matrix;
            let x2 = unfold(&x, Mode::Two).matrix;
            let x3 = unfold(&x, Mode::Three).matrix;

            let a_cat = DMatrix::from_columns(
                &f.a.iter().flat_map(|m| m.column_iter()).collect::<Vec<_>>(),
            );
            let b_cat = DMatrix::from_columns(
                &f.b.iter().flat_map(|m| m.column_iter()).collect::<Vec<_>>(),
            );
            let kr_cb = partition_khatri_rao(&f.c, &f.b).unwrap();
            let kr_ca = partition_khatri_rao(&f.c, &f.a).unwrap();
            let s = slf_matrix(&f);

            assert!(rel_fro(&(&kr_cb * a_cat.transpose()), &x1) < 1e-12);
            assert!(rel_fro(&(&kr_ca * b_cat.transpose()), &x2) < 1e-12);
            assert!(rel_fro(&(&s * f.c.transpose()), &x3) < 1e-12);
        }
    }

    #[test]
    fn fold_inverts_unfold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_factors((4, 3, 5), 2, 2, &mut rng);
        let t = ll1_synthesize(&f).unwrap();
        for mode in [Mode::One, Mode::Two, Mode::Three] {
            let u = unfold(&t, mode);
            assert_eq!(u.fold().unwrap(), t);
        }
    }

    #[test]
    fn fold_zero_matrix() {
        let z = DMatrix::zeros(6, 2);
        let t = fold(&z, Mode::One, (2, 3, 2)).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fold_rejects_bad_shape() {
        let z = DMatrix::zeros(5, 2);
        assert!(fold(&z, Mode::One, (2, 3, 2)).is_err());
    }

    #[test]
    fn mode_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = ll1_synthesize(&random_factors((3, 4, 2), 1, 2, &mut rng)).unwrap();
        let (ni, nj, nk) = t.dims();
        assert_eq!(mode_product(&t, &DMatrix::identity(ni, ni), Mode::One).unwrap(), t);
        assert_eq!(mode_product(&t, &DMatrix::identity(nj, nj), Mode::Two).unwrap(), t);
        assert_eq!(mode_product(&t, &DMatrix::identity(nk, nk), Mode::Three).unwrap(), t);
    }

    #[test]
    fn mode_product_selection_is_slicing() {
        let t = Tensor3::from_fn((3, 2, 2), |i, j, k| (100 * i + 10 * j + k) as f64).unwrap();
        let mut sel = DMatrix::zeros(2, 3);
        sel[(0, 0)] = 1.0;
        sel[(1, 2)] = 1.0;
        let g = mode_product(&t, &sel, Mode::One).unwrap();
        assert_eq!(g, t.subtensor(&[0, 2], &[0, 1], &[0, 1]).unwrap());
    }

    #[test]
    fn mode_product_transforms_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let f = random_factors((5, 6, 4), 2, 2, &mut rng);
        let x = ll1_synthesize(&f).unwrap();
        let p = gaussian_matrix(3, 5, &mut rng);
        let q = gaussian_matrix(4, 6, &mut rng);
        let r3 = gaussian_matrix(2, 4, &mut rng);
        let g = mode_product(
            &mode_product(&mode_product(&x, &p, Mode::One).unwrap(), &q, Mode::Two).unwrap(),
            &r3,
            Mode::Three,
        )
        .unwrap();
        let tf = Ll1Factors::new(
            f.a.iter().map(|ar| &p * ar).collect(),
            f.b.iter().map(|br| &q * br).collect(),
            &r3 * &f.c,
        )
        .unwrap();
        let want = ll1_synthesize(&tf).unwrap();
        let diff: f64 = g
            .data()
            .iter()
            .zip(want.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(diff / want.frobenius_norm() < 1e-12);
    }

    #[test]
    fn mode_product_rejects_mismatch() {
        let t = Tensor3::zeros((3, 4, 2));
        assert!(mode_product(&t, &DMatrix::zeros(2, 5), Mode::One).is_err());
    }

    #[test]
    fn mode_products_commute_across_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let t = ll1_synthesize(&random_factors((5, 4, 3), 2, 2, &mut rng)).unwrap();
        let p = gaussian_matrix(2, 5, &mut rng);
        let q = gaussian_matrix(3, 4, &mut rng);
        let pq = mode_product(&mode_product(&t, &p, Mode::One).unwrap(), &q, Mode::Two).unwrap();
        let qp = mode_product(&mode_product(&t, &q, Mode::Two).unwrap(), &p, Mode::One).unwrap();
        for (a, b) in pq.data().iter().zip(qp.data()) {
            assert_relative_eq!(a, b, max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn khatri_rao_scalar_and_expansion() {
        let x = DMatrix::from_element(1, 1, 2.0);
        let y = DMatrix::from_element(1, 1, 3.0);
        assert_eq!(khatri_rao(&x, &y).unwrap(), DMatrix::from_element(1, 1, 6.0));

        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let y = DMatrix::from_row_slice(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let want = DMatrix::from_row_slice(4, 2, &[5.0, 12.0, 7.0, 16.0, 15.0, 24.0, 21.0, 32.0]);
        assert_eq!(khatri_rao(&x, &y).unwrap(), want);
    }

    #[test]
    fn khatri_rao_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = gaussian_matrix(4, 3, &mut rng);
        let y = gaussian_matrix(5, 3, &mut rng);
        let kr = khatri_rao(&x, &y).unwrap();
        for c in 0..3 {
            for i in 0..4 {
                for j in 0..5 {
                    assert_relative_eq!(
                        kr[(i * 5 + j, c)],
                        x[(i, c)] * y[(j, c)],
                        max_relative = 1e-14,
                        epsilon = 1e-14
                    );
                }
            }
        }
        assert!(khatri_rao(&x, &gaussian_matrix(5, 2, &mut rng)).is_err());
    }

    #[test]
    fn partition_khatri_rao_single_block_is_kronecker() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let c = gaussian_matrix(3, 1, &mut rng);
        let m = gaussian_matrix(4, 2, &mut rng);
        let pkr = partition_khatri_rao(&c, std::slice::from_ref(&m)).unwrap();
        for k in 0..3 {
            for j in 0..4 {
                for l in 0..2 {
                    assert_eq!(pkr[(k * 4 + j, l)], c[(k, 0)] * m[(j, l)]);
                }
            }
        }
    }

    #[test]
    fn partition_khatri_rao_collapses_to_khatri_rao() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let c = gaussian_matrix(4, 3, &mut rng);
        let m = gaussian_matrix(5, 3, &mut rng);
        let blocks: Vec<_> =
            (0..3).map(|r| DMatrix::from_fn(5, 1, |row, _| m[(row, r)])).collect();
        assert_eq!(partition_khatri_rao(&c, &blocks).unwrap(), khatri_rao(&c, &m).unwrap());
    }

    #[test]
    fn partition_khatri_rao_matches_blockwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let c = gaussian_matrix(3, 2, &mut rng);
        let blocks = vec![gaussian_matrix(4, 2, &mut rng), gaussian_matrix(4, 3, &mut rng)];
        let pkr = partition_khatri_rao(&c, &blocks).unwrap();
        assert_eq!(pkr.shape(), (12, 5));
        let mut col = 0;
        for (r, block) in blocks.iter().enumerate() {
            for l in 0..block.ncols() {
                for k in 0..3 {
                    for j in 0..4 {
                        assert_relative_eq!(
                            pkr[(k * 4 + j, col)],
                            c[(k, r)] * block[(j, l)],
                            max_relative = 1e-14,
                            epsilon = 1e-14
                        );
                    }
                }
                col += 1;
            }
        }
        assert!(partition_khatri_rao(&c, &blocks[..1]).is_err());
    }

    #[test]
    fn slf_matrix_examples() {
        let f = Ll1Factors::new(
            vec![DMatrix::from_column_slice(2, 1, &[1.0, 0.0])],
            vec![DMatrix::from_column_slice(2, 1, &[1.0, 1.0])],
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let s = slf_matrix(&f);
        assert_eq!(s.as_slice(), &[1.0, 0.0, 1.0, 0.0]);

        let zf = Ll1Factors::new(
            vec![DMatrix::zeros(2, 1)],
            vec![DMatrix::from_column_slice(2, 1, &[1.0, 1.0])],
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert!(slf_matrix(&zf).column(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn slf_columns_have_rank_l() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let f = random_factors((8, 9, 4), 3, 2, &mut rng);
        let s = slf_matrix(&f);
        for r in 0..2 {
            let field = DMatrix::from_column_slice(8, 9, s.column(r).as_slice());
            let sv = field.singular_values();
            let rank = sv.iter().filter(|&&v| v > 1e-10).count();
            assert_eq!(rank, 3);
        }
    }
}
