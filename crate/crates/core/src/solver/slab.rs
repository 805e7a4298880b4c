//! BCD for the coupled two-subtensor criterion with Frobenius
//! regularization.
//!
//! Each factor subproblem is a generalized Sylvester equation
//! `H1·X·H2 + X·H4 = H5`. Because `H1 = PᵀP` is a 0/1 diagonal for every
//! slab plan, the system decouples row-wise into two shared symmetric
//! positive-definite solves, which replaces the general Bartels-Stewart
//! route; a Kronecker-vectorized oracle guards the shortcut in tests.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_spd, neumaier_sum};
use crate::sampling::SlabPlan;
use crate::tensor::{partition_khatri_rao, unfold, Ll1Factors, Mode, Tensor3};

use super::{
    run_bcd, scatter_rows, select_rows, BcdProblem, FactorState, SolveResult, SolverConfig,
};

/// Solves `H1·X·H2 + X·H4 = H5` where `H1 = Diag(h1_diag)` with 0/1 entries.
///
/// Row i of the solution satisfies `X(i,:)·(h1ᵢ·H2 + H4) = H5(i,:)`, so only
/// the two coefficient matrices `H2 + H4` and `H4` are factorized.
pub fn solve_row_decoupled_sylvester(
    h1_diag: &[f64],
    h2: &DMatrix<f64>,
    h4: &DMatrix<f64>,
    h5: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = h2.nrows();
    if h2.ncols() != n || h4.shape() != (n, n) {
        return Err(Error::Dim("H2 and H4 must be square with equal size".into()));
    }
    if h5.shape() != (h1_diag.len(), n) {
        return Err(Error::Dim(format!(
            "H5 shape {:?} does not match ({}, {n})",
            h5.shape(),
            h1_diag.len()
        )));
    }
    if h1_diag.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Usage("h1_diag entries must be 0 or 1".into()));
    }

    let any_on = h1_diag.iter().any(|&v| v == 1.0);
    let any_off = h1_diag.iter().any(|&v| v == 0.0);
    let chol_on = if any_on { Some(cholesky_spd(h2 + h4)?) } else { None };
    let chol_off = if any_off { Some(cholesky_spd(h4.clone())?) } else { None };

    let mut x = DMatrix::zeros(h1_diag.len(), n);
    let mut rhs = DVector::zeros(n);
    for (i, &flag) in h1_diag.iter().enumerate() {
        for c in 0..n {
            rhs[c] = h5[(i, c)];
        }
        let chol = if flag == 1.0 { chol_on.as_ref() } else { chol_off.as_ref() };
        let sol = chol.expect("factorization exists for every used branch").solve(&rhs);
        for c in 0..n {
            x[(i, c)] = sol[c];
        }
    }
    Ok(x)
}

/// The coupled-slab fitting problem: both subtensors, their unfoldings, and
/// the sampling plan, precomputed once per solve.
pub struct SlabProblem<'a> {
    x1: &'a Tensor3,
    x2: &'a Tensor3,
    plan: &'a SlabPlan,
    lambda: [f64; 3],
    dims: (usize, usize, usize),
    s1_flags: Vec<f64>,
    s2_flags: Vec<f64>,
    in_s3: Vec<bool>,
    in_s4: Vec<bool>,
    // Mode-n unfoldings of both subtensors (mode index 0-based).
    x1_unf: [DMatrix<f64>; 3],
    x2_unf: [DMatrix<f64>; 3],
    data_norm_sq: f64,
}

impl<'a> SlabProblem<'a> {
    pub fn new(
        x1: &'a Tensor3,
        x2: &'a Tensor3,
        plan: &'a SlabPlan,
        dims: (usize, usize, usize),
        lambda: [f64; 3],
    ) -> Result<Self> {
        plan.validate(dims)?;
        let (ni, nj, _) = dims;
        let expected1 = (plan.s1.len(), nj, plan.s3.len());
        let expected2 = (ni, plan.s2.len(), plan.s4.len());
        if x1.dims() != expected1 {
            return Err(Error::Dim(format!(
                "first subtensor has dims {:?}, plan implies {expected1:?}",
                x1.dims()
            )));
        }
        if x2.dims() != expected2 {
            return Err(Error::Dim(format!(
                "second subtensor has dims {:?}, plan implies {expected2:?}",
                x2.dims()
            )));
        }
        let mut s1_flags = vec![0.0; dims.0];
        for &i in &plan.s1 {
            s1_flags[i] = 1.0;
        }
        let mut s2_flags = vec![0.0; dims.1];
        for &j in &plan.s2 {
            s2_flags[j] = 1.0;
        }
        let mut in_s3 = vec![false; dims.2];
        for &k in &plan.s3 {
            in_s3[k] = true;
        }
        let mut in_s4 = vec![false; dims.2];
        for &k in &plan.s4 {
            in_s4[k] = true;
        }
        Ok(Self {
            x1,
            x2,
            plan,
            lambda,
            dims,
            s1_flags,
            s2_flags,
            in_s3,
            in_s4,
            x1_unf: [
                unfold(x1, Mode::One).matrix,
                unfold(x1, Mode::Two).matrix,
                unfold(x1, Mode::Three).matrix,
            ],
            x2_unf: [
                unfold(x2, Mode::One).matrix,
                unfold(x2, Mode::Two).matrix,
                unfold(x2, Mode::Three).matrix,
            ],
            data_norm_sq: x1.norm_squared() + x2.norm_squared(),
        })
    }

    fn c_rows_s3(&self, state: &FactorState) -> DMatrix<f64> {
        select_rows(&state.c, &self.plan.s3)
    }

    fn c_rows_s4(&self, state: &FactorState) -> DMatrix<f64> {
        select_rows(&state.c, &self.plan.s4)
    }

    /// Exact minimizer of the loss over A with B, C fixed.
    pub fn update_a(&self, state: &mut FactorState) -> Result<()> {
        let b_blocks = state.b_blocks();
        let qb_blocks: Vec<_> =
            b_blocks.iter().map(|blk| select_rows(blk, &self.plan.s2)).collect();
        let w1 = partition_khatri_rao(&self.c_rows_s3(state), &b_blocks)?;
        let w2 = partition_khatri_rao(&self.c_rows_s4(state), &qb_blocks)?;
        let h2 = w1.transpose() * &w1;
        let lr = h2.nrows();
        let h4 = w2.transpose() * &w2 + DMatrix::identity(lr, lr) * self.lambda[0];
        let h5 = scatter_rows(&(self.x1_unf[0].transpose() * &w1), &self.plan.s1, self.dims.0)
            + self.x2_unf[0].transpose() * &w2;
        state.a = solve_row_decoupled_sylvester(&self.s1_flags, &h2, &h4, &h5)?;
        Ok(())
    }

    /// Exact minimizer over B; mirrors [`Self::update_a`] by the role
    /// symmetry of the first two modes.
    pub fn update_b(&self, state: &mut FactorState) -> Result<()> {
        let a_blocks = state.a_blocks();
        let pa_blocks: Vec<_> =
            a_blocks.iter().map(|blk| select_rows(blk, &self.plan.s1)).collect();
        let w1 = partition_khatri_rao(&self.c_rows_s3(state), &pa_blocks)?;
        let w2 = partition_khatri_rao(&self.c_rows_s4(state), &a_blocks)?;
        let g2 = w2.transpose() * &w2;
        let lr = g2.nrows();
        let g4 = w1.transpose() * &w1 + DMatrix::identity(lr, lr) * self.lambda[1];
        let g5 = self.x1_unf[1].transpose() * &w1
            + scatter_rows(&(self.x2_unf[1].transpose() * &w2), &self.plan.s2, self.dims.1);
        state.b = solve_row_decoupled_sylvester(&self.s2_flags, &g2, &g4, &g5)?;
        Ok(())
    }

    /// Exact minimizer over C. Row k couples the two data terms through the
    /// band memberships k ∈ s3, k ∈ s4, giving at most four distinct
    /// coefficient matrices, each factorized once.
    pub fn update_c(&self, state: &mut FactorState, events: &mut Vec<String>) -> Result<()> {
        let r = state.c.ncols();
        let a_blocks = state.a_blocks();
        let b_blocks = state.b_blocks();
        let m1 = crate::tensor::stack_fields(
            &a_blocks
                .iter()
                .zip(&b_blocks)
                .map(|(ar, br)| select_rows(ar, &self.plan.s1) * br.transpose())
                .collect::<Vec<_>>(),
        )?;
        let m2 = crate::tensor::stack_fields(
            &a_blocks
                .iter()
                .zip(&b_blocks)
                .map(|(ar, br)| ar * select_rows(br, &self.plan.s2).transpose())
                .collect::<Vec<_>>(),
        )?;
        let gram1 = m1.transpose() * &m1;
        let gram2 = m2.transpose() * &m2;
        let rhs = scatter_rows(&(self.x1_unf[2].transpose() * &m1), &self.plan.s3, self.dims.2)
            + scatter_rows(&(self.x2_unf[2].transpose() * &m2), &self.plan.s4, self.dims.2);

        let ridge = DMatrix::identity(r, r) * self.lambda[2];
        let mut chols: [Option<Cholesky<f64, Dyn>>; 4] = [None, None, None, None];
        let mut rhs_row = DVector::zeros(r);
        for k in 0..self.dims.2 {
            let (d1, d2) = (self.in_s3[k], self.in_s4[k]);
            if !d1 && !d2 && self.lambda[2] == 0.0 {
                // No data touches this band and there is no ridge to pin it.
                for c in 0..r {
                    state.c[(k, c)] = 0.0;
                }
                events.push(format!("band {k} unobserved with λ3 = 0; row of C zeroed"));
                continue;
            }
            let case = (d1 as usize) | ((d2 as usize) << 1);
            if chols[case].is_none() {
                let mut coeff = ridge.clone();
                if d1 {
                    coeff += &gram1;
                }
                if d2 {
                    coeff += &gram2;
                }
                chols[case] = Some(cholesky_spd(coeff)?);
            }
            for c in 0..r {
                rhs_row[c] = rhs[(k, c)];
            }
            let sol = chols[case].as_ref().unwrap().solve(&rhs_row);
            for c in 0..r {
                state.c[(k, c)] = sol[c];
            }
        }
        Ok(())
    }

    pub fn loss(&self, state: &FactorState) -> f64 {
        slab_loss_state(state, self.x1, self.x2, self.plan, self.lambda)
    }

    /// Warm start from the data itself: the top-R right singular vectors of
    /// the stacked full-band mode-3 rows give the spectrum subspace, the
    /// pseudo-inverse against it recovers spatial rows, and rank-L
    /// truncations of those rows seed A and B. Requires at least one sensor
    /// covering every band; otherwise falls back to random restarts.
    fn build_spectral_init(
        &self,
        l: usize,
        r: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Option<FactorState> {
        let (ni, nj, nk) = self.dims;
        let full3 = self.plan.s3.len() == nk;
        let full4 = self.plan.s4.len() == nk;
        if (!full3 && !full4) || nk < r {
            return None;
        }
        // Stack the mode-3 rows that cover every band.
        let rows1 = if full3 { self.x1_unf[2].nrows() } else { 0 };
        let rows2 = if full4 { self.x2_unf[2].nrows() } else { 0 };
        if rows1 + rows2 < r {
            return None;
        }
        let z = DMatrix::from_fn(rows1 + rows2, nk, |row, k| {
            if row < rows1 {
                self.x1_unf[2][(row, k)]
            } else {
                self.x2_unf[2][(row - rows1, k)]
            }
        });
        let svd = z.svd(false, true);
        let vt = svd.v_t.as_ref()?;
        if svd.singular_values.len() < r || svd.singular_values[r - 1] <= 0.0 {
            return None;
        }
        let c0 = DMatrix::from_fn(nk, r, |k, c| {
            vt[(c, k)] * svd.singular_values[c].sqrt()
        });

        // Spatial rows against the estimated spectra, reshaped per block and
        // truncated to rank L.
        let spatial_rows = |unf3: &DMatrix<f64>, bands: &[usize]| -> Option<DMatrix<f64>> {
            let c_sel = select_rows(&c0, bands);
            let gram = c_sel.transpose() * &c_sel;
            let chol = nalgebra::Cholesky::new(gram)?;
            Some(chol.solve(&(c_sel.transpose() * unf3.transpose())).transpose())
        };
        let truncate = |field: &DMatrix<f64>, left: bool| -> Option<DMatrix<f64>> {
            let svd = field.clone().svd(true, true);
            let rank = l.min(svd.singular_values.len());
            let factor = if left {
                let u = svd.u.as_ref()?;
                DMatrix::from_fn(field.nrows(), l, |i, c| {
                    if c < rank {
                        u[(i, c)] * svd.singular_values[c].sqrt()
                    } else {
                        0.0
                    }
                })
            } else {
                let vt = svd.v_t.as_ref()?;
                DMatrix::from_fn(field.ncols(), l, |j, c| {
                    if c < rank {
                        vt[(c, j)] * svd.singular_values[c].sqrt()
                    } else {
                        0.0
                    }
                })
            };
            Some(factor)
        };

        let m = self.plan.s1.len();
        let n = self.plan.s2.len();
        // B_r (all J rows) comes from sensor 1, A_r (all I rows) from sensor 2.
        let b0 = if full3 && l <= m.min(nj) {
            let s_rows = spatial_rows(&self.x1_unf[2], &self.plan.s3)?;
            let mut blocks = Vec::with_capacity(r);
            for block in 0..r {
                let field = DMatrix::from_fn(m, nj, |mi, j| s_rows[(j * m + mi, block)]);
                blocks.push(truncate(&field, false)?);
            }
            crate::linalg::concat_blocks(&blocks)
        } else {
            crate::linalg::gaussian_matrix(nj, l * r, rng)
        };
        let a0 = if full4 && l <= n.min(ni) {
            let s_rows = spatial_rows(&self.x2_unf[2], &self.plan.s4)?;
            let mut blocks = Vec::with_capacity(r);
            for block in 0..r {
                let field = DMatrix::from_fn(ni, n, |i, nn| s_rows[(nn * ni + i, block)]);
                blocks.push(truncate(&field, true)?);
            }
            crate::linalg::concat_blocks(&blocks)
        } else {
            crate::linalg::gaussian_matrix(ni, l * r, rng)
        };

        let state = FactorState { a: a0, b: b0, c: c0, l };
        state.is_finite().then_some(state)
    }
}

fn model_residual_sq(
    data: &Tensor3,
    fields: &[DMatrix<f64>],
    c_sel: &DMatrix<f64>,
) -> impl Iterator<Item = f64> {
    let (ni, nj, nk) = data.dims();
    let mut terms = Vec::with_capacity(ni * nj * nk);
    for k in 0..nk {
        for j in 0..nj {
            for i in 0..ni {
                let model: f64 =
                    fields.iter().enumerate().map(|(r, s)| s[(i, j)] * c_sel[(k, r)]).sum();
                let resid = data.get(i, j, k) - model;
                terms.push(resid * resid);
            }
        }
    }
    terms.into_iter()
}

fn slab_loss_state(
    state: &FactorState,
    x1: &Tensor3,
    x2: &Tensor3,
    plan: &SlabPlan,
    lambda: [f64; 3],
) -> f64 {
    let a_blocks = state.a_blocks();
    let b_blocks = state.b_blocks();
    let fields1: Vec<_> = a_blocks
        .iter()
        .zip(&b_blocks)
        .map(|(ar, br)| select_rows(ar, &plan.s1) * br.transpose())
        .collect();
    let fields2: Vec<_> = a_blocks
        .iter()
        .zip(&b_blocks)
        .map(|(ar, br)| ar * select_rows(br, &plan.s2).transpose())
        .collect();
    let c1 = select_rows(&state.c, &plan.s3);
    let c2 = select_rows(&state.c, &plan.s4);

    let fit1 = model_residual_sq(x1, &fields1, &c1);
    let fit2 = model_residual_sq(x2, &fields2, &c2);
    let reg = [
        (lambda[0], &state.a),
        (lambda[1], &state.b),
        (lambda[2], &state.c),
    ]
    .into_iter()
    .flat_map(|(lam, m)| m.iter().map(move |v| lam * v * v).collect::<Vec<_>>());
    neumaier_sum(fit1.chain(fit2).chain(reg))
}

/// Regularized coupled-slab loss
/// `‖X⁽¹⁾ − model₁‖²_F + ‖X⁽²⁾ − model₂‖²_F + λ1‖A‖² + λ2‖B‖² + λ3‖C‖²`.
pub fn slab_loss(
    factors: &Ll1Factors,
    x1: &Tensor3,
    x2: &Tensor3,
    plan: &SlabPlan,
    lambda: [f64; 3],
) -> Result<f64> {
    let state = FactorState::from_factors(factors)?;
    let dims = factors.dims();
    plan.validate(dims)?;
    if x1.dims() != (plan.s1.len(), dims.1, plan.s3.len())
        || x2.dims() != (dims.0, plan.s2.len(), plan.s4.len())
    {
        return Err(Error::Dim("subtensor dims inconsistent with plan and factors".into()));
    }
    Ok(slab_loss_state(&state, x1, x2, plan, lambda))
}

impl BcdProblem for SlabProblem<'_> {
    fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    fn data_norm_squared(&self) -> f64 {
        self.data_norm_sq
    }

    fn model_norm_squared(&self, state: &FactorState) -> f64 {
        let a_blocks = state.a_blocks();
        let b_blocks = state.b_blocks();
        let fields1: Vec<_> = a_blocks
            .iter()
            .zip(&b_blocks)
            .map(|(ar, br)| select_rows(ar, &self.plan.s1) * br.transpose())
            .collect();
        let fields2: Vec<_> = a_blocks
            .iter()
            .zip(&b_blocks)
            .map(|(ar, br)| ar * select_rows(br, &self.plan.s2).transpose())
            .collect();
        let c1 = select_rows(&state.c, &self.plan.s3);
        let c2 = select_rows(&state.c, &self.plan.s4);
        let zero1 = Tensor3::zeros(self.x1.dims());
        let zero2 = Tensor3::zeros(self.x2.dims());
        neumaier_sum(
            model_residual_sq(&zero1, &fields1, &c1).chain(model_residual_sq(&zero2, &fields2, &c2)),
        )
    }

    fn loss(&self, state: &FactorState) -> f64 {
        SlabProblem::loss(self, state)
    }

    fn cycle(&self, state: &mut FactorState, events: &mut Vec<String>) -> Result<()> {
        self.update_a(state)?;
        self.update_b(state)?;
        self.update_c(state, events)
    }

    fn spectral_init(
        &self,
        l: usize,
        r: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Option<FactorState> {
        self.build_spectral_init(l, r, rng)
    }
}

/// Runs BCD on the coupled-slab criterion, returning the best of
/// `config.restarts` runs.
pub fn bcd_solve(
    x1: &Tensor3,
    x2: &Tensor3,
    plan: &SlabPlan,
    dims: (usize, usize, usize),
    config: &SolverConfig,
) -> Result<SolveResult> {
    let problem = SlabProblem::new(x1, x2, plan, dims, config.lambda)?;
    run_bcd(&problem, config)
}
