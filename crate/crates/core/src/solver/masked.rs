//! BCD for the weighted/masked criterion: random fiber sampling and, through
//! the √P weight tensor, the multi-group criterion.
//!
//! The observed-data tensor stores raw values; the mask is kept separately
//! and enters the normal equations as squared weights, which makes the
//! multi-group weighting equal the per-group sum of losses exactly. The
//! binary-mask case reduces to the plain row-wise least-squares updates.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_spd, neumaier_sum};
use crate::sampling::FiberMask;
use crate::tensor::{partition_khatri_rao, Ll1Factors, Mode, Tensor3};

use super::{run_bcd, BcdProblem, FactorState, SolveResult, SolverConfig};

/// The masked fitting problem with the observation list precomputed.
pub struct MaskedProblem<'a> {
    y: &'a Tensor3,
    lambda: [f64; 3],
    /// Observed cells as (i, j, k, w²), in storage order.
    obs: Vec<(u32, u32, u32, f64)>,
    data_norm_sq: f64,
}

impl<'a> MaskedProblem<'a> {
    pub fn new(y: &'a Tensor3, mask: &'a FiberMask, lambda: [f64; 3]) -> Result<Self> {
        if y.dims() != mask.dims() {
            return Err(Error::Dim(format!(
                "observations have dims {:?} but mask has {:?}",
                y.dims(),
                mask.dims()
            )));
        }
        let obs: Vec<(u32, u32, u32, f64)> = mask
            .observed_entries()
            .into_iter()
            .map(|(i, j, k, w2)| (i as u32, j as u32, k as u32, w2))
            .collect();
        let data_norm_sq = neumaier_sum(
            obs.iter().map(|&(i, j, k, w2)| w2 * y.get(i as usize, j as usize, k as usize).powi(2)),
        );
        Ok(Self { y, lambda, obs, data_norm_sq })
    }

    /// Exact minimizer of the masked loss over one factor with the others
    /// fixed: independent weighted ridge least squares per row.
    pub fn update_mode(
        &self,
        mode: Mode,
        state: &mut FactorState,
        events: &mut Vec<String>,
    ) -> Result<()> {
        let (ni, nj, _) = self.y.dims();
        // Design matrix whose row g(entry) multiplies the unknown factor row:
        // mode 1: (C ⊙p B) indexed by (j,k); mode 2: (C ⊙p A) indexed by
        // (i,k); mode 3: the stacked spatial fields indexed by (i,j).
        let (design, lambda): (DMatrix<f64>, f64) = match mode {
            Mode::One => {
                (partition_khatri_rao(&state.c, &state.b_blocks())?, self.lambda[0])
            }
            Mode::Two => {
                (partition_khatri_rao(&state.c, &state.a_blocks())?, self.lambda[1])
            }
            Mode::Three => {
                (crate::tensor::stack_fields(&state.spatial_fields())?, self.lambda[2])
            }
        };
        let rows = match mode {
            Mode::One => ni,
            Mode::Two => nj,
            Mode::Three => self.y.dims().2,
        };
        let width = design.ncols();

        let mut grams = vec![DMatrix::<f64>::zeros(width, width); rows];
        let mut rhs = vec![DVector::<f64>::zeros(width); rows];
        for &(i, j, k, w2) in &self.obs {
            let (i, j, k) = (i as usize, j as usize, k as usize);
            let (row, didx) = match mode {
                Mode::One => (i, k * nj + j),
                Mode::Two => (j, k * ni + i),
                Mode::Three => (k, j * ni + i),
            };
            let g = design.row(didx);
            let gram = &mut grams[row];
            let target = w2 * self.y.get(i, j, k);
            let r = &mut rhs[row];
            for a in 0..width {
                let ga = g[a];
                r[a] += target * ga;
                let wga = w2 * ga;
                for b in a..width {
                    gram[(a, b)] += wga * g[b];
                }
            }
        }

        let out = match mode {
            Mode::One => &mut state.a,
            Mode::Two => &mut state.b,
            Mode::Three => &mut state.c,
        };
        let eye = DMatrix::identity(width, width);
        for row in 0..rows {
            let gram = &mut grams[row];
            for a in 0..width {
                for b in 0..a {
                    gram[(a, b)] = gram[(b, a)];
                }
            }
            let mut coeff = &*gram + &eye * lambda;
            let chol = match cholesky_spd(coeff.clone()) {
                Ok(c) => c,
                Err(_) if lambda == 0.0 => {
                    // Singular unregularized row system: tiny ridge fallback.
                    coeff += &eye * 1e-10;
                    events.push(format!(
                        "mode-{mode:?} row {row}: singular system with λ = 0, applied 1e-10 ridge"
                    ));
                    cholesky_spd(coeff)?
                }
                Err(e) => return Err(e),
            };
            let sol = chol.solve(&rhs[row]);
            for c in 0..width {
                out[(row, c)] = sol[c];
            }
        }
        Ok(())
    }

    pub fn loss(&self, state: &FactorState) -> f64 {
        let fields = state.spatial_fields();
        let fit = self.obs.iter().map(|&(i, j, k, w2)| {
            let (i, j, k) = (i as usize, j as usize, k as usize);
            let model: f64 =
                fields.iter().enumerate().map(|(r, s)| s[(i, j)] * state.c[(k, r)]).sum();
            let resid = self.y.get(i, j, k) - model;
            w2 * resid * resid
        });
        let reg = [
            (self.lambda[0], &state.a),
            (self.lambda[1], &state.b),
            (self.lambda[2], &state.c),
        ]
        .into_iter()
        .flat_map(|(lam, m)| m.iter().map(move |v| lam * v * v).collect::<Vec<_>>());
        neumaier_sum(fit.chain(reg))
    }
}

impl BcdProblem for MaskedProblem<'_> {
    fn dims(&self) -> (usize, usize, usize) {
        self.y.dims()
    }

    fn data_norm_squared(&self) -> f64 {
        self.data_norm_sq
    }

    fn model_norm_squared(&self, state: &FactorState) -> f64 {
        let fields = state.spatial_fields();
        neumaier_sum(self.obs.iter().map(|&(i, j, k, w2)| {
            let (i, j, k) = (i as usize, j as usize, k as usize);
            let model: f64 =
                fields.iter().enumerate().map(|(r, s)| s[(i, j)] * state.c[(k, r)]).sum();
            w2 * model * model
        }))
    }

    fn loss(&self, state: &FactorState) -> f64 {
        MaskedProblem::loss(self, state)
    }

    fn cycle(&self, state: &mut FactorState, events: &mut Vec<String>) -> Result<()> {
        self.update_mode(Mode::One, state, events)?;
        self.update_mode(Mode::Two, state, events)?;
        self.update_mode(Mode::Three, state, events)
    }
}

/// Weighted loss `Σ_{ijk} w²(i,j,k)·(y − model)²(i,j,k) + λ1‖A‖² + λ2‖B‖² + λ3‖C‖²`.
/// `y` holds raw (unweighted) observations.
pub fn masked_loss(
    factors: &Ll1Factors,
    y: &Tensor3,
    w: &FiberMask,
    lambda: [f64; 3],
) -> Result<f64> {
    if factors.dims() != y.dims() {
        return Err(Error::Dim(format!(
            "factors imply dims {:?} but observations have {:?}",
            factors.dims(),
            y.dims()
        )));
    }
    let state = FactorState::from_factors(factors)?;
    let problem = MaskedProblem::new(y, w, lambda)?;
    Ok(problem.loss(&state))
}

/// One exact row-wise weighted least-squares block update, exposed for
/// oracle tests and reuse.
pub fn update_factor_masked(
    mode: Mode,
    state: &mut FactorState,
    y: &Tensor3,
    w: &FiberMask,
    lambda: [f64; 3],
) -> Result<Vec<String>> {
    let problem = MaskedProblem::new(y, w, lambda)?;
    let mut events = Vec::new();
    problem.update_mode(mode, state, &mut events)?;
    Ok(events)
}

/// Runs BCD on the masked criterion, returning the best of `config.restarts`
/// runs.
pub fn bcd_solve_masked(
    y: &Tensor3,
    w: &FiberMask,
    config: &SolverConfig,
) -> Result<SolveResult> {
    let problem = MaskedProblem::new(y, w, config.lambda)?;
    run_bcd(&problem, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian_matrix;
    use crate::sampling::{group_subtensors, plan_to_mask, FiberGroupPlan, GroupIndexSet};
    use crate::solver::InitStrategy;
    use crate::tensor::ll1_synthesize;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_factors(
        dims: (usize, usize, usize),
        l: usize,
        r: usize,
        rng: &mut ChaCha8Rng,
    ) -> Ll1Factors {
        Ll1Factors::new(
            (0..r).map(|_| gaussian_matrix(dims.0, l, rng)).collect(),
            (0..r).map(|_| gaussian_matrix(dims.1, l, rng)).collect(),
            gaussian_matrix(dims.2, r, rng),
        )
        .unwrap()
    }

    #[test]
    fn loss_zero_at_truth_binary_mask() {
        let dims = (6, 5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth = random_factors(dims, 2, 2, &mut rng);
        let y = ll1_synthesize(&truth).unwrap();
        let mask = crate::sampling::random_fiber_mask(dims, 4, &mut rng).unwrap();
        let loss = masked_loss(&truth, &y, &mask, [0.0; 3]).unwrap();
        assert!(loss < 1e-18 * y.norm_squared());
    }

    #[test]
    fn sqrt2_weight_doubles_residual_contribution() {
        let dims = (2, 2, 2);
        let y = Tensor3::zeros(dims);
        let mut weights = Tensor3::zeros(dims);
        weights.set(0, 0, 0, 2.0_f64.sqrt());
        let mask = FiberMask::new(weights).unwrap();
        // Model value ρ at the observed cell, zero data: contribution 2ρ².
        let rho = 0.7;
        let factors = Ll1Factors::new(
            vec![DMatrix::from_column_slice(2, 1, &[1.0, 0.0])],
            vec![DMatrix::from_column_slice(2, 1, &[1.0, 0.0])],
            DMatrix::from_column_slice(2, 1, &[rho, 0.0]),
        )
        .unwrap();
        let loss = masked_loss(&factors, &y, &mask, [0.0; 3]).unwrap();
        assert_relative_eq!(loss, 2.0 * rho * rho, max_relative = 1e-14);
    }

    #[test]
    fn loss_matches_entrywise_oracle() {
        let dims = (5, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = random_factors(dims, 2, 2, &mut rng);
        let y = ll1_synthesize(&truth).unwrap();
        let mut weights = Tensor3::zeros(dims);
        for v in weights.data_mut() {
            *v = if rng.random::<bool>() { rng.random_range(0.5..2.0) } else { 0.0 };
        }
        let mask = FiberMask::new(weights).unwrap();
        let point = random_factors(dims, 2, 2, &mut rng);
        let lambda = [1e-2, 2e-2, 3e-2];
        let loss = masked_loss(&point, &y, &mask, lambda).unwrap();

        let model = ll1_synthesize(&point).unwrap();
        let mut want = 0.0;
        for k in 0..3 {
            for j in 0..4 {
                for i in 0..5 {
                    let w = mask.weight(i, j, k);
                    let resid = y.get(i, j, k) - model.get(i, j, k);
                    want += w * w * resid * resid;
                }
            }
        }
        for blk in &point.a {
            want += lambda[0] * blk.iter().map(|v| v * v).sum::<f64>();
        }
        for blk in &point.b {
            want += lambda[1] * blk.iter().map(|v| v * v).sum::<f64>();
        }
        want += lambda[2] * point.c.iter().map(|v| v * v).sum::<f64>();
        assert_relative_eq!(loss, want, max_relative = 1e-10);
    }

    #[test]
    fn group_weights_reproduce_sum_of_group_losses() {
        let dims = (8, 7, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = random_factors(dims, 2, 2, &mut rng);
        let x = ll1_synthesize(&truth).unwrap();
        let plan = FiberGroupPlan {
            groups: vec![
                GroupIndexSet { i: (0..5).collect(), j: (0..4).collect(), k: (0..3).collect() },
                GroupIndexSet { i: (3..8).collect(), j: (2..7).collect(), k: (1..5).collect() },
                GroupIndexSet { i: (1..6).collect(), j: (3..7).collect(), k: (0..5).collect() },
            ],
        };
        let mask = plan_to_mask(&plan, dims).unwrap();
        let point = random_factors(dims, 2, 2, &mut rng);
        let masked = masked_loss(&point, &x, &mask, [0.0; 3]).unwrap();

        let subs = group_subtensors(&x, &plan).unwrap();
        let mut grouped = 0.0;
        for (g, sub) in plan.groups.iter().zip(&subs) {
            let sub_factors = Ll1Factors::new(
                point.a.iter().map(|m| super::super::select_rows(m, &g.i)).collect(),
                point.b.iter().map(|m| super::super::select_rows(m, &g.j)).collect(),
                super::super::select_rows(&point.c, &g.k),
            )
            .unwrap();
            let model = ll1_synthesize(&sub_factors).unwrap();
            grouped += sub
                .data()
                .iter()
                .zip(model.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        assert!((masked - grouped).abs() <= 1e-10 * grouped.max(1.0));
    }

    /// Dense weighted least-squares oracle for one factor row.
    fn weighted_row_oracle(
        design: &DMatrix<f64>,
        targets: &[(usize, f64, f64)], // (design row, w², y)
        lambda: f64,
    ) -> DVector<f64> {
        let width = design.ncols();
        let mut gram = DMatrix::zeros(width, width) + DMatrix::identity(width, width) * lambda;
        let mut rhs = DVector::zeros(width);
        for &(dr, w2, y) in targets {
            let g = design.row(dr);
            for a in 0..width {
                rhs[a] += w2 * y * g[a];
                for b in 0..width {
                    gram[(a, b)] += w2 * g[a] * g[b];
                }
            }
        }
        gram.lu().solve(&rhs).unwrap()
    }

    #[test]
    fn all_ones_mask_reduces_to_unweighted_ls() {
        let dims = (6, 5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = random_factors(dims, 2, 2, &mut rng);
        let y = ll1_synthesize(&truth).unwrap();
        let mask = FiberMask::all_ones(dims);
        let mut state = FactorState::from_factors(&random_factors(dims, 2, 2, &mut rng)).unwrap();
        let lambda = [1e-3, 0.0, 0.0];
        let design = partition_khatri_rao(&state.c, &state.b_blocks()).unwrap();

        let mut expected = DMatrix::zeros(6, 4);
        for i in 0..6 {
            let mut targets = Vec::new();
            for k in 0..4 {
                for j in 0..5 {
                    targets.push((k * 5 + j, 1.0, y.get(i, j, k)));
                }
            }
            expected.set_row(i, &weighted_row_oracle(&design, &targets, lambda[0]).transpose());
        }
        update_factor_masked(Mode::One, &mut state, &y, &mask, lambda).unwrap();
        assert!((&state.a - &expected).norm() / expected.norm() < 1e-8);
    }

    #[test]
    fn fully_unobserved_row_goes_to_zero() {
        let dims = (5, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let truth = random_factors(dims, 2, 2, &mut rng);
        let y = ll1_synthesize(&truth).unwrap();
        let mut weights = Tensor3::new(dims, vec![1.0; 60]).unwrap();
        for k in 0..3 {
            for j in 0..4 {
                weights.set(2, j, k, 0.0);
            }
        }
        let mask = FiberMask::new(weights).unwrap();
        let mut state = FactorState::from_factors(&truth).unwrap();
        update_factor_masked(Mode::One, &mut state, &y, &mask, [1e-2; 3]).unwrap();
        assert!(state.a.row(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn binary_mask_matches_unsquared_formula() {
        // For w ∈ {0,1}, Diag(w²) = Diag(w): the generalized update must
        // coincide with the plain binary-mask expression.
        let dims = (5, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let truth = random_factors(dims, 2, 2, &mut rng);
        let y = ll1_synthesize(&truth).unwrap();
        let mask = crate::sampling::random_fiber_mask(dims, 3, &mut rng).unwrap();
        let state0 = FactorState::from_factors(&random_factors(dims, 2, 2, &mut rng)).unwrap();
        let lambda = [2e-2, 0.0, 0.0];

        let design = partition_khatri_rao(&state0.c, &state0.b_blocks()).unwrap();
        let mut expected = DMatrix::zeros(5, 4);
        for i in 0..5 {
            let mut targets = Vec::new();
            for k in 0..3 {
                for j in 0..4 {
                    let w = mask.weight(i, j, k);
                    if w > 0.0 {
                        // Plain Appendix-style weights: w, not w².
                        targets.push((k * 4 + j, w, y.get(i, j, k)));
                    }
                }
            }
            expected.set_row(i, &weighted_row_oracle(&design, &targets, lambda[0]).transpose());
        }
        let mut state = state0.clone();
        update_factor_masked(Mode::One, &mut state, &y, &mask, lambda).unwrap();
        assert!((&state.a - &expected).norm() / expected.norm() < 1e-10);
    }

    #[test]
    fn update_b_and_c_match_weighted_oracle() {
        let dims = (5, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let truth = random_factors(dims, 2, 2, &mut rng);
        let y = ll1_synthesize(&truth).unwrap();
        let mut weights = Tensor3::zeros(dims);
        for v in weights.data_mut() {
            *v = if rng.random::<bool>() { rng.random_range(0.5..2.0) } else { 0.0 };
        }
        let mask = FiberMask::new(weights).unwrap();
        let state0 = FactorState::from_factors(&random_factors(dims, 2, 2, &mut rng)).unwrap();

        // B update.
        let design_b = partition_khatri_rao(&state0.c, &state0.a_blocks()).unwrap();
        let mut expected_b = DMatrix::zeros(4, 4);
        for j in 0..4 {
            let mut targets = Vec::new();
            for k in 0..3 {
                for i in 0..5 {
                    let w = mask.weight(i, j, k);
                    if w > 0.0 {
                        targets.push((k * 5 + i, w * w, y.get(i, j, k)));
                    }
                }
            }
            expected_b.set_row(j, &weighted_row_oracle(&design_b, &targets, 1e-2).transpose());
        }
        let mut state = state0.clone();
        update_factor_masked(Mode::Two, &mut state, &y, &mask, [0.0, 1e-2, 0.0]).unwrap();
        assert!((&state.b - &expected_b).norm() / expected_b.norm() < 1e-8);

        // C update.
        let design_c = crate::tensor::stack_fields(&state0.spatial_fields()).unwrap();
        let mut expected_c = DMatrix::zeros(3, 2);
        for k in 0..3 {
            let mut targets = Vec::new();
            for j in 0..4 {
                for i in 0..5 {
                    let w = mask.weight(i, j, k);
                    if w > 0.0 {
                        targets.push((j * 5 + i, w * w, y.get(i, j, k)));
                    }
                }
            }
            expected_c.set_row(k, &weighted_row_oracle(&design_c, &targets, 1e-2).transpose());
        }
        let mut state = state0.clone();
        update_factor_masked(Mode::Three, &mut state, &y, &mask, [0.0, 0.0, 1e-2]).unwrap();
        assert!((&state.c - &expected_c).norm() / expected_c.norm() < 1e-8);
    }

    #[test]
    fn bcd_fixed_point_at_truth_all_ones() {
        let dims = (6, 5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let truth = random_factors(dims, 2, 2, &mut rng);
        let y = ll1_synthesize(&truth).unwrap();
        let mask = FiberMask::all_ones(dims);
        let mut config = SolverConfig::new(2, 2);
        config.lambda = [0.0; 3];
        config.init = InitStrategy::Given(truth.clone());
        let result = bcd_solve_masked(&y, &mask, &config).unwrap();
        assert_eq!(result.iterations, 1);
        assert!(result.final_loss() <= 1e-18 * y.norm_squared());
    }

    #[test]
    fn bcd_masked_trace_monotone_on_noisy_data() {
        let dims = (8, 7, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let truth = random_factors(dims, 2, 2, &mut rng);
        let mut y = ll1_synthesize(&truth).unwrap();
        for v in y.data_mut() {
            *v += 0.05 * rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal);
        }
        let mask = crate::sampling::random_fiber_mask(dims, 5, &mut rng).unwrap();
        let mut config = SolverConfig::new(2, 2);
        config.max_iters = 60;
        config.rel_tol = 1e-6;
        config.seed = 11;
        let result = bcd_solve_masked(&y, &mask, &config).unwrap();
        for w in result.loss_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }
}
