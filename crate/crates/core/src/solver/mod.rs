//! Block coordinate descent solvers for the coupled-slab criterion and the
//! weighted/masked criterion. Every block update is the exact minimizer of
//! its subproblem, so the loss trace is nonincreasing by construction.

pub mod masked;
pub mod slab;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, split_blocks};
use crate::tensor::Ll1Factors;

pub use masked::{bcd_solve_masked, masked_loss, update_factor_masked, MaskedProblem};
pub use slab::{bcd_solve, slab_loss, solve_row_decoupled_sylvester, SlabProblem};

/// How the factors are initialized before the first BCD cycle.
#[derive(Debug, Clone, Default)]
pub enum InitStrategy {
    /// Iid standard Gaussian factors; each restart draws independently.
    #[default]
    Random,
    /// Start from the supplied factors (restarts beyond the first re-use them).
    Given(Ll1Factors),
    /// Supplied factors plus `scale`-sized Gaussian perturbation (test use).
    TruthPerturbed { factors: Ll1Factors, scale: f64 },
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Shared block rank L (uniform across blocks).
    pub l: usize,
    /// Number of block terms (emitters).
    pub r: usize,
    /// Frobenius regularization weights (λ1, λ2, λ3) for A, B, C.
    pub lambda: [f64; 3],
    pub max_iters: usize,
    /// Stop when the relative change of the loss falls below this.
    pub rel_tol: f64,
    pub restarts: usize,
    pub init: InitStrategy,
    pub seed: u64,
}

impl SolverConfig {
    pub fn new(l: usize, r: usize) -> Self {
        Self {
            l,
            r,
            lambda: [1e-2; 3],
            max_iters: 100,
            rel_tol: 1e-3,
            restarts: 1,
            init: InitStrategy::Random,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l == 0 || self.r == 0 {
            return Err(Error::Validation("L and R must be positive".into()));
        }
        if self.lambda.iter().any(|&v| v < 0.0) {
            return Err(Error::Validation("regularization weights must be nonnegative".into()));
        }
        if self.max_iters == 0 || self.restarts == 0 {
            return Err(Error::Validation("max_iters and restarts must be positive".into()));
        }
        if self.rel_tol <= 0.0 || self.rel_tol.is_nan() {
            return Err(Error::Validation("rel_tol must be positive".into()));
        }
        if let InitStrategy::Given(f) | InitStrategy::TruthPerturbed { factors: f, .. } = &self.init {
            f.validate()?;
            if f.uniform_rank() != Some(self.l) || f.num_blocks() != self.r {
                return Err(Error::Validation(
                    "initial factors must have uniform rank L and R blocks matching the config"
                        .into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Relative loss change fell below `rel_tol`.
    Tol,
    /// Iteration budget exhausted.
    MaxIters,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub factors: Ll1Factors,
    /// Loss at initialization followed by the loss after each full A→B→C cycle.
    pub loss_trace: Vec<f64>,
    /// Number of completed cycles.
    pub iterations: usize,
    pub termination: Termination,
    /// Restart that produced the returned factors.
    pub restart_index: usize,
    /// Degeneracy and divergence notes (diverged restarts, reseeded columns,
    /// flagged singular rows).
    pub events: Vec<String>,
}

impl SolveResult {
    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().expect("trace never empty")
    }
}

/// Working factors in concatenated form: `a` is I×(L·R), `b` is J×(L·R),
/// `c` is K×R.
#[derive(Debug, Clone)]
pub struct FactorState {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub l: usize,
}

impl FactorState {
    pub fn from_factors(f: &Ll1Factors) -> Result<Self> {
        f.validate()?;
        let l = f
            .uniform_rank()
            .ok_or_else(|| Error::Validation("solvers require a uniform block rank L".into()))?;
        Ok(Self {
            a: crate::linalg::concat_blocks(&f.a),
            b: crate::linalg::concat_blocks(&f.b),
            c: f.c.clone(),
            l,
        })
    }

    pub fn to_factors(&self) -> Result<Ll1Factors> {
        let r = self.c.ncols();
        Ll1Factors::new(
            split_blocks(&self.a, self.l, r)?,
            split_blocks(&self.b, self.l, r)?,
            self.c.clone(),
        )
    }

    pub fn a_blocks(&self) -> Vec<DMatrix<f64>> {
        split_blocks(&self.a, self.l, self.c.ncols()).expect("state shapes are consistent")
    }

    pub fn b_blocks(&self) -> Vec<DMatrix<f64>> {
        split_blocks(&self.b, self.l, self.c.ncols()).expect("state shapes are consistent")
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().all(|v| v.is_finite())
            && self.b.iter().all(|v| v.is_finite())
            && self.c.iter().all(|v| v.is_finite())
    }

    fn random(dims: (usize, usize, usize), l: usize, r: usize, rng: &mut impl Rng) -> Self {
        Self {
            a: gaussian_matrix(dims.0, l * r, rng),
            b: gaussian_matrix(dims.1, l * r, rng),
            c: gaussian_matrix(dims.2, r, rng),
            l,
        }
    }

    /// Per-emitter spatial fields `S_r = A_r B_rᵀ` of the current state.
    pub fn spatial_fields(&self) -> Vec<DMatrix<f64>> {
        self.a_blocks()
            .iter()
            .zip(self.b_blocks())
            .map(|(ar, br)| ar * br.transpose())
            .collect()
    }
}

/// One coupled-factorization instance that BCD can run on.
pub(crate) trait BcdProblem {
    /// Tensor dims (I, J, K) of the latent model.
    fn dims(&self) -> (usize, usize, usize);
    fn loss(&self, state: &FactorState) -> f64;
    /// One full A→B→C cycle of exact block minimizations.
    fn cycle(&self, state: &mut FactorState, events: &mut Vec<String>) -> Result<()>;
    /// Squared norm of the observed data (at the sampling weights).
    fn data_norm_squared(&self) -> f64;
    /// Squared norm of the model at the observed cells.
    fn model_norm_squared(&self, state: &FactorState) -> f64;
    /// Data-driven warm start, used for the first restart when available.
    fn spectral_init(&self, l: usize, r: usize, rng: &mut ChaCha8Rng) -> Option<FactorState> {
        let _ = (l, r, rng);
        None
    }
}

fn initialize(
    problem: &impl BcdProblem,
    config: &SolverConfig,
    restart: usize,
) -> Result<FactorState> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(restart as u64);
    let state = match &config.init {
        InitStrategy::Random => {
            if restart == 0 {
                if let Some(state) = problem.spectral_init(config.l, config.r, &mut rng) {
                    return Ok(state);
                }
            }
            let mut state = FactorState::random(problem.dims(), config.l, config.r, &mut rng);
            // Match the initial model magnitude to the data: a raw Gaussian
            // draw is typically orders of magnitude off for physical fields,
            // which stalls the first cycles and feeds the ridge terms.
            let model_sq = problem.model_norm_squared(&state);
            let data_sq = problem.data_norm_squared();
            if model_sq > 0.0 && data_sq > 0.0 {
                let scale = (data_sq / model_sq).powf(1.0 / 6.0);
                state.a *= scale;
                state.b *= scale;
                state.c *= scale;
            }
            state
        }
        InitStrategy::Given(f) => FactorState::from_factors(f)?,
        InitStrategy::TruthPerturbed { factors, scale } => {
            let mut s = FactorState::from_factors(factors)?;
            s.a += gaussian_matrix(s.a.nrows(), s.a.ncols(), &mut rng) * *scale;
            s.b += gaussian_matrix(s.b.nrows(), s.b.ncols(), &mut rng) * *scale;
            s.c += gaussian_matrix(s.c.nrows(), s.c.ncols(), &mut rng) * *scale;
            s
        }
    };
    Ok(state)
}

/// Reseeds any block term whose C column collapsed to (near) zero, which
/// would otherwise leave it permanently dead: a zero c_r zeroes A_r and B_r
/// exactly on the next cycle, and a zero spatial factor keeps c_r at zero in
/// turn. The whole block (A_r, B_r, c_r) is reseeded from small Gaussian
/// noise. Returns true if anything changed.
fn rescue_dead_blocks(
    state: &mut FactorState,
    rng: &mut impl Rng,
    events: &mut Vec<String>,
) -> bool {
    let c_total = state.c.norm();
    if c_total == 0.0 {
        return false;
    }
    let reseed_scale = |total: f64, len: usize| 1e-3 * total.max(1e-6) / (len as f64).sqrt();
    let (a_total, b_total) = (state.a.norm(), state.b.norm());
    let l = state.l;
    let mut touched = false;
    for r in 0..state.c.ncols() {
        let dead = state.c.column(r).norm() < 1e-14 * c_total
            || state.a.columns(r * l, l).norm() < 1e-14 * a_total
            || state.b.columns(r * l, l).norm() < 1e-14 * b_total;
        if dead {
            let sc = reseed_scale(c_total, state.c.nrows());
            for k in 0..state.c.nrows() {
                state.c[(k, r)] = sc * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
            let sa = reseed_scale(a_total, state.a.nrows() * l);
            let sb = reseed_scale(b_total, state.b.nrows() * l);
            for col in r * l..(r + 1) * l {
                for i in 0..state.a.nrows() {
                    state.a[(i, col)] = sa * rng.sample::<f64, _>(rand_distr::StandardNormal);
                }
                for j in 0..state.b.nrows() {
                    state.b[(j, col)] = sb * rng.sample::<f64, _>(rand_distr::StandardNormal);
                }
            }
            events.push(format!("reseeded collapsed block term {r}"));
            touched = true;
        }
    }
    touched
}

/// Shared BCD driver: restarts, the stopping rule (relative loss change
/// below `rel_tol` or `max_iters`), and divergence handling.
pub(crate) fn run_bcd(problem: &impl BcdProblem, config: &SolverConfig) -> Result<SolveResult> {
    config.validate()?;
    let mut best: Option<SolveResult> = None;
    let mut diverged_events: Vec<String> = Vec::new();

    'restarts: for restart in 0..config.restarts {
        let mut state = initialize(problem, config, restart)?;
        let mut rescue_rng = ChaCha8Rng::seed_from_u64(config.seed);
        rescue_rng.set_stream(1_000_000 + restart as u64);
        let mut events = Vec::new();
        let mut trace = vec![problem.loss(&state)];
        if !trace[0].is_finite() {
            diverged_events.push(format!("restart {restart} diverged at initialization"));
            continue;
        }
        let mut termination = Termination::MaxIters;
        let mut iterations = config.max_iters;

        for t in 1..=config.max_iters {
            problem.cycle(&mut state, &mut events)?;
            rescue_dead_blocks(&mut state, &mut rescue_rng, &mut events);
            let loss = problem.loss(&state);
            if !loss.is_finite() || !state.is_finite() {
                diverged_events.push(format!("restart {restart} diverged at iteration {t}"));
                continue 'restarts;
            }
            let prev = *trace.last().unwrap();
            trace.push(loss);
            let rel = if prev > f64::MIN_POSITIVE { (prev - loss).abs() / prev } else { 0.0 };
            if rel < config.rel_tol {
                termination = Termination::Tol;
                iterations = t;
                break;
            }
        }

        let candidate = SolveResult {
            factors: state.to_factors()?,
            iterations,
            termination,
            restart_index: restart,
            loss_trace: trace,
            events,
        };
        if best.as_ref().is_none_or(|b| candidate.final_loss() < b.final_loss()) {
            best = Some(candidate);
        }
    }

    match best {
        Some(mut result) => {
            result.events.extend(diverged_events);
            Ok(result)
        }
        None => Err(Error::Numerical(format!(
            "all {} restarts diverged: {}",
            config.restarts,
            diverged_events.join("; ")
        ))),
    }
}

/// Scatters the rows of `small` into a `rows_out`-row zero matrix at `indices`.
pub(crate) fn scatter_rows(
    small: &DMatrix<f64>,
    indices: &[usize],
    rows_out: usize,
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows_out, small.ncols());
    for (local, &global) in indices.iter().enumerate() {
        for c in 0..small.ncols() {
            out[(global, c)] = small[(local, c)];
        }
    }
    out
}

pub(crate) fn select_rows(m: &DMatrix<f64>, indices: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(indices.len(), m.ncols(), |r, c| m[(indices[r], c)])
}
