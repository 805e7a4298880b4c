//! Post-processing of solver output and the normalized-absolute-error
//! metrics: permutation matching against the ground truth, scale
//! normalization, spatial-field refinement via pseudo-inverse rows plus
//! thin-plate-spline interpolation, and map reconstruction.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::cholesky_spd;
use crate::sampling::FiberMask;
use crate::tensor::{fold, stack_fields, Ll1Factors, Mode, Tensor3};
use crate::tps::{tps_eval, tps_fit};

/// Column-normalized copy: each column divided by its L1 norm.
fn l1_normalized_columns(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = c.clone();
    for r in 0..c.ncols() {
        let norm: f64 = c.column(r).iter().map(|v| v.abs()).sum();
        if norm == 0.0 {
            return Err(Error::Numerical(format!("column {r} has zero L1 norm")));
        }
        for k in 0..c.nrows() {
            out[(k, r)] /= norm;
        }
    }
    Ok(out)
}

fn l1_cost_matrix(c_true: &DMatrix<f64>, c_hat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if c_true.shape() != c_hat.shape() {
        return Err(Error::Dim(format!(
            "PSD matrices must have equal shapes, got {:?} and {:?}",
            c_true.shape(),
            c_hat.shape()
        )));
    }
    let nt = l1_normalized_columns(c_true)?;
    let nh = l1_normalized_columns(c_hat)?;
    let r = c_true.ncols();
    Ok(DMatrix::from_fn(r, r, |a, b| {
        (0..c_true.nrows()).map(|k| (nt[(k, a)] - nh[(k, b)]).abs()).sum()
    }))
}

fn brute_force_assignment(cost: &DMatrix<f64>) -> Vec<usize> {
    let r = cost.nrows();
    let mut best = (f64::INFINITY, Vec::new());
    let mut perm: Vec<usize> = (0..r).collect();
    permute(&mut perm, 0, cost, &mut best);
    best.1
}

fn permute(perm: &mut Vec<usize>, at: usize, cost: &DMatrix<f64>, best: &mut (f64, Vec<usize>)) {
    let r = perm.len();
    if at == r {
        let total: f64 = (0..r).map(|a| cost[(a, perm[a])]).sum();
        if total < best.0 {
            *best = (total, perm.clone());
        }
        return;
    }
    for pick in at..r {
        perm.swap(at, pick);
        permute(perm, at + 1, cost, best);
        perm.swap(at, pick);
    }
}

/// Hungarian algorithm with potentials, O(n³); returns the column assigned
/// to each row.
fn hungarian_assignment(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    let mut u = vec![0.0_f64; n + 1];
    let mut v = vec![0.0_f64; n + 1];
    let mut assigned_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        assigned_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[assigned_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned_row[j0] = assigned_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if assigned_row[j] > 0 {
            row_to_col[assigned_row[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Finds the permutation π minimizing
/// `Σ_r ‖c_r/‖c_r‖₁ − ĉ_{π_r}/‖ĉ_{π_r}‖₁‖₁`: brute force over R! for R ≤ 8,
/// optimal assignment on the L1 cost matrix beyond (identical optimum, the
/// cost is columnwise separable).
pub fn match_permutation(c_true: &DMatrix<f64>, c_hat: &DMatrix<f64>) -> Result<Vec<usize>> {
    let cost = l1_cost_matrix(c_true, c_hat)?;
    Ok(if cost.nrows() <= 8 { brute_force_assignment(&cost) } else { hungarian_assignment(&cost) })
}

/// Normalized absolute error of matched PSD columns:
/// `(1/R)·Σ_r ‖c_r/‖c_r‖₁ − ĉ_r/‖ĉ_r‖₁‖₁`.
pub fn nae_psd(c_true: &DMatrix<f64>, c_hat: &DMatrix<f64>) -> Result<f64> {
    let cost = l1_cost_matrix(c_true, c_hat)?;
    let r = cost.nrows();
    Ok((0..r).map(|a| cost[(a, a)]).sum::<f64>() / r as f64)
}

/// NAE of matched spatial loss fields, defined identically to [`nae_psd`]
/// on the vectorized fields.
pub fn nae_slf(s_true: &[DMatrix<f64>], s_hat: &[DMatrix<f64>]) -> Result<f64> {
    if s_true.len() != s_hat.len() || s_true.is_empty() {
        return Err(Error::Dim("field lists must be nonempty and equally long".into()));
    }
    let mut total = 0.0;
    for (t, h) in s_true.iter().zip(s_hat) {
        if t.shape() != h.shape() {
            return Err(Error::Dim("field shapes differ".into()));
        }
        let nt: f64 = t.iter().map(|v| v.abs()).sum();
        let nh: f64 = h.iter().map(|v| v.abs()).sum();
        if nt == 0.0 || nh == 0.0 {
            return Err(Error::Numerical("zero-norm spatial field".into()));
        }
        total += t.iter().zip(h.iter()).map(|(a, b)| (a / nt - b / nh).abs()).sum::<f64>();
    }
    Ok(total / s_true.len() as f64)
}

/// Map NAE: `Σ_k ‖X(:,:,k) − X̂(:,:,k)‖₁ / Σ_k ‖X(:,:,k)‖₁`.
pub fn nae_map(x_true: &Tensor3, x_hat: &Tensor3) -> Result<f64> {
    if x_true.dims() != x_hat.dims() {
        return Err(Error::Dim("tensor dims differ".into()));
    }
    let denom = x_true.l1_norm();
    if denom == 0.0 {
        return Err(Error::Numerical("zero-norm reference tensor".into()));
    }
    let num: f64 =
        x_true.data().iter().zip(x_hat.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(num / denom)
}

/// Least-squares re-estimate of spatial-field rows at locations with a fully
/// observed spectrum: `Ŝ(ℓ,:) = X₃(ℓ,:)·(Ĉᵀ)†`.
///
/// `rows` carries `(ℓ, spectrum)` pairs where ℓ = j·I + i indexes the grid
/// and each spectrum covers all K bands. Requires Ĉ to have full column rank
/// (smallest singular value above 1e-10).
pub fn refine_slf(
    rows: &[(usize, DVector<f64>)],
    c_hat: &DMatrix<f64>,
) -> Result<Vec<(usize, DVector<f64>)>> {
    let (k, r) = c_hat.shape();
    if k < r {
        return Err(Error::Dim("C must be tall (K ≥ R) for row refinement".into()));
    }
    let sv = c_hat.singular_values();
    if sv[sv.len() - 1] <= 1e-10 {
        return Err(Error::Numerical(
            "estimated C is rank deficient; spatial rows cannot be refined".into(),
        ));
    }
    let chol = cholesky_spd(c_hat.transpose() * c_hat)?;
    rows.iter()
        .map(|(l, spectrum)| {
            if spectrum.len() != k {
                return Err(Error::Dim(format!(
                    "spectrum at location {l} has {} entries, expected {k}",
                    spectrum.len()
                )));
            }
            Ok((*l, chol.solve(&(c_hat.transpose() * spectrum))))
        })
        .collect()
}

/// Rebuilds the map tensor from fields and PSDs: fold of `Ŝ·Ĉᵀ` along mode 3.
pub fn reconstruct_map(s_hat: &[DMatrix<f64>], c_hat: &DMatrix<f64>) -> Result<Tensor3> {
    if s_hat.len() != c_hat.ncols() {
        return Err(Error::Dim(format!(
            "{} fields but C has {} columns",
            s_hat.len(),
            c_hat.ncols()
        )));
    }
    let (ni, nj) = s_hat[0].shape();
    let s = stack_fields(s_hat)?;
    let x3 = s * c_hat.transpose();
    fold(&x3, Mode::Three, (ni, nj, c_hat.nrows()))
}

/// Options for the full disaggregation pipeline.
#[derive(Debug, Clone)]
pub struct DisaggregationOptions {
    /// Refine rows at fully observed spectra and TPS-interpolate the rest;
    /// otherwise keep the raw factor products `Â_r B̂_rᵀ`.
    pub refine: bool,
    pub tps_smoothing: f64,
    /// Cap on TPS nodes per emitter; larger refined-row sets are thinned
    /// with a deterministic stride (the dense TPS system is O(n³)).
    pub tps_max_nodes: usize,
    /// Interpolate log(S) instead of S. Loss fields span many orders of
    /// magnitude, and spline overshoot in the linear domain dwarfs the
    /// signal; the log-domain field (dB path loss plus Gaussian shadowing)
    /// is the smooth object.
    pub log_domain: bool,
}

impl Default for DisaggregationOptions {
    fn default() -> Self {
        Self { refine: true, tps_smoothing: 1e-3, tps_max_nodes: 1200, log_domain: true }
    }
}

/// Disaggregated estimate: per-emitter fields and spectra in a normalized,
/// comparison-ready form, plus the reconstructed map.
#[derive(Debug, Clone)]
pub struct DisaggregationResult {
    pub slfs_hat: Vec<DMatrix<f64>>,
    pub psd_hat: DMatrix<f64>,
    pub map_hat: Tensor3,
    /// Column permutation applied by [`DisaggregationResult::match_to_truth`]
    /// (identity until then).
    pub permutation: Vec<usize>,
    /// Signed L1 scale absorbed from each PSD column into its field.
    pub scales: Vec<f64>,
}

impl DisaggregationResult {
    /// Reorders the estimate columns to best match `c_true` and records the
    /// permutation. The reconstructed map is permutation invariant.
    pub fn match_to_truth(&mut self, c_true: &DMatrix<f64>) -> Result<()> {
        let perm = match_permutation(c_true, &self.psd_hat)?;
        self.psd_hat = DMatrix::from_fn(self.psd_hat.nrows(), perm.len(), |k, r| {
            self.psd_hat[(k, perm[r])]
        });
        self.slfs_hat = perm.iter().map(|&p| self.slfs_hat[p].clone()).collect();
        self.scales = perm.iter().map(|&p| self.scales[p]).collect();
        self.permutation = perm;
        Ok(())
    }
}

/// Normalizes each (field, spectrum) pair: ĉ_r gets unit L1 norm with a
/// positive sum, the signed scale is absorbed into Ŝ_r.
fn normalize_pairs(fields: &mut [DMatrix<f64>], c: &mut DMatrix<f64>) -> Result<Vec<f64>> {
    let mut scales = Vec::with_capacity(c.ncols());
    for r in 0..c.ncols() {
        let l1: f64 = c.column(r).iter().map(|v| v.abs()).sum();
        if l1 == 0.0 {
            return Err(Error::Numerical(format!("estimated PSD column {r} is zero")));
        }
        let sum: f64 = c.column(r).iter().sum();
        let scale = if sum < 0.0 { -l1 } else { l1 };
        for k in 0..c.nrows() {
            c[(k, r)] /= scale;
        }
        fields[r] *= scale;
        scales.push(scale);
    }
    Ok(scales)
}

/// Grid locations whose entire spectrum is observed (`w > 0` for all k),
/// with their observed spectra.
fn full_spectrum_rows(y: &Tensor3, w: &FiberMask) -> Vec<(usize, DVector<f64>)> {
    let (ni, nj, nk) = y.dims();
    let mut rows = Vec::new();
    for j in 0..nj {
        for i in 0..ni {
            if (0..nk).all(|k| w.weight(i, j, k) > 0.0) {
                rows.push((j * ni + i, DVector::from_fn(nk, |k, _| y.get(i, j, k))));
            }
        }
    }
    rows
}

fn thin_nodes(nodes: Vec<(f64, f64, f64)>, cap: usize) -> Vec<(f64, f64, f64)> {
    if nodes.len() <= cap {
        return nodes;
    }
    let stride = nodes.len().div_ceil(cap);
    nodes.into_iter().step_by(stride).collect()
}

/// Full post-processing pipeline on solver factors: normalize scales, then
/// (optionally) refine the field rows at fully observed spectra via
/// [`refine_slf`] and TPS-interpolate each emitter's field over the grid,
/// then reconstruct the map. Falls back to the raw factor products when no
/// location has a fully observed spectrum or too few refined rows exist for
/// a spline fit.
pub fn disaggregate_full(
    factors: &Ll1Factors,
    y: &Tensor3,
    w: &FiberMask,
    opts: &DisaggregationOptions,
) -> Result<DisaggregationResult> {
    factors.validate()?;
    if y.dims() != factors.dims() || w.dims() != y.dims() {
        return Err(Error::Dim("observations, mask, and factors disagree on dims".into()));
    }
    let (ni, nj, _) = y.dims();
    let mut fields = factors.spatial_fields();
    let mut c = factors.c.clone();
    let scales = normalize_pairs(&mut fields, &mut c)?;

    if opts.refine {
        let rows = full_spectrum_rows(y, w);
        if !rows.is_empty() {
            let refined = refine_slf(&rows, &c)?;
            for (r, field) in fields.iter_mut().enumerate() {
                let mut nodes: Vec<(f64, f64, f64)> = refined
                    .iter()
                    .map(|(l, s)| ((l % ni) as f64, (l / ni) as f64, s[r]))
                    .collect();
                // Log-domain interpolation only makes sense for positive
                // fields; a sign-indefinite refined field (synthetic factor
                // tests) is interpolated linearly.
                let positive = nodes.iter().filter(|p| p.2 > 0.0).count();
                let use_log = opts.log_domain && positive * 100 >= nodes.len() * 99;
                let mut floor = 0.0;
                if use_log {
                    // Pseudo-inverse rows can dip nonpositive; floor them
                    // relative to the largest refined value.
                    let peak = nodes.iter().fold(0.0_f64, |m, p| m.max(p.2));
                    floor = 1e-12 * peak;
                    for p in &mut nodes {
                        p.2 = p.2.max(floor).ln();
                    }
                }
                let thinned = thin_nodes(nodes.clone(), opts.tps_max_nodes);
                match tps_fit(&thinned, opts.tps_smoothing) {
                    Ok(model) => {
                        let mut interpolated = tps_eval(&model, (ni, nj));
                        if use_log {
                            // Splines overshoot outside the sampled hull and
                            // exp() amplifies that into spurious mass; keep
                            // the interpolant inside the node range.
                            let (lo, hi) = nodes.iter().fold(
                                (f64::INFINITY, f64::NEG_INFINITY),
                                |(lo, hi), p| (lo.min(p.2), hi.max(p.2)),
                            );
                            interpolated.apply(|v| *v = v.clamp(lo, hi).exp());
                        }
                        // Interpolation is for the unobserved cells only;
                        // refined locations keep their least-squares values.
                        for (l, srow) in &refined {
                            interpolated[(l % ni, l / ni)] =
                                if use_log { srow[r].max(floor) } else { srow[r] };
                        }
                        *field = interpolated;
                    }
                    // Too few or degenerate nodes: keep the factor product.
                    Err(Error::Validation(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
    }

    let map_hat = reconstruct_map(&fields, &c)?;
    Ok(DisaggregationResult {
        slfs_hat: fields,
        psd_hat: c,
        map_hat,
        permutation: (0..factors.num_blocks()).collect(),
        scales,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian_matrix;
    use crate::tensor::{ll1_synthesize, unfold};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matching_identity_and_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = gaussian_matrix(6, 3, &mut rng);
        assert_eq!(match_permutation(&c, &c).unwrap(), vec![0, 1, 2]);

        // Swap columns 0 and 1 and rescale: matching must swap back.
        let mut swapped = c.clone();
        swapped.swap_columns(0, 1);
        for k in 0..6 {
            swapped[(k, 0)] *= 3.0;
            swapped[(k, 1)] *= 0.5;
        }
        assert_eq!(match_permutation(&c, &swapped).unwrap(), vec![1, 0, 2]);
    }

    #[test]
    fn matching_recovers_random_permutation_and_agrees_with_hungarian() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for r in 2..=6 {
            let c = DMatrix::from_fn(8, r, |_, _| rng.random_range(0.1..2.0));
            let mut perm: Vec<usize> = (0..r).collect();
            for a in (1..r).rev() {
                perm.swap(a, rng.random_range(0..=a));
            }
            let mut shuffled = DMatrix::zeros(8, r);
            for (dst, &src) in perm.iter().enumerate() {
                let scale = rng.random_range(0.2..5.0);
                for k in 0..8 {
                    shuffled[(k, dst)] = c[(k, src)] * scale;
                }
            }
            let matched = match_permutation(&c, &shuffled).unwrap();
            // matched[src] should point at the shuffled position dst.
            for (dst, &src) in perm.iter().enumerate() {
                assert_eq!(matched[src], dst);
            }
            let cost = l1_cost_matrix(&c, &shuffled).unwrap();
            assert_eq!(brute_force_assignment(&cost), hungarian_assignment(&cost));
        }
    }

    #[test]
    fn matching_rejects_zero_column() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        assert!(match_permutation(&c, &c).is_err());
    }

    #[test]
    fn nae_psd_examples() {
        let c = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        assert_eq!(nae_psd(&c, &c).unwrap(), 0.0);
        assert_eq!(nae_psd(&c, &(&c * 2.0)).unwrap(), 0.0);
        let h = DMatrix::from_column_slice(2, 1, &[0.5, 0.5]);
        assert_relative_eq!(nae_psd(&c, &h).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn nae_map_doubling_gives_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor3::from_fn((4, 3, 2), |_, _, _| rng.random_range(0.1..1.0)).unwrap();
        let double = Tensor3::new(x.dims(), x.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        assert_relative_eq!(nae_map(&x, &double).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(nae_map(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn nae_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = DMatrix::from_fn(6, 3, |_, _| rng.random_range(0.1..2.0));
        let mut scaled = c.clone();
        for r in 0..3 {
            let s = rng.random_range(0.5..4.0);
            for k in 0..6 {
                scaled[(k, r)] *= s;
            }
        }
        assert!(nae_psd(&c, &scaled).unwrap() < 1e-14);
    }

    fn random_factors(
        dims: (usize, usize, usize),
        l: usize,
        r: usize,
        rng: &mut ChaCha8Rng,
    ) -> Ll1Factors {
        Ll1Factors::new(
            (0..r).map(|_| gaussian_matrix(dims.0, l, rng)).collect(),
            (0..r).map(|_| gaussian_matrix(dims.1, l, rng)).collect(),
            DMatrix::from_fn(dims.2, r, |_, _| rng.random_range(0.2..2.0)),
        )
        .unwrap()
    }

    #[test]
    fn refine_recovers_exact_rows() {
        let dims = (5, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_factors(dims, 2, 2, &mut rng);
        let x = ll1_synthesize(&f).unwrap();
        let x3 = unfold(&x, Mode::Three).matrix;
        let rows: Vec<(usize, DVector<f64>)> =
            (0..20).map(|l| (l, x3.row(l).transpose())).collect();
        let refined = refine_slf(&rows, &f.c).unwrap();
        let s = crate::tensor::slf_matrix(&f);
        for (l, row) in refined {
            for r in 0..2 {
                assert_relative_eq!(row[r], s[(l, r)], max_relative = 1e-10, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn refine_rank_one_is_scalar_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = DMatrix::from_fn(5, 1, |_, _| rng.random_range(0.2..2.0));
        let spectrum = crate::linalg::gaussian_vector(5, &mut rng);
        let refined = refine_slf(&[(0, spectrum.clone())], &c).unwrap();
        let want = spectrum.dot(&c.column(0)) / c.column(0).norm_squared();
        assert_relative_eq!(refined[0].1[0], want, max_relative = 1e-12);
    }

    #[test]
    fn refine_matches_ls_oracle_on_noisy_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = gaussian_matrix(8, 3, &mut rng);
        let rows: Vec<(usize, DVector<f64>)> =
            (0..4).map(|l| (l, crate::linalg::gaussian_vector(8, &mut rng))).collect();
        let refined = refine_slf(&rows, &c).unwrap();
        for ((_, spectrum), (_, got)) in rows.iter().zip(&refined) {
            let oracle = c.clone().svd(true, true).solve(spectrum, 1e-14).unwrap();
            assert!((got - &oracle).norm() / oracle.norm() < 1e-8);
        }
    }

    #[test]
    fn refine_rejects_rank_deficient_c() {
        let mut c = DMatrix::zeros(4, 2);
        for k in 0..4 {
            c[(k, 0)] = k as f64 + 1.0;
            c[(k, 1)] = 2.0 * (k as f64 + 1.0);
        }
        assert!(refine_slf(&[(0, DVector::zeros(4))], &c).is_err());
    }

    #[test]
    fn reconstruct_examples() {
        let dims = (5, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = random_factors(dims, 2, 2, &mut rng);
        let x = ll1_synthesize(&f).unwrap();
        let rebuilt = reconstruct_map(&f.spatial_fields(), &f.c).unwrap();
        for (a, b) in x.data().iter().zip(rebuilt.data()) {
            assert_relative_eq!(a, b, max_relative = 1e-10, epsilon = 1e-12);
        }

        let ones = DMatrix::from_element(3, 3, 1.0);
        let e1 = DMatrix::from_column_slice(4, 1, &[1.0, 0.0, 0.0, 0.0]);
        let t = reconstruct_map(&[ones], &e1).unwrap();
        for j in 0..3 {
            for i in 0..3 {
                assert_eq!(t.get(i, j, 0), 1.0);
                assert_eq!(t.get(i, j, 1), 0.0);
            }
        }

        // Entrywise oracle with random fields independent of any LL1 structure.
        let fields: Vec<DMatrix<f64>> =
            (0..2).map(|_| gaussian_matrix(4, 3, &mut rng)).collect();
        let c = gaussian_matrix(5, 2, &mut rng);
        let t = reconstruct_map(&fields, &c).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                for k in 0..5 {
                    let want: f64 = (0..2).map(|r| fields[r][(i, j)] * c[(k, r)]).sum();
                    assert_relative_eq!(t.get(i, j, k), want, max_relative = 1e-12, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn disaggregate_exact_fully_observed() {
        let dims = (7, 6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let truth = random_factors(dims, 2, 2, &mut rng);
        let y = ll1_synthesize(&truth).unwrap();
        let w = FiberMask::all_ones(dims);
        let opts = DisaggregationOptions { refine: true, tps_smoothing: 0.0, ..Default::default() };
        let mut result = disaggregate_full(&truth, &y, &w, &opts).unwrap();
        result.match_to_truth(&truth.c).unwrap();

        assert!(nae_psd(&truth.c, &result.psd_hat).unwrap() < 1e-8);
        assert!(nae_slf(&truth.spatial_fields(), &result.slfs_hat).unwrap() < 1e-6);
        assert!(nae_map(&y, &result.map_hat).unwrap() < 1e-6);

        // Mode-3 identity of the reconstruction.
        let x3 = unfold(&result.map_hat, Mode::Three).matrix;
        let s = stack_fields(&result.slfs_hat).unwrap();
        assert!((&x3 - s * result.psd_hat.transpose()).norm() <= 1e-10 * x3.norm().max(1.0));
    }

    #[test]
    fn disaggregate_falls_back_without_full_spectra() {
        let dims = (6, 5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let truth = random_factors(dims, 2, 2, &mut rng);
        let y = ll1_synthesize(&truth).unwrap();
        // Random fiber mask with q < K coverage leaves no full spectrum.
        let mut weights = Tensor3::zeros(dims);
        for j in 0..5 {
            for i in 0..6 {
                let skip = (i + j) % 4;
                for k in 0..4 {
                    if k != skip {
                        weights.set(i, j, k, 1.0);
                    }
                }
            }
        }
        let w = FiberMask::new(weights).unwrap();
        let result = disaggregate_full(&truth, &y, &w, &DisaggregationOptions::default()).unwrap();
        // Fallback keeps the (normalized) factor products.
        let normalized_truth: Vec<DMatrix<f64>> = {
            let mut fields = truth.spatial_fields();
            let mut c = truth.c.clone();
            normalize_pairs(&mut fields, &mut c).unwrap();
            fields
        };
        for (got, want) in result.slfs_hat.iter().zip(&normalized_truth) {
            assert!((got - want).norm() < 1e-12 * want.norm().max(1.0));
        }
    }

    #[test]
    fn normalization_absorbs_sign_and_scale() {
        let dims = (5, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth = random_factors(dims, 2, 2, &mut rng);
        // Flip and scale one pair; the synthesized tensor is unchanged.
        let mut twisted = truth.clone();
        twisted.a[0] = &twisted.a[0] * -2.5;
        twisted.c = {
            let mut c = twisted.c.clone();
            for k in 0..6 {
                c[(k, 0)] /= -2.5;
            }
            c
        };
        let y = ll1_synthesize(&truth).unwrap();
        let w = FiberMask::all_ones(dims);
        let opts = DisaggregationOptions { refine: false, ..Default::default() };
        let mut from_truth = disaggregate_full(&truth, &y, &w, &opts).unwrap();
        let mut from_twisted = disaggregate_full(&twisted, &y, &w, &opts).unwrap();
        from_truth.match_to_truth(&truth.c).unwrap();
        from_twisted.match_to_truth(&truth.c).unwrap();
        assert!(nae_psd(&from_truth.psd_hat, &from_twisted.psd_hat).unwrap() < 1e-12);
        for (a, b) in from_truth.slfs_hat.iter().zip(&from_twisted.slfs_hat) {
            assert!((a - b).norm() < 1e-10 * b.norm());
        }
    }
}

