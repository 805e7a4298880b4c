//! Synthetic ground-truth generation: emitter power spectra built from
//! squared-sinc components, spatial loss fields with path loss and spatially
//! correlated log-normal shadowing, radio-map assembly, and noise injection.
//!
//! Every generator is a pure function of (config, seed): identical inputs
//! produce bit-identical outputs.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::neumaier_sum;
use crate::tensor::Tensor3;

/// Largest point count for which the shadow-field covariance is factorized
/// densely; beyond this the coarse-grid path must be used.
const MAX_EXACT_POINTS: usize = 64 * 64;

/// One squared-sinc component of an emitter PSD.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsdComponent {
    pub active: bool,
    pub amplitude: f64,
    /// Band-index center, 1-based over 1..=K.
    pub center: f64,
    pub width: f64,
}

/// Emitter PSD: a combination of up to three squared-sinc components.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsdSpec {
    pub components: Vec<PsdComponent>,
}

impl PsdSpec {
    pub fn validate(&self, k_bands: usize) -> Result<()> {
        if self.components.len() > 3 {
            return Err(Error::Validation("a PSD uses at most three components".into()));
        }
        for c in &self.components {
            if c.amplitude <= 0.0 || c.width <= 0.0 {
                return Err(Error::Validation("PSD amplitudes and widths must be positive".into()));
            }
            if c.center < 1.0 || c.center > k_bands as f64 {
                return Err(Error::Validation(format!(
                    "PSD center {} outside band range 1..={k_bands}",
                    c.center
                )));
            }
        }
        Ok(())
    }
}

/// One emitter: continuous location, path-loss exponent, and PSD.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmitterSpec {
    pub location: [f64; 2],
    pub pathloss_exponent: f64,
    pub psd: PsdSpec,
}

/// Shadow-field parameters: dB-domain standard deviation, decorrelation
/// distance, and the coarse-grid spacing used for synthesis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShadowSpec {
    pub sigma: f64,
    pub xc: f64,
    pub gen_resolution: usize,
}

impl ShadowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sigma < 0.0 {
            return Err(Error::Validation("shadowing sigma must be nonnegative".into()));
        }
        if self.xc <= 0.0 {
            return Err(Error::Validation("decorrelation distance must be positive".into()));
        }
        if self.gen_resolution == 0 {
            return Err(Error::Validation("gen_resolution must be at least 1".into()));
        }
        Ok(())
    }
}

/// Full scenario configuration; [`assemble_ground_truth`] is a pure function
/// of this struct.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(rename = "I")]
    pub i: usize,
    #[serde(rename = "J")]
    pub j: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "R")]
    pub r: usize,
    pub sigma: f64,
    pub xc: f64,
    #[serde(default = "default_gen_resolution")]
    pub gen_resolution: usize,
    #[serde(default = "default_eta_range")]
    pub eta_range: (f64, f64),
    #[serde(default = "default_amp_range")]
    pub amp_range: (f64, f64),
    #[serde(default = "default_width_range")]
    pub width_range: (f64, f64),
    #[serde(default = "default_min_clearance")]
    pub min_clearance: f64,
    /// Close-in reference distance d0 of the log-distance path-loss model:
    /// the loss is evaluated at max(d, d0). Zero disables the floor and
    /// keeps the raw ‖y−z‖^{−η} point singularity.
    #[serde(default = "default_reference_distance")]
    pub pathloss_reference_distance: f64,
    /// Test mode replacing the path-loss factor by 1, leaving only the
    /// shadow factor.
    #[serde(default)]
    pub flat_pathloss: bool,
    pub seed: u64,
}

fn default_gen_resolution() -> usize {
    4
}
fn default_eta_range() -> (f64, f64) {
    (2.0, 3.0)
}
fn default_amp_range() -> (f64, f64) {
    (0.5, 2.0)
}
fn default_width_range() -> (f64, f64) {
    (2.0, 4.0)
}
fn default_min_clearance() -> f64 {
    0.5
}
fn default_reference_distance() -> f64 {
    3.0
}

impl ScenarioConfig {
    /// Paper-scale defaults: 101×101 grid, σ=4, X_c=30.
    pub fn defaults(k: usize, r: usize, seed: u64) -> Self {
        Self {
            i: 101,
            j: 101,
            k,
            r,
            sigma: 4.0,
            xc: 30.0,
            gen_resolution: default_gen_resolution(),
            eta_range: default_eta_range(),
            amp_range: default_amp_range(),
            width_range: default_width_range(),
            min_clearance: default_min_clearance(),
            pathloss_reference_distance: default_reference_distance(),
            flat_pathloss: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.i == 0 || self.j == 0 || self.k == 0 {
            return Err(Error::Validation("grid and band dimensions must be positive".into()));
        }
        if self.r == 0 {
            return Err(Error::Validation("at least one emitter required".into()));
        }
        if self.min_clearance < 0.0 {
            return Err(Error::Validation("min_clearance must be nonnegative".into()));
        }
        if self.pathloss_reference_distance < 0.0 {
            return Err(Error::Validation("pathloss_reference_distance must be nonnegative".into()));
        }
        ShadowSpec { sigma: self.sigma, xc: self.xc, gen_resolution: self.gen_resolution }.validate()
    }

    pub fn shadow_spec(&self) -> ShadowSpec {
        ShadowSpec { sigma: self.sigma, xc: self.xc, gen_resolution: self.gen_resolution }
    }
}

/// Scenario-level truth: per-emitter spatial loss fields, the PSD matrix,
/// the assembled radio map, and the emitter metadata.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub slfs: Vec<DMatrix<f64>>,
    pub psd: DMatrix<f64>,
    pub map: Tensor3,
    pub emitters: Vec<EmitterSpec>,
    pub seed: u64,
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Evaluates the PSD `c(k) = Σ_i p_i a_i sinc²((k − f_i)/w_i)` over the
/// 1-based band indices 1..=K (normalized sinc).
pub fn gen_psd(spec: &PsdSpec, k_bands: usize) -> Result<DVector<f64>> {
    spec.validate(k_bands)?;
    Ok(DVector::from_fn(k_bands, |k0, _| {
        let k = (k0 + 1) as f64;
        spec.components
            .iter()
            .filter(|c| c.active)
            .map(|c| c.amplitude * sinc((k - c.center) / c.width).powi(2))
            .sum()
    }))
}

/// Draws a random PSD spec: activity Bernoulli(1/2), amplitude and width
/// uniform over the configured ranges, center uniform on {1..K}. An
/// all-inactive draw is rejected and redrawn, since a silent emitter breaks
/// permutation matching.
pub fn sample_psd_spec(
    k_bands: usize,
    amp_range: (f64, f64),
    width_range: (f64, f64),
    rng: &mut impl Rng,
) -> PsdSpec {
    loop {
        let components: Vec<PsdComponent> = (0..3)
            .map(|_| PsdComponent {
                active: rng.random::<bool>(),
                amplitude: rng.random_range(amp_range.0..=amp_range.1),
                center: rng.random_range(1..=k_bands) as f64,
                width: rng.random_range(width_range.0..=width_range.1),
            })
            .collect();
        if components.iter().any(|c| c.active) {
            return PsdSpec { components };
        }
    }
}

fn coarse_axis(extent: usize, res: usize) -> Vec<f64> {
    let mut pts: Vec<f64> = (0..extent).step_by(res).map(|p| p as f64).collect();
    let last = (extent - 1) as f64;
    if *pts.last().unwrap() < last {
        pts.push(last);
    }
    pts
}

fn exponential_covariance(points: &[(f64, f64)], sigma: f64, xc: f64) -> DMatrix<f64> {
    let n = points.len();
    DMatrix::from_fn(n, n, |a, b| {
        let dx = points[a].0 - points[b].0;
        let dy = points[a].1 - points[b].1;
        sigma * sigma * (-(dx * dx + dy * dy).sqrt() / xc).exp()
    })
}

fn factorize_with_jitter(mut cov: DMatrix<f64>, sigma: f64) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let n = cov.nrows();
    let mut jitter = 0.0;
    for attempt in 0..4 {
        if let Some(chol) = nalgebra::Cholesky::new(cov.clone()) {
            return Ok(chol);
        }
        jitter = if attempt == 0 { 1e-10 * sigma * sigma } else { jitter * 100.0 };
        for d in 0..n {
            cov[(d, d)] += jitter;
        }
    }
    Err(Error::Numerical(
        "shadow covariance factorization failed even with diagonal jitter; \
         increase gen_resolution or reduce grid size"
            .into(),
    ))
}

/// Samples a zero-mean Gaussian field with covariance
/// `σ² exp(−‖y−y'‖₂ / X_c)` over the I×J grid.
///
/// With `gen_resolution` 1 the covariance over all grid points is factorized
/// densely (limited to 64×64-sized grids); coarser resolutions factorize a
/// subsampled grid exactly and upsample bilinearly, preserving correlation
/// structure at the X_c scale while bounding memory.
pub fn gen_shadow_field(
    spec: &ShadowSpec,
    grid: (usize, usize),
    rng: &mut impl Rng,
) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let (ni, nj) = grid;
    if ni == 0 || nj == 0 {
        return Err(Error::Validation("grid dimensions must be positive".into()));
    }
    if spec.sigma == 0.0 {
        return Ok(DMatrix::zeros(ni, nj));
    }

    let xs = coarse_axis(ni, spec.gen_resolution);
    let ys = coarse_axis(nj, spec.gen_resolution);
    if xs.len() * ys.len() > MAX_EXACT_POINTS {
        return Err(Error::Validation(format!(
            "shadow synthesis would factorize {} points (> {MAX_EXACT_POINTS}); increase gen_resolution",
            xs.len() * ys.len()
        )));
    }
    let points: Vec<(f64, f64)> =
        ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    let chol = factorize_with_jitter(exponential_covariance(&points, spec.sigma, spec.xc), spec.sigma)?;
    let z = DVector::from_fn(points.len(), |_, _| rng.sample(StandardNormal));
    let sample = chol.l() * z;

    // Coarse field indexed [x-node, y-node].
    let coarse = DMatrix::from_fn(xs.len(), ys.len(), |a, b| sample[b * xs.len() + a]);
    if xs.len() == ni && ys.len() == nj {
        return Ok(coarse);
    }

    let locate = |axis: &[f64], t: f64| -> (usize, f64) {
        // Cell index and fractional offset; axis is sorted and covers t.
        let hi = axis.partition_point(|&v| v < t).min(axis.len() - 1).max(1);
        let (a, b) = (axis[hi - 1], axis[hi]);
        (hi - 1, if b > a { ((t - a) / (b - a)).clamp(0.0, 1.0) } else { 0.0 })
    };
    Ok(DMatrix::from_fn(ni, nj, |i, j| {
        let (cx, fx) = locate(&xs, i as f64);
        let (cy, fy) = locate(&ys, j as f64);
        let v00 = coarse[(cx, cy)];
        let v10 = coarse[(cx + 1, cy)];
        let v01 = coarse[(cx, cy + 1)];
        let v11 = coarse[(cx + 1, cy + 1)];
        v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy + v11 * fx * fy
    }))
}

/// Builds the spatial loss field
/// `S(i,j) = max(‖y − z‖₂, d0)^{−η} · 10^{shadow(i,j)/10}` at grid
/// coordinates `y = [i, j]`. `reference_distance` d0 = 0 evaluates the raw
/// power law everywhere.
pub fn gen_slf(
    emitter: &EmitterSpec,
    shadow: &DMatrix<f64>,
    min_clearance: f64,
    reference_distance: f64,
    flat_pathloss: bool,
) -> Result<DMatrix<f64>> {
    let (ni, nj) = shadow.shape();
    if emitter.pathloss_exponent <= 0.0 {
        return Err(Error::Validation("path-loss exponent must be positive".into()));
    }
    let (zx, zy) = (emitter.location[0], emitter.location[1]);
    let mut out = DMatrix::zeros(ni, nj);
    for j in 0..nj {
        for i in 0..ni {
            let dist = ((i as f64 - zx).powi(2) + (j as f64 - zy).powi(2)).sqrt();
            if dist < min_clearance {
                return Err(Error::Validation(format!(
                    "emitter at ({zx}, {zy}) is within {min_clearance} of grid point ({i}, {j})"
                )));
            }
            let pathloss = if flat_pathloss {
                1.0
            } else {
                dist.max(reference_distance).powf(-emitter.pathloss_exponent)
            };
            out[(i, j)] = pathloss * 10f64.powf(shadow[(i, j)] / 10.0);
        }
    }
    Ok(out)
}

/// Draws an emitter location uniformly over the grid extent, rejecting
/// draws closer than `min_clearance` to any grid point (the path-loss term
/// diverges there).
pub fn sample_location(
    extent: (usize, usize),
    min_clearance: f64,
    rng: &mut impl Rng,
) -> Result<[f64; 2]> {
    let (ni, nj) = extent;
    let (hi_x, hi_y) = ((ni - 1) as f64, (nj - 1) as f64);
    for _ in 0..10_000 {
        let x = rng.random_range(0.0..=hi_x);
        let y = rng.random_range(0.0..=hi_y);
        let nearest = ((x - x.round().clamp(0.0, hi_x)).powi(2)
            + (y - y.round().clamp(0.0, hi_y)).powi(2))
        .sqrt();
        if nearest >= min_clearance {
            return Ok([x, y]);
        }
    }
    Err(Error::Validation(format!(
        "could not place an emitter at clearance {min_clearance} from every grid point; \
         the clearance is too large for a unit-spaced grid"
    )))
}

/// Generates the full scenario truth, deterministically from the config seed.
pub fn assemble_ground_truth(cfg: &ScenarioConfig) -> Result<GroundTruth> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shadow_spec = cfg.shadow_spec();

    let mut emitters = Vec::with_capacity(cfg.r);
    let mut slfs = Vec::with_capacity(cfg.r);
    let mut psd = DMatrix::zeros(cfg.k, cfg.r);
    for r in 0..cfg.r {
        let emitter = EmitterSpec {
            location: sample_location((cfg.i, cfg.j), cfg.min_clearance, &mut rng)?,
            pathloss_exponent: rng.random_range(cfg.eta_range.0..=cfg.eta_range.1),
            psd: sample_psd_spec(cfg.k, cfg.amp_range, cfg.width_range, &mut rng),
        };
        let shadow = gen_shadow_field(&shadow_spec, (cfg.i, cfg.j), &mut rng)?;
        let slf = gen_slf(
            &emitter,
            &shadow,
            cfg.min_clearance,
            cfg.pathloss_reference_distance,
            cfg.flat_pathloss,
        )?;
        psd.set_column(r, &gen_psd(&emitter.psd, cfg.k)?);
        emitters.push(emitter);
        slfs.push(slf);
    }

    let map = Tensor3::from_fn((cfg.i, cfg.j, cfg.k), |i, j, k| {
        (0..cfg.r).map(|r| slfs[r][(i, j)] * psd[(k, r)]).sum()
    })?;
    Ok(GroundTruth { slfs, psd, map, emitters, seed: cfg.seed })
}

/// Adds iid Gaussian noise rescaled so the realized SNR
/// `10·log10(‖X‖²_F / ‖N‖²_F)` hits `snr_db` exactly. An infinite `snr_db`
/// returns the input unchanged.
pub fn add_noise(x: &Tensor3, snr_db: f64, rng: &mut impl Rng) -> Result<Tensor3> {
    if snr_db.is_infinite() && snr_db > 0.0 {
        return Ok(x.clone());
    }
    let signal_norm = x.frobenius_norm();
    if signal_norm == 0.0 {
        return Err(Error::Validation("SNR undefined for an all-zero tensor".into()));
    }
    let raw: Vec<f64> = (0..x.data().len()).map(|_| rng.sample(StandardNormal)).collect();
    let raw_norm = neumaier_sum(raw.iter().map(|v| v * v)).sqrt();
    if raw_norm == 0.0 {
        return Err(Error::Numerical("degenerate zero noise draw".into()));
    }
    let scale = signal_norm / (raw_norm * 10f64.powf(snr_db / 20.0));
    let data = x.data().iter().zip(&raw).map(|(s, n)| s + scale * n).collect();
    Tensor3::new(x.dims(), data)
}

/// Fraction of nuclear norm captured by the top `i` singular values:
/// `τ_i = Σ_{k≤i} μ_k / Σ_k μ_k` (`i` is 1-based).
pub fn lowrank_energy_ratio(m: &DMatrix<f64>, i: usize) -> Result<f64> {
    let min_dim = m.nrows().min(m.ncols());
    if i == 0 || i > min_dim {
        return Err(Error::Usage(format!("index {i} out of range 1..={min_dim}")));
    }
    let sv = m.singular_values();
    let total: f64 = sv.iter().sum();
    if total == 0.0 {
        return Err(Error::Numerical("zero matrix has no singular-value energy".into()));
    }
    Ok(sv.iter().take(i).sum::<f64>() / total)
}
