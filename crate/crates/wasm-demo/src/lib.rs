//! Browser demo bindings. Three interactive operations, each taking and
//! returning JSON strings so the page needs no generated TypeScript:
//!
//! * [`demo_simulate`] — ground-truth scenario: per-emitter fields, spectra,
//!   and one frontal slab of the assembled map.
//! * [`demo_solve`] — sample the map (slabs or random fibers), run the BCD
//!   solver, disaggregate, and report fields, spectra, NAE metrics, and the
//!   loss trace.
//! * [`demo_check`] — identifiability report for the chosen sampling plan.
//!
//! Build with `wasm-pack build --target web crates/wasm-demo`; the static
//! page in `www/` loads the generated module.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use radiomap::error::Result;
use radiomap::posteval::{self, DisaggregationOptions};
use radiomap::sampling::{self, CheckReport, SlabPlan};
use radiomap::scenario::{assemble_ground_truth, GroundTruth, ScenarioConfig};
use radiomap::solver::{self, SolverConfig};
use radiomap::tensor::Tensor3;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoScenario {
    #[serde(default = "default_grid")]
    grid: usize,
    #[serde(default = "default_bands")]
    bands: usize,
    #[serde(default = "default_emitters")]
    emitters: usize,
    #[serde(default = "default_sigma")]
    sigma: f64,
    #[serde(default = "default_xc")]
    xc: f64,
    #[serde(default)]
    seed: u64,
}

fn default_grid() -> usize {
    41
}
fn default_bands() -> usize {
    32
}
fn default_emitters() -> usize {
    2
}
fn default_sigma() -> f64 {
    4.0
}
fn default_xc() -> f64 {
    30.0
}

impl DemoScenario {
    fn scenario_config(&self) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::defaults(self.bands.clamp(4, 128), self.emitters.clamp(1, 4), self.seed);
        cfg.i = self.grid.clamp(16, 101);
        cfg.j = cfg.i;
        cfg.sigma = self.sigma.clamp(0.0, 12.0);
        cfg.xc = self.xc.clamp(1.0, 200.0);
        cfg.gen_resolution = if cfg.i <= 48 { 2 } else { 4 };
        cfg
    }
}

#[derive(Serialize)]
struct MatrixOut {
    rows: usize,
    cols: usize,
    /// Row-major values.
    data: Vec<f64>,
}

impl MatrixOut {
    fn from(m: &DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(m[(i, j)]);
            }
        }
        Self { rows, cols, data }
    }
}

fn slab_out(t: &Tensor3, k: usize) -> MatrixOut {
    MatrixOut::from(&t.frontal_slab(k.min(t.dims().2 - 1)))
}

#[derive(Serialize)]
struct SimulateOut {
    grid: usize,
    bands: usize,
    emitters: Vec<[f64; 2]>,
    slfs: Vec<MatrixOut>,
    /// K×R spectra, row-major.
    psd: MatrixOut,
    map_slab: MatrixOut,
    slab_band: usize,
}

fn simulate_impl(config_json: &str) -> Result<String> {
    let demo: DemoScenario = serde_json::from_str(config_json)?;
    let cfg = demo.scenario_config();
    let truth = assemble_ground_truth(&cfg)?;
    let slab_band = strongest_band(&truth);
    let out = SimulateOut {
        grid: cfg.i,
        bands: cfg.k,
        emitters: truth.emitters.iter().map(|e| e.location).collect(),
        slfs: truth.slfs.iter().map(MatrixOut::from).collect(),
        psd: MatrixOut::from(&truth.psd),
        map_slab: slab_out(&truth.map, slab_band),
        slab_band,
    };
    Ok(serde_json::to_string(&out)?)
}

fn strongest_band(truth: &GroundTruth) -> usize {
    let mut best = (0usize, f64::NEG_INFINITY);
    for k in 0..truth.psd.nrows() {
        let power: f64 = truth.psd.row(k).iter().sum();
        if power > best.1 {
            best = (k, power);
        }
    }
    best.0
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoSolve {
    #[serde(flatten)]
    scenario: DemoScenario,
    /// "slab" or "random-fiber".
    #[serde(default = "default_mode")]
    mode: String,
    #[serde(default = "default_m")]
    m: usize,
    #[serde(default = "default_n")]
    n: usize,
    /// Random-fiber samples per column.
    #[serde(default = "default_q")]
    q: usize,
    #[serde(default = "default_l")]
    l: usize,
    #[serde(default)]
    snr_db: Option<f64>,
    #[serde(default = "default_restarts")]
    restarts: usize,
}

fn default_mode() -> String {
    "slab".into()
}
fn default_m() -> usize {
    8
}
fn default_n() -> usize {
    5
}
fn default_q() -> usize {
    12
}
fn default_l() -> usize {
    2
}
fn default_restarts() -> usize {
    2
}

#[derive(Serialize)]
struct SolveOut {
    grid: usize,
    bands: usize,
    slab_band: usize,
    emitters: Vec<[f64; 2]>,
    true_slfs: Vec<MatrixOut>,
    est_slfs: Vec<MatrixOut>,
    true_psd: MatrixOut,
    est_psd: MatrixOut,
    true_map_slab: MatrixOut,
    est_map_slab: MatrixOut,
    /// 1 where at least one band is observed at the location.
    sample_mask: MatrixOut,
    nae_c: f64,
    nae_s: f64,
    nae_x: f64,
    iterations: usize,
    loss_trace: Vec<f64>,
}

fn solve_impl(config_json: &str) -> Result<String> {
    let demo: DemoSolve = serde_json::from_str(config_json)?;
    let cfg = demo.scenario.scenario_config();
    let truth = assemble_ground_truth(&cfg)?;
    let dims = truth.map.dims();

    let mut noise_rng = rand_chacha_rng(cfg.seed, 2_000_000);
    let observed = match demo.snr_db {
        Some(snr) if snr.is_finite() => radiomap::scenario::add_noise(&truth.map, snr, &mut noise_rng)?,
        _ => truth.map.clone(),
    };

    let mut solver_cfg = SolverConfig::new(demo.l.clamp(1, 4), cfg.r);
    solver_cfg.seed = cfg.seed;
    solver_cfg.restarts = demo.restarts.clamp(1, 8);
    solver_cfg.max_iters = 150;

    let (result, y, mask) = if demo.mode == "random-fiber" {
        let mut mask_rng = rand_chacha_rng(cfg.seed, 2_000_001);
        let q = demo.q.clamp(1, dims.0);
        let mask = sampling::random_fiber_mask(dims, q, &mut mask_rng)?;
        let mut y = Tensor3::zeros(dims);
        for (idx, w) in mask.weights().data().iter().enumerate() {
            if *w > 0.0 {
                y.data_mut()[idx] = observed.data()[idx];
            }
        }
        let result = solver::bcd_solve_masked(&y, &mask, &solver_cfg)?;
        (result, y, mask)
    } else {
        let plan = SlabPlan::equispaced(dims, demo.m.clamp(2, dims.0), demo.n.clamp(2, dims.1))?;
        let (x1, x2) = sampling::slab_subtensors(&observed, &plan)?;
        let result = solver::bcd_solve(&x1, &x2, &plan, dims, &solver_cfg)?;
        let (y, mask) = sampling::slab_observations(&x1, &x2, &plan, dims)?;
        (result, y, mask)
    };

    let opts = DisaggregationOptions {
        tps_smoothing: if demo.snr_db.is_some() { 1e-3 } else { 0.0 },
        ..Default::default()
    };
    let mut disagg = posteval::disaggregate_full(&result.factors, &y, &mask, &opts)?;
    disagg.match_to_truth(&truth.psd)?;

    let nae_c = posteval::nae_psd(&truth.psd, &disagg.psd_hat)?;
    let nae_s = posteval::nae_slf(&truth.slfs, &disagg.slfs_hat)?;
    let nae_x = posteval::nae_map(&truth.map, &disagg.map_hat)?;

    let slab_band = strongest_band(&truth);
    let (ni, nj, _) = dims;
    let mut coverage = DMatrix::zeros(ni, nj);
    for j in 0..nj {
        for i in 0..ni {
            let seen = (0..dims.2).any(|k| mask.weight(i, j, k) > 0.0);
            coverage[(i, j)] = seen as u8 as f64;
        }
    }

    let out = SolveOut {
        grid: ni,
        bands: dims.2,
        slab_band,
        emitters: truth.emitters.iter().map(|e| e.location).collect(),
        true_slfs: truth.slfs.iter().map(MatrixOut::from).collect(),
        est_slfs: disagg.slfs_hat.iter().map(MatrixOut::from).collect(),
        true_psd: MatrixOut::from(&truth.psd),
        est_psd: MatrixOut::from(&disagg.psd_hat),
        true_map_slab: slab_out(&truth.map, slab_band),
        est_map_slab: slab_out(&disagg.map_hat, slab_band),
        sample_mask: MatrixOut::from(&coverage),
        nae_c,
        nae_s,
        nae_x,
        iterations: result.iterations,
        loss_trace: result.loss_trace,
    };
    Ok(serde_json::to_string(&out)?)
}

fn rand_chacha_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoCheck {
    #[serde(default = "default_grid")]
    grid: usize,
    #[serde(default = "default_bands")]
    bands: usize,
    #[serde(default = "default_l")]
    l: usize,
    #[serde(default = "default_emitters")]
    r: usize,
    #[serde(default = "default_mode")]
    mode: String,
    #[serde(default = "default_m")]
    m: usize,
    #[serde(default = "default_n")]
    n: usize,
    #[serde(default = "default_q")]
    q: usize,
}

fn check_impl(config_json: &str) -> Result<String> {
    let demo: DemoCheck = serde_json::from_str(config_json)?;
    let dims = (demo.grid, demo.grid, demo.bands);
    let report: CheckReport = if demo.mode == "random-fiber" {
        sampling::check_random_fiber(dims, demo.l, demo.r, demo.q, 1.0)?
    } else {
        let plan = SlabPlan::equispaced(dims, demo.m.min(demo.grid), demo.n.min(demo.grid))?;
        sampling::check_slab_identifiability(&plan, dims, demo.l, demo.r)?
    };
    Ok(serde_json::to_string(&report)?)
}

fn err_json(e: impl std::fmt::Display) -> String {
    serde_json::json!({ "error": e.to_string() }).to_string()
}

/// Generates a ground-truth scenario and returns fields, spectra, and one
/// map slab as JSON.
#[wasm_bindgen]
pub fn demo_simulate(config_json: &str) -> String {
    simulate_impl(config_json).unwrap_or_else(err_json)
}

/// Samples, solves, and disaggregates one scenario; returns truth vs
/// estimate and the NAE metrics as JSON.
#[wasm_bindgen]
pub fn demo_solve(config_json: &str) -> String {
    solve_impl(config_json).unwrap_or_else(err_json)
}

/// Identifiability report for the configured sampling plan as JSON.
#[wasm_bindgen]
pub fn demo_check(config_json: &str) -> String {
    check_impl(config_json).unwrap_or_else(err_json)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simulate_returns_fields() {
        let out = demo_simulate(r#"{"grid": 24, "bands": 12, "emitters": 2, "seed": 5}"#);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert!(v.get("error").is_none(), "{out}");
        assert_eq!(v["grid"], 24);
        assert_eq!(v["slfs"].as_array().unwrap().len(), 2);
        assert_eq!(v["map_slab"]["rows"], 24);
    }

    #[test]
    fn solve_round_trip_reports_metrics() {
        let out = demo_solve(
            r#"{"grid": 24, "bands": 12, "emitters": 2, "seed": 3,
                "mode": "slab", "m": 8, "n": 6, "l": 2, "restarts": 2}"#,
        );
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert!(v.get("error").is_none(), "{out}");
        assert!(v["nae_c"].as_f64().unwrap() < 1.0);
        assert!(v["loss_trace"].as_array().unwrap().len() >= 2);
        assert_eq!(v["est_slfs"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn check_reports_clauses() {
        let out = demo_check(r#"{"grid": 41, "bands": 16, "l": 2, "r": 2, "m": 8, "n": 6}"#);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert!(v["clauses"].as_array().unwrap().len() >= 2);
        assert_eq!(v["satisfied"], true);
    }

    #[test]
    fn malformed_config_reports_error() {
        let out = demo_simulate("{nonsense");
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert!(v.get("error").is_some());
    }
}
