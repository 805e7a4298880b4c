//! Seeded Monte-Carlo experiment harness: scenario generation → sampling →
//! solve → disaggregation → NAE metrics, over independent trials with
//! derived seeds (`master_seed + trial_index`), aggregated by medians.
//!
//! Outputs are bit-identical across reruns of the same config; wall-clock
//! timings are kept in a separate file so the metric files stay
//! deterministic.

use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, Observations};
use crate::posteval::{self, DisaggregationOptions};
use crate::sampling::{self, FiberGroupPlan, SlabPlan};
use crate::scenario::{self, ScenarioConfig};
use crate::solver::{self, InitStrategy, SolverConfig};
use crate::tensor::Tensor3;

/// How observations are acquired in each trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SamplingSpec {
    /// Two-sensor slab sampling; either an explicit plan or equispaced
    /// `m` rows / `n` columns with both sensors covering all bands.
    Slab {
        #[serde(default)]
        plan: Option<SlabPlan>,
        #[serde(default)]
        m: Option<usize>,
        #[serde(default)]
        n: Option<usize>,
    },
    Groups { plan: FiberGroupPlan },
    RandomFiber { q: usize },
    /// Pre-collected measurements (no ground truth, metrics are NaN).
    ExternalObs { path: String },
}

/// Solver settings as they appear in experiment configs (the emitter count
/// R comes from the scenario).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(default = "default_lambda")]
    pub lambda: [f64; 3],
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

fn default_lambda() -> [f64; 3] {
    [1e-2; 3]
}
fn default_max_iters() -> usize {
    100
}
fn default_rel_tol() -> f64 {
    1e-3
}
fn default_restarts() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_schema() -> u32 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsToggle {
    #[serde(default = "default_true")]
    pub nae_c: bool,
    #[serde(default = "default_true")]
    pub nae_s: bool,
    #[serde(default = "default_true")]
    pub nae_x: bool,
}

impl Default for MetricsToggle {
    fn default() -> Self {
        Self { nae_c: true, nae_s: true, nae_x: true }
    }
}

/// One config-driven Monte-Carlo experiment. Unknown JSON keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema: u32,
    pub scenario: ScenarioConfig,
    pub sampling: SamplingSpec,
    pub solver: SolverSpec,
    /// Gaussian noise level; omit for noiseless data.
    #[serde(default)]
    pub snr_db: Option<f64>,
    /// TPS-refine the spatial fields before evaluation.
    #[serde(default = "default_true")]
    pub refine: bool,
    #[serde(default)]
    pub metrics: MetricsToggle,
    pub trials: usize,
    pub master_seed: u64,
    pub output_dir: String,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema != 1 {
            return Err(Error::Validation(format!(
                "unsupported experiment schema {} (expected 1)",
                self.schema
            )));
        }
        if self.trials == 0 {
            return Err(Error::Validation("trials must be at least 1".into()));
        }
        self.scenario.validate()?;
        self.solver_config(0).validate()?;
        Ok(())
    }

    fn solver_config(&self, seed: u64) -> SolverConfig {
        SolverConfig {
            l: self.solver.l,
            r: self.scenario.r,
            lambda: self.solver.lambda,
            max_iters: self.solver.max_iters,
            rel_tol: self.solver.rel_tol,
            restarts: self.solver.restarts,
            init: InitStrategy::Random,
            seed,
        }
    }
}

/// Metrics of one Monte-Carlo trial.
#[derive(Debug, Clone, Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub nae_c: f64,
    pub nae_s: f64,
    pub nae_x: f64,
    pub final_loss: f64,
    pub iterations: usize,
    pub wall_ms: f64,
    pub aborted: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricSummary {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub schema: u32,
    pub trials: usize,
    pub aborted: usize,
    pub nae_c: MetricSummary,
    pub nae_s: MetricSummary,
    pub nae_x: MetricSummary,
    pub final_loss: MetricSummary,
    pub median_iterations: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

fn summarize(values: impl Iterator<Item = f64>) -> MetricSummary {
    let mut vals: Vec<f64> = values.filter(|v| v.is_finite()).collect();
    vals.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    MetricSummary {
        median: quantile(&vals, 0.5),
        q1: quantile(&vals, 0.25),
        q3: quantile(&vals, 0.75),
    }
}

/// Runs one trial end to end; deterministic in (config, trial seed).
pub fn run_trial(config: &ExperimentConfig, trial: usize) -> Result<TrialRecord> {
    use rand::SeedableRng;
    let seed = config.master_seed.wrapping_add(trial as u64);
    let start = std::time::Instant::now();

    // External observations skip truth generation entirely.
    if let SamplingSpec::ExternalObs { path } = &config.sampling {
        let obs = io::read_observations(path)?;
        let mut solver_cfg = config.solver_config(seed);
        solver_cfg.r = config.scenario.r;
        let result = solver::bcd_solve_masked(&obs.y, &obs.mask, &solver_cfg)?;
        return Ok(TrialRecord {
            trial,
            seed,
            nae_c: f64::NAN,
            nae_s: f64::NAN,
            nae_x: f64::NAN,
            final_loss: result.final_loss(),
            iterations: result.iterations,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            aborted: false,
        });
    }

    let mut scenario_cfg = config.scenario.clone();
    scenario_cfg.seed = seed;
    let truth = scenario::assemble_ground_truth(&scenario_cfg)?;
    let dims = truth.map.dims();

    // Dedicated substreams keep noise/mask draws independent of the solver
    // restart streams (which use low stream ids on the same seed).
    let mut noise_rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(2_000_000);
    let mut mask_rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    mask_rng.set_stream(2_000_001);

    let noisy = match config.snr_db {
        Some(snr) => scenario::add_noise(&truth.map, snr, &mut noise_rng)?,
        None => truth.map.clone(),
    };

    let solver_cfg = config.solver_config(seed);
    let (result, obs): (solver::SolveResult, Observations) = match &config.sampling {
        SamplingSpec::Slab { plan, m, n } => {
            let plan = match plan {
                Some(p) => p.clone(),
                None => SlabPlan::equispaced(
                    dims,
                    m.ok_or_else(|| Error::Usage("slab sampling needs a plan or m/n".into()))?,
                    n.ok_or_else(|| Error::Usage("slab sampling needs a plan or m/n".into()))?,
                )?,
            };
            let (x1, x2) = sampling::slab_subtensors(&noisy, &plan)?;
            let result = solver::bcd_solve(&x1, &x2, &plan, dims, &solver_cfg)?;
            let (y, mask) = sampling::slab_observations(&x1, &x2, &plan, dims)?;
            (result, Observations { y, mask })
        }
        SamplingSpec::Groups { plan } => {
            let mask = sampling::plan_to_mask(plan, dims)?;
            let y = masked_values(&noisy, &mask);
            let result = solver::bcd_solve_masked(&y, &mask, &solver_cfg)?;
            (result, Observations { y, mask })
        }
        SamplingSpec::RandomFiber { q } => {
            let mask = sampling::random_fiber_mask(dims, *q, &mut mask_rng)?;
            let y = masked_values(&noisy, &mask);
            let result = solver::bcd_solve_masked(&y, &mask, &solver_cfg)?;
            (result, Observations { y, mask })
        }
        SamplingSpec::ExternalObs { .. } => unreachable!("handled above"),
    };

    let opts = DisaggregationOptions {
        refine: config.refine,
        tps_smoothing: if config.snr_db.is_some() { 1e-3 } else { 0.0 },
        ..Default::default()
    };
    let mut disagg = posteval::disaggregate_full(&result.factors, &obs.y, &obs.mask, &opts)?;
    disagg.match_to_truth(&truth.psd)?;

    let nae_c = if config.metrics.nae_c {
        posteval::nae_psd(&truth.psd, &disagg.psd_hat)?
    } else {
        f64::NAN
    };
    let nae_s = if config.metrics.nae_s {
        posteval::nae_slf(&truth.slfs, &disagg.slfs_hat)?
    } else {
        f64::NAN
    };
    let nae_x = if config.metrics.nae_x {
        posteval::nae_map(&truth.map, &disagg.map_hat)?
    } else {
        f64::NAN
    };

    Ok(TrialRecord {
        trial,
        seed,
        nae_c,
        nae_s,
        nae_x,
        final_loss: result.final_loss(),
        iterations: result.iterations,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        aborted: false,
    })
}

/// Copy of the data with unobserved cells zeroed, so that solver input never
/// leaks unsampled truth.
fn masked_values(x: &Tensor3, mask: &sampling::FiberMask) -> Tensor3 {
    let mut y = Tensor3::zeros(x.dims());
    for (idx, w) in mask.weights().data().iter().enumerate() {
        if *w > 0.0 {
            y.data_mut()[idx] = x.data()[idx];
        }
    }
    y
}

fn aborted_record(trial: usize, seed: u64, wall_ms: f64) -> TrialRecord {
    TrialRecord {
        trial,
        seed,
        nae_c: f64::NAN,
        nae_s: f64::NAN,
        nae_x: f64::NAN,
        final_loss: f64::NAN,
        iterations: 0,
        wall_ms,
        aborted: true,
    }
}

fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v}")
    }
}

/// Runs all trials (up to `jobs` in parallel), writes `trials.csv`,
/// `timings.csv`, and `summary.json` into the output directory, and returns
/// the summary. Records are written in trial order regardless of completion
/// order; reruns produce byte-identical metric files.
pub fn run_experiment(config: &ExperimentConfig, jobs: usize) -> Result<ExperimentSummary> {
    config.validate()?;
    let records = run_all_trials(config, jobs.max(1));

    let out_dir = Path::new(&config.output_dir);
    std::fs::create_dir_all(out_dir)?;

    let mut trials_csv = String::from("trial,seed,nae_c,nae_s,nae_x,final_loss,iterations\n");
    let mut timings_csv = String::from("trial,wall_ms\n");
    for rec in &records {
        trials_csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            rec.trial,
            rec.seed,
            fmt_metric(rec.nae_c),
            fmt_metric(rec.nae_s),
            fmt_metric(rec.nae_x),
            fmt_metric(rec.final_loss),
            rec.iterations
        ));
        timings_csv.push_str(&format!("{},{:.3}\n", rec.trial, rec.wall_ms));
    }
    std::fs::write(out_dir.join("trials.csv"), trials_csv)?;
    std::fs::write(out_dir.join("timings.csv"), timings_csv)?;

    let ok = |rec: &&TrialRecord| !rec.aborted;
    let summary = ExperimentSummary {
        schema: 1,
        trials: config.trials,
        aborted: records.iter().filter(|r| r.aborted).count(),
        nae_c: summarize(records.iter().filter(ok).map(|r| r.nae_c)),
        nae_s: summarize(records.iter().filter(ok).map(|r| r.nae_s)),
        nae_x: summarize(records.iter().filter(ok).map(|r| r.nae_x)),
        final_loss: summarize(records.iter().filter(ok).map(|r| r.final_loss)),
        median_iterations: summarize(
            records.iter().filter(ok).map(|r| r.iterations as f64),
        )
        .median,
    };
    io::write_json(out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn run_all_trials(config: &ExperimentConfig, jobs: usize) -> Vec<TrialRecord> {
    let trials = config.trials;
    if jobs <= 1 || trials <= 1 {
        return (0..trials)
            .map(|t| {
                run_trial(config, t).unwrap_or_else(|_| {
                    aborted_record(t, config.master_seed.wrapping_add(t as u64), 0.0)
                })
            })
            .collect();
    }

    let next = Mutex::new(0usize);
    let results: Mutex<Vec<Option<TrialRecord>>> = Mutex::new(vec![None; trials]);
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(trials) {
            scope.spawn(|| loop {
                let t = {
                    let mut guard = next.lock().unwrap();
                    if *guard >= trials {
                        return;
                    }
                    let t = *guard;
                    *guard += 1;
                    t
                };
                let rec = run_trial(config, t).unwrap_or_else(|_| {
                    aborted_record(t, config.master_seed.wrapping_add(t as u64), 0.0)
                });
                results.lock().unwrap()[t] = Some(rec);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every trial completed"))
        .collect()
}

// TrialRecord.clone() is needed for the Mutex<Vec<Option<_>>> initialization.
impl TrialRecord {
    pub fn csv_header() -> &'static str {
        "trial,seed,nae_c,nae_s,nae_x,final_loss,iterations"
    }
}
