//! Command-line toolkit: scenario simulation, sampling, coupled BCD solves,
//! evaluation, identifiability checks, Monte-Carlo sweeps, and PGM
//! rendering. File formats are documented in the README.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use radiomap::error::{Error, Result};
use radiomap::experiment::{run_experiment, ExperimentConfig};
use radiomap::io::{self, PlanFile};
use radiomap::posteval::{self, DisaggregationOptions};
use radiomap::sampling::{self, CheckReport};
use radiomap::scenario::{assemble_ground_truth, ScenarioConfig};
use radiomap::solver::{self, InitStrategy, SolveResult, SolverConfig, Termination};
use radiomap::tensor::Ll1Factors;

#[derive(Parser)]
#[command(
    name = "radiomap",
    about = "Multi-band radio map reconstruction and per-emitter disaggregation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ground-truth scenario from a JSON config.
    Simulate(SimulateArgs),
    /// Sample a tensor file according to a plan (or a random fiber mask).
    Sample(SampleArgs),
    /// Coupled-slab BCD solve from two subtensor files.
    SolveSlab(SolveSlabArgs),
    /// Masked BCD solve from an observation list file.
    SolveMask(SolveMaskArgs),
    /// Compare an estimate directory against a truth directory (NAE metrics).
    Eval(EvalArgs),
    /// Evaluate the identifiability conditions of a sampling plan.
    Check(CheckArgs),
    /// Run a config-driven Monte-Carlo experiment.
    Mc(McArgs),
    /// Render a CSV matrix as an 8-bit grayscale PGM heatmap.
    Render(RenderArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario config JSON ({I, J, K, R, sigma, xc, seed, …}).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SampleArgs {
    /// Input tensor in the text format.
    #[arg(long)]
    x: PathBuf,
    /// Sampling plan JSON (slab or fiber-group).
    #[arg(long, conflicts_with = "random_q")]
    plan: Option<PathBuf>,
    /// Random fiber sampling: entries per column of each frontal slab.
    #[arg(long)]
    random_q: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SolveSlabArgs {
    #[arg(long)]
    x1: PathBuf,
    #[arg(long)]
    x2: PathBuf,
    /// Slab plan JSON; also fixes the full tensor dims via --dims.
    #[arg(long)]
    plan: PathBuf,
    /// Full tensor dims as I,J,K.
    #[arg(long, value_parser = parse_dims)]
    dims: (usize, usize, usize),
    /// Solver config JSON ({L, R, lambda, max_iters, rel_tol, restarts, seed}).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SolveMaskArgs {
    /// Observation list file (`I J K` header, `i j k value [weight]` lines).
    #[arg(long)]
    obs: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Truth directory (C.csv, S_1.csv…, X.tns), as written by `simulate`.
    #[arg(long)]
    truth: PathBuf,
    /// Estimate directory (A.csv, B.csv, C.csv, result.json), as written by
    /// the solve commands.
    #[arg(long)]
    est: PathBuf,
    /// Refine spatial fields from observations before evaluating.
    #[arg(long)]
    refine: bool,
    /// Observation list used for refinement.
    #[arg(long, requires = "refine")]
    obs: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    /// Plan JSON; omit for the random-fiber check.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, value_parser = parse_dims)]
    dims: (usize, usize, usize),
    #[arg(long = "L")]
    l: usize,
    #[arg(long = "R")]
    r: usize,
    /// For group plans: check the anchored variant (one full-spectrum group).
    #[arg(long)]
    anchor: bool,
    /// Random-fiber check: entries per column.
    #[arg(long)]
    q: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
}

#[derive(Args)]
struct McArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Maximum concurrent trials.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// The CSV has a header row to skip.
    #[arg(long)]
    header: bool,
}

fn parse_dims(text: &str) -> std::result::Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err("expected I,J,K".into());
    }
    let parse = |s: &str| s.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok((parse(parts[0])?, parse(parts[1])?, parse(parts[2])?))
}

/// Solver config file for the solve subcommands.
#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct SolveFileConfig {
    #[serde(rename = "L")]
    l: usize,
    #[serde(rename = "R")]
    r: usize,
    #[serde(default = "default_lambda")]
    lambda: [f64; 3],
    #[serde(default = "default_max_iters")]
    max_iters: usize,
    #[serde(default = "default_rel_tol")]
    rel_tol: f64,
    #[serde(default = "default_restarts")]
    restarts: usize,
    #[serde(default)]
    seed: u64,
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

impl SolveFileConfig {
    fn to_solver_config(&self) -> SolverConfig {
        SolverConfig {
            l: self.l,
            r: self.r,
            lambda: self.lambda,
            max_iters: self.max_iters,
            rel_tol: self.rel_tol,
            restarts: self.restarts,
            init: InitStrategy::Random,
            seed: self.seed,
        }
    }
}

fn write_solve_outputs(out: &Path, result: &SolveResult, cfg: &SolveFileConfig) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let state = solver::FactorState::from_factors(&result.factors)?;
    io::write_matrix_csv(out.join("A.csv"), &state.a)?;
    io::write_matrix_csv(out.join("B.csv"), &state.b)?;
    io::write_matrix_csv(out.join("C.csv"), &state.c)?;
    let mut loss_csv = String::from("iteration,loss\n");
    for (t, loss) in result.loss_trace.iter().enumerate() {
        loss_csv.push_str(&format!("{t},{loss}\n"));
    }
    std::fs::write(out.join("loss.csv"), loss_csv)?;
    io::write_json(
        out.join("result.json"),
        &json!({
            "L": cfg.l,
            "R": cfg.r,
            "seed": cfg.seed,
            "final_loss": result.final_loss(),
            "iterations": result.iterations,
            "termination": match result.termination {
                Termination::Tol => "tol",
                Termination::MaxIters => "max_iters",
            },
            "restart_index": result.restart_index,
            "events": result.events,
        }),
    )?;
    Ok(())
}

fn load_estimate(dir: &Path) -> Result<Ll1Factors> {
    let a = io::read_matrix_csv(dir.join("A.csv"), false)?;
    let b = io::read_matrix_csv(dir.join("B.csv"), false)?;
    let c = io::read_matrix_csv(dir.join("C.csv"), false)?;
    let meta: serde_json::Value = io::read_json(dir.join("result.json"))?;
    let l = meta["L"]
        .as_u64()
        .ok_or_else(|| Error::Validation("result.json is missing L".into()))? as usize;
    let r = c.ncols();
    Ll1Factors::new(
        radiomap::linalg::split_blocks(&a, l, r)?,
        radiomap::linalg::split_blocks(&b, l, r)?,
        c,
    )
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let mut config: ScenarioConfig = io::read_json(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let truth = assemble_ground_truth(&config)?;
    std::fs::create_dir_all(&args.out)?;
    io::write_matrix_csv(args.out.join("C.csv"), &truth.psd)?;
    for (r, slf) in truth.slfs.iter().enumerate() {
        io::write_matrix_csv(args.out.join(format!("S_{}.csv", r + 1)), slf)?;
    }
    io::write_tensor(args.out.join("X.tns"), &truth.map)?;
    io::write_json(args.out.join("emitters.json"), &truth.emitters)?;
    println!(
        "wrote scenario (I={}, J={}, K={}, R={}) to {}",
        config.i,
        config.j,
        config.k,
        config.r,
        args.out.display()
    );
    Ok(())
}

fn cmd_sample(args: &SampleArgs) -> Result<()> {
    let x = io::read_tensor(&args.x)?;
    std::fs::create_dir_all(&args.out)?;
    match (&args.plan, args.random_q) {
        (Some(plan_path), None) => match io::read_json::<PlanFile>(plan_path)? {
            PlanFile::Slab(plan) => {
                let (x1, x2) = sampling::slab_subtensors(&x, &plan)?;
                io::write_tensor(args.out.join("x1.tns"), &x1)?;
                io::write_tensor(args.out.join("x2.tns"), &x2)?;
                let (y, mask) = sampling::slab_observations(&x1, &x2, &plan, x.dims())?;
                io::write_observations(
                    args.out.join("obs.txt"),
                    &io::Observations { y, mask },
                )?;
                println!("wrote x1.tns, x2.tns, obs.txt to {}", args.out.display());
            }
            PlanFile::Groups(plan) => {
                let mask = sampling::plan_to_mask(&plan, x.dims())?;
                let y = mask_values(&x, &mask);
                io::write_observations(
                    args.out.join("obs.txt"),
                    &io::Observations { y, mask },
                )?;
                println!("wrote obs.txt to {}", args.out.display());
            }
        },
        (None, Some(q)) => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
            let mask = sampling::random_fiber_mask(x.dims(), q, &mut rng)?;
            let y = mask_values(&x, &mask);
            io::write_observations(args.out.join("obs.txt"), &io::Observations { y, mask })?;
            println!("wrote obs.txt to {}", args.out.display());
        }
        _ => {
            return Err(Error::Usage(
                "provide exactly one of --plan or --random-q".into(),
            ))
        }
    }
    Ok(())
}

fn mask_values(x: &radiomap::tensor::Tensor3, mask: &sampling::FiberMask) -> radiomap::tensor::Tensor3 {
    let mut y = radiomap::tensor::Tensor3::zeros(x.dims());
    for (idx, w) in mask.weights().data().iter().enumerate() {
        if *w > 0.0 {
            y.data_mut()[idx] = x.data()[idx];
        }
    }
    y
}

fn cmd_solve_slab(args: &SolveSlabArgs) -> Result<()> {
    let x1 = io::read_tensor(&args.x1)?;
    let x2 = io::read_tensor(&args.x2)?;
    let plan = match io::read_json::<PlanFile>(&args.plan)? {
        PlanFile::Slab(p) => p,
        PlanFile::Groups(_) => {
            return Err(Error::Usage("solve-slab needs a slab plan".into()))
        }
    };
    let cfg: SolveFileConfig = io::read_json(&args.config)?;
    let result = solver::bcd_solve(&x1, &x2, &plan, args.dims, &cfg.to_solver_config())?;
    write_solve_outputs(&args.out, &result, &cfg)?;
    println!(
        "solved: final loss {:.6e} after {} iterations ({})",
        result.final_loss(),
        result.iterations,
        args.out.display()
    );
    Ok(())
}

fn cmd_solve_mask(args: &SolveMaskArgs) -> Result<()> {
    let obs = io::read_observations(&args.obs)?;
    let cfg: SolveFileConfig = io::read_json(&args.config)?;
    let result = solver::bcd_solve_masked(&obs.y, &obs.mask, &cfg.to_solver_config())?;
    write_solve_outputs(&args.out, &result, &cfg)?;
    println!(
        "solved: final loss {:.6e} after {} iterations ({})",
        result.final_loss(),
        result.iterations,
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let c_true = io::read_matrix_csv(args.truth.join("C.csv"), false)?;
    let r = c_true.ncols();
    let mut s_true = Vec::with_capacity(r);
    for idx in 1..=r {
        s_true.push(io::read_matrix_csv(args.truth.join(format!("S_{idx}.csv")), false)?);
    }
    let x_true = io::read_tensor(args.truth.join("X.tns"))?;
    let factors = load_estimate(&args.est)?;

    let (obs, opts) = match (&args.obs, args.refine) {
        (Some(path), true) => (
            io::read_observations(path)?,
            DisaggregationOptions { refine: true, ..Default::default() },
        ),
        _ => {
            let dims = factors.dims();
            (
                io::Observations {
                    y: radiomap::tensor::Tensor3::zeros(dims),
                    mask: sampling::FiberMask::new(radiomap::tensor::Tensor3::zeros(dims))?,
                },
                DisaggregationOptions { refine: false, ..Default::default() },
            )
        }
    };
    let mut disagg = posteval::disaggregate_full(&factors, &obs.y, &obs.mask, &opts)?;
    disagg.match_to_truth(&c_true)?;
    let nae_c = posteval::nae_psd(&c_true, &disagg.psd_hat)?;
    let nae_s = posteval::nae_slf(&s_true, &disagg.slfs_hat)?;
    let nae_x = posteval::nae_map(&x_true, &disagg.map_hat)?;
    println!("{nae_c},{nae_s},{nae_x}");
    Ok(())
}

fn print_report(report: &CheckReport) {
    let width = report.clauses.iter().map(|c| c.condition.len()).max().unwrap_or(10);
    println!("{:<width$}  {:>12}  {:>12}  pass", "condition", "lhs", "threshold");
    for clause in &report.clauses {
        println!(
            "{:<width$}  {:>12.4}  {:>12.4}  {}",
            clause.condition,
            clause.lhs,
            clause.threshold,
            if clause.pass { "yes" } else { "NO" }
        );
    }
    if let Some(witness) = &report.witness {
        let shown: Vec<String> = witness.iter().map(|d| (d + 1).to_string()).collect();
        println!("witness ordering (1-based): {}", shown.join(" "));
    }
    println!(
        "satisfied: {}  [{}]",
        if report.satisfied { "yes" } else { "no" },
        report.disclaimer
    );
}

fn cmd_check(args: &CheckArgs) -> Result<bool> {
    let report = match (&args.plan, args.q) {
        (Some(path), None) => match io::read_json::<PlanFile>(path)? {
            PlanFile::Slab(plan) => {
                sampling::check_slab_identifiability(&plan, args.dims, args.l, args.r)?
            }
            PlanFile::Groups(plan) => {
                if args.anchor {
                    sampling::check_anchor_identifiability(&plan, args.dims, args.l, args.r)?
                } else {
                    sampling::check_group_identifiability(&plan, args.dims, args.l, args.r)?
                }
            }
        },
        (None, Some(q)) => sampling::check_random_fiber(args.dims, args.l, args.r, q, args.epsilon)?,
        _ => return Err(Error::Usage("provide exactly one of --plan or --q".into())),
    };
    print_report(&report);
    Ok(report.satisfied)
}

fn cmd_mc(args: &McArgs) -> Result<()> {
    let mut config: ExperimentConfig = io::read_json(&args.config)?;
    if let Ok(seed) = std::env::var("RADIOMAP_SEED") {
        config.master_seed = seed
            .parse()
            .map_err(|e| Error::Usage(format!("RADIOMAP_SEED must be an integer: {e}")))?;
    }
    let summary = run_experiment(&config, args.jobs)?;
    println!(
        "trials {} (aborted {}): median NAE_C {:.6}, NAE_S {:.6}, NAE_X {:.6} -> {}",
        summary.trials,
        summary.aborted,
        summary.nae_c.median,
        summary.nae_s.median,
        summary.nae_x.median,
        config.output_dir
    );
    Ok(())
}

fn cmd_render(args: &RenderArgs) -> Result<()> {
    let m = io::read_matrix_csv(&args.matrix, args.header)?;
    io::write_pgm(&args.out, &m)?;
    println!("wrote {}x{} heatmap to {}", m.nrows(), m.ncols(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome: Result<bool> = match &cli.command {
        Command::Simulate(args) => cmd_simulate(args).map(|()| true),
        Command::Sample(args) => cmd_sample(args).map(|()| true),
        Command::SolveSlab(args) => cmd_solve_slab(args).map(|()| true),
        Command::SolveMask(args) => cmd_solve_mask(args).map(|()| true),
        Command::Eval(args) => cmd_eval(args).map(|()| true),
        Command::Check(args) => cmd_check(args),
        Command::Mc(args) => cmd_mc(args).map(|()| true),
        Command::Render(args) => cmd_render(args).map(|()| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Error::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}
