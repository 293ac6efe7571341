//! Batch front-end: solve, verify, simulate, asymptotics.
//!
//! Every command reads one TOML experiment config, writes CSV/JSON artifacts
//! into the output directory, and echoes the config verbatim next to them.
//! Exit codes: 0 success, 1 verification or statistical failure, 2 usage or
//! config error.

use clap::{Args, Parser, Subcommand};
use robliq_core::asymptotics::{
    self, equivalent_risk_refit, expansion_check, liquidation_rate_monotone, solve_w1_feynman_kac,
    solve_w1_grid,
};
use robliq_core::bounds;
use robliq_core::config::ExperimentConfig;
use robliq_core::control::{self, Measure, SaddleOptions, Weighting};
use robliq_core::io;
use robliq_core::model::validate_assumptions;
use robliq_core::pde::{solve_benchmark, solve_singular};
use robliq_core::{Error as CoreError, ValueSolution};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "robliq",
    about = "Robust optimal-liquidation solver: singular-terminal PDE, bound certificates, asymptotics, and Monte Carlo verification",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory (overrides the config's `output.dir`).
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// RNG seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (overrides the config; 0 = default).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the value surface and write w.csv + meta.json.
    Solve {
        #[command(flatten)]
        common: CommonArgs,
        /// Solve even if sampled assumption checks fail.
        #[arg(long)]
        force: bool,
    },
    /// Check a solved surface against the sub/supersolution bounds and the
    /// terminal decay rates.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory holding w.csv + meta.json.
        #[arg(long)]
        solution: PathBuf,
    },
    /// Simulate the feedback controls and test the saddle inequalities.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        solution: PathBuf,
    },
    /// Small-ambiguity expansion: benchmark, correction, and a theta sweep.
    Asymptotics {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated ambiguity levels (overrides the config).
        #[arg(long, value_delimiter = ',')]
        thetas: Option<Vec<f64>>,
    },
}

/// A command outcome that still produced artifacts: exit 1 instead of 2.
enum RunError {
    Usage(String),
    Failed(String),
}

impl From<CoreError> for RunError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Domain { .. }
            | CoreError::Config(_)
            | CoreError::OutOfDomain { .. }
            | CoreError::Io(_)
            | CoreError::Serde(_) => RunError::Usage(e.to_string()),
            CoreError::Solver { .. } | CoreError::Contraction(_) | CoreError::Verification(_) => {
                RunError::Failed(e.to_string())
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve { common, force } => run_with(common, |ctx| run_solve(ctx, force)),
        Command::Verify { common, solution } => run_with(common, |ctx| run_verify(ctx, &solution)),
        Command::Simulate { common, solution } => {
            run_with(common, |ctx| run_simulate(ctx, &solution))
        }
        Command::Asymptotics { common, thetas } => {
            run_with(common, |ctx| run_asymptotics(ctx, thetas.as_deref()))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(RunError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(RunError::Failed(msg)) => {
            eprintln!("failed: {msg}");
            ExitCode::from(EXIT_FAILED)
        }
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    cfg_text: String,
    cfg_hash: String,
    out_dir: PathBuf,
}

fn run_with(
    common: CommonArgs,
    f: impl FnOnce(&Ctx) -> Result<(), RunError>,
) -> Result<(), RunError> {
    let (mut cfg, cfg_text) = ExperimentConfig::from_path(&common.config)
        .map_err(|e| RunError::Usage(e.to_string()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = common.threads {
        cfg.threads = threads;
    }
    init_threads(cfg.threads);
    let out_dir = common
        .out
        .or_else(|| cfg.output.dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| {
            RunError::Usage("no output directory (flag --out or config output.dir)".into())
        })?;
    std::fs::create_dir_all(&out_dir).map_err(|e| RunError::Usage(e.to_string()))?;
    let cfg_hash = io::config_hash(&cfg_text);
    f(&Ctx { cfg, cfg_text, cfg_hash, out_dir })
}

#[cfg(feature = "parallel")]
fn init_threads(threads: usize) {
    if threads > 0 {
        // a second call in the same process is fine to ignore
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

#[cfg(not(feature = "parallel"))]
fn init_threads(threads: usize) {
    if threads > 1 {
        eprintln!("note: built without the parallel feature; --threads ignored");
    }
}

fn run_solve(ctx: &Ctx, force: bool) -> Result<(), RunError> {
    let params = ctx.cfg.build_params()?;
    let model = ctx.cfg.build_model()?;
    let grid = ctx.cfg.build_grid()?;

    let report = validate_assumptions(
        &model,
        &params,
        &ctx.cfg.space_box(),
        ctx.cfg.assumptions.n_samples,
    )?;
    io::write_json(ctx.out_dir.join("assumptions.json"), &report)?;
    if !report.all_passed() {
        let failing: Vec<String> = report.failures().map(|c| c.id.clone()).collect();
        if force {
            eprintln!("warning: assumption checks failed ({failing:?}); continuing (--force)");
        } else {
            return Err(RunError::Usage(format!(
                "assumption checks failed: {failing:?} (see assumptions.json; --force to override)"
            )));
        }
    }

    let mut sol = solve_singular(&model, &params, &grid, &ctx.cfg.solver)?;
    sol.meta.config_hash = Some(ctx.cfg_hash.clone());
    io::write_solution(&ctx.out_dir, &sol, Some(&ctx.cfg_text))?;
    println!(
        "solved {} nodes; terminal gap constant {:.3e}, error estimate {:.3e}",
        sol.w.len(),
        sol.meta.terminal_gap_constant,
        sol.meta.error_estimate
    );
    Ok(())
}

fn load_solution(ctx: &Ctx, dir: &Path) -> Result<ValueSolution, RunError> {
    let sol = io::read_solution(dir)?;
    match &sol.meta.config_hash {
        Some(h) if *h == ctx.cfg_hash => Ok(sol),
        Some(_) => Err(RunError::Usage(
            "solution was produced from a different config (hash mismatch)".into(),
        )),
        None => Err(RunError::Usage("solution carries no config hash".into())),
    }
}

fn run_verify(ctx: &Ctx, solution: &Path) -> Result<(), RunError> {
    let params = ctx.cfg.build_params()?;
    let model = ctx.cfg.build_model()?;
    let sol = load_solution(ctx, solution)?;

    let consts = bounds::compute_constants(
        &model,
        &params,
        &ctx.cfg.space_box(),
        ctx.cfg.assumptions.n_samples,
        ctx.cfg.verify.sup_inflation,
    )?;
    let slack = ctx.cfg.verify.slack_factor * sol.meta.error_estimate.max(1e-12);
    let cert = bounds::verify_sandwich(&sol, &consts, &model, slack)?;
    let rates = bounds::terminal_rate_fit(&sol, &model)?;
    io::write_json(ctx.out_dir.join("constants.json"), &consts)?;
    io::write_json(ctx.out_dir.join("certificate.json"), &cert)?;
    io::write_json(ctx.out_dir.join("rates.json"), &rates)?;
    std::fs::write(ctx.out_dir.join(io::CONFIG_ECHO), &ctx.cfg_text)
        .map_err(|e| RunError::Usage(e.to_string()))?;

    // terminal decay gates: epsilon - 0.15 for the value (epsilon = 1 in the
    // benchmark case), 1/2 - alpha/beta - 0.15 for the gradient
    let eps_eff = if sol.meta.hamiltonian_enabled && params.theta > 0.0 {
        params.epsilon
    } else {
        1.0
    };
    let value_gate = eps_eff - 0.15;
    let grad_gate = 0.5 - params.alpha / params.beta - 0.15;
    let rates_ok = if rates.degenerate {
        true
    } else {
        let v_ok = rates.rate_value.is_some_and(|r| r >= value_gate);
        let g_ok = if sol.meta.hamiltonian_enabled && params.theta > 0.0 {
            rates.rate_gradient.is_some_and(|r| r >= grad_gate)
        } else {
            true
        };
        v_ok && g_ok
    };

    println!(
        "sandwich: {} ({} nodes, {} violations, slack {:.3e}); rates: value {:?} (gate {value_gate:.3}), gradient {:?}",
        if cert.passed { "pass" } else { "FAIL" },
        cert.nodes_checked,
        cert.violation_count,
        cert.slack,
        rates.rate_value,
        rates.rate_gradient,
    );
    if cert.passed && rates_ok {
        Ok(())
    } else {
        Err(RunError::Failed(format!(
            "verification failed: sandwich {} violations, rates ok = {rates_ok}",
            cert.violation_count
        )))
    }
}

fn run_simulate(ctx: &Ctx, solution: &Path) -> Result<(), RunError> {
    let params = ctx.cfg.build_params()?;
    let model = ctx.cfg.build_model()?;
    let sol = load_solution(ctx, solution)?;
    let sim = ctx.cfg.sim_options()?;

    let mut saddle_opts = SaddleOptions::new(sim.clone());
    saddle_opts.xi_scales = ctx.cfg.simulation.xi_scales.clone();
    saddle_opts.vartheta_scales = ctx.cfg.simulation.vartheta_scales.clone();
    let report = control::saddle_check(&model, &params, &sol, &saddle_opts)?;

    // measure consistency on reference-measure paths
    let mut ref_sim = sim.clone();
    ref_sim.measure = Measure::Reference;
    let ref_paths = control::simulate(&model, &params, &sol, &ref_sim)?;
    let (weight_mean, weight_se) = control::likelihood_weight_stats(&ref_paths);
    let reweighted = control::estimate_cost(&ref_paths, &params, Weighting::Reweighted)?;
    io::write_path_summaries(ctx.out_dir.join("path_costs.csv"), &ref_paths)?;
    if ctx.cfg.simulation.dump_paths {
        io::write_paths_csv(ctx.out_dir.join("paths.csv"), &ref_paths, model.dim)?;
    }

    io::write_json(ctx.out_dir.join("saddle.json"), &report)?;
    io::write_json(
        ctx.out_dir.join("measure_checks.json"),
        &json!({
            "weight_mean": weight_mean,
            "weight_stderr": weight_se,
            "weight_consistent": (weight_mean - 1.0).abs() <= 3.0 * weight_se,
            "direct_total": report.base.total_mean,
            "direct_stderr": report.base.stderr,
            "reweighted_total": reweighted.total_mean,
            "reweighted_stderr": reweighted.stderr,
        }),
    )?;
    std::fs::write(ctx.out_dir.join(io::CONFIG_ECHO), &ctx.cfg_text)
        .map_err(|e| RunError::Usage(e.to_string()))?;

    println!(
        "saddle: {} (value gap {:.4e} vs {:.4e} grid); E[weight] = {:.4} +- {:.4}",
        if report.passed { "pass" } else { "FAIL" },
        report.value_gap,
        report.value_grid,
        weight_mean,
        weight_se
    );
    if report.passed {
        Ok(())
    } else {
        Err(RunError::Failed("saddle inequalities or value match failed".into()))
    }
}

fn run_asymptotics(ctx: &Ctx, thetas_flag: Option<&[f64]>) -> Result<(), RunError> {
    let params = ctx.cfg.build_params()?;
    params.require_gradient_regular()?;
    let model = ctx.cfg.build_model()?;
    let grid = ctx.cfg.build_grid()?;
    let thetas: Vec<f64> = thetas_flag
        .map(|t| t.to_vec())
        .unwrap_or_else(|| ctx.cfg.asymptotics.thetas.clone());
    if thetas.len() < 2 {
        return Err(RunError::Usage(
            "need at least two ambiguity levels for an order fit".into(),
        ));
    }

    let report = expansion_check(&model, &params, &thetas, &grid, &ctx.cfg.solver)?;
    io::write_json(ctx.out_dir.join("expansion.json"), &report)?;

    // cross-check the correction by Monte Carlo at spread-out points
    if ctx.cfg.asymptotics.fk_enable {
        let bench_params = params.with_theta(0.0)?;
        let bench = solve_benchmark(&model, &bench_params, &grid, &ctx.cfg.solver)?;
        let corr = solve_w1_grid(&bench, &model, &bench_params)?;
        let points = spread_points(&ctx.cfg, ctx.cfg.asymptotics.fk_points);
        let fk = solve_w1_feynman_kac(
            &bench,
            &model,
            &bench_params,
            &points,
            ctx.cfg.asymptotics.fk_paths,
            ctx.cfg.asymptotics.fk_steps,
            ctx.cfg.seed,
        )?;
        let gaps = asymptotics::fk_grid_gaps(&corr, &fk)?;
        io::write_json(
            ctx.out_dir.join("correction_fk.json"),
            &json!({
                "points": fk.points,
                "reflected_fraction": fk.reflected_fraction,
                "gaps_in_stderr": gaps,
                "all_within_3_stderr": gaps.iter().all(|g| *g <= 3.0),
            }),
        )?;
    }

    // refit + rate-field monotonicity across the swept levels
    {
        let mut sols = Vec::new();
        let bench_params = params.with_theta(0.0)?;
        sols.push(solve_benchmark(&model, &bench_params, &grid, &ctx.cfg.solver)?);
        for &th in &thetas {
            let p = params.with_theta(th)?;
            sols.push(solve_singular(&model, &p, &grid, &ctx.cfg.solver)?);
        }
        let top = sols.last().unwrap();
        let top_params = params.with_theta(*thetas.last().unwrap())?;
        let (_, refit) = equivalent_risk_refit(top, &model, &top_params, &ctx.cfg.solver)?;
        let mut by_theta: Vec<(f64, &ValueSolution)> = std::iter::once((0.0, &sols[0]))
            .chain(thetas.iter().cloned().zip(sols.iter().skip(1)))
            .collect();
        by_theta.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let ordered: Vec<&ValueSolution> = by_theta.iter().map(|(_, s)| *s).collect();
        let monotone = liquidation_rate_monotone(&ordered, &model, 1e-9);
        io::write_json(
            ctx.out_dir.join("equivalence.json"),
            &json!({
                "refit_sup_gap": refit.sup_gap,
                "refit_tolerance": refit.tolerance,
                "refit_passed": refit.passed,
                "rate_field_monotone": monotone,
            }),
        )?;
    }
    std::fs::write(ctx.out_dir.join(io::CONFIG_ECHO), &ctx.cfg_text)
        .map_err(|e| RunError::Usage(e.to_string()))?;

    // gate: fitted order inside the declared band (degenerate sweeps pass)
    let lo = 2.0 * params.alpha - 0.3;
    let hi = 2.0 * params.alpha + 0.5;
    let order_ok = report.degenerate || report.fitted_order.is_some_and(|o| o >= lo && o <= hi);
    println!(
        "expansion: residuals {:?}, order {:?} (band [{lo:.3}, {hi:.3}]), monotone {}",
        report.residual_norms, report.fitted_order, report.monotone
    );
    if order_ok && report.monotone {
        Ok(())
    } else {
        Err(RunError::Failed(format!(
            "expansion order {:?} outside [{lo:.3}, {hi:.3}] or residuals not monotone",
            report.fitted_order
        )))
    }
}

/// Quasi-random interior evaluation points for the Monte Carlo cross check.
fn spread_points(cfg: &ExperimentConfig, count: usize) -> Vec<(f64, [f64; 2])> {
    let dim = cfg.grid.n_space.len();
    let horizon = cfg.params.horizon;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        // keep the points in the inner half of the box and away from the
        // horizon so paths rarely reflect
        let u_t = robliq_core::math::halton(i as u64 + 1, 2);
        let t = 0.15 * horizon + 0.55 * horizon * u_t;
        let mut y = [0.0, 0.0];
        for d in 0..dim {
            let u = robliq_core::math::halton(i as u64 + 1, if d == 0 { 3 } else { 5 });
            let lo = cfg.grid.y_min[d];
            let hi = cfg.grid.y_max[d];
            let mid = 0.5 * (lo + hi);
            let half = 0.5 * (hi - lo);
            y[d] = mid + (u - 0.5) * half; // inner half
        }
        out.push((t, y));
    }
    out
}
