//! `bb` — command-line front end for the branching-process toolkit.
//!
//! Subcommands: `analyze` (spectral data, criticality, limit coefficients),
//! `simulate` (trajectory dumps), `moments` (exact moment tables), `sde`
//! (CIR / martingale-system integration) and `converge` (the full
//! verification harness). Exit codes: 0 success, 2 assertion failure,
//! 1 error.

use anyhow::{bail, Context, Result};
use bb_core::config::{self, InitialState, ModelConfig};
use bb_core::harness::{self, ExperimentPlan};
use bb_core::model::{self, BranchingModel, Criticality};
use bb_core::moments;
use bb_core::perron::{self, PerronData};
use bb_core::rng::DEFAULT_MASTER_SEED;
use bb_core::sde::{self, SdeConfig};
use bb_core::simulator;
use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "bb",
    version,
    about = "Critical multi-type branching processes with immigration and their diffusion limit"
)]
struct Cli {
    /// Worker threads (defaults to the number of logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArg {
    /// Path to a JSON model config.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Print Perron data, criticality and limit coefficients of a model.
    Analyze {
        #[command(flatten)]
        model: ModelArg,
        /// Emit machine-readable JSON instead of the table.
        #[arg(long)]
        json: bool,
        /// Exit with status 2 unless the model is critical.
        #[arg(long)]
        require_critical: bool,
    },
    /// Simulate trajectories and dump them as CSV.
    Simulate {
        #[command(flatten)]
        model: ModelArg,
        /// Number of generations per trajectory.
        #[arg(long)]
        k: usize,
        /// Number of replicate trajectories.
        #[arg(long, default_value_t = 1)]
        reps: usize,
        /// Master seed (falls back to BB_SEED, then a fixed default).
        #[arg(long)]
        seed: Option<u64>,
        /// Scaling index used to resolve a "ray" initial state.
        #[arg(long)]
        n: Option<u64>,
        /// Output CSV path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact moments: prints mean/variance at k, optionally a full table.
    Moments {
        #[command(flatten)]
        model: ModelArg,
        /// Generation index.
        #[arg(long)]
        k: usize,
        /// Write the full k = 0..K table as CSV to this path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Integrate the scalar CIR equation, or the full martingale system
    /// when --model is given.
    Sde {
        /// Drift coefficient of the scalar equation.
        #[arg(long, conflicts_with = "model")]
        b: Option<f64>,
        /// Diffusion coefficient of the scalar equation.
        #[arg(long, requires = "b")]
        c: Option<f64>,
        /// Initial value (scalar; scales the Perron ray in model mode).
        #[arg(long, default_value_t = 0.0)]
        x0: f64,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, default_value_t = 1.0)]
        t_max: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Model config for the p-dimensional martingale system.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Output CSV path for the path (stdout summary otherwise).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full verification harness and write the report.
    Converge {
        #[command(flatten)]
        model: ModelArg,
        /// Scaling indices, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = vec![100u64, 400, 1600])]
        n: Vec<u64>,
        /// Observation times, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.5f64, 1.0])]
        t: Vec<f64>,
        /// Replicates per cell.
        #[arg(long, default_value_t = 2000)]
        reps: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        /// Lindeberg thresholds, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.0f64])]
        theta: Vec<f64>,
        /// Output directory for report.json and cells.csv (stdout JSON when
        /// omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(err) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("bb: cannot configure {jobs} worker threads: {err}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("bb: error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var("BB_SEED")
            .ok()
            .and_then(|raw| raw.parse().ok())
    })
    .unwrap_or(DEFAULT_MASTER_SEED)
}

fn load_model(path: &Path) -> Result<(ModelConfig, BranchingModel, String)> {
    let (config, hash) =
        config::load(path).with_context(|| format!("loading {}", path.display()))?;
    let model = model::build_model(&config)
        .with_context(|| format!("building model from {}", path.display()))?;
    Ok((config, model, hash))
}

fn write_or_stdout(out: Option<&Path>, contents: &[u8]) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, contents)
            .with_context(|| format!("writing {}", path.display()))?,
        None => {
            use std::io::Write;
            std::io::stdout().write_all(contents)?;
        }
    }
    Ok(())
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Analyze {
            model,
            json,
            require_critical,
        } => cmd_analyze(&model.model, json, require_critical),
        Command::Simulate {
            model,
            k,
            reps,
            seed,
            n,
            out,
        } => cmd_simulate(&model.model, k, reps, resolve_seed(seed), n, out.as_deref()),
        Command::Moments {
            model,
            k,
            out,
            json,
        } => cmd_moments(&model.model, k, out.as_deref(), json),
        Command::Sde {
            b,
            c,
            x0,
            dt,
            t_max,
            seed,
            model,
            out,
        } => cmd_sde(
            b,
            c,
            x0,
            dt,
            t_max,
            resolve_seed(seed),
            model.as_deref(),
            out.as_deref(),
        ),
        Command::Converge {
            model,
            n,
            t,
            reps,
            seed,
            dt,
            theta,
            out,
        } => cmd_converge(
            &model.model,
            n,
            t,
            reps,
            resolve_seed(seed),
            dt,
            theta,
            out.as_deref(),
        ),
    }
}

fn format_vector(v: &DVector<f64>) -> String {
    let entries: Vec<String> = v.iter().map(|x| format!("{x:.12}")).collect();
    format!("({})", entries.join(", "))
}

fn format_matrix(m: &DMatrix<f64>) -> String {
    (0..m.nrows())
        .map(|i| {
            let row: Vec<String> = (0..m.ncols())
                .map(|j| format!("{:.12}", m[(i, j)]))
                .collect();
            format!("  [{}]", row.join(", "))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn cmd_analyze(path: &Path, json: bool, require_critical: bool) -> Result<ExitCode> {
    let (_, model, hash) = load_model(path)?;
    let pd = perron::perron_data(model.mean_matrix())?;
    let criticality = Criticality::from_rho(pd.rho);
    let lc = (criticality == Criticality::Critical)
        .then(|| model::limit_coefficients(&model, &pd))
        .transpose()?;

    if json {
        let payload = serde_json::json!({
            "model_hash": hash,
            "rho": pd.rho,
            "criticality": criticality,
            "u": pd.u.iter().copied().collect::<Vec<f64>>(),
            "v": pd.v.iter().copied().collect::<Vec<f64>>(),
            "pi": (0..pd.pi.nrows())
                .map(|i| (0..pd.pi.ncols()).map(|j| pd.pi[(i, j)]).collect::<Vec<f64>>())
                .collect::<Vec<_>>(),
            "c_rate": pd.c_rate,
            "r_rate": pd.r_rate,
            "limit": lc,
        });
        println!("{}", serde_json::to_string_pretty(&payload)?);
    } else {
        println!("model hash      {hash}");
        println!("spectral radius {:.12}", pd.rho);
        println!("criticality     {criticality:?}");
        println!("u (right)       {}", format_vector(&pd.u));
        println!("v (left)        {}", format_vector(&pd.v));
        println!("projector Pi\n{}", format_matrix(&pd.pi));
        println!("rate bound      c = {:.6}, r = {:.6}", pd.c_rate, pd.r_rate);
        match &lc {
            Some(lc) => {
                println!("limit drift b   {:.12}", lc.b);
                println!("limit diff. c   {:.12}", lc.c);
                match lc.delta {
                    Some(delta) => println!("Bessel dim.     {delta:.12}"),
                    None => println!("Bessel dim.     undefined (c = 0)"),
                }
            }
            None => println!("limit coefficients: model is not critical"),
        }
    }

    if require_critical && criticality != Criticality::Critical {
        eprintln!(
            "bb: model is {criticality:?} (rho = {}); --require-critical failed",
            pd.rho
        );
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn resolve_initial(config: &ModelConfig, pd: &PerronData, n: Option<u64>) -> Result<Vec<u64>> {
    let initial = config.initial_state();
    if matches!(initial, InitialState::Ray { .. }) {
        let Some(n) = n else {
            bail!("model uses a ray initial state; pass --n to resolve it");
        };
        return Ok(initial.resolve(n, &pd.u));
    }
    Ok(initial.resolve(1, &pd.u))
}

fn cmd_simulate(
    path: &Path,
    k: usize,
    reps: usize,
    seed: u64,
    n: Option<u64>,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let (config, model, _) = load_model(path)?;
    let pd = perron::perron_data(model.mean_matrix())?;
    let x0 = resolve_initial(&config, &pd, n)?;
    let ensemble = simulator::simulate_ensemble(
        &model,
        &x0,
        k,
        seed,
        bb_core::rng::StreamDomain::Trajectory,
        0,
        reps,
    )?;
    let mut buffer = Vec::new();
    simulator::write_trajectories_csv(&mut buffer, &ensemble)?;
    write_or_stdout(out, &buffer)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_moments(path: &Path, k: usize, out: Option<&Path>, json: bool) -> Result<ExitCode> {
    let (config, model, _) = load_model(path)?;
    let p = model.num_types();
    let initial = config.initial_state();
    let x0 = match initial {
        InitialState::Ray { .. } => bail!("moments require a deterministic initial state"),
        other => other.resolve(1, &DVector::from_element(p, 1.0 / p as f64)),
    };
    let mean0 = DVector::from_iterator(p, x0.iter().map(|&c| c as f64));
    let cov0 = DMatrix::zeros(p, p);

    let mean = moments::exact_mean(&model, &mean0, k)?;
    let cov = moments::exact_variance(&model, &mean0, &cov0, k)?;
    if json {
        let payload = serde_json::json!({
            "k": k,
            "mean": mean.iter().copied().collect::<Vec<f64>>(),
            "covariance": (0..p)
                .map(|i| (0..p).map(|j| cov[(i, j)]).collect::<Vec<f64>>())
                .collect::<Vec<_>>(),
        });
        println!("{}", serde_json::to_string_pretty(&payload)?);
    } else {
        println!("k          {k}");
        println!("mean       {}", format_vector(&mean));
        println!("covariance\n{}", format_matrix(&cov));
    }
    if let Some(out) = out {
        let mut buffer = Vec::new();
        moments::write_moment_table_csv(&mut buffer, &model, &mean0, &cov0, k)?;
        std::fs::write(out, buffer).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_sde(
    b: Option<f64>,
    c: Option<f64>,
    x0: f64,
    dt: f64,
    t_max: f64,
    seed: u64,
    model_path: Option<&Path>,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let cfg = SdeConfig::new(dt, t_max, seed)?;
    match (model_path, b) {
        (Some(path), _) => {
            let (_, model, _) = load_model(path)?;
            let pd = perron::perron_data(model.mean_matrix())?;
            let y0 = &pd.u * x0;
            let output = sde::simulate_m_system(&model, &pd, &y0, &cfg)?;
            let projected = sde::project_limit(&output.path, &model, &pd)?;
            println!(
                "martingale system: {} steps, terminal Perron coordinate {:.6}",
                cfg.steps(),
                projected.perron_coordinate.last().unwrap()
            );
            if let Some(out) = out {
                let mut buffer = Vec::new();
                sde::write_path_csv(&mut buffer, &output.path)?;
                std::fs::write(out, buffer)
                    .with_context(|| format!("writing {}", out.display()))?;
            }
        }
        (None, Some(b)) => {
            let c = c.unwrap_or(0.0);
            let path = sde::simulate_cir(b, c, x0, &cfg)?;
            println!(
                "cir path: {} steps, terminal value {:.6}",
                cfg.steps(),
                path.terminal()
            );
            if let Some(out) = out {
                let mut buffer = Vec::new();
                sde::write_scalar_path_csv(&mut buffer, &path)?;
                std::fs::write(out, buffer)
                    .with_context(|| format!("writing {}", out.display()))?;
            }
        }
        (None, None) => bail!("pass either --b (scalar equation) or --model (martingale system)"),
    }
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_converge(
    path: &Path,
    n: Vec<u64>,
    t: Vec<f64>,
    reps: usize,
    seed: u64,
    dt: f64,
    theta: Vec<f64>,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let (config, model, hash) = load_model(path)?;
    let plan = ExperimentPlan {
        n_list: n,
        t_list: t,
        replicates: reps,
        master_seed: seed,
        dt,
        theta_list: theta,
        initial: config.initial_state(),
    };
    let started = Instant::now();
    let report = harness::run_report(&model, &hash, &plan)?;
    let elapsed = started.elapsed();
    eprintln!(
        "bb: converge finished in {:.1}s ({} assertions, passed = {})",
        elapsed.as_secs_f64(),
        report.assertions.len(),
        report.passed
    );
    for assertion in &report.assertions {
        eprintln!(
            "bb:   {} {}",
            if assertion.passed { "PASS" } else { "FAIL" },
            assertion.name
        );
    }

    let json = report.to_json();
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            std::fs::write(dir.join("report.json"), &json)?;
            let mut cells = Vec::new();
            report.write_cells_csv(&mut cells)?;
            std::fs::write(dir.join("cells.csv"), cells)?;
        }
        None => println!("{json}"),
    }
    Ok(if report.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}
