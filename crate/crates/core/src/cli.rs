//! Command-line harness. Exit codes: 0 success, 1 usage or config error,
//! 2 solver or validation failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::acceptance;
use crate::balanced_lp::{balanced_lp_solution, lp_grid_oracle, LpSolution};
use crate::error::{Error, Result};
use crate::geometry::GeometryReport;
use crate::gram_solver::{solve_gram, GramSummary};
use crate::io::{
    load_config, read_matrix, save_config, trace_csv, write_json, write_matrix, Experiment,
};
use crate::model::{Embeddings, GramMatrix, Temperature};
use crate::oracle::grid_search_global;
use crate::ufm_solver::{multi_restart, solve_ufm, SolveResult, SolverConfig};

pub const JOBS_ENV: &str = "NC_LANDSCAPE_JOBS";

const CONFIG_HELP: &str = "JSON experiment config: \
{\"dataset\": {\"k\": K, \"labels\": [1-based labels]} or {\"step\": {\"k\", \"R\", \"rho\", \"n_minor\" (default 10)}}, \
\"tau\" (default max(2, 1.1 x collapse threshold)), \"d\" (default k + 1), \
\"solver\": {\"max_iters\" (50000), \"grad_tol\" (1e-7), \"loss_tol\" (1e-10), \"initial_step\" (1), \
\"armijo_c\" (1e-4), \"backtrack_factor\" (0.5), \"seed\" (0)}, \"restarts\" (1)}. Unknown keys are rejected.";

#[derive(Debug, Parser)]
#[command(
    name = "nc-landscape",
    version,
    about = "Supervised contrastive loss under the unconstrained features model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Projected gradient on the embeddings; best of `restarts` seeds.
    /// Writes config.json, result.json, trace.csv and H.csv.
    SolveUfm {
        #[arg(long, help = CONFIG_HELP)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solves the convex Gram relaxation. Writes config.json, summary.json,
    /// trace.csv and G.csv.
    SolveGram {
        #[arg(long, help = CONFIG_HELP)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Geometry report for a saved H.csv or G.csv.
    Analyze {
        #[arg(long, help = CONFIG_HELP)]
        config: PathBuf,
        /// Embeddings (d x n) written by solve-ufm.
        #[arg(long, conflicts_with = "g", required_unless_present = "g")]
        h: Option<PathBuf>,
        /// Gram matrix (n x n) written by solve-gram.
        #[arg(long)]
        g: Option<PathBuf>,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Balanced closed form and its grid check.
    Lp {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 2.0)]
        tau: f64,
        #[arg(long, default_value_t = 201)]
        resolution: usize,
    },
    /// Grid search for the global minimum over the class-mean Gram (k <= 3).
    Oracle {
        #[arg(long, help = CONFIG_HELP)]
        config: PathBuf,
        #[arg(long, default_value_t = 201)]
        resolution: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parallel restart sweep with pairwise Gram and Procrustes summaries.
    /// Writes config.json, traces.csv and summary.json.
    Landscape {
        #[arg(long, help = CONFIG_HELP)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (default: available cores). NC_LANDSCAPE_JOBS
        /// overrides this flag.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Runs acceptance criteria: `all`, a number 1-12 or a criterion name.
    Acceptance {
        #[arg(long, default_value = "all")]
        suite: String,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Io(_) | Error::Json(_) | Error::Csv(_) => 1,
        _ => 2,
    }
}

fn load(path: &Path) -> Result<Experiment> {
    load_config(path)?.resolve()
}

fn prepare_out(exp: &Experiment, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    save_config(&exp.config, &out.join("config.json"))
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::SolveUfm { config, out } => {
            let exp = load(&config)?;
            cmd_solve_ufm(&exp, &out)?;
        }
        Command::SolveGram { config, out } => {
            let exp = load(&config)?;
            cmd_solve_gram(&exp, &out)?;
        }
        Command::Analyze { config, h, g, out } => {
            let exp = load(&config)?;
            let report = match (h, g) {
                (Some(h), _) => {
                    let h = Embeddings::new(read_matrix(&h)?)?;
                    GeometryReport::from_embeddings(&[h], &exp.dataset, exp.step.as_ref(), exp.tau)?
                }
                (None, Some(g)) => {
                    let g = GramMatrix::new(read_matrix(&g)?)?;
                    GeometryReport::from_gram(&g, &exp.dataset, exp.step.as_ref(), exp.tau)?
                }
                (None, None) => unreachable!("clap requires --h or --g"),
            };
            emit(&report, out.as_deref())?;
        }
        Command::Lp {
            k,
            n,
            tau,
            resolution,
        } => {
            let tau = Temperature::new(tau).map_err(|e| Error::Config {
                path: "tau".to_string(),
                message: e.to_string(),
            })?;
            let report = LpReport {
                closed_form: balanced_lp_solution(k, n, tau)?,
                grid: lp_grid_oracle(k, n, tau, resolution)?,
                grid_cell: 2.0 * tau.cap() / (resolution.max(2) - 1) as f64,
            };
            emit(&report, None)?;
        }
        Command::Oracle {
            config,
            resolution,
            out,
        } => {
            let exp = load(&config)?;
            let result = grid_search_global(&exp.dataset, exp.tau, resolution)?;
            emit(&result, out.as_deref())?;
        }
        Command::Landscape { config, out, jobs } => {
            let exp = load(&config)?;
            let jobs = resolve_jobs(jobs)?;
            let summary = landscape(&exp, jobs, &out)?;
            println!(
                "restarts {}, loss range [{:.12}, {:.12}], relative spread {:.3e}",
                summary.losses.len(),
                summary.loss_min,
                summary.loss_max,
                summary.loss_spread_rel
            );
        }
        Command::Acceptance { suite } => {
            let ids = acceptance::select(&suite)?;
            let mut all_passed = true;
            for id in ids {
                let report = acceptance::run_criterion(id)?;
                all_passed &= report.passed;
                println!("{report}");
            }
            return Ok(if all_passed { 0 } else { 2 });
        }
    }
    Ok(0)
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    if let Some(path) = out {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        write_json(value, path)?;
    }
    Ok(())
}

fn resolve_jobs(flag: Option<usize>) -> Result<usize> {
    let jobs = match std::env::var(JOBS_ENV) {
        Ok(v) => v.trim().parse::<usize>().map_err(|e| Error::Config {
            path: JOBS_ENV.to_string(),
            message: format!("`{v}`: {e}"),
        })?,
        Err(_) => {
            flag.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        }
    };
    if jobs == 0 {
        return Err(Error::Config {
            path: "jobs".to_string(),
            message: "must be at least 1".to_string(),
        });
    }
    Ok(jobs)
}

#[derive(Debug, Serialize)]
struct LpReport {
    closed_form: LpSolution,
    grid: LpSolution,
    grid_cell: f64,
}

#[derive(Debug, Serialize)]
struct RestartSummary {
    seed: u64,
    loss_final: f64,
    iterations: usize,
    converged: bool,
    projected_grad_norm: f64,
}

impl From<&SolveResult> for RestartSummary {
    fn from(r: &SolveResult) -> Self {
        Self {
            seed: r.seed,
            loss_final: r.loss_final,
            iterations: r.iterations,
            converged: r.converged,
            projected_grad_norm: r.projected_grad_norm,
        }
    }
}

#[derive(Debug, Serialize)]
struct UfmResultFile {
    loss_final: f64,
    iterations: usize,
    converged: bool,
    projected_grad_norm: f64,
    seed: u64,
    tau: f64,
    d: usize,
    n: usize,
    k: usize,
    restarts: Vec<RestartSummary>,
    geometry: GeometryReport,
    warnings: Vec<String>,
}

fn cmd_solve_ufm(exp: &Experiment, out: &Path) -> Result<()> {
    prepare_out(exp, out)?;
    let mut runs = Vec::with_capacity(exp.config.restarts);
    for r in 0..exp.config.restarts as u64 {
        let cfg = SolverConfig {
            seed: exp.config.solver.seed.wrapping_add(r),
            ..exp.config.solver.clone()
        };
        runs.push(solve_ufm(&exp.dataset, exp.tau, exp.d, &cfg)?);
    }
    // lowest loss wins; ties go to the earlier seed
    let best = runs
        .iter()
        .enumerate()
        .min_by(|a, b| {
            a.1.loss_final
                .total_cmp(&b.1.loss_final)
                .then(a.0.cmp(&b.0))
        })
        .map(|(i, _)| i)
        .expect("at least one restart");
    let chosen = &runs[best];
    let mut warnings = chosen.warnings.clone();
    for r in runs.iter().filter(|r| !r.converged) {
        warnings.push(format!("seed {} did not converge within max_iters", r.seed));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let geometry = GeometryReport::from_embeddings(
        std::slice::from_ref(&chosen.h_final),
        &exp.dataset,
        exp.step.as_ref(),
        exp.tau,
    )?;
    write_matrix(chosen.h_final.matrix(), &out.join("H.csv"))?;
    fs::write(
        out.join("trace.csv"),
        trace_csv(&chosen.loss_trace, Some(&chosen.pg_trace)),
    )?;
    let result = UfmResultFile {
        loss_final: chosen.loss_final,
        iterations: chosen.iterations,
        converged: chosen.converged,
        projected_grad_norm: chosen.projected_grad_norm,
        seed: chosen.seed,
        tau: exp.tau.value(),
        d: exp.d,
        n: exp.dataset.n(),
        k: exp.dataset.k(),
        restarts: runs.iter().map(RestartSummary::from).collect(),
        geometry,
        warnings,
    };
    write_json(&result, &out.join("result.json"))?;
    println!(
        "loss_final {:.12} (seed {}, {} iterations, converged {})",
        result.loss_final, result.seed, result.iterations, result.converged
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct GramSummaryFile {
    #[serde(flatten)]
    summary: GramSummary,
    tau: f64,
    n: usize,
    k: usize,
    geometry: GeometryReport,
    warnings: Vec<String>,
}

fn cmd_solve_gram(exp: &Experiment, out: &Path) -> Result<()> {
    prepare_out(exp, out)?;
    let res = solve_gram(&exp.dataset, exp.tau, &exp.config.solver)?;
    let mut warnings = Vec::new();
    if !res.converged {
        warnings.push("did not converge within max_iters".to_string());
    }
    write_matrix(res.g_final.matrix(), &out.join("G.csv"))?;
    fs::write(out.join("trace.csv"), trace_csv(&res.loss_trace, None))?;
    let file = GramSummaryFile {
        summary: res.summary(),
        tau: exp.tau.value(),
        n: exp.dataset.n(),
        k: exp.dataset.k(),
        geometry: GeometryReport::from_gram(
            &res.g_final,
            &exp.dataset,
            exp.step.as_ref(),
            exp.tau,
        )?,
        warnings,
    };
    write_json(&file, &out.join("summary.json"))?;
    println!(
        "loss_final {:.12} ({} iterations, converged {}, min eigenvalue {:.2e}, max diag {:.6})",
        res.loss_final, res.iterations, res.converged, res.min_eigenvalue, res.max_diag
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct LandscapeSummary {
    pub tau: f64,
    pub d: usize,
    pub seeds: Vec<u64>,
    pub losses: Vec<f64>,
    pub loss_min: f64,
    pub loss_max: f64,
    pub loss_spread_rel: f64,
    pub converged: usize,
    pub geometry: GeometryReport,
    pub warnings: Vec<String>,
}

/// Runs the restart sweep on `jobs` workers and writes `config.json`,
/// `traces.csv` (`restart,seed,iter,loss,proj_grad_norm`) and
/// `summary.json` to `out`. Output bytes do not depend on `jobs`.
pub fn landscape(exp: &Experiment, jobs: usize, out: &Path) -> Result<LandscapeSummary> {
    prepare_out(exp, out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    let runs = pool.install(|| {
        multi_restart(
            &exp.dataset,
            exp.tau,
            exp.d,
            &exp.config.solver,
            exp.config.restarts,
        )
    })?;

    let mut traces = String::from("restart,seed,iter,loss,proj_grad_norm\n");
    for (r, run) in runs.iter().enumerate() {
        for (i, (l, g)) in run.loss_trace.iter().zip(&run.pg_trace).enumerate() {
            writeln!(traces, "{r},{},{i},{l:.16e},{g:.16e}", run.seed).expect("write to string");
        }
    }
    fs::write(out.join("traces.csv"), traces)?;

    let losses: Vec<f64> = runs.iter().map(|r| r.loss_final).collect();
    let loss_min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let loss_max = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let hs: Vec<Embeddings> = runs.iter().map(|r| r.h_final.clone()).collect();
    let mut warnings = runs[0].warnings.clone();
    for r in runs.iter().filter(|r| !r.converged) {
        warnings.push(format!("seed {} did not converge within max_iters", r.seed));
    }
    let summary = LandscapeSummary {
        tau: exp.tau.value(),
        d: exp.d,
        seeds: runs.iter().map(|r| r.seed).collect(),
        loss_spread_rel: (loss_max - loss_min) / loss_min.abs(),
        loss_min,
        loss_max,
        converged: runs.iter().filter(|r| r.converged).count(),
        geometry: GeometryReport::from_embeddings(&hs, &exp.dataset, exp.step.as_ref(), exp.tau)?,
        warnings,
        losses,
    };
    write_json(&summary, &out.join("summary.json"))?;
    Ok(summary)
}
