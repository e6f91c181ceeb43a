//! `smf`: command-line front end for the smf-core library.

mod manifest;
mod traj;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use smf_core::ensemble::integrate;
use smf_core::extended::ExtReal;
use smf_core::gdpp::{GeneralizedInstance, InstanceSpec};
use smf_core::hamiltonian::{h1, hinf, Covector};
use smf_core::magnitude::psi;
use smf_core::measures::DiscreteMeasure;
use smf_core::scenario::{parse_scenario, CostSpec, Scenario};
use smf_core::solvers::{result_from_ensemble, solve, summarize, validate_optimum};
use smf_core::transport::wasserstein;

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "smf", version, about = "Sparsity-constrained control of particle measures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum HamiltonianMode {
    Linf,
    L1,
}

#[derive(Subcommand)]
enum Command {
    /// Control magnitude Ψ(x, v) of a velocity at a point.
    Psi {
        #[arg(long)]
        scenario: PathBuf,
        /// Comma-separated point.
        #[arg(long, allow_hyphen_values = true)]
        x: String,
        /// Comma-separated velocity.
        #[arg(long, allow_hyphen_values = true)]
        v: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact Wasserstein distance between two measure files.
    Wasserstein {
        #[arg(long)]
        mu: PathBuf,
        #[arg(long)]
        nu: PathBuf,
        #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=2))]
        p: u8,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Integrates the scenario's `simulate` controls and writes the trajectory CSV.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Report Ψ(x, f(x, u)) instead of |u| in the psi column.
        #[arg(long)]
        recompute_psi: bool,
        /// Also save the ensemble as JSON.
        #[arg(long)]
        save_ensemble: Option<PathBuf>,
    },
    /// Solves the scenario's optimal control problem.
    Solve {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Trajectory CSV of the returned optimum.
        #[arg(long)]
        dump_traj: Option<PathBuf>,
        /// Full diagnostics (search trace, bisection bracket, cross-check).
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Re-solves from intermediate marginals and checks the DPP along a solution.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
        /// Result JSON written by `solve`.
        #[arg(long)]
        result: PathBuf,
        #[arg(long, default_value_t = 5)]
        samples: usize,
        /// Validate this trajectory CSV instead of the re-computed optimum.
        #[arg(long)]
        traj: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Budgeted Hamiltonian at the scenario's initial measure.
    Hamiltonian {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        covector: PathBuf,
        #[arg(long, value_enum, default_value = "linf")]
        mode: HamiltonianMode,
        /// Instantaneous budget; the scenario's alpha when absent.
        #[arg(long)]
        alpha: Option<f64>,
        /// Running-cost factor h(μ); derived from the scenario's cost when absent.
        #[arg(long)]
        h_mu: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Value and DPP check of a finite generalized instance.
    DppCheck {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        from: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Status {
    Done,
    /// Infinite value, infeasible trajectory or failed optimality check.
    Infinite,
}

type CmdResult = Result<Status, String>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = std::env::var("SMF_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match run(cli.command) {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::Infinite) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load(path: &Path) -> Result<Scenario, String> {
    parse_scenario(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn parse_vector(name: &str, text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| format!("--{name}: `{}`: {e}", s.trim())))
        .collect()
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable output");
    s.push('\n');
    s
}

/// Writes `body` to `out` (stdout when absent) and the manifest next to it
/// (stderr when writing to stdout).
fn emit(out: Option<&Path>, body: &str, manifest: &RunManifest) -> Result<(), String> {
    match out {
        Some(path) => {
            fs::write(path, body).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
            manifest.write_beside(path)
        }
        None => {
            io::stdout().write_all(body.as_bytes()).map_err(|e| e.to_string())?;
            eprintln!("{}", manifest.to_json_line());
            Ok(())
        }
    }
}

fn status_of(v: ExtReal) -> Status {
    if v.is_finite() {
        Status::Done
    } else {
        Status::Infinite
    }
}

fn run(command: Command) -> CmdResult {
    let clock = Instant::now();
    match command {
        Command::Psi { scenario, x, v, out } => {
            let sc = load(&scenario)?;
            let x = parse_vector("x", &x)?;
            let v = parse_vector("v", &v)?;
            let r = psi(&sc.sys, &x, &v).map_err(|e| e.to_string())?;
            let body = to_json(&json!({"value": r.value, "control": r.control, "residual": r.residual}));
            emit(out.as_deref(), &body, &RunManifest::for_scenario("psi", &sc, clock))?;
            Ok(status_of(r.value))
        }
        Command::Wasserstein { mu, nu, p, out } => {
            let a: DiscreteMeasure = read_json(&mu)?;
            let b: DiscreteMeasure = read_json(&nu)?;
            if a.dim() != b.dim() {
                return Err(format!("measures live in R^{} and R^{}", a.dim(), b.dim()));
            }
            let t = wasserstein(&a, &b, p as f64);
            let body = to_json(&json!({"p": p, "distance": t.distance, "cost": t.cost, "plan": t.plan}));
            let key = format!("{}\n{}", serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
            emit(out.as_deref(), &body, &RunManifest::new("wasserstein", &key, None, clock))?;
            Ok(Status::Done)
        }
        Command::Simulate { scenario, out, recompute_psi, save_ensemble } => {
            let sc = load(&scenario)?;
            let sim = sc.spec.simulate.clone().ok_or("scenario has no `simulate` section")?;
            let grid = smf_core::ensemble::TimeGrid::new(sim.t0, sim.t1, sim.steps).map_err(|e| e.to_string())?;
            let offsets = vec![sc.budget.omega0; sc.mu0.len()];
            let ens = integrate(&sc.sys, &sc.mu0, &sim.controls, grid, Some(&offsets)).map_err(|e| e.to_string())?;
            let mut csv = Vec::new();
            ens.write_csv(&sc.sys, &mut csv, recompute_psi).map_err(|e| e.to_string())?;
            let body = String::from_utf8(csv).expect("CSV is UTF-8");
            if let Some(path) = save_ensemble {
                fs::write(&path, to_json(&ens)).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
            }
            emit(out.as_deref(), &body, &RunManifest::for_scenario("simulate", &sc, clock))?;
            let report = ens.check_feasibility(sc.budget.mode, sc.budget.alpha);
            if !report.feasible {
                eprintln!("budget exceeded: worst {} > alpha {}", report.worst, report.alpha);
                return Ok(Status::Infinite);
            }
            Ok(Status::Done)
        }
        Command::Solve { scenario, out, dump_traj, diagnostics } => {
            let sc = load(&scenario)?;
            let res = solve(&sc).map_err(|e| e.to_string())?;
            if let (Some(path), Some(ens)) = (&dump_traj, &res.ensemble) {
                let mut csv = Vec::new();
                ens.write_csv(&sc.sys, &mut csv, false).map_err(|e| e.to_string())?;
                fs::write(path, csv).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
            }
            if let Some(path) = diagnostics {
                let diag = json!({
                    "diagnostics": res.diagnostics,
                    "feasibility": res.feasibility,
                    "dt": res.dt,
                });
                fs::write(&path, to_json(&diag)).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
            }
            let body = to_json(&summarize(&sc, &res));
            emit(out.as_deref(), &body, &RunManifest::for_scenario("solve", &sc, clock))?;
            Ok(status_of(res.value))
        }
        Command::Validate { scenario, result, samples, traj, out } => {
            let sc = load(&scenario)?;
            let stored: serde_json::Value = read_json(&result)?;
            let res = match traj {
                Some(path) => {
                    let ens = traj::read_trajectory(&path, &sc)?;
                    let res = result_from_ensemble(&sc, ens);
                    let recorded = stored.get("value").cloned().unwrap_or_default();
                    if serde_json::to_value(res.value).unwrap() != recorded {
                        eprintln!("note: trajectory value {} differs from the result file ({recorded})", res.value);
                    }
                    res
                }
                None => {
                    let res = solve(&sc).map_err(|e| e.to_string())?;
                    let again = serde_json::to_value(summarize(&sc, &res)).unwrap();
                    if again != stored {
                        return Err(format!("{} was not produced by this scenario and version", result.display()));
                    }
                    res
                }
            };
            let report = validate_optimum(&sc, &res, samples).map_err(|e| e.to_string())?;
            let body = to_json(&json!({"value": res.value, "report": report}));
            emit(out.as_deref(), &body, &RunManifest::for_scenario("validate", &sc, clock))?;
            if report.monotone && report.constant {
                Ok(Status::Done)
            } else {
                Ok(Status::Infinite)
            }
        }
        Command::Hamiltonian { scenario, covector, mode, alpha, h_mu, out } => {
            let sc = load(&scenario)?;
            let cov: Covector = read_json(&covector)?;
            let h_mu = h_mu.unwrap_or(match sc.cost {
                CostSpec::MinTime => 1.0,
                CostSpec::AveragedMinTime => sc.mu0.mass_outside(&sc.target),
                CostSpec::TerminalW2PlusEffort { .. } => 0.0,
            });
            let r = match mode {
                HamiltonianMode::Linf => hinf(&sc.sys, &sc.mu0, &cov, alpha.unwrap_or(sc.budget.alpha), h_mu),
                HamiltonianMode::L1 => h1(&sc.sys, &sc.mu0, &cov, h_mu),
            }
            .map_err(|e| e.to_string())?;
            emit(out.as_deref(), &to_json(&r), &RunManifest::for_scenario("hamiltonian", &sc, clock))?;
            Ok(Status::Done)
        }
        Command::DppCheck { instance, from, out } => {
            let spec: InstanceSpec = read_json(&instance)?;
            let inst = GeneralizedInstance::from_spec(&spec).map_err(|e| format!("{}: {e}", instance.display()))?;
            let x = inst.state(&from).ok_or_else(|| format!("unknown state `{from}`"))?;
            let v = inst.value(x);
            let check = inst.check_dpp(x);
            let argmin = v.transition.map(|t| {
                let tr = inst.transition(t);
                json!({"to": inst.names()[tr.to], "sigma": tr.sigma, "cost": tr.cost})
            });
            let values: serde_json::Map<String, serde_json::Value> = inst
                .names()
                .iter()
                .zip(inst.values())
                .map(|(n, v)| (n.clone(), serde_json::to_value(v).unwrap()))
                .collect();
            let body = to_json(&json!({
                "state": from,
                "value": v.value,
                "argmin": argmin,
                "dpp": {"value": check.value, "rhs": check.rhs, "holds": check.holds},
                "values": values,
            }));
            let key = serde_json::to_string(&inst.to_spec()).unwrap();
            emit(out.as_deref(), &body, &RunManifest::new("dpp-check", &key, None, clock))?;
            if !check.holds {
                return Err("dynamic programming principle fails".into());
            }
            Ok(status_of(v.value))
        }
    }
}
