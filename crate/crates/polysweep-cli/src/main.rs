//! `polysweep` command-line tool.
//!
//! Exit codes: 0 success, 1 failed checks or runtime failure, 2 malformed
//! input, 3 infeasible initial state, 64 usage error, 66 unreadable input,
//! 73 unwritable output.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use polysweep::certify::{
    check_continuous_conditions, check_discrete_conditions, synthesize_discrete_certificate, CheckOptions,
    SynthesisOptions, TerminalRule,
};
use polysweep::discrete_ocp::{solve_grid, solve_refine, DiscreteProblem, GridSpec, RefineOptions};
use polysweep::dynamics::{simulate, Mesh, Scenario};
use polysweep::io::{
    certificate_to_json, expand_controls, parse_certificate_json, parse_controls_csv, parse_scenario_json,
    parse_trajectory_csv, report_to_json, solution_to_json, write_trajectory_csv, ControlSpec, ScenarioFile,
    MAX_MESH_POWER,
};
use polysweep::robot::{
    analytic_state, build_robot_scenario, case_control, contact_time, eta_closed_form, paper_certificate,
    Convention, RobotParams,
};
use polysweep::Error;

const DEFAULT_MESH_POWER: u32 = 10;

#[derive(Debug, Parser)]
#[command(name = "polysweep", version, about = "Controlled sweeping processes over convex polyhedra")]
struct Cli {
    /// Mesh with 2^m steps (overrides the scenario file).
    #[arg(long, global = true, value_name = "m")]
    mesh_power: Option<u32>,
    /// Threshold on scaled residuals.
    #[arg(long, global = true, default_value_t = 1e-6, value_name = "x")]
    tol: f64,
    /// Worker threads for grid evaluation (output does not depend on it).
    #[arg(long, global = true, value_name = "n")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TerminalArg {
    Complementary,
    LastStep,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ConventionArg {
    Consistent,
    PaperLiteral,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the catching-up scheme and write the trajectory CSV.
    Simulate {
        scenario: PathBuf,
        /// `u=a,b,..` or a control CSV path (defaults to the scenario's controls).
        #[arg(long)]
        controls: Option<String>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Solve the discrete problem on a control grid.
    Solve {
        scenario: PathBuf,
        /// Grid spacing in the control parameterization.
        #[arg(long, value_name = "delta")]
        grid: f64,
        /// Polish the grid optimum by compass search.
        #[arg(long)]
        refine: bool,
        /// Number of piecewise-constant control blocks.
        #[arg(long, default_value_t = 1)]
        pieces: usize,
        /// Largest number of grid candidates.
        #[arg(long, default_value_t = 10_000_000)]
        budget: u128,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Check the necessary conditions along a trajectory.
    Certify {
        scenario: PathBuf,
        #[arg(long)]
        trajectory: PathBuf,
        /// Certificate to check; synthesized when omitted.
        #[arg(long)]
        certificate: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, value_enum, default_value_t = TerminalArg::Complementary)]
        terminal: TerminalArg,
        /// Also write the synthesized certificate here.
        #[arg(long)]
        write_certificate: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Reproduce the two-robot case study.
    Robot {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        case: u8,
        #[arg(long, value_enum, default_value_t = ConventionArg::Consistent)]
        convention: ConventionArg,
        /// Also solve on the grid and compare with the analytic motion.
        #[arg(long)]
        compare: bool,
        /// Grid spacing for --compare.
        #[arg(long, default_value_t = 1.0 / 140.0, value_name = "delta")]
        grid: f64,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Schema(_) | Error::Dimension { .. } | Error::Invalid(_) => 2,
            Error::Infeasible { .. } => 3,
            Error::Budget { .. } => 64,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| fail(66, format!("cannot read {}: {e}", path.display())))
}

fn write_output(path: &Option<PathBuf>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| fail(73, format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).unwrap_or_else(|_| "null".into());
    s.push('\n');
    s
}

fn load_scenario(path: &Path) -> Result<ScenarioFile, Failure> {
    let text = read(path)?;
    parse_scenario_json(&text).map_err(|e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    })
}

fn mesh_for(cli: &Cli, file_power: Option<u32>, horizon: f64) -> Result<Mesh, Failure> {
    let m = cli.mesh_power.or(file_power).unwrap_or(DEFAULT_MESH_POWER);
    if m > MAX_MESH_POWER {
        return Err(fail(64, format!("--mesh-power must be at most {MAX_MESH_POWER}")));
    }
    Ok(Mesh::power_of_two(m, horizon)?)
}

fn resolve_controls(spec: &ControlSpec, s: &Scenario, mesh: Mesh) -> Result<Vec<polysweep::io::Control>, Failure> {
    let rows = match spec {
        ControlSpec::Constant(u) => vec![u.clone()],
        ControlSpec::Path(p) => parse_controls_csv(&read(Path::new(p))?)?,
    };
    Ok(expand_controls(&rows, mesh.steps, s.control_dim())?)
}

fn check_options(cli: &Cli) -> CheckOptions {
    CheckOptions {
        tol: cli.tol,
        ..CheckOptions::default()
    }
}

fn run(cli: &Cli) -> Result<u8, Failure> {
    if !(cli.tol > 0.0) {
        return Err(fail(64, "--tol must be positive"));
    }
    match &cli.command {
        Command::Simulate {
            scenario,
            controls,
            output,
        } => {
            let file = load_scenario(scenario)?;
            let s = &file.scenario;
            let mesh = mesh_for(cli, file.mesh_power, s.horizon)?;
            let spec = match controls {
                Some(c) => polysweep::io::parse_control_spec(c)?,
                // Paths inside a scenario file are relative to that file.
                None => match file.controls.clone() {
                    Some(ControlSpec::Path(p)) => {
                        let base = scenario.parent().unwrap_or(Path::new(""));
                        ControlSpec::Path(base.join(p).to_string_lossy().into_owned())
                    }
                    Some(spec) => spec,
                    None => return Err(fail(64, "no controls: pass --controls or set `controls` in the scenario")),
                },
            };
            let us = resolve_controls(&spec, s, mesh)?;
            let traj = simulate(s, &us, mesh)?;
            write_output(output, &write_trajectory_csv(&traj, &s.polyhedron)?)?;
            Ok(0)
        }
        Command::Solve {
            scenario,
            grid,
            refine,
            pieces,
            budget,
            output,
        } => {
            let file = load_scenario(scenario)?;
            let s = &file.scenario;
            let mesh = mesh_for(cli, file.mesh_power, s.horizon)?;
            let pr = DiscreteProblem::raw(s, mesh);
            let spec = GridSpec {
                delta: *grid,
                pieces: *pieces,
                budget: *budget,
            };
            let mut sol = solve_grid(&pr, spec)?;
            if *refine {
                sol = solve_refine(&pr, &sol, RefineOptions::default())?;
            }
            write_output(output, &pretty(&solution_to_json(&sol)))?;
            Ok(0)
        }
        Command::Certify {
            scenario,
            trajectory,
            certificate,
            lambda,
            terminal,
            write_certificate,
            output,
        } => {
            let file = load_scenario(scenario)?;
            let s = &file.scenario;
            let traj = parse_trajectory_csv(&read(trajectory)?, Some(&s.polyhedron))?;
            traj.check_shape(s)?;
            let pr = DiscreteProblem::raw(s, traj.mesh);
            let (cert, synthesis) = match certificate {
                Some(p) => {
                    let cert = parse_certificate_json(&read(p)?)?;
                    cert.check_shape(traj.mesh.steps, s.state_dim(), s.control_dim(), s.polyhedron.count())
                        .map_err(|e| fail(2, format!("certificate does not match the trajectory: {e}")))?;
                    (cert, Value::Null)
                }
                None => {
                    let opts = SynthesisOptions {
                        terminal: match terminal {
                            TerminalArg::Complementary => TerminalRule::Complementary,
                            TerminalArg::LastStep => TerminalRule::LastStep,
                        },
                        tol: cli.tol,
                        ..SynthesisOptions::default()
                    };
                    let syn = synthesize_discrete_certificate(&pr, &traj, *lambda, &opts)?;
                    (syn.certificate, json!(syn.max_residual))
                }
            };
            if let Some(p) = write_certificate {
                write_output(&Some(p.clone()), &pretty(&certificate_to_json(&cert)))?;
            }
            let opts = check_options(cli);
            let discrete = check_discrete_conditions(&pr, &traj, &cert, &opts)?;
            let continuous = check_continuous_conditions(s, &traj, &cert, &opts)?;
            let passed = discrete.passed() && continuous.passed();
            let report = json!({
                "discrete": report_to_json(&discrete),
                "continuous": report_to_json(&continuous),
                "synthesis_residual": synthesis,
                "passed": passed,
            });
            write_output(output, &pretty(&report))?;
            Ok(if passed { 0 } else { 1 })
        }
        Command::Robot {
            case,
            convention,
            compare,
            grid,
            output,
        } => {
            let convention = match convention {
                ConventionArg::Consistent => Convention::Consistent,
                ConventionArg::PaperLiteral => Convention::PaperLiteral,
            };
            let report = robot_report(cli, *case, convention, *compare, *grid)?;
            let passed = report["passed"].as_bool().unwrap_or(false);
            write_output(output, &pretty(&report))?;
            Ok(if passed { 0 } else { 1 })
        }
    }
}

fn robot_report(cli: &Cli, case: u8, convention: Convention, compare: bool, grid: f64) -> Result<Value, Failure> {
    let params = RobotParams::with_convention(convention);
    let s = build_robot_scenario(&params)?;
    let mesh = mesh_for(cli, Some(12), s.horizon)?;
    let u = case_control(case)?;
    let traj = simulate(&s, &vec![u.clone(); mesh.steps], mesh)?;
    let analytic_end = analytic_state(&params, &u, s.horizon);
    let node_error = (0..=mesh.steps)
        .map(|i| (&traj.states[i] - analytic_state(&params, &u, mesh.node(i))).norm())
        .fold(0.0, f64::max);
    let pr = DiscreteProblem::raw(&s, mesh);
    let opts = CheckOptions {
        offset_form: convention == Convention::PaperLiteral,
        ..check_options(cli)
    };

    // The literal encoding comes with a reference certificate (first case only);
    // the consistent encoding gets a synthesized one.
    let (certificate, discrete, continuous) = match convention {
        Convention::PaperLiteral => {
            let reference = paper_certificate(case, mesh)?;
            match reference.certificate {
                Some(cert) => {
                    let d = check_discrete_conditions(&pr, &reference.trajectory, &cert, &opts)?;
                    let c = check_continuous_conditions(&s, &reference.trajectory, &cert, &opts)?;
                    (Some(cert), Some(d), Some(c))
                }
                None => (None, None, None),
            }
        }
        Convention::Consistent => {
            let syn = synthesize_discrete_certificate(&pr, &traj, 1.0, &SynthesisOptions {
                tol: cli.tol,
                ..SynthesisOptions::default()
            })?;
            let d = check_discrete_conditions(&pr, &traj, &syn.certificate, &opts)?;
            let c = check_continuous_conditions(&s, &traj, &syn.certificate, &opts)?;
            (Some(syn.certificate), Some(d), Some(c))
        }
    };
    let mut passed = discrete.as_ref().is_none_or(|r| r.passed()) && continuous.as_ref().is_none_or(|r| r.passed());

    let mut report = json!({
        "case": case,
        "convention": convention.as_str(),
        "mesh_power": mesh.power(),
        "control": u.as_slice(),
        "contact_time": contact_time(&params, &u),
        "eta_closed_form": eta_closed_form(&params, &u),
        "analytic_endpoint": analytic_end.as_slice(),
        "simulated_endpoint": traj.final_state().as_slice(),
        "analytic_cost": s.cost.value(&analytic_end),
        "simulated_cost": s.cost.value(traj.final_state()),
        "node_error": node_error,
        "certificate": certificate.as_ref().map(|c| json!({
            "lambda": c.lambda,
            "p0": c.p[0].as_slice(),
            "pN": c.p[mesh.steps].as_slice(),
            "q0": c.q[0].as_slice(),
            "jump_total": c.jump_total().as_slice(),
            "eta_T": c.eta_t.as_slice(),
        })),
        "note": if certificate.is_none() { json!("no reference certificate for this case") } else { Value::Null },
        "discrete": discrete.as_ref().map(report_to_json),
        "continuous": continuous.as_ref().map(report_to_json),
    });
    if compare {
        let sol = solve_grid(&pr, GridSpec::constant(grid))?;
        let argmin = sol.controls[0].clone();
        let argmin_matches = (&argmin - &u).amax() == 0.0;
        let tracking_ok = node_error <= 0.05;
        passed &= argmin_matches && tracking_ok;
        report["compare"] = json!({
            "grid": grid,
            "argmin": argmin.as_slice(),
            "argmin_cost": sol.cost,
            "evaluations": sol.evaluations,
            "argmin_matches_case": argmin_matches,
            "tracking_within_0.05": tracking_ok,
        });
    }
    report["passed"] = json!(passed);
    Ok(report)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 64 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.jobs {
        Some(0) => Err(fail(64, "--jobs must be positive")),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run(&cli)),
            Err(e) => Err(fail(1, format!("cannot start worker pool: {e}"))),
        },
        None => run(&cli),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
