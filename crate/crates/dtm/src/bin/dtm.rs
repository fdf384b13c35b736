//! Command-line entry points for the reduced-order-modeling pipeline:
//! mesh generation, high-fidelity solves, offline training, online
//! evaluation, the study drivers, and bundle inspection.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;

use dtm::bundle::RomBundle;
use dtm::config::RunConfig;
use dtm::offline::{run_offline, sample_params, Discretization};
use dtm::online::{galerkin_online, lspg_solve, OnlineContext, OnlineResult};
use dtm::problems::Problem;
use dtm::studies::{
    benchmark, bound_check, convergence_study_1d, write_benchmark_csvs, write_bound_csv,
    write_conv1d_csv, write_study_readme,
};
use dtm::{Error, Result};

#[derive(Parser)]
#[command(name = "dtm", about = "Discretize-then-map parametric model order reduction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark mesh, validate it, and write it as text.
    Mesh {
        /// Problem id: study-1d, laplace-airfoil, or burgers-bump.
        #[arg(long)]
        problem: String,
        /// Refinement level (problem default when omitted).
        #[arg(long)]
        refinement: Option<usize>,
        /// Output path.
        #[arg(long, default_value = "mesh.txt")]
        out: PathBuf,
    },
    /// Solve the high-fidelity problem at one parameter and write the field.
    HfSolve {
        /// Problem id.
        #[arg(long)]
        problem: String,
        /// Refinement level (problem default when omitted).
        #[arg(long)]
        refinement: Option<usize>,
        /// Comma-separated parameter vector.
        #[arg(long)]
        mu: String,
        /// Output path (CSV: node, deformed coordinates, state components).
        #[arg(long, default_value = "field.csv")]
        out: PathBuf,
    },
    /// Train a reduced model from a JSON configuration.
    Offline {
        /// Configuration path.
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a trained bundle at one parameter.
    Online {
        /// Bundle path.
        #[arg(long)]
        bundle: PathBuf,
        /// Comma-separated parameter vector.
        #[arg(long)]
        mu: String,
        /// CSV file the result row is appended to.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run one of the study drivers.
    Study {
        /// Study name.
        #[arg(long)]
        name: StudyName,
        /// Configuration path (defaults per study when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the CSV reports.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Print the provenance and dimensions of a bundle.
    BundleInfo {
        /// Bundle path.
        #[arg(long)]
        bundle: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StudyName {
    /// 1D convergence comparison.
    Conv1d,
    /// Linear geometry benchmark sweep.
    Airfoil,
    /// Nonlinear benchmark sweep.
    Burgers,
    /// Residual-estimate bound check.
    Bound,
}

fn parse_mu(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("mu component {t:?}: {e}")))
        })
        .collect()
}

fn check_mu(problem: Problem, mu: &[f64]) -> Result<()> {
    let expected = problem.param_box().len();
    if mu.len() != expected {
        return Err(Error::Config(format!(
            "mu has {} components, {} expects {expected}",
            mu.len(),
            problem.id()
        )));
    }
    Ok(())
}

fn online_solve(ctx: &OnlineContext, mu: &[f64]) -> Result<OnlineResult> {
    if ctx.bundle.y.is_some() {
        lspg_solve(ctx, mu)
    } else {
        galerkin_online(ctx, mu)
    }
}

fn write_field_csv(path: &Path, disc: &Discretization, mu: &[f64], u: &DVector<f64>) -> Result<()> {
    use std::fmt::Write;
    let n = disc.mesh.n_nodes();
    let d_eq = disc.problem.d_eq();
    let coords = disc.rmap.map_nodes(mu, &(0..n).collect::<Vec<_>>());
    let mut s = String::from("node,x,y");
    for c in 0..d_eq {
        write!(s, ",u{}", c + 1).expect("string write");
    }
    s.push('\n');
    for j in 0..n {
        write!(s, "{},{:.8e},{:.8e}", j + 1, coords[j][0], coords[j][1]).expect("string write");
        for c in 0..d_eq {
            write!(s, ",{:.8e}", u[j + c * n]).expect("string write");
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn append_online_csv(path: &Path, mu: &[f64], result: &OnlineResult) -> Result<()> {
    use std::fmt::Write;
    let mut s = String::new();
    if !path.exists() {
        s.push_str("mu,estimate,iterations,wall_time,converged\n");
    }
    let mu_text: Vec<String> = mu.iter().map(|v| format!("{v:.6e}")).collect();
    writeln!(
        s,
        "{},{:.8e},{},{:.6e},{}",
        mu_text.join(";"),
        result.estimate,
        result.iterations,
        result.wall_time,
        result.converged
    )
    .expect("string write");
    use std::io::Write as IoWrite;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(s.as_bytes())?;
    Ok(())
}

fn study_config(path: &Option<PathBuf>, default_problem: &str) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::for_problem(default_problem)),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Mesh { problem, refinement, out } => {
            let problem = Problem::from_id(&problem)?;
            let n = refinement.unwrap_or_else(|| problem.default_refinement());
            let mesh = problem.build_mesh(n)?;
            mesh.validate()?;
            std::fs::write(&out, mesh.write_text())?;
            println!(
                "wrote {}: {} nodes, {} elements, order {}",
                out.display(),
                mesh.n_nodes(),
                mesh.n_elems(),
                mesh.order
            );
        }
        Command::HfSolve { problem, refinement, mu, out } => {
            let problem = Problem::from_id(&problem)?;
            let mu = parse_mu(&mu)?;
            check_mu(problem, &mu)?;
            let n = refinement.unwrap_or_else(|| problem.default_refinement());
            let disc = Discretization::new(problem, n)?;
            let start = std::time::Instant::now();
            let u = disc.hf_solve(&mu)?;
            println!("high-fidelity solve in {:.3}s", start.elapsed().as_secs_f64());
            write_field_csv(&out, &disc, &mu, &u)?;
            println!("wrote {}", out.display());
        }
        Command::Offline { config } => {
            let config = RunConfig::load(&config)?;
            let out_dir = PathBuf::from(&config.output_dir);
            std::fs::create_dir_all(&out_dir)?;
            let start = std::time::Instant::now();
            let outputs = run_offline(&config)?;
            let bundle_path = out_dir.join(format!("{}.dtmrom", config.problem));
            outputs.bundle.save(&bundle_path)?;
            std::fs::write(out_dir.join("training.csv"), outputs.report.to_csv())?;
            println!(
                "trained {} in {:.1}s: N={} M={} Q={} J_r={} Q_r={}",
                config.problem,
                start.elapsed().as_secs_f64(),
                outputs.report.n,
                outputs.report.m,
                outputs.report.q,
                outputs.report.j_r,
                outputs.report.q_r
            );
            println!("wrote {}", bundle_path.display());
        }
        Command::Online { bundle, mu, csv } => {
            let bundle = RomBundle::load(&bundle)?;
            let mu = parse_mu(&mu)?;
            check_mu(bundle.problem, &mu)?;
            let ctx = OnlineContext::new(bundle)?;
            let result = online_solve(&ctx, &mu)?;
            let alpha: Vec<String> =
                result.alpha.iter().map(|v| format!("{v:.6e}")).collect();
            println!("alpha = [{}]", alpha.join(", "));
            println!("estimate = {:.8e}", result.estimate);
            println!(
                "iterations = {}, wall time = {:.3e}s, converged = {}, elements touched = {}",
                result.iterations, result.wall_time, result.converged, result.elements_touched
            );
            if let Some(path) = csv {
                append_online_csv(&path, &mu, &result)?;
                println!("appended {}", path.display());
            }
        }
        Command::Study { name, config, out } => {
            match name {
                StudyName::Conv1d => {
                    let report = convergence_study_1d(&[8, 16, 32, 64, 128])?;
                    println!(
                        "rates: iso {:.2}, sub {:.2}, pulled-back {:.2}",
                        report.rate_iso, report.rate_sub, report.rate_mtd
                    );
                    write_conv1d_csv(&report, &out)?;
                }
                StudyName::Airfoil => {
                    let cfg = study_config(&config, "laplace-airfoil")?;
                    let report =
                        benchmark(&cfg, &[1, 2, 3, 4, 5, 6], &[1e-4, 1e-6, 1e-8, 1e-10])?;
                    for p in &report.points {
                        println!(
                            "N={}: E_avg={:.3e} (full quadrature {:.3e}), Q={}, J_r={}, Q_r={}",
                            p.n, p.e_avg_eq, p.e_avg_hf, p.q, p.j_r, p.q_r
                        );
                    }
                    println!(
                        "speedup: {:.1}x elements, {:.1}x wall clock",
                        report.speedup_elements(),
                        report.speedup_wall()
                    );
                    write_benchmark_csvs(&report, &out)?;
                }
                StudyName::Burgers => {
                    let cfg = study_config(&config, "burgers-bump")?;
                    let report = benchmark(&cfg, &[2, 4, 6, 8, 10], &[])?;
                    for p in &report.points {
                        println!(
                            "N={}: E_avg={:.3e} (full quadrature {:.3e}), Q={}, J_r={}, Q_r={}",
                            p.n, p.e_avg_eq, p.e_avg_hf, p.q, p.j_r, p.q_r
                        );
                    }
                    println!(
                        "speedup: {:.1}x elements, {:.1}x wall clock",
                        report.speedup_elements(),
                        report.speedup_wall()
                    );
                    write_benchmark_csvs(&report, &out)?;
                }
                StudyName::Bound => {
                    let cfg = study_config(&config, "laplace-airfoil")?;
                    let outputs = run_offline(&cfg)?;
                    let problem = Problem::from_id(&cfg.problem)?;
                    let test = sample_params(
                        &problem.param_box(),
                        cfg.n_test,
                        cfg.seed.wrapping_add(3),
                    );
                    let report = bound_check(&outputs, &test)?;
                    let violations = report
                        .rows
                        .iter()
                        .filter(|r| r.gap() > r.bound() + 1e-10 * (1.0 + r.hf_dual))
                        .count();
                    println!(
                        "bound holds at {}/{} test parameters; Spearman(estimate, error) = {:.3}",
                        report.rows.len() - violations,
                        report.rows.len(),
                        report.spearman
                    );
                    write_bound_csv(&report, &out)?;
                }
            }
            write_study_readme(&out)?;
            println!("reports in {}", out.display());
        }
        Command::BundleInfo { bundle } => {
            let bundle = RomBundle::load(&bundle)?;
            print!("{}", bundle.info());
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
