//! `vcnf`: train, evaluate and inspect flow solutions of mean-field control
//! problems, evaluate reference oracles and run the property suites.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error,
//! 3 numerical abort during training, 4 failed verification.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use vcnf::config::ExperimentConfig;
use vcnf::diffkit::velocity_fd;
use vcnf::oracles::{self, OracleRow, QuadRule, QuadratureSpec};
use vcnf::problems::{objective_eval, Gaussian, Potential, ProblemSpec};
use vcnf::trainer::{eval_rng, train_with, StepRecord};
use vcnf::{FlowModel, VcnfError};

#[derive(Parser)]
#[command(name = "vcnf", version, about = "Variational conditional normalizing flows for mean-field control")]
struct Cli {
    /// Worker threads for loss evaluation (default: $VCNF_THREADS or 1).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a flow from an experiment file.
    Train {
        config: PathBuf,
        /// `dotted.key=value` override, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint against the problem's oracle.
    Eval {
        /// Checkpoint metadata file (`*.json`).
        checkpoint: PathBuf,
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value_t = 100_000)]
        n_eval: usize,
    },
    /// Evaluate a reference oracle; prints CSV.
    Oracle {
        #[command(subcommand)]
        oracle: OracleCmd,
    },
    /// Write plot-ready CSV from a checkpoint.
    Dump(DumpArgs),
    /// Run property suites.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
    },
}

#[derive(Subcommand)]
enum OracleCmd {
    /// d/beta (log(T+1) + 1).
    RwpoCost {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        beta: f64,
        #[arg(long = "T")]
        horizon: f64,
    },
    /// Half the squared 2-Wasserstein distance between two Gaussians.
    W2 {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        mu0: Vec<f64>,
        /// Row-major covariance, rows separated by `;`.
        #[arg(long, allow_hyphen_values = true)]
        cov0: String,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        mu1: Vec<f64>,
        #[arg(long, allow_hyphen_values = true)]
        cov1: String,
    },
    /// E|x_t|^2 of the OU process from an isotropic centered start.
    OuMoment {
        #[arg(long)]
        t: f64,
        #[arg(long, default_value_t = 1.0)]
        a: f64,
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        /// Initial second moment E|x_0|^2.
        #[arg(long, default_value_t = 8.0)]
        m0: f64,
        #[arg(long, default_value_t = 2)]
        d: usize,
    },
    /// Kernel-formula optimal RWPO cost for a Gaussian start.
    KernelCost {
        #[arg(long, value_enum, default_value_t = PotentialArg::Quadratic)]
        potential: PotentialArg,
        /// Double-well parameter.
        #[arg(long, default_value_t = 1.0)]
        a: f64,
        #[arg(long)]
        beta: f64,
        #[arg(long = "T")]
        horizon: f64,
        /// Isotropic variance of the centered Gaussian start.
        #[arg(long)]
        var0: f64,
        #[arg(long, default_value_t = 2)]
        d: usize,
        #[arg(long)]
        half_width: Option<f64>,
        #[arg(long, default_value_t = 256)]
        nodes: usize,
    },
    /// div(pi v) - gamma lap(pi) for the smiling drift.
    Stationarity {
        #[arg(long, default_value_t = 0.5)]
        delta: f64,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x: Vec<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PotentialArg {
    Quadratic,
    DoubleWell,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DumpKind {
    /// (id, t, x...) along f(f^{-1}(x0, 0), t).
    Trajectories,
    /// (x1, x2, t, density) on a grid.
    Density,
    /// (x1, x2, t, v1, v2) on a grid.
    Velocity,
    /// (id, t, x...) samples of p(., t).
    Samples,
}

#[derive(Args)]
struct DumpArgs {
    checkpoint: PathBuf,
    #[arg(value_enum)]
    what: DumpKind,
    /// Comma-separated times; defaults to 0, T/4, T/2, 3T/4, T.
    #[arg(long, value_delimiter = ',')]
    times: Vec<f64>,
    /// Trajectory start points `x1,x2;x1,x2;...`.
    #[arg(long, allow_hyphen_values = true)]
    starts: Option<String>,
    /// Grid points per axis.
    #[arg(long, default_value_t = 101)]
    grid: usize,
    #[arg(long, default_value_t = 4.0)]
    half_width: f64,
    /// Sample count for `samples` and for trajectories without `--starts`.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Time points per trajectory.
    #[arg(long, default_value_t = 51)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| std::env::var("VCNF_THREADS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(1);
    vcnf::set_max_threads(threads);
    let result = match cli.command {
        Command::Train { config, overrides } => cmd_train(&config, &overrides),
        Command::Eval {
            checkpoint,
            config,
            overrides,
            n_eval,
        } => cmd_eval(&checkpoint, &config, &overrides, n_eval),
        Command::Oracle { oracle } => cmd_oracle(oracle),
        Command::Dump(args) => cmd_dump(&args),
        Command::Verify { suite } => cmd_verify(&suite),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                VcnfError::Config(_) | VcnfError::Io { .. } => 2,
                VcnfError::NumericalAbort { .. } => 3,
                _ => 1,
            })
        }
    }
}

fn write_file(path: &Path, contents: &str) -> vcnf::Result<()> {
    fs::write(path, contents).map_err(|e| VcnfError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> VcnfError + '_ {
    move |e| VcnfError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

/// Objective, benchmark and (for FP problems with a reference) grid RMSE.
fn evaluate(model: &FlowModel, cfg: &ExperimentConfig, n_eval: usize, seed: u64) -> vcnf::Result<serde_json::Value> {
    let spec = &cfg.problem;
    let est = objective_eval(model, spec, n_eval, &mut eval_rng(seed))?;
    let benchmark = oracles::benchmark_for(spec)?;
    let rel_error = benchmark.map(|b| (est.mean - b).abs() / b.abs());
    let rmse = match spec {
        ProblemSpec::FpMatch { reference: Some(_), horizon, .. } => {
            let t = *horizon;
            Some(oracles::rmse_on_grid(
                model,
                |x| oracles::fp_reference_density(spec, x, t).ok().flatten().unwrap_or(f64::NAN),
                5.0,
                500,
                t,
            )?)
        }
        _ => None,
    };
    Ok(json!({
        "problem": spec.kind(),
        "objective": est.mean,
        "std_err": est.std_err,
        "n_eval": est.n_eval,
        "benchmark": benchmark,
        "rel_error": rel_error,
        "rmse": rmse,
        "seed": seed,
        "config_hash": cfg.train.hash(),
    }))
}

fn cmd_train(path: &Path, overrides: &[String]) -> vcnf::Result<ExitCode> {
    let cfg = ExperimentConfig::load(path, overrides)?;
    let out = cfg.output.clone();
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    write_file(&out.join("config.resolved.toml"), &cfg.to_toml_string())?;

    let mut model = FlowModel::new(cfg.arch(), cfg.init_seed())?;
    let metrics_path = out.join("metrics.csv");
    let mut csv = BufWriter::new(File::create(&metrics_path).map_err(io_err(&metrics_path))?);
    writeln!(csv, "{}", StepRecord::CSV_HEADER).map_err(io_err(&metrics_path))?;

    let train_cfg = vcnf::TrainConfig {
        n_eval: 0,
        ..cfg.train.clone()
    };
    let log_every = (cfg.train.steps / 100).max(1);
    let mut last_checkpoint: Option<PathBuf> = None;
    let result = train_with(&mut model, &cfg.problem, &train_cfg, |rec, m| {
        writeln!(csv, "{}", rec.csv_row()).map_err(io_err(&metrics_path))?;
        if cfg.train.checkpoint_every > 0 && (rec.step + 1) % cfg.train.checkpoint_every == 0 {
            let stem = out.join(format!("checkpoint_{:06}", rec.step + 1));
            m.save(&stem)?;
            last_checkpoint = Some(stem.with_extension("json"));
        }
        if (rec.step + 1) % log_every == 0 {
            eprintln!("step {:>6}  loss {:.5}  grad {:.3e}", rec.step + 1, rec.loss, rec.grad_norm);
        }
        Ok(())
    });
    csv.flush().map_err(io_err(&metrics_path))?;
    if let Err(e) = result {
        if let VcnfError::NumericalAbort { step, reason } = &e {
            let summary = json!({
                "status": "numerical_abort",
                "step": step,
                "reason": reason,
                "last_checkpoint": last_checkpoint.map(|p| p.display().to_string()),
                "config_hash": cfg.train.hash(),
            });
            write_file(&out.join("summary.json"), &serde_json::to_string_pretty(&summary).expect("json"))?;
        }
        return Err(e);
    }
    model.save(out.join("model"))?;

    let mut summary = if cfg.train.n_eval > 0 {
        evaluate(&model, &cfg, cfg.train.n_eval, cfg.train.seed)?
    } else {
        json!({ "problem": cfg.problem.kind(), "seed": cfg.train.seed, "config_hash": cfg.train.hash() })
    };
    summary["status"] = json!("ok");
    summary["steps"] = json!(cfg.train.steps);
    summary["checkpoint"] = json!(out.join("model.json").display().to_string());
    summary["config"] = serde_json::to_value(&cfg).expect("config serializes");
    let text = serde_json::to_string_pretty(&summary).expect("json");
    write_file(&out.join("summary.json"), &text)?;
    println!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(checkpoint: &Path, config: &Path, overrides: &[String], n_eval: usize) -> vcnf::Result<ExitCode> {
    let cfg = ExperimentConfig::load(config, overrides)?;
    let model = FlowModel::load(checkpoint)?;
    if model.arch() != &cfg.arch() {
        return Err(VcnfError::Config("checkpoint architecture does not match the experiment file".into()));
    }
    let summary = evaluate(&model, &cfg, n_eval, cfg.train.seed)?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
    Ok(ExitCode::SUCCESS)
}

fn parse_matrix(text: &str) -> vcnf::Result<Vec<Vec<f64>>> {
    text.split(';')
        .map(|row| {
            row.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| VcnfError::Config(format!("cannot parse `{v}` as a number")))
                })
                .collect()
        })
        .collect()
}

fn cmd_oracle(cmd: OracleCmd) -> vcnf::Result<ExitCode> {
    let row = match cmd {
        OracleCmd::RwpoCost { d, beta, horizon } => OracleRow::new(
            "rwpo-cost",
            format!("d={d} beta={beta} T={horizon}"),
            oracles::rwpo_quadratic_cost(d, beta, horizon)?,
            None,
        ),
        OracleCmd::W2 { mu0, cov0, mu1, cov1 } => {
            let g0 = Gaussian::from_rows(mu0.clone(), &parse_matrix(&cov0)?)?;
            let g1 = Gaussian::from_rows(mu1.clone(), &parse_matrix(&cov1)?)?;
            OracleRow::new(
                "w2",
                format!("half W2^2; mu0={mu0:?} cov0={cov0} mu1={mu1:?} cov1={cov1}"),
                oracles::gaussian_ot_benchmark(&g0, &g1)?,
                None,
            )
        }
        OracleCmd::OuMoment { t, a, gamma, m0, d } => OracleRow::new(
            "ou-moment",
            format!("t={t} a={a} gamma={gamma} m0={m0} d={d}"),
            oracles::ou_second_moment(t, a, gamma, m0, d)?,
            None,
        ),
        OracleCmd::KernelCost {
            potential,
            a,
            beta,
            horizon,
            var0,
            d,
            half_width,
            nodes,
        } => {
            let v = match potential {
                PotentialArg::Quadratic => Potential::Quadratic,
                PotentialArg::DoubleWell => Potential::DoubleWell { a },
            };
            let mut quad = oracles::default_quadrature(&v);
            quad.nodes = nodes;
            if let Some(l) = half_width {
                quad.half_width = l;
            }
            let quad = QuadratureSpec::new(quad.half_width, quad.nodes, QuadRule::Trapezoid)?;
            let p0 = Gaussian::isotropic(vec![0.0; d], var0)?;
            OracleRow::new(
                "kernel-cost",
                format!("V={v:?} beta={beta} T={horizon} var0={var0} d={d} L={} n={}", quad.half_width, quad.nodes),
                oracles::kernel_optimal_cost(&p0, &v, beta, horizon, &quad)?,
                None,
            )
        }
        OracleCmd::Stationarity { delta, gamma, x } => {
            let [x1, x2] = x[..] else {
                return Err(VcnfError::Config("--x takes two comma-separated coordinates".into()));
            };
            let (r, scale) = oracles::stationarity_residual(delta, gamma, &[x1, x2]);
            OracleRow::new(
                "stationarity",
                format!("delta={delta} gamma={gamma} x=({x1},{x2})"),
                r,
                Some(scale),
            )
        }
    };
    println!("{}", OracleRow::CSV_HEADER);
    println!("{}", row.csv_row());
    Ok(ExitCode::SUCCESS)
}

fn cmd_dump(args: &DumpArgs) -> vcnf::Result<ExitCode> {
    let model = FlowModel::load(&args.checkpoint)?;
    let horizon = model.arch().horizon;
    let times: Vec<f64> = if args.times.is_empty() {
        (0..5).map(|i| horizon * i as f64 / 4.0).collect()
    } else {
        args.times.clone()
    };
    let d = model.dim();
    let coords = (1..=d).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",");
    let mut lines = Vec::new();
    let needs_2d = matches!(args.what, DumpKind::Density | DumpKind::Velocity);
    if needs_2d && d != 2 {
        return Err(VcnfError::Config("grid dumps need a 2D model".into()));
    }
    if needs_2d && args.grid < 2 {
        return Err(VcnfError::Config("--grid must be at least 2".into()));
    }
    let fmt = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    match args.what {
        DumpKind::Trajectories => {
            lines.push(format!("id,t,{coords}"));
            let latents: Vec<Vec<f64>> = match &args.starts {
                Some(s) => parse_matrix(s)?
                    .into_iter()
                    .map(|x0| {
                        if x0.len() != d {
                            return Err(VcnfError::Config(format!("start point {x0:?} is not {d}-dimensional")));
                        }
                        Ok(model.inverse(&x0, 0.0)?.0)
                    })
                    .collect::<vcnf::Result<_>>()?,
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
                    (0..args.n).map(|_| vcnf::flow::standard_normal(d, &mut rng)).collect()
                }
            };
            let n_steps = args.steps.max(2);
            for (id, z) in latents.iter().enumerate() {
                for k in 0..n_steps {
                    let t = horizon * k as f64 / (n_steps - 1) as f64;
                    lines.push(format!("{id},{t},{}", fmt(&model.forward(z, t)?.0)));
                }
            }
        }
        DumpKind::Samples => {
            lines.push(format!("id,t,{coords}"));
            for &t in &times {
                let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
                for (id, x) in model.sample(t, args.n, &mut rng)?.iter().enumerate() {
                    lines.push(format!("{id},{t},{}", fmt(x)));
                }
            }
        }
        DumpKind::Density | DumpKind::Velocity => {
            let axis = oracles::grid_axis(args.half_width, args.grid);
            lines.push(if args.what == DumpKind::Density {
                "x1,x2,t,density".to_string()
            } else {
                "x1,x2,t,v1,v2".to_string()
            });
            for &t in &times {
                for &x1 in &axis {
                    for &x2 in &axis {
                        let x = [x1, x2];
                        if args.what == DumpKind::Density {
                            lines.push(format!("{x1},{x2},{t},{}", model.log_density(&x, t)?.exp()));
                        } else {
                            let z = model.inverse(&x, t)?.0;
                            let v = velocity_fd(&model, &z, t, 1e-3 * horizon)?;
                            lines.push(format!("{x1},{x2},{t},{}", fmt(&v)));
                        }
                    }
                }
            }
        }
    }
    let text = lines.join("\n") + "\n";
    match &args.out {
        Some(p) => write_file(p, &text)?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(suite: &str) -> vcnf::Result<ExitCode> {
    let results = vcnf::verify::run_suite(suite)?;
    let mut all = true;
    for r in &results {
        all &= r.passed;
        println!(
            "{} {:<8} {:<52} worst {:.3e} (tol {:.1e})",
            if r.passed { "PASS" } else { "FAIL" },
            r.suite,
            r.name,
            r.worst,
            r.tolerance
        );
    }
    Ok(if all { ExitCode::SUCCESS } else { ExitCode::from(4) })
}
