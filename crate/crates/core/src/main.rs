use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qswitch::bounds::{default_margin, lyapunov_certificate, sample_complexity, BoundConstants, BoundReport};
use qswitch::harness::{resolve_mdp, run_ensemble_on, simulate_trial, verify_all, ExperimentConfig, VerifyOptions};
use qswitch::io;
use qswitch::mdp::{greedy_policy, solve_qstar};
use qswitch::switching::SwitchingModel;
use qswitch::Error;

/// Q-learning as a switching system: solve, simulate, bound and verify.
#[derive(Parser)]
#[command(name = "qswitch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute Q* and the optimal greedy policy.
    Solve {
        /// Builtin name or MDP file.
        #[arg(long)]
        mdp: String,
        #[arg(long, default_value_t = qswitch::mdp::QSTAR_TOL)]
        tol: f64,
        /// Also write Q* as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate coupled trajectories and write one as CSV.
    Simulate(SimulateArgs),
    /// Print rates, Lyapunov certificate, bounds and sample complexity.
    Analyze {
        #[arg(long)]
        mdp: String,
        #[arg(long)]
        alpha: f64,
        /// Horizon N for the bound evaluation.
        #[arg(long, default_value_t = 1_000_000)]
        steps: u64,
        /// Accuracy target.
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        /// Failure probability.
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
    },
    /// Run the invariant checklist; exit status 2 if any check fails.
    Verify {
        #[arg(long)]
        mdp: String,
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 2000)]
        steps: u64,
    },
    /// Write the two-state datasets for α = 0.002 and α = 0.9.
    PaperExample {
        #[arg(long, default_value = "paper-example")]
        out: PathBuf,
        #[arg(long, default_value_t = 200_000)]
        steps: u64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        stride: u64,
    },
}

#[derive(Args)]
struct SimulateArgs {
    /// Experiment file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mdp: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    stride: Option<u64>,
    /// Trajectory CSV (stdout if absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Error(Error),
    Verification,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn stdout_error(e: std::io::Error) -> Error {
    Error::Io {
        path: "<stdout>".into(),
        message: e.to_string(),
    }
}

fn simulate_config(args: &SimulateArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => io::read_config_file(&path.display().to_string())?,
        None => {
            let missing = |name: &'static str| Error::InvalidArgument {
                name,
                reason: "required without --config".into(),
            };
            ExperimentConfig::new(
                args.mdp.clone().ok_or_else(|| missing("mdp"))?,
                args.alpha.ok_or_else(|| missing("alpha"))?,
                10_000,
                1,
                0,
            )
        }
    };
    if let Some(v) = &args.mdp {
        cfg.mdp = v.clone();
    }
    if let Some(v) = args.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = args.steps {
        cfg.num_steps = v;
    }
    if let Some(v) = args.trials {
        cfg.num_trials = v;
    }
    if let Some(v) = args.seed {
        cfg.base_seed = v;
    }
    if let Some(v) = args.stride {
        cfg.record_stride = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Solve { mdp, tol, out } => {
            let mdp = io::load_description(&mdp)?.validate()?;
            if !(tol > 0.0) {
                return Err(Error::InvalidArgument {
                    name: "tol",
                    reason: format!("must be positive, got {tol}"),
                }
                .into());
            }
            let q = solve_qstar(&mdp, tol);
            let text = io::format_solution(&q, &greedy_policy(&q), mdp.discount(), mdp.r_max());
            write!(stdout, "{text}").map_err(stdout_error)?;
            if let Some(path) = out {
                let mut f = io::create_file(&path)?;
                let label = path.display().to_string();
                let io_err = |e: std::io::Error| Error::Io {
                    path: label.clone(),
                    message: e.to_string(),
                };
                writeln!(f, "s,a,q").map_err(io_err)?;
                for s in 0..q.num_states() {
                    for a in 0..q.num_actions() {
                        writeln!(f, "{},{},{:.16e}", s + 1, a + 1, q.get(s, a)).map_err(io_err)?;
                    }
                }
                f.flush().map_err(io_err)?;
            }
        }
        Command::Simulate(args) => {
            let cfg = simulate_config(&args)?;
            let mdp = resolve_mdp(&cfg.mdp, cfg.base_seed)?;
            let model = SwitchingModel::new(&mdp, cfg.alpha)?;
            let traj = simulate_trial(&model, &cfg, 0)?;
            match &args.out {
                Some(path) => io::write_trajectory(io::create_file(path)?, &traj, &path.display().to_string())?,
                None => io::write_trajectory(&mut stdout, &traj, "<stdout>")?,
            }
            if cfg.num_trials > 1 {
                let st = run_ensemble_on(&model, &cfg)?;
                let mut err = std::io::stderr().lock();
                let _ = writeln!(err, "k,error_mean,error_se,lower_mean,upper_mean,gap_mean,averaged_mean");
                for (i, k) in st.steps.iter().enumerate() {
                    let _ = writeln!(
                        err,
                        "{k},{:.6e},{:.3e},{:.6e},{:.6e},{:.6e},{:.6e}",
                        st.error_norm.mean[i],
                        st.error_norm.std_err[i],
                        st.lower_norm.mean[i],
                        st.upper_norm.mean[i],
                        st.gap_norm.mean[i],
                        st.averaged_norm.mean[i]
                    );
                }
            }
        }
        Command::Analyze {
            mdp,
            alpha,
            steps,
            eps,
            delta,
        } => {
            let mdp = io::load_description(&mdp)?.validate()?;
            let model = SwitchingModel::new(&mdp, alpha)?;
            let consts = BoundConstants::from_mdp(&mdp);
            // worst case over ‖Q_0‖∞ <= 1
            let e0_sq = (model.q_star().inf_norm() + 1.0).powi(2);
            let report = BoundReport::new(consts, alpha, e0_sq)?;
            let budget = sample_complexity(&consts, eps, delta);
            if let Err(e @ Error::InvalidArgument { .. }) = &budget {
                return Err(e.clone().into());
            }
            let rho = model.rho();
            let cert = lyapunov_certificate(&model.realize(model.q_star()).a, rho, default_margin(rho));
            let text = io::format_analysis(&report, &cert, steps.max(1), &budget);
            write!(stdout, "{text}").map_err(stdout_error)?;
        }
        Command::Verify {
            mdp,
            alpha,
            seed,
            trials,
            steps,
        } => {
            let desc = io::load_description(&mdp)?;
            let opts = VerifyOptions {
                seed,
                trials: trials.max(1),
                steps: steps.max(1),
                ..VerifyOptions::default()
            };
            let report = verify_all(desc, alpha, opts);
            write!(stdout, "{}", io::format_verification(&report)).map_err(stdout_error)?;
            if let Some(e) = report.validation {
                return Err(e.into());
            }
            if !report.passed() {
                return Err(Failure::Verification);
            }
        }
        Command::PaperExample { out, steps, seed, stride } => {
            let opts = io::PaperExampleOptions {
                steps: steps.max(1),
                seed,
                stride: stride.max(1),
                ..Default::default()
            };
            for d in io::paper_example(&out, opts)? {
                writeln!(
                    stdout,
                    "alpha {}: gap {:.6e} -> {:.6e}, last-decile variance {:.6e}\n  {}\n  {}",
                    d.alpha,
                    d.initial_gap,
                    d.terminal_gap,
                    d.tail_variance,
                    d.trajectory_path.display(),
                    d.error_path.display()
                )
                .map_err(stdout_error)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification) => {
            eprintln!("error: verification failed");
            ExitCode::from(2)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::Io { .. } => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}
