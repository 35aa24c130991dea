use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ddrkit::ddr::{estimate, NuisancePredictions};
use ddrkit::harness::{
    combo_config, read_dataset, read_truth, run_experiment, summarize, summary_table, thread_count, write_dataset,
    write_summary, write_truth, BandwidthChoice, ExperimentConfig, MSpec, NuisanceCombo, PiSpec,
};
use ddrkit::inference::{infer, InferenceResult, NodewiseRule};
use ddrkit::nuisance::{BasisSpec, LambdaRule};
use ddrkit::numkit::RngStream;
use ddrkit::par::with_threads;
use ddrkit::simulate::{theta0_cached, CovKind, Dgp, DgpKind, DgpSpec, Theta0Key};
use ddrkit::solvers::{DesignProblem, LossKind, SparseFit};
use ddrkit::{Error, Execution, Result};

#[derive(Parser)]
#[command(name = "ddrkit", version, about = "Debiased doubly-robust lasso with missing outcomes")]
struct Cli {
    /// Run everything on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset and write it as CSV.
    Simulate(SimulateArgs),
    /// Compute (or load from cache) the projection target θ₀.
    Theta0(Theta0Args),
    /// Run a replicated experiment from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Summarize a records file.
    Summarize {
        #[arg(long)]
        records: PathBuf,
        /// Directory for summary.csv and summary.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit one estimator on a dataset CSV.
    Fit(FitArgs),
}

#[derive(Args)]
struct DgpArgs {
    #[arg(long, value_enum, default_value = "linear-linear")]
    dgp: DgpArg,
    #[arg(long, default_value_t = 50)]
    p: usize,
    #[arg(long, value_enum, default_value = "identity")]
    cov: CovArg,
    #[arg(long, default_value_t = 0.2)]
    rho: f64,
}

impl DgpArgs {
    fn spec(&self) -> DgpSpec {
        let kind = match self.dgp {
            DgpArg::LinearLinear => DgpKind::LinearLinear,
            DgpArg::QuadQuad => DgpKind::QuadQuad,
            DgpArg::SimSim => DgpKind::SimSim,
        };
        let cov = match self.cov {
            CovArg::Identity => CovKind::Identity,
            CovArg::Ar1 => CovKind::Ar1,
            CovArg::Cs => CovKind::Cs,
        };
        let mut spec = DgpSpec::new(kind, self.p, cov);
        spec.rho = self.rho;
        spec
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DgpArg {
    LinearLinear,
    QuadQuad,
    SimSim,
}

#[derive(Clone, Copy, ValueEnum)]
enum CovArg {
    Identity,
    Ar1,
    Cs,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    dgp: DgpArgs,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the hidden truth (full outcomes, true π and m).
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct Theta0Args {
    #[command(flatten)]
    dgp: DgpArgs,
    #[arg(long, default_value_t = 200_000)]
    draws: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "theta0")]
    cache_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Ddr,
    Oracle,
    Full,
    Cc,
}

#[derive(Clone, Copy, ValueEnum)]
enum PiArg {
    Linear,
    Quad,
}

#[derive(Clone, Copy, ValueEnum)]
enum MArg {
    Linear,
    Quad,
    Sim,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "ddr")]
    estimator: EstimatorArg,
    #[arg(long, value_enum, default_value = "linear")]
    pi: PiArg,
    #[arg(long, value_enum, default_value = "linear")]
    m: MArg,
    /// Truth CSV from `simulate --truth`; required by oracle and full.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Add desparsified estimates and confidence intervals (ddr and oracle).
    #[arg(long)]
    inference: bool,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Write coefficients here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn simulate_cmd(args: &SimulateArgs) -> Result<()> {
    let dgp = Dgp::new(args.dgp.spec())?;
    let (data, truth) = dgp.generate(args.n, &mut RngStream::new(args.seed, 0))?;
    write_dataset(&args.out, &data)?;
    if let Some(path) = &args.truth {
        write_truth(path, &truth)?;
    }
    eprintln!("wrote {} rows ({:.1}% missing) to {}", data.n(), 100.0 * data.missing_fraction(), args.out.display());
    Ok(())
}

fn theta0_cmd(args: &Theta0Args, exec: Execution) -> Result<()> {
    let spec = args.dgp.spec();
    let dgp = Dgp::new(spec)?;
    let theta = theta0_cached(&dgp, args.draws, args.seed, &args.cache_dir, exec)?;
    let key = Theta0Key::new(&spec, args.seed, args.draws);
    eprintln!("cache: {}", args.cache_dir.join(key.file_name()).display());
    println!("coord,theta0");
    for (j, v) in theta.iter().enumerate() {
        println!("{j},{v}");
    }
    Ok(())
}

fn run_cmd(config: &Path, exec: Execution) -> Result<()> {
    let cfg = ExperimentConfig::from_path(config)?;
    let report = run_experiment(&cfg, exec)?;
    print!("{}", summary_table(&report.summary));
    if report.failed_replications > 0 {
        eprintln!("{} replication(s) had failures; see {}", report.failed_replications, report.errors_path.display());
    }
    Ok(())
}

fn summarize_cmd(records: &Path, out: Option<&PathBuf>) -> Result<()> {
    let summary = summarize(records)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_summary(dir, &summary)?;
    }
    print!("{}", summary_table(&summary));
    Ok(())
}

fn coefficient_csv(fit: &SparseFit, inference: Option<&InferenceResult>) -> String {
    let mut s = String::from(if inference.is_some() {
        "coord,estimate,desparsified,sigma,lower,upper\n"
    } else {
        "coord,estimate\n"
    });
    for (j, c) in fit.coefficients.iter().enumerate() {
        match inference {
            Some(r) => s.push_str(&format!(
                "{j},{c},{},{},{},{}\n",
                r.theta_tilde[j], r.sigma_hat[j], r.ci_lower[j], r.ci_upper[j]
            )),
            None => s.push_str(&format!("{j},{c}\n")),
        }
    }
    s
}

fn fit_cmd(args: &FitArgs, exec: Execution) -> Result<()> {
    let data = read_dataset(&args.data)?;
    let rng = RngStream::new(args.seed, 0);
    let basis = BasisSpec::linear();
    let rule = LambdaRule::default_cv();
    let truth = args.truth.as_ref().map(|p| read_truth(p)).transpose()?;
    let need_truth = || truth.as_ref().ok_or_else(|| Error::Config("this estimator needs --truth".into()));
    if args.inference && !matches!(args.estimator, EstimatorArg::Ddr | EstimatorArg::Oracle) {
        return Err(Error::Config("--inference is available for ddr and oracle".into()));
    }
    let (fit, preds) = match args.estimator {
        EstimatorArg::Ddr => {
            let pi = match args.pi {
                PiArg::Linear => PiSpec::Linear,
                PiArg::Quad => PiSpec::Quad,
            };
            let m = match args.m {
                MArg::Linear => MSpec::Linear,
                MArg::Quad => MSpec::Quad,
                MArg::Sim => MSpec::Sim,
            };
            let dcfg = combo_config(NuisanceCombo { pi, m }, rule, BandwidthChoice::Rot);
            let est = estimate(&data, &dcfg, &rng, exec)?;
            (est.fit, Some(est.preds))
        }
        EstimatorArg::Oracle => {
            let t = need_truth()?;
            let preds = NuisancePredictions::new(t.pi.clone(), t.m.clone(), None)?;
            let fit = ddrkit::ddr::fit_ddr(&data, &preds, LossKind::Squared, &basis, &rule, &mut rng.clone(), exec)?;
            (fit, Some(preds))
        }
        EstimatorArg::Full => {
            let t = need_truth()?;
            let problem =
                DesignProblem::new(basis.expand(data.x()), t.y_full.clone(), LossKind::Squared)?.with_intercept(true);
            (rule.fit(&problem, &mut rng.clone(), exec)?, None)
        }
        EstimatorArg::Cc => {
            let rows = data.complete_cases();
            let y = rows.iter().map(|&i| data.observed_y(i).unwrap_or(f64::NAN)).collect();
            let problem = DesignProblem::new(basis.expand(&data.x().select_rows(&rows)), y, LossKind::Squared)?
                .with_intercept(true);
            (rule.fit(&problem, &mut rng.clone(), exec)?, None)
        }
    };
    let inference = match (&preds, args.inference) {
        (Some(preds), true) => {
            let (r, _) =
                infer(&data, preds, &fit, &basis, args.alpha, NodewiseRule::default(), &mut rng.substream(7), exec)?;
            Some(r)
        }
        _ => None,
    };
    let text = coefficient_csv(&fit, inference.as_ref());
    match &args.out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::FailureBudget { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential { Execution::Sequential } else { Execution::available() };
    let result = with_threads(thread_count(None), || match &cli.command {
        Command::Simulate(a) => simulate_cmd(a),
        Command::Theta0(a) => theta0_cmd(a, exec),
        Command::Run { config } => run_cmd(config, exec),
        Command::Summarize { records, out } => summarize_cmd(records, out.as_ref()),
        Command::Fit(a) => fit_cmd(a, exec),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
