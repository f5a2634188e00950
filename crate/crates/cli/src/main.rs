use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use resample_tmle::data::{read_dataset, write_dataset};
use resample_tmle::harness::{emit_report, run_study, Estimation, EstimationSettings, EstimatorChoice, Family, StudySpec};
use resample_tmle::sim::{simulate_cohort, write_latent, FollowUpMode, SimulationConfig};
use resample_tmle::tmle::{CensoringMode, WeightMode};

#[derive(Parser, Debug)]
#[command(name = "rstmle", version, about = "Survival estimation in two-stage resampling designs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort.
    Simulate(SimulateArgs),
    /// Estimate survival on an observed dataset.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo study from a JSON spec.
    Mc(McArgs),
}

#[derive(clap::Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    latent_out: Option<PathBuf>,
    /// JSON file with simulation parameters; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Fixed,
    Varied,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum EstimatorArg {
    TmlePooled,
    TmleRecursive,
    Plugin,
    TmleIpcw,
    TmleStratified,
    NaiveKm,
    Wkm,
    Ipw,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum WeightsArg {
    Known,
    Estimated,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CensoringArg {
    Known,
    Estimated,
    Targeted,
}

#[derive(clap::Args, Debug)]
struct EstimateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    t_max: usize,
    #[arg(long, value_enum)]
    estimator: EstimatorArg,
    #[arg(long, value_delimiter = ',', required = true)]
    t0: Vec<usize>,
    #[arg(long, value_enum, default_value = "known")]
    weights: WeightsArg,
    #[arg(long, default_value_t = 0.2)]
    resample_prob: f64,
    #[arg(long, value_enum, default_value = "known")]
    censoring: CensoringArg,
    /// Follow-up law for known censoring; pairs with `--tau-values`.
    #[arg(long, value_delimiter = ',')]
    tau_probs: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', default_value = "5,7,9,10")]
    tau_values: Vec<usize>,
    #[arg(long, default_value_t = 500)]
    bootstrap_b: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct McArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => serde_json::from_str::<SimulationConfig>(
            &std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )
        .context("parsing simulation config")?,
        None => SimulationConfig::default(),
    };
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(t) = args.t_max {
        cfg.t_max = t;
    }
    if let Some(m) = args.mode {
        cfg.mode = match m {
            ModeArg::Fixed => FollowUpMode::FixedTau,
            ModeArg::Varied => FollowUpMode::VariedTau,
        };
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let (data, latent) = simulate_cohort(&cfg)?;
    write_dataset(&data, &args.out)?;
    if let Some(p) = &args.latent_out {
        write_latent(&latent, cfg.t_max, p)?;
    }
    log::info!("wrote {} subjects to {}", data.len(), args.out.display());
    Ok(())
}

fn choice(args: &EstimateArgs) -> EstimatorChoice {
    let family = match args.estimator {
        EstimatorArg::TmlePooled => Family::TmlePooled,
        EstimatorArg::TmleRecursive => Family::TmleRecursive,
        EstimatorArg::Plugin => Family::Plugin,
        EstimatorArg::TmleIpcw => Family::Ipcw,
        EstimatorArg::TmleStratified => Family::Stratified,
        EstimatorArg::NaiveKm => Family::NaiveKm,
        EstimatorArg::Wkm => Family::WeightedKm,
        EstimatorArg::Ipw => Family::Ipw,
    };
    EstimatorChoice {
        family,
        delta: match args.weights {
            WeightsArg::Known => WeightMode::Known,
            WeightsArg::Estimated => WeightMode::Estimated,
        },
        censoring: match args.censoring {
            CensoringArg::Known => CensoringMode::Known,
            CensoringArg::Estimated => CensoringMode::Estimated,
            CensoringArg::Targeted => CensoringMode::Targeted,
        },
        intercept_only: false,
    }
}

fn estimate(args: EstimateArgs) -> Result<()> {
    let data = read_dataset(&args.data, args.t_max).with_context(|| format!("reading {}", args.data.display()))?;
    let varied = data.subjects.iter().any(|s| s.tau < data.t_max);
    let tau_law = match &args.tau_probs {
        Some(p) => {
            if p.len() != args.tau_values.len() {
                bail!("--tau-probs needs one probability per --tau-values entry");
            }
            Some(args.tau_values.iter().copied().zip(p.iter().copied()).collect())
        }
        None => {
            let needs_law = matches!(args.estimator, EstimatorArg::TmleIpcw | EstimatorArg::TmleStratified)
                && matches!(args.censoring, CensoringArg::Known);
            if varied && needs_law {
                bail!("follow-up varies across subjects: known censoring needs --tau-probs");
            }
            None
        }
    };
    let settings = EstimationSettings {
        resample_prob: args.resample_prob,
        tau_law,
        bootstrap_b: args.bootstrap_b,
        delta_includes_tau: varied,
        seed: args.seed,
        ..EstimationSettings::default()
    };
    let horizon = *args.t0.iter().max().expect("clap requires t0");
    let est = Estimation::new(&data, settings, horizon);
    let mut reports = Vec::new();
    for (t0, r) in est.run(&choice(&args), &args.t0) {
        reports.push(r.with_context(|| format!("estimation failed at t0={t0}"))?);
    }
    let json = serde_json::to_string_pretty(&reports)?;
    match &args.out {
        Some(p) => std::fs::write(p, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn mc(args: McArgs) -> Result<bool> {
    let text = std::fs::read_to_string(&args.spec).with_context(|| format!("reading {}", args.spec.display()))?;
    let spec = StudySpec::from_json(&text)?;
    let result = run_study(&spec, args.jobs)?;
    emit_report(&result, &args.out)?;
    for a in &result.assertions {
        println!("{} {:?}: {}", if a.passed { "PASS" } else { "FAIL" }, a.assertion, a.detail);
    }
    Ok(result.all_passed())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(a) => simulate(a).map(|_| true),
        Command::Estimate(a) => estimate(a).map(|_| true),
        Command::Mc(a) => mc(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
