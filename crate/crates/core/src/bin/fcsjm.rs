use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fcsjm::harness::{run_study, run_two_step_on_csv, AnalysisConfig, Method, Profile, StudyConfig};
use fcsjm::sim::{simulate_cohort, GenerationConfig, Hypothesis, MissingnessScenario};
use fcsjm::Result;

#[derive(Parser)]
#[command(name = "fcsjm", version, about = "FCS multiple imputation followed by joint modeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one cohort and write it as a wide CSV.
    Simulate(SimulateArgs),
    /// Run a simulation study for one scenario.
    Study(StudyArgs),
    /// Two-step analysis of a wide CSV cohort.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value = "strong_nmar")]
    scenario: MissingnessScenario,
    #[arg(long, default_value = "h1")]
    hypothesis: Hypothesis,
    #[arg(long, default_value_t = 1000)]
    n_subjects: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    /// Also write the long format (post-event values dropped) here.
    #[arg(long)]
    long: Option<PathBuf>,
}

#[derive(Args)]
struct StudyArgs {
    /// JSON study configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    profile: Option<Profile>,
    #[arg(long)]
    scenario: Option<MissingnessScenario>,
    #[arg(long)]
    hypothesis: Option<Hypothesis>,
    #[arg(long)]
    n_subjects: Option<usize>,
    #[arg(long)]
    n_reps: Option<usize>,
    #[arg(long)]
    multiples: Option<usize>,
    #[arg(long)]
    nbiter: Option<usize>,
    /// Comma-separated subset of standard_jm, standard_fcs_jm,
    /// modified_fcs_jm, fully_observed_jm.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long)]
    quadrature: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; defaults to the configured one, then `study_out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Wide CSV cohort.
    #[arg(long)]
    input: PathBuf,
    /// JSON analysis configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    multiples: Option<usize>,
    #[arg(long)]
    nbiter: Option<usize>,
    #[arg(long)]
    quadrature: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "analysis_out")]
    out: PathBuf,
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let cfg = GenerationConfig::preset(args.scenario, args.hypothesis);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let cohort = simulate_cohort(args.n_subjects, &cfg, &mut rng)?;
    cohort.write_wide_csv_path(&args.out)?;
    if let Some(path) = args.long {
        cohort.write_long_csv(std::fs::File::create(path)?, true)?;
    }
    info!(
        "{} subjects, {} events, {:.1}% missing cells",
        cohort.n_subjects(),
        cohort.n_events(),
        100.0 * cohort.missing_fraction()
    );
    Ok(())
}

fn study(args: StudyArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => StudyConfig::from_json_path(path)?,
        None => StudyConfig::profile(
            args.profile.unwrap_or(Profile::Desk),
            args.scenario.unwrap_or(MissingnessScenario::StrongNmar),
            args.hypothesis.unwrap_or(Hypothesis::H1),
        ),
    };
    if args.config.is_some() {
        if let Some(p) = args.profile {
            let base = StudyConfig::profile(p, cfg.scenario, cfg.hypothesis);
            cfg.n_subjects = base.n_subjects;
            cfg.n_replications = base.n_replications;
            cfg.joint_model.quadrature_order = base.joint_model.quadrature_order;
        }
        if let Some(s) = args.scenario {
            cfg.scenario = s;
        }
        if let Some(h) = args.hypothesis {
            cfg.hypothesis = h;
        }
    }
    if let Some(n) = args.n_subjects {
        cfg.n_subjects = n;
    }
    if let Some(n) = args.n_reps {
        cfg.n_replications = n;
    }
    if let Some(m) = args.multiples {
        cfg.imputation.n_multiples = m;
    }
    if let Some(k) = args.nbiter {
        cfg.imputation.n_iterations = k;
    }
    if let Some(m) = args.methods {
        cfg.methods = m;
    }
    if let Some(q) = args.quadrature {
        cfg.joint_model.quadrature_order = q;
    }
    if let Some(s) = args.seed {
        cfg.master_seed = s;
    }
    if let Some(w) = args.workers {
        cfg.n_workers = w;
    }
    let out = args
        .out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("study_out"));
    let run = run_study(&cfg)?;
    run.report.write_outputs(&out, &run.replications)?;
    print!("{}", run.report.render_text()?);
    info!("outputs written to {}", out.display());
    Ok(())
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => AnalysisConfig::default(),
    };
    if let Some(m) = args.multiples {
        cfg.imputation.n_multiples = m;
    }
    if let Some(k) = args.nbiter {
        cfg.imputation.n_iterations = k;
    }
    if let Some(q) = args.quadrature {
        cfg.joint_model.quadrature_order = q;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let report = run_two_step_on_csv(&args.input, &cfg)?;
    report.write_outputs(&args.out)?;
    print!("{}", report.render_text());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Study(a) => study(a),
        Command::Analyze(a) => analyze(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
