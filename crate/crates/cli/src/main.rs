use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use chemau_core::controller::{ChainLengthBasis, ControllerConfig, Mode};
use chemau_core::estimators::{EstimatorKind, EstimatorParams, HeuristicWeights, SignConvention};
use chemau_core::gateway::http::{HttpBackend, API_KEY_ENV, DOMAIN_URL_ENV, GENERAL_URL_ENV};
use chemau_core::gateway::mock::MockBackend;
use chemau_core::gateway::ModelBackend;
use chemau_core::harness::compare::{compare_estimators, CompareCase, ThetaSweep};
use chemau_core::harness::report::{emit_report, EvalSummary, ReportFormat};
use chemau_core::harness::{load_dataset, load_traces, run_eval, EvalOptions};
use chemau_core::knowledge::DecompositionStrategy;
use chemau_core::templates::PromptTemplates;
use chemau_core::Backends;

#[derive(Parser)]
#[command(name = "chemau", version, about = "Step-wise uncertainty-guided chemistry QA evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a dataset and write summary, report and traces.
    Run(RunArgs),
    /// Score chains with every estimator across a threshold sweep.
    Compare(CompareArgs),
    /// Render a report from a previous run directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "full")]
    mode: Mode,
    #[arg(long, default_value = "adaptive")]
    estimator: EstimatorKind,
    /// Positional weight; defaults to 0.08 (neg-log) or -0.08 (mirrored).
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    /// Flag threshold; defaults to 1.5 (neg-log) or -1.5 (mirrored).
    #[arg(long, allow_hyphen_values = true)]
    theta: Option<f64>,
    #[arg(long, default_value = "neg-log")]
    sign_convention: SignConvention,
    #[arg(long, default_value_t = 5)]
    max_iterations: u32,
    #[arg(long, default_value_t = 2)]
    stuck_step_limit: u32,
    #[arg(long, default_value = "current")]
    chain_length_basis: ChainLengthBasis,
    #[arg(long, default_value = "model")]
    decomposition: DecompositionStrategy,
    #[arg(long, env = GENERAL_URL_ENV)]
    general_url: Option<String>,
    #[arg(long, env = DOMAIN_URL_ENV)]
    domain_url: Option<String>,
    #[arg(long, default_value = "general")]
    general_model: String,
    #[arg(long, default_value = "domain")]
    domain_model: String,
    #[arg(long, env = API_KEY_ENV, hide_env_values = true)]
    api_key: Option<String>,
    /// Fold system prompts into the user message for the general model.
    #[arg(long)]
    no_system_role: bool,
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
    /// Scripted backend serving both roles; overrides the URLs.
    #[arg(long)]
    mock_script: Option<PathBuf>,
    /// Directory of `<name>.txt` prompt overrides.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Directory of trace documents.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    traces: Option<PathBuf>,
    /// `rising3` (alias `fig1`) or `rising:<from>:<to>:<steps>`; may repeat.
    #[arg(long)]
    synthetic: Vec<String>,
    #[arg(long, default_value_t = 0.08, allow_hyphen_values = true)]
    alpha: f64,
    /// `lo:hi:step`, or a single threshold.
    #[arg(long, default_value = "0:2:0.1")]
    theta_sweep: String,
    /// Where to write the comparison document.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "table")]
    format: ReportFormat,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::Compare(args) => compare(args),
        Command::Report(args) => report(args),
    }
}

fn estimator_params(args: &RunArgs) -> EstimatorParams<f64> {
    let defaults = match args.sign_convention {
        SignConvention::NegLog => EstimatorParams::default(),
        SignConvention::Mirrored => EstimatorParams::mirrored_defaults(args.estimator),
    };
    EstimatorParams {
        kind: args.estimator,
        alpha: args.alpha.unwrap_or(defaults.alpha),
        theta: args.theta.unwrap_or(defaults.theta),
        convention: args.sign_convention,
    }
}

fn backends(args: &RunArgs) -> Result<Backends> {
    if let Some(path) = &args.mock_script {
        let mock = MockBackend::from_path(path)?;
        return Ok(Backends::shared(Arc::new(mock)));
    }
    let http = |url: &str, model: &str| {
        let mut b = HttpBackend::new(url, model).with_timeout(Duration::from_secs(args.timeout_secs));
        if let Some(key) = &args.api_key {
            b = b.with_api_key(key);
        }
        b
    };
    let Some(general_url) = &args.general_url else {
        bail!("no general backend: pass --general-url, set {GENERAL_URL_ENV}, or use --mock-script");
    };
    let mut general = http(general_url, &args.general_model);
    if args.no_system_role {
        general = general.without_system_role();
    }
    let domain = args
        .domain_url
        .as_deref()
        .map(|u| Arc::new(http(u, &args.domain_model)) as Arc<dyn ModelBackend>);
    if args.mode.needs_domain() && domain.is_none() {
        bail!(
            "{} mode needs a domain backend: pass --domain-url or set {DOMAIN_URL_ENV}",
            args.mode
        );
    }
    Ok(Backends::new(Arc::new(general), domain))
}

fn trace_file_name(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect();
    format!("{safe}.json")
}

fn run(args: RunArgs) -> Result<()> {
    let dataset = load_dataset(&args.dataset)?;
    let config = ControllerConfig {
        estimator: estimator_params(&args),
        max_iterations: args.max_iterations,
        mode: args.mode,
        stuck_step_limit: args.stuck_step_limit,
        chain_length_basis: args.chain_length_basis,
        decomposition: args.decomposition,
    };
    config.validate()?;
    let templates = match &args.templates {
        Some(dir) => PromptTemplates::from_dir(dir)
            .with_context(|| format!("loading templates from {}", dir.display()))?,
        None => PromptTemplates::default(),
    };
    let backends = backends(&args)?;
    let opts = EvalOptions {
        workers: args.workers,
        templates: &templates,
        weights: &HeuristicWeights,
    };
    let result = run_eval(&dataset, &config, &backends, &opts)?;

    let traces_dir = args.out.join("traces");
    std::fs::create_dir_all(&traces_dir)
        .with_context(|| format!("creating {}", traces_dir.display()))?;
    for t in &result.traces {
        write(&traces_dir.join(trace_file_name(&t.question_id)), &t.to_json())?;
    }
    write(&args.out.join("summary.json"), &result.summary.to_json())?;
    let table = emit_report(&result.summary, &result.traces, ReportFormat::Table);
    write(&args.out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn compare(args: CompareArgs) -> Result<()> {
    let sweep: ThetaSweep = args.theta_sweep.parse()?;
    let cases = match &args.traces {
        Some(dir) => load_traces(dir)?
            .iter()
            .map(CompareCase::from_trace)
            .collect::<Result<Vec<_>, _>>()?,
        None => args
            .synthetic
            .iter()
            .map(|s| CompareCase::synthetic(s))
            .collect::<Result<Vec<_>, _>>()?,
    };
    let comparison = compare_estimators(&cases, args.alpha, &sweep)?;
    if let Some(path) = &args.out {
        write(path, &comparison.to_json())?;
    }
    print!("{}", comparison.render_table());
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let summary_path = args.input.join("summary.json");
    let text = std::fs::read_to_string(&summary_path)
        .with_context(|| format!("reading {}", summary_path.display()))?;
    let summary = EvalSummary::from_json(&text)
        .map_err(|e| anyhow::anyhow!("{}: {e}", summary_path.display()))?;
    let traces_dir = args.input.join("traces");
    let traces = if traces_dir.is_dir() {
        load_traces(&traces_dir)?
    } else {
        Vec::new()
    };
    print!("{}", emit_report(&summary, &traces, args.format));
    Ok(())
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}
