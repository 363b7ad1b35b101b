use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use sdde_insider::LabError;
use sdde_insider_cli::output::{write_outputs, Metadata, Versions};
use sdde_insider_cli::{run_scenario, validate_config, ConfigError, ExperimentConfig, Overrides, Scenario};

const EXIT_CONFIG: u8 = 1;
const EXIT_INVARIANT: u8 = 2;

/// Run one experiment scenario and write `<scenario>.csv` and `<scenario>.meta.json`.
#[derive(Debug, Parser)]
#[command(name = "insider-lab", version)]
struct Cli {
    /// donsker-check, forward-integral-check, absde-solve, harvest,
    /// maxprinciple-verify, portfolio or viability-sweep.
    scenario: String,
    /// Flat TOML file with the scenario keys.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: the `out` key, else the working directory).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of Monte Carlo paths.
    #[arg(long)]
    paths: Option<u64>,
    /// Time step.
    #[arg(long)]
    dt: Option<f64>,
}

fn is_config_error(e: &LabError) -> bool {
    !matches!(e, LabError::Invariant(_) | LabError::NonFinite(_) | LabError::DegenerateKernel(_))
}

fn load(cli: &Cli) -> Result<ExperimentConfig, ConfigError> {
    let scenario: Scenario = cli.scenario.parse()?;
    let mut config = ExperimentConfig::load(scenario, &cli.config)?;
    config.apply(&Overrides { out: cli.out.clone(), seed: cli.seed, paths: cli.paths, dt: cli.dt });
    let violations = validate_config(&config);
    if violations.is_empty() {
        Ok(config)
    } else {
        Err(ConfigError::Invalid(violations))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    let config = match load(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("insider-lab: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let start = Instant::now();
    let output = match run_scenario(&config) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("insider-lab: {} failed: {e}", config.scenario);
            return ExitCode::from(if is_config_error(&e) { EXIT_CONFIG } else { EXIT_INVARIANT });
        }
    };
    let meta = Metadata {
        scenario: config.scenario.name(),
        config: config.echo(),
        versions: Versions::current(),
        run: output.table.info,
        rows: output.table.rows.len(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
        summary: output.summary.clone(),
        invariant_violations: &output.violations,
    };
    match write_outputs(&config.out_dir(), config.scenario.name(), &output.table, &meta) {
        Ok((csv, json)) => println!("wrote {} and {}", csv.display(), json.display()),
        Err(e) => {
            eprintln!("insider-lab: cannot write outputs: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    if output.violations.is_empty() {
        ExitCode::SUCCESS
    } else {
        for v in &output.violations {
            eprintln!("insider-lab: invariant violated: {v}");
        }
        ExitCode::from(EXIT_INVARIANT)
    }
}
