use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cyber0::config::{parse_assignment, ExperimentConfig};
use cyber0::metrics::{run_seed, summarize, write_outputs};
use cyber0::verify::{run_suite, SUITES};
use cyber0::Seed64;

/// Byzantine-resilient zero-order federated learning simulator.
#[derive(Parser)]
#[command(name = "cyber0", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write metrics to an output directory.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
        /// Print the resolved config and communication forecast, then stop.
        #[arg(long)]
        dry_run: bool,
    },
    /// Print the resolved config and communication forecast.
    DryRun {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run a property suite and report each check.
    Verify {
        /// Suite name, or `all`.
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; every key has a default.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set rule.base=cwtm`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let pairs = self
            .overrides
            .iter()
            .map(|s| parse_assignment(s))
            .collect::<Result<Vec<_>, _>>()?;
        let text = match &self.config {
            Some(path) => std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?,
            None => String::new(),
        };
        Ok(ExperimentConfig::from_toml_with_overrides(&text, &pairs)?)
    }
}

fn dry_run(cfg: &ExperimentConfig) {
    print!("{}", cfg.to_toml());
    let fc = cfg.comm_forecast();
    println!();
    println!("# communication forecast (scalars)");
    println!("# model dimension:            {}", fc.model_dim);
    println!("# per client per epoch:       {}", fc.per_client_per_epoch);
    println!("# per client over the run:    {}", fc.per_client_total);
    println!("# all clients over the run:   {}", fc.all_clients_total);
}

fn run(cfg: &ExperimentConfig, out: &PathBuf) -> Result<()> {
    let (train, test) = cfg.load_data()?;
    eprintln!(
        "loaded {} training and {} test samples; {} seed(s), {} epochs",
        train.len(),
        test.len(),
        cfg.seeds.len(),
        cfg.epochs
    );
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let r = run_seed(cfg, &train, &test, seed)?;
        let best = cyber0::fedsim::max_accuracy(&r.records).unwrap_or(f64::NAN);
        eprintln!("seed {seed}: max accuracy {best:.4}");
        runs.push(r);
    }
    write_outputs(out, cfg, &runs)?;
    let summary = summarize(&runs);
    let max = &summary.cells["max_accuracy"];
    println!(
        "max accuracy {:.4} +- {:.4} over {} seed(s); uplink {} scalars per client",
        max.mean,
        max.std,
        runs.len(),
        summary.uplink_scalars_per_client
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn verify(suite: &str, seed: u64) -> Result<bool> {
    if suite != "all" && !SUITES.contains(&suite) {
        bail!("unknown suite `{suite}`; expected one of {} or all", SUITES.join(", "));
    }
    let checks = run_suite(suite, Seed64(seed))?;
    for c in &checks {
        println!("{c}");
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, dry_run: true, .. } => config.load().map(|c| {
            dry_run(&c);
            true
        }),
        Command::Run { config, out, .. } => config.load().and_then(|c| run(&c, &out)).map(|_| true),
        Command::DryRun { config } => config.load().map(|c| {
            dry_run(&c);
            true
        }),
        Command::Verify { suite, seed } => verify(&suite, seed),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
