use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use trustchain::audit::verify_chain;
use trustchain::config::ConfigError;
use trustchain::report::report;
use trustchain::scenario::Simulation;
use trustchain::ScenarioConfig;

const EXIT_CONFIG: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(
    name = "trustchain",
    version,
    about = "Trust-scored blockchain CIDN simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its metrics and chain export.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's rng_seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Log a per-round snapshot of every node to events.jsonl.
        #[arg(long)]
        verbose: bool,
        /// Run K consecutive seeds concurrently, each into OUT/seed-<N>.
        #[arg(long, value_name = "K", default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        parallel: u64,
    },
    /// Replay full validation of a chain export.
    Verify {
        #[arg(long)]
        chain: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Print summary tables for a run directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl ToString) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }
}

fn load_config(path: &Path) -> Result<ScenarioConfig, Failure> {
    ScenarioConfig::load(path).map_err(|e| match e {
        ConfigError::Io(err) => Failure::new(EXIT_IO, format!("{}: {err}", path.display())),
        other => Failure::new(EXIT_CONFIG, format!("{}: {other}", path.display())),
    })
}

fn run_one(cfg: ScenarioConfig, out: &Path, verbose: bool) -> Result<String, Failure> {
    let sim = Simulation::run(&cfg, verbose);
    sim.write_outputs(out)
        .map_err(|e| Failure::new(EXIT_IO, e))?;
    let table = report(out).map_err(|e| Failure::new(EXIT_IO, e))?;
    Ok(format!(
        "seed {} -> {}\nchain export: {}\n\n{table}",
        cfg.rng_seed,
        out.display(),
        out.join("chain.jsonl").display()
    ))
}

fn run(
    config: &Path,
    seed: Option<u64>,
    out: &Path,
    verbose: bool,
    parallel: u64,
) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.rng_seed = s;
    }
    if parallel == 1 {
        println!("{}", run_one(cfg, out, verbose)?);
        return Ok(());
    }
    let jobs: Vec<(ScenarioConfig, PathBuf)> = (0..parallel)
        .map(|k| {
            let mut c = cfg.clone();
            c.rng_seed = cfg.rng_seed.wrapping_add(k);
            let dir = out.join(format!("seed-{}", c.rng_seed));
            (c, dir)
        })
        .collect();
    let results: Vec<Result<String, Failure>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .into_iter()
            .map(|(c, dir)| s.spawn(move || run_one(c, &dir, verbose)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("run thread panicked"))
            .collect()
    });
    let mut first_err = None;
    for r in results {
        match r {
            Ok(text) => println!("{text}"),
            Err(e) if first_err.is_none() => first_err = Some(e),
            Err(e) => eprintln!("error: {}", e.message),
        }
    }
    first_err.map_or(Ok(()), Err)
}

fn verify(chain: &Path, config: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let text = std::fs::read_to_string(chain)
        .map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", chain.display())))?;
    let r = verify_chain(&text, &cfg);
    println!("{r}");
    if r.ok() {
        Ok(())
    } else {
        Err(Failure::new(EXIT_VERIFY, r))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // Bad arguments are configuration errors; help and version are not errors.
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    let start = Instant::now();
    let result = match &cli.command {
        Command::Run {
            config,
            seed,
            out,
            verbose,
            parallel,
        } => run(config, *seed, out, *verbose, *parallel),
        Command::Verify { chain, config } => verify(chain, config),
        Command::Report { dir } => report(dir)
            .map(|t| print!("{t}"))
            .map_err(|e| Failure::new(EXIT_IO, e)),
    };
    if matches!(cli.command, Command::Run { .. }) {
        println!("wall time: {:.3}s", start.elapsed().as_secs_f64());
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if e.code != EXIT_VERIFY {
                eprintln!("error: {}", e.message);
            }
            ExitCode::from(e.code)
        }
    }
}
