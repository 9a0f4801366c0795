use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bef_rlsvi::harness::{
    self, check_model, diagnose, parse_seeds, plot_data, read_records, write_plot_data, Checkpoint,
    DiagnoseOptions, RunConfig, RunOutput, SweepAxis,
};
use bef_rlsvi::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "bef-rlsvi",
    version,
    about = "BEF-RLSVI experiments and diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Seeds as `a..b` (inclusive) or a comma-separated list.
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory (the BEF_RLSVI_OUT variable takes precedence).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Maximum number of seeds run in parallel.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment: one CSV per seed plus an aggregate.
    Run(RunArgs),
    /// Repeat a run over several episode counts or noise factors.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated episode counts.
        #[arg(
            long,
            conflicts_with = "noise_factors",
            required_unless_present = "noise_factors"
        )]
        episodes_list: Option<String>,
        /// Comma-separated noise factors (scaled mode).
        #[arg(long)]
        noise_factors: Option<String>,
    },
    /// Check the analysis guarantees (coverage, bad rounds, transportation) on a finished run.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Per-seed or aggregate CSV; defaults to the seed CSV next to the checkpoint.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip the per-episode refits needed for coverage.
        #[arg(long)]
        no_coverage: bool,
        /// Random instances per transportation check.
        #[arg(long, default_value_t = 500)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the model-math property suite on an environment or model file.
    CheckModel {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Reduce run CSVs to `k,mean_cum_regret,ci_lo,ci_hi`.
    PlotData {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seeds) = &args.seeds {
        config.seeds = parse_seeds(seeds)?;
    }
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    if let Some(k) = args.episodes {
        config.episodes = k;
    }
    if let Some(jobs) = args.jobs {
        config.jobs = Some(jobs);
    }
    config.validate()?;
    Ok(config)
}

fn summarize(output: &RunOutput) {
    for run in &output.runs {
        let last = run.records.last();
        println!(
            "seed {}: {} episodes, cumulative regret {:.4}",
            run.seed,
            run.records.len(),
            last.map_or(0.0, |r| r.cum_regret)
        );
    }
    println!("wrote {}", output.dir.display());
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, Failure> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Failure::Config(format!("cannot parse {what} {s:?}")))
        })
        .collect()
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run(args) => {
            let config = load_config(&args)?;
            summarize(&harness::run_experiment(&config)?);
        }
        Command::Sweep {
            run,
            episodes_list,
            noise_factors,
        } => {
            let config = load_config(&run)?;
            let axis = match (episodes_list, noise_factors) {
                (Some(ks), _) => SweepAxis::Episodes(parse_list(&ks, "episode count")?),
                (None, Some(fs)) => SweepAxis::NoiseFactor(parse_list(&fs, "noise factor")?),
                (None, None) => unreachable!("clap requires one axis"),
            };
            for output in harness::sweep(&config, &axis)? {
                summarize(&output);
            }
        }
        Command::Diagnose {
            checkpoint,
            csv,
            out,
            no_coverage,
            instances,
            seed,
        } => {
            let cp = Checkpoint::load(&checkpoint)?;
            let csv = csv.unwrap_or_else(|| {
                harness::seed_csv_path(checkpoint.parent().unwrap_or(Path::new(".")), cp.seed)
            });
            let records = read_records(&csv)?;
            let options = DiagnoseOptions {
                transport_instances: instances,
                seed,
                coverage: !no_coverage,
                ..DiagnoseOptions::default()
            };
            let report = diagnose(&cp, &records, &options)?;
            let text = serde_json::to_string_pretty(&report)
                .map_err(|e| Failure::Runtime(e.to_string()))?;
            write_or_print(out.as_deref(), &(text + "\n"))?;
            if !report.bad_rounds.ok() {
                return Err(Failure::Runtime(format!(
                    "bad-round count {} exceeds bound {:.3}",
                    report.bad_rounds.count, report.bad_rounds.bound
                )));
            }
        }
        Command::CheckModel {
            model,
            samples,
            seed,
        } => {
            let report = check_model(&model, samples, seed)?;
            let text = serde_json::to_string_pretty(&report)
                .map_err(|e| Failure::Runtime(e.to_string()))?;
            println!("{text}");
            if !report.pass {
                return Err(Failure::Runtime("model property suite failed".into()));
            }
        }
        Command::PlotData { input, out } => {
            let mut records = Vec::new();
            for path in &input {
                records.extend(read_records(path)?);
            }
            let mut buf = Vec::new();
            write_plot_data(&plot_data(&records), &mut buf)?;
            write_or_print(out.as_deref(), &String::from_utf8_lossy(&buf))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
