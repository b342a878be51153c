use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use homotopy_transport::stats::write_csv;
use homotopy_transport::{run_experiment, Error, ExperimentConfig, Method};

#[derive(Parser)]
#[command(
    name = "transport-bench",
    version,
    about = "Replicated Stein-Stein pricing experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config; flags override the file.
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Repeat to select several methods.
    #[arg(long = "method", value_parser = parse_method)]
    methods: Vec<Method>,
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda_steps: Option<usize>,
    #[arg(long)]
    ess_threshold: Option<f64>,
    #[arg(long)]
    fixed_path: bool,
    #[arg(long)]
    emit_paths: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s)
        .ok_or_else(|| format!("unknown method `{s}` (expected mc, pf, homotopy or rw-homotopy)"))
}

fn configure(args: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if !args.methods.is_empty() {
        cfg.methods = args.methods.clone();
    }
    if let Some(n) = args.steps {
        cfg.params = cfg.params.with_steps(n)?;
    }
    cfg.n_particles = args.particles.unwrap_or(cfg.n_particles);
    cfg.n_replications = args.replications.unwrap_or(cfg.n_replications);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.lambda_steps = args.lambda_steps.unwrap_or(cfg.lambda_steps);
    cfg.ess_threshold = args.ess_threshold.unwrap_or(cfg.ess_threshold);
    cfg.fixed_path |= args.fixed_path;
    cfg.emit_paths |= args.emit_paths;
    if args.out.is_some() {
        cfg.output_dir.clone_from(&args.out);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: &RunArgs) -> Result<(), Error> {
    let cfg = configure(args)?;
    let out = run_experiment(&cfg)?;
    let stdout = std::io::stdout();
    write_csv(&out.rows(), stdout.lock())?;
    for f in &out.failures {
        let rec = serde_json::to_string(f).expect("failure serialises");
        eprintln!("{rec}");
    }
    if let Some(dir) = &cfg.output_dir {
        for p in out.write(dir)? {
            eprintln!("wrote {}", p.display());
        }
    }
    stdout.lock().flush().map_err(|e| Error::io("<stdout>", e))
}

fn error_record(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_record("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    match &cli.command {
        Command::Run(args) => match run(args) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("{}", error_record(e.kind(), &e.to_string()));
                ExitCode::FAILURE
            }
        },
    }
}
