use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ismp::runner;

#[derive(Parser)]
#[command(name = "ismp", version, about = "Stochastic maximum principle experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run { config: PathBuf },
    /// List the built-in benchmarks.
    ListBenchmarks {
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Write long-format plotting CSVs for a finished run.
    EmitPlotData { run_dir: PathBuf },
    /// Fix the local-time estimator signs on a driftless ensemble.
    CalibrateLocaltime {
        #[arg(long, value_delimiter = ',', default_value = "1.0")]
        sigma: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        horizon: f64,
        #[arg(long, default_value_t = 2048)]
        steps: usize,
        #[arg(long, default_value_t = 2000)]
        paths: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report file; printed to stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("ISMP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| format!("ISMP_THREADS must be a positive integer, got '{v}'"))?;
    if n == 0 {
        return Err("ISMP_THREADS must be positive".into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn execute(cli: Cli) -> ismp::Result<u8> {
    match cli.command {
        Command::Run { config } => {
            let out = runner::run_file(&config)?;
            print!("{}", std::fs::read_to_string(out.output.join("summary.txt"))?);
            Ok(out.exit_code() as u8)
        }
        Command::ListBenchmarks { json } => {
            print!("{}", runner::list_benchmarks(json));
            Ok(0)
        }
        Command::EmitPlotData { run_dir } => {
            for p in runner::emit_plot_data(&run_dir)? {
                println!("{}", p.display());
            }
            Ok(0)
        }
        Command::CalibrateLocaltime { sigma, horizon, steps, paths, seed, output } => {
            let cal = runner::calibrate(&sigma, horizon, steps, paths, seed)?;
            let report = cal.report_json() + "\n";
            match output {
                Some(path) => std::fs::write(path, &report)?,
                None => print!("{report}"),
            }
            Ok(if cal.mismatch < runner::CALIBRATION_TOLERANCE { 0 } else { 2 })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
