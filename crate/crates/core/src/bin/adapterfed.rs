use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use adapterfed::adapter::AdapterConfig;
use adapterfed::session::{full_grid, report, run, sweep, SessionConfig};
use adapterfed::trace::SessionTrace;
use adapterfed::Error;

const EXIT_NOT_CONVERGED: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_FAILURE: u8 = 1;

#[derive(Parser)]
#[command(name = "adapterfed", about = "Federated adapter fine-tuning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML session config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run one session and write its trace.
    Run(Common),
    /// Run fixed-adapter sessions over a (depth, width) grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated widths; depths always span 0..=D.
        #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
        widths: Vec<usize>,
    },
    /// Summarize trace files.
    Report {
        #[command(flatten)]
        common: Common,
        traces: Vec<PathBuf>,
    },
}

fn load(common: &Common) -> adapterfed::Result<SessionConfig> {
    let mut cfg = match &common.config {
        Some(p) => SessionConfig::load(p)?,
        None => SessionConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_NOT_CONVERGED),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::ConfigField { .. } => ExitCode::from(EXIT_CONFIG),
                _ => ExitCode::from(EXIT_FAILURE),
            }
        }
    }
}

fn dispatch(command: Command) -> adapterfed::Result<bool> {
    match command {
        Command::Run(common) => {
            let cfg = load(&common)?;
            let result = run(&cfg)?;
            result.trace.write_jsonl(BufWriter::new(File::create(&common.out)?))?;
            Ok(result.converged())
        }
        Command::Sweep { common, widths } => {
            let cfg = load(&common)?;
            let mut grid: Vec<AdapterConfig> = full_grid(cfg.model.num_layers, 8, 8)
                .into_iter()
                .filter(|c| c.depth == 0)
                .collect();
            for d in 1..=cfg.model.num_layers {
                grid.extend(widths.iter().map(|&w| AdapterConfig::new(d, w)));
            }
            let rows = sweep(&cfg, &grid)?;
            let mut out = BufWriter::new(File::create(&common.out)?);
            writeln!(out, "depth\twidth\tconverged\ttime_to_target_s\trounds\tbytes\tbest_accuracy")?;
            for r in &rows {
                let t = r.time_to_target.map_or("-".to_string(), |t| format!("{t:.3}"));
                writeln!(
                    out,
                    "{}\t{}\t{}\t{t}\t{}\t{}\t{:.4}",
                    r.depth, r.width, r.converged, r.rounds, r.total_bytes, r.best_accuracy
                )?;
            }
            Ok(rows.iter().all(|r| r.converged))
        }
        Command::Report { common, traces } => {
            let cfg = load(&common)?;
            let mut reports = Vec::with_capacity(traces.len());
            for path in &traces {
                let trace = SessionTrace::read_jsonl(BufReader::new(File::open(path)?))?;
                reports.push(report(&trace, cfg.targets.reference_accuracy, &cfg.targets.relative)?);
            }
            let out = BufWriter::new(File::create(&common.out)?);
            serde_json::to_writer_pretty(out, &reports).map_err(|e| Error::Codec(e.to_string()))?;
            Ok(true)
        }
    }
}
