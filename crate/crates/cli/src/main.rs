mod config;
mod processes;

use std::fs;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedshare_core::data::DatasetKind;
use fedshare_core::experiment::{run_experiment, ExperimentConfig, ExperimentError, Mode};
use fedshare_core::metrics::{emit_table, read_summary, write_metrics, TableLayout};
use fedshare_core::protocol::{DivisorMode, TransportKind};

use processes::Role;

#[derive(Parser)]
#[command(name = "fedshare", version, about = "Secret-shared federated averaging experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its metrics.
    Run(RunArgs),
    /// Combine the summaries of several runs into one CSV table.
    EmitTable {
        #[arg(long, default_value = "clients")]
        layout: TableLayout,
        /// Write the table here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    #[command(hide = true)]
    Participant {
        #[arg(long)]
        role: Role,
        #[arg(long)]
        id: u32,
        #[arg(long)]
        config_json: String,
        #[arg(long, value_delimiter = ',')]
        servers: Vec<SocketAddr>,
    },
}

#[derive(Args, Default)]
struct RunArgs {
    /// File of `key = value` settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<DatasetKind>,
    /// Directory holding the IDX files (falls back to $SCOTCH_DATA_DIR).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Number of clients.
    #[arg(long)]
    m: Option<usize>,
    /// Number of aggregation servers.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    iter: Option<usize>,
    /// Ring width in bits.
    #[arg(long)]
    l: Option<u32>,
    /// Fractional bits.
    #[arg(long, alias = "l-f")]
    lf: Option<u32>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    divisor_mode: Option<DivisorMode>,
    #[arg(long)]
    transport: Option<TransportKind>,
    /// First server port for socket runs; 0 picks free ports.
    #[arg(long)]
    listen_base_port: Option<u16>,
    #[arg(long)]
    timeout_ms: Option<u64>,
    /// Metrics file (JSON lines); the CSV and timings land beside it.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Training samples kept after the split; 0 keeps all.
    #[arg(long)]
    max_samples: Option<usize>,
    #[arg(long)]
    mode: Option<Mode>,
}

impl RunArgs {
    fn resolve(self) -> Result<ExperimentConfig, ExperimentError> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            config::apply_file(&mut cfg, path)?;
        }
        macro_rules! overlay {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = self.$flag { cfg.$field = v; })*
            };
        }
        overlay!(
            dataset => dataset, m => m, n => n, iter => iter, l => l, lf => l_f, lr => lr,
            epochs => epochs, batch_size => batch_size, seed => seed, divisor_mode => divisor_mode,
            transport => transport, listen_base_port => listen_base_port, timeout_ms => timeout_ms,
            output => output, max_samples => max_samples, mode => mode,
        );
        if self.data_dir.is_some() {
            cfg.data_dir = self.data_dir;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(args: RunArgs) -> Result<(), ExperimentError> {
    let cfg = args.resolve()?;
    let outcome = if cfg.transport == TransportKind::Sockets && cfg.mode == Mode::Protocol {
        processes::run_processes(&cfg)?
    } else {
        run_experiment(&cfg)?
    };
    for r in &outcome.rounds {
        eprintln!(
            "round {}: accuracy {} messages {} bytes {}",
            r.round,
            r.test_accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into()),
            r.messages,
            r.bytes
        );
    }
    let paths = write_metrics(&cfg, &outcome)?;
    eprintln!("metrics written to {}", paths.records.display());
    match outcome.error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn table(layout: TableLayout, output: Option<PathBuf>, files: &[PathBuf]) -> Result<(), ExperimentError> {
    let runs = files.iter().map(|f| read_summary(f)).collect::<Result<Vec<_>, _>>()?;
    let csv = emit_table(&runs, layout)?;
    match output {
        Some(path) => fs::write(&path, csv).map_err(|source| ExperimentError::Io { path, source }),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::EmitTable { layout, output, files } => table(layout, output, &files),
        Command::Participant {
            role,
            id,
            config_json,
            servers,
        } => serde_json::from_str::<ExperimentConfig>(&config_json)
            .map_err(|e| ExperimentError::Config(e.to_string()))
            .and_then(|cfg| processes::participant(&cfg, role, id, &servers)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
