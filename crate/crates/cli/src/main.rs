use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use mealab::experiment::{self, ExperimentConfig, RunOptions, Transport};
use mealab::modeling::Model;
use mealab::par::Exec;
use mealab::victim_api::{BudgetLedger, DefenseConfig, HttpServer, VictimService};

#[derive(Parser)]
#[command(name = "mealab", version, about = "Model extraction and attribute inference experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    InProcess,
    Http,
}

#[derive(Subcommand)]
enum Command {
    /// Check an experiment config and report every problem found.
    Validate { config: PathBuf },
    /// Run an experiment and write its CSV tables.
    Run {
        config: PathBuf,
        /// Output directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run on the calling thread only.
        #[arg(long)]
        sequential: bool,
        /// Override the config's transport.
        #[arg(long, value_enum)]
        transport: Option<TransportArg>,
        /// Also save each seed's victim model as JSON.
        #[arg(long)]
        save_models: bool,
    },
    /// Write the config's synthetic corpora as JSONL.
    Synth {
        config: PathBuf,
        /// Output directory; defaults to `<output_dir>/corpora`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve a saved model over HTTP until interrupted.
    Serve {
        model: PathBuf,
        /// `none`, `hard`, `soften:TAU` or `perturb:SIGMA[:SEED]`.
        defense: String,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Register a client as `NAME=BUDGET`; repeatable.
        #[arg(long = "client", value_name = "NAME=BUDGET")]
        clients: Vec<String>,
    },
}

fn fail(stage: &str, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("[{stage}] {msg}");
    ExitCode::FAILURE
}

fn load(path: &PathBuf) -> Result<ExperimentConfig, ExitCode> {
    ExperimentConfig::load(path).map_err(|issues| {
        for i in &issues {
            eprintln!("[validate] {}: {i}", path.display());
        }
        ExitCode::from(2)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => match load(&config) {
            Ok(_) => {
                println!("{}: ok", config.display());
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
        Command::Run {
            config,
            out,
            sequential,
            transport,
            save_models,
        } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let opts = RunOptions {
                exec: if sequential { Exec::Sequential } else { Exec::default() },
                transport: transport.map(|t| match t {
                    TransportArg::InProcess => Transport::InProcess,
                    TransportArg::Http => Transport::Http,
                }),
            };
            let report = match experiment::run(&cfg, opts) {
                Ok(r) => r,
                Err(e) => return fail("run", e),
            };
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let paths = match experiment::write_csvs(&report, &dir) {
                Ok(p) => p,
                Err(e) => return fail("write", e),
            };
            if save_models {
                for (seed, model) in &report.victims {
                    let p = dir.join(format!("victim_seed{seed}.json"));
                    if let Err(e) = model.save(&p) {
                        return fail("write", e);
                    }
                    println!("{}", p.display());
                }
            }
            for p in paths {
                println!("{}", p.display());
            }
            let mut failed = false;
            for r in report.failures() {
                if let Err(e) = &r.outcome {
                    failed = true;
                    eprintln!(
                        "[{}] defense={} source={} multiplier={} seed={}: {}",
                        e.stage, r.key.defense, r.key.source, r.key.multiplier, r.key.seed, e.message
                    );
                }
            }
            if failed {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            }
        }
        Command::Synth { config, out } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let dir = out.unwrap_or_else(|| cfg.output_dir.join("corpora"));
            match experiment::synth_corpora(&cfg, &dir) {
                Ok(paths) => {
                    for p in paths {
                        println!("{}", p.display());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail("synth", e),
            }
        }
        Command::Serve {
            model,
            defense,
            addr,
            clients,
        } => {
            let model = match Model::load(&model) {
                Ok(m) => m,
                Err(e) => return fail("load", e),
            };
            let defense: DefenseConfig = match defense.parse() {
                Ok(d) => d,
                Err(e) => return fail("defense", e),
            };
            let mut ledger = BudgetLedger::new();
            for c in &clients {
                let Some((name, budget)) = c.split_once('=') else {
                    return fail("client", format!("expected NAME=BUDGET, got `{c}`"));
                };
                match budget.parse::<u64>() {
                    Ok(b) => ledger.register(name, b),
                    Err(_) => return fail("client", format!("bad budget in `{c}`")),
                }
            }
            let service = match VictimService::new(Arc::new(model), defense, ledger) {
                Ok(s) => Arc::new(s),
                Err(e) => return fail("serve", e),
            };
            let server = match HttpServer::spawn(service, addr) {
                Ok(s) => s,
                Err(e) => return fail("serve", e),
            };
            println!("listening on {}", server.url());
            server.join();
            ExitCode::SUCCESS
        }
    }
}
