use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use pabill::ledger::Ledger;
use pabill::market::{self, SynthParams};
use pabill::oracle;
use pabill::settlement;
use pabill::sim::{self, RunOptions, SimConfig, SimError};

const EXIT_CONFIG: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "pabill", version, about = "Privacy-preserving P2P energy billing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one billing period and write report, timings, ledger and finals.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write per-cycle plaintext statements (audit.txt).
        #[arg(long)]
        audit: bool,
    },
    /// Emit a synthetic profile file.
    Synth {
        /// Takes counts, cycles, ratio and seed from a config; flags override.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        consumers: Option<u32>,
        #[arg(long)]
        prosumers: Option<u32>,
        #[arg(long)]
        cycles: Option<u64>,
        #[arg(long)]
        deviation_ratio: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-verify every entry and the hash chain of a ledger file.
    VerifyLedger {
        ledger: PathBuf,
        /// A finals file to check against the ledger's commitments.
        #[arg(long)]
        finals: Option<PathBuf>,
    },
    /// Plaintext reference billing, in the finals file layout.
    Oracle {
        /// Prices, and the profile source when --profiles is absent.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        profiles: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Config(anyhow::Error),
    Verify(anyhow::Error),
    Other(anyhow::Error),
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        if e.is_config() {
            Failure::Config(e.into())
        } else {
            Failure::Other(e.into())
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Other(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let (code, err) = match failure {
                Failure::Config(e) => (EXIT_CONFIG, e),
                Failure::Verify(e) => (EXIT_VERIFY, e),
                Failure::Other(e) => (1, e),
            };
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<SimConfig, Failure> {
    let mut config = SimConfig::load(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(path) => fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(Failure::Other),
        None => Ok(io::stdout().write_all(text.as_bytes())?),
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Simulate {
            config,
            out,
            seed,
            audit,
        } => {
            let scenario = sim::prepare(load_config(&config, seed)?)?;
            let report = sim::run_scenario(&scenario, RunOptions { audit })?;
            report.write(&out)?;
            if let Some(rows) = &report.audit {
                let mut text = String::from("cycle,role,ordinal,statement\n");
                for (cycle, row) in report.cycles.iter().zip(rows) {
                    for (user, v) in row {
                        text.push_str(&format!("{},{},{},{v}\n", cycle.cycle, user.role.as_str(), user.ordinal));
                    }
                }
                fs::write(out.join("audit.txt"), text)?;
            }
            println!(
                "{} cycles, {} disputes, residual {}, ledger {}",
                report.cycles.len(),
                report.verdicts.len(),
                report.residual(),
                out.join("ledger.txt").display()
            );
            Ok(())
        }
        Command::Synth {
            config,
            consumers,
            prosumers,
            cycles,
            deviation_ratio,
            seed,
            out,
        } => {
            let base = config.as_deref().map(|p| load_config(p, None)).transpose()?;
            let pick = |flag: Option<u32>, field: fn(&SimConfig) -> Option<u32>, name: &str| {
                flag.or_else(|| base.as_ref().and_then(field))
                    .ok_or_else(|| Failure::Config(anyhow::anyhow!("--{name} is required")))
            };
            let params = SynthParams {
                consumers: pick(consumers, |c| c.consumers, "consumers")?,
                prosumers: pick(prosumers, |c| c.prosumers, "prosumers")?,
                cycles: cycles
                    .or_else(|| base.as_ref().and_then(|c| c.cycles))
                    .unwrap_or(sim::DEFAULT_CYCLES),
                seed: seed.or_else(|| base.as_ref().map(|c| c.seed)).unwrap_or(0),
                deviation_ratio: deviation_ratio
                    .or_else(|| base.as_ref().map(|c| c.deviation_ratio))
                    .unwrap_or(0.1),
            };
            let inputs = market::synthesize_profiles(params).map_err(|e| Failure::Config(e.into()))?;
            let mut buf = Vec::new();
            market::write_profiles(&inputs, &mut buf).map_err(|e| Failure::Other(e.into()))?;
            emit(out.as_deref(), &String::from_utf8_lossy(&buf))
        }
        Command::VerifyLedger { ledger, finals } => {
            let bytes = fs::read(&ledger)
                .with_context(|| format!("reading {}", ledger.display()))
                .map_err(Failure::Config)?;
            let parsed = Ledger::from_file_bytes(&bytes).map_err(|e| Failure::Verify(e.into()))?;
            println!("ledger ok: {} entries, chain {}", parsed.len(), hex::encode(parsed.chain_digest()));
            if let Some(path) = finals {
                let text = fs::read_to_string(&path)
                    .with_context(|| format!("reading {}", path.display()))
                    .map_err(Failure::Config)?;
                let checked = settlement::verify_finals(&parsed, &text)
                    .map_err(|e| Failure::Verify(anyhow::anyhow!("{}: {e}", path.display())))?;
                println!("finals ok: {checked} lines match ledger commitments");
            }
            Ok(())
        }
        Command::Oracle {
            config,
            profiles,
            seed,
            out,
        } => {
            let mut config = load_config(&config, seed)?;
            if profiles.is_some() {
                config.profile_path = profiles;
                config.consumers = None;
                config.prosumers = None;
                config.cycles = None;
            }
            let scenario = sim::prepare(config)?;
            let run = oracle::bill(&scenario.inputs, &scenario.config.prices);
            emit(out.as_deref(), &run.render())
        }
    }
}
