mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "trustplane", version, about = "Attested enrollment and enclave-terminated TLS for SDN switches")]
struct Cli {
    /// Scenario file of `key = value` lines. Flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream (also read from TRUSTPLANE_SEED).
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the extended CA until SIGINT or SIGTERM.
    ServeCa(ServeCaArgs),
    /// Run a simulated host and its local attestation agent.
    ServeAgent(ServeAgentArgs),
    /// Write a known-good configuration for the reference host.
    KnownGood(KnownGoodArgs),
    /// Enroll one switch compartment and report the outcome.
    Enroll(EnrollArgs),
    /// Run the latency, ECALL and enrollment benchmarks in process.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct ServeCaArgs {
    /// Enrollment endpoint.
    #[arg(long)]
    pub listen: Option<std::net::SocketAddr>,
    /// Controller certificate endpoint.
    #[arg(long)]
    pub admin: Option<std::net::SocketAddr>,
    #[arg(long)]
    pub known_good: Option<PathBuf>,
    /// 64 hex digits, or any phrase to hash.
    #[arg(long)]
    pub root_seed: Option<String>,
    /// Where to write the root certificate (PEM).
    #[arg(long)]
    pub root_cert_out: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    pub nonce_ttl_secs: u64,
}

#[derive(Debug, Args)]
pub struct ServeAgentArgs {
    /// `ip:port` on loopback or `unix:/path`.
    #[arg(long)]
    pub listen: Option<String>,
    /// Comma-separated PCR indices to quote.
    #[arg(long)]
    pub pcr_selection: Option<String>,
    /// Boot a host whose virtual switch binary was modified.
    #[arg(long)]
    pub tamper: Option<String>,
}

#[derive(Debug, Args)]
pub struct KnownGoodArgs {
    /// Extra attestation key to trust, 64 hex digits. Repeatable.
    #[arg(long = "attestation-key")]
    pub attestation_keys: Vec<String>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EnrollArgs {
    /// CA enrollment endpoint. Without it the CA and agent run in process.
    #[arg(long)]
    pub ca: Option<std::net::SocketAddr>,
    #[arg(long)]
    pub agent: Option<String>,
    /// Root certificate (PEM) written by `serve-ca`.
    #[arg(long)]
    pub ca_root: Option<PathBuf>,
    /// none, measurement, quote-sig, nonce-replay or csr.
    #[arg(long)]
    pub tamper: Option<String>,
    /// Shorthand for `--tamper nonce-replay`.
    #[arg(long)]
    pub replay_nonce: bool,
    #[arg(long, default_value = "ovs-vswitchd")]
    pub common_name: String,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Frame sizes as A:B:STEP.
    #[arg(long)]
    pub sizes: Option<String>,
    /// Packets per second per size; 0 sends back to back.
    #[arg(long)]
    pub rate: Option<u32>,
    /// Packets per size.
    #[arg(long)]
    pub count: Option<usize>,
    /// Samples above this round-trip time are excluded.
    #[arg(long)]
    pub cutoff_ms: Option<f64>,
    #[arg(long, overrides_with = "no_trace_ecalls")]
    pub trace_ecalls: bool,
    #[arg(long)]
    pub no_trace_ecalls: bool,
    #[arg(long)]
    pub keygen_iterations: Option<usize>,
    /// Directory for the report files.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Only permit ECDHE key exchange with AEAD ciphers.
    #[arg(long)]
    pub hardened: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();

    let mut scenario = match &cli.config {
        Some(p) => match config::ScenarioConfig::load(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(exit::CONFIG);
            }
        },
        None => config::ScenarioConfig::default(),
    };
    if cli.seed.is_some() {
        scenario.seed = cli.seed.clone();
    }
    let code = match &cli.command {
        Command::ServeCa(a) => commands::serve_ca(&scenario, a),
        Command::ServeAgent(a) => commands::serve_agent(&scenario, a),
        Command::KnownGood(a) => commands::known_good(&scenario, a),
        Command::Enroll(a) => commands::enroll(&scenario, a),
        Command::Bench(a) => commands::bench(&scenario, a),
    };
    ExitCode::from(code)
}
