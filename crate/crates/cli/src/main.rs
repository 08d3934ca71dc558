//! `fedsilo`: server, administration, experiments and agents from one
//! binary. Every command except `serve` and `data` is a plain REST client.
//!
//! Exit codes: 0 success, 1 server-reported error, 2 local validation
//! error, 3 local IO error.

mod commands;
mod error;
mod profile;
mod template;

use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "fedsilo", version, about = "Self-hosted cross-silo federated learning")]
pub struct Cli {
    /// Server URL; defaults to the profile's, then http://127.0.0.1:8080.
    #[arg(long, global = true, env = "FEDSILO_SERVER")]
    pub server: Option<String>,
    /// Profile file holding the login token.
    #[arg(long, global = true, env = "FEDSILO_PROFILE")]
    pub profile: Option<PathBuf>,
    /// Machine-readable JSON output.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the orchestrator.
    Serve(ServeArgs),
    /// Create an account.
    Account {
        #[command(subcommand)]
        command: AccountCommand,
    },
    /// Log in and store the token in the profile.
    Login {
        #[arg(long)]
        email: String,
        /// Read from FEDSILO_PASSWORD or stdin when omitted.
        #[arg(long, env = "FEDSILO_PASSWORD", hide_env_values = true)]
        password: Option<String>,
    },
    /// Revoke the stored token.
    Logout,
    /// Show the logged-in account, federations and invitations.
    Whoami,
    /// Federations and membership.
    Fed {
        #[command(subcommand)]
        command: FedCommand,
    },
    /// Experiments.
    Exp {
        #[command(subcommand)]
        command: ExpCommand,
    },
    /// Registered endpoints.
    Endpoints {
        #[command(subcommand)]
        command: EndpointsCommand,
    },
    /// The client agent.
    Agent {
        #[command(subcommand)]
        command: AgentCommand,
    },
    /// Local dataset utilities.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TlsMode {
    /// Plain HTTP; only allowed on loopback addresses.
    None,
    /// Plain HTTP behind a TLS-terminating reverse proxy.
    Proxy,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "FEDSILO_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, env = "FEDSILO_BIND", default_value = "127.0.0.1")]
    pub bind: std::net::IpAddr,
    #[arg(long, env = "FEDSILO_DATA_DIR", default_value = "fedsilo-data")]
    pub data_dir: PathBuf,
    /// Dashboard bundle served at /.
    #[arg(long, env = "FEDSILO_STATIC_DIR")]
    pub static_dir: Option<PathBuf>,
    #[arg(long, env = "FEDSILO_TLS_MODE", value_enum, default_value_t = TlsMode::None)]
    pub tls_mode: TlsMode,
    /// Seconds between agent heartbeats; three missed beats mean offline.
    #[arg(long, default_value_t = 5.0)]
    pub heartbeat_interval: f64,
    #[arg(long, default_value_t = 24)]
    pub token_ttl_hours: i64,
}

impl ServeArgs {
    pub fn addr(&self) -> SocketAddr {
        SocketAddr::new(self.bind, self.port)
    }
}

#[derive(Debug, Subcommand)]
pub enum AccountCommand {
    Create {
        #[arg(long)]
        email: String,
        #[arg(long)]
        name: String,
        #[arg(long, env = "FEDSILO_PASSWORD", hide_env_values = true)]
        password: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum FedCommand {
    /// Create a federation (you become its admin) and make it the default.
    Create { name: String },
    /// Federations you are an active member of.
    List,
    /// Make a federation the profile default.
    Use { federation_id: String },
    /// Invite an account by email.
    Invite {
        email: String,
        #[arg(long)]
        fed: Option<String>,
    },
    /// Accept an invitation.
    Accept { federation_id: String },
    /// Members and their roles.
    Members {
        #[arg(long)]
        fed: Option<String>,
    },
    /// Remove a member; their agents lose access.
    Remove {
        account_id: String,
        #[arg(long)]
        fed: Option<String>,
    },
    /// Label histograms of the given endpoints' local data.
    DataDistribution {
        #[arg(long, value_delimiter = ',', required = true)]
        roster: Vec<String>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        fed: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ExpCommand {
    /// Launch from a config file.
    Launch {
        #[arg(short = 'f', long = "file", required_unless_present = "print_template")]
        file: Option<PathBuf>,
        /// Print a commented config for the MNIST use case and exit.
        #[arg(long)]
        print_template: bool,
        /// Endpoint ids for the printed template.
        #[arg(long, value_delimiter = ',')]
        roster: Vec<String>,
    },
    /// Experiments of a federation.
    List {
        #[arg(long)]
        fed: Option<String>,
    },
    /// Status and per-round results.
    Status { experiment_id: String },
    /// Log lines; --follow streams until the experiment ends.
    Logs {
        experiment_id: String,
        #[arg(long)]
        follow: bool,
        #[arg(long, default_value_t = 0)]
        from: u64,
    },
    /// Per-round report.
    Report {
        experiment_id: String,
        #[arg(long)]
        csv: bool,
        #[arg(short = 'o', long)]
        output: Option<PathBuf>,
    },
    /// Aligned accuracy series of several experiments.
    Compare {
        #[arg(required = true, num_args = 1..)]
        experiment_ids: Vec<String>,
        /// Writes PREFIX.json and PREFIX.csv.
        #[arg(short = 'o', long)]
        output: Option<PathBuf>,
    },
    /// Cancel a running experiment.
    Cancel { experiment_id: String },
}

#[derive(Debug, Subcommand)]
pub enum EndpointsCommand {
    /// Endpoints with status and resources.
    List {
        #[arg(long)]
        fed: Option<String>,
    },
    /// Refresh the list periodically.
    Watch {
        #[arg(long)]
        fed: Option<String>,
        #[arg(long, default_value_t = 5.0)]
        interval: f64,
        /// Stop after this many refreshes.
        #[arg(long)]
        count: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Device {
    Cpu,
    Gpu,
}

#[derive(Debug, Subcommand)]
pub enum AgentCommand {
    /// Register this site and write the agent config.
    Register {
        #[arg(long)]
        name: String,
        #[arg(long, value_enum, default_value_t = Device::Cpu)]
        device: Device,
        #[arg(long)]
        fed: Option<String>,
        /// Agent config to create or update.
        #[arg(long, default_value = "agent.json")]
        config: PathBuf,
        /// Data loader spec (JSON) to embed in the agent config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the agent until interrupted.
    Run {
        #[arg(long, default_value = "agent.json")]
        config: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum DataCommand {
    /// Write a deterministic 10-class synthetic digit set as IDX files.
    Synth {
        #[arg(long, default_value_t = 10_000)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also split into this many equal shards.
        #[arg(long)]
        shards: Option<usize>,
    },
    /// Split an IDX image/label pair into equal contiguous shards.
    Partition {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        shards: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("FEDSILO_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let json = cli.json;
    if let Err(e) = commands::run(cli) {
        report_error(&e, json);
        std::process::exit(e.exit_code());
    }
}

fn report_error(e: &CliError, json: bool) {
    if json {
        let body = serde_json::json!({
            "error": match e {
                CliError::Server(c) => c.code().unwrap_or("ServerUnavailable").to_string(),
                CliError::Validation(_) => "ValidationError".into(),
                CliError::Io(_) => "IoError".into(),
            },
            "message": e.to_string(),
            "fields": e.details(),
        });
        eprintln!("{body}");
    } else {
        eprintln!("error: {e}");
        for d in e.details() {
            eprintln!("  {d}");
        }
    }
}
