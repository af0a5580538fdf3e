use std::path::PathBuf;

use clap::Parser;
use dictation_core::asr::{RemoteBackendConfig, SimBackendConfig};
use dictation_server::{BackendConfig, ServerConfig, ServerMode};
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(version, about = "Multi-user streaming dictation server")]
struct Args {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `listen_address`.
    #[arg(long)]
    listen: Option<String>,
    /// multiplexed | sequential
    #[arg(long)]
    mode: Option<ServerMode>,
    /// sim | remote; keeps the configured backend settings when the kind matches.
    #[arg(long)]
    backend: Option<String>,
}

fn apply(args: &Args, mut cfg: ServerConfig) -> anyhow::Result<ServerConfig> {
    if let Some(listen) = &args.listen {
        cfg.listen_address = listen.clone();
    }
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    match (args.backend.as_deref(), &cfg.backend) {
        (None, _) | (Some("sim"), BackendConfig::Sim(_)) | (Some("remote"), BackendConfig::Remote(_)) => {}
        (Some("sim"), _) => cfg.backend = BackendConfig::Sim(SimBackendConfig::default()),
        (Some("remote"), _) => cfg.backend = BackendConfig::Remote(RemoteBackendConfig::default()),
        (Some(other), _) => anyhow::bail!("unknown backend {other:?} (expected sim|remote)"),
    }
    cfg.validate()?;
    Ok(cfg)
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let args = Args::parse();
    let base = match &args.config {
        Some(path) => ServerConfig::load(path)?,
        None => ServerConfig::default(),
    };
    let cfg = apply(&args, base)?;
    let server = dictation_server::start(cfg).await?;
    tracing::info!(addr = %server.addr, mode = ?server.state.cfg.mode, "listening");
    tokio::signal::ctrl_c().await?;
    tracing::info!("shutting down");
    server.shutdown().await;
    Ok(())
}
