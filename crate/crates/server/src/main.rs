use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;
use vista_server::{app_state, open_store, router, Config};

#[derive(Parser)]
#[command(name = "vista", version, about = "Multi-turn reasoning workbench service")]
struct Cli {
    /// Config file; overrides VISTA_CONFIG.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve,
    /// Copy the whole store to or from a snapshot directory.
    Snapshot {
        #[command(subcommand)]
        action: SnapshotAction,
    },
}

#[derive(Subcommand)]
enum SnapshotAction {
    Export { dir: PathBuf },
    Import {
        dir: PathBuf,
        /// Replace a non-empty store.
        #[arg(long)]
        force: bool,
    },
}

fn load_config(path: Option<PathBuf>) -> anyhow::Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::from_file(&p)?,
        None => return Ok(Config::load()?),
    };
    cfg.apply_env(|k| std::env::var(k).ok())?;
    Ok(cfg)
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let cfg = load_config(cli.config)?;

    match cli.command {
        Command::Serve => serve(cfg),
        Command::Snapshot { action } => {
            let store = open_store(&cfg.storage).context("opening store")?;
            match action {
                SnapshotAction::Export { dir } => {
                    let n = vista_core::store::export_snapshot(store.as_ref(), &dir)?;
                    println!("exported {n} records to {}", dir.display());
                }
                SnapshotAction::Import { dir, force } => {
                    let n = vista_core::store::import_snapshot(store.as_ref(), &dir, force)?;
                    println!("imported {n} records from {}", dir.display());
                }
            }
            Ok(())
        }
    }
}

fn serve(cfg: Config) -> anyhow::Result<()> {
    let state = app_state(&cfg).context("opening store")?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(cfg.listen)
            .await
            .with_context(|| format!("binding {}", cfg.listen))?;
        let addr = listener.local_addr()?;
        if !addr.ip().is_loopback() {
            tracing::warn!(%addr, "listening on a non-loopback address without authentication");
        }
        println!("listening on {addr}");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
