use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use advocate_core::gateway::{Gateway, ProviderKind};
use advocate_core::harness::{self, MediationOverrides, ReplayOptions, ReportView, RunReport, Script};
use advocate_core::model::{ParticipantId, RoomId};
use advocate_core::template::TemplateSet;
use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "advocate", version, about = "Discussion rooms with a devil's advocate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderArg {
    Mock,
    Http,
}

#[derive(Subcommand)]
enum Command {
    /// Run the chat server.
    Serve {
        #[arg(long)]
        listen: Option<String>,
        /// Also accept WebSocket clients on this address.
        #[arg(long)]
        ws_listen: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Append-only event log; replayed on startup if it exists.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Replay a script and write its event log.
    Replay {
        #[arg(long)]
        script: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        turns_per_intervention: Option<u32>,
        #[arg(long)]
        similarity_threshold: Option<f64>,
        #[arg(long)]
        max_regen: Option<u32>,
        #[arg(long)]
        summary_window: Option<usize>,
        #[arg(long, value_enum)]
        provider: Option<ProviderArg>,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Compare two reports. Exits 0 when equal, 1 when they differ.
    Diff {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Compare only what this participant could see.
        #[arg(long)]
        visible_to: Option<String>,
    },
    /// Rebuild a replay script from one room of a server event log.
    ExtractScript {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        room: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Serve { listen, ws_listen, config, log, templates } => {
            let mut config = advocate_server::load_config(config.as_deref())?;
            if let Some(l) = listen {
                config.server.listen = l;
            }
            if ws_listen.is_some() {
                config.server.ws_listen = ws_listen;
            }
            if log.is_some() {
                config.server.event_log = log;
            }
            if templates.is_some() {
                config.server.templates_dir = templates;
            }
            let hub = advocate_server::build_hub(&config)?;
            let ping = Duration::from_secs(config.server.ping_interval_secs.max(1));
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async {
                let listener = tokio::net::TcpListener::bind(&config.server.listen)
                    .await
                    .with_context(|| format!("binding {}", config.server.listen))?;
                tracing::info!(addr = %listener.local_addr()?, "listening");
                let Some(ws_addr) = &config.server.ws_listen else {
                    advocate_server::serve(listener, hub, ping).await?;
                    return anyhow::Ok(());
                };
                let ws = tokio::net::TcpListener::bind(ws_addr).await.with_context(|| format!("binding {ws_addr}"))?;
                tracing::info!(addr = %ws.local_addr()?, "websocket listening");
                tokio::try_join!(
                    advocate_server::serve(listener, hub.clone(), ping),
                    advocate_server::serve_websocket(ws, hub, ping),
                )?;
                anyhow::Ok(())
            })?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Replay {
            script,
            out,
            config,
            turns_per_intervention,
            similarity_threshold,
            max_regen,
            summary_window,
            provider,
            endpoint,
            templates,
        } => {
            let file = advocate_server::load_config(config.as_deref())?;
            let mut provider_config = file.provider.clone();
            match provider {
                Some(ProviderArg::Mock) => provider_config.kind = ProviderKind::Mock,
                Some(ProviderArg::Http) => provider_config.kind = ProviderKind::RemoteHttp,
                None => {}
            }
            if endpoint.is_some() {
                provider_config.endpoint = endpoint;
            }
            let templates = match templates.or(file.server.templates_dir.clone()) {
                Some(dir) => TemplateSet::from_dir(&dir)?,
                None => TemplateSet::builtin(),
            };
            let gateway = Gateway::from_config(&provider_config, templates)?;
            // File settings sit between the script header and the flags; fold
            // them into the header so the flags still win.
            let parsed = Script::parse(&read(&script)?)?.map(|mut s| {
                if config.is_some() {
                    s.overrides = s.overrides.or(MediationOverrides::from_config(&file.mediation));
                }
                s
            });
            let options = ReplayOptions {
                overrides: MediationOverrides {
                    turns_per_intervention,
                    similarity_threshold,
                    max_regeneration_attempts: max_regen,
                    summary_window,
                },
                gateway: Arc::new(gateway),
            };
            let report = harness::replay(parsed.as_ref(), &options)?;
            emit(out.as_deref(), &report.to_jsonl())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Diff { a, b, visible_to } => {
            let a = RunReport::parse(&read(&a)?)?;
            let b = RunReport::parse(&read(&b)?)?;
            let view = match visible_to {
                Some(p) => ReportView::VisibleTo(ParticipantId::new(&p)?),
                None => ReportView::Full,
            };
            let diffs = harness::diff_reports(&a, &b, &view);
            for d in &diffs {
                println!("{}", serde_json::to_string(d)?);
            }
            Ok(if diffs.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::ExtractScript { log, room, out } => {
            let room = RoomId::new(&room)?;
            let records = RunReport::parse(&read(&log)?)?.records;
            let Some(script) = Script::from_event_log(&records, &room) else {
                bail!("room {room} does not appear in {}", log.display());
            };
            emit(out.as_deref(), &script.to_jsonl())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.command, Command::Serve { .. }) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("ADVOCATE_LOG").unwrap_or_else(|_| EnvFilter::new(default_level)))
        .with_writer(std::io::stderr)
        .init();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("advocate: {e:#}");
            ExitCode::from(2)
        }
    }
}
