use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use pfsim_core::ids::IdsEngine;
use pfsim_core::mac::MicMode;
use pfsim_core::nodes::server::RoutePolicy;
use pfsim_core::sim::canned;
use pfsim_core::sim::live::LiveServer;
use pfsim_core::sim::scenario::Overrides;
use pfsim_core::sim::{build_server, emit_metrics, load_scenario, run, Scenario};

#[derive(Parser)]
#[command(name = "pfsim", version, about = "LoRaWAN gateway impersonation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write metrics.json, trace.jsonl, alerts.jsonl and summary.csv.
    Run {
        /// Scenario file, or the name of a canned scenario.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        horizon_ms: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// v1_0 or v1_1
        #[arg(long)]
        mic_mode: Option<MicMode>,
        /// last_pull_wins, sticky_first or most_frequent
        #[arg(long)]
        route_policy: Option<RoutePolicy>,
        /// Serve the scenario's network server on this UDP address for
        /// horizon-ms of wall-clock time instead of simulating.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Print the canned scenario names.
    ListScenarios,
    /// Write the public gateway registry of a scenario as JSON.
    ExportGatewayData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "baseline")]
        scenario: String,
    },
}

fn resolve(scenario: &str) -> Result<Scenario> {
    let path = Path::new(scenario);
    let text = if path.is_file() {
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?
    } else if canned::canned(scenario).is_some() {
        format!(r#"{{"canned": "{scenario}"}}"#)
    } else {
        bail!("{scenario:?} is neither a readable file nor a canned scenario (see list-scenarios)");
    };
    load_scenario(&text).with_context(|| format!("loading scenario {scenario}"))
}

fn run_command(scenario: &str, overrides: Overrides, out: &Path, listen: Option<&str>) -> Result<()> {
    let mut sc = resolve(scenario)?;
    overrides.apply(&mut sc);
    sc.validate().context("scenario after overrides")?;

    if let Some(addr) = listen {
        return serve(&sc, addr, out);
    }

    let output = run(&sc);
    emit_metrics(&output, out).with_context(|| format!("writing results to {}", out.display()))?;
    for p in &output.points {
        let r = &p.report;
        let sent: u64 = r.devices.iter().map(|d| d.uplinks_sent).sum();
        let genuine: u64 = r.devices.iter().map(|d| d.acked_genuine).sum();
        println!(
            "{} seed={} uplinks={sent} acked_genuine={genuine} acked_spoofed={} alerts={}",
            p.label,
            r.seed,
            r.acked_spoofed(),
            r.ids.total
        );
    }
    println!("results in {}", out.display());
    Ok(())
}

fn serve(sc: &Scenario, addr: &str, out: &Path) -> Result<()> {
    let (mut live, local) = LiveServer::bind(addr, build_server(sc), IdsEngine::new(sc.ids.clone()), sc.seed)
        .with_context(|| format!("binding {addr}"))?;
    println!("serving {} on udp {local} for {} ms", sc.name, sc.horizon_ms);
    let summary = live.run_for(Duration::from_millis(sc.horizon_ms))?;
    fs::create_dir_all(out)?;
    let mut alerts = String::new();
    for a in &summary.alerts {
        alerts.push_str(&serde_json::to_string(a)?);
        alerts.push('\n');
    }
    fs::write(out.join("alerts.jsonl"), alerts)?;
    println!(
        "received={} replies={} downlinks={} alerts={}",
        summary.received,
        summary.replies,
        summary.downlinks,
        summary.alerts.len()
    );
    Ok(())
}

fn export(scenario: &str, out: &Path) -> Result<()> {
    let sc = resolve(scenario)?;
    if !sc.registry_public {
        bail!("scenario {} keeps its gateway registry private", sc.name);
    }
    let server = build_server(&sc);
    fs::write(out, server.registry.export_json() + "\n").with_context(|| format!("writing {}", out.display()))?;
    println!("{} gateways written to {}", server.registry.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            scenario,
            seed,
            horizon_ms,
            out,
            mic_mode,
            route_policy,
            listen,
        } => run_command(
            &scenario,
            Overrides {
                seed,
                horizon_ms,
                mic_mode,
                route_policy,
            },
            &out,
            listen.as_deref(),
        ),
        Command::ListScenarios => {
            for name in canned::NAMES {
                println!("{name}\t{}", canned::describe(name).unwrap_or_default());
            }
            Ok(())
        }
        Command::ExportGatewayData { out, scenario } => export(&scenario, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
