//! Run report and its on-disk forms.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use crate::attacks::{AttackMode, EuiSource, SpoofPhase};
use crate::codec::GatewayEui;
use crate::ids::{Alert, DetectorKind};
use crate::mac::{AckVerdict, DevAddr, MicMode};
use crate::nodes::device::{UplinkRecord, VerdictCounts};
use crate::nodes::gateway::GatewayCounters;
use crate::nodes::server::{RouteEntry, RoutePolicy, ServerCounters};
use crate::nodes::Addr;
use crate::radio::{NodeId, TimeMs};

pub const METRICS_SCHEMA: &str = "pfsim.metrics/1";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceReport {
    pub id: NodeId,
    pub dev_addr: DevAddr,
    pub uplinks_sent: u64,
    pub transmissions: u64,
    /// Distinct uplinks the server accepted.
    pub delivered: u64,
    /// ACKs the server generated for the uplink they closed.
    pub acked_genuine: u64,
    /// ACKs accepted for an uplink the server never acknowledged.
    pub acked_spoofed: u64,
    pub presumed_lost: u64,
    /// The device believes a lost uplink arrived and an arrived one was lost.
    pub inversion: bool,
    pub skipped_slots: u64,
    pub verdicts: VerdictCounts,
    pub log: Vec<UplinkRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GatewayReport {
    pub id: NodeId,
    pub eui: GatewayEui,
    pub address: Addr,
    pub alive: bool,
    pub counters: GatewayCounters,
    /// Corrupt share of radio receptions at this gateway.
    pub corrupt_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServerReport {
    pub counters: ServerCounters,
    pub corrupt_fraction: f64,
    pub routes: BTreeMap<GatewayEui, RouteEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RadioStats {
    pub uplink_frames: u64,
    pub downlink_frames: u64,
    pub receptions: u64,
    pub collided: u64,
    pub jammed: u64,
    pub lost: u64,
    pub jam_bursts: u64,
    pub recordings: u64,
    pub recordings_failed: u64,
}

/// Server-observed packets for the victim EUI once the attack has begun.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct WindowStats {
    pub from: TimeMs,
    pub packets: u64,
    pub corrupt: u64,
    pub fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RouteShare {
    pub from: TimeMs,
    pub downlinks: u64,
    pub to_attacker: u64,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub mode: AttackMode,
    pub stolen_eui: Option<GatewayEui>,
    pub eui_source: Option<EuiSource>,
    /// Per attempted step, `"ok"` or the error text.
    pub steps: BTreeMap<String, String>,
    pub impostor_started_at: Option<TimeMs>,
    pub impostor_pull_interval: Option<TimeMs>,
    pub rejected_steps: u64,
    pub jammer_active: bool,
    pub spoof_phase: SpoofPhase,
    pub spoof_outcome: Option<AckVerdict>,
    pub dropped_acks: u64,
    pub window: Option<WindowStats>,
    pub route_share: Option<RouteShare>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IdsReport {
    pub total: u64,
    pub by_kind: BTreeMap<DetectorKind, u64>,
    pub correlated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DownlinkLogEntry {
    pub time: TimeMs,
    pub dev: DevAddr,
    pub down_fcnt: u16,
    pub acked_fcnt: u16,
    pub eui: GatewayEui,
    pub address: Addr,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub seed: u64,
    pub horizon_ms: TimeMs,
    pub mic_mode: MicMode,
    pub route_policy: RoutePolicy,
    pub devices: Vec<DeviceReport>,
    pub gateways: Vec<GatewayReport>,
    pub server: ServerReport,
    pub radio: RadioStats,
    pub attack: Option<AttackReport>,
    pub ids: IdsReport,
    pub downlinks: Vec<DownlinkLogEntry>,
    pub event_counts: BTreeMap<String, u64>,
}

impl MetricsReport {
    pub fn device(&self, id: &str) -> Option<&DeviceReport> {
        self.devices.iter().find(|d| d.id == id)
    }

    pub fn gateway(&self, id: &str) -> Option<&GatewayReport> {
        self.gateways.iter().find(|g| g.id == id)
    }

    pub fn alerts_of(&self, kind: DetectorKind) -> u64 {
        self.ids.by_kind.get(&kind).copied().unwrap_or(0)
    }

    pub fn acked_spoofed(&self) -> u64 {
        self.devices.iter().map(|d| d.acked_spoofed).sum()
    }
}

#[derive(Debug, Clone)]
pub struct PointOutput {
    pub label: String,
    pub params: BTreeMap<String, Value>,
    pub report: MetricsReport,
    pub alerts: Vec<Alert>,
    pub trace: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub scenario: String,
    pub seed: u64,
    pub points: Vec<PointOutput>,
}

impl RunOutput {
    /// The report of a single-point run.
    pub fn report(&self) -> &MetricsReport {
        &self.points[0].report
    }

    pub fn metrics_json(&self) -> String {
        let points: Vec<Value> = self
            .points
            .iter()
            .map(|p| json!({"label": p.label, "params": p.params, "report": p.report}))
            .collect();
        let doc = json!({
            "schema": METRICS_SCHEMA,
            "scenario": self.scenario,
            "seed": self.seed,
            "points": points,
        });
        serde_json::to_string_pretty(&doc).expect("report is plain data")
    }

    pub fn trace_jsonl(&self) -> String {
        join_lines(self.points.iter().flat_map(|p| p.trace.iter().cloned()))
    }

    pub fn alerts_jsonl(&self) -> String {
        let multi = self.points.len() > 1;
        join_lines(self.points.iter().flat_map(|p| {
            p.alerts.iter().map(move |a| {
                let mut v = serde_json::to_value(a).expect("alert is plain data");
                if multi {
                    v["point"] = Value::from(p.label.clone());
                }
                v.to_string()
            })
        }))
    }

    pub fn summary_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "point",
            "uplinks_sent",
            "delivered",
            "acked_genuine",
            "acked_spoofed",
            "presumed_lost",
            "gateway_receptions",
            "gateway_corrupt_fraction",
            "server_packets",
            "server_corrupt_fraction",
            "window_corrupt_fraction",
            "route_share",
            "alerts",
        ])?;
        for p in &self.points {
            let r = &p.report;
            let sum = |f: fn(&DeviceReport) -> u64| r.devices.iter().map(f).sum::<u64>().to_string();
            let victim = r.gateways.first();
            let attack = r.attack.as_ref();
            w.write_record([
                p.label.clone(),
                sum(|d| d.uplinks_sent),
                sum(|d| d.delivered),
                sum(|d| d.acked_genuine),
                sum(|d| d.acked_spoofed),
                sum(|d| d.presumed_lost),
                victim.map_or(0, |g| g.counters.receptions).to_string(),
                fmt_f(victim.map(|g| g.corrupt_fraction)),
                r.server.counters.packets.to_string(),
                fmt_f(Some(r.server.corrupt_fraction)),
                fmt_f(attack.and_then(|a| a.window.as_ref()).map(|w| w.fraction)),
                fmt_f(attack.and_then(|a| a.route_share.as_ref()).map(|s| s.share)),
                r.ids.total.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
    }
}

fn fmt_f(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

fn join_lines(lines: impl Iterator<Item = String>) -> String {
    let mut out = String::new();
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    out
}

/// Writes metrics.json, trace.jsonl, alerts.jsonl and summary.csv into `dir`.
pub fn emit_metrics(run: &RunOutput, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.json"), run.metrics_json())?;
    fs::write(dir.join("trace.jsonl"), run.trace_jsonl())?;
    fs::write(dir.join("alerts.jsonl"), run.alerts_jsonl())?;
    let csv = run.summary_csv().map_err(io::Error::other)?;
    fs::write(dir.join("summary.csv"), csv)?;
    Ok(())
}
