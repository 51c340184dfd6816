//! Server-side impersonation detection.
//!
//! Four detectors run over the stream of datagrams as the server sees them
//! (EUI, source address, kind, CRC status). A correlator escalates two or
//! more distinct findings for one EUI into a single critical verdict.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CrcStatus, DatagramKind, GatewayEui};
use crate::nodes::Addr;
use crate::radio::TimeMs;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdsError {
    #[error("observation at {got} ms precedes previous one at {last} ms")]
    OutOfOrder { last: TimeMs, got: TimeMs },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Observation {
    pub time: TimeMs,
    pub eui: GatewayEui,
    pub source: Addr,
    pub kind: DatagramKind,
    /// Present only for packets carried by PUSH_DATA.
    pub stat: Option<CrcStatus>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    AddressChange,
    MixedOrigin,
    PullRate,
    CrcRate,
    CorrelatedImpersonation,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 5] = [
        DetectorKind::AddressChange,
        DetectorKind::MixedOrigin,
        DetectorKind::PullRate,
        DetectorKind::CrcRate,
        DetectorKind::CorrelatedImpersonation,
    ];

    pub fn severity(self) -> Severity {
        match self {
            DetectorKind::AddressChange => Severity::Hint,
            DetectorKind::PullRate | DetectorKind::CrcRate => Severity::Warning,
            DetectorKind::MixedOrigin | DetectorKind::CorrelatedImpersonation => Severity::Critical,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::AddressChange => "address_change",
            DetectorKind::MixedOrigin => "mixed_origin",
            DetectorKind::PullRate => "pull_rate",
            DetectorKind::CrcRate => "crc_rate",
            DetectorKind::CorrelatedImpersonation => "correlated_impersonation",
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Hint,
    Warning,
    Critical,
}

/// One line of alerts.jsonl.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Alert {
    pub time: TimeMs,
    pub detector: DetectorKind,
    pub eui: GatewayEui,
    pub severity: Severity,
    pub evidence: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdsConfig {
    pub window_ms: TimeMs,
    pub min_samples: usize,
    /// Share of one CRC class an address needs for mixed_origin.
    pub concentration: f64,
    pub pull_threshold: f64,
    pub pull_warmup_ms: TimeMs,
    pub crc_window: usize,
    pub crc_baseline_packets: usize,
    pub crc_baseline_max: f64,
    pub crc_fire: f64,
    pub correlation_window_ms: TimeMs,
}

impl Default for IdsConfig {
    fn default() -> Self {
        IdsConfig {
            window_ms: 60_000,
            min_samples: 5,
            concentration: 0.8,
            pull_threshold: 1.5,
            pull_warmup_ms: 120_000,
            crc_window: 40,
            crc_baseline_packets: 20,
            crc_baseline_max: 0.05,
            crc_fire: 0.35,
            correlation_window_ms: 300_000,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct EuiState {
    last_source: Option<Addr>,
    transitions: BTreeMap<(Addr, Addr), TimeMs>,

    packets: VecDeque<(TimeMs, Addr, bool)>,
    mixed_latched: bool,

    first_pull: Option<TimeMs>,
    warmup_pulls: u64,
    pull_baseline: Option<f64>,
    pulls: VecDeque<TimeMs>,
    pull_latched: bool,

    crc_seen: usize,
    crc_baseline_corrupt: usize,
    crc_recent: VecDeque<bool>,
    crc_latched: bool,

    recent: VecDeque<(TimeMs, DetectorKind)>,
    in_episode: bool,
}

#[derive(Debug, Clone, Default)]
pub struct IdsEngine {
    config: IdsConfig,
    last_time: Option<TimeMs>,
    per_eui: BTreeMap<GatewayEui, EuiState>,
}

impl IdsEngine {
    pub fn new(config: IdsConfig) -> Self {
        IdsEngine {
            config,
            last_time: None,
            per_eui: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &IdsConfig {
        &self.config
    }

    /// Feeds one observation and returns the alerts it raised.
    pub fn observe(&mut self, obs: &Observation) -> Result<Vec<Alert>, IdsError> {
        if let Some(last) = self.last_time {
            if obs.time < last {
                return Err(IdsError::OutOfOrder { last, got: obs.time });
            }
        }
        self.last_time = Some(obs.time);
        let cfg = &self.config;
        let st = self.per_eui.entry(obs.eui).or_default();
        let mut raised = Vec::new();
        let alert = |kind: DetectorKind, evidence: String| Alert {
            time: obs.time,
            detector: kind,
            eui: obs.eui,
            severity: kind.severity(),
            evidence,
        };

        if let Some(e) = address_change(cfg, st, obs) {
            raised.push(alert(DetectorKind::AddressChange, e));
        }
        if obs.kind == DatagramKind::PushData {
            if let Some(stat) = obs.stat {
                let corrupt = stat == CrcStatus::Fail;
                if let Some(e) = mixed_origin(cfg, st, obs, corrupt) {
                    raised.push(alert(DetectorKind::MixedOrigin, e));
                }
                if let Some(e) = crc_rate(cfg, st, corrupt) {
                    raised.push(alert(DetectorKind::CrcRate, e));
                }
            }
        }
        if obs.kind == DatagramKind::PullData {
            if let Some(e) = pull_rate(cfg, st, obs.time) {
                raised.push(alert(DetectorKind::PullRate, e));
            }
        }
        if let Some(e) = correlate(cfg, st, obs.time, &raised) {
            raised.push(alert(DetectorKind::CorrelatedImpersonation, e));
        }
        Ok(raised)
    }

    /// Runs a whole stream; stops at the first ordering error.
    pub fn observe_all<'a>(
        &mut self,
        stream: impl IntoIterator<Item = &'a Observation>,
    ) -> Result<Vec<Alert>, IdsError> {
        let mut out = Vec::new();
        for o in stream {
            out.extend(self.observe(o)?);
        }
        Ok(out)
    }
}

fn address_change(cfg: &IdsConfig, st: &mut EuiState, obs: &Observation) -> Option<String> {
    let prev = st.last_source.replace(obs.source.clone())?;
    if prev == obs.source {
        return None;
    }
    // The same transition repeating inside one window is one finding.
    let key = (prev.clone(), obs.source.clone());
    if let Some(&at) = st.transitions.get(&key) {
        if obs.time < at + cfg.window_ms {
            return None;
        }
    }
    st.transitions.insert(key, obs.time);
    Some(format!("source changed from {prev} to {}", obs.source))
}

fn mixed_origin(cfg: &IdsConfig, st: &mut EuiState, obs: &Observation, corrupt: bool) -> Option<String> {
    st.packets.push_back((obs.time, obs.source.clone(), corrupt));
    while st
        .packets
        .front()
        .is_some_and(|(t, _, _)| t + cfg.window_ms <= obs.time)
    {
        st.packets.pop_front();
    }
    let mut per_addr: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (_, a, c) in &st.packets {
        let e = per_addr.entry(a.as_str()).or_default();
        if *c {
            e.1 += 1;
        } else {
            e.0 += 1;
        }
    }
    let concentrated = |n: usize, total: usize| n >= cfg.min_samples && n as f64 >= cfg.concentration * total as f64;
    let corrupt_side = per_addr.iter().find(|(_, &(ok, bad))| concentrated(bad, ok + bad));
    let clean_side = per_addr
        .iter()
        .find(|(a, &(ok, bad))| concentrated(ok, ok + bad) && corrupt_side.is_some_and(|(c, _)| c != *a));
    let holds = corrupt_side.is_some() && clean_side.is_some();
    let evidence = match (corrupt_side, clean_side) {
        (Some((ca, (_, bad))), Some((oa, (ok, _)))) => Some(format!(
            "{bad} corrupt packets from {ca} and {ok} intact from {oa} within {} s",
            cfg.window_ms / 1000
        )),
        _ => None,
    };
    latch(&mut st.mixed_latched, holds).then_some(evidence).flatten()
}

fn pull_rate(cfg: &IdsConfig, st: &mut EuiState, now: TimeMs) -> Option<String> {
    let first = *st.first_pull.get_or_insert(now);
    st.pulls.push_back(now);
    while st.pulls.front().is_some_and(|t| t + cfg.window_ms <= now) {
        st.pulls.pop_front();
    }
    if now < first + cfg.pull_warmup_ms {
        st.warmup_pulls += 1;
        return None;
    }
    let baseline = *st
        .pull_baseline
        .get_or_insert(st.warmup_pulls as f64 * cfg.window_ms as f64 / cfg.pull_warmup_ms as f64);
    let count = st.pulls.len();
    let holds = baseline > 0.0 && count as f64 > cfg.pull_threshold * baseline;
    latch(&mut st.pull_latched, holds).then(|| {
        format!(
            "{count} PULL_DATA in {} s against a baseline of {baseline:.1} ({:.1}x)",
            cfg.window_ms / 1000,
            count as f64 / baseline
        )
    })
}

fn crc_rate(cfg: &IdsConfig, st: &mut EuiState, corrupt: bool) -> Option<String> {
    st.crc_seen += 1;
    if st.crc_seen <= cfg.crc_baseline_packets && corrupt {
        st.crc_baseline_corrupt += 1;
    }
    st.crc_recent.push_back(corrupt);
    if st.crc_recent.len() > cfg.crc_window {
        st.crc_recent.pop_front();
    }
    if st.crc_seen < cfg.crc_baseline_packets || st.crc_recent.len() < cfg.crc_window {
        return None;
    }
    let baseline = st.crc_baseline_corrupt as f64 / cfg.crc_baseline_packets as f64;
    let bad = st.crc_recent.iter().filter(|c| **c).count();
    let fraction = bad as f64 / st.crc_recent.len() as f64;
    let holds = baseline <= cfg.crc_baseline_max && fraction >= cfg.crc_fire;
    latch(&mut st.crc_latched, holds).then(|| {
        format!(
            "corrupt share {fraction:.2} over last {} packets, baseline {baseline:.2}",
            st.crc_recent.len()
        )
    })
}

fn correlate(cfg: &IdsConfig, st: &mut EuiState, now: TimeMs, raised: &[Alert]) -> Option<String> {
    st.recent.extend(raised.iter().map(|a| (a.time, a.detector)));
    while st
        .recent
        .front()
        .is_some_and(|(t, _)| t + cfg.correlation_window_ms <= now)
    {
        st.recent.pop_front();
    }
    if st.recent.is_empty() {
        st.in_episode = false;
        return None;
    }
    let kinds: BTreeSet<DetectorKind> = st.recent.iter().map(|(_, k)| *k).collect();
    if st.in_episode || kinds.len() < 2 {
        return None;
    }
    st.in_episode = true;
    let names: Vec<&str> = kinds.iter().map(|k| k.name()).collect();
    Some(format!("co-occurring findings: {}", names.join(", ")))
}

/// Rising-edge detection: true exactly when `holds` becomes true.
fn latch(state: &mut bool, holds: bool) -> bool {
    let fire = holds && !*state;
    *state = holds;
    fire
}
