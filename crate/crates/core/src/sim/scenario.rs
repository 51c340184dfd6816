//! Scenario documents: parsing, canned-name expansion and validation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::attacks::{AttackError, EuiSource, JammerConfig};
use crate::codec::GatewayEui;
use crate::ids::IdsConfig;
use crate::mac::{DevAddr, MicMode, NwkSKey};
use crate::nodes::device::RxWindows;
use crate::nodes::gateway::CrcForwardPolicy;
use crate::nodes::server::RoutePolicy;
use crate::nodes::Addr;
use crate::radio::{AirtimeModel, CrcPolicyOnJam, JamSuccess, NodeId, RadioError, SpreadingFactor, TimeMs};
use crate::sim::canned;

pub const SCHEMA: &str = "pfsim.scenario/1";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario does not parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported schema {0:?}, expected {SCHEMA:?}")]
    Schema(String),
    #[error("unknown canned scenario {0:?}")]
    UnknownCanned(String),
    #[error("node id {0:?} defined twice")]
    DuplicateId(String),
    #[error("{context} refers to unknown node {id:?}")]
    UnknownNode { context: String, id: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Radio(#[from] RadioError),
    #[error(transparent)]
    Attack(#[from] AttackError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    #[serde(default = "yes")]
    pub eavesdroppable: bool,
    #[serde(default)]
    pub authenticated: bool,
    #[serde(default = "default_latency")]
    pub latency_ms: TimeMs,
}

impl Default for LinkSpec {
    fn default() -> Self {
        LinkSpec {
            eavesdroppable: true,
            authenticated: false,
            latency_ms: default_latency(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub id: NodeId,
    pub dev_addr: DevAddr,
    /// 16-byte network session key, hex.
    pub key: String,
    pub sf: SpreadingFactor,
    #[serde(default = "default_freq")]
    pub freq: f64,
    pub interval_ms: TimeMs,
    #[serde(default = "default_jitter")]
    pub jitter_ms: TimeMs,
    /// Offset of the first uplink slot; drawn from `[0, interval/2)` if absent.
    #[serde(default)]
    pub phase_ms: Option<TimeMs>,
    #[serde(default = "yes")]
    pub confirmed: bool,
    #[serde(default = "default_payload_len")]
    pub payload_len: usize,
    #[serde(default = "default_retransmit_limit")]
    pub retransmit_limit: u32,
    /// Retransmission delay after the second window closes, `[min, max)`.
    #[serde(default = "default_backoff")]
    pub backoff_ms: (TimeMs, TimeMs),
    #[serde(default)]
    pub max_uplinks: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewaySpec {
    pub id: NodeId,
    pub eui: GatewayEui,
    pub address: Addr,
    #[serde(default = "default_pull_interval")]
    pub pull_interval_ms: TimeMs,
    /// Exponentially distributed keepalive gaps instead of a fixed period.
    #[serde(default)]
    pub pull_jitter: bool,
    #[serde(default)]
    pub crc_forward_policy: CrcForwardPolicy,
    #[serde(default)]
    pub location: String,
    #[serde(default = "yes")]
    pub registered: bool,
    #[serde(default)]
    pub physically_protected: bool,
    #[serde(default)]
    pub link: LinkSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisableMethod {
    Disconnect,
    Jam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisableSpec {
    pub method: DisableMethod,
    pub at_ms: TimeMs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JammerSpec {
    #[serde(flatten)]
    pub config: JammerConfig,
    #[serde(default)]
    pub active_from_ms: Option<TimeMs>,
    #[serde(default)]
    pub active_until_ms: Option<TimeMs>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackerGatewaySpec {
    pub id: NodeId,
    pub address: Addr,
    #[serde(default = "attacker_link")]
    pub link: LinkSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AckSpoofSpec {
    pub targets: Vec<DevAddr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackerSpec {
    pub gateway: AttackerGatewaySpec,
    pub victim: NodeId,
    #[serde(default = "default_eui_sources")]
    pub eui_sources: Vec<EuiSource>,
    /// When to try obtaining the victim EUI; never if absent.
    #[serde(default)]
    pub sniff_at_ms: Option<TimeMs>,
    #[serde(default)]
    pub disable: Option<DisableSpec>,
    #[serde(default)]
    pub impostor_at_ms: Option<TimeMs>,
    #[serde(default)]
    pub jammer: Option<JammerSpec>,
    #[serde(default = "one")]
    pub pull_flood_factor: f64,
    #[serde(default)]
    pub pull_jitter: bool,
    #[serde(default)]
    pub ack_spoof: Option<AckSpoofSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    #[serde(default)]
    pub jam_success: JamSuccess,
    #[serde(default)]
    pub crc_policy_on_jam: CrcPolicyOnJam,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        ChannelSpec {
            jam_success: JamSuccess::default(),
            crc_policy_on_jam: CrcPolicyOnJam::Corrupt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSpec {
    #[serde(default = "default_server_address")]
    pub address: Addr,
    #[serde(default)]
    pub require_registration: bool,
    #[serde(default)]
    pub require_authenticated_link: bool,
    #[serde(default = "default_dedup")]
    pub dedup_window_ms: TimeMs,
    #[serde(default = "default_mf_window")]
    pub most_frequent_window_ms: TimeMs,
    #[serde(default = "default_lead")]
    pub downlink_lead_ms: TimeMs,
}

impl Default for ServerSpec {
    fn default() -> Self {
        ServerSpec {
            address: default_server_address(),
            require_registration: false,
            require_authenticated_link: false,
            dedup_window_ms: default_dedup(),
            most_frequent_window_ms: default_mf_window(),
            downlink_lead_ms: default_lead(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sweep {
    /// One point per spreading factor, `frames` uplinks per device each.
    Sf { sfs: Vec<u8>, frames: u32 },
    /// One point per (route policy, flood factor) pair.
    PullFlood {
        policies: Vec<RoutePolicy>,
        factors: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: String,
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    pub horizon_ms: TimeMs,
    #[serde(default = "default_mic_mode")]
    pub mic_mode: MicMode,
    #[serde(default)]
    pub route_policy: RoutePolicy,
    #[serde(default)]
    pub airtime: AirtimeModel,
    #[serde(default)]
    pub rx_windows: RxWindows,
    #[serde(default)]
    pub channel: ChannelSpec,
    #[serde(default)]
    pub server: ServerSpec,
    pub devices: Vec<DeviceSpec>,
    pub gateways: Vec<GatewaySpec>,
    #[serde(default)]
    pub attacker: Option<AttackerSpec>,
    #[serde(default)]
    pub adjacency: Vec<(NodeId, NodeId)>,
    #[serde(default)]
    pub ids: IdsConfig,
    /// Whether the registry export is publicly downloadable.
    #[serde(default = "yes")]
    pub registry_public: bool,
    /// Downlinks dispatched within this span after the impostor starts are
    /// left out of the route-share figure.
    #[serde(default = "default_mf_window")]
    pub route_share_warmup_ms: TimeMs,
    #[serde(default)]
    pub sweep: Option<Sweep>,
}

fn yes() -> bool {
    true
}
fn one() -> f64 {
    1.0
}
fn default_latency() -> TimeMs {
    20
}
fn attacker_link() -> LinkSpec {
    LinkSpec {
        eavesdroppable: false,
        authenticated: false,
        latency_ms: 40,
    }
}
fn default_freq() -> f64 {
    868.1
}
fn default_jitter() -> TimeMs {
    2000
}
fn default_payload_len() -> usize {
    25
}
fn default_retransmit_limit() -> u32 {
    3
}
fn default_backoff() -> (TimeMs, TimeMs) {
    (1000, 3000)
}
fn default_pull_interval() -> TimeMs {
    10_000
}
fn default_eui_sources() -> Vec<EuiSource> {
    vec![EuiSource::Sniff, EuiSource::Registry]
}
fn default_server_address() -> Addr {
    "192.0.2.1:1700".into()
}
fn default_dedup() -> TimeMs {
    1000
}
fn default_mf_window() -> TimeMs {
    60_000
}
fn default_lead() -> TimeMs {
    40
}
fn default_mic_mode() -> MicMode {
    MicMode::V1_0
}

/// Command-line style overrides applied on top of a document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub horizon_ms: Option<TimeMs>,
    #[serde(default)]
    pub mic_mode: Option<MicMode>,
    #[serde(default)]
    pub route_policy: Option<RoutePolicy>,
}

impl Overrides {
    pub fn apply(&self, sc: &mut Scenario) {
        if let Some(s) = self.seed {
            sc.seed = s;
        }
        if let Some(h) = self.horizon_ms {
            sc.horizon_ms = h;
        }
        if let Some(m) = self.mic_mode {
            sc.mic_mode = m;
        }
        if let Some(p) = self.route_policy {
            sc.route_policy = p;
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CannedRef {
    #[serde(default)]
    schema: Option<String>,
    canned: String,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    horizon_ms: Option<TimeMs>,
    #[serde(default)]
    mic_mode: Option<MicMode>,
    #[serde(default)]
    route_policy: Option<RoutePolicy>,
}

/// Parses a scenario document. A document of the form
/// `{"canned": "<name>", "seed": .., ...}` expands the named scenario and
/// applies the listed overrides.
pub fn load_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let v: Value = serde_json::from_str(text)?;
    let sc = if v.get("canned").is_some() {
        let r: CannedRef = serde_json::from_value(v)?;
        if let Some(s) = r.schema.filter(|s| s != SCHEMA) {
            return Err(ScenarioError::Schema(s));
        }
        let mut sc = canned::canned(&r.canned).ok_or(ScenarioError::UnknownCanned(r.canned))?;
        Overrides {
            seed: r.seed,
            horizon_ms: r.horizon_ms,
            mic_mode: r.mic_mode,
            route_policy: r.route_policy,
        }
        .apply(&mut sc);
        sc
    } else {
        if let Some(s) = v.get("schema").and_then(Value::as_str) {
            if s != SCHEMA {
                return Err(ScenarioError::Schema(s.to_string()));
            }
        }
        serde_json::from_value(v)?
    };
    sc.validate()?;
    Ok(sc)
}

/// One concrete run of a (possibly swept) scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub label: String,
    pub params: BTreeMap<String, Value>,
    pub scenario: Scenario,
}

impl Scenario {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario is plain data")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema != SCHEMA {
            return Err(ScenarioError::Schema(self.schema.clone()));
        }
        let invalid = |m: String| Err(ScenarioError::Invalid(m));
        if self.horizon_ms == 0 {
            return invalid("horizon_ms must be positive".into());
        }
        self.channel.jam_success.validate()?;
        if self.airtime.base_ms == 0 || self.airtime.reference_len == 0 {
            return invalid("airtime calibration must be positive".into());
        }

        let mut ids = BTreeSet::new();
        let mut claim = |id: &str| {
            if ids.insert(id.to_string()) {
                Ok(())
            } else {
                Err(ScenarioError::DuplicateId(id.to_string()))
            }
        };
        let mut dev_addrs = BTreeSet::new();
        for d in &self.devices {
            claim(&d.id)?;
            if !dev_addrs.insert(d.dev_addr) {
                return invalid(format!("DevAddr {} used twice", d.dev_addr));
            }
            NwkSKey::from_hex(&d.key).map_err(|e| ScenarioError::Invalid(format!("device {}: {e}", d.id)))?;
            if d.interval_ms == 0 {
                return invalid(format!("device {}: interval_ms must be positive", d.id));
            }
            if d.backoff_ms.0 > d.backoff_ms.1 {
                return invalid(format!("device {}: backoff range is inverted", d.id));
            }
            if d.payload_len > 242 {
                return invalid(format!("device {}: payload_len above 242", d.id));
            }
        }
        let mut euis = BTreeSet::new();
        let mut addresses = BTreeSet::from([self.server.address.clone()]);
        for g in &self.gateways {
            claim(&g.id)?;
            if !euis.insert(g.eui) {
                return invalid(format!("gateway EUI {} used twice", g.eui));
            }
            if !addresses.insert(g.address.clone()) {
                return invalid(format!("address {} used twice", g.address));
            }
            if g.pull_interval_ms == 0 {
                return invalid(format!("gateway {}: pull_interval_ms must be positive", g.id));
            }
        }
        if let Some(a) = &self.attacker {
            claim(&a.gateway.id)?;
            if !addresses.insert(a.gateway.address.clone()) {
                return invalid(format!("address {} used twice", a.gateway.address));
            }
            if !self.gateways.iter().any(|g| g.id == a.victim) {
                return Err(ScenarioError::UnknownNode {
                    context: "attacker.victim".into(),
                    id: a.victim.clone(),
                });
            }
            if a.pull_flood_factor.is_nan() || a.pull_flood_factor < 1.0 {
                return Err(AttackError::FloodFactor(a.pull_flood_factor).into());
            }
            if let Some(j) = &a.jammer {
                claim(&j.config.node)?;
                j.config.validate()?;
            }
            if a.disable.as_ref().is_some_and(|d| d.method == DisableMethod::Jam) && a.jammer.is_none() {
                return invalid("disable method jam needs a jammer".into());
            }
            if let Some(s) = &a.ack_spoof {
                for t in &s.targets {
                    if !dev_addrs.contains(t) {
                        return invalid(format!("ack_spoof target {t} is not a device"));
                    }
                }
            }
        }
        for (a, b) in &self.adjacency {
            for id in [a, b] {
                if !ids.contains(id) {
                    return Err(ScenarioError::UnknownNode {
                        context: format!("adjacency ({a}, {b})"),
                        id: id.clone(),
                    });
                }
            }
            if a == b {
                return invalid(format!("adjacency ({a}, {b}) links a node to itself"));
            }
        }
        match &self.sweep {
            Some(Sweep::Sf { sfs, frames }) => {
                for sf in sfs {
                    SpreadingFactor::new(*sf)?;
                }
                if *frames == 0 || sfs.is_empty() {
                    return invalid("sf sweep needs SFs and a positive frame count".into());
                }
            }
            Some(Sweep::PullFlood { policies, factors }) => {
                if self.attacker.is_none() {
                    return invalid("pull_flood sweep needs an attacker".into());
                }
                if policies.is_empty() || factors.is_empty() {
                    return invalid("pull_flood sweep needs policies and factors".into());
                }
                if let Some(f) = factors.iter().find(|f| f.is_nan() || **f < 1.0) {
                    return Err(AttackError::FloodFactor(*f).into());
                }
            }
            None => {}
        }
        Ok(())
    }

    /// Expands a sweep into concrete runs; a plain scenario is one point.
    pub fn points(&self) -> Vec<Point> {
        let mut base = self.clone();
        base.sweep = None;
        match &self.sweep {
            None => vec![Point {
                label: self.name.clone(),
                params: BTreeMap::new(),
                scenario: base,
            }],
            Some(Sweep::Sf { sfs, frames }) => sfs
                .iter()
                .map(|&sf| {
                    let mut sc = base.clone();
                    let sf = SpreadingFactor::new(sf).expect("validated");
                    let mut horizon = 0;
                    for d in &mut sc.devices {
                        d.sf = sf;
                        d.max_uplinks = Some(*frames);
                        horizon = horizon.max((*frames as u64 + 2) * d.interval_ms);
                    }
                    sc.horizon_ms = horizon.max(1);
                    Point {
                        label: format!("sf{}", sf.get()),
                        params: BTreeMap::from([("sf".to_string(), Value::from(sf.get()))]),
                        scenario: sc,
                    }
                })
                .collect(),
            Some(Sweep::PullFlood { policies, factors }) => policies
                .iter()
                .flat_map(|&p| factors.iter().map(move |&f| (p, f)))
                .map(|(policy, factor)| {
                    let mut sc = base.clone();
                    sc.route_policy = policy;
                    if let Some(a) = sc.attacker.as_mut() {
                        a.pull_flood_factor = factor;
                    }
                    Point {
                        label: format!("{}-x{factor}", policy.name()),
                        params: BTreeMap::from([
                            ("route_policy".to_string(), Value::from(policy.name())),
                            ("pull_flood_factor".to_string(), Value::from(factor)),
                        ]),
                        scenario: sc,
                    }
                })
                .collect(),
        }
    }
}
