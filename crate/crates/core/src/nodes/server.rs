//! Network server: PUSH/PULL handling, deduplication, ACK generation and
//! downlink route selection.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{
    decode_datagram, encode_txpk, parse_rxpk, CrcStatus, Datagram, DatagramKind, GatewayEui, RxPacketMeta, Token,
    TxPacketMeta,
};
use crate::ids::Observation;
use crate::mac::{build_ack, parse_frame, serialize_frame, verify_uplink, DevAddr, MacError, MicMode, NwkSKey};
use crate::nodes::registry::Registry;
use crate::nodes::Addr;
use crate::radio::{SpreadingFactor, TimeMs};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ServerError {
    #[error("no downlink route for gateway {0}")]
    NoRoute(GatewayEui),
    #[error("unknown device {0}")]
    UnknownDevice(DevAddr),
    #[error(transparent)]
    Mac(#[from] MacError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoutePolicy {
    #[default]
    LastPullWins,
    StickyFirst,
    MostFrequent,
}

impl RoutePolicy {
    pub const ALL: [RoutePolicy; 3] = [
        RoutePolicy::LastPullWins,
        RoutePolicy::StickyFirst,
        RoutePolicy::MostFrequent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RoutePolicy::LastPullWins => "last_pull_wins",
            RoutePolicy::StickyFirst => "sticky_first",
            RoutePolicy::MostFrequent => "most_frequent",
        }
    }
}

impl FromStr for RoutePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RoutePolicy::ALL
            .into_iter()
            .find(|p| p.name() == s || p.name().replace('_', "-") == s)
            .ok_or_else(|| format!("unknown route policy {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub address: Addr,
    pub route_policy: RoutePolicy,
    pub require_registration: bool,
    pub require_authenticated_link: bool,
    /// Copies of one uplink arriving within this span count as duplicates;
    /// a later copy is treated as a retransmission.
    pub dedup_window_ms: TimeMs,
    pub most_frequent_window_ms: TimeMs,
    pub rx1_delay_ms: TimeMs,
    /// How far ahead of the RX1 opening the server hands the downlink over.
    pub downlink_lead_ms: TimeMs,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            address: "192.0.2.1:1700".into(),
            route_policy: RoutePolicy::LastPullWins,
            require_registration: false,
            require_authenticated_link: false,
            dedup_window_ms: 1000,
            most_frequent_window_ms: 60_000,
            rx1_delay_ms: 1000,
            downlink_lead_ms: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RouteEntry {
    pub address: Addr,
    pub last_pull: TimeMs,
}

#[derive(Debug, Clone)]
struct Session {
    key: NwkSKey,
    mic_mode: MicMode,
    next_down_fcnt: u16,
}

#[derive(Debug, Clone, Copy)]
struct DedupEntry {
    last_accept: TimeMs,
}

/// ACK owed to a device, to be handed to a gateway at `at`.
#[derive(Debug, Clone, PartialEq)]
pub struct DownlinkRequest {
    pub at: TimeMs,
    pub dev: DevAddr,
    pub acked_fcnt: u16,
    pub eui: GatewayEui,
    pub freq: f64,
    pub sf: SpreadingFactor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Downlink {
    pub address: Addr,
    pub datagram: Datagram,
    pub dev: DevAddr,
    pub down_fcnt: u16,
    pub acked_fcnt: u16,
    pub eui: GatewayEui,
}

/// Server-side facts worth tracing.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "note", rename_all = "snake_case")]
pub enum ServerNote {
    DiscardedUnauthenticated { source: Addr },
    Undecodable { source: Addr },
    Untrusted { eui: GatewayEui },
    Corrupt { eui: GatewayEui },
    UnknownDevice { dev: DevAddr },
    BadMic { dev: DevAddr, fcnt: u16 },
    Delivered { dev: DevAddr, fcnt: u16, eui: GatewayEui },
    Deduplicated { dev: DevAddr, fcnt: u16, eui: GatewayEui },
    Retransmission { dev: DevAddr, fcnt: u16, eui: GatewayEui },
    RouteChanged { eui: GatewayEui, address: Addr },
}

#[derive(Debug, Clone, Default)]
pub struct Inbound {
    pub datagram: Option<Datagram>,
    pub replies: Vec<Datagram>,
    pub observations: Vec<Observation>,
    pub downlinks: Vec<DownlinkRequest>,
    pub notes: Vec<ServerNote>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ServerCounters {
    pub push_data: u64,
    pub pull_data: u64,
    pub tx_ack: u64,
    pub packets: u64,
    pub corrupt: u64,
    pub untrusted: u64,
    pub discarded_unauthenticated: u64,
    pub undecodable: u64,
    pub unknown_device: u64,
    pub bad_mic: u64,
    pub delivered: u64,
    pub deduplicated: u64,
    pub retransmissions: u64,
    pub downlinks_sent: u64,
    pub downlinks_dropped_no_route: u64,
    pub downlinks_by_address: BTreeMap<Addr, u64>,
}

impl ServerCounters {
    pub fn corrupt_fraction(&self) -> f64 {
        if self.packets == 0 {
            0.0
        } else {
            self.corrupt as f64 / self.packets as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub config: ServerConfig,
    pub registry: Registry,
    routes: BTreeMap<GatewayEui, RouteEntry>,
    pull_history: BTreeMap<GatewayEui, VecDeque<(TimeMs, Addr)>>,
    sessions: BTreeMap<DevAddr, Session>,
    dedup: BTreeMap<(DevAddr, u16), DedupEntry>,
    delivered: BTreeSet<(DevAddr, u16)>,
    ack_ledger: BTreeMap<(DevAddr, u16), u16>,
    pub counters: ServerCounters,
}

impl ServerState {
    pub fn new(config: ServerConfig, registry: Registry) -> Self {
        ServerState {
            config,
            registry,
            routes: BTreeMap::new(),
            pull_history: BTreeMap::new(),
            sessions: BTreeMap::new(),
            dedup: BTreeMap::new(),
            delivered: BTreeSet::new(),
            ack_ledger: BTreeMap::new(),
            counters: ServerCounters::default(),
        }
    }

    pub fn add_device(&mut self, dev: DevAddr, key: NwkSKey, mic_mode: MicMode) {
        self.sessions.insert(
            dev,
            Session {
                key,
                mic_mode,
                next_down_fcnt: 0,
            },
        );
    }

    pub fn route(&self, eui: &GatewayEui) -> Option<&RouteEntry> {
        self.routes.get(eui)
    }

    pub fn routes(&self) -> &BTreeMap<GatewayEui, RouteEntry> {
        &self.routes
    }

    pub fn is_delivered(&self, dev: DevAddr, fcnt: u16) -> bool {
        self.delivered.contains(&(dev, fcnt))
    }

    /// Uplink counter a generated ACK was built for.
    pub fn acked_for(&self, dev: DevAddr, down_fcnt: u16) -> Option<u16> {
        self.ack_ledger.get(&(dev, down_fcnt)).copied()
    }

    pub fn next_down_fcnt(&self, dev: DevAddr) -> Option<u16> {
        self.sessions.get(&dev).map(|s| s.next_down_fcnt)
    }

    fn trusted(&self, eui: &GatewayEui) -> bool {
        !self.config.require_registration || self.registry.get(eui).is_some_and(|e| e.trusted)
    }

    /// Handles one UDP payload from `source`.
    pub fn receive(&mut self, now: TimeMs, raw: &[u8], source: &str, authenticated: bool) -> Inbound {
        let mut out = Inbound::default();
        if self.config.require_authenticated_link && !authenticated {
            self.counters.discarded_unauthenticated += 1;
            out.notes.push(ServerNote::DiscardedUnauthenticated {
                source: source.to_string(),
            });
            return out;
        }
        let d = match decode_datagram(raw) {
            Ok(d) => d,
            Err(_) => {
                self.counters.undecodable += 1;
                out.notes.push(ServerNote::Undecodable {
                    source: source.to_string(),
                });
                return out;
            }
        };
        let Some(eui) = d.eui else {
            // Downstream-only kinds never arrive at a server.
            self.counters.undecodable += 1;
            out.notes.push(ServerNote::Undecodable {
                source: source.to_string(),
            });
            return out;
        };
        self.registry.touch(&eui, now);
        let trusted = self.trusted(&eui);
        let observe = |stat| Observation {
            time: now,
            eui,
            source: source.to_string(),
            kind: d.kind,
            stat,
        };
        match d.kind {
            DatagramKind::PushData => {
                self.counters.push_data += 1;
                out.replies.push(Datagram::push_ack(d.token));
                let pkts = match parse_rxpk(&d.body) {
                    Ok(p) => p,
                    Err(_) => {
                        self.counters.undecodable += 1;
                        out.notes.push(ServerNote::Undecodable {
                            source: source.to_string(),
                        });
                        out.datagram = Some(d);
                        return out;
                    }
                };
                if pkts.is_empty() {
                    out.observations.push(observe(None));
                }
                for p in &pkts {
                    out.observations.push(observe(Some(p.stat)));
                    self.counters.packets += 1;
                    if p.stat == CrcStatus::Fail {
                        self.counters.corrupt += 1;
                    }
                }
                if !trusted {
                    self.counters.untrusted += 1;
                    out.notes.push(ServerNote::Untrusted { eui });
                } else {
                    for p in &pkts {
                        self.process_packet(now, eui, p, &mut out);
                    }
                }
            }
            DatagramKind::PullData => {
                self.counters.pull_data += 1;
                out.replies.push(Datagram::pull_ack(d.token));
                out.observations.push(observe(None));
                if trusted {
                    self.update_route(now, eui, source, &mut out);
                } else {
                    self.counters.untrusted += 1;
                    out.notes.push(ServerNote::Untrusted { eui });
                }
            }
            DatagramKind::TxAck => {
                self.counters.tx_ack += 1;
                out.observations.push(observe(None));
            }
            _ => unreachable!("kinds without an EUI were rejected above"),
        }
        out.datagram = Some(d);
        out
    }

    fn process_packet(&mut self, now: TimeMs, eui: GatewayEui, p: &RxPacketMeta, out: &mut Inbound) {
        if p.stat == CrcStatus::Fail {
            out.notes.push(ServerNote::Corrupt { eui });
            return;
        }
        let Ok(frame) = parse_frame(&p.data) else {
            self.counters.undecodable += 1;
            return;
        };
        let dev = frame.dev_addr;
        let Some(session) = self.sessions.get(&dev) else {
            self.counters.unknown_device += 1;
            out.notes.push(ServerNote::UnknownDevice { dev });
            return;
        };
        if !verify_uplink(&session.key, &frame) {
            self.counters.bad_mic += 1;
            out.notes.push(ServerNote::BadMic { dev, fcnt: frame.fcnt });
            return;
        }
        let key = (dev, frame.fcnt);
        let fresh_attempt = match self.dedup.get_mut(&key) {
            None => {
                self.dedup.insert(key, DedupEntry { last_accept: now });
                self.delivered.insert(key);
                self.counters.delivered += 1;
                out.notes.push(ServerNote::Delivered {
                    dev,
                    fcnt: frame.fcnt,
                    eui,
                });
                true
            }
            Some(e) if now.saturating_sub(e.last_accept) < self.config.dedup_window_ms => {
                self.counters.deduplicated += 1;
                out.notes.push(ServerNote::Deduplicated {
                    dev,
                    fcnt: frame.fcnt,
                    eui,
                });
                false
            }
            Some(e) => {
                e.last_accept = now;
                self.counters.retransmissions += 1;
                out.notes.push(ServerNote::Retransmission {
                    dev,
                    fcnt: frame.fcnt,
                    eui,
                });
                true
            }
        };
        if fresh_attempt && frame.is_confirmed_uplink() {
            out.downlinks.push(DownlinkRequest {
                at: (now + self.config.rx1_delay_ms).saturating_sub(self.config.downlink_lead_ms),
                dev,
                acked_fcnt: frame.fcnt,
                eui,
                freq: p.freq,
                sf: p.sf,
            });
        }
    }

    fn update_route(&mut self, now: TimeMs, eui: GatewayEui, source: &str, out: &mut Inbound) {
        let before = self.routes.get(&eui).map(|r| r.address.clone());
        let entry = match self.config.route_policy {
            RoutePolicy::LastPullWins => RouteEntry {
                address: source.to_string(),
                last_pull: now,
            },
            RoutePolicy::StickyFirst => match self.routes.get(&eui) {
                Some(r) if r.address != source => r.clone(),
                _ => RouteEntry {
                    address: source.to_string(),
                    last_pull: now,
                },
            },
            RoutePolicy::MostFrequent => {
                let window = self.config.most_frequent_window_ms;
                let hist = self.pull_history.entry(eui).or_default();
                hist.push_back((now, source.to_string()));
                while hist.front().is_some_and(|(t, _)| t + window <= now) {
                    hist.pop_front();
                }
                let mut tally: BTreeMap<&str, (usize, TimeMs)> = BTreeMap::new();
                for (t, a) in hist.iter() {
                    let e = tally.entry(a.as_str()).or_default();
                    e.0 += 1;
                    e.1 = *t;
                }
                let (address, (_, last)) = tally
                    .into_iter()
                    .max_by_key(|(_, (count, last))| (*count, *last))
                    .expect("history holds the current pull");
                RouteEntry {
                    address: address.to_string(),
                    last_pull: last,
                }
            }
        };
        if before.as_deref() != Some(entry.address.as_str()) {
            out.notes.push(ServerNote::RouteChanged {
                eui,
                address: entry.address.clone(),
            });
        }
        self.routes.insert(eui, entry);
    }

    /// Builds the ACK and wraps it in a PULL_RESP for the current route.
    /// The downlink counter only advances when a route exists.
    pub fn send_downlink(&mut self, req: &DownlinkRequest, rng: &mut impl Rng) -> Result<Downlink, ServerError> {
        let Some(route) = self.routes.get(&req.eui) else {
            self.counters.downlinks_dropped_no_route += 1;
            return Err(ServerError::NoRoute(req.eui));
        };
        let address = route.address.clone();
        let session = self
            .sessions
            .get_mut(&req.dev)
            .ok_or(ServerError::UnknownDevice(req.dev))?;
        let down_fcnt = session.next_down_fcnt;
        let ack = build_ack(&session.key, req.dev, down_fcnt, session.mic_mode, Some(req.acked_fcnt))?;
        session.next_down_fcnt = session.next_down_fcnt.wrapping_add(1);
        self.ack_ledger.insert((req.dev, down_fcnt), req.acked_fcnt);
        self.counters.downlinks_sent += 1;
        *self.counters.downlinks_by_address.entry(address.clone()).or_default() += 1;
        let body = encode_txpk(&TxPacketMeta {
            freq: req.freq,
            sf: req.sf,
            data: serialize_frame(&ack),
        });
        Ok(Downlink {
            address,
            datagram: Datagram::pull_resp(Token(rng.gen()), body),
            dev: req.dev,
            down_fcnt,
            acked_fcnt: req.acked_fcnt,
            eui: req.eui,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode_datagram, encode_rxpk, parse_txpk};
    use crate::mac::{build_uplink, parse_frame, verify_ack, AckVerdict};
    use crate::nodes::registry::RegistryEntry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const DEV: DevAddr = DevAddr([0x26, 0x01, 0x12, 0x34]);

    fn key() -> NwkSKey {
        NwkSKey::new([7; 16])
    }

    fn eui(n: u8) -> GatewayEui {
        GatewayEui([0, 0, 0, 0, 0, 0, 0, n])
    }

    fn server(policy: RoutePolicy) -> ServerState {
        let mut s = ServerState::new(
            ServerConfig {
                route_policy: policy,
                ..ServerConfig::default()
            },
            Registry::new(),
        );
        s.add_device(DEV, key(), MicMode::V1_0);
        s
    }

    fn push(g: GatewayEui, fcnt: u16, stat: CrcStatus) -> Vec<u8> {
        let frame = build_uplink(&key(), DEV, fcnt, true, vec![1; 25]);
        let body = encode_rxpk(&[RxPacketMeta {
            stat,
            freq: 868.1,
            sf: SpreadingFactor::new(10).unwrap(),
            data: serialize_frame(&frame),
        }]);
        encode_datagram(&Datagram::push_data(Token(1), g, body)).unwrap()
    }

    fn pull(g: GatewayEui) -> Vec<u8> {
        encode_datagram(&Datagram::pull_data(Token(2), g)).unwrap()
    }

    #[test]
    fn push_is_acked_and_delivered_once_across_gateways() {
        let mut s = server(RoutePolicy::LastPullWins);
        let a = s.receive(100, &push(eui(1), 0, CrcStatus::Ok), "a:1", true);
        assert_eq!(a.replies, vec![Datagram::push_ack(Token(1))]);
        assert_eq!(a.downlinks.len(), 1);
        assert_eq!(a.downlinks[0].at, 100 + 1000 - 40);
        let b = s.receive(120, &push(eui(2), 0, CrcStatus::Ok), "b:1", true);
        assert!(b.downlinks.is_empty());
        assert_eq!(s.counters.delivered, 1);
        assert_eq!(s.counters.deduplicated, 1);
        assert!(s.is_delivered(DEV, 0));
    }

    #[test]
    fn late_copy_is_a_retransmission() {
        let mut s = server(RoutePolicy::LastPullWins);
        s.receive(0, &push(eui(1), 3, CrcStatus::Ok), "a:1", true);
        let r = s.receive(5000, &push(eui(1), 3, CrcStatus::Ok), "a:1", true);
        assert_eq!(r.downlinks.len(), 1);
        assert_eq!(s.counters.delivered, 1);
        assert_eq!(s.counters.retransmissions, 1);
    }

    #[test]
    fn corrupt_packets_are_counted_not_processed() {
        let mut s = server(RoutePolicy::LastPullWins);
        let r = s.receive(0, &push(eui(1), 0, CrcStatus::Fail), "a:1", true);
        assert!(r.downlinks.is_empty());
        assert_eq!(r.observations[0].stat, Some(CrcStatus::Fail));
        assert_eq!(s.counters.corrupt, 1);
        assert_eq!(s.counters.delivered, 0);
        assert_eq!(s.counters.corrupt_fraction(), 1.0);
    }

    #[test]
    fn unregistered_gateway_is_untrusted() {
        let mut s = server(RoutePolicy::LastPullWins);
        s.config.require_registration = true;
        s.registry.register(RegistryEntry::new(eui(1), "", "x")).unwrap();
        let r = s.receive(0, &push(eui(9), 0, CrcStatus::Ok), "z:1", true);
        assert_eq!(r.replies.len(), 1);
        assert_eq!(r.observations.len(), 1);
        assert!(r.downlinks.is_empty());
        assert_eq!(s.counters.untrusted, 1);
        let r = s.receive(0, &push(eui(1), 0, CrcStatus::Ok), "a:1", true);
        assert_eq!(r.downlinks.len(), 1);
    }

    #[test]
    fn unauthenticated_link_discarded_before_state_change() {
        let mut s = server(RoutePolicy::LastPullWins);
        s.config.require_authenticated_link = true;
        let r = s.receive(0, &pull(eui(1)), "evil:1", false);
        assert!(r.replies.is_empty() && r.observations.is_empty());
        assert!(s.route(&eui(1)).is_none());
        let r = s.receive(0, &push(eui(1), 0, CrcStatus::Ok), "evil:1", false);
        assert!(r.downlinks.is_empty());
        assert_eq!(s.counters.delivered, 0);
        assert_eq!(s.counters.discarded_unauthenticated, 2);
    }

    #[test]
    fn last_pull_wins_flips_and_sticky_first_holds() {
        for (policy, expect) in [
            (RoutePolicy::LastPullWins, ["a:1", "b:1", "a:1", "b:1"]),
            (RoutePolicy::StickyFirst, ["a:1"; 4]),
        ] {
            let mut s = server(policy);
            for (i, src) in ["a:1", "b:1", "a:1", "b:1"].iter().enumerate() {
                s.receive(i as u64 * 1000, &pull(eui(1)), src, true);
                assert_eq!(s.route(&eui(1)).unwrap().address, expect[i]);
                assert_eq!(s.routes().len(), 1);
            }
        }
    }

    #[test]
    fn most_frequent_prefers_the_flooder() {
        let mut s = server(RoutePolicy::MostFrequent);
        let mut t = 0;
        // Legitimate gateway every 10 s, flooder three times as often.
        while t < 120_000 {
            if t % 10_000 == 5_000 {
                s.receive(t, &pull(eui(1)), "legit:1", true);
            }
            if t >= 30_000 && t % 3_333 == 0 {
                s.receive(t, &pull(eui(1)), "flood:1", true);
            }
            t += 1;
        }
        assert_eq!(s.route(&eui(1)).unwrap().address, "flood:1");
    }

    #[test]
    fn most_frequent_ties_go_to_most_recent() {
        let mut s = server(RoutePolicy::MostFrequent);
        s.receive(0, &pull(eui(1)), "a:1", true);
        s.receive(10, &pull(eui(1)), "b:1", true);
        assert_eq!(s.route(&eui(1)).unwrap().address, "b:1");
        s.receive(20, &pull(eui(1)), "a:1", true);
        assert_eq!(s.route(&eui(1)).unwrap().address, "a:1");
    }

    #[test]
    fn downlink_needs_route_and_increments_counter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = server(RoutePolicy::LastPullWins);
        let r = s.receive(0, &push(eui(1), 4, CrcStatus::Ok), "a:1", true);
        let req = r.downlinks[0].clone();
        assert_eq!(s.send_downlink(&req, &mut rng), Err(ServerError::NoRoute(eui(1))));
        assert_eq!(s.next_down_fcnt(DEV), Some(0));
        assert_eq!(s.counters.downlinks_dropped_no_route, 1);

        s.receive(10, &pull(eui(1)), "a:1", true);
        let dl = s.send_downlink(&req, &mut rng).unwrap();
        assert_eq!(dl.address, "a:1");
        assert_eq!(dl.datagram.kind, DatagramKind::PullResp);
        assert_eq!(s.next_down_fcnt(DEV), Some(1));
        assert_eq!(s.acked_for(DEV, 0), Some(4));
        let tx = parse_txpk(&dl.datagram.body).unwrap();
        let ack = parse_frame(&tx.data).unwrap();
        assert_eq!(verify_ack(&key(), &ack, None, MicMode::V1_0, 4), AckVerdict::Accepted);
        assert_eq!(s.counters.downlinks_by_address["a:1"], 1);
    }

    #[test]
    fn garbage_is_counted() {
        let mut s = server(RoutePolicy::LastPullWins);
        let r = s.receive(0, &[1, 2], "a:1", true);
        assert!(r.datagram.is_none());
        assert_eq!(s.counters.undecodable, 1);
    }
}
