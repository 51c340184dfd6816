//! The discrete-event simulator tying radio, nodes, attacker and IDS together.

use std::collections::{BTreeMap, BTreeSet};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde_json::json;

use crate::attacks::jammer::{constant_burst, record_complete_at, selective_burst, triggered_burst, wormhole_burst};
use crate::attacks::{
    disconnect_gateway, eui_from_registry, sniff_eui, AckSpoofState, AttackMode, AttackerState, EuiSource,
    ForwardAction, JammerKind, RecordedAck,
};
use crate::codec::{decode_datagram, encode_datagram, Datagram, DatagramKind, GatewayEui};
use crate::ids::{Alert, DetectorKind, IdsEngine};
use crate::mac::{AckVerdict, Direction, NwkSKey};
use crate::nodes::device::{DownlinkOutcome, EndDeviceState, Expiry, UplinkStatus};
use crate::nodes::gateway::GatewayState;
use crate::nodes::registry::{Registry, RegistryEntry};
use crate::nodes::server::{DownlinkRequest, ServerConfig, ServerState};
use crate::nodes::Addr;
use crate::radio::{
    resolve_reception, ChannelModel, Coverage, Ether, NodeId, RadioFrame, SpreadingFactor, TimeMs, TxId,
};
use crate::sim::metrics::{
    AttackReport, DeviceReport, DownlinkLogEntry, GatewayReport, IdsReport, MetricsReport, PointOutput, RadioStats,
    RouteShare, RunOutput, ServerReport, WindowStats,
};
use crate::sim::scenario::{AttackerSpec, DeviceSpec, DisableMethod, GatewaySpec, LinkSpec, Point, Scenario};
use crate::sim::scheduler::EventQueue;
use crate::sim::trace::Trace;

/// Frames older than this are dropped from the ether.
const ETHER_MEMORY_MS: TimeMs = 20_000;

/// First keepalive of a legitimate gateway falls in `[0, BOOT_PULL_MS)`.
const BOOT_PULL_MS: TimeMs = 100;

const STREAM_RADIO: u64 = 1;
const STREAM_TOKENS: u64 = 2;
const STREAM_DEVICES: u64 = 3;
const STREAM_GATEWAYS: u64 = 4;
const STREAM_ATTACKER: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Puller {
    Gateway(usize),
    Impostor,
}

#[derive(Debug, Clone)]
enum Event {
    UplinkDue {
        dev: usize,
        slot: u32,
    },
    Retransmit {
        dev: usize,
        bytes: Vec<u8>,
    },
    WindowsClosed {
        dev: usize,
        cycle: u64,
    },
    RadioEnd {
        tx: TxId,
    },
    JamTrigger {
        tx: TxId,
    },
    RecordComplete {
        tx: TxId,
    },
    BootPull(usize),
    Pull(Puller),
    Deliver {
        to: Addr,
        from: Addr,
        bytes: Vec<u8>,
    },
    Downlink(DownlinkRequest),
    Transmit {
        from: NodeId,
        data: Vec<u8>,
        sf: SpreadingFactor,
        freq: f64,
        replay: bool,
    },
    Sniff,
    Disable,
    StartImpostor,
    JammerOn,
    JammerOff,
}

impl Event {
    fn name(&self) -> &'static str {
        match self {
            Event::UplinkDue { .. } => "uplink_due",
            Event::Retransmit { .. } => "retransmit",
            Event::WindowsClosed { .. } => "windows_closed",
            Event::RadioEnd { .. } => "radio_end",
            Event::JamTrigger { .. } => "jam_trigger",
            Event::RecordComplete { .. } => "record_complete",
            Event::BootPull(_) | Event::Pull(_) => "pull",
            Event::Deliver { .. } => "deliver",
            Event::Downlink(_) => "downlink",
            Event::Transmit { .. } => "transmit",
            Event::Sniff => "sniff",
            Event::Disable => "disable",
            Event::StartImpostor => "start_impostor",
            Event::JammerOn => "jammer_on",
            Event::JammerOff => "jammer_off",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Device(usize),
    Gateway(usize),
    Attacker,
    Jammer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Endpoint {
    Server,
    Gateway(usize),
    Attacker,
}

struct Dev {
    spec: DeviceSpec,
    state: EndDeviceState,
    phase: TimeMs,
    skipped: u64,
}

struct Gw {
    spec: GatewaySpec,
    state: GatewayState,
}

struct Att {
    spec: AttackerSpec,
    state: AttackerState,
    victim: usize,
    jammer_active: bool,
    recorded: BTreeSet<TxId>,
    overheard: Vec<Datagram>,
    steps: BTreeMap<String, String>,
    started_at: Option<TimeMs>,
    attack_from: Option<TimeMs>,
    window: WindowStats,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub trace: bool,
}

pub struct Engine {
    sc: Scenario,
    queue: EventQueue<Event>,
    ether: Ether,
    channel: ChannelModel,
    devices: Vec<Dev>,
    gateways: Vec<Gw>,
    server: ServerState,
    ids: IdsEngine,
    attacker: Option<Att>,
    roles: BTreeMap<NodeId, Role>,
    endpoints: BTreeMap<Addr, Endpoint>,
    replays: BTreeSet<TxId>,
    rng_radio: ChaCha8Rng,
    rng_tokens: ChaCha8Rng,
    rng_devices: ChaCha8Rng,
    rng_gateways: ChaCha8Rng,
    rng_attacker: ChaCha8Rng,
    trace: Trace,
    alerts: Vec<Alert>,
    downlinks: Vec<DownlinkLogEntry>,
    event_counts: BTreeMap<String, u64>,
    radio: RadioStats,
}

fn stream(seed: u64, n: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(n);
    r
}

fn b64(bytes: &[u8]) -> String {
    B64.encode(bytes)
}

fn dir_name(d: Direction) -> &'static str {
    match d {
        Direction::Up => "up",
        Direction::Down => "down",
    }
}

/// Next keepalive gap: fixed, or exponential with the same mean.
fn pull_gap(interval: TimeMs, jitter: bool, rng: &mut impl Rng) -> TimeMs {
    if jitter {
        let x: f64 = Exp1.sample(rng);
        ((x * interval as f64).round() as TimeMs).max(1)
    } else {
        interval
    }
}

impl Engine {
    /// Builds the world for one validated, sweep-free scenario.
    pub fn new(sc: Scenario, opts: RunOptions, point: Option<String>) -> Self {
        let seed = sc.seed;
        let mut coverage = Coverage::default();
        for (a, b) in &sc.adjacency {
            coverage.connect(a, b);
        }
        let channel = ChannelModel {
            jam_success: sc.channel.jam_success.clone(),
            coverage,
            crc_policy_on_jam: sc.channel.crc_policy_on_jam,
        };
        let server = build_server(&sc);

        let mut roles = BTreeMap::new();
        let mut endpoints = BTreeMap::from([(sc.server.address.clone(), Endpoint::Server)]);
        let mut devices = Vec::new();
        for (i, d) in sc.devices.iter().enumerate() {
            let key = NwkSKey::from_hex(&d.key).expect("validated key");
            let state =
                EndDeviceState::new(d.dev_addr, key, sc.mic_mode, d.retransmit_limit).with_windows(sc.rx_windows);
            roles.insert(d.id.clone(), Role::Device(i));
            devices.push(Dev {
                spec: d.clone(),
                state,
                phase: 0,
                skipped: 0,
            });
        }
        let mut gateways = Vec::new();
        for (i, g) in sc.gateways.iter().enumerate() {
            let state = GatewayState::new(
                g.eui,
                g.address.clone(),
                sc.server.address.clone(),
                g.pull_interval_ms,
                g.crc_forward_policy,
            )
            .expect("validated interval");
            roles.insert(g.id.clone(), Role::Gateway(i));
            endpoints.insert(g.address.clone(), Endpoint::Gateway(i));
            gateways.push(Gw { spec: g.clone(), state });
        }
        let attacker = sc.attacker.as_ref().map(|a| {
            roles.insert(a.gateway.id.clone(), Role::Attacker);
            endpoints.insert(a.gateway.address.clone(), Endpoint::Attacker);
            if let Some(j) = &a.jammer {
                roles.insert(j.config.node.clone(), Role::Jammer);
            }
            let spoof = match &a.ack_spoof {
                Some(s) => AckSpoofState::new(s.targets.iter().copied()),
                None => AckSpoofState::disabled(),
            };
            let state = AttackerState::new(
                a.gateway.address.clone(),
                a.jammer.as_ref().map(|j| j.config.clone()),
                spoof,
                a.pull_flood_factor,
            )
            .expect("validated attacker");
            let victim = sc
                .gateways
                .iter()
                .position(|g| g.id == a.victim)
                .expect("validated victim");
            Att {
                spec: a.clone(),
                state,
                victim,
                jammer_active: false,
                recorded: BTreeSet::new(),
                overheard: Vec::new(),
                steps: BTreeMap::new(),
                started_at: None,
                attack_from: a.disable.as_ref().map(|d| d.at_ms).or(a.impostor_at_ms),
                window: WindowStats::default(),
            }
        });

        let ids = IdsEngine::new(sc.ids.clone());
        let mut engine = Engine {
            queue: EventQueue::new(),
            ether: Ether::new(),
            channel,
            devices,
            gateways,
            server,
            ids,
            attacker,
            roles,
            endpoints,
            replays: BTreeSet::new(),
            rng_radio: stream(seed, STREAM_RADIO),
            rng_tokens: stream(seed, STREAM_TOKENS),
            rng_devices: stream(seed, STREAM_DEVICES),
            rng_gateways: stream(seed, STREAM_GATEWAYS),
            rng_attacker: stream(seed, STREAM_ATTACKER),
            trace: Trace::new(opts.trace, point),
            alerts: Vec::new(),
            downlinks: Vec::new(),
            event_counts: BTreeMap::new(),
            radio: RadioStats::default(),
            sc,
        };
        engine.schedule_initial();
        engine
    }

    fn schedule_initial(&mut self) {
        // A forwarder opens its downlink route right after boot; its
        // keepalive timer then runs at an arbitrary phase.
        for i in 0..self.gateways.len() {
            let interval = self.gateways[i].spec.pull_interval_ms;
            let boot = self.rng_gateways.gen_range(0..BOOT_PULL_MS.min(interval));
            self.queue.push(boot, Event::BootPull(i));
            let phase = self.rng_gateways.gen_range(0..interval);
            self.queue.push(boot + phase, Event::Pull(Puller::Gateway(i)));
        }
        for i in 0..self.devices.len() {
            let spec = &self.devices[i].spec;
            let phase = match spec.phase_ms {
                Some(p) => p,
                None => self.rng_devices.gen_range(0..(spec.interval_ms / 2).max(1)),
            };
            self.devices[i].phase = phase;
            let at = self.slot_time(i, 0);
            self.queue.push(at, Event::UplinkDue { dev: i, slot: 0 });
        }
        if let Some(a) = &self.attacker {
            let spec = a.spec.clone();
            if let Some(t) = spec.sniff_at_ms {
                self.queue.push(t, Event::Sniff);
            }
            if let Some(d) = &spec.disable {
                self.queue.push(d.at_ms, Event::Disable);
            }
            if let Some(t) = spec.impostor_at_ms {
                self.queue.push(t, Event::StartImpostor);
            }
            if let Some(j) = &spec.jammer {
                if let Some(t) = j.active_from_ms {
                    self.queue.push(t, Event::JammerOn);
                }
                if let Some(t) = j.active_until_ms {
                    self.queue.push(t, Event::JammerOff);
                }
            }
        }
    }

    /// Slot `k` fires at `phase + k * interval + U(0, jitter)`; jitter does
    /// not accumulate.
    fn slot_time(&mut self, dev: usize, slot: u32) -> TimeMs {
        let d = &self.devices[dev];
        let base = d.phase + slot as u64 * d.spec.interval_ms;
        let jitter = if d.spec.jitter_ms > 0 {
            self.rng_devices.gen_range(0..d.spec.jitter_ms)
        } else {
            0
        };
        base + jitter
    }

    pub fn run(mut self) -> (MetricsReport, Vec<Alert>, Vec<String>) {
        let horizon = self.sc.horizon_ms;
        while let Some(t) = self.queue.peek_time() {
            if t > horizon {
                break;
            }
            let (now, ev) = self.queue.pop().expect("peeked");
            *self.event_counts.entry(ev.name().to_string()).or_default() += 1;
            self.handle(now, ev);
        }
        let report = self.report();
        (report, self.alerts, self.trace.into_lines())
    }

    fn handle(&mut self, now: TimeMs, ev: Event) {
        match ev {
            Event::UplinkDue { dev, slot } => self.uplink_due(now, dev, slot),
            Event::Retransmit { dev, bytes } => {
                let (sf, freq, id) = {
                    let s = &self.devices[dev].spec;
                    (s.sf, s.freq, s.id.clone())
                };
                self.trace.record(now, "device_retransmit", json!({"dev": id}));
                self.transmit_radio(now, &id, bytes, sf, freq, Direction::Up, false);
            }
            Event::WindowsClosed { dev, cycle } => self.windows_closed(now, dev, cycle),
            Event::RadioEnd { tx } => self.radio_end(now, tx),
            Event::JamTrigger { tx } => self.jam_trigger(now, tx),
            Event::RecordComplete { tx } => self.record_complete(now, tx),
            Event::BootPull(i) => {
                self.keepalive(now, i);
            }
            Event::Pull(p) => self.pull(now, p),
            Event::Deliver { to, from, bytes } => self.deliver(now, &to, &from, &bytes),
            Event::Downlink(req) => self.downlink(now, &req),
            Event::Transmit {
                from,
                data,
                sf,
                freq,
                replay,
            } => {
                self.transmit_radio(now, &from, data, sf, freq, Direction::Down, replay);
            }
            Event::Sniff => self.sniff(now),
            Event::Disable => self.disable(now),
            Event::StartImpostor => self.start_impostor(now),
            Event::JammerOn => self.jammer_on(now),
            Event::JammerOff => self.jammer_off(now),
        }
    }

    fn uplink_due(&mut self, now: TimeMs, dev: usize, slot: u32) {
        let spec = self.devices[dev].spec.clone();
        if spec.max_uplinks.is_some_and(|m| slot >= m) {
            return;
        }
        let next = self.slot_time(dev, slot + 1);
        self.queue.push(next, Event::UplinkDue { dev, slot: slot + 1 });

        let payload: Vec<u8> = (0..spec.payload_len).map(|_| self.rng_devices.gen()).collect();
        let d = &mut self.devices[dev];
        let bytes = if spec.confirmed {
            match d.state.send_confirmed(payload, now) {
                Ok(b) => b,
                Err(e) => {
                    d.skipped += 1;
                    self.trace
                        .record(now, "device_skip", json!({"dev": spec.id, "reason": e.to_string()}));
                    return;
                }
            }
        } else {
            d.state.send_unconfirmed(payload)
        };
        let fcnt = d.state.fcnt_up.wrapping_sub(1);
        self.trace.record(
            now,
            "device_uplink",
            json!({"dev": spec.id, "fcnt": fcnt, "confirmed": spec.confirmed}),
        );
        self.transmit_radio(now, &spec.id, bytes, spec.sf, spec.freq, Direction::Up, false);
    }

    fn windows_closed(&mut self, now: TimeMs, dev: usize, cycle: u64) {
        let id = self.devices[dev].spec.id.clone();
        match self.devices[dev].state.windows_closed(cycle, now) {
            Expiry::Stale => {}
            Expiry::Retransmit(bytes) => {
                let (lo, hi) = self.devices[dev].spec.backoff_ms;
                let delay = if hi > lo {
                    self.rng_devices.gen_range(lo..hi)
                } else {
                    lo
                };
                self.queue.push(now + delay, Event::Retransmit { dev, bytes });
            }
            Expiry::PresumedLost(fcnt) => {
                self.trace
                    .record(now, "device_presumed_lost", json!({"dev": id, "fcnt": fcnt}));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn transmit_radio(
        &mut self,
        now: TimeMs,
        source: &str,
        payload: Vec<u8>,
        sf: SpreadingFactor,
        channel: f64,
        direction: Direction,
        replay: bool,
    ) -> TxId {
        let airtime = self.sc.airtime.airtime(sf, payload.len());
        let frame = RadioFrame {
            payload,
            sf,
            channel,
            source: source.to_string(),
            direction,
            start: now,
            airtime,
        };
        match direction {
            Direction::Up => self.radio.uplink_frames += 1,
            Direction::Down => self.radio.downlink_frames += 1,
        }
        self.trace.record(
            now,
            "radio_tx",
            json!({
                "source": source,
                "dir": dir_name(direction),
                "sf": sf.get(),
                "freq": channel,
                "airtime": airtime,
                "payload": b64(&frame.payload),
                "replay": replay,
            }),
        );
        let end = frame.end();
        let is_target = |a: &Att| {
            a.state
                .jammer
                .as_ref()
                .is_some_and(|j| frame.dev_addr().is_some_and(|d| j.targets.contains(&d)))
        };
        if direction == Direction::Up {
            if let Some(a) = &self.attacker {
                if let Some(j) = &a.state.jammer {
                    let cov = &self.channel.coverage;
                    match j.kind {
                        JammerKind::Triggered | JammerKind::Selective if cov.adjacent(&j.node, source) => {
                            let at = match j.kind {
                                JammerKind::Triggered => now + j.trigger_latency_ms,
                                _ => crate::attacks::jammer::selective_trigger_at(j, &frame),
                            };
                            if at < end {
                                let tx = self.ether.transmit(frame);
                                self.queue.push(at, Event::JamTrigger { tx });
                                self.queue.push(end, Event::RadioEnd { tx });
                                self.finish_tx(tx, replay);
                                return tx;
                            }
                        }
                        JammerKind::Wormhole if cov.adjacent(&a.spec.gateway.id, source) && is_target(a) => {
                            let rc = record_complete_at(&frame);
                            let tx = self.ether.transmit(frame);
                            self.queue.push(rc, Event::RecordComplete { tx });
                            self.queue.push(end, Event::RadioEnd { tx });
                            self.finish_tx(tx, replay);
                            return tx;
                        }
                        _ => {}
                    }
                }
            }
        }
        let tx = self.ether.transmit(frame);
        self.queue.push(end, Event::RadioEnd { tx });
        self.finish_tx(tx, replay);
        tx
    }

    fn finish_tx(&mut self, tx: TxId, replay: bool) {
        if replay {
            self.replays.insert(tx);
        }
    }

    fn jam_trigger(&mut self, now: TimeMs, tx: TxId) {
        let Some(a) = &self.attacker else { return };
        if !a.jammer_active {
            return;
        }
        let (Some(j), Some(frame)) = (a.state.jammer.as_ref(), self.ether.frame(tx)) else {
            return;
        };
        let burst = match j.kind {
            JammerKind::Triggered => triggered_burst(j, frame),
            JammerKind::Selective => selective_burst(j, frame),
            _ => None,
        };
        if let Some(b) = burst {
            self.trace.record(
                now,
                "jam_burst",
                json!({"jammer": b.jammer, "start": b.start, "end": b.end, "sf": b.sf.map(|s| s.get())}),
            );
            self.radio.jam_bursts += 1;
            self.ether.add_burst(b);
        }
    }

    /// The recorder near the sender holds the frame up to its PHY CRC.
    fn record_complete(&mut self, now: TimeMs, tx: TxId) {
        let Some(a) = &self.attacker else { return };
        let Some(frame) = self.ether.frame(tx).cloned() else {
            return;
        };
        let recorder = a.spec.gateway.id.clone();
        let cov = &self.channel.coverage;
        let collided = self.ether.collides_during(tx, &recorder, frame.start, now, cov);
        let jam = self.ether.jam_overlap(&frame, &recorder, frame.start, now, cov);
        let damaged = jam && self.rng_radio.gen_bool(self.channel.jam_success.get(frame.sf));
        let ok = !collided && !damaged;
        let a = self.attacker.as_mut().expect("checked");
        if ok {
            a.recorded.insert(tx);
            self.radio.recordings += 1;
        } else {
            self.radio.recordings_failed += 1;
        }
        self.trace.record(now, "wormhole_record", json!({"tx": tx, "ok": ok}));
        if !a.jammer_active {
            return;
        }
        let j = a.state.jammer.as_ref().expect("wormhole implies jammer");
        if let Some(b) = wormhole_burst(j, &frame, ok) {
            self.trace.record(
                now,
                "jam_burst",
                json!({"jammer": b.jammer, "start": b.start, "end": b.end, "sf": b.sf.map(|s| s.get())}),
            );
            self.radio.jam_bursts += 1;
            self.ether.add_burst(b);
        }
    }

    fn radio_end(&mut self, now: TimeMs, tx: TxId) {
        let Some(frame) = self.ether.frame(tx).cloned() else {
            return;
        };
        if frame.direction == Direction::Up {
            if let Some(Role::Device(i)) = self.roles.get(&frame.source).copied() {
                if let Some((cycle, close)) = self.devices[i].state.transmitted(now) {
                    self.queue.push(close, Event::WindowsClosed { dev: i, cycle });
                }
            }
        }
        let receivers: Vec<NodeId> = self.channel.coverage.neighbours(&frame.source).cloned().collect();
        for rcv in receivers {
            let Some(role) = self.roles.get(&rcv).copied() else {
                continue;
            };
            let wants = match (role, frame.direction) {
                (Role::Device(_), Direction::Down) => true,
                (Role::Gateway(i), Direction::Up) => self.gateways[i].state.alive,
                (Role::Attacker, Direction::Up) => {
                    self.attacker.as_ref().is_some_and(|a| a.state.mode != AttackMode::Idle)
                }
                _ => false,
            };
            if !wants {
                continue;
            }
            let cov = &self.channel.coverage;
            let collided = self.ether.collides(tx, &rcv, cov);
            let jam = self.ether.jam_overlap(&frame, &rcv, frame.start, frame.end(), cov);
            let rx = resolve_reception(&self.channel, &frame, &rcv, collided, jam, &mut self.rng_radio);
            self.radio.receptions += 1;
            self.radio.collided += collided as u64;
            let Some(rx) = rx else {
                self.radio.lost += 1;
                self.trace.record(now, "radio_lost", json!({"tx": tx, "at": rcv}));
                continue;
            };
            self.radio.jammed += rx.jammed as u64;
            self.trace.record(
                now,
                "radio_rx",
                json!({"tx": tx, "at": rcv, "crc_ok": rx.crc_ok, "jammed": rx.jammed, "collided": collided}),
            );
            match role {
                Role::Device(i) => self.device_rx(now, i, tx, &rx),
                Role::Gateway(i) => {
                    if let Some(d) = self.gateways[i].state.on_radio_rx(&rx, &mut self.rng_tokens) {
                        let from = self.gateways[i].spec.address.clone();
                        self.send_datagram(now, &from, &self.sc.server.address.clone(), &d);
                    }
                }
                Role::Attacker => self.impostor_rx(now, tx, &rx),
                Role::Jammer => {}
            }
        }
        self.ether.prune(now.saturating_sub(ETHER_MEMORY_MS));
    }

    fn device_rx(&mut self, now: TimeMs, i: usize, tx: TxId, rx: &crate::radio::Reception) {
        if !rx.crc_ok {
            return;
        }
        let id = self.devices[i].spec.id.clone();
        let outcome = self.devices[i]
            .state
            .handle_downlink(rx.frame.start, &rx.frame.payload, now);
        let verdict = match &outcome {
            DownlinkOutcome::Acked { fcnt, down_fcnt } => {
                self.trace.record(
                    now,
                    "device_ack",
                    json!({"dev": id, "fcnt": fcnt, "down_fcnt": down_fcnt}),
                );
                Some(AckVerdict::Accepted)
            }
            DownlinkOutcome::Rejected(v) => {
                self.trace
                    .record(now, "device_ack_rejected", json!({"dev": id, "verdict": v}));
                Some(*v)
            }
            DownlinkOutcome::Ignored => None,
        };
        if self.replays.contains(&tx) {
            if let Some(a) = self.attacker.as_mut() {
                a.state.ack_spoof.finish(verdict);
                self.trace
                    .record(now, "spoof_outcome", json!({"dev": id, "verdict": verdict}));
            }
        }
    }

    fn impostor_rx(&mut self, now: TimeMs, tx: TxId, rx: &crate::radio::Reception) {
        let Some(a) = self.attacker.as_mut() else {
            return;
        };
        let recorded = a.recorded.contains(&tx);
        let action = match a.state.impostor_forward(rx, recorded, &mut self.rng_tokens) {
            Ok(x) => x,
            Err(e) => {
                self.trace.record(
                    now,
                    "attack_rejected",
                    json!({"step": "forward", "error": e.to_string()}),
                );
                return;
            }
        };
        let address = a.spec.gateway.address.clone();
        let node = a.spec.gateway.id.clone();
        match action {
            ForwardAction::Push(d) => {
                let server = self.sc.server.address.clone();
                self.send_datagram(now, &address, &server, &d);
            }
            ForwardAction::Replay(RecordedAck { dev, bytes, freq, sf }) => {
                self.trace
                    .record(now, "spoof_replay", json!({"dev": dev, "payload": b64(&bytes)}));
                let at = rx.frame.end() + self.sc.rx_windows.rx1_delay_ms;
                self.queue.push(
                    at,
                    Event::Transmit {
                        from: node,
                        data: bytes,
                        sf,
                        freq,
                        replay: true,
                    },
                );
            }
            ForwardAction::Ignore => {}
        }
    }

    fn link_of(&self, addr: &str) -> Option<&LinkSpec> {
        match self.endpoints.get(addr)? {
            Endpoint::Server => None,
            Endpoint::Gateway(i) => Some(&self.gateways[*i].spec.link),
            Endpoint::Attacker => self.attacker.as_ref().map(|a| &a.spec.gateway.link),
        }
    }

    fn send_datagram(&mut self, now: TimeMs, from: &str, to: &str, d: &Datagram) {
        let bytes = match encode_datagram(d) {
            Ok(b) => b,
            Err(e) => {
                self.trace
                    .record(now, "udp_encode_error", json!({"from": from, "error": e.to_string()}));
                return;
            }
        };
        // The gateway side of the link decides its properties.
        let gw_side = if self.endpoints.get(from) == Some(&Endpoint::Server) {
            to
        } else {
            from
        };
        let link = self.link_of(gw_side).cloned().unwrap_or_default();
        if let Some(a) = self.attacker.as_mut() {
            let victim_addr = &self.gateways[a.victim].spec.address;
            if from == victim_addr && link.eavesdroppable && !link.authenticated {
                a.overheard.push(d.clone());
            }
        }
        self.trace.record(
            now,
            "udp_send",
            json!({
                "from": from,
                "to": to,
                "kind": d.kind,
                "token": d.token.0,
                "eui": d.eui,
                "len": bytes.len(),
            }),
        );
        self.queue.push(
            now + link.latency_ms,
            Event::Deliver {
                to: to.to_string(),
                from: from.to_string(),
                bytes,
            },
        );
    }

    fn deliver(&mut self, now: TimeMs, to: &str, from: &str, bytes: &[u8]) {
        match self.endpoints.get(to).copied() {
            Some(Endpoint::Server) => self.server_rx(now, from, bytes),
            Some(Endpoint::Gateway(i)) => {
                let Ok(d) = decode_datagram(bytes) else { return };
                if d.kind != DatagramKind::PullResp {
                    return;
                }
                match self.gateways[i].state.on_pull_resp(&d) {
                    Ok(Some((tx, ack))) => {
                        let (node, addr) = (self.gateways[i].spec.id.clone(), self.gateways[i].spec.address.clone());
                        self.transmit_radio(now, &node, tx.data, tx.sf, tx.freq, Direction::Down, false);
                        let server = self.sc.server.address.clone();
                        self.send_datagram(now, &addr, &server, &ack);
                    }
                    Ok(None) => {
                        self.trace
                            .record(now, "gateway_down_drop", json!({"gateway": self.gateways[i].spec.id}));
                    }
                    Err(e) => {
                        self.trace.record(now, "gateway_error", json!({"error": e.to_string()}));
                    }
                }
            }
            Some(Endpoint::Attacker) => {
                let Ok(d) = decode_datagram(bytes) else { return };
                if d.kind != DatagramKind::PullResp {
                    return;
                }
                let a = self.attacker.as_mut().expect("endpoint exists");
                match a.state.on_pull_resp(&d) {
                    Ok(action) => {
                        let (node, addr) = (a.spec.gateway.id.clone(), a.spec.gateway.address.clone());
                        self.trace.record(
                            now,
                            "impostor_downlink",
                            json!({"action": format!("{:?}", action.ack_action).to_lowercase()}),
                        );
                        if let Some(tx) = action.transmit {
                            self.transmit_radio(now, &node, tx.data, tx.sf, tx.freq, Direction::Down, false);
                        }
                        let server = self.sc.server.address.clone();
                        self.send_datagram(now, &addr, &server, &action.tx_ack);
                    }
                    Err(e) => {
                        self.trace.record(
                            now,
                            "attack_rejected",
                            json!({"step": "pull_resp", "error": e.to_string()}),
                        );
                    }
                }
            }
            None => {
                self.trace.record(now, "udp_unreachable", json!({"to": to}));
            }
        }
    }

    fn server_rx(&mut self, now: TimeMs, from: &str, bytes: &[u8]) {
        let authenticated = self.link_of(from).is_some_and(|l| l.authenticated);
        let inbound = self.server.receive(now, bytes, from, authenticated);
        for note in &inbound.notes {
            let v = serde_json::to_value(note).expect("note is plain data");
            self.trace.record(now, "server", v);
        }
        if let Some(a) = self.attacker.as_mut() {
            let victim_eui = self.gateways[a.victim].spec.eui;
            if let Some(from_t) = a.attack_from.filter(|&t| now >= t) {
                a.window.from = from_t;
                for o in inbound.observations.iter().filter(|o| o.eui == victim_eui) {
                    if let Some(stat) = o.stat {
                        a.window.packets += 1;
                        a.window.corrupt += (stat == crate::codec::CrcStatus::Fail) as u64;
                    }
                }
            }
        }
        for o in &inbound.observations {
            match self.ids.observe(o) {
                Ok(alerts) => {
                    for al in alerts {
                        let v = serde_json::to_value(&al).expect("alert is plain data");
                        self.trace.record(now, "alert", v);
                        self.alerts.push(al);
                    }
                }
                Err(e) => self.trace.record(now, "ids_error", json!({"error": e.to_string()})),
            }
        }
        let server = self.sc.server.address.clone();
        for r in &inbound.replies {
            self.send_datagram(now, &server, from, r);
        }
        for req in inbound.downlinks {
            self.queue.push(req.at, Event::Downlink(req));
        }
    }

    fn downlink(&mut self, now: TimeMs, req: &DownlinkRequest) {
        match self.server.send_downlink(req, &mut self.rng_tokens) {
            Ok(dl) => {
                self.downlinks.push(DownlinkLogEntry {
                    time: now,
                    dev: dl.dev,
                    down_fcnt: dl.down_fcnt,
                    acked_fcnt: dl.acked_fcnt,
                    eui: dl.eui,
                    address: dl.address.clone(),
                });
                let server = self.sc.server.address.clone();
                self.send_datagram(now, &server, &dl.address, &dl.datagram);
            }
            Err(e) => {
                self.trace
                    .record(now, "downlink_dropped", json!({"dev": req.dev, "error": e.to_string()}));
            }
        }
    }

    /// Sends one PULL_DATA; false when the gateway is down.
    fn keepalive(&mut self, now: TimeMs, i: usize) -> bool {
        let Some(d) = self.gateways[i].state.keepalive(&mut self.rng_tokens) else {
            return false;
        };
        let from = self.gateways[i].spec.address.clone();
        let server = self.sc.server.address.clone();
        self.send_datagram(now, &from, &server, &d);
        true
    }

    fn pull(&mut self, now: TimeMs, p: Puller) {
        match p {
            Puller::Gateway(i) => {
                if !self.keepalive(now, i) {
                    return;
                }
                let spec = &self.gateways[i].spec;
                let gap = pull_gap(spec.pull_interval_ms, spec.pull_jitter, &mut self.rng_gateways);
                self.queue.push(now + gap, Event::Pull(p));
            }
            Puller::Impostor => {
                let Some(a) = self.attacker.as_mut() else { return };
                let Ok(d) = a.state.pull_flood(&mut self.rng_tokens) else {
                    return;
                };
                let from = a.spec.gateway.address.clone();
                let interval = a.state.pull_interval().expect("impostor active");
                let gap = pull_gap(interval, a.spec.pull_jitter, &mut self.rng_attacker);
                let server = self.sc.server.address.clone();
                self.send_datagram(now, &from, &server, &d);
                self.queue.push(now + gap, Event::Pull(p));
            }
        }
    }

    fn step(&mut self, now: TimeMs, step: &str, result: Result<String, String>) {
        let text = match &result {
            Ok(s) | Err(s) => s.clone(),
        };
        let ok = result.is_ok();
        if let Some(a) = self.attacker.as_mut() {
            a.steps
                .insert(step.to_string(), if ok { "ok".into() } else { text.clone() });
        }
        self.trace
            .record(now, "attack_step", json!({"step": step, "ok": ok, "detail": text}));
    }

    fn sniff(&mut self, now: TimeMs) {
        let Some(a) = self.attacker.as_ref() else { return };
        let victim = &self.gateways[a.victim].spec;
        let sources = a.spec.eui_sources.clone();
        let overheard = a.overheard.clone();
        let location = victim.location.clone();
        for source in sources {
            let got = match source {
                EuiSource::Sniff => sniff_eui(&overheard),
                EuiSource::Registry => {
                    if self.sc.registry_public {
                        eui_from_registry(&self.server.registry.export(), &location)
                    } else {
                        Err(crate::attacks::AttackError::NotInRegistry)
                    }
                }
            };
            let step = match source {
                EuiSource::Sniff => "sniff_eui",
                EuiSource::Registry => "registry_eui",
            };
            match got {
                Ok(eui) => {
                    self.attacker.as_mut().expect("checked").state.steal(eui, source);
                    self.step(now, step, Ok(eui.to_string()));
                    return;
                }
                Err(e) => self.step(now, step, Err(e.to_string())),
            }
        }
    }

    fn disable(&mut self, now: TimeMs) {
        let Some(a) = self.attacker.as_ref() else { return };
        let Some(d) = a.spec.disable.clone() else { return };
        match d.method {
            DisableMethod::Disconnect => {
                let v = a.victim;
                let protected = self.gateways[v].spec.physically_protected;
                let r = disconnect_gateway(&mut self.gateways[v].state, protected);
                if r.is_err() {
                    self.attacker.as_mut().expect("checked").state.rejected_steps += 1;
                }
                self.step(
                    now,
                    "disconnect",
                    r.map(|o| format!("{o:?}").to_lowercase()).map_err(|e| e.to_string()),
                );
            }
            DisableMethod::Jam => {
                self.jammer_on(now);
                self.step(now, "jam", Ok("jammer on".into()));
            }
        }
    }

    fn jammer_on(&mut self, now: TimeMs) {
        let horizon = self.sc.horizon_ms;
        let Some(a) = self.attacker.as_mut() else { return };
        let Some(spec) = a.spec.jammer.clone() else { return };
        if a.jammer_active {
            return;
        }
        a.jammer_active = true;
        self.trace
            .record(now, "jammer", json!({"active": true, "kind": spec.config.kind}));
        if spec.config.kind == JammerKind::Constant {
            let until = spec.active_until_ms.unwrap_or(horizon + 1);
            self.radio.jam_bursts += 1;
            self.ether.add_burst(constant_burst(&spec.config, now, until));
        }
    }

    fn jammer_off(&mut self, now: TimeMs) {
        if let Some(a) = self.attacker.as_mut() {
            a.jammer_active = false;
            self.trace.record(now, "jammer", json!({"active": false}));
        }
    }

    fn start_impostor(&mut self, now: TimeMs) {
        let Some(a) = self.attacker.as_mut() else { return };
        let victim = &self.gateways[a.victim].state;
        let disabled = !victim.alive || a.jammer_active;
        let mode = match a.spec.disable.as_ref().map(|d| d.method) {
            Some(DisableMethod::Jam) => AttackMode::ImpostorJam,
            _ => AttackMode::ImpostorDisconnect,
        };
        let r = a.state.start_impostor(mode, victim, disabled);
        if r.is_ok() {
            a.started_at = Some(now);
            let interval = a.state.pull_interval().expect("started");
            let first = self.rng_attacker.gen_range(0..interval);
            self.queue.push(now + first, Event::Pull(Puller::Impostor));
        }
        self.step(
            now,
            "start_impostor",
            r.map(|_| format!("{mode:?}").to_lowercase()).map_err(|e| e.to_string()),
        );
    }

    fn report(&self) -> MetricsReport {
        let devices = self
            .devices
            .iter()
            .map(|d| {
                let dev = d.spec.dev_addr;
                let log = d.state.log().to_vec();
                let mut genuine = 0;
                let mut spoofed = 0;
                let mut lost = 0;
                let mut spoof_inversion = false;
                for r in &log {
                    match r.status {
                        UplinkStatus::Acked { down_fcnt, .. } => {
                            let acked = self.server.acked_for(dev, down_fcnt);
                            if acked == Some(r.fcnt) {
                                genuine += 1;
                            } else {
                                spoofed += 1;
                                // The ACK belonged to an uplink the device wrote off
                                // although the server had it, and this uplink never
                                // reached the server.
                                let swapped = acked.is_some_and(|a| {
                                    self.server.is_delivered(dev, a)
                                        && log.iter().any(|o| {
                                            o.fcnt == a && matches!(o.status, UplinkStatus::PresumedLost { .. })
                                        })
                                });
                                if swapped && !self.server.is_delivered(dev, r.fcnt) {
                                    spoof_inversion = true;
                                }
                            }
                        }
                        UplinkStatus::PresumedLost { .. } => lost += 1,
                        UplinkStatus::Pending => {}
                    }
                }
                let sent = log.len() as u64 + d.state.unconfirmed_sent;
                let transmissions = log.iter().map(|r| r.transmissions as u64).sum::<u64>() + d.state.unconfirmed_sent;
                let delivered = (0..d.state.fcnt_up)
                    .filter(|&f| self.server.is_delivered(dev, f))
                    .count() as u64;
                DeviceReport {
                    id: d.spec.id.clone(),
                    dev_addr: dev,
                    uplinks_sent: sent,
                    transmissions,
                    delivered,
                    acked_genuine: genuine,
                    acked_spoofed: spoofed,
                    presumed_lost: lost,
                    inversion: spoof_inversion,
                    skipped_slots: d.skipped,
                    verdicts: d.state.verdicts,
                    log,
                }
            })
            .collect();
        let gateways = self
            .gateways
            .iter()
            .map(|g| {
                let c = g.state.counters;
                GatewayReport {
                    id: g.spec.id.clone(),
                    eui: g.spec.eui,
                    address: g.spec.address.clone(),
                    alive: g.state.alive,
                    counters: c,
                    corrupt_fraction: if c.receptions == 0 {
                        0.0
                    } else {
                        c.corrupt_receptions as f64 / c.receptions as f64
                    },
                }
            })
            .collect();
        let attack = self.attacker.as_ref().map(|a| self.attack_report(a));
        let mut ids = IdsReport::default();
        for al in &self.alerts {
            ids.total += 1;
            *ids.by_kind.entry(al.detector).or_default() += 1;
        }
        ids.correlated = ids.by_kind.contains_key(&DetectorKind::CorrelatedImpersonation);
        MetricsReport {
            scenario: self.sc.name.clone(),
            seed: self.sc.seed,
            horizon_ms: self.sc.horizon_ms,
            mic_mode: self.sc.mic_mode,
            route_policy: self.sc.route_policy,
            devices,
            gateways,
            server: ServerReport {
                counters: self.server.counters.clone(),
                corrupt_fraction: self.server.counters.corrupt_fraction(),
                routes: self.server.routes().clone(),
            },
            radio: self.radio.clone(),
            attack,
            ids,
            downlinks: self.downlinks.clone(),
            event_counts: self.event_counts.clone(),
        }
    }

    fn attack_report(&self, a: &Att) -> AttackReport {
        let victim_eui: GatewayEui = self.gateways[a.victim].spec.eui;
        let window = a.attack_from.map(|from| {
            let mut w = a.window.clone();
            w.from = from;
            w.fraction = if w.packets == 0 {
                0.0
            } else {
                w.corrupt as f64 / w.packets as f64
            };
            w
        });
        let route_share = a.started_at.map(|t| {
            let from = t + self.sc.route_share_warmup_ms;
            let relevant: Vec<_> = self
                .downlinks
                .iter()
                .filter(|d| d.eui == victim_eui && d.time >= from)
                .collect();
            let to_attacker = relevant.iter().filter(|d| d.address == a.spec.gateway.address).count() as u64;
            let n = relevant.len() as u64;
            RouteShare {
                from,
                downlinks: n,
                to_attacker,
                share: if n == 0 { 0.0 } else { to_attacker as f64 / n as f64 },
            }
        });
        AttackReport {
            mode: a.state.mode,
            stolen_eui: a.state.stolen_eui,
            eui_source: a.state.eui_source,
            steps: a.steps.clone(),
            impostor_started_at: a.started_at,
            impostor_pull_interval: a.state.pull_interval(),
            rejected_steps: a.state.rejected_steps,
            jammer_active: a.jammer_active,
            spoof_phase: a.state.ack_spoof.phase,
            spoof_outcome: a.state.ack_spoof.outcome,
            dropped_acks: a.state.ack_spoof.dropped_acks,
            window,
            route_share,
        }
    }
}

/// The network server of a scenario: config, registered gateways and device keys.
pub fn build_server(sc: &Scenario) -> ServerState {
    let config = ServerConfig {
        address: sc.server.address.clone(),
        route_policy: sc.route_policy,
        require_registration: sc.server.require_registration,
        require_authenticated_link: sc.server.require_authenticated_link,
        dedup_window_ms: sc.server.dedup_window_ms,
        most_frequent_window_ms: sc.server.most_frequent_window_ms,
        rx1_delay_ms: sc.rx_windows.rx1_delay_ms,
        downlink_lead_ms: sc.server.downlink_lead_ms,
    };
    let mut registry = Registry::new();
    for g in sc.gateways.iter().filter(|g| g.registered) {
        registry
            .register(RegistryEntry::new(g.eui, &g.id, &g.location))
            .expect("EUIs are unique");
    }
    let mut server = ServerState::new(config, registry);
    for d in &sc.devices {
        server.add_device(
            d.dev_addr,
            NwkSKey::from_hex(&d.key).expect("validated key"),
            sc.mic_mode,
        );
    }
    server
}

/// Runs one point of a scenario.
pub fn run_point(point: &Point, opts: RunOptions, multi: bool) -> PointOutput {
    let label = multi.then(|| point.label.clone());
    let (report, alerts, trace) = Engine::new(point.scenario.clone(), opts, label).run();
    PointOutput {
        label: point.label.clone(),
        params: point.params.clone(),
        report,
        alerts,
        trace,
    }
}

/// Runs every point of a validated scenario.
pub fn run_with(sc: &Scenario, opts: RunOptions) -> RunOutput {
    let points = sc.points();
    let multi = points.len() > 1;
    RunOutput {
        scenario: sc.name.clone(),
        seed: sc.seed,
        points: points.iter().map(|p| run_point(p, opts, multi)).collect(),
    }
}

/// Runs with tracing on.
pub fn run(sc: &Scenario) -> RunOutput {
    run_with(sc, RunOptions { trace: true })
}

/// Untraced single-point convenience used by batch experiments.
pub fn run_report(sc: &Scenario) -> MetricsReport {
    let mut sc = sc.clone();
    sc.sweep = None;
    Engine::new(sc, RunOptions::default(), None).run().0
}
