//! Attacker toolkit: identifier theft, gateway disabling, impostor
//! forwarding, PULL_DATA flooding and ACK spoofing.
//!
//! The steps must happen in order. The impostor refuses to forward or pull
//! until it holds a stolen EUI and the victim gateway has been disabled.

pub mod jammer;
pub mod spoof;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CrcStatus, Datagram, DatagramKind, GatewayEui, TxPacketMeta};
use crate::mac::{parse_frame, DevAddr};
use crate::nodes::gateway::{CrcForwardPolicy, GatewayError, GatewayState};
use crate::nodes::registry::{lookup_by_location, ExportedGateway};
use crate::nodes::Addr;
use crate::radio::{Reception, TimeMs};

pub use jammer::{JammerConfig, JammerKind};
pub use spoof::{AckAction, AckSpoofState, RecordedAck, SpoofPhase, UplinkAction};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("no PUSH_DATA or PULL_DATA observed on the gateway link")]
    NothingObserved,
    #[error("no public registry entry at the victim's location")]
    NotInRegistry,
    #[error("gateway {0} is physically protected")]
    PhysicallyProtected(String),
    #[error("step out of order: {0}")]
    StepOrder(&'static str),
    #[error("{0:?} jamming needs at least one target DevAddr")]
    EmptyTargets(JammerKind),
    #[error("scan fraction {0} outside [0, 1]")]
    ScanFraction(f64),
    #[error("pull flood factor {0} below 1")]
    FloodFactor(f64),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Idle,
    ImpostorDisconnect,
    ImpostorJam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EuiSource {
    Sniff,
    Registry,
}

/// EUI from the first PUSH_DATA or PULL_DATA seen on an eavesdropped link.
pub fn sniff_eui(observed: &[Datagram]) -> Result<GatewayEui, AttackError> {
    observed
        .iter()
        .filter(|d| matches!(d.kind, DatagramKind::PushData | DatagramKind::PullData))
        .find_map(|d| d.eui)
        .ok_or(AttackError::NothingObserved)
}

/// EUI of the gateway listed at `location` in a public export.
pub fn eui_from_registry(export: &[ExportedGateway], location: &str) -> Result<GatewayEui, AttackError> {
    lookup_by_location(export, location).ok_or(AttackError::NotInRegistry)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DisconnectOutcome {
    Disabled,
    AlreadyDown,
}

/// Cuts power or uplink of an accessible gateway.
pub fn disconnect_gateway(gw: &mut GatewayState, physically_protected: bool) -> Result<DisconnectOutcome, AttackError> {
    if physically_protected {
        return Err(AttackError::PhysicallyProtected(gw.eui.registry_name()));
    }
    if !gw.alive {
        return Ok(DisconnectOutcome::AlreadyDown);
    }
    gw.alive = false;
    Ok(DisconnectOutcome::Disabled)
}

/// What the impostor does with one uplink it heard.
#[derive(Debug, Clone, PartialEq)]
pub enum ForwardAction {
    Push(Datagram),
    Replay(RecordedAck),
    Ignore,
}

/// What the impostor does with one PULL_RESP.
#[derive(Debug, Clone, PartialEq)]
pub struct DownlinkAction {
    pub transmit: Option<TxPacketMeta>,
    pub tx_ack: Datagram,
    pub ack_action: AckAction,
}

#[derive(Debug, Clone)]
pub struct AttackerState {
    pub address: Addr,
    pub stolen_eui: Option<GatewayEui>,
    pub eui_source: Option<EuiSource>,
    pub mode: AttackMode,
    pub jammer: Option<JammerConfig>,
    pub ack_spoof: AckSpoofState,
    pub pull_flood_factor: f64,
    impostor: Option<GatewayState>,
    last_forwarded: BTreeMap<DevAddr, u16>,
    pub rejected_steps: u64,
}

impl AttackerState {
    pub fn new(
        address: Addr,
        jammer: Option<JammerConfig>,
        ack_spoof: AckSpoofState,
        pull_flood_factor: f64,
    ) -> Result<Self, AttackError> {
        if pull_flood_factor.is_nan() || pull_flood_factor < 1.0 {
            return Err(AttackError::FloodFactor(pull_flood_factor));
        }
        if let Some(j) = &jammer {
            j.validate()?;
        }
        Ok(AttackerState {
            address,
            stolen_eui: None,
            eui_source: None,
            mode: AttackMode::Idle,
            jammer,
            ack_spoof,
            pull_flood_factor,
            impostor: None,
            last_forwarded: BTreeMap::new(),
            rejected_steps: 0,
        })
    }

    pub fn steal(&mut self, eui: GatewayEui, source: EuiSource) {
        self.stolen_eui = Some(eui);
        self.eui_source = Some(source);
    }

    /// Brings up the impostor gateway. `victim_disabled` is true when the
    /// victim is dead or under active jamming.
    pub fn start_impostor(
        &mut self,
        mode: AttackMode,
        victim: &GatewayState,
        victim_disabled: bool,
    ) -> Result<(), AttackError> {
        let outcome = self.try_start(mode, victim, victim_disabled);
        if outcome.is_err() {
            self.rejected_steps += 1;
        }
        outcome
    }

    fn try_start(&mut self, mode: AttackMode, victim: &GatewayState, victim_disabled: bool) -> Result<(), AttackError> {
        if mode == AttackMode::Idle {
            return Err(AttackError::StepOrder("impostor mode required"));
        }
        let eui = self
            .stolen_eui
            .ok_or(AttackError::StepOrder("gateway EUI not yet obtained"))?;
        if !victim_disabled {
            return Err(AttackError::StepOrder("victim gateway still operational"));
        }
        let interval = ((victim.pull_interval as f64 / self.pull_flood_factor).round() as TimeMs).max(1);
        self.impostor = Some(GatewayState::new(
            eui,
            self.address.clone(),
            victim.server.clone(),
            interval,
            CrcForwardPolicy::Drop,
        )?);
        self.mode = mode;
        Ok(())
    }

    pub fn impostor(&self) -> Option<&GatewayState> {
        self.impostor.as_ref()
    }

    pub fn pull_interval(&self) -> Option<TimeMs> {
        self.impostor.as_ref().map(|g| g.pull_interval)
    }

    fn active(&mut self) -> Result<&mut GatewayState, AttackError> {
        if self.mode == AttackMode::Idle || self.impostor.is_none() {
            self.rejected_steps += 1;
            return Err(AttackError::StepOrder("impostor not active"));
        }
        Ok(self.impostor.as_mut().expect("checked"))
    }

    /// Forwards an overheard uplink under the stolen EUI. In jam mode only
    /// frames the wormhole recorder captured intact are forwarded.
    pub fn impostor_forward(
        &mut self,
        rx: &Reception,
        recorded: bool,
        rng: &mut impl Rng,
    ) -> Result<ForwardAction, AttackError> {
        let mode = self.mode;
        self.active()?;
        let usable = match mode {
            AttackMode::ImpostorJam => recorded,
            _ => rx.crc_ok || recorded,
        };
        if !usable {
            return Ok(ForwardAction::Ignore);
        }
        let Ok(frame) = parse_frame(&rx.frame.payload) else {
            return Ok(ForwardAction::Ignore);
        };
        if let UplinkAction::SuppressAndReplay(rec) = self.ack_spoof.on_uplink(&frame) {
            return Ok(ForwardAction::Replay(rec));
        }
        self.last_forwarded.insert(frame.dev_addr, frame.fcnt);
        let gw = self.impostor.as_mut().expect("active");
        Ok(ForwardAction::Push(gw.push(CrcStatus::Ok, rx, rng)))
    }

    /// One flood keepalive under the stolen EUI.
    pub fn pull_flood(&mut self, rng: &mut impl Rng) -> Result<Datagram, AttackError> {
        let gw = self.active()?;
        Ok(gw.keepalive(rng).expect("impostor is always alive"))
    }

    /// Handles a PULL_RESP routed to the impostor. A TX_ACK is returned in
    /// every case so the server believes the downlink went out.
    pub fn on_pull_resp(&mut self, d: &Datagram) -> Result<DownlinkAction, AttackError> {
        let gw = self.active()?;
        let (tx, tx_ack) = gw.on_pull_resp(d)?.expect("impostor is always alive");
        let ack_action = match parse_frame(&tx.data) {
            Ok(frame) => {
                let last = self.last_forwarded.get(&frame.dev_addr).copied();
                let rec = RecordedAck {
                    dev: frame.dev_addr,
                    bytes: tx.data.clone(),
                    freq: tx.freq,
                    sf: tx.sf,
                };
                self.ack_spoof.on_ack(&frame, rec, last)
            }
            Err(_) => AckAction::Transmit,
        };
        Ok(DownlinkAction {
            transmit: (ack_action == AckAction::Transmit).then_some(tx),
            tx_ack,
            ack_action,
        })
    }
}
