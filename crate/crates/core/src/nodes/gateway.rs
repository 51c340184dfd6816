//! Packet-forwarding gateway: radio side in, UDP side out.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{
    encode_rxpk, parse_txpk, CodecError, CrcStatus, Datagram, DatagramKind, GatewayEui, RxPacketMeta, Token,
    TxPacketMeta,
};
use crate::nodes::Addr;
use crate::radio::{Reception, TimeMs};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("pull interval must be positive")]
    ZeroPullInterval,
    #[error("expected PULL_RESP, got {0}")]
    NotPullResp(DatagramKind),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CrcForwardPolicy {
    #[default]
    ForwardWithStat,
    Drop,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GatewayCounters {
    pub receptions: u64,
    pub corrupt_receptions: u64,
    pub pushes: u64,
    pub corrupt_pushes: u64,
    pub pulls: u64,
    pub downlinks: u64,
}

#[derive(Debug, Clone)]
pub struct GatewayState {
    pub eui: GatewayEui,
    pub address: Addr,
    pub server: Addr,
    pub pull_interval: TimeMs,
    pub crc_forward_policy: CrcForwardPolicy,
    pub alive: bool,
    pub counters: GatewayCounters,
}

impl GatewayState {
    pub fn new(
        eui: GatewayEui,
        address: Addr,
        server: Addr,
        pull_interval: TimeMs,
        crc_forward_policy: CrcForwardPolicy,
    ) -> Result<Self, GatewayError> {
        if pull_interval == 0 {
            return Err(GatewayError::ZeroPullInterval);
        }
        Ok(GatewayState {
            eui,
            address,
            server,
            pull_interval,
            crc_forward_policy,
            alive: true,
            counters: GatewayCounters::default(),
        })
    }

    /// One PUSH_DATA per reception. Corrupt receptions follow the CRC policy.
    pub fn on_radio_rx(&mut self, rx: &Reception, rng: &mut impl Rng) -> Option<Datagram> {
        if !self.alive {
            return None;
        }
        self.counters.receptions += 1;
        if !rx.crc_ok {
            self.counters.corrupt_receptions += 1;
        }
        let stat = if rx.crc_ok {
            CrcStatus::Ok
        } else {
            match self.crc_forward_policy {
                CrcForwardPolicy::ForwardWithStat => CrcStatus::Fail,
                CrcForwardPolicy::Drop => return None,
            }
        };
        Some(self.push(stat, rx, rng))
    }

    /// PUSH_DATA for a reception with an explicit status, bypassing the
    /// CRC policy. Used by impostors replaying recorded frames.
    pub fn push(&mut self, stat: CrcStatus, rx: &Reception, rng: &mut impl Rng) -> Datagram {
        self.counters.pushes += 1;
        if stat == CrcStatus::Fail {
            self.counters.corrupt_pushes += 1;
        }
        let body = encode_rxpk(&[RxPacketMeta {
            stat,
            freq: rx.frame.channel,
            sf: rx.frame.sf,
            data: rx.frame.payload.clone(),
        }]);
        Datagram::push_data(Token(rng.gen()), self.eui, body)
    }

    pub fn keepalive(&mut self, rng: &mut impl Rng) -> Option<Datagram> {
        if !self.alive {
            return None;
        }
        self.counters.pulls += 1;
        Some(Datagram::pull_data(Token(rng.gen()), self.eui))
    }

    /// Unpacks a PULL_RESP into the packet to transmit and the TX_ACK that
    /// answers it. `None` when the gateway is down.
    pub fn on_pull_resp(&mut self, d: &Datagram) -> Result<Option<(TxPacketMeta, Datagram)>, GatewayError> {
        if d.kind != DatagramKind::PullResp {
            return Err(GatewayError::NotPullResp(d.kind));
        }
        if !self.alive {
            return Ok(None);
        }
        let tx = parse_txpk(&d.body)?;
        self.counters.downlinks += 1;
        Ok(Some((tx, Datagram::tx_ack(d.token, self.eui, Vec::new()))))
    }

    pub fn corrupt_fraction(&self) -> f64 {
        if self.counters.pushes == 0 {
            0.0
        } else {
            self.counters.corrupt_pushes as f64 / self.counters.pushes as f64
        }
    }
}
