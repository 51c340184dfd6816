//! Class A end device sending confirmed uplinks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mac::{
    build_uplink, parse_frame, serialize_frame, verify_ack, AckVerdict, DevAddr, MacFrame, MicMode, NwkSKey,
};
use crate::radio::TimeMs;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DeviceError {
    #[error("confirmed uplink {0} is still awaiting its ACK")]
    Busy(u16),
}

/// Receive-window timing relative to the end of an uplink.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RxWindows {
    pub rx1_delay_ms: TimeMs,
    pub rx2_delay_ms: TimeMs,
    pub width_ms: TimeMs,
}

impl Default for RxWindows {
    fn default() -> Self {
        RxWindows {
            rx1_delay_ms: 1000,
            rx2_delay_ms: 2000,
            width_ms: 200,
        }
    }
}

impl RxWindows {
    pub fn open_at(&self, uplink_end: TimeMs) -> [(TimeMs, TimeMs); 2] {
        [
            (
                uplink_end + self.rx1_delay_ms,
                uplink_end + self.rx1_delay_ms + self.width_ms,
            ),
            (
                uplink_end + self.rx2_delay_ms,
                uplink_end + self.rx2_delay_ms + self.width_ms,
            ),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum UplinkStatus {
    Pending,
    Acked { down_fcnt: u16, at: TimeMs },
    PresumedLost { at: TimeMs },
}

/// Device-side view of one confirmed uplink.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UplinkRecord {
    pub fcnt: u16,
    pub first_sent: TimeMs,
    pub transmissions: u32,
    #[serde(flatten)]
    pub status: UplinkStatus,
}

#[derive(Debug, Clone)]
struct Pending {
    frame: MacFrame,
    bytes: Vec<u8>,
    retransmissions: u32,
    windows: Option<[(TimeMs, TimeMs); 2]>,
    cycle: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DownlinkOutcome {
    Acked {
        fcnt: u16,
        down_fcnt: u16,
    },
    Rejected(AckVerdict),
    /// Not for this device, outside a window, or nothing pending.
    Ignored,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expiry {
    /// Window event from an earlier transmission cycle.
    Stale,
    Retransmit(Vec<u8>),
    PresumedLost(u16),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct VerdictCounts {
    pub accepted: u64,
    pub rejected_counter: u64,
    pub rejected_mic: u64,
}

#[derive(Debug, Clone)]
pub struct EndDeviceState {
    pub dev_addr: DevAddr,
    key: NwkSKey,
    pub fcnt_up: u16,
    pub last_down_fcnt: Option<u16>,
    pub mic_mode: MicMode,
    pub retransmit_limit: u32,
    pub windows: RxWindows,
    pending: Option<Pending>,
    cycles: u64,
    log: Vec<UplinkRecord>,
    pub verdicts: VerdictCounts,
    pub unconfirmed_sent: u64,
}

impl EndDeviceState {
    pub fn new(dev_addr: DevAddr, key: NwkSKey, mic_mode: MicMode, retransmit_limit: u32) -> Self {
        EndDeviceState {
            dev_addr,
            key,
            fcnt_up: 0,
            last_down_fcnt: None,
            mic_mode,
            retransmit_limit,
            windows: RxWindows::default(),
            pending: None,
            cycles: 0,
            log: Vec::new(),
            verdicts: VerdictCounts::default(),
            unconfirmed_sent: 0,
        }
    }

    pub fn with_windows(mut self, windows: RxWindows) -> Self {
        self.windows = windows;
        self
    }

    pub fn log(&self) -> &[UplinkRecord] {
        &self.log
    }

    pub fn pending_fcnt(&self) -> Option<u16> {
        self.pending.as_ref().map(|p| p.frame.fcnt)
    }

    pub fn is_busy(&self) -> bool {
        self.pending.is_some()
    }

    /// Builds the next confirmed uplink and returns its PHY payload.
    pub fn send_confirmed(&mut self, payload: Vec<u8>, now: TimeMs) -> Result<Vec<u8>, DeviceError> {
        if let Some(p) = &self.pending {
            return Err(DeviceError::Busy(p.frame.fcnt));
        }
        let fcnt = self.fcnt_up;
        self.fcnt_up = self.fcnt_up.wrapping_add(1);
        let frame = build_uplink(&self.key, self.dev_addr, fcnt, true, payload);
        let bytes = serialize_frame(&frame);
        self.cycles += 1;
        self.pending = Some(Pending {
            frame,
            bytes: bytes.clone(),
            retransmissions: 0,
            windows: None,
            cycle: self.cycles,
        });
        self.log.push(UplinkRecord {
            fcnt,
            first_sent: now,
            transmissions: 1,
            status: UplinkStatus::Pending,
        });
        Ok(bytes)
    }

    pub fn send_unconfirmed(&mut self, payload: Vec<u8>) -> Vec<u8> {
        let fcnt = self.fcnt_up;
        self.fcnt_up = self.fcnt_up.wrapping_add(1);
        self.unconfirmed_sent += 1;
        serialize_frame(&build_uplink(&self.key, self.dev_addr, fcnt, false, payload))
    }

    /// Records that the pending uplink finished on air at `end`. Returns the
    /// cycle id and the time the second window closes.
    pub fn transmitted(&mut self, end: TimeMs) -> Option<(u64, TimeMs)> {
        let windows = self.windows.open_at(end);
        let p = self.pending.as_mut()?;
        p.windows = Some(windows);
        Some((p.cycle, windows[1].1))
    }

    pub fn in_window(&self, at: TimeMs) -> bool {
        self.pending
            .as_ref()
            .and_then(|p| p.windows)
            .is_some_and(|w| w.iter().any(|&(open, close)| open <= at && at < close))
    }

    /// Processes a downlink whose first symbol arrived at `start`.
    pub fn handle_downlink(&mut self, start: TimeMs, bytes: &[u8], now: TimeMs) -> DownlinkOutcome {
        if !self.in_window(start) {
            return DownlinkOutcome::Ignored;
        }
        let Ok(frame) = parse_frame(bytes) else {
            return DownlinkOutcome::Ignored;
        };
        if frame.dev_addr != self.dev_addr {
            return DownlinkOutcome::Ignored;
        }
        let fcnt = self
            .pending
            .as_ref()
            .map(|p| p.frame.fcnt)
            .expect("in_window implies pending");
        let verdict = verify_ack(&self.key, &frame, self.last_down_fcnt, self.mic_mode, fcnt);
        match verdict {
            AckVerdict::Accepted => {
                self.verdicts.accepted += 1;
                self.last_down_fcnt = Some(frame.fcnt);
                self.pending = None;
                if let Some(rec) = self.log.iter_mut().rev().find(|r| r.fcnt == fcnt) {
                    rec.status = UplinkStatus::Acked {
                        down_fcnt: frame.fcnt,
                        at: now,
                    };
                }
                DownlinkOutcome::Acked {
                    fcnt,
                    down_fcnt: frame.fcnt,
                }
            }
            AckVerdict::RejectedCounter => {
                self.verdicts.rejected_counter += 1;
                DownlinkOutcome::Rejected(verdict)
            }
            AckVerdict::RejectedMic => {
                self.verdicts.rejected_mic += 1;
                DownlinkOutcome::Rejected(verdict)
            }
        }
    }

    /// Called when the second receive window of `cycle` has closed.
    pub fn windows_closed(&mut self, cycle: u64, now: TimeMs) -> Expiry {
        let Some(p) = self.pending.as_mut() else {
            return Expiry::Stale;
        };
        if p.cycle != cycle {
            return Expiry::Stale;
        }
        let fcnt = p.frame.fcnt;
        if p.retransmissions < self.retransmit_limit {
            p.retransmissions += 1;
            p.windows = None;
            self.cycles += 1;
            p.cycle = self.cycles;
            let bytes = p.bytes.clone();
            if let Some(rec) = self.log.iter_mut().rev().find(|r| r.fcnt == fcnt) {
                rec.transmissions += 1;
            }
            Expiry::Retransmit(bytes)
        } else {
            self.pending = None;
            if let Some(rec) = self.log.iter_mut().rev().find(|r| r.fcnt == fcnt) {
                rec.status = UplinkStatus::PresumedLost { at: now };
            }
            Expiry::PresumedLost(fcnt)
        }
    }
}
