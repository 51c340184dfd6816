//! Jammer variants and their burst timing.
//!
//! Every reactive burst runs until the end of the frame it targets, so the
//! damage lands on the trailing bytes (payload tail, MIC and PHY CRC).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attacks::AttackError;
use crate::mac::{DevAddr, Direction};
use crate::radio::{JamBurst, NodeId, RadioFrame, TimeMs};

/// Bytes of PHY CRC after the MAC payload.
const PHY_CRC_LEN: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JammerKind {
    Constant,
    Triggered,
    Selective,
    Wormhole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JammerConfig {
    pub node: NodeId,
    pub kind: JammerKind,
    #[serde(default)]
    pub targets: BTreeSet<DevAddr>,
    #[serde(default = "default_latency")]
    pub trigger_latency_ms: TimeMs,
    /// Share of the airtime spent before the DevAddr has been decoded.
    #[serde(default = "default_scan")]
    pub scan_fraction: f64,
    #[serde(default = "default_channel")]
    pub channel: f64,
}

fn default_latency() -> TimeMs {
    5
}

fn default_scan() -> f64 {
    0.25
}

fn default_channel() -> f64 {
    868.1
}

impl JammerConfig {
    pub fn new(node: &str, kind: JammerKind, targets: impl IntoIterator<Item = DevAddr>) -> Self {
        JammerConfig {
            node: node.to_string(),
            kind,
            targets: targets.into_iter().collect(),
            trigger_latency_ms: default_latency(),
            scan_fraction: default_scan(),
            channel: default_channel(),
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let needs_targets = matches!(self.kind, JammerKind::Selective | JammerKind::Wormhole);
        if needs_targets && self.targets.is_empty() {
            return Err(AttackError::EmptyTargets(self.kind));
        }
        if !(0.0..=1.0).contains(&self.scan_fraction) {
            return Err(AttackError::ScanFraction(self.scan_fraction));
        }
        Ok(())
    }

    fn targets_frame(&self, frame: &RadioFrame) -> bool {
        frame.direction == Direction::Up && frame.dev_addr().is_some_and(|d| self.targets.contains(&d))
    }

    fn burst(&self, frame: &RadioFrame, start: TimeMs) -> Option<JamBurst> {
        (start < frame.end()).then(|| JamBurst {
            jammer: self.node.clone(),
            channel: frame.channel,
            sf: Some(frame.sf),
            start,
            end: frame.end(),
        })
    }
}

/// Wide-band burst covering `[from, until)` on every SF.
pub fn constant_burst(cfg: &JammerConfig, from: TimeMs, until: TimeMs) -> JamBurst {
    JamBurst {
        jammer: cfg.node.clone(),
        channel: cfg.channel,
        sf: None,
        start: from,
        end: until,
    }
}

/// Carrier-sense trigger: fires `trigger_latency` after the preamble starts.
pub fn triggered_burst(cfg: &JammerConfig, frame: &RadioFrame) -> Option<JamBurst> {
    (frame.direction == Direction::Up)
        .then(|| cfg.burst(frame, frame.start + cfg.trigger_latency_ms))
        .flatten()
}

/// When the header scan has read the DevAddr and the jammer reacts.
pub fn selective_trigger_at(cfg: &JammerConfig, frame: &RadioFrame) -> TimeMs {
    let scan = (frame.airtime as f64 * cfg.scan_fraction).ceil() as TimeMs;
    frame.start + scan + cfg.trigger_latency_ms
}

pub fn selective_burst(cfg: &JammerConfig, frame: &RadioFrame) -> Option<JamBurst> {
    if !cfg.targets_frame(frame) {
        return None;
    }
    cfg.burst(frame, selective_trigger_at(cfg, frame))
}

/// Instant the recorder has the full MAC frame: only the PHY CRC is left on air.
pub fn record_complete_at(frame: &RadioFrame) -> TimeMs {
    let tail = frame.airtime * PHY_CRC_LEN as u64 / (frame.payload.len() + PHY_CRC_LEN) as u64;
    frame.end() - tail
}

/// Burst triggered by a finished recording. `None` when the recording
/// failed, the frame is not a target, or the latency swallows the tail.
pub fn wormhole_burst(cfg: &JammerConfig, frame: &RadioFrame, recorded_ok: bool) -> Option<JamBurst> {
    if !recorded_ok || !cfg.targets_frame(frame) {
        return None;
    }
    cfg.burst(frame, record_complete_at(frame) + cfg.trigger_latency_ms)
}

/// Batch form: bursts this jammer emits for `frames` while active over
/// `[from, until)`. Wormhole recordings are assumed intact here; the
/// simulator checks them against the ether instead.
pub fn run_jammer(cfg: &JammerConfig, frames: &[RadioFrame], from: TimeMs, until: TimeMs) -> Vec<JamBurst> {
    if cfg.kind == JammerKind::Constant {
        return vec![constant_burst(cfg, from, until)];
    }
    frames
        .iter()
        .filter(|f| from <= f.start && f.start < until)
        .filter_map(|f| match cfg.kind {
            JammerKind::Triggered => triggered_burst(cfg, f),
            JammerKind::Selective => selective_burst(cfg, f),
            JammerKind::Wormhole => wormhole_burst(cfg, f, true),
            JammerKind::Constant => unreachable!(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radio::{AirtimeModel, SpreadingFactor};

    const D1: DevAddr = DevAddr([0x26, 0, 0, 1]);
    const D2: DevAddr = DevAddr([0x26, 0, 0, 2]);

    fn frame(dev: DevAddr, sf: u8, start: TimeMs) -> RadioFrame {
        let sf = SpreadingFactor::new(sf).unwrap();
        let mut payload = vec![0x80];
        payload.extend_from_slice(&dev.0);
        payload.resize(37, 0);
        RadioFrame {
            airtime: AirtimeModel::default().airtime(sf, payload.len()),
            payload,
            sf,
            channel: 868.1,
            source: "dev".into(),
            direction: Direction::Up,
            start,
        }
    }

    #[test]
    fn selective_only_hits_targets() {
        let cfg = JammerConfig::new("j", JammerKind::Selective, [D1]);
        let frames = [frame(D1, 10, 0), frame(D2, 10, 1000), frame(D1, 10, 2000)];
        let bursts = run_jammer(&cfg, &frames, 0, 10_000);
        assert_eq!(bursts.len(), 2);
        for (b, f) in bursts.iter().zip([&frames[0], &frames[2]]) {
            assert_eq!(b.start, f.start + 80 + 5);
            assert_eq!(b.end, f.end());
        }
    }

    #[test]
    fn selective_and_wormhole_need_targets() {
        for kind in [JammerKind::Selective, JammerKind::Wormhole] {
            assert_eq!(
                JammerConfig::new("j", kind, []).validate(),
                Err(AttackError::EmptyTargets(kind))
            );
        }
        assert!(JammerConfig::new("j", JammerKind::Constant, []).validate().is_ok());
    }

    #[test]
    fn wormhole_feasible_only_at_high_sf() {
        let cfg = JammerConfig::new("j", JammerKind::Wormhole, [D1]);
        for sf in 7..=12u8 {
            let f = frame(D1, sf, 0);
            let burst = wormhole_burst(&cfg, &f, true);
            assert_eq!(burst.is_some(), sf >= 9, "SF{sf}");
            if let Some(b) = burst {
                assert!(b.start >= record_complete_at(&f));
            }
        }
        assert!(wormhole_burst(&cfg, &frame(D1, 12, 0), false).is_none());
    }

    #[test]
    fn record_completes_before_crc() {
        let f = frame(D1, 10, 100);
        // 320 ms over 39 PHY bytes: the CRC takes 16 ms.
        assert_eq!(record_complete_at(&f), 100 + 320 - 16);
    }

    #[test]
    fn constant_covers_all_sfs() {
        let cfg = JammerConfig::new("j", JammerKind::Constant, []);
        let b = run_jammer(&cfg, &[], 0, 1000);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].sf, None);
    }

    #[test]
    fn triggered_starts_after_latency() {
        let cfg = JammerConfig::new("j", JammerKind::Triggered, []);
        let f = frame(D2, 7, 50);
        let b = triggered_burst(&cfg, &f).unwrap();
        assert_eq!((b.start, b.end), (55, f.end()));
    }
}
