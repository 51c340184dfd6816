//! Virtual ether: airtime, carrier sense, collisions and jamming.
//!
//! Coverage is an explicit adjacency relation between node ids. A frame
//! occupies the half-open interval `[start, start + airtime)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mac::{DevAddr, Direction};

pub type NodeId = String;
pub type TimeMs = u64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RadioError {
    #[error("spreading factor {0} outside 7..=12")]
    SpreadingFactor(u8),
    #[error("jam probability {1} for SF{0} outside [0, 1]")]
    Probability(u8, f64),
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SpreadingFactor(u8);

impl SpreadingFactor {
    pub const MIN: u8 = 7;
    pub const MAX: u8 = 12;

    pub fn new(sf: u8) -> Result<Self, RadioError> {
        if (Self::MIN..=Self::MAX).contains(&sf) {
            Ok(SpreadingFactor(sf))
        } else {
            Err(RadioError::SpreadingFactor(sf))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = SpreadingFactor> {
        (Self::MIN..=Self::MAX).map(SpreadingFactor)
    }
}

impl fmt::Debug for SpreadingFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SF{}", self.0)
    }
}

impl fmt::Display for SpreadingFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SF{}", self.0)
    }
}

impl Serialize for SpreadingFactor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.0)
    }
}

impl<'de> Deserialize<'de> for SpreadingFactor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        SpreadingFactor::new(v).map_err(serde::de::Error::custom)
    }
}

/// Airtime that doubles per SF step, linear in frame length and calibrated
/// so that a `reference_len`-byte frame at SF7 takes `base_ms`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AirtimeModel {
    pub base_ms: u64,
    pub reference_len: usize,
}

impl Default for AirtimeModel {
    fn default() -> Self {
        AirtimeModel {
            base_ms: 40,
            reference_len: 37,
        }
    }
}

impl AirtimeModel {
    pub fn airtime(&self, sf: SpreadingFactor, payload_len: usize) -> TimeMs {
        let sf7 = (self.base_ms * payload_len as u64).div_ceil(self.reference_len as u64);
        sf7.max(1) << (sf.get() - SpreadingFactor::MIN)
    }
}

/// Airtime with the default calibration (37 bytes at SF7 = 40 ms).
pub fn airtime_model(sf: u8, payload_len: usize) -> Result<TimeMs, RadioError> {
    Ok(AirtimeModel::default().airtime(SpreadingFactor::new(sf)?, payload_len))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadioFrame {
    pub payload: Vec<u8>,
    pub sf: SpreadingFactor,
    /// Channel centre frequency in MHz.
    pub channel: f64,
    pub source: NodeId,
    pub direction: Direction,
    pub start: TimeMs,
    pub airtime: TimeMs,
}

impl RadioFrame {
    pub fn end(&self) -> TimeMs {
        self.start + self.airtime
    }

    pub fn overlaps(&self, from: TimeMs, until: TimeMs) -> bool {
        self.start < until && from < self.end()
    }

    /// DevAddr from bytes 1..5 of the MAC header, if the payload is long enough.
    pub fn dev_addr(&self) -> Option<DevAddr> {
        (self.payload.len() >= 5).then(|| DevAddr([self.payload[1], self.payload[2], self.payload[3], self.payload[4]]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CrcPolicyOnJam {
    #[default]
    Corrupt,
    Lose,
}

/// Per-SF probability that a jam burst overlapping a frame damages it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JamSuccess(pub BTreeMap<u8, f64>);

impl Default for JamSuccess {
    fn default() -> Self {
        JamSuccess(BTreeMap::from([
            (7, 0.0),
            (8, 0.0),
            (9, 0.5),
            (10, 0.97),
            (11, 0.97),
            (12, 0.97),
        ]))
    }
}

impl JamSuccess {
    pub fn get(&self, sf: SpreadingFactor) -> f64 {
        self.0.get(&sf.get()).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<(), RadioError> {
        for (&sf, &p) in &self.0 {
            SpreadingFactor::new(sf)?;
            if !(0.0..=1.0).contains(&p) || p.is_nan() {
                return Err(RadioError::Probability(sf, p));
            }
        }
        Ok(())
    }
}

/// Symmetric "who hears whom" relation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Coverage {
    links: BTreeMap<NodeId, BTreeSet<NodeId>>,
}

impl Coverage {
    pub fn connect(&mut self, a: &str, b: &str) {
        self.links.entry(a.to_string()).or_default().insert(b.to_string());
        self.links.entry(b.to_string()).or_default().insert(a.to_string());
    }

    pub fn adjacent(&self, a: &str, b: &str) -> bool {
        self.links.get(a).is_some_and(|s| s.contains(b))
    }

    pub fn neighbours(&self, a: &str) -> impl Iterator<Item = &NodeId> {
        self.links.get(a).into_iter().flatten()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelModel {
    pub jam_success: JamSuccess,
    pub coverage: Coverage,
    pub crc_policy_on_jam: CrcPolicyOnJam,
}

/// An interval of jamming energy emitted by one jammer.
#[derive(Debug, Clone, PartialEq)]
pub struct JamBurst {
    pub jammer: NodeId,
    pub channel: f64,
    /// `None` jams every spreading factor.
    pub sf: Option<SpreadingFactor>,
    pub start: TimeMs,
    pub end: TimeMs,
}

impl JamBurst {
    fn hits(&self, channel: f64, sf: SpreadingFactor, from: TimeMs, until: TimeMs) -> bool {
        self.channel == channel && self.sf.is_none_or(|s| s == sf) && self.start < until && from < self.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reception {
    pub frame: RadioFrame,
    pub at: NodeId,
    pub crc_ok: bool,
    /// A jam burst overlapped the frame and the damage draw succeeded.
    pub jammed: bool,
}

pub type TxId = u64;

/// Transmission history plus active jam bursts.
#[derive(Debug, Clone, Default)]
pub struct Ether {
    frames: BTreeMap<TxId, RadioFrame>,
    bursts: Vec<JamBurst>,
    next_id: TxId,
}

impl Ether {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an in-flight frame and returns its id. Reception events are
    /// the caller's to schedule at `frame.end()`.
    pub fn transmit(&mut self, frame: RadioFrame) -> TxId {
        let id = self.next_id;
        self.next_id += 1;
        self.frames.insert(id, frame);
        id
    }

    pub fn frame(&self, id: TxId) -> Option<&RadioFrame> {
        self.frames.get(&id)
    }

    pub fn add_burst(&mut self, burst: JamBurst) {
        self.bursts.push(burst);
    }

    pub fn bursts(&self) -> &[JamBurst] {
        &self.bursts
    }

    pub fn carrier_busy(&self, channel: f64, at: TimeMs) -> bool {
        self.frames
            .values()
            .any(|f| f.channel == channel && f.start <= at && at < f.end())
    }

    /// Another frame audible at `at` on the same channel and SF overlaps `id`.
    pub fn collides(&self, id: TxId, at: &str, coverage: &Coverage) -> bool {
        match self.frames.get(&id) {
            Some(f) => self.collides_during(id, at, f.start, f.end(), coverage),
            None => false,
        }
    }

    /// As `collides`, restricted to `[from, until)` of the frame.
    pub fn collides_during(&self, id: TxId, at: &str, from: TimeMs, until: TimeMs, coverage: &Coverage) -> bool {
        let Some(frame) = self.frames.get(&id) else {
            return false;
        };
        self.frames.iter().any(|(&other_id, other)| {
            other_id != id
                && other.source != at
                && other.channel == frame.channel
                && other.sf == frame.sf
                && other.overlaps(from, until)
                && coverage.adjacent(&other.source, at)
        })
    }

    /// Jam energy audible at `at` overlapping `[from, until)` of the frame.
    pub fn jam_overlap(&self, frame: &RadioFrame, at: &str, from: TimeMs, until: TimeMs, coverage: &Coverage) -> bool {
        self.bursts
            .iter()
            .any(|b| b.hits(frame.channel, frame.sf, from, until) && coverage.adjacent(&b.jammer, at))
    }

    /// Drops frames and bursts that ended before `horizon`.
    pub fn prune(&mut self, horizon: TimeMs) {
        self.frames.retain(|_, f| f.end() + 1 >= horizon);
        self.bursts.retain(|b| b.end >= horizon);
    }
}

/// Outcome for one receiver. `None` when a jammed frame is lost outright.
pub fn resolve_reception(
    model: &ChannelModel,
    frame: &RadioFrame,
    at: &str,
    collided: bool,
    jam_overlap: bool,
    rng: &mut impl Rng,
) -> Option<Reception> {
    let mut crc_ok = !collided;
    let mut jammed = false;
    if jam_overlap && rng.gen_bool(model.jam_success.get(frame.sf)) {
        jammed = true;
        match model.crc_policy_on_jam {
            CrcPolicyOnJam::Corrupt => crc_ok = false,
            CrcPolicyOnJam::Lose => return None,
        }
    }
    Some(Reception {
        frame: frame.clone(),
        at: at.to_string(),
        crc_ok,
        jammed,
    })
}
