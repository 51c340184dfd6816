//! Semtech packet-forwarder UDP protocol (GWMP).
//!
//! Every datagram starts with a 4-byte header: protocol version, a 16-bit
//! token (big-endian) and the message identifier. Upstream messages
//! (PUSH_DATA, PULL_DATA, TX_ACK) carry the 8-byte gateway EUI in bytes 4..12;
//! PUSH_DATA and TX_ACK continue with a JSON body, PULL_RESP carries its JSON
//! body straight after the header.
//!
//! This module is the only place that turns protocol messages into bytes.

use std::fmt;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::radio::SpreadingFactor;

/// Version written by the encoder when none is specified.
pub const DEFAULT_PROTOCOL_VERSION: u8 = 2;

const HEADER_LEN: usize = 4;
const EUI_HEADER_LEN: usize = HEADER_LEN + 8;

// Message identifiers. PUSH_DATA, PULL_DATA and TX_ACK are the published
// values; the remaining three follow the upstream PROTOCOL.TXT.
const ID_PUSH_DATA: u8 = 0x00;
const ID_PUSH_ACK: u8 = 0x01;
const ID_PULL_DATA: u8 = 0x02;
const ID_PULL_RESP: u8 = 0x03;
const ID_PULL_ACK: u8 = 0x04;
const ID_TX_ACK: u8 = 0x05;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("datagram too short: {0} bytes, need at least 4")]
    Short(usize),
    #[error("unknown message identifier 0x{0:02x}")]
    UnknownKind(u8),
    #[error("{kind} needs {expected}, got {actual} bytes")]
    LengthMismatch {
        kind: DatagramKind,
        expected: &'static str,
        actual: usize,
    },
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("{0} does not carry a body")]
    BodyNotAllowed(DatagramKind),
    #[error("{0} requires a gateway EUI")]
    MissingEui(DatagramKind),
    #[error("{0} does not carry a gateway EUI")]
    UnexpectedEui(DatagramKind),
    #[error("malformed JSON body: {0}")]
    Json(String),
    #[error("stat value {0} outside {{-1, 0, 1}}")]
    StatOutOfRange(i64),
    #[error("invalid base64 payload: {0}")]
    Base64(String),
    #[error("payload size mismatch: declared {declared}, decoded {actual}")]
    SizeMismatch { declared: usize, actual: usize },
    #[error("invalid datarate {0:?}")]
    Datarate(String),
    #[error("invalid gateway EUI text {0:?}")]
    EuiText(String),
}

/// 64-bit gateway identifier.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct GatewayEui(pub [u8; 8]);

impl GatewayEui {
    pub fn as_bytes(&self) -> &[u8; 8] {
        &self.0
    }

    /// Public map name: `eui-` followed by 16 lowercase hex digits.
    pub fn registry_name(&self) -> String {
        format!("eui-{}", hex::encode(self.0))
    }
}

impl fmt::Display for GatewayEui {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.registry_name())
    }
}

impl fmt::Debug for GatewayEui {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GatewayEui({})", hex::encode(self.0))
    }
}

impl FromStr for GatewayEui {
    type Err = CodecError;

    /// Accepts bare hex, `eui-` prefixed hex, or colon-separated octets.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.strip_prefix("eui-").unwrap_or(s).replace(':', "");
        let bytes = hex::decode(&trimmed).map_err(|_| CodecError::EuiText(s.to_string()))?;
        let arr: [u8; 8] = bytes.try_into().map_err(|_| CodecError::EuiText(s.to_string()))?;
        Ok(GatewayEui(arr))
    }
}

impl Serialize for GatewayEui {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for GatewayEui {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Token(pub u16);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DatagramKind {
    PushData,
    PushAck,
    PullData,
    PullAck,
    PullResp,
    TxAck,
}

impl DatagramKind {
    pub const ALL: [DatagramKind; 6] = [
        DatagramKind::PushData,
        DatagramKind::PushAck,
        DatagramKind::PullData,
        DatagramKind::PullAck,
        DatagramKind::PullResp,
        DatagramKind::TxAck,
    ];

    pub fn wire_id(self) -> u8 {
        match self {
            DatagramKind::PushData => ID_PUSH_DATA,
            DatagramKind::PushAck => ID_PUSH_ACK,
            DatagramKind::PullData => ID_PULL_DATA,
            DatagramKind::PullResp => ID_PULL_RESP,
            DatagramKind::PullAck => ID_PULL_ACK,
            DatagramKind::TxAck => ID_TX_ACK,
        }
    }

    pub fn from_wire(id: u8) -> Result<Self, CodecError> {
        match id {
            ID_PUSH_DATA => Ok(DatagramKind::PushData),
            ID_PUSH_ACK => Ok(DatagramKind::PushAck),
            ID_PULL_DATA => Ok(DatagramKind::PullData),
            ID_PULL_RESP => Ok(DatagramKind::PullResp),
            ID_PULL_ACK => Ok(DatagramKind::PullAck),
            ID_TX_ACK => Ok(DatagramKind::TxAck),
            other => Err(CodecError::UnknownKind(other)),
        }
    }

    /// Upstream messages carry the gateway EUI in bytes 4..12.
    pub fn carries_eui(self) -> bool {
        matches!(
            self,
            DatagramKind::PushData | DatagramKind::PullData | DatagramKind::TxAck
        )
    }

    pub fn carries_body(self) -> bool {
        matches!(
            self,
            DatagramKind::PushData | DatagramKind::PullResp | DatagramKind::TxAck
        )
    }
}

impl fmt::Display for DatagramKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            DatagramKind::PushData => "PUSH_DATA",
            DatagramKind::PushAck => "PUSH_ACK",
            DatagramKind::PullData => "PULL_DATA",
            DatagramKind::PullAck => "PULL_ACK",
            DatagramKind::PullResp => "PULL_RESP",
            DatagramKind::TxAck => "TX_ACK",
        };
        f.write_str(name)
    }
}

/// One protocol message, i.e. one UDP payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Datagram {
    pub version: u8,
    pub token: Token,
    pub kind: DatagramKind,
    pub eui: Option<GatewayEui>,
    pub body: Vec<u8>,
}

impl Datagram {
    pub fn push_data(token: Token, eui: GatewayEui, body: Vec<u8>) -> Self {
        Self::with_eui(DatagramKind::PushData, token, eui, body)
    }

    pub fn pull_data(token: Token, eui: GatewayEui) -> Self {
        Self::with_eui(DatagramKind::PullData, token, eui, Vec::new())
    }

    pub fn tx_ack(token: Token, eui: GatewayEui, body: Vec<u8>) -> Self {
        Self::with_eui(DatagramKind::TxAck, token, eui, body)
    }

    pub fn push_ack(token: Token) -> Self {
        Self::bare(DatagramKind::PushAck, token, Vec::new())
    }

    pub fn pull_ack(token: Token) -> Self {
        Self::bare(DatagramKind::PullAck, token, Vec::new())
    }

    pub fn pull_resp(token: Token, body: Vec<u8>) -> Self {
        Self::bare(DatagramKind::PullResp, token, body)
    }

    fn with_eui(kind: DatagramKind, token: Token, eui: GatewayEui, body: Vec<u8>) -> Self {
        Datagram {
            version: DEFAULT_PROTOCOL_VERSION,
            token,
            kind,
            eui: Some(eui),
            body,
        }
    }

    fn bare(kind: DatagramKind, token: Token, body: Vec<u8>) -> Self {
        Datagram {
            version: DEFAULT_PROTOCOL_VERSION,
            token,
            kind,
            eui: None,
            body,
        }
    }
}

fn check_version(v: u8) -> Result<(), CodecError> {
    if v == 1 || v == 2 {
        Ok(())
    } else {
        Err(CodecError::UnsupportedVersion(v))
    }
}

pub fn encode_datagram(d: &Datagram) -> Result<Vec<u8>, CodecError> {
    check_version(d.version)?;
    match (d.kind.carries_eui(), d.eui) {
        (true, None) => return Err(CodecError::MissingEui(d.kind)),
        (false, Some(_)) => return Err(CodecError::UnexpectedEui(d.kind)),
        _ => {}
    }
    if !d.kind.carries_body() && !d.body.is_empty() {
        return Err(CodecError::BodyNotAllowed(d.kind));
    }

    let mut out = Vec::with_capacity(EUI_HEADER_LEN + d.body.len());
    out.push(d.version);
    out.extend_from_slice(&d.token.0.to_be_bytes());
    out.push(d.kind.wire_id());
    if let Some(eui) = d.eui {
        out.extend_from_slice(&eui.0);
    }
    out.extend_from_slice(&d.body);
    Ok(out)
}

pub fn decode_datagram(raw: &[u8]) -> Result<Datagram, CodecError> {
    if raw.len() < HEADER_LEN {
        return Err(CodecError::Short(raw.len()));
    }
    let kind = DatagramKind::from_wire(raw[3])?;
    check_version(raw[0])?;
    let token = Token(u16::from_be_bytes([raw[1], raw[2]]));

    let mismatch = |expected| CodecError::LengthMismatch {
        kind,
        expected,
        actual: raw.len(),
    };
    let (eui, body) = match kind {
        DatagramKind::PushAck | DatagramKind::PullAck => {
            if raw.len() != HEADER_LEN {
                return Err(mismatch("exactly 4 bytes"));
            }
            (None, Vec::new())
        }
        DatagramKind::PullData => {
            if raw.len() != EUI_HEADER_LEN {
                return Err(mismatch("exactly 12 bytes"));
            }
            (Some(read_eui(raw)), Vec::new())
        }
        DatagramKind::PushData | DatagramKind::TxAck => {
            if raw.len() < EUI_HEADER_LEN {
                return Err(mismatch("at least 12 bytes"));
            }
            (Some(read_eui(raw)), raw[EUI_HEADER_LEN..].to_vec())
        }
        DatagramKind::PullResp => (None, raw[HEADER_LEN..].to_vec()),
    };

    Ok(Datagram {
        version: raw[0],
        token,
        kind,
        eui,
        body,
    })
}

fn read_eui(raw: &[u8]) -> GatewayEui {
    let mut eui = [0u8; 8];
    eui.copy_from_slice(&raw[HEADER_LEN..EUI_HEADER_LEN]);
    GatewayEui(eui)
}

/// CRC status reported by the concentrator for one received packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CrcStatus {
    Ok,
    NoCrc,
    Fail,
}

impl CrcStatus {
    pub fn as_i8(self) -> i8 {
        match self {
            CrcStatus::Ok => 1,
            CrcStatus::NoCrc => 0,
            CrcStatus::Fail => -1,
        }
    }

    pub fn from_i64(v: i64) -> Result<Self, CodecError> {
        match v {
            1 => Ok(CrcStatus::Ok),
            0 => Ok(CrcStatus::NoCrc),
            -1 => Ok(CrcStatus::Fail),
            other => Err(CodecError::StatOutOfRange(other)),
        }
    }
}

impl Serialize for CrcStatus {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_i8(self.as_i8())
    }
}

/// Metadata plus PHY payload of one packet in a PUSH_DATA `rxpk` array.
#[derive(Debug, Clone, PartialEq)]
pub struct RxPacketMeta {
    pub stat: CrcStatus,
    /// Centre frequency in MHz.
    pub freq: f64,
    pub sf: SpreadingFactor,
    pub data: Vec<u8>,
}

/// Downlink packet carried by PULL_RESP.
#[derive(Debug, Clone, PartialEq)]
pub struct TxPacketMeta {
    pub freq: f64,
    pub sf: SpreadingFactor,
    pub data: Vec<u8>,
}

pub fn datarate_text(sf: SpreadingFactor) -> String {
    format!("SF{}BW125", sf.get())
}

pub fn parse_datarate(text: &str) -> Result<SpreadingFactor, CodecError> {
    let bad = || CodecError::Datarate(text.to_string());
    let rest = text.strip_prefix("SF").ok_or_else(bad)?;
    let digits = rest.strip_suffix("BW125").ok_or_else(bad)?;
    let n: u8 = digits.parse().map_err(|_| bad())?;
    SpreadingFactor::new(n).map_err(|_| bad())
}

#[derive(Serialize)]
struct RxpkOut<'a> {
    stat: CrcStatus,
    freq: f64,
    datr: String,
    size: usize,
    data: &'a str,
}

#[derive(Deserialize)]
struct RxpkIn {
    stat: i64,
    freq: f64,
    datr: String,
    size: usize,
    data: String,
}

#[derive(Serialize)]
struct TxpkOut<'a> {
    freq: f64,
    datr: String,
    size: usize,
    data: &'a str,
}

#[derive(Deserialize)]
struct TxpkIn {
    freq: f64,
    datr: String,
    size: usize,
    data: String,
}

pub fn encode_rxpk(pkts: &[RxPacketMeta]) -> Vec<u8> {
    let encoded: Vec<String> = pkts.iter().map(|p| BASE64.encode(&p.data)).collect();
    let items: Vec<RxpkOut<'_>> = pkts
        .iter()
        .zip(&encoded)
        .map(|(p, data)| RxpkOut {
            stat: p.stat,
            freq: p.freq,
            datr: datarate_text(p.sf),
            size: p.data.len(),
            data,
        })
        .collect();
    serde_json::to_vec(&serde_json::json!({ "rxpk": items })).expect("rxpk serialization is infallible")
}

pub fn parse_rxpk(body: &[u8]) -> Result<Vec<RxPacketMeta>, CodecError> {
    #[derive(Deserialize)]
    struct Envelope {
        rxpk: Vec<RxpkIn>,
    }
    let env: Envelope = serde_json::from_slice(body).map_err(|e| CodecError::Json(e.to_string()))?;
    env.rxpk
        .into_iter()
        .map(|p| {
            let stat = CrcStatus::from_i64(p.stat)?;
            let sf = parse_datarate(&p.datr)?;
            let data = decode_sized(&p.data, p.size)?;
            Ok(RxPacketMeta {
                stat,
                freq: p.freq,
                sf,
                data,
            })
        })
        .collect()
}

pub fn encode_txpk(pkt: &TxPacketMeta) -> Vec<u8> {
    let data = BASE64.encode(&pkt.data);
    let out = TxpkOut {
        freq: pkt.freq,
        datr: datarate_text(pkt.sf),
        size: pkt.data.len(),
        data: &data,
    };
    serde_json::to_vec(&serde_json::json!({ "txpk": out })).expect("txpk serialization is infallible")
}

pub fn parse_txpk(body: &[u8]) -> Result<TxPacketMeta, CodecError> {
    #[derive(Deserialize)]
    struct Envelope {
        txpk: TxpkIn,
    }
    let env: Envelope = serde_json::from_slice(body).map_err(|e| CodecError::Json(e.to_string()))?;
    let p = env.txpk;
    Ok(TxPacketMeta {
        freq: p.freq,
        sf: parse_datarate(&p.datr)?,
        data: decode_sized(&p.data, p.size)?,
    })
}

fn decode_sized(text: &str, declared: usize) -> Result<Vec<u8>, CodecError> {
    let data = BASE64.decode(text).map_err(|e| CodecError::Base64(e.to_string()))?;
    if data.len() != declared {
        return Err(CodecError::SizeMismatch {
            declared,
            actual: data.len(),
        });
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eui18() -> GatewayEui {
        GatewayEui([1, 2, 3, 4, 5, 6, 7, 8])
    }

    fn sf(n: u8) -> SpreadingFactor {
        SpreadingFactor::new(n).unwrap()
    }

    #[test]
    fn push_data_layout() {
        let body = br#"{"rxpk":[]}"#.to_vec();
        let d = Datagram::push_data(Token(0x1234), eui18(), body.clone());
        let raw = encode_datagram(&d).unwrap();
        assert_eq!(&raw[..12], &[0x02, 0x12, 0x34, 0x00, 1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(&raw[12..], &body[..]);
        assert_eq!(decode_datagram(&raw).unwrap(), d);
    }

    #[test]
    fn pull_data_zero_case() {
        let d = Datagram::pull_data(Token(0), GatewayEui([0; 8]));
        let raw = encode_datagram(&d).unwrap();
        assert_eq!(raw.len(), 12);
        assert_eq!(raw[3], 0x02);
        assert!(raw[4..].iter().all(|b| *b == 0));
        assert_eq!(decode_datagram(&raw).unwrap(), d);
    }

    #[test]
    fn tx_ack_without_status_is_twelve_bytes() {
        let d = Datagram::tx_ack(Token(7), eui18(), Vec::new());
        let raw = encode_datagram(&d).unwrap();
        assert_eq!(raw.len(), 12);
        assert_eq!(raw[3], 0x05);
        assert_eq!(decode_datagram(&raw).unwrap(), d);
    }

    #[test]
    fn ack_kinds_are_four_bytes() {
        for d in [Datagram::push_ack(Token(9)), Datagram::pull_ack(Token(9))] {
            let raw = encode_datagram(&d).unwrap();
            assert_eq!(raw.len(), 4);
            assert_eq!(decode_datagram(&raw).unwrap(), d);
        }
    }

    #[test]
    fn body_on_bodiless_kind_is_refused() {
        let mut d = Datagram::pull_data(Token(1), eui18());
        d.body = b"{}".to_vec();
        assert_eq!(
            encode_datagram(&d),
            Err(CodecError::BodyNotAllowed(DatagramKind::PullData))
        );
        let mut d = Datagram::push_ack(Token(1));
        d.body = b"x".to_vec();
        assert!(matches!(encode_datagram(&d), Err(CodecError::BodyNotAllowed(_))));
    }

    #[test]
    fn eui_presence_is_checked() {
        let mut d = Datagram::pull_resp(Token(1), Vec::new());
        d.eui = Some(eui18());
        assert!(matches!(encode_datagram(&d), Err(CodecError::UnexpectedEui(_))));
        let mut d = Datagram::pull_data(Token(1), eui18());
        d.eui = None;
        assert!(matches!(encode_datagram(&d), Err(CodecError::MissingEui(_))));
    }

    #[test]
    fn decode_errors_are_distinct() {
        assert_eq!(decode_datagram(&[2, 0, 0]), Err(CodecError::Short(3)));
        assert_eq!(decode_datagram(&[2, 0, 0, 0x07]), Err(CodecError::UnknownKind(0x07)));
        assert!(matches!(
            decode_datagram(&[2, 0, 0, 0x02, 1, 2]),
            Err(CodecError::LengthMismatch {
                kind: DatagramKind::PullData,
                ..
            })
        ));
        assert!(matches!(
            decode_datagram(&[2, 0, 0, 0x01, 0]),
            Err(CodecError::LengthMismatch {
                kind: DatagramKind::PushAck,
                ..
            })
        ));
        assert_eq!(
            decode_datagram(&[9, 0, 0, 0x01]),
            Err(CodecError::UnsupportedVersion(9))
        );
    }

    #[test]
    fn version_one_is_accepted() {
        let raw = [1u8, 0xab, 0xcd, 0x04];
        let d = decode_datagram(&raw).unwrap();
        assert_eq!(d.version, 1);
        assert_eq!(d.token, Token(0xabcd));
        assert_eq!(encode_datagram(&d).unwrap(), raw);
    }

    #[test]
    fn rxpk_stat_is_preserved() {
        let frame = vec![0x80; 12];
        let body = encode_rxpk(&[RxPacketMeta {
            stat: CrcStatus::Ok,
            freq: 868.1,
            sf: sf(7),
            data: frame.clone(),
        }]);
        let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert_eq!(v["rxpk"][0]["stat"], 1);
        assert_eq!(v["rxpk"][0]["datr"], "SF7BW125");
        assert_eq!(v["rxpk"][0]["size"], 12);

        let corrupt = encode_rxpk(&[RxPacketMeta {
            stat: CrcStatus::Fail,
            freq: 868.1,
            sf: sf(10),
            data: frame,
        }]);
        let v: serde_json::Value = serde_json::from_slice(&corrupt).unwrap();
        assert_eq!(v["rxpk"][0]["stat"], -1);
        assert!(v["rxpk"][0]["data"].as_str().is_some_and(|s| !s.is_empty()));
    }

    #[test]
    fn empty_rxpk() {
        assert_eq!(encode_rxpk(&[]), br#"{"rxpk":[]}"#.to_vec());
        assert_eq!(parse_rxpk(br#"{"rxpk":[]}"#).unwrap(), vec![]);
    }

    #[test]
    fn rxpk_rejects_bad_stat_and_size() {
        let bad_stat = br#"{"rxpk":[{"stat":5,"freq":868.1,"datr":"SF7BW125","size":1,"data":"AA=="}]}"#;
        assert_eq!(parse_rxpk(bad_stat), Err(CodecError::StatOutOfRange(5)));
        let bad_size = br#"{"rxpk":[{"stat":1,"freq":868.1,"datr":"SF7BW125","size":3,"data":"AA=="}]}"#;
        assert_eq!(
            parse_rxpk(bad_size),
            Err(CodecError::SizeMismatch { declared: 3, actual: 1 })
        );
        assert!(matches!(parse_rxpk(b"{not json"), Err(CodecError::Json(_))));
        let bad_dr = br#"{"rxpk":[{"stat":1,"freq":868.1,"datr":"SF13BW125","size":1,"data":"AA=="}]}"#;
        assert!(matches!(parse_rxpk(bad_dr), Err(CodecError::Datarate(_))));
    }

    #[test]
    fn rxpk_ignores_unknown_keys() {
        let body = br#"{"stat":{"rxnb":1},"rxpk":[{"tmst":123,"rssi":-40,"stat":0,"freq":867.5,"datr":"SF12BW125","codr":"4/5","size":2,"data":"AQI="}]}"#;
        let pkts = parse_rxpk(body).unwrap();
        assert_eq!(pkts.len(), 1);
        assert_eq!(pkts[0].stat, CrcStatus::NoCrc);
        assert_eq!(pkts[0].sf, sf(12));
        assert_eq!(pkts[0].data, vec![1, 2]);
    }

    #[test]
    fn txpk_round_trip() {
        let p = TxPacketMeta {
            freq: 869.525,
            sf: sf(9),
            data: vec![0x60, 1, 2, 3, 4, 0x20, 0, 0, 9, 9, 9, 9],
        };
        assert_eq!(parse_txpk(&encode_txpk(&p)).unwrap(), p);
    }

    #[test]
    fn eui_text_forms() {
        let e: GatewayEui = "eui-0102030405060708".parse().unwrap();
        assert_eq!(e, eui18());
        assert_eq!("01:02:03:04:05:06:07:08".parse::<GatewayEui>().unwrap(), e);
        assert_eq!(e.registry_name(), "eui-0102030405060708");
        assert!("eui-0102".parse::<GatewayEui>().is_err());
    }
}
