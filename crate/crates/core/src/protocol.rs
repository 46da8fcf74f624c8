//! Newline-delimited JSON wire protocol between operator clients and the server.
//!
//! Every frame is one UTF-8 JSON object terminated by LF, at most [`MAX_FRAME_BYTES`]
//! long. Objects are written with sorted keys so that encoding is deterministic. Unknown
//! fields are ignored on decode; an unknown `type` is an error reported back to the sender.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const MAX_FRAME_BYTES: usize = 65536;
pub const DEFAULT_PORT: u16 = 7450;
pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);
pub const SERVER_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Operator,
    Observer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    FreeSpace,
    Approach,
    Inserted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertDirection {
    In,
    Out,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    MalformedJson,
    UnknownType,
    MissingField,
    InvalidField,
    OversizeFrame,
    NonFinite,
    ProtocolViolation,
    HandshakeTimeout,
    Busy,
    StaleValidation,
    NotEngaged,
    GatingViolation,
    IkFailure,
    Unreachable,
    DepthLimit,
    InvalidMode,
    InvalidConfig,
    CommandRejected,
    DegenerateDirection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireMessage {
    Hello {
        client_id: String,
        role: Role,
    },
    HelloAck {
        session_id: String,
        server_version: String,
    },
    PinchStart {
        t_client_ms: u64,
    },
    #[serde(rename = "wrist")]
    WristSample {
        seq: u64,
        t_client_ms: u64,
        x_m: f64,
        y_m: f64,
        z_m: f64,
    },
    PinchEnd {
        t_client_ms: u64,
        last_seq: u64,
    },
    MoveSummary {
        move_id: u64,
        n_samples: u64,
        tip_start_mm: [f64; 3],
        tip_end_mm: [f64; 3],
    },
    Validate {
        move_id: u64,
        accepted: bool,
    },
    #[serde(rename = "state")]
    StateBroadcast {
        tick: u64,
        joints_rad: [f64; 7],
        tip_mm: [f64; 3],
        mode: Mode,
        #[serde(default)]
        engaged_client: Option<String>,
    },
    /// Partial settings update; absent fields keep their value.
    ConfigSet {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scale: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        insert_increment_mm: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        insert_velocity_mm_s: Option<f64>,
    },
    /// Request a straight-line approach to a trocar; `axis` is the insertion direction
    /// (into the body). Defaults to the current camera axis.
    Approach {
        trocar_mm: [f64; 3],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        axis: Option<[f64; 3]>,
    },
    /// One insertion increment along the shaft.
    Insert {
        direction: InsertDirection,
    },
    /// Leave trocar mode (only at zero insertion depth).
    Retract {},
    Error {
        code: ErrorCode,
        detail: String,
    },
}

const KNOWN_TYPES: &[&str] = &[
    "hello",
    "hello_ack",
    "pinch_start",
    "wrist",
    "pinch_end",
    "move_summary",
    "validate",
    "state",
    "config_set",
    "approach",
    "insert",
    "retract",
    "error",
];

impl WireMessage {
    pub fn type_name(&self) -> &'static str {
        match self {
            WireMessage::Hello { .. } => "hello",
            WireMessage::HelloAck { .. } => "hello_ack",
            WireMessage::PinchStart { .. } => "pinch_start",
            WireMessage::WristSample { .. } => "wrist",
            WireMessage::PinchEnd { .. } => "pinch_end",
            WireMessage::MoveSummary { .. } => "move_summary",
            WireMessage::Validate { .. } => "validate",
            WireMessage::StateBroadcast { .. } => "state",
            WireMessage::ConfigSet { .. } => "config_set",
            WireMessage::Approach { .. } => "approach",
            WireMessage::Insert { .. } => "insert",
            WireMessage::Retract {} => "retract",
            WireMessage::Error { .. } => "error",
        }
    }

    pub fn error(code: ErrorCode, detail: impl Into<String>) -> Self {
        WireMessage::Error {
            code,
            detail: detail.into(),
        }
    }

    fn floats(&self) -> Vec<f64> {
        match self {
            WireMessage::WristSample { x_m, y_m, z_m, .. } => vec![*x_m, *y_m, *z_m],
            WireMessage::MoveSummary {
                tip_start_mm,
                tip_end_mm,
                ..
            } => tip_start_mm.iter().chain(tip_end_mm).copied().collect(),
            WireMessage::StateBroadcast {
                joints_rad, tip_mm, ..
            } => joints_rad.iter().chain(tip_mm).copied().collect(),
            WireMessage::ConfigSet {
                scale,
                insert_increment_mm,
                insert_velocity_mm_s,
            } => [scale, insert_increment_mm, insert_velocity_mm_s]
                .into_iter()
                .flatten()
                .copied()
                .collect(),
            WireMessage::Approach { trocar_mm, axis } => trocar_mm
                .iter()
                .chain(axis.iter().flatten())
                .copied()
                .collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_BYTES} byte limit")]
    OversizeFrame(usize),
    #[error("malformed json: {0}")]
    MalformedJson(String),
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("missing field {0:?}")]
    MissingField(String),
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error("message contains a non-finite number")]
    NonFinite,
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("no hello within the handshake timeout")]
    HandshakeTimeout,
}

impl ProtocolError {
    pub fn code(&self) -> ErrorCode {
        match self {
            ProtocolError::OversizeFrame(_) => ErrorCode::OversizeFrame,
            ProtocolError::MalformedJson(_) => ErrorCode::MalformedJson,
            ProtocolError::UnknownType(_) => ErrorCode::UnknownType,
            ProtocolError::MissingField(_) => ErrorCode::MissingField,
            ProtocolError::InvalidField(_) => ErrorCode::InvalidField,
            ProtocolError::NonFinite => ErrorCode::NonFinite,
            ProtocolError::ProtocolViolation(_) => ErrorCode::ProtocolViolation,
            ProtocolError::HandshakeTimeout => ErrorCode::HandshakeTimeout,
        }
    }

    /// Whether the connection must be closed after reporting this error.
    pub fn closes_connection(&self) -> bool {
        matches!(
            self,
            ProtocolError::MalformedJson(_)
                | ProtocolError::ProtocolViolation(_)
                | ProtocolError::HandshakeTimeout
        )
    }

    pub fn to_message(&self) -> WireMessage {
        WireMessage::error(self.code(), self.to_string())
    }
}

/// Serializes a message as one LF-terminated line with sorted keys.
pub fn encode(msg: &WireMessage) -> Result<Vec<u8>, ProtocolError> {
    if msg.floats().iter().any(|v| !v.is_finite()) {
        return Err(ProtocolError::NonFinite);
    }
    // serde_json's default map is ordered by key, which gives the canonical field order.
    let value =
        serde_json::to_value(msg).map_err(|e| ProtocolError::InvalidField(e.to_string()))?;
    let mut bytes =
        serde_json::to_vec(&value).map_err(|e| ProtocolError::InvalidField(e.to_string()))?;
    bytes.push(b'\n');
    if bytes.len() > MAX_FRAME_BYTES {
        return Err(ProtocolError::OversizeFrame(bytes.len()));
    }
    Ok(bytes)
}

/// Parses one frame. A trailing LF (and CR) is accepted and stripped.
pub fn decode(frame: &[u8]) -> Result<WireMessage, ProtocolError> {
    if frame.len() > MAX_FRAME_BYTES {
        return Err(ProtocolError::OversizeFrame(frame.len()));
    }
    let line = frame.strip_suffix(b"\n").unwrap_or(frame);
    let line = line.strip_suffix(b"\r").unwrap_or(line);
    let text =
        std::str::from_utf8(line).map_err(|e| ProtocolError::MalformedJson(e.to_string()))?;
    let value: Value =
        serde_json::from_str(text).map_err(|e| ProtocolError::MalformedJson(e.to_string()))?;
    decode_value(value)
}

/// Decodes an already-parsed JSON value (used by the WebSocket bridge).
pub fn decode_value(value: Value) -> Result<WireMessage, ProtocolError> {
    let Value::Object(map) = &value else {
        return Err(ProtocolError::MalformedJson(
            "frame is not a JSON object".into(),
        ));
    };
    let kind = match map.get("type") {
        None => return Err(ProtocolError::MissingField("type".into())),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(ProtocolError::InvalidField("type must be a string".into())),
    };
    if !KNOWN_TYPES.contains(&kind.as_str()) {
        return Err(ProtocolError::UnknownType(kind));
    }
    serde_json::from_value(value).map_err(|e| {
        let text = e.to_string();
        match text
            .strip_prefix("missing field `")
            .and_then(|rest| rest.split('`').next())
        {
            Some(field) => ProtocolError::MissingField(field.to_string()),
            None => ProtocolError::InvalidField(text),
        }
    })
}

/// Reassembles LF-delimited frames from an arbitrary byte stream.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    discarding: bool,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes buffered without a terminating LF yet.
    pub fn pending(&self) -> usize {
        self.buf.len()
    }

    /// Next complete frame (without its LF). An oversize frame is reported once and its
    /// remaining bytes are skipped up to the next LF.
    pub fn next_frame(&mut self) -> Option<Result<Vec<u8>, ProtocolError>> {
        loop {
            match self.buf.iter().position(|b| *b == b'\n') {
                Some(pos) => {
                    let mut line: Vec<u8> = self.buf.drain(..=pos).collect();
                    line.pop();
                    if self.discarding {
                        self.discarding = false;
                        continue;
                    }
                    if line.len() + 1 > MAX_FRAME_BYTES {
                        return Some(Err(ProtocolError::OversizeFrame(line.len() + 1)));
                    }
                    return Some(Ok(line));
                }
                None => {
                    if !self.discarding && self.buf.len() >= MAX_FRAME_BYTES {
                        let n = self.buf.len();
                        self.buf.clear();
                        self.discarding = true;
                        return Some(Err(ProtocolError::OversizeFrame(n)));
                    }
                    if self.discarding {
                        self.buf.clear();
                    }
                    return None;
                }
            }
        }
    }
}

/// Identity and role of an admitted client.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Admitted {
    pub client_id: String,
    pub role: Role,
}

/// Checks the first message of a fresh connection. Anything but `Hello` is a violation.
pub fn admit(first: &WireMessage) -> Result<Admitted, ProtocolError> {
    match first {
        WireMessage::Hello { client_id, role } if !client_id.is_empty() => Ok(Admitted {
            client_id: client_id.clone(),
            role: *role,
        }),
        WireMessage::Hello { .. } => Err(ProtocolError::ProtocolViolation(
            "hello with empty client_id".into(),
        )),
        other => Err(ProtocolError::ProtocolViolation(format!(
            "expected hello as first message, got {}",
            other.type_name()
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GateVerdict {
    Pass,
    Violation(String),
}

/// Per-client pinch window tracker: wrist samples are legal only between `PinchStart` and
/// `PinchEnd`, with strictly increasing `seq`.
#[derive(Clone, Debug, Default)]
pub struct PinchGate {
    open: bool,
    last_seq: Option<u64>,
}

impl PinchGate {
    pub fn is_open(&self) -> bool {
        self.open
    }

    pub fn check(&mut self, msg: &WireMessage) -> GateVerdict {
        match msg {
            WireMessage::PinchStart { .. } => {
                if self.open {
                    return GateVerdict::Violation("pinch_start while already pinching".into());
                }
                self.open = true;
                self.last_seq = None;
                GateVerdict::Pass
            }
            WireMessage::WristSample { seq, .. } => {
                if !self.open {
                    return GateVerdict::Violation(format!("wrist sample {seq} outside a pinch"));
                }
                if self.last_seq.is_some_and(|last| *seq <= last) {
                    return GateVerdict::Violation(format!("wrist seq {seq} not increasing"));
                }
                self.last_seq = Some(*seq);
                GateVerdict::Pass
            }
            WireMessage::PinchEnd { .. } => {
                if !self.open {
                    return GateVerdict::Violation("pinch_end without pinch_start".into());
                }
                self.open = false;
                GateVerdict::Pass
            }
            _ => GateVerdict::Pass,
        }
    }

    /// Forces the window closed (e.g. on disconnect).
    pub fn reset(&mut self) {
        self.open = false;
        self.last_seq = None;
    }
}
