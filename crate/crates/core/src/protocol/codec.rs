//! Envelope encoding.
//!
//! A message body is the JSON rendering of an [`Envelope`]. Over a plain
//! byte stream each body is preceded by its length as a big-endian `u32`,
//! so frames delimit themselves without relying on connection closure.

use thiserror::Error;

use crate::protocol::Envelope;

/// Largest accepted frame body, 64 MiB.
pub const DEFAULT_MAX_FRAME: usize = 64 << 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("frame of {size} bytes exceeds the {max}-byte limit")]
    Oversized { size: usize, max: usize },
    #[error("unknown message type: {0}")]
    UnknownVariant(String),
    #[error("malformed message at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("message {got} from {sender} is not after {last}")]
    OutOfOrder { sender: String, last: u64, got: u64 },
    #[error("protocol version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
}

pub fn encode(envelope: &Envelope) -> Vec<u8> {
    serde_json::to_vec(envelope).expect("envelopes always serialise")
}

/// Decodes one frame body. Never panics on arbitrary input.
pub fn decode(bytes: &[u8], max_frame: usize) -> Result<Envelope, ProtocolError> {
    if bytes.len() > max_frame {
        return Err(ProtocolError::Oversized {
            size: bytes.len(),
            max: max_frame,
        });
    }
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let result: Result<Envelope, _> = serde_path_to_error::deserialize(&mut de);
    let envelope = result.map_err(|e| {
        let path = e.path().to_string();
        let message = e.inner().to_string();
        if message.starts_with("unknown variant") {
            ProtocolError::UnknownVariant(message)
        } else {
            ProtocolError::Schema { path, message }
        }
    })?;
    de.end().map_err(|e| ProtocolError::Schema {
        path: String::new(),
        message: e.to_string(),
    })?;
    Ok(envelope)
}

/// Length-prefixed frame for byte-stream transports.
pub fn encode_frame(envelope: &Envelope) -> Vec<u8> {
    let body = encode(envelope);
    let len = u32::try_from(body.len()).expect("frame fits in u32");
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(&body);
    out
}

/// Incremental decoder for length-prefixed frames.
#[derive(Debug)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    max_frame: usize,
}

impl FrameDecoder {
    pub fn new(max_frame: usize) -> Self {
        Self {
            buf: Vec::new(),
            max_frame,
        }
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete frame, if one is buffered.
    ///
    /// An oversized header is reported once and its bytes are discarded as
    /// they arrive; the stream is unusable afterwards.
    pub fn next_frame(&mut self) -> Option<Result<Envelope, ProtocolError>> {
        if self.buf.len() < 4 {
            return None;
        }
        let len = u32::from_be_bytes(self.buf[..4].try_into().expect("4 bytes")) as usize;
        if len > self.max_frame {
            self.buf.clear();
            return Some(Err(ProtocolError::Oversized {
                size: len,
                max: self.max_frame,
            }));
        }
        if self.buf.len() < 4 + len {
            return None;
        }
        let frame: Vec<u8> = self.buf.drain(..4 + len).skip(4).collect();
        Some(decode(&frame, self.max_frame))
    }
}
