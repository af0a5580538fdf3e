//! Messages on the streaming socket. Audio travels as binary little-endian
//! PCM16; everything else is JSON text.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ClientMessage {
    Start { session_id: String, sample_rate_hz: u32 },
    End,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServerMessage {
    Segment {
        segment_id: String,
        start_ms: u64,
        duration_ms: u64,
    },
    Transcript {
        segment_id: String,
        text: String,
        queue_wait_ms: u64,
        backend_ms: u64,
        e2e_ms: u64,
    },
    Error {
        /// Set when the error replaces the transcript of one segment.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        segment_id: Option<String>,
        message: String,
    },
    Closed,
}

impl ServerMessage {
    pub fn error(message: impl Into<String>) -> Self {
        Self::Error {
            segment_id: None,
            message: message.into(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages always serialize")
    }
}
