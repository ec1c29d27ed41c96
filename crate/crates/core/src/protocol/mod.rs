//! Message schema and transports for the feature/logit exchange.
//!
//! One upload and one download per client per round: the upload carries
//! every batch's feature maps, client logits and labels; the download
//! returns the server's logits for the same batch indices. Control
//! messages (hello / round_begin / bye / error) frame the session, and
//! `round_begin` carries the shuffle seed so both sides derive identical
//! batch index sequences without shipping them.

mod codec;
mod transport;

pub use codec::{decode, encode, measure_bytes, read_message, write_message};
pub use transport::{
    InProcessRecvHalf, InProcessSendHalf, InProcessTransport, PumpedTcpTransport, TcpTransport,
    Transport, DEFAULT_SIZE_CAP,
};

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("truncated message body")]
    Truncated,
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("tensor dimension product overflows")]
    Overflow,
    #[error("malformed payload: {0}")]
    BadPayload(String),
    #[error("message of {size} bytes exceeds cap of {cap}")]
    Oversized { size: u64, cap: u64 },
    #[error("peer disconnected")]
    Disconnected,
    #[error("receive timed out")]
    Timeout,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One client batch going upstream: the feature map `H`, the client's own
/// logits, and the ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct UploadBatch {
    pub b_idx: u32,
    pub features: Tensor,
    pub logits: Tensor,
    pub labels: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpload {
    pub client_id: u32,
    pub round: u32,
    pub batches: Vec<UploadBatch>,
}

/// Server logits for one batch, keyed by the same `b_idx` as the upload.
#[derive(Debug, Clone, PartialEq)]
pub struct DownloadBatch {
    pub b_idx: u32,
    pub logits: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerDownload {
    pub client_id: u32,
    pub round: u32,
    pub batches: Vec<DownloadBatch>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { client_id: u32, model_hash: u64 },
    RoundBegin { round: u32, shuffle_seed: u64 },
    Bye,
    Error { code: u32, text: String },
    Upload(ClientUpload),
    Download(ServerDownload),
}

impl ClientUpload {
    /// Check the schema invariants: strictly increasing batch indices and
    /// internally consistent batch shapes.
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let mut prev: Option<u32> = None;
        for b in &self.batches {
            if let Some(p) = prev {
                if b.b_idx <= p {
                    return Err(ProtocolError::BadPayload(format!(
                        "batch indices not strictly increasing at {}",
                        b.b_idx
                    )));
                }
            }
            prev = Some(b.b_idx);
            if b.features.shape().len() != 4 {
                return Err(ProtocolError::BadPayload("features must be NCHW".into()));
            }
            if b.logits.shape().len() != 2 {
                return Err(ProtocolError::BadPayload("logits must be NxC".into()));
            }
            let n = b.features.shape()[0];
            if b.logits.shape()[0] != n || b.labels.len() != n {
                return Err(ProtocolError::BadPayload(format!(
                    "batch {} row counts disagree",
                    b.b_idx
                )));
            }
        }
        Ok(())
    }
}

impl ServerDownload {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let mut prev: Option<u32> = None;
        for b in &self.batches {
            if let Some(p) = prev {
                if b.b_idx <= p {
                    return Err(ProtocolError::BadPayload(format!(
                        "batch indices not strictly increasing at {}",
                        b.b_idx
                    )));
                }
            }
            prev = Some(b.b_idx);
            if b.logits.shape().len() != 2 {
                return Err(ProtocolError::BadPayload("logits must be NxC".into()));
            }
        }
        Ok(())
    }

    /// The exact byte count of the logit payloads (the download side of
    /// the closed-form communication cost).
    pub fn payload_bytes(&self) -> u64 {
        self.batches.iter().map(|b| 4 * b.logits.numel() as u64).sum()
    }
}

impl ClientUpload {
    /// The exact byte count of the feature payloads (the upload side of
    /// the closed-form communication cost; client logits and labels ride
    /// along but are not part of the formula).
    pub fn feature_payload_bytes(&self) -> u64 {
        self.batches
            .iter()
            .map(|b| 4 * b.features.numel() as u64)
            .sum()
    }
}
