//! Binary framing: magic `GKT1`, message type byte, body length (u64 LE),
//! body. Tensors travel as rank (u8) + dims (u32 LE each) + f32 LE data;
//! all integers are little endian.

use super::{
    ClientUpload, DownloadBatch, Message, ProtocolError, ServerDownload, UploadBatch,
};
use crate::tensor::Tensor;
use std::io::{Read, Write};

pub(crate) const MAGIC: &[u8; 4] = b"GKT1";
pub(crate) const HEADER_LEN: usize = 4 + 1 + 8;

const T_HELLO: u8 = 1;
const T_ROUND_BEGIN: u8 = 2;
const T_BYE: u8 = 3;
const T_ERROR: u8 = 4;
const T_UPLOAD: u8 = 5;
const T_DOWNLOAD: u8 = 6;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    buf.push(t.shape().len() as u8);
    for &d in t.shape() {
        put_u32(buf, d as u32);
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn tensor_wire_len(t: &Tensor) -> u64 {
    1 + 4 * t.shape().len() as u64 + 4 * t.numel() as u64
}

fn body_and_type(m: &Message) -> (u8, Vec<u8>) {
    let mut b = Vec::new();
    let t = match m {
        Message::Hello {
            client_id,
            model_hash,
        } => {
            put_u32(&mut b, *client_id);
            put_u64(&mut b, *model_hash);
            T_HELLO
        }
        Message::RoundBegin {
            round,
            shuffle_seed,
        } => {
            put_u32(&mut b, *round);
            put_u64(&mut b, *shuffle_seed);
            T_ROUND_BEGIN
        }
        Message::Bye => T_BYE,
        Message::Error { code, text } => {
            put_u32(&mut b, *code);
            put_u32(&mut b, text.len() as u32);
            b.extend_from_slice(text.as_bytes());
            T_ERROR
        }
        Message::Upload(u) => {
            put_u32(&mut b, u.client_id);
            put_u32(&mut b, u.round);
            put_u32(&mut b, u.batches.len() as u32);
            for batch in &u.batches {
                put_u32(&mut b, batch.b_idx);
                put_tensor(&mut b, &batch.features);
                put_tensor(&mut b, &batch.logits);
                put_u32(&mut b, batch.labels.len() as u32);
                for &l in &batch.labels {
                    put_u32(&mut b, l);
                }
            }
            T_UPLOAD
        }
        Message::Download(d) => {
            put_u32(&mut b, d.client_id);
            put_u32(&mut b, d.round);
            put_u32(&mut b, d.batches.len() as u32);
            for batch in &d.batches {
                put_u32(&mut b, batch.b_idx);
                put_tensor(&mut b, &batch.logits);
            }
            T_DOWNLOAD
        }
    };
    (t, b)
}

pub fn encode(m: &Message) -> Vec<u8> {
    let (ty, body) = body_and_type(m);
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(MAGIC);
    out.push(ty);
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

/// Exact on-wire byte count, computed without materializing the encoding.
pub fn measure_bytes(m: &Message) -> u64 {
    let body: u64 = match m {
        Message::Hello { .. } => 4 + 8,
        Message::RoundBegin { .. } => 4 + 8,
        Message::Bye => 0,
        Message::Error { text, .. } => 4 + 4 + text.len() as u64,
        Message::Upload(u) => {
            let mut n = 12u64;
            for b in &u.batches {
                n += 4
                    + tensor_wire_len(&b.features)
                    + tensor_wire_len(&b.logits)
                    + 4
                    + 4 * b.labels.len() as u64;
            }
            n
        }
        Message::Download(d) => {
            let mut n = 12u64;
            for b in &d.batches {
                n += 4 + tensor_wire_len(&b.logits);
            }
            n
        }
    };
    HEADER_LEN as u64 + body
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.pos + n > self.buf.len() {
            return Err(ProtocolError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor, ProtocolError> {
        let rank = self.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = self.u32()? as u64;
            numel = numel.checked_mul(d).ok_or(ProtocolError::Overflow)?;
            if numel > u32::MAX as u64 {
                return Err(ProtocolError::Overflow);
            }
            dims.push(d as usize);
        }
        let raw = self.take(numel as usize * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(dims, data).map_err(|e| ProtocolError::BadPayload(e.to_string()))
    }
}

fn decode_body(ty: u8, body: &[u8]) -> Result<Message, ProtocolError> {
    let mut c = Cursor { buf: body, pos: 0 };
    let msg = match ty {
        T_HELLO => Message::Hello {
            client_id: c.u32()?,
            model_hash: c.u64()?,
        },
        T_ROUND_BEGIN => Message::RoundBegin {
            round: c.u32()?,
            shuffle_seed: c.u64()?,
        },
        T_BYE => Message::Bye,
        T_ERROR => {
            let code = c.u32()?;
            let len = c.u32()? as usize;
            let text = std::str::from_utf8(c.take(len)?)
                .map_err(|_| ProtocolError::BadPayload("non-utf8 error text".into()))?
                .to_string();
            Message::Error { code, text }
        }
        T_UPLOAD => {
            let client_id = c.u32()?;
            let round = c.u32()?;
            let count = c.u32()? as usize;
            let mut batches = Vec::with_capacity(count.min(1 << 16));
            for _ in 0..count {
                let b_idx = c.u32()?;
                let features = c.tensor()?;
                let logits = c.tensor()?;
                let nl = c.u32()? as usize;
                let mut labels = Vec::with_capacity(nl.min(1 << 20));
                for _ in 0..nl {
                    labels.push(c.u32()?);
                }
                batches.push(UploadBatch {
                    b_idx,
                    features,
                    logits,
                    labels,
                });
            }
            let u = ClientUpload {
                client_id,
                round,
                batches,
            };
            u.validate()?;
            Message::Upload(u)
        }
        T_DOWNLOAD => {
            let client_id = c.u32()?;
            let round = c.u32()?;
            let count = c.u32()? as usize;
            let mut batches = Vec::with_capacity(count.min(1 << 16));
            for _ in 0..count {
                let b_idx = c.u32()?;
                let logits = c.tensor()?;
                batches.push(DownloadBatch { b_idx, logits });
            }
            let d = ServerDownload {
                client_id,
                round,
                batches,
            };
            d.validate()?;
            Message::Download(d)
        }
        other => return Err(ProtocolError::UnknownType(other)),
    };
    if c.pos != body.len() {
        return Err(ProtocolError::BadPayload("trailing bytes in body".into()));
    }
    Ok(msg)
}

pub fn decode(bytes: &[u8]) -> Result<Message, ProtocolError> {
    if bytes.len() < HEADER_LEN {
        return Err(ProtocolError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(ProtocolError::BadMagic);
    }
    let ty = bytes[4];
    let len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    if bytes.len() != HEADER_LEN + len {
        return Err(ProtocolError::Truncated);
    }
    decode_body(ty, &bytes[HEADER_LEN..])
}

/// Write one framed message to a stream.
pub fn write_message(w: &mut impl Write, m: &Message) -> Result<(), ProtocolError> {
    let bytes = encode(m);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Read one framed message from a stream, enforcing the size cap.
///
/// A clean EOF before any header byte maps to `Disconnected`; EOF inside a
/// frame maps to `Truncated`.
pub fn read_message(r: &mut impl Read, size_cap: u64) -> Result<Message, ProtocolError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0usize;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) => {
                return Err(if got == 0 {
                    ProtocolError::Disconnected
                } else {
                    ProtocolError::Truncated
                })
            }
            Ok(n) => got += n,
            Err(e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut =>
            {
                return Err(ProtocolError::Timeout)
            }
            Err(e) => return Err(e.into()),
        }
    }
    if &header[..4] != MAGIC {
        return Err(ProtocolError::BadMagic);
    }
    let ty = header[4];
    let len = u64::from_le_bytes(header[5..13].try_into().unwrap());
    if len > size_cap {
        return Err(ProtocolError::Oversized {
            size: len,
            cap: size_cap,
        });
    }
    let mut body = vec![0u8; len as usize];
    let mut got = 0usize;
    while got < body.len() {
        match r.read(&mut body[got..]) {
            Ok(0) => return Err(ProtocolError::Truncated),
            Ok(n) => got += n,
            Err(e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut =>
            {
                return Err(ProtocolError::Timeout)
            }
            Err(e) => return Err(e.into()),
        }
    }
    decode_body(ty, &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_upload() -> Message {
        Message::Upload(ClientUpload {
            client_id: 2,
            round: 7,
            batches: vec![
                UploadBatch {
                    b_idx: 0,
                    features: Tensor::from_fn(&[2, 3, 4, 4], |i| i as f32 * 0.5),
                    logits: Tensor::from_fn(&[2, 10], |i| -(i as f32)),
                    labels: vec![3, 9],
                },
                UploadBatch {
                    b_idx: 1,
                    features: Tensor::from_fn(&[1, 3, 4, 4], |i| i as f32),
                    logits: Tensor::from_fn(&[1, 10], |i| i as f32),
                    labels: vec![0],
                },
            ],
        })
    }

    #[test]
    fn upload_fixture_round_trips() {
        let m = sample_upload();
        let bytes = encode(&m);
        assert_eq!(decode(&bytes).unwrap(), m);
    }

    #[test]
    fn all_control_messages_round_trip() {
        for m in [
            Message::Hello {
                client_id: 3,
                model_hash: 0xDEAD_BEEF,
            },
            Message::RoundBegin {
                round: 9,
                shuffle_seed: 12345,
            },
            Message::Bye,
            Message::Error {
                code: 2,
                text: "nope".into(),
            },
        ] {
            assert_eq!(decode(&encode(&m)).unwrap(), m);
        }
    }

    #[test]
    fn flipped_magic_is_bad_magic() {
        let mut bytes = encode(&Message::Bye);
        bytes[0] ^= 0xFF;
        assert!(matches!(decode(&bytes), Err(ProtocolError::BadMagic)));
    }

    #[test]
    fn truncation_and_unknown_type_are_distinct_errors() {
        let bytes = encode(&sample_upload());
        assert!(matches!(
            decode(&bytes[..bytes.len() - 1]),
            Err(ProtocolError::Truncated)
        ));
        let mut bad = encode(&Message::Bye);
        bad[4] = 99;
        assert!(matches!(decode(&bad), Err(ProtocolError::UnknownType(99))));
    }

    #[test]
    fn dimension_overflow_is_rejected() {
        // header + hand-built download body whose tensor dims multiply
        // past u32::MAX
        let mut body = Vec::new();
        body.extend_from_slice(&1u32.to_le_bytes()); // client
        body.extend_from_slice(&0u32.to_le_bytes()); // round
        body.extend_from_slice(&1u32.to_le_bytes()); // one batch
        body.extend_from_slice(&0u32.to_le_bytes()); // b_idx
        body.push(2); // rank
        body.extend_from_slice(&u32::MAX.to_le_bytes());
        body.extend_from_slice(&u32::MAX.to_le_bytes());
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.push(6);
        bytes.extend_from_slice(&(body.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&body);
        assert!(matches!(decode(&bytes), Err(ProtocolError::Overflow)));
    }

    #[test]
    fn download_length_matches_framing_arithmetic() {
        // one batch of 4x10 logits:
        // header 13 + client 4 + round 4 + count 4 + b_idx 4
        //   + tensor (1 + 2*4 dims + 40*4 data)
        let m = Message::Download(ServerDownload {
            client_id: 0,
            round: 0,
            batches: vec![DownloadBatch {
                b_idx: 5,
                logits: Tensor::zeros(&[4, 10]),
            }],
        });
        let expect = 13 + 4 + 4 + 4 + 4 + (1 + 8 + 160);
        assert_eq!(encode(&m).len(), expect);
        assert_eq!(measure_bytes(&m), expect as u64);
    }

    #[test]
    fn measure_bytes_equals_encoded_length_for_fixtures() {
        for m in [
            sample_upload(),
            Message::Bye,
            Message::Hello {
                client_id: 1,
                model_hash: 2,
            },
            Message::Error {
                code: 1,
                text: "text".into(),
            },
        ] {
            assert_eq!(measure_bytes(&m), encode(&m).len() as u64);
        }
    }

    #[test]
    fn empty_batch_upload_is_header_plus_fixed_fields() {
        let m = Message::Upload(ClientUpload {
            client_id: 0,
            round: 0,
            batches: vec![],
        });
        assert_eq!(measure_bytes(&m), 13 + 12);
    }

    #[test]
    fn non_increasing_batch_indices_rejected() {
        let m = Message::Upload(ClientUpload {
            client_id: 0,
            round: 0,
            batches: vec![
                UploadBatch {
                    b_idx: 1,
                    features: Tensor::zeros(&[1, 1, 2, 2]),
                    logits: Tensor::zeros(&[1, 3]),
                    labels: vec![0],
                },
                UploadBatch {
                    b_idx: 1,
                    features: Tensor::zeros(&[1, 1, 2, 2]),
                    logits: Tensor::zeros(&[1, 3]),
                    labels: vec![0],
                },
            ],
        });
        assert!(matches!(
            decode(&encode(&m)),
            Err(ProtocolError::BadPayload(_))
        ));
    }

    #[test]
    fn stream_reader_enforces_size_cap() {
        let bytes = encode(&sample_upload());
        let mut r = std::io::Cursor::new(bytes);
        assert!(matches!(
            read_message(&mut r, 16),
            Err(ProtocolError::Oversized { .. })
        ));
    }
}
