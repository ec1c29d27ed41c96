//! Transport endpoints with identical semantics in process and over TCP:
//! reliable, ordered delivery of framed messages, with a configurable
//! receive timeout and message size cap. Both endpoints count the exact
//! on-wire bytes they move so round metrics can report measured traffic.

use super::codec::{decode, encode, read_message, write_message, measure_bytes};
use super::{Message, ProtocolError};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::time::Duration;

/// 1 GiB default message size cap.
pub const DEFAULT_SIZE_CAP: u64 = 1 << 30;

pub trait Transport: Send {
    fn send(&mut self, m: &Message) -> Result<(), ProtocolError>;
    fn recv(&mut self) -> Result<Message, ProtocolError>;
    fn bytes_sent(&self) -> u64;
    fn bytes_received(&self) -> u64;
}

/// Channel-backed endpoint. Messages still pass through the binary codec,
/// so in-process and TCP runs exercise identical encodings.
pub struct InProcessTransport {
    tx: mpsc::Sender<Vec<u8>>,
    rx: mpsc::Receiver<Vec<u8>>,
    size_cap: u64,
    recv_timeout: Option<Duration>,
    sent: u64,
    received: u64,
}

impl InProcessTransport {
    /// A connected pair of endpoints.
    pub fn pair() -> (InProcessTransport, InProcessTransport) {
        let (atx, brx) = mpsc::channel();
        let (btx, arx) = mpsc::channel();
        let make = |tx, rx| InProcessTransport {
            tx,
            rx,
            size_cap: DEFAULT_SIZE_CAP,
            recv_timeout: None,
            sent: 0,
            received: 0,
        };
        (make(atx, arx), make(btx, brx))
    }

    pub fn set_size_cap(&mut self, cap: u64) {
        self.size_cap = cap;
    }

    pub fn set_recv_timeout(&mut self, t: Option<Duration>) {
        self.recv_timeout = t;
    }

    /// Split into independently owned send and receive halves, so one
    /// thread can drain the inbound direction while another sends.
    pub fn split(self) -> (InProcessSendHalf, InProcessRecvHalf) {
        (
            InProcessSendHalf {
                tx: self.tx,
                size_cap: self.size_cap,
                sent: self.sent,
            },
            InProcessRecvHalf {
                rx: self.rx,
                size_cap: self.size_cap,
                received: self.received,
            },
        )
    }
}

pub struct InProcessSendHalf {
    tx: mpsc::Sender<Vec<u8>>,
    size_cap: u64,
    sent: u64,
}

impl InProcessSendHalf {
    pub fn send(&mut self, m: &Message) -> Result<(), ProtocolError> {
        let bytes = encode(m);
        let size = bytes.len() as u64;
        if size > self.size_cap {
            return Err(ProtocolError::Oversized {
                size,
                cap: self.size_cap,
            });
        }
        self.tx
            .send(bytes)
            .map_err(|_| ProtocolError::Disconnected)?;
        self.sent += size;
        Ok(())
    }

    pub fn bytes_sent(&self) -> u64 {
        self.sent
    }
}

pub struct InProcessRecvHalf {
    rx: mpsc::Receiver<Vec<u8>>,
    size_cap: u64,
    received: u64,
}

impl InProcessRecvHalf {
    pub fn recv(&mut self) -> Result<Message, ProtocolError> {
        let bytes = self.rx.recv().map_err(|_| ProtocolError::Disconnected)?;
        let size = bytes.len() as u64;
        if size > self.size_cap {
            return Err(ProtocolError::Oversized {
                size,
                cap: self.size_cap,
            });
        }
        let m = decode(&bytes)?;
        self.received += size;
        Ok(m)
    }

    pub fn bytes_received(&self) -> u64 {
        self.received
    }
}

impl Transport for InProcessTransport {
    fn send(&mut self, m: &Message) -> Result<(), ProtocolError> {
        let bytes = encode(m);
        let size = bytes.len() as u64;
        if size > self.size_cap {
            return Err(ProtocolError::Oversized {
                size,
                cap: self.size_cap,
            });
        }
        self.tx
            .send(bytes)
            .map_err(|_| ProtocolError::Disconnected)?;
        self.sent += size;
        Ok(())
    }

    fn recv(&mut self) -> Result<Message, ProtocolError> {
        let bytes = match self.recv_timeout {
            Some(t) => self.rx.recv_timeout(t).map_err(|e| match e {
                mpsc::RecvTimeoutError::Timeout => ProtocolError::Timeout,
                mpsc::RecvTimeoutError::Disconnected => ProtocolError::Disconnected,
            })?,
            None => self.rx.recv().map_err(|_| ProtocolError::Disconnected)?,
        };
        let size = bytes.len() as u64;
        if size > self.size_cap {
            return Err(ProtocolError::Oversized {
                size,
                cap: self.size_cap,
            });
        }
        let m = decode(&bytes)?;
        self.received += size;
        Ok(m)
    }

    fn bytes_sent(&self) -> u64 {
        self.sent
    }

    fn bytes_received(&self) -> u64 {
        self.received
    }
}

/// Framed messages over a TCP stream.
pub struct TcpTransport {
    stream: TcpStream,
    size_cap: u64,
    sent: u64,
    received: u64,
}

impl TcpTransport {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<TcpTransport, ProtocolError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true).ok();
        Ok(TcpTransport::from_stream(stream))
    }

    pub fn from_stream(stream: TcpStream) -> TcpTransport {
        stream.set_nodelay(true).ok();
        TcpTransport {
            stream,
            size_cap: DEFAULT_SIZE_CAP,
            sent: 0,
            received: 0,
        }
    }

    pub fn set_size_cap(&mut self, cap: u64) {
        self.size_cap = cap;
    }

    pub fn set_recv_timeout(&mut self, t: Option<Duration>) -> Result<(), ProtocolError> {
        self.stream.set_read_timeout(t)?;
        Ok(())
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, m: &Message) -> Result<(), ProtocolError> {
        let size = measure_bytes(m);
        if size > self.size_cap {
            return Err(ProtocolError::Oversized {
                size,
                cap: self.size_cap,
            });
        }
        write_message(&mut self.stream, m)?;
        self.sent += size;
        Ok(())
    }

    fn recv(&mut self) -> Result<Message, ProtocolError> {
        let m = read_message(&mut self.stream, self.size_cap)?;
        self.received += measure_bytes(&m);
        Ok(m)
    }

    fn bytes_sent(&self) -> u64 {
        self.sent
    }

    fn bytes_received(&self) -> u64 {
        self.received
    }
}

/// TCP endpoint whose receive side is drained by a background reader
/// thread. Lets a single-threaded driver send a large message to a peer it
/// will only service later without blocking on the socket buffer.
pub struct PumpedTcpTransport {
    stream: TcpStream,
    rx: mpsc::Receiver<Result<Message, ProtocolError>>,
    size_cap: u64,
    sent: u64,
    received: u64,
}

impl PumpedTcpTransport {
    pub fn new(stream: TcpStream, size_cap: u64) -> Result<PumpedTcpTransport, ProtocolError> {
        stream.set_nodelay(true).ok();
        let mut read_half = stream.try_clone()?;
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || loop {
            let res = read_message(&mut read_half, size_cap);
            let stop = res.is_err();
            if tx.send(res).is_err() || stop {
                break;
            }
        });
        Ok(PumpedTcpTransport {
            stream,
            rx,
            size_cap,
            sent: 0,
            received: 0,
        })
    }
}

impl Transport for PumpedTcpTransport {
    fn send(&mut self, m: &Message) -> Result<(), ProtocolError> {
        let size = measure_bytes(m);
        if size > self.size_cap {
            return Err(ProtocolError::Oversized {
                size,
                cap: self.size_cap,
            });
        }
        write_message(&mut self.stream, m)?;
        self.sent += size;
        Ok(())
    }

    fn recv(&mut self) -> Result<Message, ProtocolError> {
        let m = self
            .rx
            .recv()
            .map_err(|_| ProtocolError::Disconnected)??;
        self.received += measure_bytes(&m);
        Ok(m)
    }

    fn bytes_sent(&self) -> u64 {
        self.sent
    }

    fn bytes_received(&self) -> u64 {
        self.received
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{ClientUpload, UploadBatch};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;
    use std::net::TcpListener;

    // never yields Bye: the echo servers below treat Bye as shutdown
    fn random_message(rng: &mut ChaCha8Rng) -> Message {
        match rng.gen_range(0..4) {
            0 => Message::Hello {
                client_id: rng.gen(),
                model_hash: rng.gen(),
            },
            1 => Message::RoundBegin {
                round: rng.gen(),
                shuffle_seed: rng.gen(),
            },
            2 => Message::Error {
                code: rng.gen_range(0..8),
                text: "induced".into(),
            },
            _ => {
                let n = rng.gen_range(1..4usize);
                let batches = (0..rng.gen_range(1..4u32))
                    .map(|i| UploadBatch {
                        b_idx: i,
                        features: Tensor::from_fn(&[n, 2, 3, 3], |_| rng.gen_range(-1.0f32..1.0)),
                        logits: Tensor::from_fn(&[n, 4], |_| rng.gen_range(-1.0f32..1.0)),
                        labels: (0..n).map(|_| rng.gen_range(0..4u32)).collect(),
                    })
                    .collect();
                Message::Upload(ClientUpload {
                    client_id: rng.gen_range(0..8),
                    round: rng.gen_range(0..100),
                    batches,
                })
            }
        }
    }

    #[test]
    fn in_process_echo_of_100_random_messages() {
        let (mut a, mut b) = InProcessTransport::pair();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let m = random_message(&mut rng);
            a.send(&m).unwrap();
            let got = b.recv().unwrap();
            assert_eq!(got, m);
            b.send(&got).unwrap();
            assert_eq!(a.recv().unwrap(), m);
        }
        assert_eq!(a.bytes_sent(), b.bytes_received());
        assert_eq!(a.bytes_sent(), a.bytes_received());
    }

    #[test]
    fn tcp_loopback_echo_matches_in_process_byte_counts() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut t = TcpTransport::from_stream(stream);
            loop {
                match t.recv() {
                    Ok(Message::Bye) => break t,
                    Ok(m) => t.send(&m).unwrap(),
                    Err(e) => panic!("server recv: {e}"),
                }
            }
        });
        let mut client = TcpTransport::connect(addr).unwrap();
        let (mut ip_a, mut ip_b) = InProcessTransport::pair();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let m = random_message(&mut rng);
            client.send(&m).unwrap();
            assert_eq!(client.recv().unwrap(), m);
            ip_a.send(&m).unwrap();
            ip_b.recv().unwrap();
        }
        client.send(&Message::Bye).unwrap();
        let server_t = server.join().unwrap();
        // transport transparency: identical traffic modulo the final Bye
        assert_eq!(
            client.bytes_sent(),
            ip_a.bytes_sent() + measure_bytes(&Message::Bye)
        );
        assert_eq!(client.bytes_received(), ip_b.bytes_received());
        assert_eq!(server_t.bytes_received(), client.bytes_sent());
    }

    #[test]
    fn mid_message_disconnect_is_truncation_not_corruption() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let writer = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let bytes = encode(&Message::Hello {
                client_id: 1,
                model_hash: 2,
            });
            stream.write_all(&bytes[..bytes.len() / 2]).unwrap();
            // drop mid-frame
        });
        let mut t = TcpTransport::connect(addr).unwrap();
        let err = t.recv().unwrap_err();
        assert!(
            matches!(err, ProtocolError::Truncated),
            "got {err:?}"
        );
        writer.join().unwrap();
    }

    #[test]
    fn clean_disconnect_and_timeout_are_distinct() {
        let (a, mut b) = InProcessTransport::pair();
        b.set_recv_timeout(Some(Duration::from_millis(20)));
        assert!(matches!(b.recv(), Err(ProtocolError::Timeout)));
        drop(a);
        assert!(matches!(b.recv(), Err(ProtocolError::Disconnected)));
    }

    #[test]
    fn oversized_message_rejected_on_send() {
        let (mut a, _b) = InProcessTransport::pair();
        a.set_size_cap(16);
        let err = a
            .send(&Message::Error {
                code: 0,
                text: "x".repeat(64),
            })
            .unwrap_err();
        assert!(matches!(err, ProtocolError::Oversized { .. }));
    }
}
