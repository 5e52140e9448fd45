//! Cut-interface framing and carriers.
//!
//! Frame layout (little-endian):
//!
//! | bytes | field                                  |
//! |-------|----------------------------------------|
//! | 4     | magic `SPL1`                           |
//! | 1     | message type                           |
//! | 4     | client id (u32)                        |
//! | 8     | step (u64)                             |
//! | 4     | batch (u32)                            |
//! | 4     | dim (u32)                              |
//! | 16    | `SETUP_R` only: d u32, k u32, seed u64 |
//! | 4·b·d | binary32 payload                       |

use std::io::{ErrorKind, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::Tensor;

pub const MAGIC: [u8; 4] = *b"SPL1";
pub const HEADER_LEN: usize = 25;
pub const SETUP_EXT_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MsgType {
    SetupR = 0x01,
    ZFwd = 0x02,
    UFwd = 0x03,
    GradU = 0x04,
    GradZ = 0x05,
}

impl MsgType {
    pub fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0x01 => Self::SetupR,
            0x02 => Self::ZFwd,
            0x03 => Self::UFwd,
            0x04 => Self::GradU,
            0x05 => Self::GradZ,
            other => return Err(Error::UnsupportedVersion(other)),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::SetupR => "SETUP_R",
            Self::ZFwd => "Z_FWD",
            Self::UFwd => "U_FWD",
            Self::GradU => "GRAD_U",
            Self::GradZ => "GRAD_Z",
        }
    }
}

/// Extension header carried by `SETUP_R`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SetupHeader {
    pub d: u32,
    pub k: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub msg_type: MsgType,
    pub client_id: u32,
    pub step: u64,
    pub batch: u32,
    pub dim: u32,
    pub setup: Option<SetupHeader>,
    pub payload: Vec<f32>,
}

impl WireMessage {
    /// Builds a data message from a `[batch, dim]` view of `t`.
    pub fn from_tensor(msg_type: MsgType, client_id: u32, step: u64, t: &Tensor) -> Result<Self> {
        if msg_type == MsgType::SetupR {
            return Err(invalid("use WireMessage::setup for SETUP_R"));
        }
        let batch = t.batch();
        let dim = t.row_len();
        Ok(Self {
            msg_type,
            client_id,
            step,
            batch: u32::try_from(batch).map_err(|_| invalid("batch exceeds u32"))?,
            dim: u32::try_from(dim).map_err(|_| invalid("dim exceeds u32"))?,
            setup: None,
            payload: t.data().to_vec(),
        })
    }

    /// `SETUP_R` carrying a row-major `d x k` basis.
    pub fn setup(client_id: u32, basis: &Tensor, seed: u64) -> Result<Self> {
        let (d, k) = match basis.shape() {
            [d, k] => (*d, *k),
            s => return Err(invalid(format!("basis must be rank 2, got {s:?}"))),
        };
        Ok(Self {
            msg_type: MsgType::SetupR,
            client_id,
            step: 0,
            batch: 1,
            dim: (d * k) as u32,
            setup: Some(SetupHeader {
                d: d as u32,
                k: k as u32,
                seed,
            }),
            payload: basis.data().to_vec(),
        })
    }

    /// Payload as `[batch, dim]`.
    pub fn tensor(&self) -> Result<Tensor> {
        Tensor::new(vec![self.batch as usize, self.dim as usize], self.payload.clone())
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN
            + if self.setup.is_some() { SETUP_EXT_LEN } else { 0 }
            + 4 * self.payload.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.batch as u64 * self.dim as u64;
        if n != self.payload.len() as u64 {
            return Err(invalid(format!(
                "declared {}x{} values but payload has {}",
                self.batch,
                self.dim,
                self.payload.len()
            )));
        }
        match (self.msg_type, &self.setup) {
            (MsgType::SetupR, Some(h)) => {
                if self.batch != 1 || h.d as u64 * h.k as u64 != self.dim as u64 {
                    return Err(invalid("SETUP_R needs batch 1 and dim = d*k"));
                }
            }
            (MsgType::SetupR, None) => return Err(invalid("SETUP_R without extension header")),
            (_, Some(_)) => return Err(invalid("only SETUP_R carries an extension header")),
            _ => {}
        }
        Ok(())
    }
}

pub fn encode(msg: &WireMessage) -> Result<Vec<u8>> {
    msg.validate()?;
    let mut out = Vec::with_capacity(msg.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(msg.msg_type as u8);
    out.extend_from_slice(&msg.client_id.to_le_bytes());
    out.extend_from_slice(&msg.step.to_le_bytes());
    out.extend_from_slice(&msg.batch.to_le_bytes());
    out.extend_from_slice(&msg.dim.to_le_bytes());
    if let Some(h) = &msg.setup {
        out.extend_from_slice(&h.d.to_le_bytes());
        out.extend_from_slice(&h.k.to_le_bytes());
        out.extend_from_slice(&h.seed.to_le_bytes());
    }
    for v in &msg.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

/// Total frame length implied by a header, checked for sanity.
fn frame_len(header: &[u8]) -> Result<(MsgType, usize)> {
    if header[..4] != MAGIC {
        return Err(Error::CorruptFrame(format!("bad magic {:02x?}", &header[..4])));
    }
    let ty = MsgType::from_byte(header[4])?;
    let batch = u32_at(header, 17) as u64;
    let dim = u32_at(header, 21) as u64;
    let ext = if ty == MsgType::SetupR { SETUP_EXT_LEN as u64 } else { 0 };
    let too_large = || Error::CorruptFrame(format!("frame of {batch}x{dim} values is too large"));
    let total = (batch * dim)
        .checked_mul(4)
        .and_then(|p| p.checked_add(HEADER_LEN as u64 + ext))
        .ok_or_else(too_large)?;
    let total = usize::try_from(total).map_err(|_| too_large())?;
    Ok((ty, total))
}

/// Decodes one frame from the front of `bytes`, returning it and its length.
pub fn decode_frame(bytes: &[u8]) -> Result<(WireMessage, usize)> {
    let probe = bytes.len().min(4);
    if bytes[..probe] != MAGIC[..probe] {
        return Err(Error::CorruptFrame(format!("bad magic {:02x?}", &bytes[..probe])));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::IncompleteFrame {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let (ty, total) = frame_len(bytes)?;
    if bytes.len() < total {
        return Err(Error::IncompleteFrame {
            needed: total,
            available: bytes.len(),
        });
    }
    let batch = u32_at(bytes, 17);
    let dim = u32_at(bytes, 21);
    let mut at = HEADER_LEN;
    let setup = if ty == MsgType::SetupR {
        let h = SetupHeader {
            d: u32_at(bytes, at),
            k: u32_at(bytes, at + 4),
            seed: u64_at(bytes, at + 8),
        };
        at += SETUP_EXT_LEN;
        if batch != 1 || h.d as u64 * h.k as u64 != dim as u64 {
            return Err(Error::CorruptFrame("SETUP_R header inconsistent with d*k".into()));
        }
        Some(h)
    } else {
        None
    };
    let payload = bytes[at..total]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((
        WireMessage {
            msg_type: ty,
            client_id: u32_at(bytes, 5),
            step: u64_at(bytes, 9),
            batch,
            dim,
            setup,
            payload,
        },
        total,
    ))
}

/// Decodes exactly one frame; trailing bytes are a corrupt frame.
pub fn decode(bytes: &[u8]) -> Result<WireMessage> {
    let (m, used) = decode_frame(bytes)?;
    if used != bytes.len() {
        return Err(Error::CorruptFrame(format!(
            "{} trailing bytes after frame",
            bytes.len() - used
        )));
    }
    Ok(m)
}

/// Per-direction traffic counters (encoded frame bytes).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteCounters {
    pub sent_bytes: u64,
    pub recv_bytes: u64,
    pub sent_msgs: u64,
    pub recv_msgs: u64,
}

/// One side of a lossless, ordered message carrier.
pub trait Endpoint: Send {
    fn send(&mut self, msg: &WireMessage) -> Result<()>;
    fn recv(&mut self) -> Result<WireMessage>;
    fn counters(&self) -> ByteCounters;
}

/// In-process carrier over a pair of channels of encoded frames.
pub struct ChannelEndpoint {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    timeout: Option<Duration>,
    counters: ByteCounters,
}

pub fn channel_pair() -> (ChannelEndpoint, ChannelEndpoint) {
    let (atx, brx) = mpsc::channel();
    let (btx, arx) = mpsc::channel();
    let mk = |tx, rx| ChannelEndpoint {
        tx,
        rx,
        timeout: None,
        counters: ByteCounters::default(),
    };
    (mk(atx, arx), mk(btx, brx))
}

impl ChannelEndpoint {
    pub fn set_timeout(&mut self, timeout: Option<Duration>) {
        self.timeout = timeout;
    }
}

impl Endpoint for ChannelEndpoint {
    fn send(&mut self, msg: &WireMessage) -> Result<()> {
        let bytes = encode(msg)?;
        let n = bytes.len() as u64;
        self.tx.send(bytes).map_err(|_| Error::Disconnected)?;
        self.counters.sent_bytes += n;
        self.counters.sent_msgs += 1;
        Ok(())
    }

    fn recv(&mut self) -> Result<WireMessage> {
        let bytes = match self.timeout {
            Some(t) => self.rx.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => Error::TimedOut,
                RecvTimeoutError::Disconnected => Error::Disconnected,
            })?,
            None => self.rx.recv().map_err(|_| Error::Disconnected)?,
        };
        let msg = decode(&bytes)?;
        self.counters.recv_bytes += bytes.len() as u64;
        self.counters.recv_msgs += 1;
        Ok(msg)
    }

    fn counters(&self) -> ByteCounters {
        self.counters
    }
}

/// TCP carrier; frames are written back to back on the stream.
pub struct TcpEndpoint {
    stream: TcpStream,
    counters: ByteCounters,
}

fn map_io(e: std::io::Error) -> Error {
    match e.kind() {
        ErrorKind::UnexpectedEof
        | ErrorKind::ConnectionReset
        | ErrorKind::ConnectionAborted
        | ErrorKind::BrokenPipe => Error::Disconnected,
        ErrorKind::WouldBlock | ErrorKind::TimedOut => Error::TimedOut,
        _ => Error::Io(e),
    }
}

impl TcpEndpoint {
    pub fn from_stream(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Self {
            stream,
            counters: ByteCounters::default(),
        })
    }

    pub fn set_timeout(&mut self, timeout: Option<Duration>) -> Result<()> {
        self.stream.set_read_timeout(timeout)?;
        Ok(())
    }

    /// A second handle on the same connection, e.g. for a dedicated reader thread.
    pub fn try_clone(&self) -> Result<Self> {
        Self::from_stream(self.stream.try_clone()?)
    }
}

impl Endpoint for TcpEndpoint {
    fn send(&mut self, msg: &WireMessage) -> Result<()> {
        let bytes = encode(msg)?;
        self.stream.write_all(&bytes).map_err(map_io)?;
        self.counters.sent_bytes += bytes.len() as u64;
        self.counters.sent_msgs += 1;
        Ok(())
    }

    fn recv(&mut self) -> Result<WireMessage> {
        let mut header = vec![0u8; HEADER_LEN];
        self.stream.read_exact(&mut header).map_err(map_io)?;
        let (_, total) = frame_len(&header)?;
        header.resize(total, 0);
        self.stream.read_exact(&mut header[HEADER_LEN..]).map_err(map_io)?;
        let msg = decode(&header)?;
        self.counters.recv_bytes += total as u64;
        self.counters.recv_msgs += 1;
        Ok(msg)
    }

    fn counters(&self) -> ByteCounters {
        self.counters
    }
}

pub struct TcpAcceptor {
    listener: TcpListener,
}

pub fn tcp_listen(addr: impl ToSocketAddrs) -> Result<TcpAcceptor> {
    Ok(TcpAcceptor {
        listener: TcpListener::bind(addr)?,
    })
}

impl TcpAcceptor {
    pub fn local_addr(&self) -> Result<std::net::SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    pub fn accept(&self) -> Result<TcpEndpoint> {
        let (s, _) = self.listener.accept()?;
        TcpEndpoint::from_stream(s)
    }
}

pub fn tcp_connect(addr: impl ToSocketAddrs) -> Result<TcpEndpoint> {
    TcpEndpoint::from_stream(TcpStream::connect(addr)?)
}
