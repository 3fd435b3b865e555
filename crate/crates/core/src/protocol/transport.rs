//! Duplex channels between the coordinator and one client.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::TcpStream;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use super::message::Envelope;
use crate::error::{Result, VfemError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransportKind {
    #[default]
    InProcess,
    Socket,
}

impl std::str::FromStr for TransportKind {
    type Err = VfemError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inproc" | "in-process" => Ok(Self::InProcess),
            "socket" => Ok(Self::Socket),
            other => Err(VfemError::InvalidConfig(format!("unknown transport {other:?}"))),
        }
    }
}

/// How long a blocked receiver waits before declaring the peer gone.
pub const RECV_TIMEOUT: Duration = Duration::from_secs(120);

/// One end of a FIFO duplex channel.
pub trait Endpoint: Send {
    fn send(&mut self, env: Envelope) -> Result<()>;
    fn recv(&mut self) -> Result<Envelope>;
}

pub struct ChannelEndpoint {
    tx: Sender<Envelope>,
    rx: Receiver<Envelope>,
}

/// A connected pair of in-process endpoints.
pub fn channel_pair() -> (ChannelEndpoint, ChannelEndpoint) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (ChannelEndpoint { tx: a_tx, rx: a_rx }, ChannelEndpoint { tx: b_tx, rx: b_rx })
}

impl Endpoint for ChannelEndpoint {
    fn send(&mut self, env: Envelope) -> Result<()> {
        self.tx.send(env).map_err(|_| VfemError::Transport("peer hung up".into()))
    }

    fn recv(&mut self) -> Result<Envelope> {
        self.rx.recv_timeout(RECV_TIMEOUT).map_err(|e| match e {
            RecvTimeoutError::Timeout => VfemError::Transport("receive timed out".into()),
            RecvTimeoutError::Disconnected => VfemError::Transport("peer hung up".into()),
        })
    }
}

/// Newline-delimited records over a loopback TCP stream.
pub struct SocketEndpoint {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    line: String,
}

impl SocketEndpoint {
    pub fn new(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(RECV_TIMEOUT))?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(Self { reader, writer: BufWriter::new(stream), line: String::new() })
    }
}

impl Endpoint for SocketEndpoint {
    fn send(&mut self, env: Envelope) -> Result<()> {
        let line = env.encode()?;
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| VfemError::Transport(format!("socket write: {e}")))
    }

    fn recv(&mut self) -> Result<Envelope> {
        self.line.clear();
        let read = self
            .reader
            .read_line(&mut self.line)
            .map_err(|e| VfemError::Transport(format!("socket read: {e}")))?;
        if read == 0 {
            return Err(VfemError::Transport("peer hung up".into()));
        }
        Envelope::decode(&self.line)
    }
}

/// Message and canonical byte counts for one direction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrafficCounter {
    pub messages: u64,
    pub bytes: u64,
}

impl TrafficCounter {
    pub fn record(&mut self, env: &Envelope) {
        self.messages += 1;
        self.bytes += env.wire_bytes() as u64;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Traffic {
    /// Coordinator to clients.
    pub down: TrafficCounter,
    /// Clients to coordinator.
    pub up: TrafficCounter,
}

impl Traffic {
    pub fn bytes(&self) -> u64 {
        self.down.bytes + self.up.bytes
    }

    pub fn messages(&self) -> u64 {
        self.down.messages + self.up.messages
    }

    pub fn since(&self, earlier: &Traffic) -> Traffic {
        Traffic {
            down: TrafficCounter {
                messages: self.down.messages - earlier.down.messages,
                bytes: self.down.bytes - earlier.down.bytes,
            },
            up: TrafficCounter {
                messages: self.up.messages - earlier.up.messages,
                bytes: self.up.bytes - earlier.up.bytes,
            },
        }
    }
}

/// Append-only message log in wire format.
pub struct TraceWriter {
    out: BufWriter<std::fs::File>,
}

impl TraceWriter {
    pub fn create(path: &std::path::Path) -> Result<Self> {
        Ok(Self { out: BufWriter::new(std::fs::File::create(path)?) })
    }

    pub fn write(&mut self, env: &Envelope) -> Result<()> {
        self.out.write_all(env.encode()?.as_bytes())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
