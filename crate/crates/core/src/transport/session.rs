use std::io::{BufReader, BufWriter};
use std::net::TcpStream;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;

use crate::error::{Error, Result};

use super::codec::{Codec, Envelope, Kind};

/// One ordered, bidirectional frame stream between a learner and the controller.
pub trait Session: Send {
    fn send(&mut self, env: &Envelope) -> Result<()>;
    fn recv(&mut self) -> Result<Envelope>;
}

impl<S: Session + ?Sized> Session for Box<S> {
    fn send(&mut self, env: &Envelope) -> Result<()> {
        (**self).send(env)
    }

    fn recv(&mut self) -> Result<Envelope> {
        (**self).recv()
    }
}

/// Session over in-process channels. Frames cross the channel fully
/// encoded, so both ends exercise the same codec as a socket would.
pub struct InProcSession {
    codec: Codec,
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

/// Two connected in-process session ends.
pub fn in_proc_pair(codec: Codec) -> (InProcSession, InProcSession) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (
        InProcSession {
            codec,
            tx: a_tx,
            rx: a_rx,
        },
        InProcSession {
            codec,
            tx: b_tx,
            rx: b_rx,
        },
    )
}

impl Session for InProcSession {
    fn send(&mut self, env: &Envelope) -> Result<()> {
        let frame = self.codec.encode(env)?;
        self.tx.send(frame).map_err(|_| Error::Disconnected)
    }

    fn recv(&mut self) -> Result<Envelope> {
        let frame = self.rx.recv().map_err(|_| Error::Disconnected)?;
        Ok(self.codec.decode(&frame)?)
    }
}

pub struct TcpSession {
    codec: Codec,
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl TcpSession {
    pub fn new(stream: TcpStream, codec: Codec) -> Result<Self> {
        stream.set_nodelay(true)?;
        Ok(TcpSession {
            codec,
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    pub fn peer(&self) -> Option<std::net::SocketAddr> {
        self.writer.get_ref().peer_addr().ok()
    }
}

impl Session for TcpSession {
    fn send(&mut self, env: &Envelope) -> Result<()> {
        self.codec.write_frame(&mut self.writer, env).map(drop)
    }

    fn recv(&mut self) -> Result<Envelope> {
        self.codec
            .read_frame(&mut self.reader)
            .map_err(|e| match e {
                Error::Io(io) if is_disconnect(&io) => Error::Disconnected,
                other => other,
            })
    }
}

fn is_disconnect(e: &std::io::Error) -> bool {
    use std::io::ErrorKind::*;
    matches!(
        e.kind(),
        ConnectionReset | ConnectionAborted | BrokenPipe | UnexpectedEof
    )
}

/// Frame counters shared by every session of one controller.
#[derive(Debug, Default)]
pub struct TransportStats {
    frames_sent: AtomicU64,
    frames_received: AtomicU64,
    model_sent: AtomicU64,
    model_received: AtomicU64,
    bytes_sent: AtomicU64,
    bytes_received: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StatsSnapshot {
    pub frames_sent: u64,
    pub frames_received: u64,
    /// Model-carrying frames (assignments, updates, community broadcasts)
    /// of federation rounds; the calibration round 0 is not counted.
    pub model_sent: u64,
    pub model_received: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

impl StatsSnapshot {
    pub fn model_messages(&self) -> u64 {
        self.model_sent + self.model_received
    }
}

fn carries_model(env: &Envelope) -> bool {
    env.round > 0 && matches!(env.kind, Kind::Assign | Kind::Update | Kind::Community)
}

impl TransportStats {
    pub fn snapshot(&self) -> StatsSnapshot {
        let get = |a: &AtomicU64| a.load(Ordering::SeqCst);
        StatsSnapshot {
            frames_sent: get(&self.frames_sent),
            frames_received: get(&self.frames_received),
            model_sent: get(&self.model_sent),
            model_received: get(&self.model_received),
            bytes_sent: get(&self.bytes_sent),
            bytes_received: get(&self.bytes_received),
        }
    }

    fn record(&self, env: &Envelope, frames: &AtomicU64, model: &AtomicU64, bytes: &AtomicU64) {
        frames.fetch_add(1, Ordering::SeqCst);
        bytes.fetch_add(env.frame_len() as u64, Ordering::SeqCst);
        if carries_model(env) {
            model.fetch_add(1, Ordering::SeqCst);
        }
    }
}

/// Counts every frame passing through the wrapped session.
pub struct Metered<S> {
    inner: S,
    stats: Arc<TransportStats>,
}

impl<S: Session> Metered<S> {
    pub fn new(inner: S, stats: Arc<TransportStats>) -> Self {
        Metered { inner, stats }
    }
}

impl<S: Session> Session for Metered<S> {
    fn send(&mut self, env: &Envelope) -> Result<()> {
        self.inner.send(env)?;
        let s = &self.stats;
        s.record(env, &s.frames_sent, &s.model_sent, &s.bytes_sent);
        Ok(())
    }

    fn recv(&mut self) -> Result<Envelope> {
        let env = self.inner.recv()?;
        let s = &self.stats;
        s.record(
            &env,
            &s.frames_received,
            &s.model_received,
            &s.bytes_received,
        );
        Ok(env)
    }
}
