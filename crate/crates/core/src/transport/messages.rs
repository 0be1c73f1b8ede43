//! Typed payloads carried inside [`Envelope`]s.
//!
//! Parameter vectors use the `ParamWire` layout: a u16 segment count, then
//! per segment a u16 name length, the UTF-8 name, a u64 element count and
//! the elements as little-endian IEEE-754 doubles.

use crate::error::Result;
use crate::learner::{Hyperparams, LocalUpdate, TaskAssignment};
use crate::model::{ParameterVector, Segment};

use super::codec::{DecodeError, Envelope, Kind};

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Register { num_examples: u64, batch_size: u64 },
    Assign(TaskAssignment),
    Update(LocalUpdate),
    Community(ParameterVector),
    Shutdown,
    Error(String),
}

impl Message {
    pub fn kind(&self) -> Kind {
        match self {
            Message::Register { .. } => Kind::Register,
            Message::Assign(_) => Kind::Assign,
            Message::Update(_) => Kind::Update,
            Message::Community(_) => Kind::Community,
            Message::Shutdown => Kind::Shutdown,
            Message::Error(_) => Kind::Error,
        }
    }

    /// Wrap into an envelope. Assignment and update rounds come from the
    /// message itself; `round` is used for the other kinds.
    pub fn into_envelope(&self, round: u32, learner_index: u16) -> Envelope {
        let mut w = Vec::new();
        let round = match self {
            Message::Register {
                num_examples,
                batch_size,
            } => {
                put_u64(&mut w, *num_examples);
                put_u64(&mut w, *batch_size);
                round
            }
            Message::Assign(t) => {
                put_u64(&mut w, t.num_batches);
                put_f64(&mut w, t.hyperparams.learning_rate);
                put_u64(&mut w, t.hyperparams.batch_size as u64);
                put_u64(&mut w, t.hyperparams.seed);
                put_params(&mut w, &t.community);
                t.round
            }
            Message::Update(u) => {
                put_u64(&mut w, u.num_examples as u64);
                put_u64(&mut w, u.batches_executed);
                put_f64(&mut w, u.batch_time);
                put_f64(&mut w, u.busy_time);
                put_params(&mut w, &u.params);
                u.round
            }
            Message::Community(p) => {
                put_params(&mut w, p);
                round
            }
            Message::Shutdown => round,
            Message::Error(msg) => {
                w.extend_from_slice(msg.as_bytes());
                round
            }
        };
        Envelope::new(self.kind(), round, learner_index, w)
    }

    pub fn from_envelope(env: &Envelope) -> Result<Message, DecodeError> {
        let mut r = Reader::new(&env.payload);
        let msg = match env.kind {
            Kind::Register => Message::Register {
                num_examples: r.u64()?,
                batch_size: r.u64()?,
            },
            Kind::Assign => {
                let num_batches = r.u64()?;
                let hyperparams = Hyperparams {
                    learning_rate: r.f64()?,
                    batch_size: r.usize()?,
                    seed: r.u64()?,
                };
                Message::Assign(TaskAssignment {
                    round: env.round,
                    community: r.params()?,
                    num_batches,
                    hyperparams,
                })
            }
            Kind::Update => {
                let num_examples = r.usize()?;
                let batches_executed = r.u64()?;
                let batch_time = r.f64()?;
                let busy_time = r.f64()?;
                Message::Update(LocalUpdate {
                    learner_index: env.learner_index,
                    round: env.round,
                    params: r.params()?,
                    num_examples,
                    batch_time,
                    busy_time,
                    batches_executed,
                })
            }
            Kind::Community => Message::Community(r.params()?),
            Kind::Shutdown => Message::Shutdown,
            Kind::Error => {
                let text = String::from_utf8(r.rest().to_vec())
                    .map_err(|_| DecodeError::Payload("error text is not UTF-8".into()))?;
                Message::Error(text)
            }
        };
        r.finish()?;
        Ok(msg)
    }
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(w: &mut Vec<u8>, v: f64) {
    w.extend_from_slice(&v.to_le_bytes());
}

pub fn put_params(w: &mut Vec<u8>, p: &ParameterVector) {
    let layout = p.layout();
    w.extend_from_slice(&(layout.len() as u16).to_le_bytes());
    let mut values = p.values().iter();
    for seg in layout {
        w.extend_from_slice(&(seg.name.len() as u16).to_le_bytes());
        w.extend_from_slice(seg.name.as_bytes());
        put_u64(w, seg.len() as u64);
        for v in values.by_ref().take(seg.len()) {
            put_f64(w, *v);
        }
    }
}

/// Decode a standalone `ParamWire` blob.
pub fn decode_params(bytes: &[u8]) -> Result<ParameterVector, DecodeError> {
    let mut r = Reader::new(bytes);
    let p = r.params()?;
    r.finish()?;
    Ok(p)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                DecodeError::Payload(format!("needs {n} more bytes at offset {}", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize, DecodeError> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| DecodeError::Payload(format!("count {v} too large")))
    }

    fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    fn params(&mut self) -> Result<ParameterVector, DecodeError> {
        let segments = self.u16()?;
        let mut layout = Vec::with_capacity(usize::from(segments));
        let mut values = Vec::new();
        for _ in 0..segments {
            let name_len = usize::from(self.u16()?);
            let name = std::str::from_utf8(self.take(name_len)?)
                .map_err(|_| DecodeError::Payload("segment name is not UTF-8".into()))?
                .to_owned();
            let count = self.usize()?;
            let bytes = self.take(
                count
                    .checked_mul(8)
                    .ok_or_else(|| DecodeError::Payload("segment too large".into()))?,
            )?;
            for chunk in bytes.chunks_exact(8) {
                let v = f64::from_le_bytes(chunk.try_into().unwrap());
                if !v.is_finite() {
                    return Err(DecodeError::Payload(format!(
                        "non-finite value in segment `{name}`"
                    )));
                }
                values.push(v);
            }
            layout.push(Segment::new(name, vec![count]));
        }
        Ok(ParameterVector::new(layout, values).expect("lengths counted while decoding"))
    }

    fn finish(&self) -> Result<(), DecodeError> {
        if self.pos != self.buf.len() {
            return Err(DecodeError::Payload(format!(
                "{} unread payload bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}
