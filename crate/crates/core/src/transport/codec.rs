//! Frame layout (all integers little-endian):
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `FEDR`                  |
//! | 4      | 1    | version (1)                   |
//! | 5      | 1    | kind                          |
//! | 6      | 4    | round (u32)                   |
//! | 10     | 2    | learner index (u16)           |
//! | 12     | 8    | payload length (u64)          |
//! | 20     | n    | payload                       |
//! | 20 + n | 4    | CRC32 (IEEE) of bytes 0..20+n |

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FEDR";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 20;
pub const CRC_LEN: usize = 4;
pub const DEFAULT_MAX_PAYLOAD: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Kind {
    Register = 1,
    Assign = 2,
    Update = 3,
    Community = 4,
    Shutdown = 5,
    Error = 6,
}

impl Kind {
    pub const ALL: [Kind; 6] = [
        Kind::Register,
        Kind::Assign,
        Kind::Update,
        Kind::Community,
        Kind::Shutdown,
        Kind::Error,
    ];

    pub fn from_byte(b: u8) -> Option<Kind> {
        Kind::ALL.into_iter().find(|k| *k as u8 == b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub kind: Kind,
    pub round: u32,
    pub learner_index: u16,
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn new(kind: Kind, round: u32, learner_index: u16, payload: Vec<u8>) -> Self {
        Envelope {
            kind,
            round,
            learner_index,
            payload,
        }
    }

    pub fn frame_len(&self) -> usize {
        HEADER_LEN + self.payload.len() + CRC_LEN
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("frame truncated: need {needed} bytes, have {got}")]
    Truncated { needed: usize, got: usize },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("payload of {len} bytes exceeds limit of {max}")]
    Oversize { len: u64, max: usize },
    #[error("crc mismatch: frame says {expected:#010x}, computed {actual:#010x}")]
    CrcMismatch { expected: u32, actual: u32 },
    #[error("{0} unexpected bytes after frame")]
    TrailingBytes(usize),
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("malformed payload: {0}")]
    Payload(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Codec {
    pub max_payload: usize,
}

impl Default for Codec {
    fn default() -> Self {
        Codec {
            max_payload: DEFAULT_MAX_PAYLOAD,
        }
    }
}

struct Header {
    kind: u8,
    round: u32,
    learner_index: u16,
    payload_len: usize,
}

impl Codec {
    pub fn with_max_payload(max_payload: usize) -> Self {
        Codec { max_payload }
    }

    pub fn encode(&self, env: &Envelope) -> Result<Vec<u8>> {
        if env.payload.len() > self.max_payload {
            return Err(DecodeError::Oversize {
                len: env.payload.len() as u64,
                max: self.max_payload,
            }
            .into());
        }
        let mut out = Vec::with_capacity(env.frame_len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(env.kind as u8);
        out.extend_from_slice(&env.round.to_le_bytes());
        out.extend_from_slice(&env.learner_index.to_le_bytes());
        out.extend_from_slice(&(env.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&env.payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    fn parse_header(&self, h: &[u8]) -> Result<Header, DecodeError> {
        if h[..4] != MAGIC {
            return Err(DecodeError::BadMagic(h[..4].try_into().unwrap()));
        }
        if h[4] != VERSION {
            return Err(DecodeError::UnsupportedVersion(h[4]));
        }
        let len = u64::from_le_bytes(h[12..20].try_into().unwrap());
        if len > self.max_payload as u64 {
            return Err(DecodeError::Oversize {
                len,
                max: self.max_payload,
            });
        }
        Ok(Header {
            kind: h[5],
            round: u32::from_le_bytes(h[6..10].try_into().unwrap()),
            learner_index: u16::from_le_bytes(h[10..12].try_into().unwrap()),
            payload_len: len as usize,
        })
    }

    fn finish(
        header: Header,
        body: &[u8],
        crc_bytes: &[u8],
        payload: Vec<u8>,
    ) -> Result<Envelope, DecodeError> {
        let expected = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        let actual = crc32fast::hash(body);
        if expected != actual {
            return Err(DecodeError::CrcMismatch { expected, actual });
        }
        let kind = Kind::from_byte(header.kind).ok_or(DecodeError::UnknownKind(header.kind))?;
        Ok(Envelope {
            kind,
            round: header.round,
            learner_index: header.learner_index,
            payload,
        })
    }

    /// Decode exactly one frame occupying all of `bytes`.
    pub fn decode(&self, bytes: &[u8]) -> Result<Envelope, DecodeError> {
        let min = HEADER_LEN + CRC_LEN;
        if bytes.len() < min {
            return Err(DecodeError::Truncated {
                needed: min,
                got: bytes.len(),
            });
        }
        let header = self.parse_header(&bytes[..HEADER_LEN])?;
        let total = HEADER_LEN + header.payload_len + CRC_LEN;
        if bytes.len() < total {
            return Err(DecodeError::Truncated {
                needed: total,
                got: bytes.len(),
            });
        }
        if bytes.len() > total {
            return Err(DecodeError::TrailingBytes(bytes.len() - total));
        }
        let body_end = total - CRC_LEN;
        let payload = bytes[HEADER_LEN..body_end].to_vec();
        Codec::finish(header, &bytes[..body_end], &bytes[body_end..], payload)
    }

    /// Read one frame from a stream. A clean end-of-stream before the first
    /// byte is reported as [`Error::Disconnected`].
    pub fn read_frame(&self, r: &mut impl Read) -> Result<Envelope> {
        let mut buf = vec![0u8; HEADER_LEN];
        let got = read_full(r, &mut buf)?;
        if got == 0 {
            return Err(Error::Disconnected);
        }
        if got < HEADER_LEN {
            return Err(DecodeError::Truncated {
                needed: HEADER_LEN,
                got,
            }
            .into());
        }
        let header = self.parse_header(&buf)?;
        let total = HEADER_LEN + header.payload_len + CRC_LEN;
        buf.resize(total, 0);
        let got = read_full(r, &mut buf[HEADER_LEN..])?;
        if got < total - HEADER_LEN {
            return Err(DecodeError::Truncated {
                needed: total,
                got: HEADER_LEN + got,
            }
            .into());
        }
        let body_end = total - CRC_LEN;
        let payload = buf[HEADER_LEN..body_end].to_vec();
        Ok(Codec::finish(
            header,
            &buf[..body_end],
            &buf[body_end..],
            payload,
        )?)
    }

    pub fn write_frame(&self, w: &mut impl Write, env: &Envelope) -> Result<usize> {
        let bytes = self.encode(env)?;
        w.write_all(&bytes)?;
        w.flush()?;
        Ok(bytes.len())
    }
}

/// Fill `buf` unless the stream ends first; returns bytes read.
fn read_full(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_payload_frame_size() {
        let env = Envelope::new(Kind::Update, 3, 1, Vec::new());
        let bytes = Codec::default().encode(&env).unwrap();
        assert_eq!(bytes.len(), 24);
        assert_eq!(Codec::default().decode(&bytes).unwrap(), env);
    }

    #[test]
    fn header_fields_are_little_endian() {
        let env = Envelope::new(Kind::Assign, 0x0102_0304, 0x0506, vec![0xaa]);
        let b = Codec::default().encode(&env).unwrap();
        assert_eq!(&b[..4], b"FEDR");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..10], &[4, 3, 2, 1]);
        assert_eq!(&b[10..12], &[6, 5]);
        assert_eq!(&b[12..20], &[1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(b[20], 0xaa);
    }

    #[test]
    fn distinct_error_kinds() {
        let codec = Codec::default();
        let good = codec
            .encode(&Envelope::new(Kind::Register, 0, 0, vec![1, 2, 3]))
            .unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(codec.decode(&bad), Err(DecodeError::BadMagic(_))));

        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(codec.decode(&bad), Err(DecodeError::UnsupportedVersion(2)));

        let mut bad = good.clone();
        bad[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(
            codec.decode(&bad),
            Err(DecodeError::Oversize { .. })
        ));

        let mut bad = good.clone();
        bad[21] ^= 1;
        assert!(matches!(
            codec.decode(&bad),
            Err(DecodeError::CrcMismatch { .. })
        ));

        assert!(matches!(
            codec.decode(&good[..10]),
            Err(DecodeError::Truncated { .. })
        ));
        assert!(matches!(
            codec.decode(&good[..good.len() - 1]),
            Err(DecodeError::Truncated { .. })
        ));

        let mut long = good.clone();
        long.push(0);
        assert_eq!(codec.decode(&long), Err(DecodeError::TrailingBytes(1)));
    }

    #[test]
    fn unknown_kind_with_valid_crc() {
        let codec = Codec::default();
        let mut b = codec
            .encode(&Envelope::new(Kind::Shutdown, 0, 0, vec![]))
            .unwrap();
        b[5] = 9;
        let n = b.len();
        let crc = crc32fast::hash(&b[..n - 4]);
        b[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert_eq!(codec.decode(&b), Err(DecodeError::UnknownKind(9)));
    }

    #[test]
    fn encode_respects_limit() {
        let codec = Codec::with_max_payload(4);
        assert!(codec
            .encode(&Envelope::new(Kind::Update, 0, 0, vec![0; 5]))
            .is_err());
        assert!(codec
            .encode(&Envelope::new(Kind::Update, 0, 0, vec![0; 4]))
            .is_ok());
    }

    #[test]
    fn stream_reading() {
        let codec = Codec::default();
        let a = Envelope::new(Kind::Assign, 1, 2, vec![9; 100]);
        let b = Envelope::new(Kind::Shutdown, 1, 2, vec![]);
        let mut stream = Vec::new();
        codec.write_frame(&mut stream, &a).unwrap();
        codec.write_frame(&mut stream, &b).unwrap();
        let mut cursor = std::io::Cursor::new(stream.clone());
        assert_eq!(codec.read_frame(&mut cursor).unwrap(), a);
        assert_eq!(codec.read_frame(&mut cursor).unwrap(), b);
        assert!(matches!(
            codec.read_frame(&mut cursor),
            Err(Error::Disconnected)
        ));

        let mut cut = std::io::Cursor::new(stream[..50].to_vec());
        assert!(matches!(
            codec.read_frame(&mut cut),
            Err(Error::Decode(DecodeError::Truncated { .. }))
        ));
    }
}
