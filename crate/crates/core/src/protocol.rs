//! Length-prefixed binary messages exchanged between runners, server shards
//! and the launcher.
//!
//! Frame: `u32 LE length | u8 tag | body`, where `length` counts the tag plus
//! the body. Integers are little-endian: `u32` for ids, indices, cycles and
//! step counts, `u64` for offsets, lengths and timestamps. Payload reals are
//! IEEE-754 binary64 little-endian. The byte-level contract, with worked hex
//! examples, is in `docs/protocol.md`.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};

/// Largest accepted `length` field (tag + body).
pub const MAX_FRAME_LEN: usize = 1 << 31;

/// `member_id` carried by the registration expose, which holds no member.
pub const NO_MEMBER: u32 = u32::MAX;

/// Heartbeat `sender_id` used by the server towards the launcher.
pub const SERVER_SENDER_ID: u32 = 0;

pub mod tag {
    pub const RUNNER_HELLO: u8 = 0x01;
    pub const HELLO_ACK: u8 = 0x02;
    pub const STATE_PUSH: u8 = 0x03;
    pub const ASSIGN: u8 = 0x04;
    pub const STOP: u8 = 0x05;
    pub const HEARTBEAT: u8 = 0x06;
    pub const RUNNER_GONE: u8 = 0x07;
    pub const CYCLE_DONE: u8 = 0x08;
    pub const STUDY_DONE: u8 = 0x09;
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    RunnerHello {
        runner_id: u32,
        part_index: u32,
        parts: u32,
        /// Length of this part's slice of the dynamic state.
        n_dynamic: u64,
    },
    HelloAck {
        /// Shard endpoints as `host:port`; its length is the shard count S.
        shard_endpoints: Vec<String>,
        n_dynamic: u64,
        n_assimilated: u64,
    },
    StatePush {
        member_id: u32,
        cycle: u32,
        part_index: u32,
        range_offset: u64,
        payload: Vec<f64>,
    },
    Assign {
        member_id: u32,
        cycle: u32,
        nsteps: u32,
        range_offset: u64,
        payload: Vec<f64>,
    },
    Stop,
    Heartbeat {
        sender_id: u32,
        timestamp_ms: u64,
    },
    RunnerGone {
        runner_id: u32,
    },
    CycleDone {
        cycle: u32,
    },
    StudyDone,
}

impl WireMessage {
    pub fn tag(&self) -> u8 {
        match self {
            WireMessage::RunnerHello { .. } => tag::RUNNER_HELLO,
            WireMessage::HelloAck { .. } => tag::HELLO_ACK,
            WireMessage::StatePush { .. } => tag::STATE_PUSH,
            WireMessage::Assign { .. } => tag::ASSIGN,
            WireMessage::Stop => tag::STOP,
            WireMessage::Heartbeat { .. } => tag::HEARTBEAT,
            WireMessage::RunnerGone { .. } => tag::RUNNER_GONE,
            WireMessage::CycleDone { .. } => tag::CYCLE_DONE,
            WireMessage::StudyDone => tag::STUDY_DONE,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            WireMessage::RunnerHello { .. } => "RUNNER_HELLO",
            WireMessage::HelloAck { .. } => "HELLO_ACK",
            WireMessage::StatePush { .. } => "STATE_PUSH",
            WireMessage::Assign { .. } => "ASSIGN",
            WireMessage::Stop => "STOP",
            WireMessage::Heartbeat { .. } => "HEARTBEAT",
            WireMessage::RunnerGone { .. } => "RUNNER_GONE",
            WireMessage::CycleDone { .. } => "CYCLE_DONE",
            WireMessage::StudyDone => "STUDY_DONE",
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_payload(out: &mut Vec<u8>, payload: &[f64]) {
    put_u64(out, payload.len() as u64);
    out.reserve(payload.len() * 8);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(msg: &WireMessage) -> Result<Vec<u8>> {
    let mut out = vec![0u8; 4];
    out.push(msg.tag());
    match msg {
        WireMessage::RunnerHello {
            runner_id,
            part_index,
            parts,
            n_dynamic,
        } => {
            put_u32(&mut out, *runner_id);
            put_u32(&mut out, *part_index);
            put_u32(&mut out, *parts);
            put_u64(&mut out, *n_dynamic);
        }
        WireMessage::HelloAck {
            shard_endpoints,
            n_dynamic,
            n_assimilated,
        } => {
            put_u32(&mut out, shard_endpoints.len() as u32);
            for ep in shard_endpoints {
                put_u32(&mut out, ep.len() as u32);
                out.extend_from_slice(ep.as_bytes());
            }
            put_u64(&mut out, *n_dynamic);
            put_u64(&mut out, *n_assimilated);
        }
        WireMessage::StatePush {
            member_id,
            cycle,
            part_index,
            range_offset,
            payload,
        } => {
            put_u32(&mut out, *member_id);
            put_u32(&mut out, *cycle);
            put_u32(&mut out, *part_index);
            put_u64(&mut out, *range_offset);
            put_payload(&mut out, payload);
        }
        WireMessage::Assign {
            member_id,
            cycle,
            nsteps,
            range_offset,
            payload,
        } => {
            put_u32(&mut out, *member_id);
            put_u32(&mut out, *cycle);
            put_u32(&mut out, *nsteps);
            put_u64(&mut out, *range_offset);
            put_payload(&mut out, payload);
        }
        WireMessage::Stop | WireMessage::StudyDone => {}
        WireMessage::Heartbeat {
            sender_id,
            timestamp_ms,
        } => {
            put_u32(&mut out, *sender_id);
            put_u64(&mut out, *timestamp_ms);
        }
        WireMessage::RunnerGone { runner_id } => put_u32(&mut out, *runner_id),
        WireMessage::CycleDone { cycle } => put_u32(&mut out, *cycle),
    }
    let len = out.len() - 4;
    if len > MAX_FRAME_LEN {
        return Err(Error::Encoding(format!(
            "{} frame of {len} bytes exceeds the 2^31 limit",
            msg.kind()
        )));
    }
    out[..4].copy_from_slice(&(len as u32).to_le_bytes());
    Ok(out)
}

struct BodyReader<'a> {
    buf: &'a [u8],
    kind: &'static str,
}

impl<'a> BodyReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::protocol(format!("{} body too short", self.kind)));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn payload(&mut self) -> Result<Vec<f64>> {
        let len = self.u64()?;
        let bytes = len
            .checked_mul(8)
            .filter(|b| *b as usize == self.buf.len())
            .ok_or_else(|| {
                Error::protocol(format!(
                    "{} payload of {} bytes does not match range_len {len}",
                    self.kind,
                    self.buf.len()
                ))
            })?;
        Ok(self
            .take(bytes as usize)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(Error::protocol(format!(
                "{} body has {} trailing bytes",
                self.kind,
                self.buf.len()
            )))
        }
    }
}

fn decode_body(tag: u8, body: &[u8]) -> Result<WireMessage> {
    let kind = match tag {
        tag::RUNNER_HELLO => "RUNNER_HELLO",
        tag::HELLO_ACK => "HELLO_ACK",
        tag::STATE_PUSH => "STATE_PUSH",
        tag::ASSIGN => "ASSIGN",
        tag::STOP => "STOP",
        tag::HEARTBEAT => "HEARTBEAT",
        tag::RUNNER_GONE => "RUNNER_GONE",
        tag::CYCLE_DONE => "CYCLE_DONE",
        tag::STUDY_DONE => "STUDY_DONE",
        other => return Err(Error::protocol(format!("unknown message tag 0x{other:02X}"))),
    };
    let mut r = BodyReader { buf: body, kind };
    let msg = match tag {
        tag::RUNNER_HELLO => WireMessage::RunnerHello {
            runner_id: r.u32()?,
            part_index: r.u32()?,
            parts: r.u32()?,
            n_dynamic: r.u64()?,
        },
        tag::HELLO_ACK => {
            let count = r.u32()?;
            let mut shard_endpoints = Vec::new();
            for _ in 0..count {
                let len = r.u32()? as usize;
                let raw = r.take(len)?;
                let ep = std::str::from_utf8(raw)
                    .map_err(|_| Error::protocol("HELLO_ACK endpoint is not UTF-8"))?;
                shard_endpoints.push(ep.to_owned());
            }
            WireMessage::HelloAck {
                shard_endpoints,
                n_dynamic: r.u64()?,
                n_assimilated: r.u64()?,
            }
        }
        tag::STATE_PUSH => WireMessage::StatePush {
            member_id: r.u32()?,
            cycle: r.u32()?,
            part_index: r.u32()?,
            range_offset: r.u64()?,
            payload: r.payload()?,
        },
        tag::ASSIGN => WireMessage::Assign {
            member_id: r.u32()?,
            cycle: r.u32()?,
            nsteps: r.u32()?,
            range_offset: r.u64()?,
            payload: r.payload()?,
        },
        tag::STOP => WireMessage::Stop,
        tag::HEARTBEAT => WireMessage::Heartbeat {
            sender_id: r.u32()?,
            timestamp_ms: r.u64()?,
        },
        tag::RUNNER_GONE => WireMessage::RunnerGone {
            runner_id: r.u32()?,
        },
        tag::CYCLE_DONE => WireMessage::CycleDone { cycle: r.u32()? },
        _ => WireMessage::StudyDone,
    };
    r.finish()?;
    Ok(msg)
}

/// Decodes the frame at the start of `buf`.
///
/// Returns `Ok(None)` when the frame is not complete yet, otherwise the
/// message and the number of bytes it occupied.
pub fn decode(buf: &[u8]) -> Result<Option<(WireMessage, usize)>> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let len = u32::from_le_bytes(buf[..4].try_into().unwrap()) as usize;
    if len == 0 {
        return Err(Error::protocol("frame without a tag byte"));
    }
    if len > MAX_FRAME_LEN {
        return Err(Error::protocol(format!("frame length {len} exceeds limit")));
    }
    if buf.len() < 4 + len {
        return Ok(None);
    }
    let msg = decode_body(buf[4], &buf[5..4 + len])?;
    Ok(Some((msg, 4 + len)))
}

/// Incremental decoder for byte streams delivered in arbitrary chunks.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn next_message(&mut self) -> Result<Option<WireMessage>> {
        match decode(&self.buf)? {
            Some((msg, used)) => {
                self.buf.drain(..used);
                Ok(Some(msg))
            }
            None => Ok(None),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

pub fn write_message<W: Write + ?Sized>(w: &mut W, msg: &WireMessage) -> Result<()> {
    w.write_all(&encode(msg)?)?;
    w.flush()?;
    Ok(())
}

/// Reads one whole frame. `Ok(None)` means the peer closed the stream cleanly
/// at a frame boundary.
pub fn read_message<R: Read + ?Sized>(r: &mut R) -> Result<Option<WireMessage>> {
    let mut header = [0u8; 5];
    let mut got = 0;
    while got < header.len() {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(Error::Io(io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    "stream closed inside a frame header",
                )))
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(header[..4].try_into().unwrap()) as usize;
    if len == 0 {
        return Err(Error::protocol("frame without a tag byte"));
    }
    if len > MAX_FRAME_LEN {
        return Err(Error::protocol(format!("frame length {len} exceeds limit")));
    }
    let mut body = vec![0u8; len - 1];
    r.read_exact(&mut body)?;
    decode_body(header[4], &body).map(Some)
}
