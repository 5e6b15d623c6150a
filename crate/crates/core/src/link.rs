//! CRC-framed serial link between the autonomy unit and the firmware.
//!
//! Wire layout (all frames):
//!
//! ```text
//! 0xAA 0x55 | len:u8 | kind:u8 | seq:u16 LE | payload[len] | crc:u16 BE
//! ```
//!
//! The CRC is CRC-16/CCITT-FALSE (poly 0x1021, init 0xFFFF, no reflection,
//! no final xor) over `len`, `kind`, `seq` and the payload. Multi-byte payload
//! fields are little-endian.

use std::collections::VecDeque;

use arrayvec::ArrayVec;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::WheelSpeeds;

pub const SYNC: [u8; 2] = [0xAA, 0x55];
pub const MAX_PAYLOAD: usize = 64;
pub const HEADER_LEN: usize = 6;
pub const MAX_FRAME: usize = HEADER_LEN + MAX_PAYLOAD + 2;

const CRC_TABLE: [u16; 256] = build_crc_table();

const fn build_crc_table() -> [u16; 256] {
    let mut table = [0u16; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = (i as u16) << 8;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 0x8000 != 0 { (crc << 1) ^ 0x1021 } else { crc << 1 };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

/// CRC-16/CCITT-FALSE.
pub fn crc16(bytes: &[u8]) -> u16 {
    bytes.iter().fold(0xFFFF, |crc, &b| {
        (crc << 8) ^ CRC_TABLE[((crc >> 8) as u8 ^ b) as usize]
    })
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LinkError {
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte limit")]
    Oversize(usize),
    #[error("{kind:?} payload must be {expected} bytes, got {actual}")]
    PayloadLength {
        kind: FrameKind,
        expected: usize,
        actual: usize,
    },
    #[error("unknown frame kind 0x{0:02X}")]
    UnknownKind(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum FrameKind {
    CmdVel = 0x01,
    EStop = 0x02,
    Resume = 0x03,
    Lock = 0x04,
    Unlock = 0x05,
    Status = 0x10,
}

impl FrameKind {
    pub fn from_code(code: u8) -> Result<Self, LinkError> {
        Ok(match code {
            0x01 => FrameKind::CmdVel,
            0x02 => FrameKind::EStop,
            0x03 => FrameKind::Resume,
            0x04 => FrameKind::Lock,
            0x05 => FrameKind::Unlock,
            0x10 => FrameKind::Status,
            other => return Err(LinkError::UnknownKind(other)),
        })
    }

    pub fn payload_len(self) -> usize {
        match self {
            FrameKind::CmdVel => CmdVelPayload::LEN,
            FrameKind::Status => StatusPayload::LEN,
            _ => 0,
        }
    }
}

/// Wheel speed command in centi-rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CmdVelPayload {
    pub left: i16,
    pub right: i16,
}

impl CmdVelPayload {
    pub const LEN: usize = 4;

    /// Quantises to 0.01 rad/s, saturating at the i16 range.
    pub fn from_wheels(w: WheelSpeeds) -> Self {
        let q = |v: f64| (v * 100.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        Self {
            left: q(w.left),
            right: q(w.right),
        }
    }

    pub fn wheels(&self) -> WheelSpeeds {
        WheelSpeeds::new(self.left as f64 / 100.0, self.right as f64 / 100.0)
    }

    fn write(&self, out: &mut ArrayVec<u8, MAX_PAYLOAD>) {
        out.extend(self.left.to_le_bytes());
        out.extend(self.right.to_le_bytes());
    }

    fn read(p: &[u8]) -> Self {
        Self {
            left: i16::from_le_bytes([p[0], p[1]]),
            right: i16::from_le_bytes([p[2], p[3]]),
        }
    }
}

/// Periodic firmware status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatusPayload {
    /// Firmware mode code, see [`crate::firmware::Mode::code`].
    pub mode: u8,
    /// 0 locked, 1 unlocked.
    pub lock: u8,
    pub battery_mv: u16,
    pub left_ticks: i32,
    pub right_ticks: i32,
}

impl StatusPayload {
    pub const LEN: usize = 12;

    fn write(&self, out: &mut ArrayVec<u8, MAX_PAYLOAD>) {
        out.push(self.mode);
        out.push(self.lock);
        out.extend(self.battery_mv.to_le_bytes());
        out.extend(self.left_ticks.to_le_bytes());
        out.extend(self.right_ticks.to_le_bytes());
    }

    fn read(p: &[u8]) -> Self {
        Self {
            mode: p[0],
            lock: p[1],
            battery_mv: u16::from_le_bytes([p[2], p[3]]),
            left_ticks: i32::from_le_bytes([p[4], p[5], p[6], p[7]]),
            right_ticks: i32::from_le_bytes([p[8], p[9], p[10], p[11]]),
        }
    }
}

/// Typed view of a frame payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameBody {
    CmdVel(CmdVelPayload),
    EStop,
    Resume,
    Lock,
    Unlock,
    Status(StatusPayload),
}

/// One message on the wire. The payload is kept raw so that a receiver can
/// see (and count) frames whose payload does not fit the kind's schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub seq: u16,
    pub payload: ArrayVec<u8, MAX_PAYLOAD>,
}

impl Frame {
    pub fn new(seq: u16, body: FrameBody) -> Self {
        let mut payload = ArrayVec::new();
        let kind = match body {
            FrameBody::CmdVel(p) => {
                p.write(&mut payload);
                FrameKind::CmdVel
            }
            FrameBody::EStop => FrameKind::EStop,
            FrameBody::Resume => FrameKind::Resume,
            FrameBody::Lock => FrameKind::Lock,
            FrameBody::Unlock => FrameKind::Unlock,
            FrameBody::Status(p) => {
                p.write(&mut payload);
                FrameKind::Status
            }
        };
        Self { kind, seq, payload }
    }

    pub fn body(&self) -> Result<FrameBody, LinkError> {
        let expected = self.kind.payload_len();
        if self.payload.len() != expected {
            return Err(LinkError::PayloadLength {
                kind: self.kind,
                expected,
                actual: self.payload.len(),
            });
        }
        Ok(match self.kind {
            FrameKind::CmdVel => FrameBody::CmdVel(CmdVelPayload::read(&self.payload)),
            FrameKind::EStop => FrameBody::EStop,
            FrameKind::Resume => FrameBody::Resume,
            FrameKind::Lock => FrameBody::Lock,
            FrameKind::Unlock => FrameBody::Unlock,
            FrameKind::Status => FrameBody::Status(StatusPayload::read(&self.payload)),
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>, LinkError> {
        self.body()?;
        encode_raw(self.kind as u8, self.seq, &self.payload)
    }
}

/// Encodes a frame after checking the payload against the kind's schema.
pub fn encode_frame(f: &Frame) -> Result<Vec<u8>, LinkError> {
    f.encode()
}

/// Encodes arbitrary kind/payload bytes without schema checks.
pub fn encode_raw(kind: u8, seq: u16, payload: &[u8]) -> Result<Vec<u8>, LinkError> {
    if payload.len() > MAX_PAYLOAD {
        return Err(LinkError::Oversize(payload.len()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + 2);
    out.extend_from_slice(&SYNC);
    out.push(payload.len() as u8);
    out.push(kind);
    out.extend_from_slice(&seq.to_le_bytes());
    out.extend_from_slice(payload);
    let crc = crc16(&out[2..]);
    out.extend_from_slice(&crc.to_be_bytes());
    Ok(out)
}

/// Monotonic decoder counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecoderStats {
    pub frames: u64,
    pub crc_errors: u64,
    /// CRC-valid frames with an unknown kind or an oversize length byte.
    pub malformed: u64,
    /// Sum of sequence numbers skipped between consecutive frames.
    pub seq_gaps: u64,
}

impl DecoderStats {
    pub fn errors(&self) -> u64 {
        self.crc_errors + self.malformed
    }
}

/// Incremental frame decoder.
///
/// Bytes are buffered until a complete candidate frame is present; on any
/// failure the candidate's first byte is discarded and the remaining bytes
/// are rescanned for a sync pattern. The decoder is a pure function of the
/// byte sequence, so output does not depend on how the input is chunked.
#[derive(Debug, Clone, Default)]
pub struct Decoder {
    buf: ArrayVec<u8, MAX_FRAME>,
    last_seq: Option<u16>,
    stats: DecoderStats,
}

impl Decoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stats(&self) -> DecoderStats {
        self.stats
    }

    pub fn error_count(&self) -> u64 {
        self.stats.errors()
    }

    pub fn feed(&mut self, chunk: &[u8]) -> Vec<Frame> {
        let mut out = Vec::new();
        for &b in chunk {
            self.push(b, &mut out);
        }
        out
    }

    fn push(&mut self, byte: u8, out: &mut Vec<Frame>) {
        self.buf.push(byte);
        self.scan(out);
    }

    fn scan(&mut self, out: &mut Vec<Frame>) {
        loop {
            let buf = &self.buf;
            if buf.is_empty() {
                return;
            }
            if buf[0] != SYNC[0] || (buf.len() >= 2 && buf[1] != SYNC[1]) {
                self.buf.remove(0);
                continue;
            }
            if buf.len() < 3 {
                return;
            }
            let len = buf[2] as usize;
            if len > MAX_PAYLOAD {
                self.stats.malformed += 1;
                self.buf.remove(0);
                continue;
            }
            let total = HEADER_LEN + len + 2;
            if buf.len() < total {
                return;
            }
            let crc = u16::from_be_bytes([buf[total - 2], buf[total - 1]]);
            if crc16(&buf[2..total - 2]) != crc {
                self.stats.crc_errors += 1;
                self.buf.remove(0);
                continue;
            }
            let seq = u16::from_le_bytes([buf[4], buf[5]]);
            match FrameKind::from_code(buf[3]) {
                Ok(kind) => {
                    let payload = buf[HEADER_LEN..HEADER_LEN + len].iter().copied().collect();
                    if let Some(prev) = self.last_seq {
                        self.stats.seq_gaps += seq.wrapping_sub(prev).wrapping_sub(1) as u64;
                    }
                    self.last_seq = Some(seq);
                    self.stats.frames += 1;
                    out.push(Frame { kind, seq, payload });
                    self.buf.clear();
                }
                Err(_) => {
                    self.stats.malformed += 1;
                    self.buf.remove(0);
                }
            }
        }
    }
}

/// Convenience wrapper matching the functional form: feeds `chunk` and returns
/// the delivered frames and the decoder's total error count.
pub fn feed_decoder(d: &mut Decoder, chunk: &[u8]) -> (Vec<Frame>, u64) {
    let frames = d.feed(chunk);
    (frames, d.error_count())
}

/// Per-sender sequence counter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Sequencer(u16);

impl Sequencer {
    pub fn next(&mut self) -> u16 {
        let s = self.0;
        self.0 = self.0.wrapping_add(1);
        s
    }
}

/// Fault model for one direction of the link.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelModel {
    /// One-way latency, s.
    pub latency: f64,
    pub drop_prob: f64,
    pub corrupt_prob: f64,
    /// Closed intervals `[start, end]` (s) during which nothing gets through.
    pub blackouts: Vec<[f64; 2]>,
}

impl ChannelModel {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.latency >= 0.0 && self.latency.is_finite()) {
            return Err("latency must be >= 0".into());
        }
        for (name, p) in [("drop_prob", self.drop_prob), ("corrupt_prob", self.corrupt_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must be in [0, 1]"));
            }
        }
        let mut sorted = self.blackouts.clone();
        sorted.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for w in &sorted {
            if !(w[1] >= w[0]) {
                return Err("blackout intervals need start <= end".into());
            }
        }
        for pair in sorted.windows(2) {
            if pair[1][0] <= pair[0][1] {
                return Err("blackout intervals must not overlap".into());
            }
        }
        Ok(())
    }

    pub fn in_blackout(&self, t: f64) -> bool {
        self.blackouts.iter().any(|w| t >= w[0] && t <= w[1])
    }
}

/// One direction of the serial link with latency and fault injection.
///
/// Drop and corruption are decided when bytes are sent; frames sent during,
/// or due for delivery during, a blackout are lost.
#[derive(Debug, Clone)]
pub struct Channel {
    pub model: ChannelModel,
    inflight: VecDeque<(f64, Vec<u8>)>,
    rng: ChaCha8Rng,
    pub sent: u64,
    pub delivered: u64,
}

impl Channel {
    pub fn new(model: ChannelModel, rng: ChaCha8Rng) -> Self {
        Self {
            model,
            inflight: VecDeque::new(),
            rng,
            sent: 0,
            delivered: 0,
        }
    }

    pub fn send(&mut self, t_now: f64, mut bytes: Vec<u8>) {
        self.sent += 1;
        // Always draw both numbers so the stream does not depend on outcomes.
        let drop_draw: f64 = self.rng.gen();
        let corrupt_draw: f64 = self.rng.gen();
        let bit: usize = self.rng.gen_range(0..bytes.len().max(1) * 8);
        if self.model.in_blackout(t_now) || drop_draw < self.model.drop_prob {
            return;
        }
        if corrupt_draw < self.model.corrupt_prob && !bytes.is_empty() {
            bytes[bit / 8] ^= 1 << (bit % 8);
        }
        self.inflight.push_back((t_now + self.model.latency, bytes));
    }

    /// Returns all bytes due at `t_now`, in send order.
    pub fn step(&mut self, t_now: f64) -> Vec<u8> {
        let mut out = Vec::new();
        while let Some((due, _)) = self.inflight.front() {
            if *due > t_now + 1e-12 {
                break;
            }
            let (due, bytes) = self.inflight.pop_front().expect("front checked");
            if self.model.in_blackout(due) {
                continue;
            }
            self.delivered += 1;
            out.extend_from_slice(&bytes);
        }
        out
    }

    pub fn in_flight(&self) -> usize {
        self.inflight.len()
    }
}
