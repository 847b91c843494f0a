//! Bit-exact binary codec for the activation-exchange protocol.
//!
//! Frame layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "RDSP"
//! version  u16      = 1
//! msg_type u8       1=smashed 2=grad_at_cut 3=param_pull_request
//!                   4=param_segment 5=param_push
//! round    u32
//! device   u16
//! cut      u8       split index
//! len      u32      payload byte count
//! payload  len bytes
//! ```
//!
//! Payloads are sequences of tensor blocks: `ndims: u8`, `dims: ndims x u32`,
//! row-major f32 data, then a CRC32 of all payload bytes so far. Tensors are
//! 32-bit on the wire; training math stays 64-bit and widens on receipt.
//! See PROTOCOL.md at the repository root for the full reference.

pub mod transport;

pub use transport::{
    loopback_transport, stream_transport, LoopbackEndpoint, StreamEndpoint, Transport,
    TransportError,
};

use ndarray::Array2;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"RDSP";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 18;
/// Frames whose declared payload exceeds this are rejected before allocation.
pub const DEFAULT_MAX_PAYLOAD: u32 = 64 * 1024 * 1024;

/// Typed decode rejections; fuzzed inputs must land in exactly one of these.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtoError {
    #[error("bad magic {found:02x?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported version {found}")]
    BadVersion { found: u16 },
    #[error("unknown message type {0}")]
    UnknownMsgType(u8),
    #[error("truncated frame: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("payload length mismatch: declared {declared}, got {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("payload too large: {len} bytes exceeds cap {cap}")]
    PayloadTooLarge { len: u64, cap: u64 },
    #[error("crc mismatch: stored {stored:08x}, computed {computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("refusing to encode non-finite value in {0}")]
    NonFinite(String),
}

/// Raw tensor block: dims plus row-major f32 data.
#[derive(Debug, Clone, PartialEq)]
pub struct WireTensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl WireTensor {
    pub fn from_matrix(m: &Array2<f64>) -> Self {
        Self {
            dims: vec![m.nrows() as u32, m.ncols() as u32],
            data: m.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_vec_f64(v: &[f64]) -> Self {
        Self {
            dims: vec![v.len() as u32],
            data: v.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<Array2<f64>, ProtoError> {
        if self.dims.len() != 2 {
            return Err(ProtoError::Malformed(format!(
                "expected 2-d tensor, got {} dims",
                self.dims.len()
            )));
        }
        let (r, c) = (self.dims[0] as usize, self.dims[1] as usize);
        Array2::from_shape_vec((r, c), self.data.iter().map(|&v| v as f64).collect())
            .map_err(|e| ProtoError::Malformed(e.to_string()))
    }

    pub fn to_vec_f64(&self) -> Result<Vec<f64>, ProtoError> {
        if self.dims.len() != 1 {
            return Err(ProtoError::Malformed(format!(
                "expected 1-d tensor, got {} dims",
                self.dims.len()
            )));
        }
        Ok(self.data.iter().map(|&v| v as f64).collect())
    }

    fn element_count(&self) -> Result<usize, ProtoError> {
        let mut product: u64 = 1;
        for &d in &self.dims {
            product = product
                .checked_mul(d as u64)
                .ok_or_else(|| ProtoError::Malformed("dims product overflows".into()))?;
        }
        usize::try_from(product).map_err(|_| ProtoError::Malformed("dims product overflows".into()))
    }
}

/// Decoded protocol message. Labels ride as f32; class ids stay exact well
/// past any realistic class count.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Smashed {
        round: u32,
        device_id: u16,
        split: u8,
        activations: WireTensor,
        labels: Vec<u32>,
    },
    GradAtCut {
        round: u32,
        device_id: u16,
        split: u8,
        grad: WireTensor,
        loss: f32,
        batch_accuracy: f32,
    },
    ParamPullRequest {
        round: u32,
        device_id: u16,
        split: u8,
    },
    /// Server-to-client segment state; an empty tensor list acknowledges a
    /// push.
    ParamSegment {
        round: u32,
        device_id: u16,
        split: u8,
        tensors: Vec<WireTensor>,
    },
    ParamPush {
        round: u32,
        device_id: u16,
        split: u8,
        tensors: Vec<WireTensor>,
    },
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        match self {
            Message::Smashed { .. } => 1,
            Message::GradAtCut { .. } => 2,
            Message::ParamPullRequest { .. } => 3,
            Message::ParamSegment { .. } => 4,
            Message::ParamPush { .. } => 5,
        }
    }

    pub fn route(&self) -> (u32, u16, u8) {
        match self {
            Message::Smashed { round, device_id, split, .. }
            | Message::GradAtCut { round, device_id, split, .. }
            | Message::ParamPullRequest { round, device_id, split }
            | Message::ParamSegment { round, device_id, split, .. }
            | Message::ParamPush { round, device_id, split, .. } => {
                (*round, *device_id, *split)
            }
        }
    }
}

struct PayloadWriter {
    bytes: Vec<u8>,
    hasher: crc32fast::Hasher,
}

impl PayloadWriter {
    fn new() -> Self {
        Self {
            bytes: Vec::new(),
            hasher: crc32fast::Hasher::new(),
        }
    }

    fn put(&mut self, chunk: &[u8]) {
        self.bytes.extend_from_slice(chunk);
        self.hasher.update(chunk);
    }

    fn put_tensor(&mut self, t: &WireTensor, what: &str) -> Result<(), ProtoError> {
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(ProtoError::NonFinite(what.to_string()));
        }
        let count = t.element_count()?;
        if count != t.data.len() {
            return Err(ProtoError::Malformed(format!(
                "{what}: dims imply {count} elements, data has {}",
                t.data.len()
            )));
        }
        self.put(&[t.dims.len() as u8]);
        for &d in &t.dims {
            self.put(&d.to_le_bytes());
        }
        for &v in &t.data {
            self.put(&v.to_le_bytes());
        }
        // CRC of all preceding payload bytes.
        let crc = self.hasher.clone().finalize();
        self.put(&crc.to_le_bytes());
        Ok(())
    }
}

struct PayloadReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    hasher: crc32fast::Hasher,
}

impl<'a> PayloadReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self {
            bytes,
            pos: 0,
            hasher: crc32fast::Hasher::new(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtoError> {
        if self.pos + n > self.bytes.len() {
            return Err(ProtoError::Truncated {
                expected: self.pos + n,
                actual: self.bytes.len(),
            });
        }
        let chunk = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        self.hasher.update(chunk);
        Ok(chunk)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take_tensor(&mut self) -> Result<WireTensor, ProtoError> {
        let ndims = self.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            let raw = self.take(4)?;
            dims.push(u32::from_le_bytes(raw.try_into().unwrap()));
        }
        let tensor_header = WireTensor { dims, data: Vec::new() };
        let count = tensor_header.element_count()?;
        let byte_len = count
            .checked_mul(4)
            .ok_or_else(|| ProtoError::Malformed("tensor byte length overflows".into()))?;
        if byte_len > self.remaining() {
            return Err(ProtoError::Truncated {
                expected: self.pos + byte_len,
                actual: self.bytes.len(),
            });
        }
        let raw = self.take(byte_len)?;
        let mut data = Vec::with_capacity(count);
        for chunk in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        // The stored CRC covers all payload bytes up to this point.
        let computed = self.hasher.clone().finalize();
        let stored_raw = self.take(4)?;
        let stored = u32::from_le_bytes(stored_raw.try_into().unwrap());
        if stored != computed {
            return Err(ProtoError::CrcMismatch { stored, computed });
        }
        Ok(WireTensor {
            dims: tensor_header.dims,
            data,
        })
    }
}

fn labels_to_tensor(labels: &[u32]) -> WireTensor {
    WireTensor {
        dims: vec![labels.len() as u32],
        data: labels.iter().map(|&l| l as f32).collect(),
    }
}

fn tensor_to_labels(t: &WireTensor) -> Result<Vec<u32>, ProtoError> {
    if t.dims.len() != 1 {
        return Err(ProtoError::Malformed("labels tensor must be 1-d".into()));
    }
    t.data
        .iter()
        .map(|&v| {
            if v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f32 {
                Ok(v as u32)
            } else {
                Err(ProtoError::Malformed(format!("label {v} is not a class id")))
            }
        })
        .collect()
}

/// Encode a message into one frame (header plus payload).
pub fn encode(msg: &Message) -> Result<Vec<u8>, ProtoError> {
    let mut payload = PayloadWriter::new();
    match msg {
        Message::Smashed { activations, labels, .. } => {
            payload.put_tensor(activations, "smashed activations")?;
            payload.put_tensor(&labels_to_tensor(labels), "smashed labels")?;
        }
        Message::GradAtCut { grad, loss, batch_accuracy, .. } => {
            payload.put_tensor(grad, "cut gradient")?;
            let scalars = WireTensor {
                dims: vec![2],
                data: vec![*loss, *batch_accuracy],
            };
            payload.put_tensor(&scalars, "loss/accuracy scalars")?;
        }
        Message::ParamPullRequest { .. } => {}
        Message::ParamSegment { tensors, .. } | Message::ParamPush { tensors, .. } => {
            for (i, t) in tensors.iter().enumerate() {
                payload.put_tensor(t, &format!("segment tensor {i}"))?;
            }
        }
    }

    let (round, device_id, split) = msg.route();
    let mut frame = Vec::with_capacity(HEADER_LEN + payload.bytes.len());
    frame.extend_from_slice(&MAGIC);
    frame.extend_from_slice(&VERSION.to_le_bytes());
    frame.push(msg.msg_type());
    frame.extend_from_slice(&round.to_le_bytes());
    frame.extend_from_slice(&device_id.to_le_bytes());
    frame.push(split);
    frame.extend_from_slice(&(payload.bytes.len() as u32).to_le_bytes());
    frame.extend_from_slice(&payload.bytes);
    Ok(frame)
}

/// Decode one frame with the default payload cap.
pub fn decode(frame: &[u8]) -> Result<Message, ProtoError> {
    decode_with_cap(frame, DEFAULT_MAX_PAYLOAD)
}

/// Decode one frame, rejecting payloads above `max_payload` before any
/// allocation happens.
pub fn decode_with_cap(frame: &[u8], max_payload: u32) -> Result<Message, ProtoError> {
    if frame.len() < HEADER_LEN {
        return Err(ProtoError::Truncated {
            expected: HEADER_LEN,
            actual: frame.len(),
        });
    }
    let magic: [u8; 4] = frame[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(ProtoError::BadMagic { found: magic });
    }
    let version = u16::from_le_bytes(frame[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(ProtoError::BadVersion { found: version });
    }
    let msg_type = frame[6];
    if !(1..=5).contains(&msg_type) {
        return Err(ProtoError::UnknownMsgType(msg_type));
    }
    let round = u32::from_le_bytes(frame[7..11].try_into().unwrap());
    let device_id = u16::from_le_bytes(frame[11..13].try_into().unwrap());
    let split = frame[13];
    let declared = u32::from_le_bytes(frame[14..18].try_into().unwrap());
    if declared > max_payload {
        return Err(ProtoError::PayloadTooLarge {
            len: declared as u64,
            cap: max_payload as u64,
        });
    }
    let actual = frame.len() - HEADER_LEN;
    if declared as usize != actual {
        return Err(ProtoError::LengthMismatch {
            declared: declared as usize,
            actual,
        });
    }
    let mut reader = PayloadReader::new(&frame[HEADER_LEN..]);

    let msg = match msg_type {
        1 => {
            let activations = reader.take_tensor()?;
            let labels = tensor_to_labels(&reader.take_tensor()?)?;
            if activations.dims.len() != 2 {
                return Err(ProtoError::Malformed("smashed activations must be 2-d".into()));
            }
            if labels.len() as u64 != activations.dims[0] as u64 {
                return Err(ProtoError::Malformed(format!(
                    "{} labels for {} activation rows",
                    labels.len(),
                    activations.dims[0]
                )));
            }
            Message::Smashed {
                round,
                device_id,
                split,
                activations,
                labels,
            }
        }
        2 => {
            let grad = reader.take_tensor()?;
            let scalars = reader.take_tensor()?;
            if grad.dims.len() != 2 {
                return Err(ProtoError::Malformed("cut gradient must be 2-d".into()));
            }
            if scalars.dims != vec![2] {
                return Err(ProtoError::Malformed("expected [loss, accuracy] pair".into()));
            }
            Message::GradAtCut {
                round,
                device_id,
                split,
                grad,
                loss: scalars.data[0],
                batch_accuracy: scalars.data[1],
            }
        }
        3 => Message::ParamPullRequest {
            round,
            device_id,
            split,
        },
        4 | 5 => {
            let mut tensors = Vec::new();
            while reader.remaining() > 0 {
                tensors.push(reader.take_tensor()?);
            }
            if msg_type == 4 {
                Message::ParamSegment {
                    round,
                    device_id,
                    split,
                    tensors,
                }
            } else {
                Message::ParamPush {
                    round,
                    device_id,
                    split,
                    tensors,
                }
            }
        }
        _ => unreachable!("range checked above"),
    };
    if reader.remaining() > 0 {
        return Err(ProtoError::Malformed(format!(
            "{} trailing payload bytes",
            reader.remaining()
        )));
    }
    Ok(msg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_smashed() -> Message {
        Message::Smashed {
            round: 7,
            device_id: 3,
            split: 2,
            activations: WireTensor {
                dims: vec![2, 3],
                data: vec![1.0, -2.5, 0.25, 4.0, 0.0, -1.125],
            },
            labels: vec![0, 4],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let msg = sample_smashed();
        let frame = encode(&msg).unwrap();
        assert_eq!(decode(&frame).unwrap(), msg);
    }

    #[test]
    fn payload_corruption_is_a_crc_error() {
        let mut frame = encode(&sample_smashed()).unwrap();
        // Flip a bit inside the activation data (past ndims and dims).
        let idx = HEADER_LEN + 1 + 8 + 2;
        frame[idx] ^= 0x01;
        assert!(matches!(decode(&frame), Err(ProtoError::CrcMismatch { .. })));
    }

    #[test]
    fn empty_tensor_is_valid() {
        let msg = Message::ParamSegment {
            round: 0,
            device_id: 0,
            split: 1,
            tensors: vec![WireTensor {
                dims: vec![0, 5],
                data: vec![],
            }],
        };
        let frame = encode(&msg).unwrap();
        assert_eq!(decode(&frame).unwrap(), msg);
    }

    #[test]
    fn distinct_errors_for_bad_frames() {
        let frame = encode(&sample_smashed()).unwrap();

        let mut bad_magic = frame.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(ProtoError::BadMagic { .. })));

        let mut bad_version = frame.clone();
        bad_version[4] = 9;
        assert!(matches!(decode(&bad_version), Err(ProtoError::BadVersion { found: 9 })));

        let mut bad_type = frame.clone();
        bad_type[6] = 77;
        assert!(matches!(decode(&bad_type), Err(ProtoError::UnknownMsgType(77))));

        let truncated = &frame[..frame.len() - 3];
        assert!(matches!(decode(truncated), Err(ProtoError::LengthMismatch { .. })));

        assert!(matches!(
            decode(&frame[..10]),
            Err(ProtoError::Truncated { .. })
        ));
    }

    #[test]
    fn oversized_payload_rejected_before_allocation() {
        let mut frame = encode(&sample_smashed()).unwrap();
        let huge = (DEFAULT_MAX_PAYLOAD + 1).to_le_bytes();
        frame[14..18].copy_from_slice(&huge);
        assert!(matches!(
            decode(&frame),
            Err(ProtoError::PayloadTooLarge { .. })
        ));
    }

    #[test]
    fn encode_rejects_non_finite() {
        let msg = Message::GradAtCut {
            round: 0,
            device_id: 0,
            split: 1,
            grad: WireTensor {
                dims: vec![1, 1],
                data: vec![f32::NAN],
            },
            loss: 0.0,
            batch_accuracy: 0.0,
        };
        assert!(matches!(encode(&msg), Err(ProtoError::NonFinite(_))));
    }

    #[test]
    fn pull_request_has_empty_payload() {
        let msg = Message::ParamPullRequest {
            round: 1,
            device_id: 2,
            split: 3,
        };
        let frame = encode(&msg).unwrap();
        assert_eq!(frame.len(), HEADER_LEN);
        assert_eq!(decode(&frame).unwrap(), msg);
    }
}
