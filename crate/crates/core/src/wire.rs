//! Byte-exact message encoding.
//!
//! Every message is an envelope, little-endian throughout:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "CEPF"
//!      4     2  version (1)
//!      6     1  kind (1 = upload, 2 = download)
//!      7     4  round
//!     11     2  client id
//!     13     8  payload length P
//!     21     P  payload
//!   21+P     4  CRC-32 (IEEE) of bytes [0, 21+P)
//! ```
//!
//! Upload payload: gradient update, parameter update, alignment score (f32),
//! sample count (u64). An update is `kind u8` (0 gradient, 1 parameters),
//! `layer count u32`, then per layer `tag u8`, `shape 4 x u32` (2-D shapes
//! padded with zeros) and a body:
//!
//! * tag 1, residual: factors, `count u32`, `count x (row u32, col u32,
//!   value f32)`, `gamma f32`
//! * tag 2, low rank: factors
//! * tag 3, grouped: `groups u32`, then `groups` factors over `c_o/groups` rows
//! * tag 4, dense: `numel x f32`
//!
//! Factors are `r u32`, `U'` (`rows x r` f32, row-major), `Vᵀ` (`r x cols`).
//!
//! Download payload: three dense sets (global model, historical average
//! gradient, historical risk gradient), each `layer count u32` then per layer
//! `shape 4 x u32` and `numel x f32`. Its total length is therefore
//! `25 + 3 * (4 + Σ_layers (16 + 4 numel))`; see [`download_len`].

use std::sync::Arc;

use ndarray::{Array2, ArrayD, IxDyn};
use thiserror::Error;

use crate::hsvd::{CompressedLayer, CompressedUpdate, LayerBody, LowRankFactors, ResidualEntry, SparseResidual, UpdateKind};
use crate::model::{LayerSpec, ParameterSet};
use crate::Scalar;

pub const MAGIC: [u8; 4] = *b"CEPF";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 21;
pub const TRAILER_LEN: usize = 4;
/// Envelope bytes around the payload.
pub const ENVELOPE_OVERHEAD: usize = HEADER_LEN + TRAILER_LEN;

const TAG_RESIDUAL: u8 = 1;
const TAG_LOW_RANK: u8 = 2;
const TAG_GROUPED: u8 = 3;
const TAG_DENSE: u8 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("truncated message: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported wire version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("expected {expected:?} message, found {found:?}")]
    WrongKind { expected: MessageKind, found: MessageKind },
    #[error("declared payload of {declared} bytes but message carries {actual}")]
    LengthMismatch { declared: u64, actual: u64 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("shape overflow: {0}")]
    ShapeOverflow(String),
    #[error("invalid layer record: {0}")]
    InvalidRecord(String),
    #[error("{0} unread bytes after payload")]
    TrailingBytes(usize),
}

type WireResult<T> = std::result::Result<T, WireError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageKind {
    Upload = 1,
    Download = 2,
}

impl MessageKind {
    fn from_byte(b: u8) -> WireResult<Self> {
        match b {
            1 => Ok(MessageKind::Upload),
            2 => Ok(MessageKind::Download),
            other => Err(WireError::UnknownKind(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub kind: MessageKind,
    pub round: u32,
    pub client: u16,
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(ENVELOPE_OVERHEAD + self.payload.len());
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(self.kind as u8);
        buf.extend_from_slice(&self.round.to_le_bytes());
        buf.extend_from_slice(&self.client.to_le_bytes());
        buf.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        buf.extend_from_slice(&self.payload);
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn decode(bytes: &[u8]) -> WireResult<Self> {
        if bytes.len() < ENVELOPE_OVERHEAD {
            return Err(WireError::Truncated {
                needed: ENVELOPE_OVERHEAD,
                available: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(WireError::BadMagic(magic));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(WireError::UnsupportedVersion(version));
        }
        let kind = MessageKind::from_byte(bytes[6])?;
        let round = u32::from_le_bytes(bytes[7..11].try_into().unwrap());
        let client = u16::from_le_bytes(bytes[11..13].try_into().unwrap());
        let declared = u64::from_le_bytes(bytes[13..21].try_into().unwrap());
        let actual = (bytes.len() - ENVELOPE_OVERHEAD) as u64;
        if declared != actual {
            return Err(WireError::LengthMismatch { declared, actual });
        }
        let body_end = bytes.len() - TRAILER_LEN;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(WireError::Checksum { stored, computed });
        }
        Ok(Self {
            kind,
            round,
            client,
            payload: bytes[HEADER_LEN..body_end].to_vec(),
        })
    }
}

/// What a client sends after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct UploadPayload<T> {
    pub gradient: CompressedUpdate<T>,
    pub parameters: CompressedUpdate<T>,
    /// Alignment score `M_i`.
    pub alignment: T,
    /// Local training sample count `n_i`.
    pub n_samples: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UploadMessage<T> {
    pub round: u32,
    pub client: u16,
    pub payload: UploadPayload<T>,
}

/// What the server sends back to client `client`.
#[derive(Debug, Clone, PartialEq)]
pub struct DownloadMessage<T> {
    pub round: u32,
    pub client: u16,
    pub global: ParameterSet<T>,
    pub average_gradient: ParameterSet<T>,
    pub risk_gradient: ParameterSet<T>,
}

/// Bytes in an encoded upload that carry model values (factor entries,
/// residual triples, dense values), per update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ValueBytes {
    pub gradient: usize,
    pub parameters: usize,
}

struct Writer {
    buf: Vec<u8>,
    values: usize,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: usize) -> WireResult<()> {
        let v = u32::try_from(v).map_err(|_| WireError::ShapeOverflow(format!("{v} exceeds u32")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn value_u32(&mut self, v: usize) -> WireResult<()> {
        self.values += 4;
        self.u32(v)
    }
    fn value<T: Scalar>(&mut self, v: T) {
        self.values += 4;
        self.buf.extend_from_slice(&v.to_wire().to_le_bytes());
    }
    fn meta_f32<T: Scalar>(&mut self, v: T) {
        self.buf.extend_from_slice(&v.to_wire().to_le_bytes());
    }
    fn shape(&mut self, shape: &[usize]) -> WireResult<()> {
        if shape.len() > 4 || shape.is_empty() {
            return Err(WireError::InvalidRecord(format!("cannot encode shape {shape:?}")));
        }
        for i in 0..4 {
            self.u32(shape.get(i).copied().unwrap_or(0))?;
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> WireResult<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(WireError::Truncated { needed: n, available });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
    fn u8(&mut self) -> WireResult<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> WireResult<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> WireResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32<T: Scalar>(&mut self) -> WireResult<T> {
        let v = f32::from_le_bytes(self.take(4)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(WireError::InvalidRecord(format!("non-finite value {v}")));
        }
        Ok(T::from_wire(v))
    }
    fn values<T: Scalar>(&mut self, count: usize) -> WireResult<Vec<T>> {
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| WireError::ShapeOverflow(format!("{count} values")))?;
        if bytes > self.remaining() {
            return Err(WireError::Truncated {
                needed: bytes,
                available: self.remaining(),
            });
        }
        (0..count).map(|_| self.f32()).collect()
    }
    fn shape(&mut self) -> WireResult<Vec<usize>> {
        let raw = [self.u32()?, self.u32()?, self.u32()?, self.u32()?];
        let dims = raw.iter().take_while(|&&d| d != 0).count();
        if !(dims == 2 || dims == 4) || raw[dims..].iter().any(|&d| d != 0) {
            return Err(WireError::InvalidRecord(format!("malformed shape {raw:?}")));
        }
        let shape = raw[..dims].to_vec();
        numel(&shape)?;
        Ok(shape)
    }
    fn finish(&self) -> WireResult<()> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(WireError::TrailingBytes(n)),
        }
    }
}

fn numel(shape: &[usize]) -> WireResult<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| WireError::ShapeOverflow(format!("{shape:?}")))
}

fn matrix_dims(shape: &[usize]) -> WireResult<(usize, usize)> {
    Ok((shape[0], numel(&shape[1..])?))
}

fn write_factors<T: Scalar>(w: &mut Writer, f: &LowRankFactors<T>) -> WireResult<()> {
    w.u32(f.rank())?;
    for &v in f.u_prime.as_standard_layout().iter() {
        w.value(v);
    }
    for &v in f.v_t.as_standard_layout().iter() {
        w.value(v);
    }
    Ok(())
}

fn read_factors<T: Scalar>(r: &mut Reader<'_>, rows: usize, cols: usize) -> WireResult<LowRankFactors<T>> {
    let rank = r.u32()?;
    if rank == 0 || rank > rows.min(cols) {
        return Err(WireError::InvalidRecord(format!(
            "rank {rank} impossible for a {rows}x{cols} matrix"
        )));
    }
    let n_u = rows
        .checked_mul(rank)
        .ok_or_else(|| WireError::ShapeOverflow("U' size".into()))?;
    let u = r.values(n_u)?;
    let n_v = rank
        .checked_mul(cols)
        .ok_or_else(|| WireError::ShapeOverflow("Vᵀ size".into()))?;
    let v = r.values(n_v)?;
    Ok(LowRankFactors {
        u_prime: Array2::from_shape_vec((rows, rank), u).expect("sized"),
        v_t: Array2::from_shape_vec((rank, cols), v).expect("sized"),
    })
}

fn write_update<T: Scalar>(w: &mut Writer, update: &CompressedUpdate<T>) -> WireResult<()> {
    w.u8(match update.kind {
        UpdateKind::Gradient => 0,
        UpdateKind::Parameters => 1,
    });
    w.u32(update.layers.len())?;
    for layer in &update.layers {
        let tag = match &layer.body {
            LayerBody::Residual { .. } => TAG_RESIDUAL,
            LayerBody::LowRank(_) => TAG_LOW_RANK,
            LayerBody::Grouped(_) => TAG_GROUPED,
            LayerBody::Dense(_) => TAG_DENSE,
        };
        w.u8(tag);
        w.shape(&layer.shape)?;
        match &layer.body {
            LayerBody::Residual { factors, residual } => {
                write_factors(w, factors)?;
                w.u32(residual.entries.len())?;
                for e in &residual.entries {
                    w.value_u32(e.row)?;
                    w.value_u32(e.col)?;
                    w.value(e.value);
                }
                w.meta_f32(residual.gamma);
            }
            LayerBody::LowRank(f) => write_factors(w, f)?,
            LayerBody::Grouped(groups) => {
                w.u32(groups.len())?;
                for f in groups {
                    write_factors(w, f)?;
                }
            }
            LayerBody::Dense(values) => {
                if values.len() != numel(&layer.shape)? {
                    return Err(WireError::InvalidRecord("dense length does not match shape".into()));
                }
                for &v in values {
                    w.value(v);
                }
            }
        }
    }
    Ok(())
}

fn read_update<T: Scalar>(r: &mut Reader<'_>) -> WireResult<CompressedUpdate<T>> {
    let kind = match r.u8()? {
        0 => UpdateKind::Gradient,
        1 => UpdateKind::Parameters,
        other => return Err(WireError::InvalidRecord(format!("update kind {other}"))),
    };
    let count = r.u32()?;
    // Each layer record needs at least a tag and a shape.
    if count.saturating_mul(17) > r.remaining() {
        return Err(WireError::Truncated {
            needed: count.saturating_mul(17),
            available: r.remaining(),
        });
    }
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let tag = r.u8()?;
        let shape = r.shape()?;
        let (rows, cols) = matrix_dims(&shape)?;
        let body = match tag {
            TAG_RESIDUAL => {
                let factors = read_factors(r, rows, cols)?;
                let n = r.u32()?;
                if n.saturating_mul(12) > r.remaining() {
                    return Err(WireError::Truncated {
                        needed: n.saturating_mul(12),
                        available: r.remaining(),
                    });
                }
                let mut entries = Vec::with_capacity(n);
                for _ in 0..n {
                    let (row, col, value) = (r.u32()?, r.u32()?, r.f32()?);
                    if row >= rows || col >= cols {
                        return Err(WireError::InvalidRecord(format!(
                            "residual entry ({row}, {col}) outside {rows}x{cols}"
                        )));
                    }
                    entries.push(ResidualEntry { row, col, value });
                }
                let gamma = r.f32()?;
                LayerBody::Residual {
                    factors,
                    residual: SparseResidual { entries, gamma },
                }
            }
            TAG_LOW_RANK => LayerBody::LowRank(read_factors(r, rows, cols)?),
            TAG_GROUPED => {
                let groups = r.u32()?;
                if groups == 0 || rows % groups != 0 {
                    return Err(WireError::InvalidRecord(format!(
                        "{groups} groups cannot split {rows} channels"
                    )));
                }
                let c = rows / groups;
                LayerBody::Grouped((0..groups).map(|_| read_factors(r, c, cols)).collect::<WireResult<_>>()?)
            }
            TAG_DENSE => LayerBody::Dense(r.values(numel(&shape)?)?),
            other => return Err(WireError::InvalidRecord(format!("unknown layer tag {other}"))),
        };
        layers.push(CompressedLayer { shape, body });
    }
    Ok(CompressedUpdate { kind, layers })
}

/// Encodes an upload and reports how many bytes carry model values.
pub fn encode_upload_metered<T: Scalar>(msg: &UploadMessage<T>) -> WireResult<(Vec<u8>, ValueBytes)> {
    let mut w = Writer {
        buf: Vec::new(),
        values: 0,
    };
    write_update(&mut w, &msg.payload.gradient)?;
    let gradient = w.values;
    write_update(&mut w, &msg.payload.parameters)?;
    let parameters = w.values - gradient;
    w.meta_f32(msg.payload.alignment);
    w.buf.extend_from_slice(&msg.payload.n_samples.to_le_bytes());
    let bytes = Envelope {
        kind: MessageKind::Upload,
        round: msg.round,
        client: msg.client,
        payload: w.buf,
    }
    .encode();
    Ok((bytes, ValueBytes { gradient, parameters }))
}

pub fn encode_upload<T: Scalar>(msg: &UploadMessage<T>) -> WireResult<Vec<u8>> {
    encode_upload_metered(msg).map(|(b, _)| b)
}

pub fn decode_upload<T: Scalar>(bytes: &[u8]) -> WireResult<UploadMessage<T>> {
    let env = Envelope::decode(bytes)?;
    if env.kind != MessageKind::Upload {
        return Err(WireError::WrongKind {
            expected: MessageKind::Upload,
            found: env.kind,
        });
    }
    let mut r = Reader {
        bytes: &env.payload,
        pos: 0,
    };
    let gradient = read_update(&mut r)?;
    let parameters = read_update(&mut r)?;
    let alignment = r.f32()?;
    let n_samples = r.u64()?;
    r.finish()?;
    Ok(UploadMessage {
        round: env.round,
        client: env.client,
        payload: UploadPayload {
            gradient,
            parameters,
            alignment,
            n_samples,
        },
    })
}

fn write_dense_set<T: Scalar>(w: &mut Writer, set: &ParameterSet<T>) -> WireResult<()> {
    w.u32(set.len())?;
    for (spec, tensor) in set.iter() {
        w.shape(&spec.shape)?;
        for &v in tensor.iter() {
            w.value(v);
        }
    }
    Ok(())
}

fn read_dense_set<T: Scalar>(r: &mut Reader<'_>, specs: &Arc<Vec<LayerSpec>>) -> WireResult<ParameterSet<T>> {
    let count = r.u32()?;
    if count != specs.len() {
        return Err(WireError::InvalidRecord(format!(
            "{count} dense layers, model has {}",
            specs.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for spec in specs.iter() {
        let shape = r.shape()?;
        if shape != spec.shape {
            return Err(WireError::InvalidRecord(format!(
                "layer {} shape {shape:?} != {:?}",
                spec.name, spec.shape
            )));
        }
        let values = r.values(numel(&shape)?)?;
        tensors.push(ArrayD::from_shape_vec(IxDyn(&shape), values).expect("sized"));
    }
    ParameterSet::new(specs.clone(), tensors).map_err(|e| WireError::InvalidRecord(e.to_string()))
}

pub fn encode_download<T: Scalar>(msg: &DownloadMessage<T>) -> WireResult<Vec<u8>> {
    let mut w = Writer {
        buf: Vec::new(),
        values: 0,
    };
    write_dense_set(&mut w, &msg.global)?;
    write_dense_set(&mut w, &msg.average_gradient)?;
    write_dense_set(&mut w, &msg.risk_gradient)?;
    Ok(Envelope {
        kind: MessageKind::Download,
        round: msg.round,
        client: msg.client,
        payload: w.buf,
    }
    .encode())
}

/// Decodes a download; layer names and parts come from `specs`, and shapes must match.
pub fn decode_download<T: Scalar>(bytes: &[u8], specs: &Arc<Vec<LayerSpec>>) -> WireResult<DownloadMessage<T>> {
    let env = Envelope::decode(bytes)?;
    if env.kind != MessageKind::Download {
        return Err(WireError::WrongKind {
            expected: MessageKind::Download,
            found: env.kind,
        });
    }
    let mut r = Reader {
        bytes: &env.payload,
        pos: 0,
    };
    let global = read_dense_set(&mut r, specs)?;
    let average_gradient = read_dense_set(&mut r, specs)?;
    let risk_gradient = read_dense_set(&mut r, specs)?;
    r.finish()?;
    Ok(DownloadMessage {
        round: env.round,
        client: env.client,
        global,
        average_gradient,
        risk_gradient,
    })
}

/// Bytes of one dense set: `4 + Σ (16 + 4 numel)`.
pub fn dense_set_len(specs: &[LayerSpec]) -> usize {
    4 + specs.iter().map(|s| 16 + 4 * s.numel()).sum::<usize>()
}

/// Exact length of any download message for this layout.
pub fn download_len(specs: &[LayerSpec]) -> usize {
    ENVELOPE_OVERHEAD + 3 * dense_set_len(specs)
}

/// Length of an upload whose two updates have no layers.
pub const EMPTY_UPLOAD_LEN: usize = ENVELOPE_OVERHEAD + 2 * 5 + 4 + 8;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsvd::{compress, Compression, EnergyConfig};
    use crate::model::TinyConvConfig;

    fn empty_upload() -> UploadMessage<f64> {
        let empty = |kind| CompressedUpdate { kind, layers: vec![] };
        UploadMessage {
            round: 3,
            client: 1,
            payload: UploadPayload {
                gradient: empty(UpdateKind::Gradient),
                parameters: empty(UpdateKind::Parameters),
                alignment: 0.5,
                n_samples: 17,
            },
        }
    }

    fn tiny_upload() -> UploadMessage<f64> {
        let cfg = TinyConvConfig::default();
        let p: ParameterSet<f64> = cfg.init(7).unwrap();
        let g: ParameterSet<f64> = cfg.init(8).unwrap();
        let comp = Compression::Hierarchical(EnergyConfig::default());
        UploadMessage {
            round: 2,
            client: 4,
            payload: UploadPayload {
                gradient: compress(&g.to_wire_precision(), UpdateKind::Gradient, &comp).unwrap(),
                parameters: compress(&p.to_wire_precision(), UpdateKind::Parameters, &comp).unwrap(),
                alignment: -1.25,
                n_samples: 96,
            },
        }
    }

    #[test]
    fn empty_upload_has_fixed_length() {
        let bytes = encode_upload(&empty_upload()).unwrap();
        assert_eq!(bytes.len(), EMPTY_UPLOAD_LEN);
        assert_eq!(EMPTY_UPLOAD_LEN, 47);
        assert_eq!(decode_upload::<f64>(&bytes).unwrap(), empty_upload());
    }

    #[test]
    fn distinct_header_errors() {
        let good = encode_upload(&empty_upload()).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_upload::<f64>(&bad), Err(WireError::BadMagic(_))));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode_upload::<f64>(&bad), Err(WireError::UnsupportedVersion(9))));
        assert!(matches!(
            decode_upload::<f64>(&good[..10]),
            Err(WireError::Truncated { .. })
        ));
        assert!(matches!(
            decode_upload::<f64>(&good[..good.len() - 1]),
            Err(WireError::LengthMismatch { .. })
        ));
        let mut bad = good.clone();
        bad[8] ^= 1;
        assert!(matches!(decode_upload::<f64>(&bad), Err(WireError::Checksum { .. })));
        let mut bad = good.clone();
        bad[6] = 2;
        let crc = crc32fast::hash(&bad[..bad.len() - 4]);
        let n = bad.len();
        bad[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode_upload::<f64>(&bad), Err(WireError::WrongKind { .. })));
    }

    #[test]
    fn shape_overflow_is_reported() {
        let mut w = Writer { buf: Vec::new(), values: 0 };
        w.u8(0);
        w.u32(1).unwrap();
        w.u8(TAG_DENSE);
        for _ in 0..4 {
            w.u32(u32::MAX as usize).unwrap();
        }
        let mut r = Reader { bytes: &w.buf, pos: 0 };
        assert!(matches!(read_update::<f64>(&mut r), Err(WireError::ShapeOverflow(_))));
    }

    #[test]
    fn upload_round_trip_and_metering() {
        let msg = tiny_upload();
        let (bytes, meter) = encode_upload_metered(&msg).unwrap();
        let back: UploadMessage<f64> = decode_upload(&bytes).unwrap();
        assert_eq!(back.payload.gradient, msg.payload.gradient.to_wire_precision());
        assert_eq!(back.payload.parameters, msg.payload.parameters.to_wire_precision());
        assert_eq!((back.round, back.client, back.payload.n_samples), (2, 4, 96));
        let count = |u: &CompressedUpdate<f64>| -> usize {
            u.layers.iter().map(|l| l.scalar_count()).sum()
        };
        assert_eq!(meter.gradient, 4 * count(&msg.payload.gradient));
        assert_eq!(meter.parameters, 4 * count(&msg.payload.parameters));
        assert_eq!(encode_upload(&back).unwrap(), bytes);
    }

    #[test]
    fn zero_download_length() {
        let specs = TinyConvConfig::default().layer_specs().unwrap();
        let z = ParameterSet::<f64>::zeros(specs.clone());
        let msg = DownloadMessage {
            round: 0,
            client: 0,
            global: z.clone(),
            average_gradient: z.clone(),
            risk_gradient: z,
        };
        let bytes = encode_download(&msg).unwrap();
        assert_eq!(bytes.len(), download_len(&specs));
        assert_eq!(bytes.len(), ENVELOPE_OVERHEAD + 3 * dense_set_len(&specs));
        assert_eq!(decode_download::<f64>(&bytes, &specs).unwrap(), msg);
        assert!(matches!(decode_upload::<f64>(&bytes), Err(WireError::WrongKind { .. })));
    }
}
