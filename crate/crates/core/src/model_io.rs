//! Bit-exact binary container for quantized models.
//!
//! ```text
//! "SBNN" | version u16 | record_count u16 | record* | crc32 u32
//! ```
//!
//! All integers are little-endian, reals are IEEE-754 binary64. The CRC-32
//! covers every byte before it. Each record starts with a `u8` tag:
//!
//! | tag | record     | body                                                                  |
//! |-----|------------|-----------------------------------------------------------------------|
//! | 0   | Input      | c, h, w: u32                                                          |
//! | 1   | RealConv   | in, out, stride, pad: u32; weights f64 x (out*in*9)                   |
//! | 2   | RealLinear | in, out: u32; weights f64 x (out*in); bias f64 x out                  |
//! | 3   | BatchNorm  | channels u32; scale f64 x c; bias f64 x c                             |
//! | 4   | Sign       | empty                                                                 |
//! | 5   | MaxPool2   | empty                                                                 |
//! | 6   | BinConv    | in, out, stride, pad: u32; tau, phi: f64; scale, bias f64 x out;      |
//! |     |            | payload_len u32; payload                                              |
//! | 7   | BinLinear  | in, out: u32; tau, phi: f64; scale, bias f64 x out; payload_len u32;  |
//! |     |            | payload                                                               |
//!
//! A BinConv payload is, MSB-first: one 2-bit code per kernel (`00` zero,
//! `01` single, `10` dense), then a 4-bit position per single kernel, then 9
//! raw bits per dense kernel in position order `0..9`, zero-padded to a byte.
//! A BinLinear payload is the raw weight bits, MSB-first, zero-padded.
//! Input, when present, is the first record.

use std::path::Path;

use thiserror::Error;

use crate::binquant::OmegaParams;
use crate::dataio::ImageShape;
use crate::infer::{classify_kernels, KernelClass};
use crate::model::{Conv3x3, FoldedBatchNorm, QLayer, QuantizedModel};

pub const MAGIC: &[u8; 4] = b"SBNN";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 8;

const TAG_INPUT: u8 = 0;
const TAG_REAL_CONV: u8 = 1;
const TAG_REAL_LINEAR: u8 = 2;
const TAG_BATCH_NORM: u8 = 3;
const TAG_SIGN: u8 = 4;
const TAG_MAX_POOL: u8 = 5;
const TAG_BIN_CONV: u8 = 6;
const TAG_BIN_LINEAR: u8 = 7;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("bad magic at byte {offset}")]
    BadMagic { offset: usize },
    #[error("unsupported version {found} at byte {offset}")]
    BadVersion { offset: usize, found: u16 },
    #[error("crc mismatch at byte {offset}: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { offset: usize, stored: u32, computed: u32 },
    #[error("stream truncated at byte {offset}")]
    TruncatedStream { offset: usize },
    #[error("unknown record tag {tag} at byte {offset}")]
    UnknownTag { offset: usize, tag: u8 },
    #[error("invalid kernel code at byte {offset}")]
    InvalidKernelCode { offset: usize },
    #[error("inconsistent record at byte {offset}: {message}")]
    Inconsistent { offset: usize, message: String },
}

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Decode(#[from] DecodeError),
    #[error("model cannot be encoded: {0}")]
    Unencodable(String),
}

/// Encodes a model. Fails only for models the container cannot represent:
/// more than `u16::MAX` records, dimensions above `u32::MAX`, or binarized
/// conv bits that do not split into kernels.
pub fn encode(model: &QuantizedModel) -> Result<Vec<u8>, ModelFileError> {
    let records = model.layers.len() + model.input.is_some() as usize;
    let count = u16::try_from(records).map_err(|_| ModelFileError::Unencodable(format!("{records} records")))?;
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.u16(count);
    if let Some(s) = model.input {
        w.u8(TAG_INPUT);
        w.dims(&[s.channels, s.height, s.width])?;
    }
    for layer in &model.layers {
        match layer {
            QLayer::RealConv { geometry, weights } => {
                w.u8(TAG_REAL_CONV);
                w.geometry(geometry)?;
                check_len("weights", weights.len(), geometry.weight_count())?;
                w.f64s(weights);
            }
            QLayer::RealLinear { in_features, out_features, weights, bias } => {
                w.u8(TAG_REAL_LINEAR);
                w.dims(&[*in_features, *out_features])?;
                check_len("weights", weights.len(), in_features * out_features)?;
                check_len("bias", bias.len(), *out_features)?;
                w.f64s(weights);
                w.f64s(bias);
            }
            QLayer::BatchNorm(bn) => {
                w.u8(TAG_BATCH_NORM);
                check_len("bias", bn.bias.len(), bn.scale.len())?;
                w.dims(&[bn.scale.len()])?;
                w.f64s(&bn.scale);
                w.f64s(&bn.bias);
            }
            QLayer::Sign => w.u8(TAG_SIGN),
            QLayer::MaxPool2 => w.u8(TAG_MAX_POOL),
            QLayer::BinConv { geometry, omega, bits, bn } => {
                w.u8(TAG_BIN_CONV);
                w.geometry(geometry)?;
                check_len("bits", bits.len(), geometry.weight_count())?;
                w.omega_bn(*omega, bn, geometry.out_ch)?;
                let classes = classify_kernels(bits).map_err(|e| ModelFileError::Unencodable(e.to_string()))?;
                w.payload(&kernel_payload(&classes.classes))?;
            }
            QLayer::BinLinear { in_features, out_features, omega, bits, bn } => {
                w.u8(TAG_BIN_LINEAR);
                w.dims(&[*in_features, *out_features])?;
                check_len("bits", bits.len(), in_features * out_features)?;
                w.omega_bn(*omega, bn, *out_features)?;
                let mut p = BitWriter::default();
                for &b in bits {
                    p.push(b as u32, 1);
                }
                w.payload(&p.finish())?;
            }
        }
    }
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    Ok(w.buf)
}

fn check_len(what: &str, found: usize, expected: usize) -> Result<(), ModelFileError> {
    if found == expected {
        Ok(())
    } else {
        Err(ModelFileError::Unencodable(format!("{what}: {found} values, expected {expected}")))
    }
}

/// Payload of a binarized conv layer; its bit length before padding is the
/// layer's BParams count.
pub fn kernel_payload(classes: &[KernelClass]) -> BitPayload {
    let mut p = BitWriter::default();
    for c in classes {
        let code = match c {
            KernelClass::Zero => 0b00,
            KernelClass::Single(_) => 0b01,
            KernelClass::Dense(_) => 0b10,
        };
        p.push(code, 2);
    }
    for c in classes {
        if let KernelClass::Single(i) = c {
            p.push(*i as u32, 4);
        }
    }
    for c in classes {
        if let KernelClass::Dense(pattern) = c {
            for k in 0..9 {
                p.push(((pattern >> k) & 1) as u32, 1);
            }
        }
    }
    p.finish()
}

/// Packed bits with their unpadded length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitPayload {
    pub bytes: Vec<u8>,
    pub bit_len: u64,
}

#[derive(Default)]
struct BitWriter {
    bytes: Vec<u8>,
    bits: u64,
}

impl BitWriter {
    /// Appends the low `n` bits of `value`, most significant first.
    fn push(&mut self, value: u32, n: u32) {
        for i in (0..n).rev() {
            if self.bits.is_multiple_of(8) {
                self.bytes.push(0);
            }
            let bit = (value >> i) & 1;
            *self.bytes.last_mut().expect("byte pushed above") |= (bit as u8) << (7 - self.bits % 8);
            self.bits += 1;
        }
    }

    fn finish(self) -> BitPayload {
        BitPayload { bytes: self.bytes, bit_len: self.bits }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
    base: usize,
}

impl BitReader<'_> {
    fn read(&mut self, n: u32) -> Result<u32, DecodeError> {
        let mut v = 0;
        for _ in 0..n {
            let byte = (self.pos / 8) as usize;
            let Some(b) = self.bytes.get(byte) else {
                return Err(DecodeError::Inconsistent {
                    offset: self.base + byte,
                    message: "payload shorter than its kernel codes".into(),
                });
            };
            v = (v << 1) | ((b >> (7 - self.pos % 8)) & 1) as u32;
            self.pos += 1;
        }
        Ok(v)
    }

    /// Requires every remaining bit to be padding: fewer than 8, all zero.
    fn finish(&self) -> Result<(), DecodeError> {
        let total = self.bytes.len() as u64 * 8;
        let trailing_ok = total - self.pos < 8 && {
            let byte = (self.pos / 8) as usize;
            byte >= self.bytes.len() || self.bytes[byte] & (0xffu8.checked_shr((self.pos % 8) as u32).unwrap_or(0)) == 0
        };
        if trailing_ok {
            Ok(())
        } else {
            Err(DecodeError::Inconsistent {
                offset: self.base + (self.pos / 8) as usize,
                message: "payload has extra or nonzero padding bits".into(),
            })
        }
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn dims(&mut self, dims: &[usize]) -> Result<(), ModelFileError> {
        for &d in dims {
            let v = u32::try_from(d).map_err(|_| ModelFileError::Unencodable(format!("dimension {d}")))?;
            self.u32(v);
        }
        Ok(())
    }
    fn geometry(&mut self, g: &Conv3x3) -> Result<(), ModelFileError> {
        self.dims(&[g.in_ch, g.out_ch, g.stride, g.padding])
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.bytes(&x.to_le_bytes());
        }
    }
    fn omega_bn(&mut self, omega: OmegaParams, bn: &FoldedBatchNorm, channels: usize) -> Result<(), ModelFileError> {
        check_len("batchnorm scale", bn.scale.len(), channels)?;
        check_len("batchnorm bias", bn.bias.len(), channels)?;
        self.f64s(&[omega.tau, omega.phi]);
        self.f64s(&bn.scale);
        self.f64s(&bn.bias);
        Ok(())
    }
    fn payload(&mut self, p: &BitPayload) -> Result<(), ModelFileError> {
        self.dims(&[p.bytes.len()])?;
        self.bytes(&p.bytes);
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(DecodeError::TruncatedStream { offset: self.buf.len() });
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    /// Reads `n` reals, checking the length against the remaining bytes first
    /// so a corrupt count cannot trigger a huge allocation.
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, DecodeError> {
        let bytes = self.take(n.checked_mul(8).ok_or(DecodeError::TruncatedStream { offset: self.buf.len() })?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
    fn geometry(&mut self) -> Result<Conv3x3, DecodeError> {
        Ok(Conv3x3 { in_ch: self.u32()?, out_ch: self.u32()?, stride: self.u32()?, padding: self.u32()? })
    }
    fn omega_bn(&mut self, channels: usize) -> Result<(OmegaParams, FoldedBatchNorm), DecodeError> {
        let omega = OmegaParams::new(self.f64()?, self.f64()?);
        let scale = self.f64s(channels)?;
        let bias = self.f64s(channels)?;
        Ok((omega, FoldedBatchNorm { scale, bias }))
    }
    fn payload(&mut self) -> Result<(usize, &'a [u8]), DecodeError> {
        let len = self.u32()?;
        let start = self.pos;
        Ok((start, self.take(len)?))
    }
}

pub fn decode(bytes: &[u8]) -> Result<QuantizedModel, DecodeError> {
    if bytes.len() < MAGIC.len() {
        return Err(DecodeError::TruncatedStream { offset: bytes.len() });
    }
    if &bytes[..4] != MAGIC {
        return Err(DecodeError::BadMagic { offset: 0 });
    }
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::TruncatedStream { offset: bytes.len() });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(DecodeError::BadVersion { offset: 4, found: version });
    }
    if bytes.len() < HEADER_LEN + 4 {
        return Err(DecodeError::TruncatedStream { offset: bytes.len() });
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(DecodeError::CrcMismatch { offset: body_end, stored, computed });
    }
    let count = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let mut r = Reader { buf: &bytes[..body_end], pos: HEADER_LEN };
    let mut model = QuantizedModel::default();
    for record in 0..count {
        let at = r.pos;
        let tag = r.u8()?;
        let layer = match tag {
            TAG_INPUT => {
                if record != 0 {
                    return Err(DecodeError::Inconsistent { offset: at, message: "input record not first".into() });
                }
                model.input = Some(ImageShape::new(r.u32()?, r.u32()?, r.u32()?));
                continue;
            }
            TAG_REAL_CONV => {
                let geometry = r.geometry()?;
                let n = checked_product(&[geometry.out_ch, geometry.in_ch, 9], at)?;
                QLayer::RealConv { geometry, weights: r.f64s(n)? }
            }
            TAG_REAL_LINEAR => {
                let (in_features, out_features) = (r.u32()?, r.u32()?);
                let n = checked_product(&[in_features, out_features], at)?;
                let weights = r.f64s(n)?;
                QLayer::RealLinear { in_features, out_features, weights, bias: r.f64s(out_features)? }
            }
            TAG_BATCH_NORM => {
                let c = r.u32()?;
                QLayer::BatchNorm(FoldedBatchNorm { scale: r.f64s(c)?, bias: r.f64s(c)? })
            }
            TAG_SIGN => QLayer::Sign,
            TAG_MAX_POOL => QLayer::MaxPool2,
            TAG_BIN_CONV => {
                let geometry = r.geometry()?;
                let (omega, bn) = r.omega_bn(geometry.out_ch)?;
                let kernels = checked_product(&[geometry.out_ch, geometry.in_ch], at)?;
                let (base, payload) = r.payload()?;
                let bits = decode_kernels(payload, base, kernels)?;
                QLayer::BinConv { geometry, omega, bits, bn }
            }
            TAG_BIN_LINEAR => {
                let (in_features, out_features) = (r.u32()?, r.u32()?);
                let (omega, bn) = r.omega_bn(out_features)?;
                let n = checked_product(&[in_features, out_features], at)?;
                let (base, payload) = r.payload()?;
                if (n as u64).div_ceil(8) != payload.len() as u64 {
                    return Err(DecodeError::Inconsistent {
                        offset: base,
                        message: format!("{} payload bytes for {n} weights", payload.len()),
                    });
                }
                let mut br = BitReader { bytes: payload, pos: 0, base };
                let bits = (0..n).map(|_| br.read(1).map(|b| b as u8)).collect::<Result<Vec<_>, _>>()?;
                br.finish()?;
                QLayer::BinLinear { in_features, out_features, omega, bits, bn }
            }
            tag => return Err(DecodeError::UnknownTag { offset: at, tag }),
        };
        model.layers.push(layer);
    }
    if r.pos != body_end {
        return Err(DecodeError::Inconsistent { offset: r.pos, message: "bytes after the last record".into() });
    }
    Ok(model)
}

fn checked_product(dims: &[usize], offset: usize) -> Result<usize, DecodeError> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(DecodeError::Inconsistent { offset, message: "dimensions overflow".into() })
}

fn decode_kernels(payload: &[u8], base: usize, kernels: usize) -> Result<Vec<u8>, DecodeError> {
    // every kernel needs at least its 2-bit code
    if kernels.div_ceil(4) > payload.len() {
        return Err(DecodeError::Inconsistent {
            offset: base,
            message: format!("{} payload bytes for {kernels} kernels", payload.len()),
        });
    }
    let mut br = BitReader { bytes: payload, pos: 0, base };
    let mut codes = Vec::with_capacity(kernels);
    for _ in 0..kernels {
        let at = base + (br.pos / 8) as usize;
        let code = br.read(2)?;
        if code == 0b11 {
            return Err(DecodeError::InvalidKernelCode { offset: at });
        }
        codes.push(code);
    }
    let mut bits = vec![0u8; kernels * 9];
    for (k, _) in codes.iter().enumerate().filter(|(_, &c)| c == 0b01) {
        let at = base + (br.pos / 8) as usize;
        let idx = br.read(4)? as usize;
        if idx > 8 {
            return Err(DecodeError::Inconsistent { offset: at, message: format!("kernel position {idx}") });
        }
        bits[k * 9 + idx] = 1;
    }
    for (k, _) in codes.iter().enumerate().filter(|(_, &c)| c == 0b10) {
        let at = base + (br.pos / 8) as usize;
        for i in 0..9 {
            bits[k * 9 + i] = br.read(1)? as u8;
        }
        if bits[k * 9..k * 9 + 9].iter().filter(|&&b| b == 1).count() < 2 {
            return Err(DecodeError::Inconsistent { offset: at, message: "dense kernel with fewer than 2 ones".into() });
        }
    }
    br.finish()?;
    Ok(bits)
}

pub fn save(model: &QuantizedModel, path: impl AsRef<Path>) -> Result<(), ModelFileError> {
    std::fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<QuantizedModel, ModelFileError> {
    Ok(decode(&std::fs::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_with_mix(zero: usize, single: usize, dense: usize) -> QLayer {
        let n = zero + single + dense;
        let mut bits = vec![0u8; n * 9];
        for k in zero..zero + single {
            bits[k * 9 + (k % 9)] = 1;
        }
        for k in zero + single..n {
            bits[k * 9] = 1;
            bits[k * 9 + 8] = 1;
        }
        QLayer::BinConv {
            geometry: Conv3x3 { in_ch: n, out_ch: 1, stride: 1, padding: 0 },
            omega: OmegaParams::new(0.25, -0.5),
            bits,
            bn: FoldedBatchNorm { scale: vec![1.5], bias: vec![-0.25] },
        }
    }

    #[test]
    fn empty_model_is_header_plus_crc() {
        let bytes = encode(&QuantizedModel::default()).unwrap();
        assert_eq!(&bytes[..8], b"SBNN\x01\x00\x00\x00");
        assert_eq!(bytes.len(), 12);
        assert_eq!(decode(&bytes).unwrap(), QuantizedModel::default());
    }

    #[test]
    fn payload_of_70_20_10_mix_is_370_bits() {
        let QLayer::BinConv { bits, .. } = conv_with_mix(70, 20, 10) else { unreachable!() };
        let p = kernel_payload(&classify_kernels(&bits).unwrap().classes);
        assert_eq!(p.bit_len, 370);
        assert_eq!(p.bytes.len(), 47);
    }

    #[test]
    fn round_trip_and_idempotence() {
        let model = QuantizedModel {
            input: Some(ImageShape::new(3, 5, 5)),
            layers: vec![
                QLayer::RealConv {
                    geometry: Conv3x3 { in_ch: 3, out_ch: 1, stride: 1, padding: 1 },
                    weights: (0..27).map(|i| i as f64 * -0.1).collect(),
                },
                QLayer::BatchNorm(FoldedBatchNorm { scale: vec![2.0], bias: vec![0.5] }),
                QLayer::Sign,
                QLayer::MaxPool2,
                conv_with_mix(3, 2, 4),
                QLayer::BinLinear {
                    in_features: 3,
                    out_features: 2,
                    omega: OmegaParams::PLUS_MINUS_ONE,
                    bits: vec![1, 0, 0, 1, 1, 0],
                    bn: FoldedBatchNorm::identity(2),
                },
                QLayer::RealLinear { in_features: 2, out_features: 2, weights: vec![1.0, -0.0, f64::MIN_POSITIVE, 3.0], bias: vec![0.1, 0.2] },
            ],
        };
        let bytes = encode(&model).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn distinct_errors() {
        let model = QuantizedModel { input: None, layers: vec![conv_with_mix(1, 1, 1)] };
        let bytes = encode(&model).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(decode(&bad), Err(DecodeError::BadMagic { offset: 0 }));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(DecodeError::BadVersion { offset: 4, found: 9 })));

        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] ^= 0xff;
        assert!(matches!(decode(&bad), Err(DecodeError::CrcMismatch { .. })));

        assert!(matches!(decode(&bytes[..6]), Err(DecodeError::TruncatedStream { .. })));

        // a valid CRC over a body that ends mid-record
        let mut cut = bytes[..bytes.len() - 10].to_vec();
        let crc = crc32fast::hash(&cut);
        cut.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode(&cut), Err(DecodeError::TruncatedStream { .. })));
    }

    #[test]
    fn rejects_kernel_code_11() {
        let model = QuantizedModel { input: None, layers: vec![conv_with_mix(1, 0, 0)] };
        let mut bytes = encode(&model).unwrap();
        let payload_at = bytes.len() - 4 - 1;
        bytes[payload_at] = 0b1100_0000;
        let body = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body]);
        bytes[body..].copy_from_slice(&crc.to_le_bytes());
        assert_eq!(decode(&bytes), Err(DecodeError::InvalidKernelCode { offset: payload_at }));
    }
}
