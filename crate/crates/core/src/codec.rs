//! Compact encodings for fully connected weights and the streamed FC layer
//! that decodes them inside the enclave.
//!
//! Three codecs:
//!
//! * `raw32`: little-endian `f32`.
//! * `fp16`: IEEE half precision, round to nearest even. Values beyond
//!   `±65504` are clamped, NaN becomes 0.
//! * `lossy(b)`: per-block uniform quantizer. Each block of `block_size`
//!   values stores `min` and `scale` as `f32`; each value becomes the code
//!   `round((x - min) / scale)` in `b` bits, `2 <= b <= 10`. The codes of
//!   all blocks form one bit stream, least significant bit first, so the
//!   payload is exactly `ceil(n * b / 8)` bytes. `scale` is
//!   `(max - min) / (2^b - 1)` rounded up to the next `f32`, and 0 for a
//!   constant block.
//!
//! # Blob file layout
//!
//! All integers and floats little-endian.
//!
//! | offset | size | field |
//! |--------|------|-------|
//! | 0 | 4 | magic `TWB1` |
//! | 4 | 1 | codec tag: 0 raw32, 1 fp16, 2 lossy |
//! | 5 | 1 | bits per value (lossy), else 0 |
//! | 6 | 2 | reserved, 0 |
//! | 8 | 8 | element count `n` |
//! | 16 | 4 | block size (lossy), else 0 |
//! | 20 | 8 per block | lossy only: `min: f32`, `scale: f32` per block |
//! | .. | rest | payload |

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::enclave::{link_time, BufferHandle, Enclave, Memory, PagingStats};
use crate::error::{Error, Result};
use crate::layers::FcLayerSpec;

pub const DEFAULT_BLOCK_SIZE: usize = 1024;
pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 10;
const MAGIC: &[u8; 4] = b"TWB1";
const FILE_HEADER_BYTES: usize = 20;
const BLOCK_HEADER_BYTES: usize = 8;
const FP16_MAX: f32 = 65504.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "codec", rename_all = "lowercase")]
pub enum Codec {
    Raw32,
    Fp16,
    Lossy { bits: u8 },
}

impl Codec {
    pub fn lossy(bits: u8) -> Result<Self> {
        check_bits(bits)?;
        Ok(Codec::Lossy { bits })
    }

    /// Per-worker decode throughput relative to the link rate. Raw weights
    /// need no decoding.
    pub fn decode_rate(&self, link_pages_per_unit: f64) -> f64 {
        match self {
            Codec::Raw32 => f64::INFINITY,
            Codec::Fp16 => link_pages_per_unit / 2.0,
            Codec::Lossy { .. } => link_pages_per_unit / 6.0,
        }
    }

    fn tag(&self) -> (u8, u8) {
        match self {
            Codec::Raw32 => (0, 0),
            Codec::Fp16 => (1, 0),
            Codec::Lossy { bits } => (2, *bits),
        }
    }
}

impl std::fmt::Display for Codec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Codec::Raw32 => f.write_str("raw32"),
            Codec::Fp16 => f.write_str("fp16"),
            Codec::Lossy { bits } => write!(f, "lossy{bits}"),
        }
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::Codec(format!(
            "bits per value must be in {MIN_BITS}..={MAX_BITS}, got {bits}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub min: f32,
    pub scale: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightBlob {
    pub codec: Codec,
    pub element_count: usize,
    /// Lossy only; 0 otherwise.
    pub block_size: usize,
    pub headers: Vec<BlockHeader>,
    pub payload: Vec<u8>,
}

impl WeightBlob {
    pub fn raw32(weights: &[f32]) -> Self {
        WeightBlob {
            codec: Codec::Raw32,
            element_count: weights.len(),
            block_size: 0,
            headers: Vec::new(),
            payload: weights.iter().flat_map(|w| w.to_le_bytes()).collect(),
        }
    }

    pub fn encode(weights: &[f32], codec: Codec) -> Result<Self> {
        match codec {
            Codec::Raw32 => Ok(WeightBlob::raw32(weights)),
            Codec::Fp16 => Ok(quantize_fp16(weights)),
            Codec::Lossy { bits } => compress_lossy(weights, bits, DEFAULT_BLOCK_SIZE),
        }
    }

    pub fn header_bytes(&self) -> usize {
        self.headers.len() * BLOCK_HEADER_BYTES
    }

    /// Bytes that have to cross into the enclave: block headers + payload.
    pub fn stored_bytes(&self) -> usize {
        self.header_bytes() + self.payload.len()
    }

    pub fn pages(&self, page_bytes: u64) -> u64 {
        (self.stored_bytes() as u64).div_ceil(page_bytes)
    }

    /// Raw size over payload size.
    pub fn payload_ratio(&self) -> f64 {
        (4 * self.element_count) as f64 / self.payload.len() as f64
    }

    /// Raw size over stored size.
    pub fn total_ratio(&self) -> f64 {
        (4 * self.element_count) as f64 / self.stored_bytes() as f64
    }

    pub fn decode(&self) -> Result<Vec<f32>> {
        self.check()?;
        let mut out = vec![0.0; self.element_count];
        self.decode_range(0, &mut out);
        Ok(out)
    }

    /// Decodes elements `start..start + out.len()`. For lossy blobs `start`
    /// must be block aligned.
    fn decode_range(&self, start: usize, out: &mut [f32]) {
        match self.codec {
            Codec::Raw32 => {
                for (o, b) in out.iter_mut().zip(self.payload[start * 4..].chunks_exact(4)) {
                    *o = f32::from_le_bytes(b.try_into().unwrap());
                }
            }
            Codec::Fp16 => {
                for (o, b) in out.iter_mut().zip(self.payload[start * 2..].chunks_exact(2)) {
                    *o = half::f16::from_le_bytes([b[0], b[1]]).to_f32();
                }
            }
            Codec::Lossy { bits } => {
                let mut reader = BitReader::new(&self.payload, start * bits as usize);
                for (i, o) in out.iter_mut().enumerate() {
                    let h = self.headers[(start + i) / self.block_size];
                    let code = reader.take(bits);
                    *o = reconstruct(h, code);
                }
            }
        }
    }

    /// Validates payload and header sizes against the element count.
    pub fn check(&self) -> Result<()> {
        let n = self.element_count;
        let (want_payload, want_headers) = match self.codec {
            Codec::Raw32 => (4 * n, 0),
            Codec::Fp16 => (2 * n, 0),
            Codec::Lossy { bits } => {
                check_bits(bits)?;
                if self.block_size == 0 {
                    return Err(Error::Codec("lossy blob with block size 0".into()));
                }
                ((n * bits as usize).div_ceil(8), n.div_ceil(self.block_size))
            }
        };
        if self.payload.len() != want_payload || self.headers.len() != want_headers {
            return Err(Error::Codec(format!(
                "{} blob of {n} values needs {want_payload} payload bytes and {want_headers} block headers, found {} and {}",
                self.codec,
                self.payload.len(),
                self.headers.len()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (tag, bits) = self.codec.tag();
        let mut out = Vec::with_capacity(FILE_HEADER_BYTES + self.stored_bytes());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&[tag, bits, 0, 0]);
        out.extend_from_slice(&(self.element_count as u64).to_le_bytes());
        out.extend_from_slice(&(self.block_size as u32).to_le_bytes());
        for h in &self.headers {
            out.extend_from_slice(&h.min.to_le_bytes());
            out.extend_from_slice(&h.scale.to_le_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < FILE_HEADER_BYTES {
            return Err(Error::Codec(format!("truncated blob: {} bytes", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Codec("bad magic".into()));
        }
        let codec = match (bytes[4], bytes[5]) {
            (0, 0) => Codec::Raw32,
            (1, 0) => Codec::Fp16,
            (2, bits) => Codec::lossy(bits)?,
            (tag, bits) => return Err(Error::Codec(format!("unknown codec tag {tag}/{bits}"))),
        };
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let block_size = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let blocks = match codec {
            Codec::Lossy { .. } if block_size == 0 => return Err(Error::Codec("lossy blob with block size 0".into())),
            Codec::Lossy { .. } => n.div_ceil(block_size),
            _ => 0,
        };
        let body = &bytes[FILE_HEADER_BYTES..];
        if body.len() < blocks * BLOCK_HEADER_BYTES {
            return Err(Error::Codec("truncated block headers".into()));
        }
        let (head, payload) = body.split_at(blocks * BLOCK_HEADER_BYTES);
        let headers = head
            .chunks_exact(BLOCK_HEADER_BYTES)
            .map(|c| BlockHeader {
                min: f32::from_le_bytes(c[..4].try_into().unwrap()),
                scale: f32::from_le_bytes(c[4..].try_into().unwrap()),
            })
            .collect();
        let blob = WeightBlob {
            codec,
            element_count: n,
            block_size,
            headers,
            payload: payload.to_vec(),
        };
        blob.check()?;
        Ok(blob)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        WeightBlob::from_bytes(&bytes)
    }
}

fn sanitize_fp16(x: f32) -> f32 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(-FP16_MAX, FP16_MAX)
    }
}

/// Converts to half precision. Out-of-range values are clamped and NaN
/// becomes 0; [`CodecReport::clamped`] counts them.
pub fn quantize_fp16(weights: &[f32]) -> WeightBlob {
    let payload = weights
        .iter()
        .flat_map(|&x| half::f16::from_f32(sanitize_fp16(x)).to_le_bytes())
        .collect();
    WeightBlob {
        codec: Codec::Fp16,
        element_count: weights.len(),
        block_size: 0,
        headers: Vec::new(),
        payload,
    }
}

pub fn dequantize_fp16(blob: &WeightBlob) -> Result<Vec<f32>> {
    if blob.codec != Codec::Fp16 {
        return Err(Error::Codec(format!("expected an fp16 blob, got {}", blob.codec)));
    }
    blob.decode()
}

fn reconstruct(h: BlockHeader, code: u32) -> f32 {
    (h.min as f64 + code as f64 * h.scale as f64) as f32
}

fn block_header(block: &[f32], bits: u8) -> BlockHeader {
    let (lo, hi) = block.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    });
    let levels = ((1u32 << bits) - 1) as f64;
    let exact = (hi as f64 - lo as f64) / levels;
    let mut scale = exact as f32;
    // round up so the top code still reaches max
    if (scale as f64) < exact {
        scale = scale.next_up();
    }
    BlockHeader { min: lo, scale }
}

/// Per-block uniform quantization to `bits` bits per value.
pub fn compress_lossy(weights: &[f32], bits: u8, block_size: usize) -> Result<WeightBlob> {
    check_bits(bits)?;
    if block_size == 0 {
        return Err(Error::Codec("block size must be at least 1".into()));
    }
    if let Some(i) = weights.iter().position(|x| !x.is_finite()) {
        return Err(Error::Codec(format!("value {} at index {i} is not finite", weights[i])));
    }
    let max_code = (1u32 << bits) - 1;
    let mut headers = Vec::with_capacity(weights.len().div_ceil(block_size));
    let mut writer = BitWriter::with_capacity((weights.len() * bits as usize).div_ceil(8));
    for block in weights.chunks(block_size) {
        let h = block_header(block, bits);
        for &x in block {
            let code = if h.scale == 0.0 {
                0
            } else {
                (((x as f64 - h.min as f64) / h.scale as f64).round() as u32).min(max_code)
            };
            writer.put(code, bits);
        }
        headers.push(h);
    }
    Ok(WeightBlob {
        codec: Codec::Lossy { bits },
        element_count: weights.len(),
        block_size,
        headers,
        payload: writer.finish(),
    })
}

pub fn decompress(blob: &WeightBlob) -> Result<Vec<f32>> {
    if !matches!(blob.codec, Codec::Lossy { .. }) {
        return Err(Error::Codec(format!("expected a lossy blob, got {}", blob.codec)));
    }
    blob.decode()
}

struct BitWriter {
    out: Vec<u8>,
    acc: u64,
    filled: u32,
}

impl BitWriter {
    fn with_capacity(bytes: usize) -> Self {
        BitWriter {
            out: Vec::with_capacity(bytes),
            acc: 0,
            filled: 0,
        }
    }

    fn put(&mut self, code: u32, bits: u8) {
        self.acc |= (code as u64) << self.filled;
        self.filled += bits as u32;
        while self.filled >= 8 {
            self.out.push(self.acc as u8);
            self.acc >>= 8;
            self.filled -= 8;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.filled > 0 {
            self.out.push(self.acc as u8);
        }
        self.out
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    acc: u64,
    filled: u32,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8], bit_offset: usize) -> Self {
        let mut r = BitReader {
            bytes,
            pos: bit_offset / 8,
            acc: 0,
            filled: 0,
        };
        let skip = (bit_offset % 8) as u8;
        if skip > 0 {
            r.take(skip);
        }
        r
    }

    fn take(&mut self, bits: u8) -> u32 {
        while self.filled < bits as u32 {
            let byte = self.bytes.get(self.pos).copied().unwrap_or(0);
            self.acc |= (byte as u64) << self.filled;
            self.pos += 1;
            self.filled += 8;
        }
        let v = (self.acc & ((1u64 << bits) - 1)) as u32;
        self.acc >>= bits;
        self.filled -= bits as u32;
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecReport {
    pub codec: Codec,
    pub element_count: usize,
    pub raw_bytes: usize,
    pub stored_bytes: usize,
    pub payload_ratio: f64,
    pub total_ratio: f64,
    pub max_abs_error: f32,
    /// Values clamped or zeroed by fp16 conversion.
    pub clamped: usize,
    pub page_bytes: u64,
    pub pages_required: u64,
}

impl CodecReport {
    pub fn measure(original: &[f32], blob: &WeightBlob, page_bytes: u64) -> Result<Self> {
        let decoded = blob.decode()?;
        if decoded.len() != original.len() {
            return Err(Error::Codec(format!(
                "blob holds {} values, expected {}",
                decoded.len(),
                original.len()
            )));
        }
        let max_abs_error = original
            .iter()
            .zip(&decoded)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, |m, e| if e.is_nan() { m } else { m.max(e) });
        let clamped = match blob.codec {
            Codec::Fp16 => original.iter().filter(|x| x.is_nan() || x.abs() > FP16_MAX).count(),
            _ => 0,
        };
        Ok(CodecReport {
            codec: blob.codec,
            element_count: blob.element_count,
            raw_bytes: 4 * blob.element_count,
            stored_bytes: blob.stored_bytes(),
            payload_ratio: blob.payload_ratio(),
            total_ratio: blob.total_ratio(),
            max_abs_error,
            clamped,
            page_bytes,
            pages_required: blob.pages(page_bytes),
        })
    }
}

/// Elements decoded into the staging buffer at a time (non-lossy codecs).
const STAGE_ELEMS: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct FcStreamed {
    pub output: Vec<f32>,
    pub stats: PagingStats,
    /// Faults on the encoded weight buffer alone.
    pub weight_faults: u64,
    /// Transfer time of the encoded weights through the decryption link.
    pub cost_units: f64,
}

/// Fully connected layer whose weights arrive encoded and are decoded chunk
/// by chunk into a small staging buffer. The encoded weights are read once,
/// front to back. Accumulation order matches [`crate::layers::fc_direct`],
/// so raw32 results are bit-identical to it.
pub fn fc_streamed(
    input: &[f32],
    blob: &WeightBlob,
    bias: Option<&[f32]>,
    spec: &FcLayerSpec,
    enclave: &mut Enclave,
    workers: usize,
) -> Result<FcStreamed> {
    let in_buf = enclave.alloc(input.len() * 4, "fc-input");
    fc_streamed_from(input, &in_buf, blob, bias, spec, enclave, workers).map(|(r, _)| r)
}

/// [`fc_streamed`] reading its input from an existing buffer; also returns
/// the output buffer.
pub(crate) fn fc_streamed_from(
    input: &[f32],
    in_buf: &BufferHandle,
    blob: &WeightBlob,
    bias: Option<&[f32]>,
    spec: &FcLayerSpec,
    enclave: &mut Enclave,
    workers: usize,
) -> Result<(FcStreamed, BufferHandle)> {
    blob.check()?;
    if blob.element_count != spec.weight_len() || spec.weight_len() == 0 {
        return Err(Error::shape(
            "fc weights",
            format!("{}x{}", spec.out_features, spec.in_features),
            format!("{} encoded values", blob.element_count),
        ));
    }
    if input.len() != spec.in_features {
        return Err(Error::shape(
            "fc input",
            format!("{} features", spec.in_features),
            input.len(),
        ));
    }
    if bias.map_or(0, <[f32]>::len) != spec.bias_len() {
        return Err(Error::shape("fc bias", spec.bias_len(), bias.map_or(0, <[f32]>::len)));
    }
    if workers == 0 {
        return Err(Error::Config("at least one decode worker is required".into()));
    }

    let chunk = match blob.codec {
        Codec::Lossy { .. } => blob.block_size,
        _ => STAGE_ELEMS,
    };
    let before = enclave.stats();
    let w_buf = enclave.alloc(blob.stored_bytes(), "fc-weights");
    let stage_buf = enclave.alloc(chunk * 4, "fc-staging");
    let bias_buf = bias.map(|b| enclave.alloc(b.len() * 4, "fc-bias"));
    let out_buf = enclave.alloc(spec.out_features * 4, "fc-output");

    let n_in = spec.in_features;
    let mut output = vec![0.0f32; spec.out_features];
    let mut stage = vec![0.0f32; chunk];
    let mut acc = 0.0f32;
    for (ci, start) in (0..blob.element_count).step_by(chunk).enumerate() {
        let len = chunk.min(blob.element_count - start);
        match blob.codec {
            Codec::Raw32 => enclave.read(&w_buf, start * 4, len * 4)?,
            Codec::Fp16 => enclave.read(&w_buf, start * 2, len * 2)?,
            Codec::Lossy { bits } => {
                enclave.read(&w_buf, ci * BLOCK_HEADER_BYTES, BLOCK_HEADER_BYTES)?;
                let b = bits as usize;
                let (lo, hi) = (start * b / 8, ((start + len) * b).div_ceil(8));
                enclave.read(&w_buf, blob.header_bytes() + lo, hi - lo)?;
            }
        }
        blob.decode_range(start, &mut stage[..len]);
        enclave.write(&stage_buf, 0, len * 4)?;
        enclave.read(&stage_buf, 0, len * 4)?;

        for (idx, &w) in (start..).zip(&stage[..len]) {
            let (row, col) = (idx / n_in, idx % n_in);
            acc += w * input[col];
            if col + 1 == n_in {
                enclave.read(in_buf, 0, n_in * 4)?;
                output[row] = match bias {
                    Some(b) => acc + b[row],
                    None => acc,
                };
                if let Some(bb) = &bias_buf {
                    enclave.read(bb, row * 4, 4)?;
                }
                enclave.write(&out_buf, row * 4, 4)?;
                acc = 0.0;
            }
        }
    }
    let link = enclave.config().link_pages_per_unit;
    let pages = blob.pages(enclave.page_bytes());
    let result = FcStreamed {
        output,
        stats: enclave.stats() - before,
        weight_faults: enclave.buffer_stats(&w_buf).faults,
        cost_units: link_time(pages, workers, blob.codec.decode_rate(link), link),
    };
    Ok((result, out_buf))
}
