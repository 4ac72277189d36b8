//! Bit-exact serialization: MV payloads, the optional MVD transform, and the
//! `.dmc` container shared by the learned and block codecs.
//!
//! Container layout, little-endian:
//!
//! ```text
//! "DMC1" | kind u8 | W u16 | H u16 | n_reference u8 | n_referencing u8
//! learned: c_bnd u8 | levels u8 (0 = no DBA) | prefix_bits u32 | payload_bits u32
//!          | prefix bytes | payload bytes
//! block:   algorithm u8 | mb u8 | p u8 | mvd u8 | payload_bits u32
//!          | per-frame payload bit lengths u32 x n_referencing | payload bytes
//! ```
//!
//! Bit buffers are MSB-first; the final byte is zero-padded. Headers and the
//! per-frame length table are reshaping overhead and never count toward bpp.

use crate::block::{Algorithm, MotionField};
use crate::error::{Error, Result};

/// Append-only bit buffer, MSB-first within each byte.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BitBuf {
    bytes: Vec<u8>,
    bits: usize,
}

impl BitBuf {
    pub fn new() -> Self {
        BitBuf::default()
    }

    pub fn from_bytes(bytes: Vec<u8>, bits: usize) -> Result<Self> {
        if bits > bytes.len() * 8 {
            return Err(Error::truncated("bit buffer", bits, bytes.len() * 8));
        }
        Ok(BitBuf { bytes, bits })
    }

    pub fn len_bits(&self) -> usize {
        self.bits
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    /// Backing bytes; trailing bits of the last byte are zero.
    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn push_bit(&mut self, bit: bool) {
        let byte = self.bits / 8;
        if byte == self.bytes.len() {
            self.bytes.push(0);
        }
        if bit {
            self.bytes[byte] |= 1 << (7 - self.bits % 8);
        }
        self.bits += 1;
    }

    /// Pushes the low `n` bits of `value`, most significant first.
    pub fn push_bits(&mut self, value: u64, n: usize) {
        for i in (0..n).rev() {
            self.push_bit((value >> i) & 1 == 1);
        }
    }

    pub fn extend(&mut self, other: &BitBuf) {
        for i in 0..other.bits {
            self.push_bit(other.get(i));
        }
    }

    #[inline]
    fn get(&self, i: usize) -> bool {
        (self.bytes[i / 8] >> (7 - i % 8)) & 1 == 1
    }
}

pub struct BitReader<'a> {
    buf: &'a BitBuf,
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(buf: &'a BitBuf) -> Self {
        BitReader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.bits - self.pos
    }

    pub fn read_bit(&mut self) -> Result<bool> {
        if self.pos >= self.buf.bits {
            return Err(Error::truncated("bit read", self.pos + 1, self.buf.bits));
        }
        let b = self.buf.get(self.pos);
        self.pos += 1;
        Ok(b)
    }

    pub fn read_bits(&mut self, n: usize) -> Result<u64> {
        let mut v = 0u64;
        for _ in 0..n {
            v = (v << 1) | self.read_bit()? as u64;
        }
        Ok(v)
    }
}

/// Bits needed to address values in `[0, n)`.
pub fn ceil_log2(n: usize) -> usize {
    assert!(n >= 1);
    (usize::BITS - (n - 1).leading_zeros()) as usize
}

/// Whether MV records address blocks by the reference-block center the vector
/// points to (the raw payload) or by the target-block center (MVD mode, where
/// the stored components are differences, not displacements).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CenterMode {
    Reference,
    Target,
}

#[derive(Debug, Clone, Copy)]
pub struct MvGeometry {
    pub width: usize,
    pub height: usize,
    pub mb: usize,
    /// Maximum component magnitude a record can carry (p, or 2p in MVD mode).
    pub range: usize,
    pub center: CenterMode,
}

impl MvGeometry {
    pub fn component_bits(&self) -> usize {
        1 + ceil_log2(self.range + 1)
    }

    /// Fixed size of one MV record in bits.
    pub fn record_bits(&self) -> usize {
        2 * self.component_bits() + ceil_log2(self.width) + ceil_log2(self.height)
    }
}

fn push_component(buf: &mut BitBuf, v: i32, mag_bits: usize) {
    buf.push_bit(v < 0);
    buf.push_bits(v.unsigned_abs() as u64, mag_bits);
}

fn read_component(r: &mut BitReader, mag_bits: usize) -> Result<i32> {
    let neg = r.read_bit()?;
    let mag = r.read_bits(mag_bits)? as i32;
    Ok(if neg { -mag } else { mag })
}

/// Serializes every nonzero vector of every field. Zero vectors emit nothing
/// (they are discounted from the bit budget). Returns the payload and the
/// per-field bit lengths needed to split it again.
pub fn encode_mv_payload(fields: &[MotionField], geom: &MvGeometry) -> Result<(BitBuf, Vec<u32>)> {
    let mag_bits = geom.component_bits() - 1;
    let (xbits, ybits) = (ceil_log2(geom.width), ceil_log2(geom.height));
    let mut buf = BitBuf::new();
    let mut frame_bits = Vec::with_capacity(fields.len());
    for field in fields {
        let start = buf.len_bits();
        for by in 0..field.grid_h {
            for bx in 0..field.grid_w {
                let (dx, dy) = field.at(bx, by);
                if (dx, dy) == (0, 0) {
                    continue;
                }
                if dx.unsigned_abs() as usize > geom.range
                    || dy.unsigned_abs() as usize > geom.range
                {
                    return Err(Error::Range(format!(
                        "vector ({dx},{dy}) exceeds range {}",
                        geom.range
                    )));
                }
                let half = (geom.mb / 2) as i32;
                let (mut cx, mut cy) = ((bx * geom.mb) as i32 + half, (by * geom.mb) as i32 + half);
                if geom.center == CenterMode::Reference {
                    cx += dx;
                    cy += dy;
                }
                push_component(&mut buf, dx, mag_bits);
                push_component(&mut buf, dy, mag_bits);
                buf.push_bits(cx as u64, xbits);
                buf.push_bits(cy as u64, ybits);
            }
        }
        frame_bits.push((buf.len_bits() - start) as u32);
    }
    Ok((buf, frame_bits))
}

/// Exact inverse of [`encode_mv_payload`]; blocks without a record get a
/// zero vector.
pub fn decode_mv_payload(
    payload: &BitBuf,
    frame_bits: &[u32],
    geom: &MvGeometry,
) -> Result<Vec<MotionField>> {
    let record = geom.record_bits();
    let mag_bits = geom.component_bits() - 1;
    let (xbits, ybits) = (ceil_log2(geom.width), ceil_log2(geom.height));
    let mut r = BitReader::new(payload);
    let mut fields = Vec::with_capacity(frame_bits.len());
    for (fi, &bits) in frame_bits.iter().enumerate() {
        let bits = bits as usize;
        if bits % record != 0 {
            return Err(Error::truncated(
                format!("mv payload frame {fi}"),
                bits.div_ceil(record) * record,
                bits,
            ));
        }
        let mut field = MotionField::zero(geom.width, geom.height, geom.mb);
        for _ in 0..bits / record {
            let dx = read_component(&mut r, mag_bits)?;
            let dy = read_component(&mut r, mag_bits)?;
            let cx = r.read_bits(xbits)? as i32;
            let cy = r.read_bits(ybits)? as i32;
            let (mut tx, mut ty) = (cx, cy);
            if geom.center == CenterMode::Reference {
                tx -= dx;
                ty -= dy;
            }
            let half = (geom.mb / 2) as i32;
            let (ox, oy) = (tx - half, ty - half);
            if ox < 0 || oy < 0 || ox % geom.mb as i32 != 0 || oy % geom.mb as i32 != 0 {
                return Err(Error::Format(format!(
                    "mv record addresses off-grid block center ({cx},{cy})"
                )));
            }
            let (bx, by) = (ox as usize / geom.mb, oy as usize / geom.mb);
            if bx >= field.grid_w || by >= field.grid_h {
                return Err(Error::Format(format!(
                    "mv record addresses block ({bx},{by}) outside {}x{} grid",
                    field.grid_w, field.grid_h
                )));
            }
            field.vectors[by * field.grid_w + bx] = (dx, dy);
        }
        fields.push(field);
    }
    if r.remaining() != 0 {
        return Err(Error::truncated(
            "mv payload tail",
            payload.len_bits() - r.remaining(),
            payload.len_bits(),
        ));
    }
    Ok(fields)
}

/// Forward MVD transform: per field, the predictor (MVP) is the rounded
/// component-wise mean of the nonzero vectors, and every vector is replaced
/// by its difference from the MVP.
pub fn mvd_forward(fields: &[MotionField]) -> (Vec<MotionField>, Vec<(i32, i32)>) {
    let mut out = Vec::with_capacity(fields.len());
    let mut mvps = Vec::with_capacity(fields.len());
    for field in fields {
        let nonzero: Vec<(i32, i32)> = field
            .vectors
            .iter()
            .copied()
            .filter(|v| *v != (0, 0))
            .collect();
        let mvp = if nonzero.is_empty() {
            (0, 0)
        } else {
            let n = nonzero.len() as f64;
            let sx: i64 = nonzero.iter().map(|v| v.0 as i64).sum();
            let sy: i64 = nonzero.iter().map(|v| v.1 as i64).sum();
            (
                (sx as f64 / n).round() as i32,
                (sy as f64 / n).round() as i32,
            )
        };
        let mut diff = field.clone();
        for v in diff.vectors.iter_mut() {
            *v = (v.0 - mvp.0, v.1 - mvp.1);
        }
        out.push(diff);
        mvps.push(mvp);
    }
    (out, mvps)
}

/// Exact inverse of [`mvd_forward`].
pub fn mvd_inverse(diffs: &[MotionField], mvps: &[(i32, i32)]) -> Vec<MotionField> {
    diffs
        .iter()
        .zip(mvps.iter())
        .map(|(field, mvp)| {
            let mut out = field.clone();
            for v in out.vectors.iter_mut() {
                *v = (v.0 + mvp.0, v.1 + mvp.1);
            }
            out
        })
        .collect()
}

pub const CONTAINER_MAGIC: &[u8; 4] = b"DMC1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecKind {
    LearnedP,
    LearnedB,
    Block,
}

impl CodecKind {
    fn id(&self) -> u8 {
        match self {
            CodecKind::LearnedP => 0,
            CodecKind::LearnedB => 1,
            CodecKind::Block => 2,
        }
    }

    fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(CodecKind::LearnedP),
            1 => Ok(CodecKind::LearnedB),
            2 => Ok(CodecKind::Block),
            other => Err(Error::Format(format!("container: unknown kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CodecParams {
    /// `levels == 0` means the code is transmitted unmasked (no DBA).
    Learned { c_bnd: u8, levels: u8 },
    Block {
        algorithm: Algorithm,
        mb: u8,
        p: u8,
        mvd: bool,
    },
}

/// One serialized GOP: header, importance-map prefix (learned path), payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodedGop {
    pub kind: CodecKind,
    pub width: u16,
    pub height: u16,
    pub n_reference: u8,
    pub n_referencing: u8,
    pub params: CodecParams,
    pub prefix: BitBuf,
    pub payload: BitBuf,
    /// Block path: per-referencing-frame payload bit lengths (MVP record
    /// included in MVD mode). Reshaping overhead, excluded from bpp.
    pub frame_bits: Vec<u32>,
}

impl CodedGop {
    /// Bits that effect motion transformation: importance prefix plus masked
    /// payload on the learned path, nonzero-MV records on the block path.
    pub fn counted_bits(&self) -> usize {
        match self.params {
            CodecParams::Learned { .. } => self.prefix.len_bits() + self.payload.len_bits(),
            CodecParams::Block { .. } => self.payload.len_bits(),
        }
    }
}

fn push_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_container(gop: &CodedGop) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.push(gop.kind.id());
    push_u16(&mut out, gop.width);
    push_u16(&mut out, gop.height);
    out.push(gop.n_reference);
    out.push(gop.n_referencing);
    match &gop.params {
        CodecParams::Learned { c_bnd, levels } => {
            out.push(*c_bnd);
            out.push(*levels);
            push_u32(&mut out, gop.prefix.len_bits() as u32);
            push_u32(&mut out, gop.payload.len_bits() as u32);
            out.extend_from_slice(gop.prefix.bytes());
            out.extend_from_slice(gop.payload.bytes());
        }
        CodecParams::Block {
            algorithm,
            mb,
            p,
            mvd,
        } => {
            out.push(algorithm.id());
            out.push(*mb);
            out.push(*p);
            out.push(*mvd as u8);
            push_u32(&mut out, gop.payload.len_bits() as u32);
            for fb in &gop.frame_bits {
                push_u32(&mut out, *fb);
            }
            out.extend_from_slice(gop.payload.bytes());
        }
    }
    out
}

struct ByteCursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::truncated(context, n, self.data.len() - self.pos));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, context: &str) -> Result<u8> {
        Ok(self.take(1, context)?[0])
    }

    fn u16(&mut self, context: &str) -> Result<u16> {
        let b = self.take(2, context)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, context: &str) -> Result<u32> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Decodes one container, returning it and the bytes consumed (`.dmc` files
/// are containers back to back).
pub fn decode_container(bytes: &[u8]) -> Result<(CodedGop, usize)> {
    let mut c = ByteCursor {
        data: bytes,
        pos: 0,
    };
    let magic = c.take(4, "container magic")?;
    if magic != CONTAINER_MAGIC {
        return Err(Error::Format(format!(
            "container: bad magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let kind = CodecKind::from_id(c.u8("container kind")?)?;
    let width = c.u16("container width")?;
    let height = c.u16("container height")?;
    let n_reference = c.u8("reference count")?;
    let n_referencing = c.u8("referencing count")?;
    let gop = match kind {
        CodecKind::LearnedP | CodecKind::LearnedB => {
            let c_bnd = c.u8("c_bnd")?;
            let levels = c.u8("levels")?;
            let prefix_bits = c.u32("prefix bits")? as usize;
            let payload_bits = c.u32("payload bits")? as usize;
            let prefix = BitBuf::from_bytes(
                c.take(prefix_bits.div_ceil(8), "prefix bytes")?.to_vec(),
                prefix_bits,
            )?;
            let payload = BitBuf::from_bytes(
                c.take(payload_bits.div_ceil(8), "payload bytes")?.to_vec(),
                payload_bits,
            )?;
            CodedGop {
                kind,
                width,
                height,
                n_reference,
                n_referencing,
                params: CodecParams::Learned { c_bnd, levels },
                prefix,
                payload,
                frame_bits: Vec::new(),
            }
        }
        CodecKind::Block => {
            let algorithm = Algorithm::from_id(c.u8("algorithm")?)?;
            let mb = c.u8("mb")?;
            let p = c.u8("p")?;
            let mvd = c.u8("mvd flag")? != 0;
            let payload_bits = c.u32("payload bits")? as usize;
            let mut frame_bits = Vec::with_capacity(n_referencing as usize);
            for _ in 0..n_referencing {
                frame_bits.push(c.u32("frame bits")?);
            }
            let total: usize = frame_bits.iter().map(|&b| b as usize).sum();
            if total != payload_bits {
                return Err(Error::Format(format!(
                    "container: frame bit table sums to {total}, payload declares {payload_bits}"
                )));
            }
            let payload = BitBuf::from_bytes(
                c.take(payload_bits.div_ceil(8), "payload bytes")?.to_vec(),
                payload_bits,
            )?;
            CodedGop {
                kind,
                width,
                height,
                n_reference,
                n_referencing,
                params: CodecParams::Block {
                    algorithm,
                    mb,
                    p,
                    mvd,
                },
                prefix: BitBuf::new(),
                payload,
                frame_bits,
            }
        }
    };
    Ok((gop, c.pos))
}

pub fn write_dmc_file(gops: &[CodedGop], path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut bytes = Vec::new();
    for g in gops {
        bytes.extend(encode_container(g));
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_dmc_file(path: impl AsRef<std::path::Path>) -> Result<Vec<CodedGop>> {
    let bytes = std::fs::read(path)?;
    let mut gops = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let (gop, used) = decode_container(&bytes[pos..])?;
        gops.push(gop);
        pos += used;
    }
    Ok(gops)
}
