//! Frame and GOP containers, raw-video file I/O, normalization and padding.
//!
//! Frames hold planar samples (channel-major: all of channel 0, then channel
//! 1, ...). Three-channel frames loaded from `.y4m`/`.yuv` keep their YCbCr
//! samples untouched, so channel 0 is BT.601 luma.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Per-pixel samples of one frame, either at the 8-bit file boundary or in
/// the normalized working range [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    Byte(Vec<u8>),
    Real(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Samples,
}

impl Frame {
    pub fn from_bytes(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Size(format!(
                "frame data length {} != {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        Ok(Frame {
            width,
            height,
            channels,
            samples: Samples::Byte(data),
        })
    }

    pub fn from_reals(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Size(format!(
                "frame data length {} != {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        Ok(Frame {
            width,
            height,
            channels,
            samples: Samples::Real(data),
        })
    }

    pub fn is_normalized(&self) -> bool {
        matches!(self.samples, Samples::Real(_))
    }

    pub fn bytes(&self) -> Result<&[u8]> {
        match &self.samples {
            Samples::Byte(d) => Ok(d),
            Samples::Real(_) => Err(Error::State("expected 8-bit frame, got normalized".into())),
        }
    }

    pub fn reals(&self) -> Result<&[f32]> {
        match &self.samples {
            Samples::Real(d) => Ok(d),
            Samples::Byte(_) => Err(Error::State("expected normalized frame, got 8-bit".into())),
        }
    }

    /// Plane `c` of an 8-bit frame (channel 0 is luma for YCbCr content).
    pub fn plane(&self, c: usize) -> Result<&[u8]> {
        let d = self.bytes()?;
        let n = self.width * self.height;
        Ok(&d[c * n..(c + 1) * n])
    }

    pub fn luma(&self) -> Result<&[u8]> {
        self.plane(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameRole {
    I,
    P,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GopKind {
    PGop,
    BGop,
}

/// Original geometry remembered across [`pad_clip`], used to crop back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrigDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

/// An ordered run of frames with I/P/B role labels.
#[derive(Debug, Clone)]
pub struct GopClip {
    pub frames: Vec<Frame>,
    pub roles: Vec<FrameRole>,
    pub kind: GopKind,
}

impl GopClip {
    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn channels(&self) -> usize {
        self.frames[0].channels
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Indices of the frames the codec must predict (P or B).
    pub fn referencing_indices(&self) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r != FrameRole::I)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn reference_indices(&self) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == FrameRole::I)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Assigns I/P/B roles: `[I, P, P, ...]` for a P-GOP, `[I, B, ..., B, I]` for
/// a B-GOP.
pub fn structure_gop(frames: Vec<Frame>, kind: GopKind) -> Result<GopClip> {
    let n = frames.len();
    let min = match kind {
        GopKind::PGop => 2,
        GopKind::BGop => 3,
    };
    if n < min {
        return Err(Error::Size(format!(
            "{:?} needs at least {} frames, got {}",
            kind, min, n
        )));
    }
    let (w, h, c) = (frames[0].width, frames[0].height, frames[0].channels);
    for f in &frames {
        if (f.width, f.height, f.channels) != (w, h, c) {
            return Err(Error::shape(
                "structure_gop",
                format!("{}x{}x{}", w, h, c),
                format!("{}x{}x{}", f.width, f.height, f.channels),
            ));
        }
    }
    let mut roles = vec![FrameRole::I];
    match kind {
        GopKind::PGop => roles.extend(std::iter::repeat(FrameRole::P).take(n - 1)),
        GopKind::BGop => {
            roles.extend(std::iter::repeat(FrameRole::B).take(n - 2));
            roles.push(FrameRole::I);
        }
    }
    Ok(GopClip {
        frames,
        roles,
        kind,
    })
}

/// Maps 8-bit samples to `x / 127.5 - 1`, the (-1, 1)-centered working range.
pub fn normalize(clip: &GopClip) -> Result<GopClip> {
    let frames = clip
        .frames
        .iter()
        .map(|f| {
            let d = f.bytes()?;
            let reals: Vec<f32> = d.iter().map(|&x| x as f32 / 127.5 - 1.0).collect();
            Frame::from_reals(f.width, f.height, f.channels, reals)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GopClip {
        frames,
        roles: clip.roles.clone(),
        kind: clip.kind,
    })
}

/// Exact inverse of [`normalize`]: rescale, round to nearest, clamp to [0, 255].
pub fn denormalize(clip: &GopClip) -> Result<GopClip> {
    let frames = clip
        .frames
        .iter()
        .map(|f| denormalize_frame(f))
        .collect::<Result<Vec<_>>>()?;
    Ok(GopClip {
        frames,
        roles: clip.roles.clone(),
        kind: clip.kind,
    })
}

pub fn denormalize_frame(f: &Frame) -> Result<Frame> {
    let d = f.reals()?;
    let bytes: Vec<u8> = d
        .iter()
        .map(|&x| ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
        .collect();
    Frame::from_bytes(f.width, f.height, f.channels, bytes)
}

/// Pads spatial axes by edge replication and the temporal axis by repeating
/// the last frame, up to the next multiple. Returns the original dimensions
/// for later cropping; padded frames must be excluded from metrics.
pub fn pad_clip(clip: &GopClip, multiple: usize) -> Result<(GopClip, OrigDims)> {
    assert!(multiple >= 1);
    let orig = OrigDims {
        frames: clip.len(),
        height: clip.height(),
        width: clip.width(),
    };
    let round_up = |x: usize| x.div_ceil(multiple) * multiple;
    let (new_h, new_w) = (round_up(orig.height), round_up(orig.width));
    let new_t = round_up(orig.frames);

    let mut frames: Vec<Frame> = clip
        .frames
        .iter()
        .map(|f| pad_frame(f, new_h, new_w))
        .collect::<Result<Vec<_>>>()?;
    let mut roles = clip.roles.clone();
    while frames.len() < new_t {
        frames.push(frames.last().unwrap().clone());
        roles.push(*roles.last().unwrap());
    }
    Ok((
        GopClip {
            frames,
            roles,
            kind: clip.kind,
        },
        orig,
    ))
}

fn pad_frame(f: &Frame, new_h: usize, new_w: usize) -> Result<Frame> {
    if new_h == f.height && new_w == f.width {
        return Ok(f.clone());
    }
    match &f.samples {
        Samples::Byte(d) => {
            let out = pad_planes(d, f.width, f.height, f.channels, new_h, new_w);
            Frame::from_bytes(new_w, new_h, f.channels, out)
        }
        Samples::Real(d) => {
            let out = pad_planes(d, f.width, f.height, f.channels, new_h, new_w);
            Frame::from_reals(new_w, new_h, f.channels, out)
        }
    }
}

fn pad_planes<T: Copy>(
    d: &[T],
    w: usize,
    h: usize,
    channels: usize,
    new_h: usize,
    new_w: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(new_w * new_h * channels);
    for c in 0..channels {
        for y in 0..new_h {
            let sy = y.min(h - 1);
            let row = &d[(c * h + sy) * w..(c * h + sy) * w + w];
            for x in 0..new_w {
                out.push(row[x.min(w - 1)]);
            }
        }
    }
    out
}

/// Inverse of [`pad_clip`].
pub fn crop_clip(clip: &GopClip, orig: OrigDims) -> Result<GopClip> {
    let frames = clip.frames[..orig.frames]
        .iter()
        .map(|f| crop_frame(f, orig.height, orig.width))
        .collect::<Result<Vec<_>>>()?;
    Ok(GopClip {
        frames,
        roles: clip.roles[..orig.frames].to_vec(),
        kind: clip.kind,
    })
}

fn crop_frame(f: &Frame, new_h: usize, new_w: usize) -> Result<Frame> {
    if new_h == f.height && new_w == f.width {
        return Ok(f.clone());
    }
    match &f.samples {
        Samples::Byte(d) => {
            let out = crop_planes(d, f.width, f.height, f.channels, new_h, new_w);
            Frame::from_bytes(new_w, new_h, f.channels, out)
        }
        Samples::Real(d) => {
            let out = crop_planes(d, f.width, f.height, f.channels, new_h, new_w);
            Frame::from_reals(new_w, new_h, f.channels, out)
        }
    }
}

fn crop_planes<T: Copy>(
    d: &[T],
    w: usize,
    h: usize,
    channels: usize,
    new_h: usize,
    new_w: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(new_w * new_h * channels);
    for c in 0..channels {
        for y in 0..new_h {
            let row = &d[(c * h + y) * w..(c * h + y) * w + new_w];
            out.extend_from_slice(row);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Chroma {
    C420,
    C444,
}

/// Reads a YUV4MPEG2 stream into a P-GOP structured clip of 3-channel 8-bit
/// frames. 4:2:0 chroma is upsampled to full resolution by nearest neighbor.
pub fn load_y4m(path: impl AsRef<Path>) -> Result<GopClip> {
    let file = File::open(path.as_ref())?;
    let mut reader = BufReader::new(file);
    let mut header = Vec::new();
    reader.read_until(b'\n', &mut header)?;
    if header.last() != Some(&b'\n') {
        return Err(Error::Format("y4m: missing header terminator".into()));
    }
    header.pop();
    let header = String::from_utf8(header)
        .map_err(|_| Error::Format("y4m: header is not valid ASCII".into()))?;

    let mut parts = header.split(' ');
    if parts.next() != Some("YUV4MPEG2") {
        return Err(Error::Format("y4m: bad magic".into()));
    }
    let (mut width, mut height) = (0usize, 0usize);
    let mut chroma = Chroma::C420; // y4m default
    for tok in parts {
        match tok.chars().next() {
            Some('W') => {
                width = tok[1..]
                    .parse()
                    .map_err(|_| Error::Format(format!("y4m: bad width token {tok}")))?
            }
            Some('H') => {
                height = tok[1..]
                    .parse()
                    .map_err(|_| Error::Format(format!("y4m: bad height token {tok}")))?
            }
            Some('C') => {
                chroma = match &tok[1..] {
                    "444" => Chroma::C444,
                    "420" | "420jpeg" | "420mpeg2" | "420paldv" => Chroma::C420,
                    other => {
                        return Err(Error::Format(format!(
                            "y4m: unsupported chroma subsampling C{other}"
                        )))
                    }
                };
            }
            _ => {} // frame rate, interlace, aspect: ignored
        }
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("y4m: header missing W or H".into()));
    }
    if chroma == Chroma::C420 && (width % 2 != 0 || height % 2 != 0) {
        return Err(Error::Format(
            "y4m: 4:2:0 requires even frame dimensions".into(),
        ));
    }

    let plane = width * height;
    let chroma_len = match chroma {
        Chroma::C444 => plane,
        Chroma::C420 => (width / 2) * (height / 2),
    };
    let frame_len = plane + 2 * chroma_len;

    let mut frames = Vec::new();
    loop {
        let mut marker = Vec::new();
        let n = reader.read_until(b'\n', &mut marker)?;
        if n == 0 {
            break; // clean EOF
        }
        if !marker.starts_with(b"FRAME") || marker.last() != Some(&b'\n') {
            return Err(Error::truncated(
                format!("y4m frame {} marker", frames.len()),
                frame_len,
                0,
            ));
        }
        let mut payload = vec![0u8; frame_len];
        read_exact_or_truncated(&mut reader, &mut payload, frames.len())?;
        frames.push(decode_y4m_frame(&payload, width, height, chroma)?);
    }
    if frames.is_empty() {
        return Err(Error::Format("y4m: no frames".into()));
    }
    if frames.len() == 1 {
        // A single frame cannot satisfy any GOP structure; keep it loadable.
        return Ok(GopClip {
            frames,
            roles: vec![FrameRole::I],
            kind: GopKind::PGop,
        });
    }
    structure_gop(frames, GopKind::PGop)
}

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8], frame_idx: usize) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(Error::truncated(
                format!("y4m frame {frame_idx} payload"),
                buf.len(),
                filled,
            ));
        }
        filled += n;
    }
    Ok(())
}

fn decode_y4m_frame(payload: &[u8], width: usize, height: usize, chroma: Chroma) -> Result<Frame> {
    let plane = width * height;
    let mut data = Vec::with_capacity(3 * plane);
    data.extend_from_slice(&payload[..plane]);
    match chroma {
        Chroma::C444 => data.extend_from_slice(&payload[plane..]),
        Chroma::C420 => {
            let (cw, ch) = (width / 2, height / 2);
            for c in 0..2 {
                let src = &payload[plane + c * cw * ch..plane + (c + 1) * cw * ch];
                for y in 0..height {
                    for x in 0..width {
                        data.push(src[(y / 2) * cw + x / 2]);
                    }
                }
            }
        }
    }
    Frame::from_bytes(width, height, 3, data)
}

/// Writes 3-channel 8-bit frames as YUV4MPEG2 with C444 subsampling.
/// Round-trips byte-identically with [`load_y4m`] on 4:4:4 inputs.
pub fn save_y4m(clip: &GopClip, path: impl AsRef<Path>) -> Result<()> {
    if clip.channels() != 3 {
        return Err(Error::State(format!(
            "save_y4m requires 3-channel frames, got {}",
            clip.channels()
        )));
    }
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    writeln!(
        w,
        "YUV4MPEG2 W{} H{} F25:1 Ip A1:1 C444",
        clip.width(),
        clip.height()
    )?;
    for f in &clip.frames {
        writeln!(w, "FRAME")?;
        w.write_all(f.bytes()?)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads raw planar 4:2:0 data with explicit geometry (no container header).
pub fn load_yuv420(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    frame_count: usize,
) -> Result<GopClip> {
    if width % 2 != 0 || height % 2 != 0 {
        return Err(Error::Format(
            "yuv: 4:2:0 requires even frame dimensions".into(),
        ));
    }
    let file = File::open(path.as_ref())?;
    let mut reader = BufReader::new(file);
    let frame_len = width * height + 2 * (width / 2) * (height / 2);
    let mut frames = Vec::with_capacity(frame_count);
    for i in 0..frame_count {
        let mut payload = vec![0u8; frame_len];
        read_exact_or_truncated(&mut reader, &mut payload, i)?;
        frames.push(decode_y4m_frame(&payload, width, height, Chroma::C420)?);
    }
    structure_gop(frames, GopKind::PGop)
}

/// YCbCr -> RGB with fixed full-range BT.601 coefficients.
pub fn yuv_to_rgb(f: &Frame) -> Result<Frame> {
    if f.channels != 3 {
        return Err(Error::State("yuv_to_rgb requires 3 channels".into()));
    }
    let n = f.width * f.height;
    let (y, cb, cr) = (f.plane(0)?, f.plane(1)?, f.plane(2)?);
    let mut out = vec![0u8; 3 * n];
    for i in 0..n {
        let (yv, cbv, crv) = (y[i] as f32, cb[i] as f32 - 128.0, cr[i] as f32 - 128.0);
        out[i] = (yv + 1.402 * crv).round().clamp(0.0, 255.0) as u8;
        out[n + i] = (yv - 0.344136 * cbv - 0.714136 * crv)
            .round()
            .clamp(0.0, 255.0) as u8;
        out[2 * n + i] = (yv + 1.772 * cbv).round().clamp(0.0, 255.0) as u8;
    }
    Frame::from_bytes(f.width, f.height, 3, out)
}

/// RGB -> YCbCr with fixed full-range BT.601 coefficients.
pub fn rgb_to_yuv(f: &Frame) -> Result<Frame> {
    if f.channels != 3 {
        return Err(Error::State("rgb_to_yuv requires 3 channels".into()));
    }
    let n = f.width * f.height;
    let (r, g, b) = (f.plane(0)?, f.plane(1)?, f.plane(2)?);
    let mut out = vec![0u8; 3 * n];
    for i in 0..n {
        let (rv, gv, bv) = (r[i] as f32, g[i] as f32, b[i] as f32);
        out[i] = (0.299 * rv + 0.587 * gv + 0.114 * bv)
            .round()
            .clamp(0.0, 255.0) as u8;
        out[n + i] = (128.0 - 0.168736 * rv - 0.331264 * gv + 0.5 * bv)
            .round()
            .clamp(0.0, 255.0) as u8;
        out[2 * n + i] = (128.0 + 0.5 * rv - 0.418688 * gv - 0.081312 * bv)
            .round()
            .clamp(0.0, 255.0) as u8;
    }
    Frame::from_bytes(f.width, f.height, 3, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray_frame(w: usize, h: usize, v: u8) -> Frame {
        Frame::from_bytes(w, h, 3, vec![v; w * h * 3]).unwrap()
    }

    #[test]
    fn normalize_endpoints() {
        let clip = structure_gop(
            vec![
                Frame::from_bytes(2, 1, 1, vec![0, 255]).unwrap(),
                Frame::from_bytes(2, 1, 1, vec![128, 127]).unwrap(),
            ],
            GopKind::PGop,
        )
        .unwrap();
        let n = normalize(&clip).unwrap();
        let d0 = n.frames[0].reals().unwrap();
        assert_eq!(d0[0], -1.0);
        assert_eq!(d0[1], 1.0);
        let d1 = n.frames[1].reals().unwrap();
        assert!((d1[0] - (128.0 / 127.5 - 1.0)).abs() < 1e-7);
    }

    #[test]
    fn normalize_rejects_normalized_input() {
        let clip = structure_gop(vec![gray_frame(2, 2, 9), gray_frame(2, 2, 9)], GopKind::PGop)
            .unwrap();
        let n = normalize(&clip).unwrap();
        assert!(matches!(normalize(&n), Err(Error::State(_))));
        assert!(matches!(denormalize(&clip), Err(Error::State(_))));
    }

    #[test]
    fn denormalize_is_exact_inverse_on_all_byte_values() {
        let data: Vec<u8> = (0..=255).collect();
        let f = Frame::from_bytes(16, 16, 1, data.clone()).unwrap();
        let clip = structure_gop(vec![f.clone(), f], GopKind::PGop).unwrap();
        let round = denormalize(&normalize(&clip).unwrap()).unwrap();
        assert_eq!(round.frames[0].bytes().unwrap(), &data[..]);
    }

    #[test]
    fn structure_gop_roles() {
        let frames: Vec<Frame> = (0..17).map(|_| gray_frame(4, 4, 1)).collect();
        let p = structure_gop(frames.clone(), GopKind::PGop).unwrap();
        assert_eq!(p.roles[0], FrameRole::I);
        assert!(p.roles[1..].iter().all(|r| *r == FrameRole::P));
        assert_eq!(p.referencing_indices().len(), 16);

        let frames18: Vec<Frame> = (0..18).map(|_| gray_frame(4, 4, 1)).collect();
        let b = structure_gop(frames18, GopKind::BGop).unwrap();
        assert_eq!(b.roles[0], FrameRole::I);
        assert_eq!(b.roles[17], FrameRole::I);
        assert!(b.roles[1..17].iter().all(|r| *r == FrameRole::B));
        assert_eq!(b.referencing_indices().len(), 16);
    }

    #[test]
    fn structure_gop_too_few_frames() {
        let frames: Vec<Frame> = (0..2).map(|_| gray_frame(4, 4, 1)).collect();
        assert!(matches!(
            structure_gop(frames, GopKind::BGop),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let frames: Vec<Frame> = (0..18)
            .map(|i| {
                let d: Vec<u8> = (0..60 * 60).map(|j| ((i * 7 + j) % 251) as u8).collect();
                Frame::from_bytes(60, 60, 1, d).unwrap()
            })
            .collect();
        let clip = structure_gop(frames, GopKind::BGop).unwrap();
        let (padded, orig) = pad_clip(&clip, 8).unwrap();
        assert_eq!(padded.len(), 24);
        assert_eq!((padded.width(), padded.height()), (64, 64));
        assert_eq!(orig, OrigDims { frames: 18, height: 60, width: 60 });
        let back = crop_clip(&padded, orig).unwrap();
        for (a, b) in back.frames.iter().zip(clip.frames.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn pad_noop_when_aligned() {
        let frames: Vec<Frame> = (0..16).map(|_| gray_frame(64, 64, 3)).collect();
        let clip = structure_gop(frames, GopKind::PGop).unwrap();
        let (padded, _) = pad_clip(&clip, 8).unwrap();
        assert_eq!(padded.len(), 16);
        assert_eq!((padded.width(), padded.height()), (64, 64));
    }

    #[test]
    fn pad_17_frames_to_24() {
        let frames: Vec<Frame> = (0..17).map(|_| gray_frame(64, 64, 1)).collect();
        let clip = structure_gop(frames, GopKind::PGop).unwrap();
        let (padded, orig) = pad_clip(&clip, 8).unwrap();
        assert_eq!(padded.len(), 24);
        assert_eq!(orig.frames, 17);
    }

    #[test]
    fn y4m_constant_444_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.y4m");
        let clip = structure_gop(vec![gray_frame(4, 4, 128), gray_frame(4, 4, 128)], GopKind::PGop)
            .unwrap();
        save_y4m(&clip, &path).unwrap();
        let loaded = load_y4m(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert!(loaded.frames[0].bytes().unwrap().iter().all(|&v| v == 128));

        // byte-identical round trip
        let path2 = dir.path().join("c2.y4m");
        save_y4m(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn y4m_420_hand_fixture() {
        // header W16 H8 C420, 3 frames of 16*8*1.5 bytes
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.y4m");
        let mut bytes: Vec<u8> = b"YUV4MPEG2 W16 H8 F25:1 C420\n".to_vec();
        let frame_len = 16 * 8 + 2 * (8 * 4);
        for i in 0..3u8 {
            bytes.extend_from_slice(b"FRAME\n");
            bytes.extend(std::iter::repeat(i * 10).take(frame_len));
        }
        std::fs::write(&path, &bytes).unwrap();
        let clip = load_y4m(&path).unwrap();
        assert_eq!(clip.len(), 3);
        assert_eq!((clip.width(), clip.height(), clip.channels()), (16, 8, 3));
    }

    #[test]
    fn y4m_missing_frame_marker_is_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.y4m");
        let mut bytes: Vec<u8> = b"YUV4MPEG2 W4 H4 F25:1 C444\n".to_vec();
        bytes.extend(std::iter::repeat(7u8).take(48)); // payload without FRAME marker
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_y4m(&path),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn y4m_truncated_payload_names_frame() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.y4m");
        let mut bytes: Vec<u8> = b"YUV4MPEG2 W4 H4 F25:1 C444\n".to_vec();
        bytes.extend_from_slice(b"FRAME\n");
        bytes.extend(std::iter::repeat(1u8).take(48));
        bytes.extend_from_slice(b"FRAME\n");
        bytes.extend(std::iter::repeat(2u8).take(10)); // cut short
        std::fs::write(&path, &bytes).unwrap();
        match load_y4m(&path) {
            Err(Error::Truncated { context, .. }) => assert!(context.contains('1')),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn y4m_bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.y4m");
        std::fs::write(&path, b"NOTAY4M W4 H4\nFRAME\n").unwrap();
        assert!(matches!(load_y4m(&path), Err(Error::Format(_))));
    }

    #[test]
    fn rgb_yuv_conversion_is_close_to_inverse() {
        // start from RGB: arbitrary YCbCr triples may fall outside the gamut
        let d: Vec<u8> = (0..3 * 64).map(|i| ((i * 37) % 256) as u8).collect();
        let f = Frame::from_bytes(8, 8, 3, d).unwrap();
        let back = yuv_to_rgb(&rgb_to_yuv(&f).unwrap()).unwrap();
        for (a, b) in f.bytes().unwrap().iter().zip(back.bytes().unwrap()) {
            assert!((*a as i32 - *b as i32).abs() <= 3, "{a} vs {b}");
        }
    }
}
