//! The GopSegment container: one GOP's model framed for storage and streaming.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! "STGS1"                     5 bytes magic
//! u16 version                 currently 1
//! u32 header length, header   see below
//! 8 sections, each u32 length + bytes, in this order:
//!   permutation               DEFLATE(u32 × N), cell of each Gaussian
//!   position scale rotation   DEFLATE(channel-planar side² plane per channel);
//!   opacity color             f32 for float attributes, u8/u16 codes otherwise
//!   feature video             E frames of 4·side × 4·side (codec bitstream)
//!   weights                   u32 layer count, (u32 rows, u32 cols) per layer,
//!                             then f32 weights layer-major, row-major
//! u32 CRC-32                  over every byte after the magic
//! ```
//!
//! Header:
//!
//! ```text
//! u32 G, W, feature_dim, N, side, pad_count, QP, time_bands
//! u8 codec (0 internal, 1 external), u8 name length, name bytes
//! 6 × rule   (position scale rotation opacity color features):
//!            u8 flags (1 fixed clip, 2 quantized), f64 clip lo, f64 clip hi, u32 levels
//! 6 × range  f64 lo, f64 hi used for (de)normalization
//! ```
//!
//! Padding cells replicate the last occupied cell. Features are normalized to
//! `[0, 1]` with their range before video coding; the external codec further
//! maps them to 8-bit gray as `round(255 u)`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use miniz_oxide::deflate::compress_to_vec;
use miniz_oxide::inflate::decompress_to_vec_with_limit;

use crate::error::{Error, Result, SegmentError};
use crate::gaussian::{slot_count, DeformationField, GaussianSet, StreamModel, TemporalFeatureBank};
use crate::grid::{
    dequantize_attribute, observed_range, quantize_attribute, sort_to_grid, tile_features, untile_features, AttrQuant,
    GridLayout, QuantSpec, Quantized,
};
use crate::math::{self, Mat};
use crate::video::{decode_feature_video, encode_feature_video, FeatureVideo};

pub const MAGIC: &[u8; 5] = b"STGS1";
pub const VERSION: u16 = 1;
pub const DEFAULT_MAX_GAUSSIANS: usize = 150_000;
pub const ATTRIBUTES: [&str; 5] = ["position", "scale", "rotation", "opacity", "color"];
const CHANNELS: [usize; 5] = [3, 3, 4, 1, 3];
const SECTIONS: [&str; 8] = ["permutation", "position", "scale", "rotation", "opacity", "color", "video", "weights"];
const DEFLATE_LEVEL: u8 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodecId {
    Internal,
    External,
}

/// A video codec living outside the crate (e.g. a subprocess), fed 8-bit frames.
pub trait ExternalCodec {
    fn name(&self) -> &str;
    fn encode(&self, frames: &[Vec<u8>], width: usize, height: usize, qp: u32) -> Result<Vec<u8>>;
    fn decode(&self, bitstream: &[u8], width: usize, height: usize, frames: usize, qp: u32) -> Result<Vec<Vec<u8>>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentHeader {
    pub version: u16,
    pub gop_length: usize,
    pub window: usize,
    pub feature_dim: usize,
    pub count: usize,
    pub side: usize,
    pub pad_count: usize,
    pub qp: u32,
    pub time_bands: usize,
    pub codec: CodecId,
    pub codec_name: String,
    pub quant: QuantSpec,
    /// `(lo, hi)` of position, scale, rotation, opacity, color and features.
    pub ranges: [(f64, f64); 6],
}

impl SegmentHeader {
    pub fn slots(&self) -> usize {
        slot_count(self.gop_length, self.window)
    }

    pub fn video_size(&self) -> usize {
        4 * self.side
    }

    fn rules(&self) -> [AttrQuant; 6] {
        rules(&self.quant)
    }
}

fn rules(q: &QuantSpec) -> [AttrQuant; 6] {
    [q.position, q.scale, q.rotation, q.opacity, q.color, q.features]
}

#[derive(Clone, Debug)]
pub struct EncodeOptions<'a> {
    pub quant: QuantSpec,
    pub max_gaussians: usize,
    pub sort_seed: u64,
    pub sort_sweeps: usize,
    /// Reuse this placement instead of sorting.
    pub layout: Option<&'a GridLayout>,
    pub external: Option<&'a dyn ExternalCodec>,
}

impl core::fmt::Debug for dyn ExternalCodec + '_ {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "ExternalCodec({})", self.name())
    }
}

impl Default for EncodeOptions<'_> {
    fn default() -> Self {
        Self {
            quant: QuantSpec::default(),
            max_gaussians: DEFAULT_MAX_GAUSSIANS,
            sort_seed: 0,
            sort_sweeps: 4,
            layout: None,
            external: None,
        }
    }
}

pub fn encode_gop(model: &StreamModel, qp: u32) -> Result<Vec<u8>> {
    encode_gop_with(model, qp, &EncodeOptions::default())
}

pub fn encode_gop_with(model: &StreamModel, qp: u32, opts: &EncodeOptions<'_>) -> Result<Vec<u8>> {
    model.validate()?;
    let g = &model.gaussians;
    let bank = &model.features;
    let n = g.count();
    if n == 0 {
        return Err(Error::Domain("cannot encode an empty model".into()));
    }
    if n > opts.max_gaussians {
        return Err(Error::Spec(alloc::format!("{n} Gaussians exceed the segment cap of {}", opts.max_gaussians)));
    }
    if bank.feature_dim != 16 {
        return Err(Error::Spec(alloc::format!("feature video needs 16 channels, got {}", bank.feature_dim)));
    }
    if qp > crate::video::MAX_QP {
        return Err(Error::Spec(alloc::format!("QP {qp} outside 0..={}", crate::video::MAX_QP)));
    }
    if opts.quant.features.levels.is_some() {
        return Err(Error::Spec("temporal features are coded by the video, not quantized".into()));
    }
    let owned;
    let layout = match opts.layout {
        Some(l) => {
            l.validate()?;
            if l.count() != n {
                return Err(Error::Shape(alloc::format!("layout has {} Gaussians, model {n}", l.count())));
            }
            l
        }
        None => {
            owned = sort_to_grid(g, opts.sort_seed, opts.sort_sweeps);
            &owned
        }
    };
    let rules = rules(&opts.quant);
    let attrs = [&g.positions, &g.scales, &g.rotations, &g.opacities, &g.colors];
    let mut ranges = [(0.0, 0.0); 6];
    let mut planes = Vec::with_capacity(5);
    for (k, m) in attrs.iter().enumerate() {
        let grid = layout.to_grid(m)?;
        let values: Vec<f64> = if rules[k].levels.is_none() {
            // Float planes are stored as f32; take the range from the stored values.
            grid.data.iter().map(|&v| v as f32 as f64).collect()
        } else {
            grid.data.clone()
        };
        let q = quantize_attribute(&values, &rules[k])?;
        ranges[k] = q.range();
        planes.push(compress_to_vec(&plane_bytes(&q, layout.cells(), CHANNELS[k]), DEFLATE_LEVEL));
    }

    let (lo, hi) = match rules[5].clip {
        Some(r) => r,
        None => observed_range(&bank.features.data),
    };
    if !(hi > lo) {
        return Err(Error::Spec(alloc::format!("feature clip range [{lo}, {hi}] is empty")));
    }
    ranges[5] = (lo, hi);
    let side = layout.side;
    let frames = (0..bank.slots())
        .map(|j| {
            let grid = layout.to_grid(&bank.slot(j))?;
            let img = tile_features(&grid, side)?;
            Ok(img.iter().map(|&v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let (codec, codec_name, video) = match opts.external {
        None => (CodecId::Internal, String::new(), encode_feature_video(&frames, 4 * side, 4 * side, qp)?.bitstream),
        Some(ext) => {
            let bytes: Vec<Vec<u8>> = frames
                .iter()
                .map(|f| f.iter().map(|&u| math::round(u * 255.0) as u8).collect())
                .collect();
            (CodecId::External, String::from(ext.name()), ext.encode(&bytes, 4 * side, 4 * side, qp)?)
        }
    };
    if codec_name.len() > 255 {
        return Err(Error::Spec("external codec name longer than 255 bytes".into()));
    }

    let header = SegmentHeader {
        version: VERSION,
        gop_length: bank.gop_length,
        window: bank.window,
        feature_dim: bank.feature_dim,
        count: n,
        side,
        pad_count: layout.pad_count,
        qp,
        time_bands: model.field.time_bands,
        codec,
        codec_name,
        quant: opts.quant,
        ranges,
    };

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let hb = header_bytes(&header);
    put_u32(&mut out, hb.len());
    out.extend_from_slice(&hb);
    let perm: Vec<u8> = layout.permutation.iter().flat_map(|c| c.to_le_bytes()).collect();
    put_section(&mut out, &compress_to_vec(&perm, DEFLATE_LEVEL));
    for p in &planes {
        put_section(&mut out, p);
    }
    put_section(&mut out, &video);
    put_section(&mut out, &weight_bytes(&model.field));
    let crc = crc32fast::hash(&out[MAGIC.len()..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_section(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(out, bytes.len());
    out.extend_from_slice(bytes);
}

fn header_bytes(h: &SegmentHeader) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [h.gop_length, h.window, h.feature_dim, h.count, h.side, h.pad_count, h.qp as usize, h.time_bands] {
        put_u32(&mut b, v);
    }
    b.push(match h.codec {
        CodecId::Internal => 0,
        CodecId::External => 1,
    });
    b.push(h.codec_name.len() as u8);
    b.extend_from_slice(h.codec_name.as_bytes());
    for r in h.rules() {
        let flags = r.clip.is_some() as u8 | (r.levels.is_some() as u8) << 1;
        b.push(flags);
        let (lo, hi) = r.clip.unwrap_or((0.0, 0.0));
        b.extend_from_slice(&lo.to_le_bytes());
        b.extend_from_slice(&hi.to_le_bytes());
        put_u32(&mut b, r.levels.unwrap_or(0) as usize);
    }
    for (lo, hi) in h.ranges {
        b.extend_from_slice(&lo.to_le_bytes());
        b.extend_from_slice(&hi.to_le_bytes());
    }
    b
}

fn code_width(levels: u32) -> usize {
    if levels <= 256 {
        1
    } else {
        2
    }
}

/// Channel-planar bytes of a `cells × channels` quantized grid.
fn plane_bytes(q: &Quantized, cells: usize, channels: usize) -> Vec<u8> {
    let mut out = Vec::new();
    for ch in 0..channels {
        for cell in 0..cells {
            let i = cell * channels + ch;
            match q {
                Quantized::Float { values, .. } => out.extend_from_slice(&values[i].to_le_bytes()),
                Quantized::Codes { codes, levels, .. } => {
                    if code_width(*levels) == 1 {
                        out.push(codes[i] as u8);
                    } else {
                        out.extend_from_slice(&codes[i].to_le_bytes());
                    }
                }
            }
        }
    }
    out
}

fn weight_bytes(field: &DeformationField) -> Vec<u8> {
    let layers = field.layers();
    let mut b = Vec::new();
    put_u32(&mut b, layers.len());
    for l in layers {
        put_u32(&mut b, l.weight.rows);
        put_u32(&mut b, l.weight.cols);
    }
    for l in layers {
        for &v in &l.weight.data {
            b.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    b
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], section: &'static str) -> Self {
        Self { buf, pos: 0, section }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(SegmentError::Truncated(self.section).into()),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        self.u32().map(|v| v as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn malformed(section: &'static str, reason: impl Into<String>) -> Error {
    SegmentError::Malformed {
        section,
        reason: reason.into(),
    }
    .into()
}

/// A checksum-verified segment with its header parsed and sections located.
#[derive(Clone, Debug)]
pub struct Segment<'a> {
    pub header: SegmentHeader,
    sections: [&'a [u8]; 8],
}

/// Byte sizes of the segment parts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SectionSizes {
    pub total: usize,
    pub permutation: usize,
    pub attributes: [usize; 5],
    pub video: usize,
    pub weights: usize,
}

impl<'a> Segment<'a> {
    pub fn parse(bytes: &'a [u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(SegmentError::BadMagic.into());
        }
        let mut r = Reader::new(&bytes[MAGIC.len()..], "preamble");
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(SegmentError::UnsupportedVersion(version).into());
        }
        if bytes.len() < MAGIC.len() + 2 + 4 + 4 {
            return Err(SegmentError::Truncated("preamble").into());
        }
        let body = &bytes[MAGIC.len()..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(SegmentError::Checksum { stored, computed }.into());
        }
        let mut r = Reader::new(&body[2..], "header");
        let hlen = r.usize()?;
        let header = parse_header(r.take(hlen)?, version)?;
        let mut sections: [&[u8]; 8] = [&[]; 8];
        for (k, name) in SECTIONS.iter().enumerate() {
            r.section = name;
            let len = r.usize()?;
            sections[k] = r.take(len)?;
        }
        if r.pos != r.buf.len() {
            return Err(malformed("weights", "trailing bytes before checksum"));
        }
        Ok(Self { header, sections })
    }

    pub fn sizes(&self) -> SectionSizes {
        let s = &self.sections;
        let total = MAGIC.len() + 2 + 4 + header_bytes(&self.header).len() + s.iter().map(|x| 4 + x.len()).sum::<usize>() + 4;
        SectionSizes {
            total,
            permutation: s[0].len(),
            attributes: [s[1].len(), s[2].len(), s[3].len(), s[4].len(), s[5].len()],
            video: s[6].len(),
            weights: s[7].len(),
        }
    }

    /// Raw bytes of one attribute image (`0..5`, in [`ATTRIBUTES`] order), still DEFLATE'd.
    pub fn attribute_payload(&self, k: usize) -> &'a [u8] {
        self.sections[1 + k]
    }

    pub fn video_payload(&self) -> &'a [u8] {
        self.sections[6]
    }
}

fn parse_header(buf: &[u8], version: u16) -> Result<SegmentHeader> {
    let mut r = Reader::new(buf, "header");
    let mut v = [0usize; 8];
    for x in v.iter_mut() {
        *x = r.usize()?;
    }
    let [gop_length, window, feature_dim, count, side, pad_count, qp, time_bands] = v;
    let codec = match r.u8()? {
        0 => CodecId::Internal,
        1 => CodecId::External,
        c => return Err(malformed("header", alloc::format!("unknown codec id {c}"))),
    };
    let name_len = r.u8()? as usize;
    let codec_name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| malformed("header", "codec name is not UTF-8"))?;
    let mut rules = [AttrQuant { clip: None, levels: None }; 6];
    for rule in rules.iter_mut() {
        let flags = r.u8()?;
        let lo = r.f64()?;
        let hi = r.f64()?;
        let levels = r.u32()?;
        if flags & !3 != 0 {
            return Err(malformed("header", alloc::format!("unknown quantization flags {flags:#x}")));
        }
        rule.clip = (flags & 1 != 0).then_some((lo, hi));
        rule.levels = (flags & 2 != 0).then_some(levels);
        if let Some(q) = rule.levels {
            if !(2..=65536).contains(&q) {
                return Err(malformed("header", alloc::format!("quantization levels {q}")));
            }
        }
    }
    let mut ranges = [(0.0, 0.0); 6];
    for range in ranges.iter_mut() {
        *range = (r.f64()?, r.f64()?);
        if !(range.1 > range.0) || !range.0.is_finite() || !range.1.is_finite() {
            return Err(malformed("header", "empty or non-finite normalization range"));
        }
    }
    if r.pos != buf.len() {
        return Err(malformed("header", "trailing header bytes"));
    }
    if count == 0 || count > DEFAULT_MAX_GAUSSIANS.max(1 << 22) || side * side != count + pad_count || GridLayout::side_for(count) != side {
        return Err(malformed("header", "inconsistent Gaussian count and grid side"));
    }
    if gop_length == 0 || window == 0 || window % 2 == 0 || feature_dim != 16 || qp > crate::video::MAX_QP as usize {
        return Err(malformed("header", "invalid GOP, window, feature or QP fields"));
    }
    if time_bands > 64 {
        return Err(malformed("header", "too many time bands"));
    }
    Ok(SegmentHeader {
        version,
        gop_length,
        window,
        feature_dim,
        count,
        side,
        pad_count,
        qp: qp as u32,
        time_bands,
        codec,
        codec_name,
        quant: QuantSpec {
            position: rules[0],
            scale: rules[1],
            rotation: rules[2],
            opacity: rules[3],
            color: rules[4],
            features: rules[5],
        },
        ranges,
    })
}

fn inflate(data: &[u8], expected: usize, section: &'static str) -> Result<Vec<u8>> {
    let out = decompress_to_vec_with_limit(data, expected).map_err(|_| malformed(section, "DEFLATE stream invalid or too long"))?;
    if out.len() != expected {
        return Err(malformed(section, alloc::format!("{} bytes, expected {expected}", out.len())));
    }
    Ok(out)
}

/// Everything but the feature video: the part a client pre-decodes ahead of playback.
#[derive(Clone, Debug, PartialEq)]
pub struct Keyframe {
    pub header: SegmentHeader,
    pub layout: GridLayout,
    pub gaussians: GaussianSet,
    pub field: DeformationField,
}

pub fn decode_keyframe(seg: &Segment<'_>) -> Result<Keyframe> {
    let h = &seg.header;
    let cells = h.side * h.side;
    let perm_bytes = inflate(seg.sections[0], 4 * h.count, "permutation")?;
    let permutation = perm_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let layout = GridLayout {
        side: h.side,
        permutation,
        pad_count: h.pad_count,
    };
    layout.validate().map_err(|_| malformed("permutation", "not a bijection onto the occupied cells"))?;

    let rules = h.rules();
    let mut mats = Vec::with_capacity(5);
    for k in 0..5 {
        let ch = CHANNELS[k];
        let (lo, hi) = h.ranges[k];
        let width = rules[k].levels.map_or(4, code_width);
        let raw = inflate(seg.sections[1 + k], cells * ch * width, SECTIONS[1 + k])?;
        let mut interleaved = vec![0usize; cells * ch];
        for c in 0..ch {
            for cell in 0..cells {
                interleaved[cell * ch + c] = (c * cells + cell) * width;
            }
        }
        let q = match rules[k].levels {
            None => Quantized::Float {
                lo,
                hi,
                values: interleaved
                    .iter()
                    .map(|&o| f32::from_le_bytes(raw[o..o + 4].try_into().unwrap()))
                    .collect(),
            },
            Some(levels) => {
                let codes: Vec<u16> = interleaved
                    .iter()
                    .map(|&o| if width == 1 { raw[o] as u16 } else { u16::from_le_bytes([raw[o], raw[o + 1]]) })
                    .collect();
                if codes.iter().any(|&c| c as u32 >= levels) {
                    return Err(malformed(SECTIONS[1 + k], "code outside quantization levels"));
                }
                Quantized::Codes { lo, hi, levels, codes }
            }
        };
        let values = dequantize_attribute(&q);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(malformed(SECTIONS[1 + k], "non-finite value"));
        }
        mats.push(layout.from_grid(&Mat::from_vec(cells, ch, values)?)?);
    }
    let mut it = mats.into_iter();
    let gaussians = GaussianSet {
        positions: it.next().unwrap(),
        scales: it.next().unwrap(),
        rotations: it.next().unwrap(),
        opacities: it.next().unwrap(),
        colors: it.next().unwrap(),
    };
    let field = parse_weights(seg.sections[7], h)?;
    Ok(Keyframe {
        header: h.clone(),
        layout,
        gaussians,
        field,
    })
}

fn parse_weights(buf: &[u8], h: &SegmentHeader) -> Result<DeformationField> {
    let mut field = DeformationField::zeros(h.window, h.feature_dim, h.time_bands);
    let mut r = Reader::new(buf, "weights");
    let layers = r.usize()?;
    if layers != 9 {
        return Err(malformed("weights", alloc::format!("{layers} layers, expected 9")));
    }
    let mut shapes = [(0usize, 0usize); 9];
    for (s, l) in shapes.iter_mut().zip(field.layers()) {
        *s = (r.usize()?, r.usize()?);
        if *s != (l.weight.rows, l.weight.cols) {
            return Err(malformed("weights", alloc::format!("layer shape {}x{} does not match the header", s.0, s.1)));
        }
    }
    for l in field.layers_mut() {
        for v in l.weight.data.iter_mut() {
            let w = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
            if !w.is_finite() {
                return Err(malformed("weights", "non-finite weight"));
            }
            *v = w as f64;
        }
    }
    if r.pos != buf.len() {
        return Err(malformed("weights", "trailing bytes"));
    }
    Ok(field)
}

/// Decode the feature video into the temporal feature bank.
pub fn decode_features(seg: &Segment<'_>, key: &Keyframe, external: Option<&dyn ExternalCodec>) -> Result<TemporalFeatureBank> {
    let h = &seg.header;
    let size = h.video_size();
    let slots = h.slots();
    let frames: Vec<Vec<f64>> = match (h.codec, external) {
        (CodecId::Internal, _) => decode_feature_video(&FeatureVideo {
            width: size,
            height: size,
            frames: slots,
            qp: h.qp,
            bitstream: seg.video_payload().to_vec(),
        })?,
        (CodecId::External, Some(ext)) => {
            let raw = ext.decode(seg.video_payload(), size, size, slots, h.qp)?;
            if raw.len() != slots || raw.iter().any(|f| f.len() != size * size) {
                return Err(Error::Decode {
                    frame: raw.len().min(slots),
                    reason: "external codec returned the wrong frame count or size".into(),
                });
            }
            raw.iter().map(|f| f.iter().map(|&b| b as f64 / 255.0).collect()).collect()
        }
        (CodecId::External, None) => {
            return Err(Error::Usage(alloc::format!("segment needs external codec '{}'", h.codec_name)));
        }
    };
    let (lo, hi) = h.ranges[5];
    let mut bank = TemporalFeatureBank::zeros(h.gop_length, h.window, h.feature_dim, h.count)?;
    for (j, f) in frames.iter().enumerate() {
        let img: Vec<f64> = f.iter().map(|&u| lo + u * (hi - lo)).collect();
        let grid = untile_features(&img, h.side)?;
        let slot = key.layout.from_grid(&grid)?;
        for g in 0..h.count {
            bank.slot_row_mut(j, g).copy_from_slice(slot.row(g));
        }
    }
    Ok(bank)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodedGop {
    pub header: SegmentHeader,
    pub layout: GridLayout,
    pub model: StreamModel,
}

pub fn decode_gop(bytes: &[u8]) -> Result<DecodedGop> {
    decode_gop_with(bytes, None)
}

pub fn decode_gop_with(bytes: &[u8], external: Option<&dyn ExternalCodec>) -> Result<DecodedGop> {
    let seg = Segment::parse(bytes)?;
    let key = decode_keyframe(&seg)?;
    let features = decode_features(&seg, &key, external)?;
    Ok(assemble(key, features))
}

pub fn assemble(key: Keyframe, features: TemporalFeatureBank) -> DecodedGop {
    DecodedGop {
        header: key.header,
        layout: key.layout,
        model: StreamModel {
            gaussians: key.gaussians,
            features,
            field: key.field,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(n: usize, g: usize, w: usize, seed: u64) -> StreamModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gs = GaussianSet::zeros(n);
        for i in 0..n {
            for k in 0..3 {
                gs.positions.set(i, k, rng.random_range(-1.0..1.0));
                gs.scales.set(i, k, rng.random_range(-4.0..-1.0));
                gs.colors.set(i, k, rng.random_range(-0.2..1.2));
            }
            for k in 0..4 {
                gs.rotations.set(i, k, rng.random_range(-1.5..2.5));
            }
            gs.opacities.set(i, 0, rng.random_range(-5.0..5.0));
        }
        let mut features = TemporalFeatureBank::zeros(g, w, 16, n).unwrap();
        for v in features.features.data.iter_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
        StreamModel {
            gaussians: gs,
            features,
            field: DeformationField::random(w, 16, 6, 0.2, &mut rng),
        }
    }

    #[test]
    fn round_trip_header_and_count() {
        let m = model(37, 4, 3, 1);
        let bytes = encode_gop(&m, 20).unwrap();
        let d = decode_gop(&bytes).unwrap();
        assert_eq!(d.model.gaussians.count(), 37);
        let h = &d.header;
        assert_eq!((h.gop_length, h.window, h.feature_dim, h.count, h.side, h.pad_count, h.qp), (4, 3, 16, 37, 7, 12, 20));
        assert_eq!(h.quant, QuantSpec::default());
        assert_eq!(d.model.features.slots(), 6);
    }

    #[test]
    fn rotation_error_bound() {
        let m = model(50, 2, 1, 2);
        let d = decode_gop(&encode_gop(&m, 0).unwrap()).unwrap();
        for (a, b) in m.gaussians.rotations.data.iter().zip(&d.model.gaussians.rotations.data) {
            let clipped = a.clamp(-1.0, 2.0);
            assert!((clipped - b).abs() <= 3.0 / 254.0 + 1e-12);
        }
        for (a, b) in m.gaussians.positions.data.iter().zip(&d.model.gaussians.positions.data) {
            assert_eq!(*a as f32 as f64, *b);
        }
    }

    #[test]
    fn weights_survive_as_f32() {
        let m = model(9, 3, 3, 3);
        let d = decode_gop(&encode_gop(&m, 24).unwrap()).unwrap();
        for (a, b) in m.field.layers().iter().zip(d.model.field.layers()) {
            for (x, y) in a.weight.data.iter().zip(&b.weight.data) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
    }

    #[test]
    fn corrupted_byte_is_refused() {
        let bytes = encode_gop(&model(20, 3, 3, 4), 24).unwrap();
        let mut bad = bytes.clone();
        bad[40] ^= 0x10;
        assert!(matches!(decode_gop(&bad), Err(Error::Segment(SegmentError::Checksum { .. }))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(decode_gop(&bad), Err(Error::Segment(SegmentError::BadMagic)));
        let mut bad = bytes.clone();
        bad[5] = 9;
        assert_eq!(decode_gop(&bad), Err(Error::Segment(SegmentError::UnsupportedVersion(9))));
        assert!(decode_gop(&bytes[..bytes.len() - 7]).is_err());
    }

    #[test]
    fn cap_is_enforced() {
        let m = model(30, 2, 1, 5);
        let opts = EncodeOptions {
            max_gaussians: 29,
            ..Default::default()
        };
        assert!(matches!(encode_gop_with(&m, 20, &opts), Err(Error::Spec(_))));
    }

    #[test]
    fn reencode_changes_only_video() {
        let m = model(45, 5, 3, 6);
        let first = encode_gop(&m, 28).unwrap();
        let d = decode_gop(&first).unwrap();
        let opts = EncodeOptions {
            layout: Some(&d.layout),
            ..Default::default()
        };
        let second = encode_gop_with(&d.model, 28, &opts).unwrap();
        let (a, b) = (Segment::parse(&first).unwrap(), Segment::parse(&second).unwrap());
        for k in 0..5 {
            assert_eq!(a.attribute_payload(k), b.attribute_payload(k), "{}", ATTRIBUTES[k]);
        }
        assert_eq!(a.sections[0], b.sections[0]);
        assert_eq!(a.sections[7], b.sections[7]);
        assert_eq!(&a.header.ranges[..5], &b.header.ranges[..5]);
    }

    #[test]
    fn size_shrinks_with_qp() {
        let m = model(200, 8, 3, 7);
        let sizes: Vec<usize> = [16, 20, 24, 28, 32].iter().map(|&q| encode_gop(&m, q).unwrap().len()).collect();
        assert!(sizes.windows(2).all(|w| w[0] >= w[1]), "{sizes:?}");
    }

    struct Passthrough;

    impl ExternalCodec for Passthrough {
        fn name(&self) -> &str {
            "raw8"
        }
        fn encode(&self, frames: &[Vec<u8>], _: usize, _: usize, _: u32) -> Result<Vec<u8>> {
            Ok(frames.concat())
        }
        fn decode(&self, bs: &[u8], w: usize, h: usize, _: usize, _: u32) -> Result<Vec<Vec<u8>>> {
            Ok(bs.chunks(w * h).map(|c| c.to_vec()).collect())
        }
    }

    #[test]
    fn external_codec_path() {
        let m = model(16, 3, 3, 8);
        let opts = EncodeOptions {
            external: Some(&Passthrough),
            ..Default::default()
        };
        let bytes = encode_gop_with(&m, 20, &opts).unwrap();
        assert!(matches!(decode_gop(&bytes), Err(Error::Usage(_))));
        let d = decode_gop_with(&bytes, Some(&Passthrough)).unwrap();
        assert_eq!(d.header.codec, CodecId::External);
        assert_eq!(d.header.codec_name, "raw8");
        let (lo, hi) = d.header.ranges[5];
        for (a, b) in m.features.features.data.iter().zip(&d.model.features.features.data) {
            assert!((a - b).abs() <= (hi - lo) / 510.0 + 1e-12);
        }
    }
}
