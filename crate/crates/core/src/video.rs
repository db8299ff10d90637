//! Closed-loop scalar feature-video codec.
//!
//! Frame 0 is intra-coded as `round(v / Δ)`; later frames code
//! `round((v - ref) / Δ)` against the previous *reconstructed* frame, so the
//! error never accumulates. Codes are zigzag LEB128 varints compressed with
//! DEFLATE. Each frame record is
//!
//! ```text
//! u8 kind (0 = coded, 1 = empty residual) | u32 payload length | u32 CRC-32 | payload
//! ```
//!
//! all little-endian. An empty-residual frame has no payload.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

pub const MAX_QP: u32 = 51;
const FRAME_HEADER: usize = 9;
const KIND_CODED: u8 = 0;
const KIND_EMPTY: u8 = 1;

/// An encoded sequence of equally sized scalar frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureVideo {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub qp: u32,
    pub bitstream: Vec<u8>,
}

/// Quantizer step for normalized input in `[0, 1]`.
pub fn qp_step(qp: u32) -> f64 {
    math::pow(2.0, (qp as f64 - 4.0) / 6.0) / 255.0
}

/// Size in bytes of an empty-residual frame record.
pub const fn empty_frame_size() -> usize {
    FRAME_HEADER
}

fn check_qp(qp: u32) -> Result<()> {
    if qp > MAX_QP {
        return Err(Error::Spec(alloc::format!("QP {qp} outside 0..={MAX_QP}")));
    }
    Ok(())
}

fn put_varint(out: &mut Vec<u8>, v: i64) {
    let mut z = ((v << 1) ^ (v >> 63)) as u64;
    loop {
        let b = (z & 0x7f) as u8;
        z >>= 7;
        if z == 0 {
            out.push(b);
            break;
        }
        out.push(b | 0x80);
    }
}

fn get_varint(buf: &[u8], pos: &mut usize) -> Option<i64> {
    let mut z: u64 = 0;
    let mut shift = 0;
    loop {
        let b = *buf.get(*pos)?;
        *pos += 1;
        z |= ((b & 0x7f) as u64) << shift;
        if b & 0x80 == 0 {
            break;
        }
        shift += 7;
        if shift > 63 {
            return None;
        }
    }
    Some(((z >> 1) as i64) ^ -((z & 1) as i64))
}

/// Encode frames of `width × height` scalars (expected in `[0, 1]`).
pub fn encode_feature_video(frames: &[Vec<f64>], width: usize, height: usize, qp: u32) -> Result<FeatureVideo> {
    encode_with_reconstruction(frames, width, height, qp).map(|(fv, _)| fv)
}

/// Encode and also return the encoder's closed-loop reconstruction.
pub fn encode_with_reconstruction(
    frames: &[Vec<f64>],
    width: usize,
    height: usize,
    qp: u32,
) -> Result<(FeatureVideo, Vec<Vec<f64>>)> {
    check_qp(qp)?;
    let px = width * height;
    if frames.iter().any(|f| f.len() != px) {
        return Err(Error::Shape(alloc::format!("feature frames must have {px} values")));
    }
    if frames.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite feature value".into()));
    }
    let step = qp_step(qp);
    let mut reference = vec![0.0; px];
    let mut bitstream = Vec::new();
    let mut recon = Vec::with_capacity(frames.len());
    let mut raw = Vec::new();
    for frame in frames {
        raw.clear();
        let mut any = false;
        for (r, &v) in reference.iter_mut().zip(frame) {
            let code = math::round((v - *r) / step) as i64;
            any |= code != 0;
            put_varint(&mut raw, code);
            *r += code as f64 * step;
        }
        if any {
            let payload = miniz_oxide::deflate::compress_to_vec(&raw, 9);
            bitstream.push(KIND_CODED);
            bitstream.extend_from_slice(&(payload.len() as u32).to_le_bytes());
            bitstream.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
            bitstream.extend_from_slice(&payload);
        } else {
            bitstream.push(KIND_EMPTY);
            bitstream.extend_from_slice(&0u32.to_le_bytes());
            bitstream.extend_from_slice(&0u32.to_le_bytes());
        }
        recon.push(reference.clone());
    }
    Ok((
        FeatureVideo {
            width,
            height,
            frames: frames.len(),
            qp,
            bitstream,
        },
        recon,
    ))
}

/// Decode as many frames as possible; the error (if any) names the first bad frame.
pub fn decode_feature_video_prefix(fv: &FeatureVideo) -> (Vec<Vec<f64>>, Option<Error>) {
    let mut out = Vec::new();
    if let Err(e) = check_qp(fv.qp) {
        return (out, Some(e));
    }
    let px = fv.width * fv.height;
    let step = qp_step(fv.qp);
    let mut reference = vec![0.0; px];
    let mut pos = 0usize;
    let buf = &fv.bitstream;
    for k in 0..fv.frames {
        let fail = |reason: &str| Error::Decode {
            frame: k,
            reason: reason.into(),
        };
        if buf.len() < pos + FRAME_HEADER {
            return (out, Some(fail("truncated frame header")));
        }
        let kind = buf[pos];
        let len = u32::from_le_bytes(buf[pos + 1..pos + 5].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(buf[pos + 5..pos + 9].try_into().unwrap());
        pos += FRAME_HEADER;
        match kind {
            KIND_EMPTY => {
                if len != 0 {
                    return (out, Some(fail("empty frame with payload")));
                }
            }
            KIND_CODED => {
                if buf.len() < pos + len {
                    return (out, Some(fail("truncated frame payload")));
                }
                let payload = &buf[pos..pos + len];
                pos += len;
                if crc32fast::hash(payload) != crc {
                    return (out, Some(fail("frame checksum mismatch")));
                }
                let Ok(raw) = miniz_oxide::inflate::decompress_to_vec_with_limit(payload, px * 10 + 16) else {
                    return (out, Some(fail("corrupt DEFLATE payload")));
                };
                let mut rp = 0;
                for r in reference.iter_mut() {
                    let Some(code) = get_varint(&raw, &mut rp) else {
                        return (out, Some(fail("residual shorter than frame")));
                    };
                    *r += code as f64 * step;
                }
                if rp != raw.len() {
                    return (out, Some(fail("trailing residual data")));
                }
            }
            _ => return (out, Some(fail("unknown frame kind"))),
        }
        out.push(reference.clone());
    }
    if pos != buf.len() {
        return (
            out,
            Some(Error::Decode {
                frame: fv.frames,
                reason: "trailing bytes after last frame".into(),
            }),
        );
    }
    (out, None)
}

pub fn decode_feature_video(fv: &FeatureVideo) -> Result<Vec<Vec<f64>>> {
    match decode_feature_video_prefix(fv) {
        (frames, None) => Ok(frames),
        (_, Some(e)) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn content(frames: usize, px: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: Vec<f64> = (0..px).map(|_| rng.random_range(0.0..1.0)).collect();
        (0..frames)
            .map(|k| {
                base.iter()
                    .enumerate()
                    .map(|(i, b)| (b + 0.05 * math::sin(0.3 * k as f64 + i as f64)).clamp(0.0, 1.0))
                    .collect()
            })
            .collect()
    }

    fn max_err(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs()))
    }

    #[test]
    fn zero_content_is_tiny() {
        let zeros = vec![vec![0.0; 64]; 5];
        let fv = encode_feature_video(&zeros, 8, 8, 30).unwrap();
        assert_eq!(decode_feature_video(&fv).unwrap(), zeros);
        let nonzero = content(5, 64, 1);
        let other = encode_feature_video(&nonzero, 8, 8, 30).unwrap();
        assert!(fv.bitstream.len() < other.bitstream.len());
    }

    #[test]
    fn lower_qp_is_larger_and_more_accurate() {
        let frames = content(6, 256, 2);
        let lo = encode_with_reconstruction(&frames, 16, 16, 16).unwrap();
        let hi = encode_with_reconstruction(&frames, 16, 16, 32).unwrap();
        assert!(lo.0.bitstream.len() >= hi.0.bitstream.len());
        assert!(max_err(&frames, &lo.1) <= max_err(&frames, &hi.1));
    }

    #[test]
    fn error_bounded_by_half_step_every_frame() {
        let frames = content(12, 100, 3);
        for qp in [0, 10, 22, 37, 51] {
            let (fv, recon) = encode_with_reconstruction(&frames, 10, 10, qp).unwrap();
            assert!(max_err(&frames, &recon) <= qp_step(qp) / 2.0 + 1e-12);
            assert_eq!(decode_feature_video(&fv).unwrap(), recon);
        }
    }

    #[test]
    fn repeated_frame_is_empty_residual() {
        let mut frames = content(1, 64, 4);
        frames.push(frames[0].clone());
        let one = encode_feature_video(&frames[..1], 8, 8, 20).unwrap();
        let two = encode_feature_video(&frames, 8, 8, 20).unwrap();
        assert_eq!(two.bitstream.len() - one.bitstream.len(), empty_frame_size());
    }

    #[test]
    fn truncation_reports_failing_frame() {
        let frames = content(5, 64, 5);
        let (fv, recon) = encode_with_reconstruction(&frames, 8, 8, 24).unwrap();
        // Find the start of frame 3 by encoding a prefix.
        let prefix = encode_feature_video(&frames[..3], 8, 8, 24).unwrap().bitstream.len();
        let mut cut = fv.clone();
        cut.bitstream.truncate(prefix + FRAME_HEADER + 2);
        let (ok, err) = decode_feature_video_prefix(&cut);
        assert_eq!(ok, recon[..3].to_vec());
        assert!(matches!(err, Some(Error::Decode { frame: 3, .. })));
    }

    #[test]
    fn qp_out_of_range() {
        assert!(matches!(encode_feature_video(&[], 1, 1, 52), Err(Error::Spec(_))));
    }
}
