//! 8-bit PNG for display and 32-bit float planar raw for tests.

use std::path::Path;

use stgs_core::render::RenderedImage;

use crate::error::{Error, IoContext, Result};

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_png(img: &RenderedImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        let data: Vec<u8> = img.rgb.iter().map(|&v| to_u8(v)).collect();
        w.write_image_data(&data).map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<RenderedImage> {
    let dec = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png("only 8-bit images are supported".into()));
    }
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        c => return Err(Error::Png(format!("unsupported color type {c:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut rgb = Vec::with_capacity(w * h * 3);
    for px in buf[..w * h * stride].chunks_exact(stride) {
        for c in 0..3 {
            rgb.push(px[c.min(stride - 1)] as f64 / 255.0);
        }
    }
    Ok(RenderedImage::from_rgb(w, h, rgb)?)
}

pub fn write_png(path: &Path, img: &RenderedImage) -> Result<()> {
    std::fs::write(path, encode_png(img)?).at(path)
}

pub fn read_png(path: &Path) -> Result<RenderedImage> {
    decode_png(&std::fs::read(path).at(path)?)
}

/// Channel planes R, G, B of `height × width` little-endian f32, no header.
pub fn encode_raw(img: &RenderedImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.rgb.len() * 4);
    for c in 0..3 {
        for px in img.rgb.chunks_exact(3) {
            out.extend_from_slice(&(px[c] as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_raw(bytes: &[u8], width: usize, height: usize) -> Result<RenderedImage> {
    let n = width * height;
    if bytes.len() != n * 12 {
        return Err(Error::Usage(format!("raw image has {} bytes, expected {}", bytes.len(), n * 12)));
    }
    let mut rgb = vec![0.0; n * 3];
    for (k, v) in bytes.chunks_exact(4).enumerate() {
        let (c, p) = (k / n, k % n);
        rgb[p * 3 + c] = f32::from_le_bytes(v.try_into().unwrap()) as f64;
    }
    Ok(RenderedImage::from_rgb(width, height, rgb)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> RenderedImage {
        let rgb = (0..w * h * 3).map(|i| (i % 256) as f64 / 255.0).collect();
        RenderedImage::from_rgb(w, h, rgb).unwrap()
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let img = gradient(5, 3);
        assert_eq!(decode_png(&encode_png(&img).unwrap()).unwrap().rgb, img.rgb);
    }

    #[test]
    fn raw_is_planar() {
        let img = gradient(2, 2);
        let raw = encode_raw(&img);
        assert_eq!(f32::from_le_bytes(raw[4..8].try_into().unwrap()), img.rgb[3] as f32);
        assert_eq!(f32::from_le_bytes(raw[16..20].try_into().unwrap()), img.rgb[1] as f32);
        assert_eq!(decode_raw(&raw, 2, 2).unwrap().rgb, img.rgb.iter().map(|&v| v as f32 as f64).collect::<Vec<_>>());
    }
}
