//! Training checkpoints: a QP 0 GopSegment (carrying the grid layout) next to a
//! raw full-precision dump of the model.
//!
//! Raw layout, little-endian: `"STGSRAW1"`, u32 G, W, feature_dim, time_bands,
//! N, then 15 matrices (5 Gaussian attributes, features, 9 field layers), each
//! u32 rows, u32 cols and f64 values row-major.

use std::path::{Path, PathBuf};

use stgs_core::gaussian::{DeformationField, GaussianSet, StreamModel, TemporalFeatureBank};
use stgs_core::grid::GridLayout;
use stgs_core::math::Mat;
use stgs_core::segment::{decode_keyframe, encode_gop_with, EncodeOptions, Segment};

use crate::error::{Error, IoContext, Result};

const RAW_MAGIC: &[u8; 8] = b"STGSRAW1";

fn mats(m: &StreamModel) -> Vec<&Mat> {
    let g = &m.gaussians;
    let mut v = vec![&g.positions, &g.scales, &g.rotations, &g.opacities, &g.colors, &m.features.features];
    v.extend(m.field.layers().iter().map(|l| &l.weight));
    v
}

pub fn encode_raw_model(m: &StreamModel) -> Vec<u8> {
    let f = &m.features;
    let mut out = RAW_MAGIC.to_vec();
    for v in [f.gop_length, f.window, f.feature_dim, m.field.time_bands, m.gaussians.count()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for mat in mats(m) {
        out.extend_from_slice(&(mat.rows as u32).to_le_bytes());
        out.extend_from_slice(&(mat.cols as u32).to_le_bytes());
        for v in &mat.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_raw_model(bytes: &[u8]) -> Result<StreamModel> {
    let bad = |why: &str| Error::Usage(format!("raw model: {why}"));
    if bytes.len() < 28 || &bytes[..8] != RAW_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |o: usize| -> Result<usize> {
        bytes
            .get(o..o + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| bad("truncated"))
    };
    let (g, w, fd, bands, n) = (u32_at(8)?, u32_at(12)?, u32_at(16)?, u32_at(20)?, u32_at(24)?);
    let mut model = StreamModel {
        gaussians: GaussianSet::zeros(n),
        features: TemporalFeatureBank::zeros(g, w, fd, n)?,
        field: DeformationField::zeros(w, fd, bands),
    };
    let mut pos = 28;
    let mut targets: Vec<&mut Mat> = {
        let StreamModel { gaussians, features, field } = &mut model;
        let mut v = vec![
            &mut gaussians.positions,
            &mut gaussians.scales,
            &mut gaussians.rotations,
            &mut gaussians.opacities,
            &mut gaussians.colors,
            &mut features.features,
        ];
        v.extend(field.layers_mut().into_iter().map(|l| &mut l.weight));
        v
    };
    for mat in targets.iter_mut() {
        let (rows, cols) = (u32_at(pos)?, u32_at(pos + 4)?);
        pos += 8;
        if (rows, cols) != (mat.rows, mat.cols) {
            return Err(bad("matrix shape does not match the header"));
        }
        let len = rows * cols * 8;
        let data = bytes.get(pos..pos + len).ok_or_else(|| bad("truncated"))?;
        for (v, b) in mat.data.iter_mut().zip(data.chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().unwrap());
        }
        pos += len;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    model.validate()?;
    Ok(model)
}

pub fn segment_path(dir: &Path, gop: usize) -> PathBuf {
    dir.join(format!("gop_{gop:04}.stgs"))
}

pub fn raw_path(dir: &Path, gop: usize) -> PathBuf {
    dir.join(format!("gop_{gop:04}.raw"))
}

pub fn write_checkpoint(dir: &Path, gop: usize, model: &StreamModel, layout: &GridLayout) -> Result<()> {
    let opts = EncodeOptions {
        layout: Some(layout),
        ..Default::default()
    };
    let seg = encode_gop_with(model, 0, &opts)?;
    let p = segment_path(dir, gop);
    std::fs::write(&p, seg).at(&p)?;
    let p = raw_path(dir, gop);
    std::fs::write(&p, encode_raw_model(model)).at(&p)
}

/// Full-precision model and the layout it was trained with.
pub fn read_checkpoint(dir: &Path, gop: usize) -> Result<(StreamModel, GridLayout)> {
    let p = raw_path(dir, gop);
    let model = decode_raw_model(&std::fs::read(&p).at(&p)?)?;
    let p = segment_path(dir, gop);
    let bytes = std::fs::read(&p).at(&p)?;
    let key = decode_keyframe(&Segment::parse(&bytes)?)?;
    if key.layout.count() != model.gaussians.count() {
        return Err(Error::Usage(format!("{}: layout does not match the raw model", p.display())));
    }
    Ok((model, key.layout))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip_is_exact() {
        let mut m = StreamModel {
            gaussians: GaussianSet::zeros(3),
            features: TemporalFeatureBank::zeros(4, 3, 16, 3).unwrap(),
            field: DeformationField::zeros(3, 16, 6),
        };
        m.gaussians.positions.set(1, 2, 0.1 + 0.2);
        m.features.features.data[7] = -1.0 / 3.0;
        m.field.color.output.weight.data[5] = 1e-300;
        let bytes = encode_raw_model(&m);
        assert_eq!(decode_raw_model(&bytes).unwrap(), m);
        assert!(decode_raw_model(&bytes[..bytes.len() - 1]).is_err());
    }
}
