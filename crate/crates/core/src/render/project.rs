use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::gaussian::{CameraModel, GaussianSet};
use crate::math::{self, Mat3, Vec3};

/// Gaussians at or behind this camera depth are culled.
pub const NEAR_PLANE: f64 = 0.01;

/// A Gaussian projected onto the image plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScreenGaussian {
    /// Pixel coordinates; pixel `(x, y)` has its centre at `(x + 0.5, y + 0.5)`.
    pub mean2d: [f64; 2],
    /// Upper triangle `(xx, xy, yy)` of the symmetric 2D covariance (pixels²).
    pub cov2d: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub alpha: f64,
    /// Index of the source Gaussian.
    pub source: usize,
}

/// Output of [`project`].
#[derive(Clone, Debug, Default)]
pub struct Projection {
    pub splats: Vec<ScreenGaussian>,
    pub culled: usize,
}

/// Geometry of one projected Gaussian (mean, covariance and depth).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Footprint {
    pub mean2d: [f64; 2],
    pub cov2d: [f64; 3],
    pub depth: f64,
}

fn unit_quaternion(q: &[f64; 4]) -> Result<([f64; 4], f64)> {
    let n = math::sqrt(q.iter().map(|v| v * v).sum());
    if !(n >= 1e-8) {
        return Err(Error::InvalidModel(alloc::format!(
            "degenerate quaternion with norm {n}"
        )));
    }
    Ok(([q[0] / n, q[1] / n, q[2] / n, q[3] / n], n))
}

fn perspective_jacobian(k: &Mat3, p: &Vec3) -> [[f64; 3]; 2] {
    let [x, y, z] = *p;
    let pm = [[1.0 / z, 0.0, -x / (z * z)], [0.0, 1.0 / z, -y / (z * z)]];
    let mut j = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            j[r][c] = k[r][0] * pm[0][c] + k[r][1] * pm[1][c];
        }
    }
    j
}

/// Project one Gaussian given its world position, log-scale and raw quaternion.
/// Returns `None` when the Gaussian lies behind the near plane.
pub fn project_footprint(
    cam: &CameraModel,
    position: &Vec3,
    log_scale: &Vec3,
    quaternion: &[f64; 4],
) -> Result<Option<Footprint>> {
    let rot = cam.rotation();
    let t = cam.translation();
    let pc = math::mat3_vec(&rot, position);
    let p = [pc[0] + t[0], pc[1] + t[1], pc[2] + t[2]];
    if p[2] <= NEAR_PLANE {
        return Ok(None);
    }
    let k = &cam.intrinsics;
    let (xn, yn) = (p[0] / p[2], p[1] / p[2]);
    let mean2d = [k[0][0] * xn + k[0][1] * yn + k[0][2], k[1][1] * yn + k[1][2]];

    let (q, _) = unit_quaternion(quaternion)?;
    let rq = math::quat_to_rotation(&q);
    let s = [
        math::exp(log_scale[0]),
        math::exp(log_scale[1]),
        math::exp(log_scale[2]),
    ];
    // T = J · R_w ; Σ' = T · Rq · S² · Rqᵀ · Tᵀ = (T·M)(T·M)ᵀ with M = Rq·S.
    let j = perspective_jacobian(k, &p);
    let mut tm = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            let tr: [f64; 3] = [
                j[r][0] * rot[0][0] + j[r][1] * rot[1][0] + j[r][2] * rot[2][0],
                j[r][0] * rot[0][1] + j[r][1] * rot[1][1] + j[r][2] * rot[2][1],
                j[r][0] * rot[0][2] + j[r][1] * rot[1][2] + j[r][2] * rot[2][2],
            ];
            tm[r][c] = (tr[0] * rq[0][c] + tr[1] * rq[1][c] + tr[2] * rq[2][c]) * s[c];
        }
    }
    let cov2d = [
        math::dot3(&tm[0], &tm[0]),
        math::dot3(&tm[0], &tm[1]),
        math::dot3(&tm[1], &tm[1]),
    ];
    Ok(Some(Footprint {
        mean2d,
        cov2d,
        depth: p[2],
    }))
}

/// Gradients of a loss with respect to one Gaussian's projection inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FootprintGrad {
    pub position: Vec3,
    pub log_scale: Vec3,
    pub quaternion: [f64; 4],
}

/// Backward of [`project_footprint`] given gradients on `mean2d` and `cov2d`
/// (the `xy` entry's gradient is taken with respect to the shared off-diagonal value).
pub fn project_footprint_backward(
    cam: &CameraModel,
    position: &Vec3,
    log_scale: &Vec3,
    quaternion: &[f64; 4],
    grad_mean: &[f64; 2],
    grad_cov: &[f64; 3],
) -> Result<FootprintGrad> {
    let rot = cam.rotation();
    let t = cam.translation();
    let pc = math::mat3_vec(&rot, position);
    let p = [pc[0] + t[0], pc[1] + t[1], pc[2] + t[2]];
    if p[2] <= NEAR_PLANE {
        return Ok(FootprintGrad::default());
    }
    let k = &cam.intrinsics;
    let [x, y, z] = p;
    let (q, qnorm) = unit_quaternion(quaternion)?;
    let rq = math::quat_to_rotation(&q);
    let s = [
        math::exp(log_scale[0]),
        math::exp(log_scale[1]),
        math::exp(log_scale[2]),
    ];
    let j = perspective_jacobian(k, &p);
    // T = J · R_w (2×3)
    let mut tmat = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            tmat[r][c] = j[r][0] * rot[0][c] + j[r][1] * rot[1][c] + j[r][2] * rot[2][c];
        }
    }
    // Σ3 = M Mᵀ with M = Rq · diag(s)
    let mut m = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            m[r][c] = rq[r][c] * s[c];
        }
    }
    let mut sigma = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            sigma[r][c] = math::dot3(&m[r], &m[c]);
        }
    }
    let g = [
        [grad_cov[0], grad_cov[1] * 0.5],
        [grad_cov[1] * 0.5, grad_cov[2]],
    ];

    // dL/dΣ3 = Tᵀ G T
    let mut gt = [[0.0; 3]; 2]; // G T
    for r in 0..2 {
        for c in 0..3 {
            gt[r][c] = g[r][0] * tmat[0][c] + g[r][1] * tmat[1][c];
        }
    }
    let mut d_sigma = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            d_sigma[r][c] = tmat[0][r] * gt[0][c] + tmat[1][r] * gt[1][c];
        }
    }
    // dL/dT = 2 G T Σ3
    let mut d_t = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            d_t[r][c] = 2.0 * (gt[r][0] * sigma[0][c] + gt[r][1] * sigma[1][c] + gt[r][2] * sigma[2][c]);
        }
    }
    // dL/dJ = dL/dT · R_wᵀ
    let mut d_j = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            d_j[r][c] = d_t[r][0] * rot[c][0] + d_t[r][1] * rot[c][1] + d_t[r][2] * rot[c][2];
        }
    }
    // J = K2 · P ; dL/dP = K2ᵀ dL/dJ
    let k2 = [[k[0][0], k[0][1]], [0.0, k[1][1]]];
    let mut d_p = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            d_p[r][c] = k2[0][r] * d_j[0][c] + k2[1][r] * d_j[1][c];
        }
    }
    let z2 = z * z;
    let z3 = z2 * z;
    let mut d_cam = [
        -d_p[0][2] / z2,
        -d_p[1][2] / z2,
        -d_p[0][0] / z2 + d_p[0][2] * 2.0 * x / z3 - d_p[1][1] / z2 + d_p[1][2] * 2.0 * y / z3,
    ];
    // mean2d = K2 · (x/z, y/z) + offset
    let d_n = [
        k2[0][0] * grad_mean[0],
        k2[0][1] * grad_mean[0] + k2[1][1] * grad_mean[1],
    ];
    d_cam[0] += d_n[0] / z;
    d_cam[1] += d_n[1] / z;
    d_cam[2] += -d_n[0] * x / z2 - d_n[1] * y / z2;
    let rt = math::mat3_transpose(&rot);
    let position_grad = math::mat3_vec(&rt, &d_cam);

    // dL/dM = 2 dL/dΣ3 · M
    let mut d_m = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            d_m[r][c] = 2.0 * (d_sigma[r][0] * m[0][c] + d_sigma[r][1] * m[1][c] + d_sigma[r][2] * m[2][c]);
        }
    }
    let mut log_scale_grad = [0.0; 3];
    let mut d_rq = [[0.0; 3]; 3];
    for c in 0..3 {
        let ds: f64 = (0..3).map(|r| d_m[r][c] * rq[r][c]).sum();
        log_scale_grad[c] = ds * s[c];
        for r in 0..3 {
            d_rq[r][c] = d_m[r][c] * s[c];
        }
    }
    let d_q = math::quat_to_rotation_backward(&q, &d_rq);
    let qd: f64 = (0..4).map(|i| q[i] * d_q[i]).sum();
    let mut quaternion_grad = [0.0; 4];
    for i in 0..4 {
        quaternion_grad[i] = (d_q[i] - q[i] * qd) / qnorm;
    }
    Ok(FootprintGrad {
        position: position_grad,
        log_scale: log_scale_grad,
        quaternion: quaternion_grad,
    })
}

/// Project a per-frame Gaussian set (pre-activation attributes) into screen space.
///
/// Opacity logits go through a sigmoid and colors are clamped at zero.
pub fn project(gaussians: &GaussianSet, cam: &CameraModel) -> Result<Projection> {
    let mut out = Projection::default();
    for i in 0..gaussians.count() {
        let s = gaussians.scales.row(i);
        let fp = project_footprint(
            cam,
            &gaussians.position(i),
            &[s[0], s[1], s[2]],
            &gaussians.quaternion(i),
        )?;
        let Some(fp) = fp else {
            out.culled += 1;
            continue;
        };
        let c = gaussians.colors.row(i);
        out.splats.push(ScreenGaussian {
            mean2d: fp.mean2d,
            cov2d: fp.cov2d,
            depth: fp.depth,
            color: [c[0].max(0.0), c[1].max(0.0), c[2].max(0.0)],
            alpha: math::sigmoid(gaussians.opacities.get(i, 0)),
            source: i,
        });
    }
    Ok(out)
}
