//! Pinhole camera and ray generation.
//!
//! Convention (frozen): camera space has +X right, +Y along increasing image
//! rows, +Z forward; the extrinsic is the world-from-camera rigid transform,
//! so the ray through the principal point leaves the camera center along the
//! rotated +Z axis. Rays go through pixel centers in row-major order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// world-from-camera rotation, row-major
    pub rotation: [[f64; 3]; 3],
    /// camera center in world coordinates
    pub translation: [f64; 3],
    pub near: f64,
    pub far: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Validation("focal lengths must be positive".into()));
        }
        if !(0.0 < self.near && self.near < self.far) {
            return Err(Error::Validation(format!("need 0 < near < far, got {} .. {}", self.near, self.far)));
        }
        // orthonormal within 1e-9 and proper (det > 0)
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return Err(Error::Validation(format!("rotation not orthonormal: row {i}·row {j} = {dot}")));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if det <= 0.0 {
            return Err(Error::Validation("rotation must be proper (det > 0)".into()));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`. `up` picks the image row
    /// direction: rows grow along `forward × right`.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], fx: f64, fy: f64, cx: f64, cy: f64, near: f64, far: f64) -> Result<Camera> {
        let f = normalize(sub(target, eye))?;
        let r = normalize(cross(up, f))?;
        let d = cross(f, r);
        let camera = Camera {
            fx,
            fy,
            cx,
            cy,
            rotation: [
                [r[0], d[0], f[0]],
                [r[1], d[1], f[1]],
                [r[2], d[2], f[2]],
            ],
            translation: eye,
            near,
            far,
        };
        camera.validate()?;
        Ok(camera)
    }

    /// Ray through the center of pixel (px, py).
    pub fn ray(&self, px: usize, py: usize) -> Ray {
        let xc = (px as f64 + 0.5 - self.cx) / self.fx;
        let yc = (py as f64 + 0.5 - self.cy) / self.fy;
        let dir_cam = [xc, yc, 1.0];
        let mut d = [0.0; 3];
        for i in 0..3 {
            d[i] = self.rotation[i][0] * dir_cam[0] + self.rotation[i][1] * dir_cam[1] + self.rotation[i][2] * dir_cam[2];
        }
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        Ray {
            origin: self.translation,
            direction: [d[0] / n, d[1] / n, d[2] / n],
        }
    }
}

/// All H·W rays in row-major pixel order.
pub fn generate_rays(camera: &Camera, h: usize, w: usize) -> Result<Vec<Ray>> {
    if h == 0 || w == 0 {
        return Err(Error::contract("generate_rays", "image must be at least 1x1"));
    }
    camera.validate()?;
    let mut rays = Vec::with_capacity(h * w);
    for py in 0..h {
        for px in 0..w {
            rays.push(camera.ray(px, py));
        }
    }
    Ok(rays)
}

/// Intersection of a ray with the cube [-b, b]^3, clipped to [near, far].
/// Returns None when the ray misses (those pixels show pure background).
pub fn clip_to_cube(ray: &Ray, bound: f64, near: f64, far: f64) -> Option<(f64, f64)> {
    let mut t0 = near;
    let mut t1 = far;
    for a in 0..3 {
        let o = ray.origin[a];
        let d = ray.direction[a];
        if d.abs() < 1e-15 {
            if o.abs() > bound {
                return None;
            }
            continue;
        }
        let (mut lo, mut hi) = ((-bound - o) / d, (bound - o) / d);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
        if t0 >= t1 {
            return None;
        }
    }
    Some((t0, t1))
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f64; 3]) -> Result<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n < 1e-12 {
        return Err(Error::contract("normalize", "degenerate direction"));
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}
