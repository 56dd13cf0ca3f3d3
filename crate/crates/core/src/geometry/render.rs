//! Camera ring and orthographic depth-shaded rasterization.
//!
//! Cameras sit on a ring at fixed elevation looking at the origin, z-up.
//! Pixels hold the depth-shaded intensity of the nearest surface: nearer
//! is brighter, in [0.25, 1]; background is exactly 0. The shape (unit
//! sphere after normalization) is scaled to fill 0.8 of the frame.

use crate::error::{Error, Result};
use crate::geometry::{dot3, norm3, Mesh};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
}

pub const RING_ELEVATION_DEG: f64 = 30.0;
const FRAME_FIT: f64 = 0.8;

/// `count` poses at 360/count azimuth spacing starting from 0, fixed
/// elevation.
pub fn camera_ring(count: usize) -> Result<Vec<Pose>> {
    if count == 0 {
        return Err(Error::domain("camera ring needs at least one pose"));
    }
    let step = 360.0 / count as f64;
    Ok((0..count)
        .map(|i| Pose { azimuth_deg: step * i as f64, elevation_deg: RING_ELEVATION_DEG })
        .collect())
}

/// Rendered image stack, row-major `V x H x W`, intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub pixels: Vec<f32>,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub poses: Vec<Pose>,
}

impl ViewSet {
    pub fn view(&self, i: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.pixels[i * n..(i + 1) * n]
    }
}

struct Camera {
    right: [f64; 3],
    up: [f64; 3],
    toward: [f64; 3],
}

impl Camera {
    fn new(pose: &Pose) -> Camera {
        let a = pose.azimuth_deg.to_radians();
        let e = pose.elevation_deg.to_radians();
        // Direction from the origin toward the camera; depth along it is
        // larger for nearer surfaces.
        let toward = [e.cos() * a.cos(), e.cos() * a.sin(), e.sin()];
        let forward = [-toward[0], -toward[1], -toward[2]];
        // right = forward x world_up, valid away from the poles.
        let r = [forward[1], -forward[0], 0.0];
        let rn = norm3(&r);
        let right = [r[0] / rn, r[1] / rn, r[2] / rn];
        let up = [
            right[1] * forward[2] - right[2] * forward[1],
            right[2] * forward[0] - right[0] * forward[2],
            right[0] * forward[1] - right[1] * forward[0],
        ];
        Camera { right, up, toward }
    }

    /// Screen x/y in [-1, 1] for unit-sphere input, plus depth toward the
    /// camera.
    fn project(&self, v: &[f64; 3]) -> (f64, f64, f64) {
        (dot3(v, &self.right), dot3(v, &self.up), dot3(v, &self.toward))
    }
}

fn shade(depth: f64) -> f32 {
    let nearness = ((depth + 1.0) * 0.5).clamp(0.0, 1.0);
    (0.25 + 0.75 * nearness) as f32
}

/// Rasterize one image per pose. The mesh must be unit-sphere normalized.
pub fn render_views(mesh: &Mesh, poses: &[Pose], height: usize, width: usize) -> Result<ViewSet> {
    if height < 8 || width < 8 {
        return Err(Error::dim(format!("render target {height}x{width} below the 8x8 minimum")));
    }
    if poses.is_empty() {
        return Err(Error::domain("render needs at least one pose"));
    }
    let max_norm = mesh.vertices.iter().map(norm3).fold(0.0f64, f64::max);
    if max_norm > 1.0 + 1e-6 {
        return Err(Error::domain(format!(
            "render needs a unit-sphere mesh, max vertex norm is {max_norm}"
        )));
    }
    let mut pixels = vec![0.0f32; poses.len() * height * width];
    let mut depth_buf = vec![f64::NEG_INFINITY; height * width];
    for (vi, pose) in poses.iter().enumerate() {
        let cam = Camera::new(pose);
        depth_buf.fill(f64::NEG_INFINITY);
        // Projected vertices in continuous pixel coordinates.
        let projected: Vec<(f64, f64, f64)> = mesh
            .vertices
            .iter()
            .map(|v| {
                let (sx, sy, d) = cam.project(v);
                let px = (FRAME_FIT * sx + 1.0) * 0.5 * width as f64;
                let py = (1.0 - (FRAME_FIT * sy + 1.0) * 0.5) * height as f64;
                (px, py, d)
            })
            .collect();
        for f in &mesh.faces {
            let (x0, y0, d0) = projected[f[0] as usize];
            let (x1, y1, d1) = projected[f[1] as usize];
            let (x2, y2, d2) = projected[f[2] as usize];
            let area2 = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0);
            if area2.abs() < 1e-12 {
                continue;
            }
            let min_x = (x0.min(x1).min(x2).floor().max(0.0)) as usize;
            let max_x = (x0.max(x1).max(x2).ceil().min(width as f64) as usize).min(width);
            let min_y = (y0.min(y1).min(y2).floor().max(0.0)) as usize;
            let max_y = (y0.max(y1).max(y2).ceil().min(height as f64) as usize).min(height);
            for py in min_y..max_y {
                let cy = py as f64 + 0.5;
                for px in min_x..max_x {
                    let cx = px as f64 + 0.5;
                    let w0 = (x2 - x1) * (cy - y1) - (y2 - y1) * (cx - x1);
                    let w1 = (x0 - x2) * (cy - y2) - (y0 - y2) * (cx - x2);
                    let w2 = (x1 - x0) * (cy - y0) - (y1 - y0) * (cx - x0);
                    let inside = if area2 > 0.0 {
                        w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0
                    } else {
                        w0 <= 0.0 && w1 <= 0.0 && w2 <= 0.0
                    };
                    if !inside {
                        continue;
                    }
                    let depth = (w0 * d0 + w1 * d1 + w2 * d2) / area2;
                    let cell = &mut depth_buf[py * width + px];
                    if depth > *cell {
                        *cell = depth;
                    }
                }
            }
        }
        let image = &mut pixels[vi * height * width..(vi + 1) * height * width];
        for (out, &d) in image.iter_mut().zip(&depth_buf) {
            if d > f64::NEG_INFINITY {
                *out = shade(d);
            }
        }
    }
    Ok(ViewSet { pixels, count: poses.len(), height, width, poses: poses.to_vec() })
}
