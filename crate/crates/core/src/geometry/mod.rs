//! Mesh ingestion and the two input modalities: sampled point clouds and
//! rendered view stacks.

pub mod off;
mod render;
mod sample;

pub use off::{parse_off, write_off};
pub use render::{camera_ring, render_views, Pose, ViewSet};
pub use sample::{sample_points, subsample_points, PointCloud};

use crate::error::{Error, Result};

/// Triangle mesh in model units. Faces are triangles after load; polygon
/// faces are fan-triangulated by the parser and duplicate-index faces
/// dropped there.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
}

impl Mesh {
    /// Center on the vertex centroid and scale so the farthest vertex has
    /// norm 1. Errors if every vertex coincides.
    pub fn normalize_unit_sphere(&mut self) -> Result<()> {
        if self.vertices.is_empty() {
            return Err(Error::domain("cannot normalize a mesh with no vertices"));
        }
        let n = self.vertices.len() as f64;
        let mut c = [0.0f64; 3];
        for v in &self.vertices {
            for k in 0..3 {
                c[k] += v[k];
            }
        }
        for ck in &mut c {
            *ck /= n;
        }
        let mut max_norm = 0.0f64;
        for v in &self.vertices {
            let d = norm3(&[v[0] - c[0], v[1] - c[1], v[2] - c[2]]);
            max_norm = max_norm.max(d);
        }
        if max_norm == 0.0 {
            return Err(Error::domain("degenerate mesh: all vertices coincide"));
        }
        for v in &mut self.vertices {
            for k in 0..3 {
                v[k] = (v[k] - c[k]) / max_norm;
            }
        }
        Ok(())
    }

    pub(crate) fn triangle(&self, f: &[u32; 3]) -> [[f64; 3]; 3] {
        [
            self.vertices[f[0] as usize],
            self.vertices[f[1] as usize],
            self.vertices[f[2] as usize],
        ]
    }
}

pub(crate) fn sub3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm3(a: &[f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

pub(crate) fn triangle_area(t: &[[f64; 3]; 3]) -> f64 {
    0.5 * norm3(&cross3(&sub3(&t[1], &t[0]), &sub3(&t[2], &t[0])))
}
