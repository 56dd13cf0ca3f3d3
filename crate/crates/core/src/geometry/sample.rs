//! Surface point sampling: area-weighted triangle choice, uniform
//! barycentric placement, unit-sphere normalization.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{sub3, triangle_area, Mesh};

/// Unit-sphere normalized point set, `n x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Row-major `n x 3` copy for tensor staging.
    pub fn flat(&self) -> Vec<f32> {
        self.points.iter().flat_map(|p| p.iter().copied()).collect()
    }
}

/// Center on the centroid and scale the farthest point to norm 1.
pub(crate) fn normalize_cloud(points: &mut [[f64; 3]]) -> Result<()> {
    if points.is_empty() {
        return Err(Error::domain("cannot normalize an empty point set"));
    }
    let n = points.len() as f64;
    let mut c = [0.0f64; 3];
    for p in points.iter() {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    for ck in &mut c {
        *ck /= n;
    }
    let mut max_norm = 0.0f64;
    for p in points.iter() {
        let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt();
        max_norm = max_norm.max(d);
    }
    if max_norm == 0.0 {
        return Err(Error::domain("degenerate point set: all points coincide"));
    }
    for p in points.iter_mut() {
        for k in 0..3 {
            p[k] = (p[k] - c[k]) / max_norm;
        }
    }
    Ok(())
}

/// Raw (un-normalized) surface samples. Faces are sorted by index triple
/// first so the draw sequence is independent of face order in the file.
pub(crate) fn sample_raw(mesh: &Mesh, n: usize, seed: u64) -> Result<Vec<[f64; 3]>> {
    let mut faces = mesh.faces.clone();
    faces.sort_unstable();
    let mut cumulative = Vec::with_capacity(faces.len());
    let mut total = 0.0f64;
    for f in &faces {
        total += triangle_area(&mesh.triangle(f));
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::domain("mesh has no triangle with positive area"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let r = rng.gen::<f64>() * total;
        let fi = cumulative.partition_point(|&c| c <= r).min(faces.len() - 1);
        let t = mesh.triangle(&faces[fi]);
        let (mut u, mut v) = (rng.gen::<f64>(), rng.gen::<f64>());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        let ab = sub3(&t[1], &t[0]);
        let ac = sub3(&t[2], &t[0]);
        points.push([
            t[0][0] + u * ab[0] + v * ac[0],
            t[0][1] + u * ab[1] + v * ac[1],
            t[0][2] + u * ab[2] + v * ac[2],
        ]);
    }
    Ok(points)
}

/// Draw `n` surface points, deterministic per seed, normalized to the unit
/// sphere.
pub fn sample_points(mesh: &Mesh, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::domain("cannot sample 0 points"));
    }
    let mut raw = sample_raw(mesh, n, seed)?;
    normalize_cloud(&mut raw)?;
    let points = raw.iter().map(|p| [p[0] as f32, p[1] as f32, p[2] as f32]).collect();
    Ok(PointCloud { points })
}

/// Uniform without-replacement subset of `m` points; keeps the original
/// scale (no re-normalization).
pub fn subsample_points(pc: &PointCloud, m: usize, seed: u64) -> Result<PointCloud> {
    let n = pc.len();
    if m == 0 || m > n {
        return Err(Error::domain(format!("cannot take {m} points from a cloud of {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = i + rng.gen_range(0..n - i);
        idx.swap(i, j);
    }
    Ok(PointCloud { points: idx[..m].iter().map(|&i| pc.points[i]).collect() })
}
