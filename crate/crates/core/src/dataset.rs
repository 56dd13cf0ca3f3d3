//! Corpus handling: shape manifests, the preprocessing cache, and
//! synthetic mesh generation for self-contained experiments.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{
    camera_ring, parse_off, render_views, sample_points, write_off, Mesh,
};
use crate::tensor::pvt1;

/// Bumped when preprocessing output changes shape or meaning; part of the
/// cache content hash so stale entries regenerate.
const PREP_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One shape of the input corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub class: String,
    pub split: Split,
    pub mesh_path: PathBuf,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    if entries.is_empty() {
        return Err(Error::config(format!("manifest {} lists no shapes", path.display())));
    }
    let mut seen = std::collections::BTreeSet::new();
    for e in &entries {
        if !seen.insert(&e.id) {
            return Err(Error::config(format!("duplicate shape id {:?} in manifest", e.id)));
        }
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let text = serde_json::to_string_pretty(entries)?;
    fs::write(path, text)?;
    Ok(())
}

/// Preprocessing knobs; changing any regenerates cache entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepSettings {
    pub n_points: usize,
    pub n_views: usize,
    pub view_size: usize,
    pub seed: u64,
}

impl Default for PrepSettings {
    fn default() -> Self {
        PrepSettings { n_points: 1024, n_views: 12, view_size: 64, seed: 7 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexShape {
    pub id: String,
    pub class_index: usize,
    pub split: Split,
    pub points_file: PathBuf,
    pub views_file: PathBuf,
    pub content_hash: String,
}

/// The cache index written next to the per-shape tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheIndex {
    pub classes: Vec<String>,
    pub settings: PrepSettings,
    pub shapes: Vec<IndexShape>,
}

#[derive(Debug, Clone, Default)]
pub struct PrepReport {
    pub prepped: usize,
    pub skipped: usize,
    /// (shape id, reason) for shapes that failed preprocessing.
    pub failures: Vec<(String, String)>,
}

pub(crate) fn shape_seed(base: u64, id: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    base ^ h
}

fn content_hash(mesh_bytes: &[u8], s: &PrepSettings) -> String {
    let mut hasher = Sha256::new();
    hasher.update(PREP_VERSION.to_le_bytes());
    hasher.update((s.n_points as u64).to_le_bytes());
    hasher.update((s.n_views as u64).to_le_bytes());
    hasher.update((s.view_size as u64).to_le_bytes());
    hasher.update(s.seed.to_le_bytes());
    hasher.update(mesh_bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn class_table(entries: &[ManifestEntry]) -> (Vec<String>, BTreeMap<String, usize>) {
    let names: std::collections::BTreeSet<String> =
        entries.iter().map(|e| e.class.clone()).collect();
    let classes: Vec<String> = names.into_iter().collect();
    let index = classes.iter().cloned().enumerate().map(|(i, c)| (c, i)).collect();
    (classes, index)
}

fn prep_one(
    mesh_bytes: &[u8],
    out: &Path,
    id: &str,
    s: &PrepSettings,
) -> Result<(PathBuf, PathBuf)> {
    let text = std::str::from_utf8(mesh_bytes)
        .map_err(|_| Error::parse(1, "mesh file is not UTF-8 text"))?;
    let mut mesh = parse_off(text)?;
    mesh.normalize_unit_sphere()?;
    let pc = sample_points(&mesh, s.n_points, shape_seed(s.seed, id))?;
    let poses = camera_ring(s.n_views)?;
    let views = render_views(&mesh, &poses, s.view_size, s.view_size)?;

    let points_rel = PathBuf::from("points").join(format!("{id}.pvt1"));
    let views_rel = PathBuf::from("views").join(format!("{id}.pvt1"));
    let mut f = fs::File::create(out.join(&points_rel))?;
    pvt1::write(&mut f, &[pc.len(), 3], &pc.flat())?;
    let mut f = fs::File::create(out.join(&views_rel))?;
    pvt1::write(&mut f, &[s.n_views, s.view_size, s.view_size], &views.pixels)?;
    Ok((points_rel, views_rel))
}

/// Preprocess every manifest shape into `out`. Entries whose mesh bytes
/// and settings hash to an existing cache entry are skipped; per-shape
/// failures are recorded and the rest proceed.
pub fn prep_cache(entries: &[ManifestEntry], out: &Path, s: &PrepSettings) -> Result<PrepReport> {
    if s.n_points == 0 || s.n_views == 0 || s.view_size < 8 {
        return Err(Error::config("prep needs points, views, and view_size of at least 8"));
    }
    fs::create_dir_all(out.join("points"))?;
    fs::create_dir_all(out.join("views"))?;
    let index_path = out.join("index.json");
    let old: BTreeMap<String, IndexShape> = match fs::read_to_string(&index_path) {
        Ok(text) => serde_json::from_str::<CacheIndex>(&text)
            .map(|idx| idx.shapes.into_iter().map(|s| (s.id.clone(), s)).collect())
            .unwrap_or_default(),
        Err(_) => BTreeMap::new(),
    };

    let (classes, class_index) = class_table(entries);
    let mut report = PrepReport::default();
    let mut shapes = Vec::with_capacity(entries.len());
    for e in entries {
        let mesh_bytes = match fs::read(&e.mesh_path) {
            Ok(b) => b,
            Err(err) => {
                report
                    .failures
                    .push((e.id.clone(), format!("read {}: {err}", e.mesh_path.display())));
                continue;
            }
        };
        let hash = content_hash(&mesh_bytes, s);
        if let Some(prev) = old.get(&e.id) {
            if prev.content_hash == hash
                && out.join(&prev.points_file).is_file()
                && out.join(&prev.views_file).is_file()
            {
                let mut kept = prev.clone();
                kept.class_index = class_index[&e.class];
                kept.split = e.split;
                shapes.push(kept);
                report.skipped += 1;
                continue;
            }
        }
        match prep_one(&mesh_bytes, out, &e.id, s) {
            Ok((points_file, views_file)) => {
                shapes.push(IndexShape {
                    id: e.id.clone(),
                    class_index: class_index[&e.class],
                    split: e.split,
                    points_file,
                    views_file,
                    content_hash: hash,
                });
                report.prepped += 1;
            }
            Err(err) => report.failures.push((e.id.clone(), err.to_string())),
        }
    }
    let index = CacheIndex { classes, settings: s.clone(), shapes };
    fs::write(&index_path, serde_json::to_string_pretty(&index)?)?;
    Ok(report)
}

/// One preprocessed shape, fully resident.
#[derive(Debug, Clone)]
pub struct PreppedShape {
    pub id: String,
    pub label: usize,
    pub split: Split,
    /// Row-major `n_points x 3`.
    pub points: Vec<f32>,
    pub n_points: usize,
    /// Row-major `n_views x H x W`.
    pub views: Vec<f32>,
    pub n_views: usize,
    pub view_size: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub settings: PrepSettings,
    pub shapes: Vec<PreppedShape>,
}

impl Dataset {
    pub fn load(cache_dir: &Path) -> Result<Dataset> {
        let index_path = cache_dir.join("index.json");
        let text = fs::read_to_string(&index_path)?;
        let index: CacheIndex = serde_json::from_str(&text)?;
        let s = &index.settings;
        let mut shapes = Vec::with_capacity(index.shapes.len());
        for entry in &index.shapes {
            if entry.class_index >= index.classes.len() {
                return Err(Error::index(format!(
                    "shape {:?} names class {} of {}",
                    entry.id,
                    entry.class_index,
                    index.classes.len()
                )));
            }
            let mut f = fs::File::open(cache_dir.join(&entry.points_file))?;
            let (pshape, points): (Vec<usize>, Vec<f32>) = pvt1::read(&mut f)?;
            if pshape != [s.n_points, 3] {
                return Err(Error::dim(format!(
                    "points for {:?} have shape {pshape:?}, expected [{}, 3]",
                    entry.id, s.n_points
                )));
            }
            let mut f = fs::File::open(cache_dir.join(&entry.views_file))?;
            let (vshape, views): (Vec<usize>, Vec<f32>) = pvt1::read(&mut f)?;
            if vshape != [s.n_views, s.view_size, s.view_size] {
                return Err(Error::dim(format!(
                    "views for {:?} have shape {vshape:?}, expected [{}, {}, {}]",
                    entry.id, s.n_views, s.view_size, s.view_size
                )));
            }
            shapes.push(PreppedShape {
                id: entry.id.clone(),
                label: entry.class_index,
                split: entry.split,
                points,
                n_points: s.n_points,
                views,
                n_views: s.n_views,
                view_size: s.view_size,
            });
        }
        if shapes.is_empty() {
            return Err(Error::config(format!("cache {} holds no shapes", cache_dir.display())));
        }
        Ok(Dataset { classes: index.classes, settings: index.settings, shapes })
    }

    pub fn split(&self, split: Split) -> Vec<&PreppedShape> {
        self.shapes.iter().filter(|s| s.split == split).collect()
    }
}

/// Synthetic corpus layout: four primitive classes with randomized
/// proportions and pose, written as OFF meshes plus a manifest.
pub mod synth {
    use super::*;

    pub const CLASSES: [&str; 4] = ["box", "cylinder", "sphere", "torus"];

    fn rotate(v: [f64; 3], yaw: f64, tilt: f64) -> [f64; 3] {
        let (sy, cy) = yaw.sin_cos();
        let r1 = [cy * v[0] - sy * v[1], sy * v[0] + cy * v[1], v[2]];
        let (st, ct) = tilt.sin_cos();
        [r1[0], ct * r1[1] - st * r1[2], st * r1[1] + ct * r1[2]]
    }

    /// Random yaw and tilt plus mild surface jitter. The jitter and the
    /// wide per-class proportion ranges below keep the four classes
    /// mutually confusable (slabs vs disks, rods vs capsules, fat tori
    /// vs ellipsoids) so recognition stays off the ceiling.
    fn posed(mut mesh: Mesh, rng: &mut ChaCha8Rng) -> Mesh {
        let yaw = rng.gen_range(0.0..std::f64::consts::TAU);
        let tilt = rng.gen_range(-0.4..0.4);
        let jitter = 0.015;
        for v in &mut mesh.vertices {
            let mut p = rotate(*v, yaw, tilt);
            for c in &mut p {
                *c += rng.gen_range(-jitter..jitter);
            }
            *v = p;
        }
        mesh
    }

    pub fn sphere_mesh(rng: &mut ChaCha8Rng) -> Mesh {
        let stacks = 12usize;
        let slices = 16usize;
        let scale = [
            rng.gen_range(0.6..1.0),
            rng.gen_range(0.6..1.0),
            rng.gen_range(0.6..1.0),
        ];
        let mut vertices = vec![[0.0, 0.0, scale[2]]];
        for i in 1..stacks {
            let phi = std::f64::consts::PI * i as f64 / stacks as f64;
            for j in 0..slices {
                let theta = std::f64::consts::TAU * j as f64 / slices as f64;
                vertices.push([
                    scale[0] * phi.sin() * theta.cos(),
                    scale[1] * phi.sin() * theta.sin(),
                    scale[2] * phi.cos(),
                ]);
            }
        }
        vertices.push([0.0, 0.0, -scale[2]]);
        let bottom = vertices.len() as u32 - 1;
        let ring = |i: usize, j: usize| -> u32 { 1 + ((i - 1) * slices + j % slices) as u32 };
        let mut faces = Vec::new();
        for j in 0..slices {
            faces.push([0, ring(1, j), ring(1, j + 1)]);
            faces.push([bottom, ring(stacks - 1, j + 1), ring(stacks - 1, j)]);
        }
        for i in 1..stacks - 1 {
            for j in 0..slices {
                faces.push([ring(i, j), ring(i + 1, j), ring(i + 1, j + 1)]);
                faces.push([ring(i, j), ring(i + 1, j + 1), ring(i, j + 1)]);
            }
        }
        posed(Mesh { vertices, faces }, rng)
    }

    pub fn box_mesh(rng: &mut ChaCha8Rng) -> Mesh {
        let h = [
            rng.gen_range(0.2..1.0),
            rng.gen_range(0.2..1.0),
            rng.gen_range(0.2..1.0),
        ];
        let mut vertices = Vec::with_capacity(8);
        for &z in &[-h[2], h[2]] {
            for &y in &[-h[1], h[1]] {
                for &x in &[-h[0], h[0]] {
                    vertices.push([x, y, z]);
                }
            }
        }
        let quads: [[u32; 4]; 6] = [
            [0, 1, 3, 2],
            [4, 6, 7, 5],
            [0, 4, 5, 1],
            [2, 3, 7, 6],
            [0, 2, 6, 4],
            [1, 5, 7, 3],
        ];
        let mut faces = Vec::with_capacity(12);
        for q in quads {
            faces.push([q[0], q[1], q[2]]);
            faces.push([q[0], q[2], q[3]]);
        }
        posed(Mesh { vertices, faces }, rng)
    }

    pub fn cylinder_mesh(rng: &mut ChaCha8Rng) -> Mesh {
        let slices = 20usize;
        let r = rng.gen_range(0.2..0.6);
        let h = rng.gen_range(0.25..1.0);
        let mut vertices = Vec::new();
        for &z in &[-h, h] {
            for j in 0..slices {
                let theta = std::f64::consts::TAU * j as f64 / slices as f64;
                vertices.push([r * theta.cos(), r * theta.sin(), z]);
            }
        }
        vertices.push([0.0, 0.0, -h]);
        vertices.push([0.0, 0.0, h]);
        let (c_lo, c_hi) = (2 * slices as u32, 2 * slices as u32 + 1);
        let lo = |j: usize| (j % slices) as u32;
        let hi = |j: usize| (slices + j % slices) as u32;
        let mut faces = Vec::new();
        for j in 0..slices {
            faces.push([lo(j), lo(j + 1), hi(j)]);
            faces.push([hi(j), lo(j + 1), hi(j + 1)]);
            faces.push([c_lo, lo(j + 1), lo(j)]);
            faces.push([c_hi, hi(j), hi(j + 1)]);
        }
        posed(Mesh { vertices, faces }, rng)
    }

    pub fn torus_mesh(rng: &mut ChaCha8Rng) -> Mesh {
        let rings = 20usize;
        let sides = 10usize;
        let major = rng.gen_range(0.45..0.75);
        let minor = rng.gen_range(0.16..0.62 * major);
        let mut vertices = Vec::with_capacity(rings * sides);
        for i in 0..rings {
            let theta = std::f64::consts::TAU * i as f64 / rings as f64;
            for j in 0..sides {
                let phi = std::f64::consts::TAU * j as f64 / sides as f64;
                let rad = major + minor * phi.cos();
                vertices.push([rad * theta.cos(), rad * theta.sin(), minor * phi.sin()]);
            }
        }
        let at = |i: usize, j: usize| ((i % rings) * sides + j % sides) as u32;
        let mut faces = Vec::new();
        for i in 0..rings {
            for j in 0..sides {
                faces.push([at(i, j), at(i + 1, j), at(i + 1, j + 1)]);
                faces.push([at(i, j), at(i + 1, j + 1), at(i, j + 1)]);
            }
        }
        posed(Mesh { vertices, faces }, rng)
    }

    pub fn make_mesh(class: &str, rng: &mut ChaCha8Rng) -> Result<Mesh> {
        match class {
            "sphere" => Ok(sphere_mesh(rng)),
            "box" => Ok(box_mesh(rng)),
            "cylinder" => Ok(cylinder_mesh(rng)),
            "torus" => Ok(torus_mesh(rng)),
            other => Err(Error::config(format!("no generator for class {other:?}"))),
        }
    }

    /// Write `train_per_class` + `test_per_class` meshes per class under
    /// `dir/meshes` and a manifest at `dir/manifest.json`; returns the
    /// manifest path.
    pub fn synth_corpus(
        dir: &Path,
        train_per_class: usize,
        test_per_class: usize,
        seed: u64,
    ) -> Result<PathBuf> {
        if train_per_class == 0 || test_per_class == 0 {
            return Err(Error::config("synthetic corpus needs shapes in both splits"));
        }
        let mesh_dir = dir.join("meshes");
        fs::create_dir_all(&mesh_dir)?;
        let mut entries = Vec::new();
        for class in CLASSES {
            for i in 0..train_per_class + test_per_class {
                let id = format!("{class}_{i:04}");
                let mut rng = ChaCha8Rng::seed_from_u64(shape_seed(seed, &id));
                let mesh = make_mesh(class, &mut rng)?;
                let path = mesh_dir.join(format!("{id}.off"));
                let mut f = std::io::BufWriter::new(fs::File::create(&path)?);
                write_off(&mut f, &mesh)?;
                f.flush()?;
                entries.push(ManifestEntry {
                    id,
                    class: class.to_string(),
                    split: if i < train_per_class { Split::Train } else { Split::Test },
                    mesh_path: path,
                });
            }
        }
        let manifest = dir.join("manifest.json");
        write_manifest(&manifest, &entries)?;
        Ok(manifest)
    }
}
