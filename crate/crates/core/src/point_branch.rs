//! Point-cloud branch primitives: spatial alignment, kNN graphs, and
//! edge convolutions over them.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Exact k-nearest-neighbor table, `n` rows of `k` neighbor indices each.
/// Rows are sorted by ascending distance, ties by ascending index; a point
/// is never its own neighbor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborIndex {
    indices: Vec<u32>,
    n: usize,
    k: usize,
}

impl NeighborIndex {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn flat(&self) -> &[u32] {
        &self.indices
    }

    /// Reindex under a permutation of the points: row i of the result is
    /// the neighbor list of the point that moved to slot i.
    pub fn permuted(&self, perm: &[usize]) -> Result<NeighborIndex> {
        if perm.len() != self.n {
            return Err(Error::contract("permutation length does not match point count"));
        }
        let mut inverse = vec![0u32; self.n];
        for (new_i, &old_i) in perm.iter().enumerate() {
            inverse[old_i] = new_i as u32;
        }
        let mut indices = Vec::with_capacity(self.indices.len());
        for &old_i in perm {
            for &j in self.row(old_i) {
                indices.push(inverse[j as usize]);
            }
        }
        Ok(NeighborIndex { indices, n: self.n, k: self.k })
    }
}

/// Brute-force exact kNN over row-major `n x f` coordinates.
pub fn knn_from_rows(rows: &[f64], n: usize, f: usize, k: usize) -> Result<NeighborIndex> {
    if rows.len() != n * f || f == 0 {
        return Err(Error::dim(format!("{} values do not form {n} rows of {f}", rows.len())));
    }
    if k == 0 || k >= n {
        return Err(Error::domain(format!("knn needs 1 <= k < n, got k={k}, n={n}")));
    }
    let mut indices = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, u32)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        let a = &rows[i * f..(i + 1) * f];
        cand.clear();
        for j in 0..n {
            if j == i {
                continue;
            }
            let b = &rows[j * f..(j + 1) * f];
            let mut d2 = 0.0f64;
            for (av, bv) in a.iter().zip(b) {
                let diff = av - bv;
                d2 += diff * diff;
            }
            cand.push((d2, j as u32));
        }
        let order = |x: &(f64, u32), y: &(f64, u32)| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1));
        cand.select_nth_unstable_by(k - 1, order);
        cand.truncate(k);
        cand.sort_unstable_by(order);
        indices.extend(cand.iter().map(|&(_, j)| j));
    }
    Ok(NeighborIndex { indices, n, k })
}

/// kNN of a rank-2 coordinate tensor. Distances are computed in f64 so
/// the graph is identical across the f32 and f64 instantiations of the
/// same coordinates.
pub fn knn_graph<E: Element>(points: &Tensor<E>, k: usize) -> Result<NeighborIndex> {
    if points.rank() != 2 {
        return Err(Error::dim(format!("knn needs (n,f) points, got {:?}", points.shape())));
    }
    let (n, f) = (points.shape()[0], points.shape()[1]);
    let rows: Vec<f64> = points.value().iter().map(|&v| v.to_f64()).collect();
    knn_from_rows(&rows, n, f, k)
}

/// Per-edge features `concat(x_i, x_j - x_i)`, flattened to
/// `(n*k, 2C)` with the k edges of point i contiguous.
pub fn edge_features<E: Element>(x: &Tensor<E>, nbrs: &NeighborIndex) -> Result<Tensor<E>> {
    if x.rank() != 2 || x.shape()[0] != nbrs.n() {
        return Err(Error::contract(format!(
            "neighbor table built for {} points, features are {:?}",
            nbrs.n(),
            x.shape()
        )));
    }
    let xi = x.repeat_rows(nbrs.k())?;
    let xj = x.gather_rows(std::sync::Arc::new(nbrs.flat().to_vec()))?;
    let diff = xj.sub(&xi)?;
    Tensor::concat(&[xi, diff], 1)
}

/// Edge-convolution parameters: one affine map applied to every edge.
#[derive(Debug, Clone)]
pub struct EdgeConvParams<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

/// Affine + ReLU per edge, then max over each point's k edges.
pub fn edgeconv<E: Element>(
    x: &Tensor<E>,
    nbrs: &NeighborIndex,
    params: &EdgeConvParams<E>,
) -> Result<Tensor<E>> {
    let c_in = x.shape()[1];
    if params.weight.rank() != 2 || params.weight.shape()[0] != 2 * c_in {
        return Err(Error::dim(format!(
            "edgeconv weight {:?} does not match edge width {}",
            params.weight.shape(),
            2 * c_in
        )));
    }
    let m = params.weight.shape()[1];
    let edges = edge_features(x, nbrs)?;
    let act = edges.matmul(&params.weight)?.add(&params.bias)?.relu();
    act.reshape(&[nbrs.n(), nbrs.k(), m])?.reduce_max(1)
}

/// Alignment network parameters: a per-point MLP, a pooled MLP regressing
/// the 3x3 transform. The final layer starts at zero weight with identity
/// bias so the initial transform is exactly the identity.
#[derive(Debug, Clone)]
pub struct TransformParams<E: Element> {
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
    pub w3: Tensor<E>,
    pub b3: Tensor<E>,
    pub w4: Tensor<E>,
    pub b4: Tensor<E>,
}

pub struct SpatialTransformOut<E: Element> {
    pub aligned: Tensor<E>,
    pub transform: Tensor<E>,
    /// Frobenius deviation of the regressed transform from orthogonality,
    /// `sum((T Tᵀ - I)²)`, as a scalar tensor for the loss.
    pub orth_penalty: Tensor<E>,
}

pub fn spatial_transform<E: Element>(
    points: &Tensor<E>,
    p: &TransformParams<E>,
) -> Result<SpatialTransformOut<E>> {
    if points.rank() != 2 || points.shape()[1] != 3 {
        return Err(Error::dim(format!("alignment needs (n,3) points, got {:?}", points.shape())));
    }
    let h1 = points.matmul(&p.w1)?.add(&p.b1)?.relu();
    let h2 = h1.matmul(&p.w2)?.add(&p.b2)?.relu();
    let pooled = global_max_rows(&h2)?;
    let h3 = pooled.matmul(&p.w3)?.add(&p.b3)?.relu();
    let t = h3.matmul(&p.w4)?.add(&p.b4)?.reshape(&[3, 3])?;
    let aligned = points.matmul(&t)?;
    let eye = points.tape().eye(3)?;
    let dev = t.matmul(&t.transpose2()?)?.sub(&eye)?;
    let orth_penalty = dev.mul(&dev)?.sum_all();
    Ok(SpatialTransformOut { aligned, transform: t, orth_penalty })
}

/// Channelwise max over all rows, kept as a `(1, C)` row vector.
pub fn global_max_rows<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let c = x.shape()[1];
    x.reduce_max(0)?.reshape(&[1, c])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tape};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn oracle_knn(rows: &[f64], n: usize, f: usize, k: usize) -> Vec<u32> {
        // Independent full-sort reference.
        let mut out = Vec::new();
        for i in 0..n {
            let mut all: Vec<(f64, u32)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let d2: f64 = (0..f)
                        .map(|c| (rows[i * f + c] - rows[j * f + c]).powi(2))
                        .sum();
                    (d2, j as u32)
                })
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            out.extend(all[..k].iter().map(|&(_, j)| j));
        }
        out
    }

    #[test]
    fn collinear_tie_breaks_by_index() {
        let rows = [0.0, 1.0, 2.0, 3.0];
        let g = knn_from_rows(&rows, 4, 1, 1).unwrap();
        assert_eq!(g.flat(), &[1, 0, 1, 2]);
    }

    #[test]
    fn knn_matches_full_sort_oracle_and_excludes_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(301);
        for &n in &[8usize, 64, 256] {
            for &k in &[1usize, 4, 20] {
                if k >= n {
                    continue;
                }
                let rows: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let g = knn_from_rows(&rows, n, 3, k).unwrap();
                assert_eq!(g.flat(), oracle_knn(&rows, n, 3, k).as_slice(), "n={n} k={k}");
                for i in 0..n {
                    assert!(!g.row(i).contains(&(i as u32)));
                }
            }
        }
    }

    #[test]
    fn knn_rejects_k_not_below_n() {
        let rows = [0.0, 1.0, 2.0];
        assert!(matches!(knn_from_rows(&rows, 3, 1, 3), Err(Error::Domain(_))));
        assert!(matches!(knn_from_rows(&rows, 3, 1, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn edge_features_hand_value() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&[2, 1], vec![0.0, 3.0]).unwrap();
        let g = knn_from_rows(&[0.0, 3.0], 2, 1, 1).unwrap();
        let e = edge_features(&x, &g).unwrap();
        assert_eq!(e.shape(), &[2, 2]);
        assert_eq!(e.to_vec(), vec![0.0, 3.0, 3.0, -3.0]);
    }

    #[test]
    fn duplicate_points_zero_the_difference_part() {
        let tape = Tape::<f64>::new();
        let coords = vec![[0.5, -0.25, 1.0]; 3];
        let flat: Vec<f64> = coords.iter().flat_map(|p| p.iter().copied()).collect();
        let x = tape.constant(&[3, 3], flat.clone()).unwrap();
        let g = knn_from_rows(&flat, 3, 3, 2).unwrap();
        let e = edge_features(&x, &g).unwrap();
        for row in e.to_vec().chunks_exact(6) {
            assert_eq!(&row[3..], &[0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn translation_cancels_in_the_difference_part() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let coords: Vec<f64> = (0..8 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let shifted: Vec<f64> = coords.iter().map(|&v| v + 0.5).collect();
        let g = knn_from_rows(&coords, 8, 3, 3).unwrap();
        let tape = Tape::<f64>::new();
        let a = tape.constant(&[8, 3], coords).unwrap();
        let b = tape.constant(&[8, 3], shifted).unwrap();
        let ea = edge_features(&a, &g).unwrap().to_vec();
        let eb = edge_features(&b, &g).unwrap().to_vec();
        for chunk in 0..8 * 3 {
            let base = chunk * 6;
            for c in 3..6 {
                assert!((ea[base + c] - eb[base + c]).abs() < 1e-12);
            }
        }
    }

    fn random_params(tape: &Tape<f64>, c_in: usize, m: usize, seed: u64) -> EdgeConvParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..2 * c_in * m).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let b: Vec<f64> = (0..m).map(|_| rng.gen_range(-0.5..0.5)).collect();
        EdgeConvParams {
            weight: tape.param(&[2 * c_in, m], w).unwrap(),
            bias: tape.param(&[1, m], b).unwrap(),
        }
    }

    #[test]
    fn single_neighbor_edgeconv_is_plain_affine_relu() {
        let tape = Tape::<f64>::new();
        let coords = vec![0.0, 0.0, 1.0, 0.0, 0.0, 2.0];
        let x = tape.constant(&[3, 2], coords.clone()).unwrap();
        let g = knn_from_rows(&coords, 3, 2, 1).unwrap();
        let p = random_params(&tape, 2, 4, 17);
        let out = edgeconv(&x, &g, &p).unwrap();
        let direct = edge_features(&x, &g)
            .unwrap()
            .matmul(&p.weight)
            .unwrap()
            .add(&p.bias)
            .unwrap()
            .relu();
        assert_eq!(out.to_vec(), direct.to_vec());
    }

    #[test]
    fn neighbor_order_within_a_row_is_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let coords: Vec<f64> = (0..10 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = knn_from_rows(&coords, 10, 3, 4).unwrap();
        let mut shuffled = g.clone();
        for i in 0..10 {
            shuffled.indices[i * 4..(i + 1) * 4].reverse();
        }
        let tape = Tape::<f64>::new();
        let x = tape.constant(&[10, 3], coords).unwrap();
        let p = random_params(&tape, 3, 8, 31);
        let a = edgeconv(&x, &g, &p).unwrap().to_vec();
        let b = edgeconv(&x, &shuffled, &p).unwrap().to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn edgeconv_output_shape_at_reference_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let coords: Vec<f64> = (0..1024 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = knn_from_rows(&coords, 1024, 3, 20).unwrap();
        let tape = Tape::<f64>::new();
        let x = tape.constant(&[1024, 3], coords).unwrap();
        let p = random_params(&tape, 3, 64, 2);
        let out = edgeconv(&x, &g, &p).unwrap();
        assert_eq!(out.shape(), &[1024, 64]);
    }

    fn transform_params(tape: &Tape<f64>, seed: u64, identity: bool) -> TransformParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |r: usize, c: usize, zero: bool| -> Vec<f64> {
            (0..r * c).map(|_| if zero { 0.0 } else { rng.gen_range(-0.4..0.4) }).collect()
        };
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        TransformParams {
            w1: tape.param(&[3, 8], mat(3, 8, false)).unwrap(),
            b1: tape.param(&[1, 8], mat(1, 8, false)).unwrap(),
            w2: tape.param(&[8, 16], mat(8, 16, false)).unwrap(),
            b2: tape.param(&[1, 16], mat(1, 16, false)).unwrap(),
            w3: tape.param(&[16, 8], mat(16, 8, false)).unwrap(),
            b3: tape.param(&[1, 8], mat(1, 8, false)).unwrap(),
            w4: tape.param(&[8, 9], mat(8, 9, identity)).unwrap(),
            b4: tape.param(&[1, 9], eye).unwrap(),
        }
    }

    #[test]
    fn identity_initialization_is_exact() {
        let tape = Tape::<f64>::new();
        let pts: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = tape.constant(&[4, 3], pts.clone()).unwrap();
        let p = transform_params(&tape, 3, true);
        let out = spatial_transform(&x, &p).unwrap();
        assert_eq!(out.aligned.to_vec(), pts);
        assert_eq!(out.orth_penalty.item().unwrap(), 0.0);
    }

    #[test]
    fn orthogonal_transform_preserves_distances() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<f64> = (0..6 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = tape.constant(&[6, 3], pts.clone()).unwrap();
        let mut p = transform_params(&tape, 4, true);
        // Rotation about z by 40 degrees as the bias.
        let (s, c) = (40.0f64.to_radians().sin(), 40.0f64.to_radians().cos());
        p.b4 = tape.param(&[1, 9], vec![c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let out = spatial_transform(&x, &p).unwrap();
        assert!(out.orth_penalty.item().unwrap() < 1e-10);
        let aligned = out.aligned.to_vec();
        let dist = |v: &[f64], i: usize, j: usize| -> f64 {
            (0..3).map(|k| (v[i * 3 + k] - v[j * 3 + k]).powi(2)).sum::<f64>().sqrt()
        };
        for i in 0..6 {
            for j in (i + 1)..6 {
                assert!((dist(&pts, i, j) - dist(&aligned, i, j)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn non_orthogonal_transform_is_penalized() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let mut p = transform_params(&tape, 4, true);
        p.b4 = tape
            .param(&[1, 9], vec![2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0])
            .unwrap();
        let out = spatial_transform(&x, &p).unwrap();
        // T Tᵀ = 4I, deviation 3I, Frobenius² = 27.
        assert!((out.orth_penalty.item().unwrap() - 27.0).abs() < 1e-9);
    }

    #[test]
    fn transform_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts: Vec<f64> = (0..5 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let shapes: Vec<Vec<usize>> = vec![
            vec![3, 8],
            vec![1, 8],
            vec![8, 16],
            vec![1, 16],
            vec![16, 8],
            vec![1, 8],
            vec![8, 9],
            vec![1, 9],
        ];
        let inputs: Vec<(Vec<usize>, Vec<f64>)> = shapes
            .into_iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let d = (0..n).map(|_| rng.gen_range(-0.4..0.4)).collect();
                (s, d)
            })
            .collect();
        let pts_in = pts.clone();
        let build = move |tape: &Tape<f64>, p: &[Tensor<f64>]| -> Result<Tensor<f64>> {
            let x = tape.constant(&[5, 3], pts_in.clone())?;
            let params = TransformParams {
                w1: p[0].clone(),
                b1: p[1].clone(),
                w2: p[2].clone(),
                b2: p[3].clone(),
                w3: p[4].clone(),
                b3: p[5].clone(),
                w4: p[6].clone(),
                b4: p[7].clone(),
            };
            let out = spatial_transform(&x, &params)?;
            let sq = out.aligned.mul(&out.aligned)?.sum_all();
            sq.add(&out.orth_penalty)
        };
        let rel = grad_check(&build, &inputs, 1e-5).unwrap();
        assert!(rel < 1e-4, "rel err {rel}");
    }

    #[test]
    fn global_pool_examples() {
        let tape = Tape::<f64>::new();
        let single = tape.constant(&[1, 3], vec![0.3, -0.7, 2.0]).unwrap();
        assert_eq!(global_max_rows(&single).unwrap().to_vec(), vec![0.3, -0.7, 2.0]);

        let neg = tape.constant(&[3, 1], vec![-5.0, -2.0, -9.0]).unwrap();
        assert_eq!(global_max_rows(&neg).unwrap().to_vec(), vec![-2.0]);

        let x = tape.constant(&[3, 2], vec![1.0, 4.0, 5.0, 0.0, 2.0, 3.0]).unwrap();
        let perm = tape.constant(&[3, 2], vec![2.0, 3.0, 1.0, 4.0, 5.0, 0.0]).unwrap();
        assert_eq!(
            global_max_rows(&x).unwrap().to_vec(),
            global_max_rows(&perm).unwrap().to_vec()
        );
    }

    #[test]
    fn branch_layer_is_permutation_invariant_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 24;
        let coords: Vec<f32> = (0..n * 3).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                p.swap(i, rng.gen_range(0..=i));
            }
            p
        };
        let permuted: Vec<f32> =
            perm.iter().flat_map(|&i| coords[i * 3..(i + 1) * 3].to_vec()).collect();

        let pooled = |flat: &[f32]| -> Vec<u32> {
            let tape = Tape::<f32>::new();
            let x = tape.constant(&[n, 3], flat.to_vec()).unwrap();
            let g = knn_graph(&x, 4).unwrap();
            let mut rp = ChaCha8Rng::seed_from_u64(99);
            let w: Vec<f32> = (0..6 * 8).map(|_| rp.gen_range(-0.5..0.5)).collect();
            let b: Vec<f32> = (0..8).map(|_| rp.gen_range(-0.5..0.5)).collect();
            let params = EdgeConvParams {
                weight: tape.param(&[6, 8], w).unwrap(),
                bias: tape.param(&[1, 8], b).unwrap(),
            };
            let feats = edgeconv(&x, &g, &params).unwrap();
            global_max_rows(&feats).unwrap().to_vec().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(pooled(&coords), pooled(&permuted));
    }
}
