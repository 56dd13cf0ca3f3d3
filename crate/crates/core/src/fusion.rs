//! Attention embedding fusion: the view feature is embedded into the
//! point-feature subspace, repeated and concatenated per point, gated
//! through a bounded normalizer, and applied as a residual soft mask on
//! the edge-convolution output. The embedded view feature also joins the
//! classifier head by late concatenation.

use crate::error::{Error, Result};
use crate::point_branch::{edgeconv, EdgeConvParams, NeighborIndex};
use crate::tensor::{Element, Tensor};

/// Guard inside the gate's log so a zero feature maps to a near-zero mask
/// instead of a domain hole.
pub const XI_EPSILON: f64 = 1e-12;

/// Single-FC embedding of the pooled view feature.
#[derive(Debug, Clone)]
pub struct EmbedParams<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

/// Affine projection `1xD -> 1xK`, no nonlinearity.
pub fn embed<E: Element>(view_feat: &Tensor<E>, params: &EmbedParams<E>) -> Result<Tensor<E>> {
    if view_feat.rank() != 2 || view_feat.shape()[0] != 1 {
        return Err(Error::dim(format!(
            "embedding needs a (1,D) view feature, got {:?}",
            view_feat.shape()
        )));
    }
    view_feat.matmul(&params.weight)?.add(&params.bias)
}

/// Repeat the embedded view feature over every point and concatenate:
/// `(n,C) x (1,K) -> (n, C+K)`.
pub fn phi<E: Element>(p: &Tensor<E>, v: &Tensor<E>) -> Result<Tensor<E>> {
    if p.rank() != 2 || v.rank() != 2 || v.shape()[0] != 1 {
        return Err(Error::dim(format!(
            "phi needs (n,C) points and a (1,K) embedding, got {:?} and {:?}",
            p.shape(),
            v.shape()
        )));
    }
    let repeated = v.repeat_rows(p.shape()[0])?;
    Tensor::concat(&[p.clone(), repeated], 1)
}

/// Bounded gate `sigmoid(log(abs(x) + eps))`: symmetric in sign, output in
/// (0,1), near-zero response for near-zero features.
pub fn xi<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    Ok(x.abs().add_scalar(E::from_f64(XI_EPSILON)).log()?.sigmoid())
}

/// Per-point mask MLP: `(C+K) -> (C+K)/2 -> M'` with one ReLU between.
#[derive(Debug, Clone)]
pub struct FusionBlockParams<E: Element> {
    pub mlp_w1: Tensor<E>,
    pub mlp_b1: Tensor<E>,
    pub mlp_w2: Tensor<E>,
    pub mlp_b2: Tensor<E>,
    pub conv: EdgeConvParams<E>,
}

/// Soft attention weights, one per point and output channel, all in (0,1).
#[derive(Debug, Clone)]
pub struct AttentionMask<E: Element> {
    pub values: Tensor<E>,
}

/// `M = xi(MLP(phi(p, v)))`.
pub fn attention_mask<E: Element>(
    p: &Tensor<E>,
    v: &Tensor<E>,
    params: &FusionBlockParams<E>,
) -> Result<AttentionMask<E>> {
    let joint = phi(p, v)?;
    if params.mlp_w1.shape()[0] != joint.shape()[1] {
        return Err(Error::dim(format!(
            "mask MLP expects width {}, phi produced {}",
            params.mlp_w1.shape()[0],
            joint.shape()[1]
        )));
    }
    let hidden = joint.matmul(&params.mlp_w1)?.add(&params.mlp_b1)?.relu();
    let pre = hidden.matmul(&params.mlp_w2)?.add(&params.mlp_b2)?;
    Ok(AttentionMask { values: xi(&pre)? })
}

/// Test override for the mask path; `Learned` is the production path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Learned,
    ForceZero,
    ForceOne,
}

pub struct FusionBlockOut<E: Element> {
    pub features: Tensor<E>,
    pub mask: AttentionMask<E>,
}

/// One fused block: the convention path is an edge convolution over the
/// block input; the mask path gates it residually, `H = E ⊙ (1 + M)`.
/// The input forks into both paths: the mask sees `p`, not `E(p)`.
pub fn attention_fusion_block<E: Element>(
    p: &Tensor<E>,
    nbrs: &NeighborIndex,
    v_embed: &Tensor<E>,
    params: &FusionBlockParams<E>,
    mode: MaskMode,
) -> Result<FusionBlockOut<E>> {
    let conv_out = edgeconv(p, nbrs, &params.conv)?;
    let mask = match mode {
        MaskMode::Learned => attention_mask(p, v_embed, params)?,
        MaskMode::ForceZero => {
            AttentionMask { values: p.tape().zeros(conv_out.shape())? }
        }
        MaskMode::ForceOne => AttentionMask { values: p.tape().ones(conv_out.shape())? },
    };
    if mask.values.shape() != conv_out.shape() {
        return Err(Error::dim(format!(
            "mask {:?} does not match convention path {:?}",
            mask.values.shape(),
            conv_out.shape()
        )));
    }
    let gain = mask.values.add_scalar(E::one());
    let features = conv_out.mul(&gain)?;
    Ok(FusionBlockOut { features, mask })
}

/// Concatenate the embedded view feature onto the pooled point feature for
/// the classifier head.
pub fn late_concat<E: Element>(point_global: &Tensor<E>, v_embed: &Tensor<E>) -> Result<Tensor<E>> {
    Tensor::concat(&[point_global.clone(), v_embed.clone()], 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::point_branch::knn_from_rows;
    use crate::tensor::{grad_check, Tape};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn embed_zero_weight_yields_bias() {
        let tape = Tape::<f64>::new();
        let v = tape.constant(&[1, 3], vec![0.4, -0.2, 0.9]).unwrap();
        let p = EmbedParams {
            weight: tape.param(&[3, 2], vec![0.0; 6]).unwrap(),
            bias: tape.param(&[1, 2], vec![0.7, -1.1]).unwrap(),
        };
        assert_eq!(embed(&v, &p).unwrap().to_vec(), vec![0.7, -1.1]);
    }

    #[test]
    fn embed_identity_weight_is_shift() {
        let tape = Tape::<f64>::new();
        let v = tape.constant(&[1, 3], vec![0.4, -0.2, 0.9]).unwrap();
        let p = EmbedParams {
            weight: tape.eye(3).unwrap(),
            bias: tape.param(&[1, 3], vec![0.1, 0.1, 0.1]).unwrap(),
        };
        let out = embed(&v, &p).unwrap().to_vec();
        for (o, e) in out.iter().zip([0.5, -0.1, 1.0]) {
            assert!((o - e).abs() < 1e-15);
        }
    }

    #[test]
    fn embed_gradient_is_exact_to_fd() {
        let build = |tape: &Tape<f64>, p: &[Tensor<f64>]| -> Result<Tensor<f64>> {
            let v = tape.constant(&[1, 4], vec![0.3, -0.8, 0.5, 1.2])?;
            let params = EmbedParams { weight: p[0].clone(), bias: p[1].clone() };
            Ok(embed(&v, &params)?.sum_all())
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![
            (vec![4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            (vec![1, 3], (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        ];
        let rel = grad_check(&build, &inputs, 1e-5).unwrap();
        assert!(rel < 1e-6, "rel err {rel}");
    }

    #[test]
    fn phi_shapes_and_single_row() {
        let tape = Tape::<f64>::new();
        let p = tape.constant(&[4, 3], (0..12).map(|i| i as f64).collect()).unwrap();
        let v = tape.constant(&[1, 2], vec![9.0, 8.0]).unwrap();
        let out = phi(&p, &v).unwrap();
        assert_eq!(out.shape(), &[4, 5]);
        assert_eq!(&out.to_vec()[..5], &[0.0, 1.0, 2.0, 9.0, 8.0]);

        let single = tape.constant(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(phi(&single, &v).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 9.0, 8.0]);
    }

    #[test]
    fn phi_backward_sums_over_rows() {
        let tape = Tape::<f64>::new();
        let p = tape.constant(&[5, 2], vec![0.0; 10]).unwrap();
        let v = tape.param(&[1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        phi(&p, &v).unwrap().sum_all().backward().unwrap();
        assert_eq!(v.grad().unwrap(), vec![5.0, 5.0, 5.0]);
    }

    #[test]
    fn gate_fixed_points() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&[4], vec![1.0, -1.0, std::f64::consts::E, 0.0]).unwrap();
        let g = xi(&x).unwrap().to_vec();
        assert!((g[0] - 0.5).abs() < 1e-9, "xi(1) = {}", g[0]);
        assert_eq!(g[1].to_bits(), g[0].to_bits(), "xi(-1) == xi(1) exactly");
        let sig1 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((g[2] - sig1).abs() < 1e-6, "xi(e) = {}", g[2]);
        assert!(g[3] > 0.0 && g[3] < 1e-9, "xi(0) = {}", g[3]);
    }

    #[test]
    fn gate_is_sign_symmetric_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::<f64>::new();
        let vals: Vec<f64> = (0..64).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let neg: Vec<f64> = vals.iter().map(|v| -v).collect();
        let a = xi(&tape.constant(&[64], vals).unwrap()).unwrap().to_vec();
        let b = xi(&tape.constant(&[64], neg).unwrap()).unwrap().to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    fn block_params(
        tape: &Tape<f64>,
        c: usize,
        k: usize,
        m: usize,
        seed: u64,
        zero_mlp: bool,
    ) -> FusionBlockParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = (c + k) / 2;
        let mut mat = |r: usize, cc: usize, zero: bool| -> Vec<f64> {
            (0..r * cc).map(|_| if zero { 0.0 } else { rng.gen_range(-0.5..0.5) }).collect()
        };
        FusionBlockParams {
            mlp_w1: tape.param(&[c + k, h], mat(c + k, h, zero_mlp)).unwrap(),
            mlp_b1: tape.param(&[1, h], mat(1, h, zero_mlp)).unwrap(),
            mlp_w2: tape.param(&[h, m], mat(h, m, zero_mlp)).unwrap(),
            mlp_b2: tape
                .param(&[1, m], if zero_mlp { vec![1.0; m] } else { mat(1, m, false) })
                .unwrap(),
            conv: EdgeConvParams {
                weight: tape.param(&[2 * c, m], mat(2 * c, m, false)).unwrap(),
                bias: tape.param(&[1, m], mat(1, m, false)).unwrap(),
            },
        }
    }

    #[test]
    fn constant_preactivation_gives_a_half_mask() {
        let tape = Tape::<f64>::new();
        let p = tape.constant(&[3, 4], (0..12).map(|i| (i as f64).cos()).collect()).unwrap();
        let v = tape.constant(&[1, 2], vec![0.3, -0.6]).unwrap();
        let params = block_params(&tape, 4, 2, 5, 7, true);
        let m = attention_mask(&p, &v, &params).unwrap();
        for &x in m.values.to_vec().iter() {
            assert!((x - 0.5).abs() < 1e-9, "{x}");
        }
    }

    #[test]
    fn mask_is_strictly_inside_unit_interval() {
        for seed in 0..100u64 {
            let tape = Tape::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = tape
                .constant(&[6, 4], (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .unwrap();
            let v = tape
                .constant(&[1, 2], (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .unwrap();
            let params = block_params(&tape, 4, 2, 5, seed.wrapping_add(1000), false);
            let m = attention_mask(&p, &v, &params).unwrap();
            for &x in m.values.to_vec().iter() {
                assert!(x > 0.0 && x < 1.0, "seed {seed}: {x}");
            }
        }
    }

    #[test]
    fn identical_points_get_identical_mask_rows() {
        let tape = Tape::<f64>::new();
        let row = [0.2, -0.7, 0.1, 0.9];
        let p = tape.constant(&[3, 4], row.repeat(3)).unwrap();
        let v = tape.constant(&[1, 2], vec![0.5, 0.5]).unwrap();
        let params = block_params(&tape, 4, 2, 5, 8, false);
        let m = attention_mask(&p, &v, &params).unwrap().values.to_vec();
        assert_eq!(&m[..5], &m[5..10]);
        assert_eq!(&m[..5], &m[10..]);
    }

    fn toy_block_inputs(tape: &Tape<f64>) -> (Tensor<f64>, NeighborIndex, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let coords: Vec<f64> = (0..6 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let nbrs = knn_from_rows(&coords, 6, 3, 2).unwrap();
        let p = tape.constant(&[6, 3], coords).unwrap();
        let v = tape.constant(&[1, 2], vec![0.4, -0.9]).unwrap();
        (p, nbrs, v)
    }

    #[test]
    fn forced_masks_reproduce_the_residual_identity() {
        let tape = Tape::<f64>::new();
        let (p, nbrs, v) = toy_block_inputs(&tape);
        let params = block_params(&tape, 3, 2, 4, 11, false);
        let plain = edgeconv(&p, &nbrs, &params.conv).unwrap().to_vec();
        let zeroed =
            attention_fusion_block(&p, &nbrs, &v, &params, MaskMode::ForceZero).unwrap();
        let doubled =
            attention_fusion_block(&p, &nbrs, &v, &params, MaskMode::ForceOne).unwrap();
        let bits = |v: &[f64]| -> Vec<u64> { v.iter().map(|x| x.to_bits()).collect() };
        assert_eq!(bits(&zeroed.features.to_vec()), bits(&plain));
        let twice: Vec<f64> = plain.iter().map(|x| 2.0 * x).collect();
        assert_eq!(bits(&doubled.features.to_vec()), bits(&twice));
    }

    #[test]
    fn gated_output_keeps_sign_and_magnitude_band() {
        let tape = Tape::<f64>::new();
        let (p, nbrs, v) = toy_block_inputs(&tape);
        let params = block_params(&tape, 3, 2, 4, 13, false);
        let e = edgeconv(&p, &nbrs, &params.conv).unwrap().to_vec();
        let out = attention_fusion_block(&p, &nbrs, &v, &params, MaskMode::Learned).unwrap();
        let h = out.features.to_vec();
        for (ev, hv) in e.iter().zip(&h) {
            assert_eq!(ev > &0.0, hv > &0.0);
            assert_eq!(ev < &0.0, hv < &0.0);
            assert!(hv.abs() >= ev.abs() && hv.abs() <= 2.0 * ev.abs(), "E={ev} H={hv}");
        }
    }

    #[test]
    fn fusion_block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let coords: Vec<f64> = (0..6 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let nbrs = knn_from_rows(&coords, 6, 3, 2).unwrap();
        let shapes: Vec<Vec<usize>> = vec![
            vec![5, 2],
            vec![1, 2],
            vec![2, 4],
            vec![1, 4],
            vec![6, 4],
            vec![1, 4],
            vec![1, 2],
        ];
        let inputs: Vec<(Vec<usize>, Vec<f64>)> = shapes
            .into_iter()
            .map(|s| {
                let n: usize = s.iter().product();
                (s, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect())
            })
            .collect();
        let coords_in = coords.clone();
        let nbrs_in = nbrs.clone();
        let build = move |tape: &Tape<f64>, q: &[Tensor<f64>]| -> Result<Tensor<f64>> {
            let p = tape.constant(&[6, 3], coords_in.clone())?;
            let params = FusionBlockParams {
                mlp_w1: q[0].clone(),
                mlp_b1: q[1].clone(),
                mlp_w2: q[2].clone(),
                mlp_b2: q[3].clone(),
                conv: EdgeConvParams { weight: q[4].clone(), bias: q[5].clone() },
            };
            let out = attention_fusion_block(&p, &nbrs_in, &q[6], &params, MaskMode::Learned)?;
            Ok(out.features.sigmoid().sum_all())
        };
        let rel = grad_check(&build, &inputs, 1e-5).unwrap();
        assert!(rel < 1e-4, "rel err {rel}");
    }

    #[test]
    fn late_concat_shapes_and_slot_gradients() {
        let tape = Tape::<f64>::new();
        let pg = tape.constant(&[1, 512], vec![0.0; 512]).unwrap();
        let ve = tape.constant(&[1, 64], vec![0.0; 64]).unwrap();
        assert_eq!(late_concat(&pg, &ve).unwrap().shape(), &[1, 576]);

        let pg = tape.param(&[1, 3], vec![5.0, 6.0, 7.0]).unwrap();
        let ve = tape.param(&[1, 2], vec![0.0, 0.0]).unwrap();
        let joined = late_concat(&pg, &ve).unwrap();
        assert_eq!(&joined.to_vec()[..3], &[5.0, 6.0, 7.0]);
        let pattern = tape.constant(&[1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        joined.mul(&pattern).unwrap().sum_all().backward().unwrap();
        assert_eq!(pg.grad().unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(ve.grad().unwrap(), vec![4.0, 5.0]);
    }
}
