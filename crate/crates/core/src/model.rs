//! Network assembly: the parameter registry, ablation arms, and the
//! end-to-end forward pass joining both branches through the fusion
//! blocks and the classifier head.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{
    attention_fusion_block, embed, late_concat, EmbedParams, FusionBlockParams, MaskMode,
};
use crate::point_branch::{
    edgeconv, global_max_rows, spatial_transform, EdgeConvParams, NeighborIndex, TransformParams,
};
use crate::tensor::{Element, Tape, Tensor};
use crate::view_branch::{view_cnn_forward, view_pool, ViewCnnParams};

/// Which slice of the network a run trains and evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Full,
    PointOnly,
    ViewOnly,
    LateFusion,
}

impl Arm {
    pub fn has_point_branch(self) -> bool {
        !matches!(self, Arm::ViewOnly)
    }

    pub fn has_view_branch(self) -> bool {
        !matches!(self, Arm::PointOnly)
    }

    /// Embedding + late concat are present whenever both branches are.
    pub fn has_embedding(self) -> bool {
        self.has_point_branch() && self.has_view_branch()
    }

    /// Only the full arm carries the mask MLPs.
    pub fn has_masks(self) -> bool {
        matches!(self, Arm::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::PointOnly => "point_only",
            Arm::ViewOnly => "view_only",
            Arm::LateFusion => "late_fusion",
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Arm> {
        match s {
            "full" => Ok(Arm::Full),
            "point_only" => Ok(Arm::PointOnly),
            "view_only" => Ok(Arm::ViewOnly),
            "late_fusion" => Ok(Arm::LateFusion),
            other => Err(Error::config(format!(
                "unknown arm {other:?} (expected full, point_only, view_only, late_fusion)"
            ))),
        }
    }
}

/// Architecture hyperparameters. Widths are configurable so the same code
/// serves both reference-scale and desk-scale experiments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arm: Arm,
    pub n_classes: usize,
    /// Neighbors per point in the static kNN graph.
    pub k: usize,
    /// Output widths of the four edge convolutions.
    pub edge_widths: [usize; 4],
    /// Alignment net: per-point MLP 3 -> st[0] -> st[1], pooled MLP
    /// st[1] -> st[2] -> 9.
    pub st_widths: [usize; 3],
    /// Channels of the two view CNN conv layers.
    pub view_channels: [usize; 2],
    /// Pooled view feature width D.
    pub view_dim: usize,
    /// Embedding width K.
    pub embed_dim: usize,
    /// Widths of the first two classifier FC layers; the second one is the
    /// retrieval feature width.
    pub fc_widths: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arm: Arm::Full,
            n_classes: 40,
            k: 20,
            edge_widths: [64, 64, 128, 256],
            st_widths: [32, 64, 32],
            view_channels: [16, 32],
            view_dim: 256,
            embed_dim: 64,
            fc_widths: [512, 512],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = self
            .edge_widths
            .iter()
            .chain(&self.st_widths)
            .chain(&self.view_channels)
            .chain([&self.view_dim, &self.embed_dim, &self.n_classes, &self.k])
            .chain(&self.fc_widths);
        for &w in widths {
            if w == 0 {
                return Err(Error::config("model widths, k, and class count must be nonzero"));
            }
        }
        if self.arm.has_masks() {
            for b in 0..2 {
                if self.mask_hidden(b) == 0 {
                    return Err(Error::config(format!(
                        "mask MLP hidden width for block {} collapses to zero",
                        b + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Input feature width of fusion block `b` (0 or 1): what the mask MLP
    /// and the wrapped convolution both consume.
    pub fn block_input(&self, b: usize) -> usize {
        match b {
            0 => self.edge_widths[1],
            _ => self.edge_widths[2],
        }
    }

    pub fn mask_hidden(&self, b: usize) -> usize {
        (self.block_input(b) + self.embed_dim) / 2
    }

    /// Width of the concatenated multi-scale point feature.
    pub fn point_feature_width(&self) -> usize {
        self.edge_widths.iter().sum()
    }

    /// Input width of the first classifier layer.
    pub fn head_input(&self) -> usize {
        if self.arm.has_point_branch() {
            self.point_feature_width()
        } else {
            self.view_dim
        }
    }

    /// Input width of the second classifier layer (after late concat where
    /// the arm has one).
    pub fn head_mid_input(&self) -> usize {
        if self.arm.has_embedding() {
            self.fc_widths[0] + self.embed_dim
        } else {
            self.fc_widths[0]
        }
    }

    /// Width of the retrieval feature: the input to the final FC layer.
    pub fn retrieval_width(&self) -> usize {
        self.fc_widths[1]
    }
}

/// Coarse parameter grouping; the alternating schedule freezes by group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    PointBranch,
    FusionMlp,
    ViewCnn,
    Embed,
    Head,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<E: Element> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<E>,
    pub group: ParamGroup,
}

/// Ordered, named registry of every trainable tensor of one arm.
#[derive(Debug, Clone)]
pub struct ParamStore<E: Element> {
    entries: Vec<ParamEntry<E>>,
    index: BTreeMap<String, usize>,
}

fn name_hash(name: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Per-entry RNG: values depend on (seed, name) only, so arms sharing a
/// parameter name initialize it identically.
fn entry_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut s = [0u8; 32];
    s[..8].copy_from_slice(&seed.to_le_bytes());
    s[8..16].copy_from_slice(&name_hash(name).to_le_bytes());
    ChaCha8Rng::from_seed(s)
}

enum Init {
    /// Uniform in ±sqrt(6 / fan_in), fan_in = rows.
    Kaiming,
    Zeros,
    /// Flattened 3x3 identity (alignment net output bias).
    Identity3,
}

impl<E: Element> ParamStore<E> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<E>> {
        cfg.validate()?;
        let mut store = ParamStore { entries: Vec::new(), index: BTreeMap::new() };
        let mut push = |name: &str, shape: Vec<usize>, group: ParamGroup, init: Init| {
            let n: usize = shape.iter().product();
            let data: Vec<E> = match init {
                Init::Zeros => vec![E::zero(); n],
                Init::Identity3 => [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]
                    .iter()
                    .map(|&v| E::from_f64(v))
                    .collect(),
                Init::Kaiming => {
                    let mut rng = entry_rng(seed, name);
                    let lim = (6.0 / shape[0] as f64).sqrt();
                    (0..n).map(|_| E::from_f64(rng.gen_range(-lim..lim))).collect()
                }
            };
            store.index.insert(name.to_string(), store.entries.len());
            store.entries.push(ParamEntry { name: name.to_string(), shape, data, group });
        };

        let arm = cfg.arm;
        if arm.has_point_branch() {
            let [s1, s2, s3] = cfg.st_widths;
            push("point.transform.w1", vec![3, s1], ParamGroup::PointBranch, Init::Kaiming);
            push("point.transform.b1", vec![1, s1], ParamGroup::PointBranch, Init::Zeros);
            push("point.transform.w2", vec![s1, s2], ParamGroup::PointBranch, Init::Kaiming);
            push("point.transform.b2", vec![1, s2], ParamGroup::PointBranch, Init::Zeros);
            push("point.transform.w3", vec![s2, s3], ParamGroup::PointBranch, Init::Kaiming);
            push("point.transform.b3", vec![1, s3], ParamGroup::PointBranch, Init::Zeros);
            push("point.transform.w4", vec![s3, 9], ParamGroup::PointBranch, Init::Zeros);
            push("point.transform.b4", vec![1, 9], ParamGroup::PointBranch, Init::Identity3);
            let ins = [3, cfg.edge_widths[0], cfg.edge_widths[1], cfg.edge_widths[2]];
            for (i, (&c_in, &c_out)) in ins.iter().zip(&cfg.edge_widths).enumerate() {
                push(
                    &format!("point.conv{}.weight", i + 1),
                    vec![2 * c_in, c_out],
                    ParamGroup::PointBranch,
                    Init::Kaiming,
                );
                push(
                    &format!("point.conv{}.bias", i + 1),
                    vec![1, c_out],
                    ParamGroup::PointBranch,
                    Init::Zeros,
                );
            }
        }
        if arm.has_masks() {
            for b in 0..2usize {
                let input = cfg.block_input(b) + cfg.embed_dim;
                let hidden = cfg.mask_hidden(b);
                let out = cfg.edge_widths[b + 2];
                let prefix = format!("fusion{}.mlp", b + 1);
                push(&format!("{prefix}.w1"), vec![input, hidden], ParamGroup::FusionMlp, Init::Kaiming);
                push(&format!("{prefix}.b1"), vec![1, hidden], ParamGroup::FusionMlp, Init::Zeros);
                push(&format!("{prefix}.w2"), vec![hidden, out], ParamGroup::FusionMlp, Init::Kaiming);
                push(&format!("{prefix}.b2"), vec![1, out], ParamGroup::FusionMlp, Init::Zeros);
            }
        }
        if arm.has_view_branch() {
            let [c1, c2] = cfg.view_channels;
            push("view.conv1.weight", vec![25, c1], ParamGroup::ViewCnn, Init::Kaiming);
            push("view.conv1.bias", vec![1, c1], ParamGroup::ViewCnn, Init::Zeros);
            push("view.conv2.weight", vec![9 * c1, c2], ParamGroup::ViewCnn, Init::Kaiming);
            push("view.conv2.bias", vec![1, c2], ParamGroup::ViewCnn, Init::Zeros);
            push("view.fc.weight", vec![c2, cfg.view_dim], ParamGroup::ViewCnn, Init::Kaiming);
            push("view.fc.bias", vec![1, cfg.view_dim], ParamGroup::ViewCnn, Init::Zeros);
        }
        if arm.has_embedding() {
            push(
                "embed.weight",
                vec![cfg.view_dim, cfg.embed_dim],
                ParamGroup::Embed,
                Init::Kaiming,
            );
            push("embed.bias", vec![1, cfg.embed_dim], ParamGroup::Embed, Init::Zeros);
        }
        push("head.fc1.weight", vec![cfg.head_input(), cfg.fc_widths[0]], ParamGroup::Head, Init::Kaiming);
        push("head.fc1.bias", vec![1, cfg.fc_widths[0]], ParamGroup::Head, Init::Zeros);
        push(
            "head.fc2.weight",
            vec![cfg.head_mid_input(), cfg.fc_widths[1]],
            ParamGroup::Head,
            Init::Kaiming,
        );
        push("head.fc2.bias", vec![1, cfg.fc_widths[1]], ParamGroup::Head, Init::Zeros);
        push(
            "head.fc3.weight",
            vec![cfg.fc_widths[1], cfg.n_classes],
            ParamGroup::Head,
            Init::Kaiming,
        );
        push("head.fc3.bias", vec![1, cfg.n_classes], ParamGroup::Head, Init::Zeros);
        Ok(store)
    }

    pub fn entries(&self) -> &[ParamEntry<E>] {
        &self.entries
    }

    /// Mutable access for optimizer updates; names and shapes are fixed.
    pub fn entries_mut(&mut self) -> &mut [ParamEntry<E>] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<E>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn set_data(&mut self, name: &str, data: Vec<E>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::contract(format!("no parameter named {name:?}")))?;
        let entry = &mut self.entries[i];
        if data.len() != entry.data.len() {
            return Err(Error::dim(format!(
                "parameter {name:?} holds {} values, got {}",
                entry.data.len(),
                data.len()
            )));
        }
        entry.data = data;
        Ok(())
    }

    /// Copy values for every name both stores share.
    pub fn copy_shared_from(&mut self, other: &ParamStore<E>) {
        for entry in &mut self.entries {
            if let Some(src) = other.get(&entry.name) {
                if src.shape == entry.shape {
                    entry.data = src.data.clone();
                }
            }
        }
    }

    /// Content hash of one group's parameters, for freeze verification.
    pub fn group_hash(&self, group: ParamGroup) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for entry in &self.entries {
            if entry.group != group {
                continue;
            }
            hasher.update(entry.name.as_bytes());
            for &d in &entry.shape {
                hasher.update((d as u64).to_le_bytes());
            }
            for &v in &entry.data {
                hasher.update(v.to_f64().to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    /// Put every parameter on `tape`. With `train`, parameters require
    /// gradients except the view CNN group when `freeze_view` is set.
    pub fn stage(&self, tape: &Tape<E>, train: bool, freeze_view: bool) -> Result<Staged<E>> {
        let mut map = BTreeMap::new();
        for entry in &self.entries {
            let trainable =
                train && !(freeze_view && entry.group == ParamGroup::ViewCnn);
            let t = if trainable {
                tape.param(&entry.shape, entry.data.clone())?
            } else {
                tape.constant(&entry.shape, entry.data.clone())?
            };
            map.insert(entry.name.clone(), t);
        }
        Ok(Staged { map })
    }
}

/// Tape-resident parameter tensors for one forward/backward pass.
pub struct Staged<E: Element> {
    map: BTreeMap<String, Tensor<E>>,
}

impl<E: Element> Staged<E> {
    /// Assemble from externally built tensors, e.g. for derivative checks.
    pub fn from_named<I: IntoIterator<Item = (String, Tensor<E>)>>(entries: I) -> Self {
        Staged { map: entries.into_iter().collect() }
    }

    /// The tape every staged tensor lives on.
    pub fn any_tape(&self) -> Option<&Tape<E>> {
        self.map.values().next().map(|t| t.tape())
    }

    pub fn get(&self, name: &str) -> Result<Tensor<E>> {
        self.map
            .get(name)
            .cloned()
            .ok_or_else(|| Error::contract(format!("parameter {name:?} not staged")))
    }

    /// Gradients keyed by name, in store order; absent for frozen or
    /// unreached parameters.
    pub fn gradients(&self, store: &ParamStore<E>) -> Vec<Option<Vec<E>>> {
        store.entries.iter().map(|e| self.map.get(&e.name).and_then(|t| t.grad())).collect()
    }

    fn edge_params(&self, i: usize) -> Result<EdgeConvParams<E>> {
        Ok(EdgeConvParams {
            weight: self.get(&format!("point.conv{i}.weight"))?,
            bias: self.get(&format!("point.conv{i}.bias"))?,
        })
    }

    fn transform_params(&self) -> Result<TransformParams<E>> {
        Ok(TransformParams {
            w1: self.get("point.transform.w1")?,
            b1: self.get("point.transform.b1")?,
            w2: self.get("point.transform.w2")?,
            b2: self.get("point.transform.b2")?,
            w3: self.get("point.transform.w3")?,
            b3: self.get("point.transform.b3")?,
            w4: self.get("point.transform.w4")?,
            b4: self.get("point.transform.b4")?,
        })
    }

    fn fusion_params(&self, b: usize) -> Result<FusionBlockParams<E>> {
        let prefix = format!("fusion{}.mlp", b + 1);
        Ok(FusionBlockParams {
            mlp_w1: self.get(&format!("{prefix}.w1"))?,
            mlp_b1: self.get(&format!("{prefix}.b1"))?,
            mlp_w2: self.get(&format!("{prefix}.w2"))?,
            mlp_b2: self.get(&format!("{prefix}.b2"))?,
            conv: self.edge_params(b + 3)?,
        })
    }

    fn view_params(&self) -> Result<ViewCnnParams<E>> {
        Ok(ViewCnnParams {
            conv1_w: self.get("view.conv1.weight")?,
            conv1_b: self.get("view.conv1.bias")?,
            conv2_w: self.get("view.conv2.weight")?,
            conv2_b: self.get("view.conv2.bias")?,
            fc_w: self.get("view.fc.weight")?,
            fc_b: self.get("view.fc.bias")?,
        })
    }

    fn embed_params(&self) -> Result<EmbedParams<E>> {
        Ok(EmbedParams { weight: self.get("embed.weight")?, bias: self.get("embed.bias")? })
    }
}

/// One shape's tape-resident inputs; presence depends on the arm.
pub struct ShapeInput<E: Element> {
    pub points: Option<Tensor<E>>,
    pub nbrs: Option<NeighborIndex>,
    pub views: Option<Tensor<E>>,
}

pub struct ForwardOut<E: Element> {
    pub logits: Tensor<E>,
    /// Input to the final FC layer; the retrieval embedding.
    pub retrieval: Tensor<E>,
    /// Learned masks of the two fusion blocks (full arm only).
    pub masks: Vec<Tensor<E>>,
    /// Alignment orthogonality penalty when the point branch is present.
    pub orth_penalty: Option<Tensor<E>>,
}

pub fn forward<E: Element>(
    cfg: &ModelConfig,
    staged: &Staged<E>,
    input: &ShapeInput<E>,
    mask_mode: MaskMode,
) -> Result<ForwardOut<E>> {
    let arm = cfg.arm;

    let mut v_embed = None;
    let mut pooled_view = None;
    if arm.has_view_branch() {
        let views = input
            .views
            .as_ref()
            .ok_or_else(|| Error::contract(format!("{} arm needs view input", arm.name())))?;
        let feats = view_cnn_forward(views, &staged.view_params()?)?;
        let pooled = view_pool(&feats)?;
        if arm.has_embedding() {
            v_embed = Some(embed(&pooled, &staged.embed_params()?)?);
        }
        pooled_view = Some(pooled);
    }

    let mut masks = Vec::new();
    let mut orth_penalty = None;
    let trunk = if arm.has_point_branch() {
        let points = input
            .points
            .as_ref()
            .ok_or_else(|| Error::contract(format!("{} arm needs point input", arm.name())))?;
        let nbrs = input
            .nbrs
            .as_ref()
            .ok_or_else(|| Error::contract(format!("{} arm needs a neighbor graph", arm.name())))?;
        let st = spatial_transform(points, &staged.transform_params()?)?;
        orth_penalty = Some(st.orth_penalty);
        let e1 = edgeconv(&st.aligned, nbrs, &staged.edge_params(1)?)?;
        let e2 = edgeconv(&e1, nbrs, &staged.edge_params(2)?)?;
        let (h3, h4) = if arm.has_masks() {
            let ve = v_embed.as_ref().expect("full arm embeds the view feature");
            let b3 = attention_fusion_block(&e2, nbrs, ve, &staged.fusion_params(0)?, mask_mode)?;
            let b4 = attention_fusion_block(
                &b3.features,
                nbrs,
                ve,
                &staged.fusion_params(1)?,
                mask_mode,
            )?;
            masks.push(b3.mask.values);
            masks.push(b4.mask.values);
            (b3.features, b4.features)
        } else {
            let h3 = edgeconv(&e2, nbrs, &staged.edge_params(3)?)?;
            let h4 = edgeconv(&h3, nbrs, &staged.edge_params(4)?)?;
            (h3, h4)
        };
        let multi_scale = Tensor::concat(&[e1, e2, h3, h4], 1)?;
        global_max_rows(&multi_scale)?
    } else {
        pooled_view.clone().expect("view-only arm pooled its views")
    };

    let f1 = trunk
        .matmul(&staged.get("head.fc1.weight")?)?
        .add(&staged.get("head.fc1.bias")?)?
        .relu();
    let mid = match &v_embed {
        Some(ve) if arm.has_embedding() => late_concat(&f1, ve)?,
        _ => f1,
    };
    let retrieval = mid
        .matmul(&staged.get("head.fc2.weight")?)?
        .add(&staged.get("head.fc2.bias")?)?
        .relu();
    let logits = retrieval
        .matmul(&staged.get("head.fc3.weight")?)?
        .add(&staged.get("head.fc3.bias")?)?;
    Ok(ForwardOut { logits, retrieval, masks, orth_penalty })
}

/// Stage one shape's host-side inputs onto a tape. `points` is a flat
/// `n x 3` row-major slice; `views` a flat `V x H x W` stack.
pub fn stage_input<E: Element>(
    tape: &Tape<E>,
    arm: Arm,
    points: Option<(&[f32], usize)>,
    nbrs: Option<&NeighborIndex>,
    views: Option<(&[f32], usize, usize, usize)>,
) -> Result<ShapeInput<E>> {
    let mut input = ShapeInput { points: None, nbrs: None, views: None };
    if arm.has_point_branch() {
        let (flat, n) =
            points.ok_or_else(|| Error::contract(format!("{} arm needs points", arm.name())))?;
        let data: Vec<E> = flat.iter().map(|&v| E::from_f64(v as f64)).collect();
        input.points = Some(tape.constant(&[n, 3], data)?);
        input.nbrs = Some(
            nbrs.ok_or_else(|| {
                Error::contract(format!("{} arm needs a neighbor graph", arm.name()))
            })?
            .clone(),
        );
    }
    if arm.has_view_branch() {
        let (flat, v, h, w) =
            views.ok_or_else(|| Error::contract(format!("{} arm needs views", arm.name())))?;
        let data: Vec<E> = flat.iter().map(|&x| E::from_f64(x as f64)).collect();
        input.views = Some(tape.constant(&[v, h, w, 1], data)?);
    }
    Ok(input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::point_branch::knn_from_rows;
    use crate::tensor::grad_check;
    use rand::Rng;

    /// Narrow config sized for unit tests.
    pub(crate) fn tiny_config(arm: Arm) -> ModelConfig {
        ModelConfig {
            arm,
            n_classes: 4,
            k: 3,
            edge_widths: [4, 4, 6, 8],
            st_widths: [6, 8, 6],
            view_channels: [2, 3],
            view_dim: 5,
            embed_dim: 4,
            fc_widths: [10, 9],
            ..ModelConfig::default()
        }
    }

    fn random_input(seed: u64, n: usize, v: usize, hw: usize) -> (Vec<f32>, NeighborIndex, Vec<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<f32> = (0..n * 3).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let rows: Vec<f64> = pts.iter().map(|&x| x as f64).collect();
        let g = knn_from_rows(&rows, n, 3, 3).unwrap();
        let views: Vec<f32> = (0..v * hw * hw).map(|_| rng.gen_range(0.0f32..1.0)).collect();
        (pts, g, views)
    }

    fn full_logits(seed: u64, perm_points: bool, perm_views: bool) -> Vec<u32> {
        let cfg = tiny_config(Arm::Full);
        let store = ParamStore::<f32>::init(&cfg, seed).unwrap();
        let (mut pts, mut g, mut views) = random_input(seed ^ 0x55, 20, 4, 16);
        if perm_points {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
            let mut perm: Vec<usize> = (0..20).collect();
            for i in (1..20).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            pts = perm.iter().flat_map(|&i| pts[i * 3..(i + 1) * 3].to_vec()).collect();
            let rows: Vec<f64> = pts.iter().map(|&x| x as f64).collect();
            g = knn_from_rows(&rows, 20, 3, 3).unwrap();
        }
        if perm_views {
            let plane = 16 * 16;
            let order = [2usize, 0, 3, 1];
            views = order.iter().flat_map(|&i| views[i * plane..(i + 1) * plane].to_vec()).collect();
        }
        let tape = Tape::<f32>::new();
        let staged = store.stage(&tape, false, false).unwrap();
        let input =
            stage_input(&tape, cfg.arm, Some((&pts, 20)), Some(&g), Some((&views, 4, 16, 16)))
                .unwrap();
        let out = forward(&cfg, &staged, &input, MaskMode::Learned).unwrap();
        out.logits.to_vec().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn logits_shape_is_class_count() {
        for arm in [Arm::Full, Arm::PointOnly, Arm::ViewOnly, Arm::LateFusion] {
            let cfg = tiny_config(arm);
            let store = ParamStore::<f32>::init(&cfg, 1).unwrap();
            let (pts, g, views) = random_input(2, 16, 3, 16);
            let tape = Tape::<f32>::new();
            let staged = store.stage(&tape, false, false).unwrap();
            let input = stage_input(
                &tape,
                arm,
                Some((&pts, 16)),
                Some(&g),
                Some((&views, 3, 16, 16)),
            )
            .unwrap();
            let out = forward(&cfg, &staged, &input, MaskMode::Learned).unwrap();
            assert_eq!(out.logits.shape(), &[1, 4], "{}", arm.name());
            assert_eq!(out.retrieval.shape(), &[1, 9], "{}", arm.name());
            assert_eq!(out.masks.len(), if arm.has_masks() { 2 } else { 0 });
            assert_eq!(out.orth_penalty.is_some(), arm.has_point_branch());
        }
    }

    #[test]
    fn point_permutation_leaves_logits_unchanged() {
        assert_eq!(full_logits(11, false, false), full_logits(11, true, false));
    }

    #[test]
    fn view_permutation_leaves_logits_unchanged() {
        assert_eq!(full_logits(12, false, false), full_logits(12, false, true));
    }

    #[test]
    fn registry_contents_follow_the_arm() {
        let full = ParamStore::<f32>::init(&tiny_config(Arm::Full), 3).unwrap();
        let names: Vec<&str> = full.entries().iter().map(|e| e.name.as_str()).collect();
        assert!(names.contains(&"fusion1.mlp.w1"));
        assert!(names.contains(&"view.fc.weight"));
        assert!(names.contains(&"embed.weight"));
        let unique: std::collections::BTreeSet<&str> = names.iter().copied().collect();
        assert_eq!(unique.len(), names.len(), "names must be unique");
        let fc_layers: Vec<&&str> = names.iter().filter(|n| n.starts_with("head.fc")).collect();
        assert_eq!(fc_layers.len(), 6, "exactly three FC layers (weight+bias each)");

        let late = ParamStore::<f32>::init(&tiny_config(Arm::LateFusion), 3).unwrap();
        assert!(late.entries().iter().all(|e| !e.name.contains(".mlp.")));
        assert!(late.get("point.conv3.weight").is_some());

        let point = ParamStore::<f32>::init(&tiny_config(Arm::PointOnly), 3).unwrap();
        assert!(point
            .entries()
            .iter()
            .all(|e| !e.name.starts_with("view.") && !e.name.starts_with("embed.")));

        let view = ParamStore::<f32>::init(&tiny_config(Arm::ViewOnly), 3).unwrap();
        assert!(view.entries().iter().all(|e| !e.name.starts_with("point.")));
        let head_out = view.get("head.fc3.weight").unwrap();
        assert_eq!(head_out.shape, vec![9, 4]);
    }

    #[test]
    fn shared_names_initialize_identically_across_arms() {
        let full = ParamStore::<f32>::init(&tiny_config(Arm::Full), 9).unwrap();
        let point = ParamStore::<f32>::init(&tiny_config(Arm::PointOnly), 9).unwrap();
        let shared = point.get("point.conv2.weight").unwrap();
        let from_full = full.get("point.conv2.weight").unwrap();
        assert_eq!(shared.data, from_full.data);
    }

    #[test]
    fn same_seed_reinitializes_bitwise() {
        let a = ParamStore::<f32>::init(&tiny_config(Arm::Full), 21).unwrap();
        let b = ParamStore::<f32>::init(&tiny_config(Arm::Full), 21).unwrap();
        let c = ParamStore::<f32>::init(&tiny_config(Arm::Full), 22).unwrap();
        let bits = |s: &ParamStore<f32>| -> Vec<u32> {
            s.entries().iter().flat_map(|e| e.data.iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn masked_zero_full_arm_equals_late_fusion_with_shared_weights() {
        let full_cfg = tiny_config(Arm::Full);
        let late_cfg = tiny_config(Arm::LateFusion);
        let full_store = ParamStore::<f32>::init(&full_cfg, 31).unwrap();
        let mut late_store = ParamStore::<f32>::init(&late_cfg, 31).unwrap();
        late_store.copy_shared_from(&full_store);
        let (pts, g, views) = random_input(32, 18, 3, 16);

        let run = |cfg: &ModelConfig, store: &ParamStore<f32>, mode: MaskMode| -> Vec<u32> {
            let tape = Tape::<f32>::new();
            let staged = store.stage(&tape, false, false).unwrap();
            let input = stage_input(
                &tape,
                cfg.arm,
                Some((&pts, 18)),
                Some(&g),
                Some((&views, 3, 16, 16)),
            )
            .unwrap();
            let out = forward(cfg, &staged, &input, mode).unwrap();
            out.logits.to_vec().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(
            run(&full_cfg, &full_store, MaskMode::ForceZero),
            run(&late_cfg, &late_store, MaskMode::Learned)
        );
    }

    #[test]
    fn freeze_staging_drops_view_gradients_only() {
        let cfg = tiny_config(Arm::Full);
        let store = ParamStore::<f32>::init(&cfg, 5).unwrap();
        let (pts, g, views) = random_input(6, 12, 2, 16);
        let tape = Tape::<f32>::new();
        let staged = store.stage(&tape, true, true).unwrap();
        let input =
            stage_input(&tape, cfg.arm, Some((&pts, 12)), Some(&g), Some((&views, 2, 16, 16)))
                .unwrap();
        let out = forward(&cfg, &staged, &input, MaskMode::Learned).unwrap();
        out.logits.softmax_cross_entropy(&[1]).unwrap().backward().unwrap();
        let grads = staged.gradients(&store);
        for (entry, grad) in store.entries().iter().zip(&grads) {
            if entry.group == ParamGroup::ViewCnn {
                assert!(grad.is_none(), "{} should be frozen", entry.name);
            } else {
                assert!(grad.is_some(), "{} should have a gradient", entry.name);
            }
        }
    }

    /// Generic random parameter values for FD checks. The deterministic
    /// init is degenerate there: zero biases put relu pre-activations
    /// exactly on the kink whenever an input patch is all relu-zeroed.
    pub(crate) fn random_param_values(
        store: &ParamStore<f64>,
        seed: u64,
    ) -> Vec<(Vec<usize>, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        store
            .entries()
            .iter()
            .map(|e| {
                let lim = if e.shape[0] > 1 { (6.0 / e.shape[0] as f64).sqrt() } else { 0.3 };
                let data = (0..e.data.len()).map(|_| rng.gen_range(-lim..lim)).collect();
                (e.shape.clone(), data)
            })
            .collect()
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        // 8-point, 2-view toy model at 64-bit: the end-to-end check.
        let cfg = tiny_config(Arm::Full);
        let store = ParamStore::<f64>::init(&cfg, 41).unwrap();
        let (pts, g, views) = random_input(42, 8, 2, 16);
        let names: Vec<String> = store.entries().iter().map(|e| e.name.clone()).collect();
        let inputs = random_param_values(&store, 41);
        let cfg_in = cfg.clone();
        let build = move |tape: &Tape<f64>, p: &[Tensor<f64>]| -> Result<Tensor<f64>> {
            let map: BTreeMap<String, Tensor<f64>> =
                names.iter().cloned().zip(p.iter().cloned()).collect();
            let staged = Staged { map };
            let input = stage_input(
                tape,
                cfg_in.arm,
                Some((&pts, 8)),
                Some(&g),
                Some((&views, 2, 16, 16)),
            )?;
            let out = forward(&cfg_in, &staged, &input, MaskMode::Learned)?;
            let ce = out.logits.softmax_cross_entropy(&[2])?;
            let orth = out.orth_penalty.expect("point branch present");
            ce.add(&orth.scale(1e-3))
        };
        // eps an order under the op-level checks: deep composition puts
        // some relu pre-activation near zero for any fixed draw, and the
        // smaller step keeps central differences on one side of the kink.
        let rel = grad_check(&build, &inputs, 1e-6).unwrap();
        assert!(rel < 1e-4, "rel err {rel}");
    }

    #[test]
    #[ignore = "diagnostic: per-parameter FD error localization"]
    fn fd_error_by_parameter() {
        let cfg = tiny_config(Arm::Full);
        let store = ParamStore::<f64>::init(&cfg, 41).unwrap();
        let (pts, g, views) = random_input(42, 8, 2, 16);
        let names: Vec<String> = store.entries().iter().map(|e| e.name.clone()).collect();
        let all: Vec<(Vec<usize>, Vec<f64>)> =
            store.entries().iter().map(|e| (e.shape.clone(), e.data.clone())).collect();
        for (i, name) in names.iter().enumerate() {
            let names2 = names.clone();
            let cfg_in = cfg.clone();
            let pts = pts.clone();
            let g = g.clone();
            let views = views.clone();
            let all2 = all.clone();
            let target = i;
            let build = move |tape: &Tape<f64>, p: &[Tensor<f64>]| -> Result<Tensor<f64>> {
                let mut map = BTreeMap::new();
                for (j, (shape, data)) in all2.iter().enumerate() {
                    let t = if j == target {
                        p[0].clone()
                    } else {
                        tape.constant(shape, data.clone())?
                    };
                    map.insert(names2[j].clone(), t);
                }
                let staged = Staged { map };
                let input = stage_input(
                    tape,
                    cfg_in.arm,
                    Some((&pts, 8)),
                    Some(&g),
                    Some((&views, 2, 16, 16)),
                )?;
                let out = forward(&cfg_in, &staged, &input, MaskMode::Learned)?;
                let ce = out.logits.softmax_cross_entropy(&[2])?;
                let orth = out.orth_penalty.expect("point branch present");
                ce.add(&orth.scale(1e-3))
            };
            let one = vec![all[i].clone()];
            let rel = grad_check(&build, &one, 1e-5).unwrap();
            println!("{name:28} rel {rel:.3e}");
        }
    }
}
