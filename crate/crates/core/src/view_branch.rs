//! Multi-view branch: one small CNN shared across every view, then
//! channelwise max pooling over views.

use crate::error::{Error, Result};
use crate::geometry::ViewSet;
use crate::point_branch::global_max_rows;
use crate::tensor::{Element, Tensor};

/// One parameter set serves every view; there is no per-view state.
#[derive(Debug, Clone)]
pub struct ViewCnnParams<E: Element> {
    pub conv1_w: Tensor<E>,
    pub conv1_b: Tensor<E>,
    pub conv2_w: Tensor<E>,
    pub conv2_b: Tensor<E>,
    pub fc_w: Tensor<E>,
    pub fc_b: Tensor<E>,
}

pub const CONV1_K: usize = 5;
pub const CONV2_K: usize = 3;
pub const CONV_STRIDE: usize = 2;

/// Per-view features `(V, D)`: conv 5x5/2, ReLU, conv 3x3/2, ReLU, global
/// average, FC. Row v depends only on view v.
pub fn view_cnn_forward<E: Element>(
    views: &Tensor<E>,
    params: &ViewCnnParams<E>,
) -> Result<Tensor<E>> {
    if views.rank() != 4 {
        return Err(Error::dim(format!(
            "view stack must be (V,H,W,1), got {:?}",
            views.shape()
        )));
    }
    let v = views.shape()[0];
    let a = views
        .conv2d(&params.conv1_w, &params.conv1_b, CONV1_K, CONV1_K, CONV_STRIDE)?
        .relu();
    let b = a.conv2d(&params.conv2_w, &params.conv2_b, CONV2_K, CONV2_K, CONV_STRIDE)?.relu();
    let (ho, wo, c) = (b.shape()[1], b.shape()[2], b.shape()[3]);
    let pooled = b
        .reshape(&[v, ho * wo, c])?
        .reduce_sum(1)?
        .scale(E::one() / E::from_f64((ho * wo) as f64));
    pooled.matmul(&params.fc_w)?.add(&params.fc_b)
}

/// Channelwise max over views, `(V, D)` to `(1, D)`.
pub fn view_pool<E: Element>(features: &Tensor<E>) -> Result<Tensor<E>> {
    if features.rank() != 2 {
        return Err(Error::dim(format!(
            "view pooling needs (V,D) features, got {:?}",
            features.shape()
        )));
    }
    global_max_rows(features)
}

/// Evenly strided subset of a rendered ring, preserving azimuth order.
/// `wanted` must divide the stored count.
pub fn subsample_views(views: &ViewSet, wanted: usize) -> Result<ViewSet> {
    if wanted == 0 || views.count % wanted != 0 {
        return Err(Error::domain(format!(
            "{wanted} views is not an even subdivision of a {}-view ring",
            views.count
        )));
    }
    let stride = views.count / wanted;
    let plane = views.height * views.width;
    let mut pixels = Vec::with_capacity(wanted * plane);
    let mut poses = Vec::with_capacity(wanted);
    for i in (0..views.count).step_by(stride) {
        pixels.extend_from_slice(views.view(i));
        poses.push(views.poses[i]);
    }
    Ok(ViewSet { pixels, count: wanted, height: views.height, width: views.width, poses })
}
