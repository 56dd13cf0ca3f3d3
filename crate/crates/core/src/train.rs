//! Training loop: alternating two-phase schedule, batched gradient
//! averaging over shapes, SGD with momentum or Adam under cosine decay,
//! and in-loop accuracy tracking.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, MomentBuffer};
use crate::config::{OptimizerKind, RunConfig};
use crate::dataset::{shape_seed, Dataset, PreppedShape, Split};
use crate::error::{Error, Result};
use crate::fusion::MaskMode;
use crate::metrics::{classify_metrics, ClassMetrics};
use crate::model::{forward, stage_input, ModelConfig, ParamStore, Staged};
use crate::point_branch::{knn_from_rows, NeighborIndex};
use crate::tensor::{Element, Tape};

/// One shape, subsampled and graph-built, ready to stage onto a tape.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub id: String,
    pub label: usize,
    /// Row-major `n_points x 3`; empty for the view-only arm.
    pub points: Vec<f32>,
    pub n_points: usize,
    pub nbrs: Option<NeighborIndex>,
    /// Row-major `n_views x H x W`; empty for the point-only arm.
    pub views: Vec<f32>,
    pub n_views: usize,
    pub view_size: usize,
}

/// Keep every `stride`-th view so the kept ring stays evenly spaced.
fn stride_views(flat: &[f32], count: usize, plane: usize, wanted: usize) -> Result<Vec<f32>> {
    if wanted == 0 || count % wanted != 0 {
        return Err(Error::domain(format!(
            "cannot keep {wanted} of {count} views at even spacing"
        )));
    }
    let stride = count / wanted;
    let mut out = Vec::with_capacity(wanted * plane);
    for i in 0..wanted {
        let at = i * stride * plane;
        out.extend_from_slice(&flat[at..at + plane]);
    }
    Ok(out)
}

fn input_from_shape(shape: &PreppedShape, cfg: &RunConfig) -> Result<ModelInput> {
    let arm = cfg.model.arm;
    let mut input = ModelInput {
        id: shape.id.clone(),
        label: shape.label,
        points: Vec::new(),
        n_points: 0,
        nbrs: None,
        views: Vec::new(),
        n_views: 0,
        view_size: shape.view_size,
    };
    if arm.has_point_branch() {
        let want = cfg.train.n_points.unwrap_or(shape.n_points);
        let (points, n) = if want == shape.n_points {
            (shape.points.clone(), shape.n_points)
        } else {
            let pc = crate::geometry::PointCloud {
                points: shape.points.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
            };
            let sub = crate::geometry::subsample_points(
                &pc,
                want,
                shape_seed(cfg.train.seed, &shape.id),
            )?;
            (sub.flat(), want)
        };
        let rows: Vec<f64> = points.iter().map(|&v| v as f64).collect();
        input.nbrs = Some(knn_from_rows(&rows, n, 3, cfg.model.k)?);
        input.points = points;
        input.n_points = n;
    }
    if arm.has_view_branch() {
        let want = cfg.train.n_views.unwrap_or(shape.n_views);
        let plane = shape.view_size * shape.view_size;
        input.views = stride_views(&shape.views, shape.n_views, plane, want)?;
        input.n_views = want;
    }
    Ok(input)
}

/// Subsample and graph-build one split. The kNN graph is computed once
/// here and reused across every epoch: it depends only on the raw input
/// coordinates.
pub fn model_inputs(ds: &Dataset, cfg: &RunConfig, split: Split) -> Result<Vec<ModelInput>> {
    let shapes = ds.split(split);
    if shapes.is_empty() {
        return Err(Error::config(format!("{} split is empty", split.name())));
    }
    shapes.par_iter().map(|s| input_from_shape(s, cfg)).collect()
}

fn shape_loss(
    cfg: &ModelConfig,
    staged: &Staged<f32>,
    input: &ModelInput,
    orth_weight: f64,
    mask_mode: MaskMode,
) -> Result<(crate::tensor::Tensor<f32>, usize)> {
    let tape_input = stage_input(
        staged_tape(staged)?,
        cfg.arm,
        cfg.arm.has_point_branch().then_some((input.points.as_slice(), input.n_points)),
        input.nbrs.as_ref(),
        cfg.arm.has_view_branch().then_some((
            input.views.as_slice(),
            input.n_views,
            input.view_size,
            input.view_size,
        )),
    )?;
    let out = forward(cfg, staged, &tape_input, mask_mode)?;
    let pred = argmax_row(&out.logits.to_vec());
    let mut loss = out.logits.softmax_cross_entropy(&[input.label])?;
    if let Some(orth) = out.orth_penalty {
        if orth_weight != 0.0 {
            loss = loss.add(&orth.scale(f32::from_f64(orth_weight)))?;
        }
    }
    Ok((loss, pred))
}

fn staged_tape<E: Element>(staged: &Staged<E>) -> Result<&Tape<E>> {
    staged.any_tape().ok_or_else(|| Error::contract("staged parameter set is empty"))
}

fn argmax_row<E: Element>(row: &[E]) -> usize {
    let mut best = 0usize;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Cosine decay from the base rate toward zero across the run.
fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos())
}

struct OptState {
    kind: OptimizerKind,
    step: usize,
    /// SGD velocity or Adam first moment, one buffer per parameter.
    m: Vec<Vec<f32>>,
    /// Adam second moment; empty for SGD.
    v: Vec<Vec<f32>>,
}

impl OptState {
    fn new(kind: OptimizerKind, store: &ParamStore<f32>) -> OptState {
        let zeros: Vec<Vec<f32>> =
            store.entries().iter().map(|e| vec![0.0; e.data.len()]).collect();
        let v = match kind {
            OptimizerKind::Sgd { .. } => Vec::new(),
            OptimizerKind::Adam { .. } => zeros.clone(),
        };
        OptState { kind, step: 0, m: zeros, v }
    }

    fn from_moments(
        kind: OptimizerKind,
        store: &ParamStore<f32>,
        moments: &[MomentBuffer],
        step: usize,
    ) -> Result<OptState> {
        let mut state = OptState::new(kind, store);
        state.step = step;
        for mb in moments {
            let (slot, param) = mb
                .name
                .split_once(".v.")
                .map(|(s, p)| (format!("{s}.v"), p))
                .or_else(|| mb.name.split_once(".m.").map(|(s, p)| (format!("{s}.m"), p)))
                .ok_or_else(|| {
                    Error::Checkpoint(format!("unrecognized moment name {:?}", mb.name))
                })?;
            let idx = store
                .entries()
                .iter()
                .position(|e| e.name == param)
                .ok_or_else(|| {
                    Error::Checkpoint(format!("moment {:?} has no parameter", mb.name))
                })?;
            if mb.data.len() != store.entries()[idx].data.len() {
                return Err(Error::Checkpoint(format!("moment {:?} has wrong length", mb.name)));
            }
            let target = match (state.kind, slot.as_str()) {
                (OptimizerKind::Sgd { .. }, "sgd.v") => &mut state.m[idx],
                (OptimizerKind::Adam { .. }, "adam.m") => &mut state.m[idx],
                (OptimizerKind::Adam { .. }, "adam.v") => &mut state.v[idx],
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "moment {:?} does not fit optimizer {:?}",
                        mb.name, state.kind
                    )))
                }
            };
            *target = mb.data.clone();
        }
        Ok(state)
    }

    fn to_moments(&self, store: &ParamStore<f32>) -> Vec<MomentBuffer> {
        let mut out = Vec::new();
        match self.kind {
            OptimizerKind::Sgd { .. } => {
                for (e, m) in store.entries().iter().zip(&self.m) {
                    out.push(MomentBuffer { name: format!("sgd.v.{}", e.name), data: m.clone() });
                }
            }
            OptimizerKind::Adam { .. } => {
                for (e, m) in store.entries().iter().zip(&self.m) {
                    out.push(MomentBuffer { name: format!("adam.m.{}", e.name), data: m.clone() });
                }
                for (e, v) in store.entries().iter().zip(&self.v) {
                    out.push(MomentBuffer { name: format!("adam.v.{}", e.name), data: v.clone() });
                }
            }
        }
        out
    }

    fn apply(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Vec<f32>>], lr: f64) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                let mu = momentum as f32;
                let lr = lr as f32;
                for (i, entry) in store.entries_mut().iter_mut().enumerate() {
                    let Some(g) = &grads[i] else { continue };
                    for ((w, v), &gj) in entry.data.iter_mut().zip(&mut self.m[i]).zip(g) {
                        *v = mu * *v + gj;
                        *w -= lr * *v;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as f64;
                let bc1 = 1.0 - beta1.powf(t);
                let bc2 = 1.0 - beta2.powf(t);
                for (i, entry) in store.entries_mut().iter_mut().enumerate() {
                    let Some(g) = &grads[i] else { continue };
                    for (j, w) in entry.data.iter_mut().enumerate() {
                        let gj = g[j] as f64;
                        let m = &mut self.m[i][j];
                        let v = &mut self.v[i][j];
                        *m = (beta1 * *m as f64 + (1.0 - beta1) * gj) as f32;
                        *v = (beta2 * *v as f64 + (1.0 - beta2) * gj * gj) as f32;
                        let mhat = *m as f64 / bc1;
                        let vhat = *v as f64 / bc2;
                        *w -= (lr * mhat / (vhat.sqrt() + eps)) as f32;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// 'A' while the view branch is frozen, 'B' after.
    pub phase: char,
    pub loss: f64,
    pub overall: f64,
    pub mean_class: f64,
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "epoch,phase,loss,overall,mean_class")?;
    for r in rows {
        writeln!(f, "{},{},{:.6},{:.6},{:.6}", r.epoch, r.phase, r.loss, r.overall, r.mean_class)?;
    }
    Ok(())
}

#[derive(Debug)]
pub struct TrainOutput {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub history: Vec<EpochMetrics>,
    pub stopped_early: bool,
}

pub fn train(cfg: &RunConfig, ds: &Dataset, resume: Option<Checkpoint>) -> Result<TrainOutput> {
    cfg.validate()?;
    let inputs = model_inputs(ds, cfg, Split::Train)?;
    let n_classes = cfg.model.n_classes;
    if let Some(bad) = inputs.iter().find(|i| i.label >= n_classes) {
        return Err(Error::config(format!(
            "shape {:?} has label {} but the model has {n_classes} classes",
            bad.id, bad.label
        )));
    }

    let (mut store, mut opt, start_epoch) = match resume {
        Some(ck) => {
            let opt =
                OptState::from_moments(cfg.train.optimizer, &ck.params, &ck.moments, ck.opt_step)?;
            (ck.params, opt, ck.epoch)
        }
        None => {
            let store = ParamStore::<f32>::init(&cfg.model, cfg.train.seed)?;
            let opt = OptState::new(cfg.train.optimizer, &store);
            (store, opt, 0)
        }
    };

    // The freeze exists so the point pathway and fusion can learn against
    // stable view features. An arm without a point pathway has nothing to
    // stabilize for, so it trains single-phase.
    let phase_a = if cfg.model.arm.has_point_branch() { cfg.train.resolved_phase_a() } else { 0 };
    let mut history = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut stopped_early = false;

    let snapshot = |store: &ParamStore<f32>, opt: &OptState, epoch: usize| Checkpoint {
        config: cfg.clone(),
        epoch,
        opt_step: opt.step,
        params: store.clone(),
        moments: opt.to_moments(store),
    };

    for epoch in start_epoch..cfg.train.epochs {
        let in_phase_a = epoch < phase_a;
        let lr = cosine_lr(cfg.train.lr, epoch, cfg.train.epochs);

        let mut order: Vec<usize> = (0..inputs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ (epoch as u64).rotate_left(17));
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }

        let mut loss_sum = 0.0f64;
        let mut truth = Vec::with_capacity(inputs.len());
        let mut preds = Vec::with_capacity(inputs.len());
        for (batch_no, chunk) in order.chunks(cfg.train.batch_size).enumerate() {
            let per_shape: Vec<Result<(f64, usize, Vec<Option<Vec<f32>>>)>> = chunk
                .par_iter()
                .map(|&si| {
                    let input = &inputs[si];
                    let tape = Tape::<f32>::new();
                    let staged = store.stage(&tape, true, in_phase_a)?;
                    let (loss, pred) =
                        shape_loss(&cfg.model, &staged, input, cfg.train.orth_weight, MaskMode::Learned)?;
                    loss.backward()?;
                    Ok((loss.item()? as f64, pred, staged.gradients(&store)))
                })
                .collect();

            let inv = 1.0 / chunk.len() as f32;
            let mut batch_grads: Vec<Option<Vec<f32>>> = vec![None; store.entries().len()];
            for (slot, result) in chunk.iter().zip(per_shape) {
                let (loss, pred, grads) = result?;
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite loss {loss} at epoch {epoch}, batch {batch_no}, \
                         shape {:?} (lr {lr:.3e})",
                        inputs[*slot].id
                    )));
                }
                loss_sum += loss;
                truth.push(inputs[*slot].label);
                preds.push(pred);
                for (acc, g) in batch_grads.iter_mut().zip(grads) {
                    match (acc.as_mut(), g) {
                        (Some(a), Some(g)) => {
                            for (aj, gj) in a.iter_mut().zip(g) {
                                *aj += gj;
                            }
                        }
                        (None, Some(g)) => *acc = Some(g),
                        _ => {}
                    }
                }
            }
            for g in batch_grads.iter_mut().flatten() {
                for gj in g.iter_mut() {
                    *gj *= inv;
                }
            }
            opt.apply(&mut store, &batch_grads, lr);
        }

        let m = classify_metrics(&truth, &preds, n_classes)?;
        let row = EpochMetrics {
            epoch,
            phase: if in_phase_a { 'A' } else { 'B' },
            loss: loss_sum / inputs.len() as f64,
            overall: m.overall,
            mean_class: m.mean_class,
        };
        log::info!(
            "epoch {} phase {} loss {:.4} overall {:.3} mean_class {:.3} lr {:.2e}",
            row.epoch,
            row.phase,
            row.loss,
            row.overall,
            row.mean_class,
            lr
        );
        history.push(row.clone());

        if best.as_ref().map_or(true, |(acc, _)| row.overall > *acc) {
            best = Some((row.overall, snapshot(&store, &opt, epoch + 1)));
        }
        if let Some(stop) = cfg.train.early_stop_overall {
            if row.overall >= stop {
                stopped_early = true;
                break;
            }
        }
    }

    let final_epoch = start_epoch + history.len();
    let last = snapshot(&store, &opt, final_epoch);
    let best = best.map(|(_, ck)| ck).unwrap_or_else(|| last.clone());
    Ok(TrainOutput { last, best, history, stopped_early })
}

pub struct EvalOut {
    pub metrics: ClassMetrics,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    /// One retrieval feature row per shape.
    pub features: Vec<Vec<f64>>,
}

/// Run the model over `inputs` without gradients.
pub fn evaluate(
    cfg: &RunConfig,
    store: &ParamStore<f32>,
    inputs: &[ModelInput],
    mask_mode: MaskMode,
) -> Result<EvalOut> {
    if inputs.is_empty() {
        return Err(Error::config("nothing to evaluate"));
    }
    let rows: Vec<Result<(usize, Vec<f64>)>> = inputs
        .par_iter()
        .map(|input| {
            let tape = Tape::<f32>::new();
            let staged = store.stage(&tape, false, false)?;
            let tape_input = stage_input(
                &tape,
                cfg.model.arm,
                cfg.model.arm.has_point_branch().then_some((input.points.as_slice(), input.n_points)),
                input.nbrs.as_ref(),
                cfg.model.arm.has_view_branch().then_some((
                    input.views.as_slice(),
                    input.n_views,
                    input.view_size,
                    input.view_size,
                )),
            )?;
            let out = forward(&cfg.model, &staged, &tape_input, mask_mode)?;
            let pred = argmax_row(&out.logits.to_vec());
            let feat: Vec<f64> = out.retrieval.to_vec().iter().map(|&v| v as f64).collect();
            Ok((pred, feat))
        })
        .collect();
    let mut predictions = Vec::with_capacity(inputs.len());
    let mut features = Vec::with_capacity(inputs.len());
    for row in rows {
        let (pred, feat) = row?;
        predictions.push(pred);
        features.push(feat);
    }
    let labels: Vec<usize> = inputs.iter().map(|i| i.label).collect();
    let metrics = classify_metrics(&labels, &predictions, cfg.model.n_classes)?;
    Ok(EvalOut { metrics, predictions, labels, features })
}
