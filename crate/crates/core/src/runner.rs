//! Subcommand implementations: everything the command line can do, as
//! library calls writing their artifacts under an output directory.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::{self, Dataset, PrepReport, Split};
use crate::error::{Error, Result};
use crate::fusion::MaskMode;
use crate::metrics::{map_score, pr_curve_11pt};
use crate::model::{forward, stage_input, Arm, ModelConfig, ParamStore};
use crate::tensor::{grad_check, pvt1, standard_op_checks, Tape};
use crate::train::{evaluate, model_inputs, train, write_metrics_csv, ModelInput};

/// Generate the synthetic corpus named by the config and write its
/// manifest; `data_dir`'s parent holds the meshes.
pub fn cmd_synth(
    cfg: &RunConfig,
    out: &Path,
    train_per_class: usize,
    test_per_class: usize,
) -> Result<PathBuf> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let manifest = dataset::synth::synth_corpus(out, train_per_class, test_per_class, cfg.train.seed)?;
    log::info!("wrote {}", manifest.display());
    Ok(manifest)
}

/// Preprocess the manifest into the cache. Failures are per-shape; the
/// caller decides the exit status from the report.
pub fn cmd_prep(cfg: &RunConfig, out: &Path) -> Result<PrepReport> {
    cfg.validate()?;
    let manifest_path = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| Error::config("prep needs a manifest path in the config"))?;
    let entries = dataset::read_manifest(manifest_path)?;
    let report = dataset::prep_cache(&entries, &cfg.data_dir, &cfg.prep)?;
    fs::create_dir_all(out)?;
    cfg.echo(out)?;
    let summary = serde_json::json!({
        "prepped": report.prepped,
        "skipped": report.skipped,
        "failures": report.failures.iter().map(|(id, why)| {
            serde_json::json!({"id": id, "reason": why})
        }).collect::<Vec<_>>(),
    });
    fs::write(out.join("prep.report.json"), serde_json::to_string_pretty(&summary)?)?;
    for (id, why) in &report.failures {
        log::error!("prep failed for {id}: {why}");
    }
    Ok(report)
}

pub struct TrainArtifacts {
    pub last: PathBuf,
    pub best: PathBuf,
    pub metrics: PathBuf,
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let ds = Dataset::load(&cfg.data_dir)?;
    let resume = match resume {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            checkpoint::check_compatible(&ck, cfg)?;
            Some(ck)
        }
        None => None,
    };
    fs::create_dir_all(out)?;
    cfg.echo(out)?;
    let output = train(cfg, &ds, resume)?;
    let artifacts = TrainArtifacts {
        last: out.join("checkpoint.ckpt"),
        best: out.join("best.ckpt"),
        metrics: out.join("metrics.csv"),
    };
    checkpoint::save(&artifacts.last, &output.last)?;
    checkpoint::save(&artifacts.best, &output.best)?;
    write_metrics_csv(&artifacts.metrics, &output.history)?;
    if output.stopped_early {
        log::info!("stopped early after {} epochs", output.history.len());
    }
    Ok(artifacts)
}

fn load_for_eval(cfg: &RunConfig, ckpt: &Path) -> Result<(Checkpoint, Dataset)> {
    let ck = checkpoint::load(ckpt)?;
    checkpoint::check_compatible(&ck, cfg)?;
    let ds = Dataset::load(&cfg.data_dir)?;
    Ok((ck, ds))
}

#[derive(Debug, Serialize)]
pub struct EvalSummary {
    pub overall: f64,
    pub mean_class: f64,
    pub n_shapes: usize,
    pub confusion: Vec<Vec<usize>>,
    pub excluded_classes: Vec<usize>,
}

pub fn cmd_eval(cfg: &RunConfig, ckpt: &Path, out: &Path) -> Result<EvalSummary> {
    cfg.validate()?;
    let (ck, ds) = load_for_eval(cfg, ckpt)?;
    let inputs = model_inputs(&ds, cfg, Split::Test)?;
    let eval = evaluate(cfg, &ck.params, &inputs, MaskMode::Learned)?;
    let summary = EvalSummary {
        overall: eval.metrics.overall,
        mean_class: eval.metrics.mean_class,
        n_shapes: inputs.len(),
        confusion: eval.metrics.confusion.clone(),
        excluded_classes: eval.metrics.excluded_classes.clone(),
    };
    fs::create_dir_all(out)?;
    cfg.echo(out)?;
    fs::write(out.join("eval.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

#[derive(Debug, Serialize)]
pub struct RetrievalSummary {
    pub map: f64,
    pub n_queries: usize,
    pub feature_width: usize,
}

pub fn cmd_retrieve(cfg: &RunConfig, ckpt: &Path, out: &Path) -> Result<RetrievalSummary> {
    cfg.validate()?;
    let (ck, ds) = load_for_eval(cfg, ckpt)?;
    let inputs = model_inputs(&ds, cfg, Split::Test)?;
    let eval = evaluate(cfg, &ck.params, &inputs, MaskMode::Learned)?;
    let map = map_score(&eval.features, &eval.labels)?;

    fs::create_dir_all(out)?;
    cfg.echo(out)?;
    let width = cfg.model.retrieval_width();
    let flat: Vec<f32> =
        eval.features.iter().flat_map(|row| row.iter().map(|&v| v as f32)).collect();
    let mut f = fs::File::create(out.join("features.pvt1"))?;
    pvt1::write(&mut f, &[inputs.len(), width], &flat)?;

    // Per-query relevance in ranked order, for the averaged curve.
    let rankings: Vec<Vec<bool>> = eval
        .features
        .iter()
        .enumerate()
        .filter_map(|(q, feat)| {
            let ranked = crate::metrics::retrieve(feat, &eval.features, Some(q)).ok()?;
            let rel: Vec<bool> = ranked.iter().map(|&i| eval.labels[i] == eval.labels[q]).collect();
            rel.iter().any(|&r| r).then_some(rel)
        })
        .collect();
    let curve = pr_curve_11pt(&rankings)?;
    let mut f = fs::File::create(out.join("pr_curve.csv"))?;
    writeln!(f, "recall,precision")?;
    for p in &curve {
        writeln!(f, "{:.1},{:.6}", p.recall, p.precision)?;
    }

    let summary =
        RetrievalSummary { map, n_queries: rankings.len(), feature_width: width };
    fs::write(out.join("retrieval.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmScore {
    pub arm: String,
    pub overall: f64,
    pub mean_class: f64,
}

/// Train and score every ablation arm under the shared config and seed.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<Vec<ArmScore>> {
    cfg.validate()?;
    let ds = Dataset::load(&cfg.data_dir)?;
    fs::create_dir_all(out)?;
    cfg.echo(out)?;
    let mut scores = Vec::new();
    for arm in [Arm::Full, Arm::LateFusion, Arm::PointOnly, Arm::ViewOnly] {
        let mut arm_cfg = cfg.clone();
        arm_cfg.model.arm = arm;
        let output = train(&arm_cfg, &ds, None)?;
        let inputs = model_inputs(&ds, &arm_cfg, Split::Test)?;
        let eval = evaluate(&arm_cfg, &output.last.params, &inputs, MaskMode::Learned)?;
        log::info!("arm {}: overall {:.3}", arm.name(), eval.metrics.overall);
        checkpoint::save(&out.join(format!("{}.ckpt", arm.name())), &output.last)?;
        scores.push(ArmScore {
            arm: arm.name().to_string(),
            overall: eval.metrics.overall,
            mean_class: eval.metrics.mean_class,
        });
    }
    let mut f = fs::File::create(out.join("ablation.csv"))?;
    writeln!(f, "arm,overall,mean_class")?;
    for s in &scores {
        writeln!(f, "{},{:.6},{:.6}", s.arm, s.overall, s.mean_class)?;
    }
    Ok(scores)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    /// `points:128` or `views:4`.
    pub level: String,
    pub overall: f64,
    pub mean_class: f64,
}

pub const SWEEP_POINT_LEVELS: [usize; 6] = [128, 256, 384, 512, 768, 1024];
pub const SWEEP_VIEW_LEVELS: [usize; 3] = [4, 8, 12];

/// Evaluate one trained model across reduced test-time point and view
/// budgets.
pub fn cmd_sweep(cfg: &RunConfig, ckpt: &Path, out: &Path) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let (ck, ds) = load_for_eval(cfg, ckpt)?;
    let arm = cfg.model.arm;
    let mut rows = Vec::new();
    let score = |eval_cfg: &RunConfig| -> Result<(f64, f64)> {
        let inputs = model_inputs(&ds, eval_cfg, Split::Test)?;
        let eval = evaluate(eval_cfg, &ck.params, &inputs, MaskMode::Learned)?;
        Ok((eval.metrics.overall, eval.metrics.mean_class))
    };
    if arm.has_point_branch() {
        for level in SWEEP_POINT_LEVELS {
            if level > cfg.prep.n_points || level <= cfg.model.k {
                continue;
            }
            let mut eval_cfg = cfg.clone();
            eval_cfg.train.n_points = Some(level);
            let (overall, mean_class) = score(&eval_cfg)?;
            rows.push(SweepRow { level: format!("points:{level}"), overall, mean_class });
        }
    }
    if arm.has_view_branch() {
        for level in SWEEP_VIEW_LEVELS {
            if level > cfg.prep.n_views || cfg.prep.n_views % level != 0 {
                continue;
            }
            let mut eval_cfg = cfg.clone();
            eval_cfg.train.n_views = Some(level);
            let (overall, mean_class) = score(&eval_cfg)?;
            rows.push(SweepRow { level: format!("views:{level}"), overall, mean_class });
        }
    }
    if rows.is_empty() {
        return Err(Error::config("no sweep level fits the cached corpus"));
    }
    fs::create_dir_all(out)?;
    cfg.echo(out)?;
    let mut f = fs::File::create(out.join("sweep.csv"))?;
    writeln!(f, "level,overall,mean_class")?;
    for r in &rows {
        writeln!(f, "{},{:.6},{:.6}", r.level, r.overall, r.mean_class)?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Finite-difference verification of every op and of the composed model,
/// at 64-bit. Returns one row per check.
pub fn cmd_gradcheck(out: &Path) -> Result<Vec<GradCheckRow>> {
    const TOL: f64 = 1e-4;
    let mut rows = Vec::new();
    for check in standard_op_checks() {
        let mut worst = 0.0f64;
        for seed in [11, 29] {
            let inputs = check.draw_inputs(seed);
            let rel = grad_check(&|t, p| (check.build)(t, p), &inputs, 1e-5)?;
            worst = worst.max(rel);
        }
        rows.push(GradCheckRow { name: format!("op:{}", check.name), max_rel_err: worst, pass: worst < TOL });
    }
    let (name, worst) = model_fd_check(&[3, 5], 1e-6)?;
    rows.push(GradCheckRow { name, max_rel_err: worst, pass: worst < TOL });

    fs::create_dir_all(out)?;
    let mut f = fs::File::create(out.join("gradcheck.csv"))?;
    writeln!(f, "name,max_rel_err,pass")?;
    for r in &rows {
        writeln!(f, "{},{:.3e},{}", r.name, r.max_rel_err, r.pass)?;
    }
    Ok(rows)
}

/// FD check of the full composed model at toy size over the given seeds;
/// parameters drawn randomly (the deterministic init sits exactly on relu
/// kinks). Returns the check name and worst relative error.
pub fn model_fd_check(seeds: &[u64], eps: f64) -> Result<(String, f64)> {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    let cfg = ModelConfig {
        arm: Arm::Full,
        n_classes: 4,
        k: 3,
        edge_widths: [4, 4, 6, 8],
        st_widths: [6, 8, 6],
        view_channels: [2, 3],
        view_dim: 5,
        embed_dim: 4,
        fc_widths: [10, 9],
    };
    let store = ParamStore::<f64>::init(&cfg, 0)?;
    let names: Vec<String> = store.entries().iter().map(|e| e.name.clone()).collect();
    let mut worst = 0.0f64;
    for &seed in seeds {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = 8usize;
        let pts: Vec<f32> = (0..n * 3).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let rows: Vec<f64> = pts.iter().map(|&x| x as f64).collect();
        let g = crate::point_branch::knn_from_rows(&rows, n, 3, cfg.k)?;
        let views: Vec<f32> = (0..2 * 16 * 16).map(|_| rng.gen_range(0.0f32..1.0)).collect();
        let inputs: Vec<(Vec<usize>, Vec<f64>)> = store
            .entries()
            .iter()
            .map(|e| {
                let lim = if e.shape[0] > 1 { (6.0 / e.shape[0] as f64).sqrt() } else { 0.3 };
                let data = (0..e.data.len()).map(|_| rng.gen_range(-lim..lim)).collect();
                (e.shape.clone(), data)
            })
            .collect();
        let cfg_in = cfg.clone();
        let names_in = names.clone();
        let build = move |tape: &Tape<f64>, p: &[crate::tensor::Tensor<f64>]| {
            let staged = crate::model::Staged::from_named(
                names_in.iter().cloned().zip(p.iter().cloned()),
            );
            let input = stage_input(tape, cfg_in.arm, Some((&pts, n)), Some(&g), Some((&views, 2, 16, 16)))?;
            let out = forward(&cfg_in, &staged, &input, MaskMode::Learned)?;
            let ce = out.logits.softmax_cross_entropy(&[seed as usize % 4])?;
            ce.add(&out.orth_penalty.expect("point branch present").scale(1e-3))
        };
        let rel = grad_check(&build, &inputs, eps)?;
        worst = worst.max(rel);
    }
    Ok(("model:full".to_string(), worst))
}

#[derive(Debug, Serialize)]
struct MaskSidecar {
    shape_id: String,
    block: usize,
    n_points: usize,
    channels: usize,
    file: PathBuf,
}

/// Write the learned attention masks of every test shape, one tensor per
/// fusion block, with a JSON sidecar describing the records.
pub fn cmd_dump_masks(cfg: &RunConfig, ckpt: &Path, out: &Path) -> Result<usize> {
    cfg.validate()?;
    if !cfg.model.arm.has_masks() {
        return Err(Error::config(format!(
            "arm {} has no attention masks to dump",
            cfg.model.arm.name()
        )));
    }
    let (ck, ds) = load_for_eval(cfg, ckpt)?;
    let inputs = model_inputs(&ds, cfg, Split::Test)?;
    let mask_dir = out.join("masks");
    fs::create_dir_all(&mask_dir)?;
    cfg.echo(out)?;
    let mut sidecars = Vec::new();
    for input in &inputs {
        let tape = Tape::<f32>::new();
        let staged = ck.params.stage(&tape, false, false)?;
        let tape_input = stage_input(
            &tape,
            cfg.model.arm,
            Some((&input.points, input.n_points)),
            input.nbrs.as_ref(),
            Some((&input.views, input.n_views, input.view_size, input.view_size)),
        )?;
        let fwd = forward(&cfg.model, &staged, &tape_input, MaskMode::Learned)?;
        for (b, mask) in fwd.masks.iter().enumerate() {
            let shape = mask.shape().to_vec();
            let file = PathBuf::from(format!("{}_block{}.pvt1", input.id, b + 1));
            let mut f = fs::File::create(mask_dir.join(&file))?;
            pvt1::write(&mut f, &shape, &mask.to_vec())?;
            sidecars.push(MaskSidecar {
                shape_id: input.id.clone(),
                block: b + 1,
                n_points: shape[0],
                channels: shape[1],
                file,
            });
        }
    }
    let count = sidecars.len();
    fs::write(mask_dir.join("index.json"), serde_json::to_string_pretty(&sidecars)?)?;
    Ok(count)
}

/// Inputs rebuilt at a reduced point budget, for sweep-style scoring.
pub fn inputs_at_points(cfg: &RunConfig, ds: &Dataset, level: usize) -> Result<Vec<ModelInput>> {
    let mut eval_cfg = cfg.clone();
    eval_cfg.train.n_points = Some(level);
    model_inputs(ds, &eval_cfg, Split::Test)
}
