//! Occupancy estimation, spectrum analysis and the linear probe.

mod occupancy;
mod probe;
mod report;
mod spectrum;

pub use occupancy::{masked_scores, occupancy_auc, occupancy_estimate, roc_auc, SimilarityMap};
pub use probe::{cell_object_labels, linear_probe, ProbeConfig, ProbeResult};
pub use report::{emit_report, read_spectrum_csv, ReportSummary};
pub use spectrum::{jacobi_svd, svd_spectrum, SpectrumReport};

use adljepa_autodiff::Tape;

use crate::bev::voxelize;
use crate::dataset::Dataset;
use crate::masking::{partition_points, sample_mask, BevMaskPlan, MaskOptions};
use crate::model::{apply_tokens, encode_bev, predict, stack_features, ModelState, ParamVars};
use crate::rng::{mix_key, Stream};
use crate::trainer::rows;
use crate::{CoreError, Result};

/// Context-branch outputs for one scene, each a row-major `[H·W, E]` block.
#[derive(Debug, Clone)]
pub struct SceneEval {
    pub z_hat_c: Vec<f64>,
    pub s_hat_c: Vec<f64>,
    pub plan: BevMaskPlan,
}

const EVAL_BATCH: usize = 8;

/// Runs context encoder, token replacement and predictor without gradients.
pub fn evaluate_scenes(
    model: &ModelState,
    dataset: &Dataset,
    scenes: &[usize],
    plans: Vec<BevMaskPlan>,
) -> Result<Vec<SceneEval>> {
    if dataset.grid != model.config.grid {
        return Err(CoreError::Shape(format!(
            "model grid {:?} differs from dataset grid {:?}",
            model.config.grid.dims, dataset.grid.dims
        )));
    }
    if plans.len() != scenes.len() {
        return Err(CoreError::Contract("one plan per scene required".into()));
    }
    let grid = &model.config.grid;
    let e = model.embed_dim();
    let hw = grid.bev_cells();
    let mut out = Vec::with_capacity(scenes.len());
    for (chunk, plan_chunk) in scenes.chunks(EVAL_BATCH).zip(plans.chunks(EVAL_BATCH)) {
        let feats = chunk
            .iter()
            .zip(plan_chunk)
            .map(|(&i, plan)| {
                let (xc, _) = partition_points(&dataset.scenes[i].cloud, plan, grid)?;
                voxelize(&xc, grid)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let params = ParamVars::record(&mut tape, model, false);
        let x = tape.constant(stack_features(&feats.iter().collect::<Vec<_>>())?);
        let z_c = encode_bev(&mut tape, &params.context, x)?;
        let (z_hat, _) = apply_tokens(&mut tape, z_c, z_c, plan_chunk, &params, &model.config)?;
        let s_hat = predict(&mut tape, &params.predictor, z_hat)?;
        let (zv, sv) = (tape.value(z_hat).data(), tape.value(s_hat).data());
        for (b, plan) in plan_chunk.iter().enumerate() {
            out.push(SceneEval {
                z_hat_c: zv[b * hw * e..(b + 1) * hw * e].to_vec(),
                s_hat_c: sv[b * hw * e..(b + 1) * hw * e].to_vec(),
                plan: plan.clone(),
            });
        }
    }
    Ok(out)
}

pub fn unmasked_plans(dataset: &Dataset, scenes: &[usize]) -> Vec<BevMaskPlan> {
    scenes
        .iter()
        .map(|&i| BevMaskPlan::unmasked(dataset.scenes[i].occupancy.clone()))
        .collect()
}

/// Evaluation masks, keyed independently of any training run.
pub fn eval_plans(dataset: &Dataset, scenes: &[usize], opts: MaskOptions, seed: u64) -> Result<Vec<BevMaskPlan>> {
    scenes
        .iter()
        .map(|&i| {
            sample_mask(
                &dataset.scenes[i].occupancy,
                opts,
                mix_key(Stream::Mask, &[seed, u64::MAX, i as u64]),
            )
        })
        .collect()
}

/// Context embeddings of every non-empty cell with nothing masked, pooled
/// over `scenes`, as `(rows, row count)`.
pub fn non_empty_context_embeddings(model: &ModelState, dataset: &Dataset, scenes: &[usize]) -> Result<(Vec<f64>, usize)> {
    let e = model.embed_dim();
    let evals = evaluate_scenes(model, dataset, scenes, unmasked_plans(dataset, scenes))?;
    let mut out = Vec::new();
    for ev in &evals {
        out.extend(rows(&ev.z_hat_c, 0, &ev.plan.k, e));
    }
    let m = out.len() / e;
    Ok((out, m))
}

/// Similarity maps of masked cells under evaluation masks.
pub fn occupancy_maps(
    model: &ModelState,
    dataset: &Dataset,
    scenes: &[usize],
    opts: MaskOptions,
    seed: u64,
) -> Result<(Vec<SimilarityMap>, Vec<BevMaskPlan>)> {
    let plans = eval_plans(dataset, scenes, opts, seed)?;
    let evals = evaluate_scenes(model, dataset, scenes, plans.clone())?;
    let maps = evals
        .iter()
        .map(|ev| occupancy_estimate(&ev.s_hat_c, model.tokens.empty.data(), &ev.plan))
        .collect::<Result<_>>()?;
    Ok((maps, plans))
}

/// Probe inputs: context embeddings and object labels of non-empty cells.
pub fn probe_examples(model: &ModelState, dataset: &Dataset, scenes: &[usize]) -> Result<(Vec<f64>, Vec<bool>)> {
    let e = model.embed_dim();
    let evals = evaluate_scenes(model, dataset, scenes, unmasked_plans(dataset, scenes))?;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (ev, &i) in evals.iter().zip(scenes) {
        let scene = &dataset.scenes[i];
        let ann = scene
            .annotation
            .as_ref()
            .ok_or_else(|| CoreError::Config(format!("scene {} has no annotation", scene.cloud.scene_id)))?;
        let labels = cell_object_labels(&scene.cloud, ann, &dataset.grid)?;
        x.extend(rows(&ev.z_hat_c, 0, &ev.plan.k, e));
        y.extend(ev.plan.k.iter().map(|&c| labels[c]));
    }
    Ok((x, y))
}

/// Per-scene and pooled spreads of unmasked non-empty context embeddings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpreadSummary {
    pub per_scene_mean: f64,
    pub pooled: f64,
}

pub fn context_spread(model: &ModelState, dataset: &Dataset, scenes: &[usize]) -> Result<SpreadSummary> {
    let e = model.embed_dim();
    let evals = evaluate_scenes(model, dataset, scenes, unmasked_plans(dataset, scenes))?;
    let mut per = Vec::new();
    let mut pooled = Vec::new();
    for ev in &evals {
        let r = rows(&ev.z_hat_c, 0, &ev.plan.k, e);
        if let Some(s) = crate::model::embedding_spread(&r, e) {
            per.push(s);
        }
        pooled.extend(r);
    }
    Ok(SpreadSummary {
        per_scene_mean: if per.is_empty() { 0.0 } else { per.iter().sum::<f64>() / per.len() as f64 },
        pooled: crate::model::embedding_spread(&pooled, e).unwrap_or(0.0),
    })
}
