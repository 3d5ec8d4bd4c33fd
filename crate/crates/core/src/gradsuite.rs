//! Finite-difference checks of every op and of the whole pre-training loss.

use adljepa_autodiff::gradcheck::{check, GradCheckReport, Tolerance};
use adljepa_autodiff::{opsuite, Tensor};
use rand::Rng;

use crate::bev::{occupancy_of_cloud, voxelize, GridSpec};
use crate::data::{Point, PointCloud, SceneRange};
use crate::masking::{partition_points, sample_mask, BevMaskPlan, MaskOptions};
use crate::model::{forward_with, stack_features, ModelConfig, ModelState, ParamVars};
use crate::rng::{keyed_rng, Stream};
use crate::trainer::{objective, TargetInput, TrainConfig};
use crate::Result;

/// Occupied BEV cells of the three scenes in the pipeline case. Together they
/// populate all four index sets.
const CASE_CELLS: [&[usize]; 3] = [&[0, 1, 2, 3], &[0, 1, 3], &[1, 2]];

/// One fixed batch with everything the loss needs.
#[derive(Debug, Clone)]
pub struct PipelineCase {
    pub config: TrainConfig,
    pub state: ModelState,
    pub context_input: Tensor,
    pub target_input: Tensor,
    pub plans: Vec<BevMaskPlan>,
}

/// The tiny configuration: 16×16×8 voxels, 8 channels per encoder stage.
pub fn tiny_train_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model = ModelConfig {
        grid: GridSpec {
            dims: [16, 16, 8],
            range: SceneRange::default(),
            downsample: 8,
        },
        encoder_channels: [8, 8, 8],
        ..cfg.model
    };
    cfg
}

fn cell_cloud(rng: &mut impl Rng, spec: &GridSpec, cells: &[usize]) -> PointCloud {
    let (_, w, _) = spec.bev_dims();
    let r = spec.range;
    let size = spec.voxel_size();
    let span = [size[0] * spec.downsample as f64, size[1] * spec.downsample as f64];
    let mut pts = Vec::new();
    for &c in cells {
        let (ch, cw) = (c / w, c % w);
        for _ in 0..30 {
            let x = r.min[0] + span[0] * (ch as f64 + rng.gen_range(0.01..0.99));
            let y = r.min[1] + span[1] * (cw as f64 + rng.gen_range(0.01..0.99));
            let z = rng.gen_range(r.min[2] + 0.01..r.max[2] - 0.01);
            pts.push(Point::new(x, y, z, rng.gen()));
        }
    }
    PointCloud::new("gradcheck", pts)
}

/// Builds the pipeline case for `config` from a seed.
pub fn pipeline_case(config: TrainConfig, seed: u64) -> Result<PipelineCase> {
    config.validate()?;
    let spec = config.model.grid.clone();
    let state = ModelState::init(config.model.clone(), seed, config.eta0)?;
    let mut rng = keyed_rng(Stream::Scene, &[seed, 0x6772_6164]);
    let opts = MaskOptions {
        ratio: config.masking_ratio,
        mask_empty_cells: config.mask_empty_cells,
    };
    let (mut ctx, mut tgt, mut plans) = (Vec::new(), Vec::new(), Vec::new());
    for (i, cells) in CASE_CELLS.iter().enumerate() {
        let cloud = cell_cloud(&mut rng, &spec, cells);
        let plan = sample_mask(&occupancy_of_cloud(&cloud, &spec)?, opts, seed ^ i as u64)?;
        let (xc, xt) = partition_points(&cloud, &plan, &spec)?;
        ctx.push(voxelize(&xc, &spec)?);
        tgt.push(match config.target_input {
            TargetInput::HiddenOnly => voxelize(&xt, &spec)?,
            TargetInput::Full => voxelize(&cloud, &spec)?,
        });
        plans.push(plan);
    }
    Ok(PipelineCase {
        context_input: stack_features(&ctx.iter().collect::<Vec<_>>())?,
        target_input: stack_features(&tgt.iter().collect::<Vec<_>>())?,
        config,
        state,
        plans,
    })
}

/// Central-difference step for the pipeline. The network holds thousands of
/// ReLU pre-activations, and at 1e-5 a stencil occasionally straddles one.
pub const PIPELINE_H: f64 = 1e-6;

/// d(total loss)/d(every trainable element) against central differences.
pub fn pipeline_check(case: &PipelineCase, tol: Tolerance) -> Result<GradCheckReport> {
    pipeline_check_with_step(case, PIPELINE_H, tol)
}

pub fn pipeline_check_with_step(case: &PipelineCase, h: f64, tol: Tolerance) -> Result<GradCheckReport> {
    let inputs: Vec<Tensor> = case.state.trainable().into_iter().cloned().collect();
    Ok(check(&inputs, h, tol, |tape, vars| {
        let params = ParamVars::from_trainable(tape, &case.state, vars).map_err(to_ad)?;
        let fw = forward_with(
            tape,
            &case.state,
            params,
            case.context_input.clone(),
            case.target_input.clone(),
            &case.plans,
        )
        .map_err(to_ad)?;
        Ok(objective(tape, &fw, &case.plans, &case.config).map_err(to_ad)?.total)
    })?)
}

fn to_ad(e: crate::CoreError) -> adljepa_autodiff::AutodiffError {
    match e {
        crate::CoreError::Autodiff(a) => a,
        other => adljepa_autodiff::AutodiffError::Usage(other.to_string()),
    }
}

/// The complete suite: every op over `trials` seeds at the per-op
/// tolerance, then the pipeline under the default objective and under the
/// batch-pooled, token-free ablation at the end-to-end tolerance.
pub fn run_suite(trials: u64, seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out: Vec<(String, GradCheckReport)> = opsuite::run(trials)?
        .into_iter()
        .map(|(n, r)| (format!("op {n}"), r))
        .collect();
    let base = tiny_train_config();
    out.push((
        "pipeline default".into(),
        pipeline_check(&pipeline_case(base.clone(), seed)?, Tolerance::END_TO_END)?,
    ));
    let mut ablated = base;
    ablated.reg_pooling = crate::model::RegPooling::BatchPooled;
    ablated.model.use_empty_token = false;
    ablated.model.use_mask_token = false;
    ablated.target_input = TargetInput::Full;
    out.push((
        "pipeline ablation".into(),
        pipeline_check(&pipeline_case(ablated, seed + 1)?, Tolerance::END_TO_END)?,
    ));
    Ok(out)
}
