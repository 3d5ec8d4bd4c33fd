use std::path::{Path, PathBuf};

use adljepa_autodiff::gradcheck::GradCheckReport;
use adljepa_core::config::KvConfig;
use adljepa_core::data::{generate_scene, write_kitti_bin};
use adljepa_core::dataset::synthetic_scene_seed;
use adljepa_core::diagnostics::{
    context_spread, emit_report, linear_probe, non_empty_context_embeddings, occupancy_auc, occupancy_maps,
    probe_examples, svd_spectrum, ProbeResult,
};
use adljepa_core::gradsuite::run_suite;
use adljepa_core::masking::MaskOptions;
use adljepa_core::model::ModelState;
use adljepa_core::trainer::{
    load_checkpoint, read_jsonl, save_checkpoint, EpochSummary, JsonlLog, StepRecord, Trainer,
};
use adljepa_core::{CoreError, Result};
use serde::Serialize;

use crate::run_config::RunConfig;

pub const CONFIG_ECHO: &str = "config.txt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const MANIFEST: &str = "manifest.txt";

fn io(path: &Path) -> impl Fn(std::io::Error) -> CoreError + '_ {
    move |e| CoreError::io(path, e)
}

/// Creates `out`, refusing a non-empty directory unless `force`.
pub fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let mut entries = std::fs::read_dir(out).map_err(io(out))?;
        if entries.next().is_some() && !force {
            return Err(CoreError::Config(format!(
                "{} exists and is not empty; pass --force to write into it",
                out.display()
            )));
        }
    }
    std::fs::create_dir_all(out).map_err(io(out))
}

fn echo_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    let path = out.join(CONFIG_ECHO);
    std::fs::write(&path, cfg.render()).map_err(io(&path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let body = serde_json::to_string_pretty(value).expect("plain data serializes") + "\n";
    std::fs::write(path, body).map_err(io(path))
}

pub fn scene_stem(i: usize) -> String {
    format!("scene_{i:06}")
}

/// Writes `scenes` synthetic scans with annotation sidecars and a manifest
/// recording the resolved configuration and every scene seed.
pub fn cmd_generate(cfg: &RunConfig, out: &Path, force: bool) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    prepare_out_dir(out, force)?;
    let seed = cfg.data_seed();
    let mut manifest: String = cfg.entries().iter().map(|(k, v)| format!("# {k} = {v}\n")).collect();
    let mut files = Vec::new();
    for i in 0..cfg.scenes {
        let s = synthetic_scene_seed(seed, i);
        let (cloud, ann) = generate_scene(s, &cfg.scene)?;
        let stem = scene_stem(i);
        let bin = out.join(format!("{stem}.bin"));
        let ann_path = out.join(format!("{stem}.ann"));
        write_kitti_bin(&cloud, &bin)?;
        ann.write(&ann_path)?;
        manifest.push_str(&format!("{stem} {s}\n"));
        files.push(bin);
        files.push(ann_path);
    }
    let path = out.join(MANIFEST);
    std::fs::write(&path, manifest).map_err(io(&path))?;
    files.push(path);
    Ok(files)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSummary {
    pub steps: u64,
    pub last: Option<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint_{step:06}.adlj")
}

/// Trains and writes `final.adlj`, periodic checkpoints, `train_log.jsonl`
/// and per-epoch means in `metrics.csv`. With `resume`, the log is cut back
/// to the checkpoint's step before training continues.
pub fn cmd_pretrain(
    cfg: &RunConfig,
    out: &Path,
    force: bool,
    resume: Option<&Path>,
    mut progress: impl FnMut(&StepRecord),
) -> Result<PretrainSummary> {
    cfg.validate()?;
    prepare_out_dir(out, force || resume.is_some())?;
    let dataset = cfg.train_dataset()?;
    let log_path = out.join(LOG_FILE);
    let (mut trainer, mut log) = match resume {
        None => (Trainer::new(cfg.train.clone(), dataset.len())?, JsonlLog::create(&log_path)?),
        Some(ck) => {
            let t = load_checkpoint(ck)?;
            if t.config != cfg.train {
                let ours = cfg.train.entries();
                let diff: Vec<String> = t
                    .config
                    .entries()
                    .into_iter()
                    .zip(ours)
                    .filter(|(a, b)| a != b)
                    .map(|((k, theirs), (_, ours))| format!("{k}: checkpoint {theirs}, config {ours}"))
                    .collect();
                return Err(CoreError::Config(format!(
                    "{} was trained with a different configuration ({})",
                    ck.display(),
                    diff.join("; ")
                )));
            }
            if t.dataset_len != dataset.len() {
                return Err(CoreError::Shape(format!(
                    "checkpoint expects {} scenes, dataset has {}",
                    t.dataset_len,
                    dataset.len()
                )));
            }
            let kept: Vec<StepRecord> = if log_path.exists() {
                read_jsonl(&log_path)?.into_iter().filter(|r| r.step < t.step).collect()
            } else {
                Vec::new()
            };
            let mut log = JsonlLog::create(&log_path)?;
            for r in &kept {
                log.write(r)?;
            }
            (t, log)
        }
    };
    echo_config(cfg, out)?;
    let mut checkpoints = Vec::new();
    let mut last = None;
    while !trainer.is_done() {
        let step = trainer.step;
        let res = trainer.train_step(&dataset)?;
        let rec = StepRecord {
            step,
            epoch: res.epoch,
            breakdown: res.breakdown,
        };
        log.write(&rec)?;
        progress(&rec);
        if cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0 && !trainer.is_done() {
            let p = out.join(checkpoint_name(trainer.step));
            save_checkpoint(&trainer, &p)?;
            checkpoints.push(p);
        }
        last = Some(rec);
    }
    drop(log);
    let p = out.join("final.adlj");
    save_checkpoint(&trainer, &p)?;
    checkpoints.push(p);
    let mut summary = EpochSummary::default();
    for r in read_jsonl(&log_path)? {
        summary.push(&r);
    }
    summary.write_csv(&out.join("metrics.csv"))?;
    Ok(PretrainSummary {
        steps: trainer.step,
        last,
        checkpoints,
    })
}

fn model_for(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(ModelState, Option<u64>)> {
    let Some(ck) = checkpoint else {
        return Ok((ModelState::init(cfg.train.model.clone(), cfg.train.seed, cfg.train.eta0)?, None));
    };
    let t = load_checkpoint(ck)?;
    if t.model.config.grid != cfg.train.model.grid {
        let g = &t.model.config.grid;
        let c = &cfg.train.model.grid;
        return Err(CoreError::Shape(format!(
            "{} was trained on a {:?} grid over {:?}..{:?}, config asks for {:?} over {:?}..{:?}",
            ck.display(),
            g.dims,
            g.range.min,
            g.range.max,
            c.dims,
            c.range.min,
            c.range.max
        )));
    }
    Ok((t.model, Some(t.step)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnoseSummary {
    pub checkpoint: String,
    pub step: Option<u64>,
    pub scenes: usize,
    pub embeddings: usize,
    pub effective_rank: f64,
    pub erank_threshold: f64,
    pub low_effective_rank: bool,
    pub occupancy_auc: Option<f64>,
    pub spread_per_scene: f64,
    pub spread_pooled: f64,
    pub gamma: f64,
    pub warnings: Vec<String>,
}

/// Spectrum, similarity maps and spreads of a checkpoint on the evaluation
/// scenes. Writes the report files plus `diagnose.json`.
pub fn cmd_diagnose(cfg: &RunConfig, checkpoint: &Path, out: &Path, force: bool) -> Result<DiagnoseSummary> {
    cfg.validate()?;
    let (model, step) = model_for(cfg, Some(checkpoint))?;
    prepare_out_dir(out, force)?;
    echo_config(cfg, out)?;
    let ds = cfg.eval_dataset()?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let e = model.embed_dim();
    let mut warnings = Vec::new();
    let (rows, m) = non_empty_context_embeddings(&model, &ds, &idx)?;
    let spectrum = svd_spectrum(&rows, m, e)?;
    let opts = MaskOptions {
        ratio: cfg.train.masking_ratio,
        mask_empty_cells: cfg.train.mask_empty_cells,
    };
    let (maps, plans) = occupancy_maps(&model, &ds, &idx, opts, cfg.eval_seed())?;
    let auc = match occupancy_auc(&maps, &plans) {
        Ok(a) => Some(a),
        Err(CoreError::Degenerate(why)) => {
            warnings.push(format!("occupancy AUC undefined: {why}"));
            None
        }
        Err(e) => return Err(e),
    };
    let spread = context_spread(&model, &ds, &idx)?;
    let paired: Vec<_> = maps.into_iter().zip(plans).collect();
    let report = emit_report(out, &paired, &[("context".to_string(), spectrum.clone())], &[])?;
    warnings.extend(report.warnings);
    let low = spectrum.effective_rank < cfg.erank_threshold;
    if low {
        warnings.push(format!(
            "effective rank {:.3} is below the threshold {}",
            spectrum.effective_rank, cfg.erank_threshold
        ));
    }
    let summary = DiagnoseSummary {
        checkpoint: checkpoint.display().to_string(),
        step,
        scenes: ds.len(),
        embeddings: m,
        effective_rank: spectrum.effective_rank,
        erank_threshold: cfg.erank_threshold,
        low_effective_rank: low,
        occupancy_auc: auc,
        spread_per_scene: spread.per_scene_mean,
        spread_pooled: spread.pooled,
        gamma: cfg.train.gamma(),
        warnings,
    };
    write_json(&out.join("diagnose.json"), &summary)?;
    Ok(summary)
}

/// Linear probe for object presence on frozen context embeddings. Without a
/// checkpoint the model is a fresh initialization from the config seed.
pub fn cmd_probe(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path, force: bool) -> Result<(String, ProbeResult)> {
    cfg.validate()?;
    let (model, _) = model_for(cfg, checkpoint)?;
    prepare_out_dir(out, force)?;
    echo_config(cfg, out)?;
    let train = cfg.train_dataset()?;
    let test = cfg.eval_dataset()?;
    let tr_idx: Vec<usize> = (0..cfg.probe_scenes.min(train.len())).collect();
    let te_idx: Vec<usize> = (0..test.len()).collect();
    let (trx, try_) = probe_examples(&model, &train, &tr_idx)?;
    let (tex, tey) = probe_examples(&model, &test, &te_idx)?;
    let result = linear_probe(&trx, &try_, &tex, &tey, model.embed_dim(), cfg.probe_config())?;
    let label = if checkpoint.is_some() { "checkpoint" } else { "random_init" }.to_string();
    emit_report(out, &[], &[], &[(label.clone(), result)])?;
    Ok((label, result))
}

/// The finite-difference suite; the caller decides what a failure means.
pub fn cmd_gradcheck(trials: u64, seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    run_suite(trials, seed)
}
