//! The desk-scale experiment protocol: the `tiny` profile trained on 256
//! synthetic scenes under three objective variants, then evaluated on held
//! out scenes.

use std::path::Path;
use std::time::{Duration, Instant};

use adljepa_cli::run_config::RunConfig;
use adljepa_core::config::KvConfig;
use adljepa_core::dataset::Dataset;
use adljepa_core::diagnostics::{
    context_spread, linear_probe, non_empty_context_embeddings, occupancy_auc, occupancy_maps, probe_examples,
    svd_spectrum, ProbeResult, SpectrumReport, SpreadSummary,
};
use adljepa_core::masking::MaskOptions;
use adljepa_core::model::ModelState;
use adljepa_core::trainer::{JsonlLog, StepRecord, Trainer};
use adljepa_core::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Default,
    /// No variance regularizer and a constant EMA momentum.
    NoRegFrozen,
    /// Regularizer on embeddings pooled across the batch.
    BatchPooled,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Default, Variant::NoRegFrozen, Variant::BatchPooled];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Default => "default",
            Variant::NoRegFrozen => "noreg_frozen",
            Variant::BatchPooled => "batch_pooled",
        }
    }

    fn overrides(self) -> &'static [(&'static str, &'static str)] {
        match self {
            Variant::Default => &[],
            Variant::NoRegFrozen => &[("use_variance_reg", "false"), ("ema_schedule", "frozen")],
            Variant::BatchPooled => &[("reg_pooling", "batch_pooled")],
        }
    }
}

pub const SEEDS: [u64; 3] = [1, 2, 3];
/// Trailing steps averaged when reading a converged value off the log.
pub const TAIL: usize = 50;

pub fn experiment_config(variant: Variant, seed: u64) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    cfg.apply_profile("tiny")?;
    cfg.assign("seed", &seed.to_string(), "experiment")?;
    for (k, v) in variant.overrides() {
        cfg.assign(k, v, "experiment")?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub struct Run {
    pub variant: Variant,
    pub seed: u64,
    pub config: RunConfig,
    pub dataset: Dataset,
    pub init: ModelState,
    pub model: ModelState,
    pub records: Vec<StepRecord>,
    /// Batch-pooled context spread per step.
    pub pooled: Vec<f64>,
    /// The JSON-lines log exactly as written.
    pub log_text: String,
    /// Data generation plus training.
    pub elapsed: Duration,
}

impl Run {
    pub fn tail_context_spread(&self) -> f64 {
        tail_mean(self.records.iter().map(|r| r.breakdown.var_context_context_voxels))
    }

    pub fn tail_pooled_spread(&self) -> f64 {
        tail_mean(self.pooled.iter().copied())
    }
}

pub fn tail_mean(xs: impl DoubleEndedIterator<Item = f64>) -> f64 {
    let tail: Vec<f64> = xs.rev().take(TAIL).collect();
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Trains one configuration, writing its step log to `log_path`.
pub fn train(variant: Variant, config: RunConfig, log_path: &Path) -> Result<Run> {
    let start = Instant::now();
    let dataset = config.train_dataset()?;
    let mut trainer = Trainer::new(config.train.clone(), dataset.len())?;
    let init = trainer.model.clone();
    let mut log = JsonlLog::create(log_path)?;
    let mut records = Vec::new();
    let mut pooled = Vec::new();
    while !trainer.is_done() {
        let step = trainer.step;
        let out = trainer.train_step(&dataset)?;
        let rec = StepRecord {
            step,
            epoch: out.epoch,
            breakdown: out.breakdown,
        };
        log.write(&rec)?;
        records.push(rec);
        pooled.push(out.pooled_var_context);
    }
    drop(log);
    let elapsed = start.elapsed();
    let log_text = std::fs::read_to_string(log_path).map_err(|e| adljepa_core::CoreError::io(log_path, e))?;
    Ok(Run {
        variant,
        seed: config.train.seed,
        config,
        dataset,
        init,
        model: trainer.model,
        records,
        pooled,
        log_text,
        elapsed,
    })
}

pub struct Evaluation {
    /// Non-empty context embeddings of the held-out scenes, row-major.
    pub rows: Vec<f64>,
    pub row_count: usize,
    pub spectrum: SpectrumReport,
    pub occupancy_auc: f64,
    pub probe: ProbeResult,
    pub probe_init: ProbeResult,
    pub spread: SpreadSummary,
}

pub fn evaluate(run: &Run) -> Result<Evaluation> {
    let cfg = &run.config;
    let eval = cfg.eval_dataset()?;
    let idx: Vec<usize> = (0..eval.len()).collect();
    let e = run.model.embed_dim();
    let (rows, row_count) = non_empty_context_embeddings(&run.model, &eval, &idx)?;
    let spectrum = svd_spectrum(&rows, row_count, e)?;
    let opts = MaskOptions {
        ratio: cfg.train.masking_ratio,
        mask_empty_cells: cfg.train.mask_empty_cells,
    };
    let (maps, plans) = occupancy_maps(&run.model, &eval, &idx, opts, cfg.eval_seed())?;
    let auc = occupancy_auc(&maps, &plans)?;
    let train_idx: Vec<usize> = (0..cfg.probe_scenes.min(run.dataset.len())).collect();
    let probe = |m: &ModelState| -> Result<ProbeResult> {
        let (trx, try_) = probe_examples(m, &run.dataset, &train_idx)?;
        let (tex, tey) = probe_examples(m, &eval, &idx)?;
        linear_probe(&trx, &try_, &tex, &tey, e, cfg.probe_config())
    };
    Ok(Evaluation {
        spread: context_spread(&run.model, &eval, &idx)?,
        probe: probe(&run.model)?,
        probe_init: probe(&run.init)?,
        rows,
        row_count,
        spectrum,
        occupancy_auc: auc,
    })
}

/// Key/value summary of a run's resolved configuration that differs from
/// the defaults, for report lines.
pub fn describe(cfg: &RunConfig) -> String {
    let base = RunConfig::default().entries();
    cfg.entries()
        .into_iter()
        .zip(base)
        .filter(|(a, b)| a != b)
        .map(|((k, v), _)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(" ")
}
