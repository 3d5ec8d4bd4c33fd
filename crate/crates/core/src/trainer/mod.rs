//! Pre-training loop: batching, schedules, optimizer and EMA steps, logs.

mod checkpoint;
mod config;
mod log;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{TargetInput, TrainConfig};
pub use log::{read_jsonl, EpochSummary, JsonlLog, StepRecord};

use adljepa_autodiff::{Adam, AdamConfig, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bev::voxelize;
use crate::dataset::Dataset;
use crate::masking::{partition_points, sample_mask, scene_mask_seed, BevMaskPlan, MaskOptions};
use crate::model::{
    ema_momentum, ema_update, embedding_spread, forward, jepa_loss, stack_features, total_loss, variance_reg_loss,
    ForwardVars, JepaTerms, ModelState, RegOptions, RegTerms,
};
use crate::rng::{keyed_rng, Stream};
use crate::{CoreError, Result};

/// The twelve tracked scalars of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_pretrain: f64,
    pub loss_reg: f64,
    pub loss_reg_prediction_target_voxels: f64,
    pub loss_reg_context_context_voxels: f64,
    pub loss_jepa: f64,
    pub loss_cos_jepa_target_voxels: f64,
    pub loss_cos_jepa_target_empty_voxels: f64,
    pub var_target_target_voxels: f64,
    pub var_prediction_target_voxels: f64,
    pub var_prediction_target_empty_voxels: f64,
    pub var_context_context_voxels: f64,
    pub learning_rate: f64,
}

impl LossBreakdown {
    pub const FIELDS: [&'static str; 12] = [
        "loss_pretrain",
        "loss_reg",
        "loss_reg_prediction_target_voxels",
        "loss_reg_context_context_voxels",
        "loss_jepa",
        "loss_cos_jepa_target_voxels",
        "loss_cos_jepa_target_empty_voxels",
        "var_target_target_voxels",
        "var_prediction_target_voxels",
        "var_prediction_target_empty_voxels",
        "var_context_context_voxels",
        "learning_rate",
    ];

    pub fn values(&self) -> [f64; 12] {
        [
            self.loss_pretrain,
            self.loss_reg,
            self.loss_reg_prediction_target_voxels,
            self.loss_reg_context_context_voxels,
            self.loss_jepa,
            self.loss_cos_jepa_target_voxels,
            self.loss_cos_jepa_target_empty_voxels,
            self.var_target_target_voxels,
            self.var_prediction_target_voxels,
            self.var_prediction_target_empty_voxels,
            self.var_context_context_voxels,
            self.learning_rate,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

/// One-cycle learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub peak: f64,
    pub warmup_frac: f64,
    pub start_div: f64,
    pub final_div: f64,
}

impl OneCycle {
    pub fn new(peak: f64) -> Self {
        Self {
            peak,
            warmup_frac: 0.4,
            start_div: 10.0,
            final_div: 1000.0,
        }
    }

    /// Linear warm-up from `peak/start_div` to `peak`, then cosine decay to
    /// `peak/final_div` at `step == total`.
    pub fn at(&self, step: u64, total: u64) -> f64 {
        let (start, end) = (self.peak / self.start_div, self.peak / self.final_div);
        if total == 0 {
            return end;
        }
        let t = step.min(total) as f64;
        let warm = self.warmup_frac * total as f64;
        if t < warm {
            start + (self.peak - start) * t / warm
        } else {
            let frac = if total as f64 > warm { (t - warm) / (total as f64 - warm) } else { 1.0 };
            self.peak - (self.peak - end) * 0.5 * (1.0 - (std::f64::consts::PI * frac).cos())
        }
    }
}

pub fn lr_at(step: u64, total: u64, lr_peak: f64) -> f64 {
    OneCycle::new(lr_peak).at(step, total)
}

/// Everything computed for one batch besides the parameter update.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub epoch: u64,
    pub breakdown: LossBreakdown,
    /// Spread of context embeddings at unmasked non-empty cells pooled over the batch.
    pub pooled_var_context: f64,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: ModelState,
    pub optimizer: Adam,
    pub step: u64,
    pub dataset_len: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset_len: usize) -> Result<Self> {
        config.validate()?;
        if dataset_len == 0 {
            return Err(CoreError::Config("dataset is empty".into()));
        }
        let model = ModelState::init(config.model.clone(), config.seed, config.eta0)?;
        let optimizer = Adam::new(adam_config(&config, config.lr_peak), model.trainable());
        Ok(Self {
            config,
            model,
            optimizer,
            step: 0,
            dataset_len,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.dataset_len.div_ceil(self.config.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.config
            .max_steps
            .unwrap_or(self.config.epochs as u64 * self.steps_per_epoch())
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn lr_schedule(&self) -> OneCycle {
        OneCycle {
            peak: self.config.lr_peak,
            warmup_frac: self.config.lr_warmup_frac,
            start_div: self.config.lr_start_div,
            final_div: self.config.lr_final_div,
        }
    }

    /// Epoch and scene indices of the batch at `step`.
    pub fn batch_for_step(&self, step: u64) -> (u64, Vec<usize>) {
        let spe = self.steps_per_epoch();
        let (epoch, b) = (step / spe, (step % spe) as usize);
        let mut order: Vec<usize> = (0..self.dataset_len).collect();
        order.shuffle(&mut keyed_rng(Stream::Shuffle, &[self.config.seed, epoch]));
        let bs = self.config.batch_size;
        let end = ((b + 1) * bs).min(self.dataset_len);
        (epoch, order[b * bs..end].to_vec())
    }

    /// Mask plan of one scene at one epoch.
    pub fn plan_for(&self, dataset: &Dataset, epoch: u64, scene: usize) -> Result<BevMaskPlan> {
        let opts = MaskOptions {
            ratio: self.config.masking_ratio,
            mask_empty_cells: self.config.mask_empty_cells,
        };
        sample_mask(
            &dataset.scenes[scene].occupancy,
            opts,
            scene_mask_seed(self.config.seed, epoch, scene as u64),
        )
    }

    /// Runs the step at `self.step` and advances it.
    pub fn train_step(&mut self, dataset: &Dataset) -> Result<StepOutput> {
        if dataset.len() != self.dataset_len {
            return Err(CoreError::Contract(format!(
                "trainer built for {} scenes, dataset has {}",
                self.dataset_len,
                dataset.len()
            )));
        }
        if dataset.grid != self.config.model.grid {
            return Err(CoreError::Shape("dataset grid differs from model grid".into()));
        }
        let step = self.step;
        let (epoch, scenes) = self.batch_for_step(step);
        let grid = &self.config.model.grid;
        let mut plans = Vec::with_capacity(scenes.len());
        let mut ctx_feats = Vec::with_capacity(scenes.len());
        let mut tgt_feats = Vec::with_capacity(scenes.len());
        for &i in &scenes {
            let scene = &dataset.scenes[i];
            let plan = self.plan_for(dataset, epoch, i)?;
            let (xc, xt) = partition_points(&scene.cloud, &plan, grid)?;
            ctx_feats.push(voxelize(&xc, grid)?);
            tgt_feats.push(match self.config.target_input {
                TargetInput::HiddenOnly => voxelize(&xt, grid)?,
                TargetInput::Full => voxelize(&scene.cloud, grid)?,
            });
            plans.push(plan);
        }
        let xc = stack_features(&ctx_feats.iter().collect::<Vec<_>>())?;
        let xt = stack_features(&tgt_feats.iter().collect::<Vec<_>>())?;

        let total_steps = self.total_steps();
        let lr = self.lr_schedule().at(step, total_steps);
        let (breakdown, pooled, grads) = self.loss_and_grads(xc, xt, &plans, lr)?;
        if !breakdown.is_finite() {
            return Err(CoreError::NumericalAbort {
                step,
                reason: "non-finite loss".into(),
                last: Some(Box::new(breakdown)),
            });
        }
        let mut grads = grads;
        if let Some(max_norm) = self.config.grad_clip {
            clip_global_norm(&mut grads, max_norm);
        }

        self.optimizer.config.lr = lr;
        let names = self.model.trainable_names();
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let mut params = self.model.trainable_mut();
        self.optimizer
            .step(&mut params, &grads, &name_refs)
            .map_err(|e| CoreError::NumericalAbort {
                step,
                reason: e.to_string(),
                last: Some(Box::new(breakdown)),
            })?;
        let eta = ema_momentum(step, total_steps, self.config.eta0, self.config.ema_schedule);
        ema_update(&mut self.model.target, &self.model.context, eta)?;
        self.model.eta = eta;
        self.step += 1;
        Ok(StepOutput {
            epoch,
            breakdown,
            pooled_var_context: pooled,
        })
    }

    fn loss_and_grads(
        &self,
        xc: Tensor,
        xt: Tensor,
        plans: &[BevMaskPlan],
        lr: f64,
    ) -> Result<(LossBreakdown, f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let fw = forward(&mut tape, &self.model, xc, xt, plans, true)?;
        let obj = match objective(&mut tape, &fw, plans, &self.config) {
            Ok(o) => o,
            Err(CoreError::Contract(reason)) => {
                return Err(CoreError::NumericalAbort {
                    step: self.step,
                    reason,
                    last: None,
                })
            }
            Err(e) => return Err(e),
        };
        let (total, jepa, reg, reg_total) = (obj.total, obj.jepa, obj.reg, obj.reg_total);
        let scalar = |tape: &Tape, v| tape.value(v).data()[0];

        let e = self.model.embed_dim();
        let hw = plans.first().map_or(0, |p| p.cells());
        let z = tape.value(fw.z_hat_c).data();
        let sc = tape.value(fw.s_hat_c).data();
        let st = tape.value(fw.s_hat_t).data();
        let spread = |data: &[f64], sel: fn(&BevMaskPlan) -> &Vec<usize>| -> f64 {
            let per: Vec<f64> = plans
                .iter()
                .enumerate()
                .filter_map(|(b, p)| embedding_spread(&rows(data, b * hw, sel(p), e), e))
                .collect();
            if per.is_empty() {
                0.0
            } else {
                per.iter().sum::<f64>() / per.len() as f64
            }
        };
        let pooled_k: Vec<f64> = plans
            .iter()
            .enumerate()
            .flat_map(|(b, p)| rows(z, b * hw, &p.k, e))
            .collect();
        let pooled = embedding_spread(&pooled_k, e).unwrap_or(0.0);

        let breakdown = LossBreakdown {
            loss_pretrain: scalar(&tape, total),
            loss_reg: scalar(&tape, reg_total),
            loss_reg_prediction_target_voxels: reg.map_or(0.0, |r| scalar(&tape, r.prediction)),
            loss_reg_context_context_voxels: reg.map_or(0.0, |r| scalar(&tape, r.context)),
            loss_jepa: scalar(&tape, jepa.total),
            loss_cos_jepa_target_voxels: scalar(&tape, jepa.non_empty),
            loss_cos_jepa_target_empty_voxels: scalar(&tape, jepa.empty),
            var_target_target_voxels: spread(st, |p| &p.q),
            var_prediction_target_voxels: spread(sc, |p| &p.q),
            var_prediction_target_empty_voxels: spread(sc, |p| &p.p),
            var_context_context_voxels: spread(z, |p| &p.k),
            learning_rate: lr,
        };
        if !breakdown.is_finite() {
            return Ok((breakdown, pooled, Vec::new()));
        }
        tape.backward(total)?;
        let grads = fw
            .params
            .trainable()
            .into_iter()
            .map(|v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
            .collect();
        Ok((breakdown, pooled, grads))
    }

    /// Trains until the schedule ends, handing every record to `sink`.
    pub fn run(&mut self, dataset: &Dataset, mut sink: impl FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let step = self.step;
            let out = self.train_step(dataset)?;
            sink(&StepRecord {
                step,
                epoch: out.epoch,
                breakdown: out.breakdown,
            })?;
        }
        Ok(())
    }
}

/// The pre-training loss graph of one batch.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub total: Var,
    pub jepa: JepaTerms,
    pub reg: Option<RegTerms>,
    /// `reg.total`, or a zero constant with the regularizer off.
    pub reg_total: Var,
}

/// `λ_jepa·L_jepa + λ_reg·L_reg` on top of a forward pass. A non-finite
/// component is reported as a contract error.
pub fn objective(tape: &mut Tape, fw: &ForwardVars, plans: &[BevMaskPlan], cfg: &TrainConfig) -> Result<Objective> {
    let jepa = jepa_loss(tape, fw.s_hat_c, fw.s_hat_t, plans, cfg.alpha0, cfg.alpha1)?;
    let reg = if cfg.use_variance_reg {
        Some(variance_reg_loss(
            tape,
            fw.z_hat_c,
            fw.s_hat_c,
            plans,
            RegOptions {
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                gamma: cfg.gamma(),
                eps: cfg.var_eps,
                pooling: cfg.reg_pooling,
                sum_over_batch: cfg.reg_sum_over_batch,
            },
        )?)
    } else {
        None
    };
    let reg_total = match reg {
        Some(r) => r.total,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let total = total_loss(tape, jepa.total, reg_total, cfg.lambda_jepa, cfg.lambda_reg)?;
    Ok(Objective {
        total,
        jepa,
        reg,
        reg_total,
    })
}

/// Rows `idx` of scene block starting at row `base` in a `[rows, e]` buffer.
pub(crate) fn rows(data: &[f64], base: usize, idx: &[usize], e: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * e);
    for &i in idx {
        out.extend_from_slice(&data[(base + i) * e..(base + i + 1) * e]);
    }
    out
}

pub(crate) fn adam_config(cfg: &TrainConfig, lr: f64) -> AdamConfig {
    AdamConfig {
        lr,
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    }
}

fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_cycle_endpoints() {
        let total = 1000;
        assert!((lr_at(0, total, 3e-4) - 3e-5).abs() < 1e-18);
        assert_eq!(lr_at(400, total, 3e-4), 3e-4);
        assert!((lr_at(total, total, 3e-4) - 3e-7).abs() < 1e-18);
        let mut prev = 0.0;
        for s in 0..=400 {
            let lr = lr_at(s, total, 3e-4);
            assert!(lr >= prev);
            prev = lr;
        }
        for s in 400..=total {
            let lr = lr_at(s, total, 3e-4);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn clipping_scales_to_norm() {
        let mut g = vec![Tensor::from_vec(vec![3.0, 4.0])];
        clip_global_norm(&mut g, 1.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        clip_global_norm(&mut g, 5.0);
        assert!((g[0].data()[1] - 0.8).abs() < 1e-15);
    }
}
