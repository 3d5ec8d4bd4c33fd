use std::fmt;
use std::str::FromStr;

use crate::config::{flag, join, list, optional, show_optional, value, KvConfig};
use crate::data::SceneRange;
use crate::model::{EmaSchedule, ModelConfig, RegPooling};
use crate::{CoreError, Result};

/// What the target encoder sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetInput {
    /// Points of masked non-empty cells only.
    HiddenOnly,
    /// The whole cloud.
    Full,
}

impl FromStr for TargetInput {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hidden_only" => Ok(Self::HiddenOnly),
            "full" => Ok(Self::Full),
            o => Err(CoreError::Config(format!("target_input: unknown value '{o}'"))),
        }
    }
}

impl fmt::Display for TargetInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::HiddenOnly => "hidden_only",
            Self::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Overrides `epochs` when set; the schedules then span exactly this many steps.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub lr_warmup_frac: f64,
    pub lr_start_div: f64,
    pub lr_final_div: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub masking_ratio: f64,
    pub mask_empty_cells: bool,
    pub alpha0: f64,
    pub alpha1: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_jepa: f64,
    pub lambda_reg: f64,
    /// `None` means `1/√E`.
    pub gamma: Option<f64>,
    pub var_eps: f64,
    pub eta0: f64,
    pub ema_schedule: EmaSchedule,
    pub seed: u64,
    pub model: ModelConfig,
    pub use_variance_reg: bool,
    pub target_input: TargetInput,
    pub reg_pooling: RegPooling,
    pub reg_sum_over_batch: bool,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            max_steps: None,
            batch_size: 8,
            lr_peak: 3e-4,
            lr_warmup_frac: 0.4,
            lr_start_div: 10.0,
            lr_final_div: 1000.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            masking_ratio: 0.5,
            mask_empty_cells: true,
            alpha0: 0.25,
            alpha1: 0.75,
            beta1: 1.0,
            beta2: 1.0,
            lambda_jepa: 1.0,
            lambda_reg: 1.0,
            gamma: None,
            var_eps: 1e-8,
            eta0: 0.996,
            ema_schedule: EmaSchedule::Linear,
            seed: 0,
            model: ModelConfig::default(),
            use_variance_reg: true,
            target_input: TargetInput::HiddenOnly,
            reg_pooling: RegPooling::PerScene,
            reg_sum_over_batch: false,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn gamma(&self) -> f64 {
        self.gamma
            .unwrap_or_else(|| 1.0 / (self.model.embed_dim() as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(CoreError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.max_steps.is_none() && self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive".into());
        }
        for (name, v) in [
            ("lr_peak", self.lr_peak),
            ("lr_start_div", self.lr_start_div),
            ("lr_final_div", self.lr_final_div),
            ("adam_eps", self.adam_eps),
            ("var_eps", self.var_eps),
            ("gamma", self.gamma()),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("alpha0", self.alpha0),
            ("alpha1", self.alpha1),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("lambda_jepa", self.lambda_jepa),
            ("lambda_reg", self.lambda_reg),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(self.masking_ratio > 0.0 && self.masking_ratio < 1.0) {
            return bad(format!("masking_ratio {} outside (0, 1)", self.masking_ratio));
        }
        if !(self.lr_warmup_frac > 0.0 && self.lr_warmup_frac < 1.0) {
            return bad(format!("lr_warmup_frac {} outside (0, 1)", self.lr_warmup_frac));
        }
        if !(0.0..=1.0).contains(&self.eta0) {
            return bad(format!("eta0 {} outside [0, 1]", self.eta0));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if ![1, 3, 6].contains(&self.model.predictor_depth) {
            return bad(format!("predictor_depth {} not in {{1, 3, 6}}", self.model.predictor_depth));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

fn set_range(range: &mut SceneRange, axis: usize, key: &str, v: &str) -> Result<()> {
    let [lo, hi] = list::<f64, 2>(key, v)?;
    range.min[axis] = lo;
    range.max[axis] = hi;
    Ok(())
}

impl KvConfig for TrainConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        let m = &mut self.model;
        match key {
            "epochs" => self.epochs = value(key, v)?,
            "max_steps" => self.max_steps = optional(key, v)?,
            "batch_size" => self.batch_size = value(key, v)?,
            "lr_peak" => self.lr_peak = value(key, v)?,
            "lr_warmup_frac" => self.lr_warmup_frac = value(key, v)?,
            "lr_start_div" => self.lr_start_div = value(key, v)?,
            "lr_final_div" => self.lr_final_div = value(key, v)?,
            "adam_beta1" => self.adam_beta1 = value(key, v)?,
            "adam_beta2" => self.adam_beta2 = value(key, v)?,
            "adam_eps" => self.adam_eps = value(key, v)?,
            "weight_decay" => self.weight_decay = value(key, v)?,
            "masking_ratio" => self.masking_ratio = value(key, v)?,
            "mask_empty_cells" => self.mask_empty_cells = flag(key, v)?,
            "alpha0" => self.alpha0 = value(key, v)?,
            "alpha1" => self.alpha1 = value(key, v)?,
            "beta1" => self.beta1 = value(key, v)?,
            "beta2" => self.beta2 = value(key, v)?,
            "lambda_jepa" => self.lambda_jepa = value(key, v)?,
            "lambda_reg" => self.lambda_reg = value(key, v)?,
            "gamma" => self.gamma = optional(key, v)?,
            "var_eps" => self.var_eps = value(key, v)?,
            "eta0" => self.eta0 = value(key, v)?,
            "ema_schedule" => self.ema_schedule = v.parse()?,
            "seed" => self.seed = value(key, v)?,
            "grid_dims" => m.grid.dims = list(key, v)?,
            "range_x" => set_range(&mut m.grid.range, 0, key, v)?,
            "range_y" => set_range(&mut m.grid.range, 1, key, v)?,
            "range_z" => set_range(&mut m.grid.range, 2, key, v)?,
            "encoder_channels" => m.encoder_channels = list(key, v)?,
            "predictor_depth" => m.predictor_depth = value(key, v)?,
            "use_empty_token" => m.use_empty_token = flag(key, v)?,
            "use_mask_token" => m.use_mask_token = flag(key, v)?,
            "target_empty_rule" => m.target_empty_rule = v.parse()?,
            "use_variance_reg" => self.use_variance_reg = flag(key, v)?,
            "target_input" => self.target_input = v.parse()?,
            "reg_pooling" => self.reg_pooling = v.parse()?,
            "reg_sum_over_batch" => self.reg_sum_over_batch = flag(key, v)?,
            "grad_clip" => self.grad_clip = optional(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let r = &m.grid.range;
        let e = |k: &str, v: String| (k.to_string(), v);
        vec![
            e("epochs", self.epochs.to_string()),
            e("max_steps", show_optional(&self.max_steps, "none")),
            e("batch_size", self.batch_size.to_string()),
            e("lr_peak", self.lr_peak.to_string()),
            e("lr_warmup_frac", self.lr_warmup_frac.to_string()),
            e("lr_start_div", self.lr_start_div.to_string()),
            e("lr_final_div", self.lr_final_div.to_string()),
            e("adam_beta1", self.adam_beta1.to_string()),
            e("adam_beta2", self.adam_beta2.to_string()),
            e("adam_eps", self.adam_eps.to_string()),
            e("weight_decay", self.weight_decay.to_string()),
            e("masking_ratio", self.masking_ratio.to_string()),
            e("mask_empty_cells", self.mask_empty_cells.to_string()),
            e("alpha0", self.alpha0.to_string()),
            e("alpha1", self.alpha1.to_string()),
            e("beta1", self.beta1.to_string()),
            e("beta2", self.beta2.to_string()),
            e("lambda_jepa", self.lambda_jepa.to_string()),
            e("lambda_reg", self.lambda_reg.to_string()),
            e("gamma", show_optional(&self.gamma, "auto")),
            e("var_eps", self.var_eps.to_string()),
            e("eta0", self.eta0.to_string()),
            e("ema_schedule", self.ema_schedule.to_string()),
            e("seed", self.seed.to_string()),
            e("grid_dims", join(&m.grid.dims)),
            e("range_x", join(&[r.min[0], r.max[0]])),
            e("range_y", join(&[r.min[1], r.max[1]])),
            e("range_z", join(&[r.min[2], r.max[2]])),
            e("encoder_channels", join(&m.encoder_channels)),
            e("predictor_depth", m.predictor_depth.to_string()),
            e("use_empty_token", m.use_empty_token.to_string()),
            e("use_mask_token", m.use_mask_token.to_string()),
            e("target_empty_rule", m.target_empty_rule.to_string()),
            e("use_variance_reg", self.use_variance_reg.to_string()),
            e("target_input", self.target_input.to_string()),
            e("reg_pooling", self.reg_pooling.to_string()),
            e("reg_sum_over_batch", self.reg_sum_over_batch.to_string()),
            e("grad_clip", show_optional(&self.grad_clip, "none")),
        ]
    }
}

impl TrainConfig {
    /// Parses the text written by [`crate::config::render`] over defaults.
    pub fn from_kv_text(text: &str, source: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for a in crate::config::parse_assignments(text, source)? {
            if !cfg.set(&a.key, &a.value)? {
                return Err(CoreError::Config(format!("{source}:{}: unknown key '{}'", a.line, a.key)));
            }
        }
        Ok(cfg)
    }
}
