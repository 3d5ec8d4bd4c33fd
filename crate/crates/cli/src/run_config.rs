//! Everything a subcommand needs, as one flat `key = value` namespace.
//!
//! Training keys are those of [`TrainConfig`]; scene-generator keys carry a
//! `scene_` prefix; the rest are listed in [`RunConfig::set`]. The scene
//! generator always covers the grid range.

use std::path::{Path, PathBuf};

use adljepa_core::config::{optional, parse_assignments, render, show_optional, value, KvConfig};
use adljepa_core::data::SceneConfig;
use adljepa_core::dataset::Dataset;
use adljepa_core::diagnostics::ProbeConfig;
use adljepa_core::rng::{mix_key, Stream};
use adljepa_core::trainer::TrainConfig;
use adljepa_core::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSource {
    Synthetic,
    /// A directory of `.bin` scans with optional `.ann` sidecars.
    Dir(PathBuf),
}

impl std::fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Synthetic => f.write_str("synthetic"),
            Self::Dir(p) => write!(f, "{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub scene: SceneConfig,
    pub dataset: DatasetSource,
    /// Synthetic training scenes, and the count written by `generate`.
    pub scenes: usize,
    /// Defaults to `seed`.
    pub data_seed: Option<u64>,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub eval_scenes: usize,
    /// Defaults to a value derived from `seed`.
    pub eval_seed: Option<u64>,
    /// Directory of evaluation scans; synthetic when unset.
    pub eval_dataset: Option<PathBuf>,
    pub erank_threshold: f64,
    /// Training scenes whose cells fit the probe.
    pub probe_scenes: usize,
    pub probe_steps: usize,
    pub probe_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let scene = SceneConfig {
            range: train.model.grid.range,
            ..SceneConfig::default()
        };
        Self {
            train,
            scene,
            dataset: DatasetSource::Synthetic,
            scenes: 256,
            data_seed: None,
            checkpoint_every: 0,
            eval_scenes: 64,
            eval_seed: None,
            eval_dataset: None,
            erank_threshold: 2.0,
            probe_scenes: 64,
            probe_steps: 300,
            probe_lr: 0.05,
        }
    }
}

/// Built-in starting points, applied before any file or flag.
pub const PROFILES: [&str; 3] = ["kitti_like", "large_like", "tiny"];

pub fn profile_entries(name: &str) -> Result<Vec<(&'static str, &'static str)>> {
    Ok(match name {
        "kitti_like" => vec![("lambda_reg", "1")],
        "large_like" => vec![("lambda_reg", "10")],
        // Sized for a single CPU core: a few minutes per 1000 steps.
        "tiny" => vec![
            ("grid_dims", "64,64,16"),
            ("encoder_channels", "8,16,8"),
            ("lr_peak", "0.003"),
            ("scenes", "256"),
            ("max_steps", "1000"),
        ],
        _ => {
            return Err(CoreError::Config(format!(
                "unknown profile '{name}' (expected one of {})",
                PROFILES.join(", ")
            )))
        }
    })
}

fn set_scene(s: &mut SceneConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "scene_min_objects" => s.min_objects = value(key, v)?,
        "scene_max_objects" => s.max_objects = value(key, v)?,
        "scene_min_points_per_object" => s.min_points_per_object = value(key, v)?,
        "scene_beams" => s.beams = value(key, v)?,
        "scene_beam_min_deg" => s.beam_min_deg = value(key, v)?,
        "scene_beam_max_deg" => s.beam_max_deg = value(key, v)?,
        "scene_azimuth_steps" => s.azimuth_steps = value(key, v)?,
        "scene_sensor_height_min" => s.sensor_height_min = value(key, v)?,
        "scene_sensor_height_max" => s.sensor_height_max = value(key, v)?,
        "scene_ground_falloff_start" => s.ground_falloff_start = value(key, v)?,
        "scene_ground_falloff_end" => s.ground_falloff_end = value(key, v)?,
        "scene_object_distance_min" => s.object_distance_min = value(key, v)?,
        "scene_object_distance_max" => s.object_distance_max = value(key, v)?,
        "scene_gain_min" => s.gain_min = value(key, v)?,
        "scene_gain_max" => s.gain_max = value(key, v)?,
        "scene_range_noise" => s.range_noise = value(key, v)?,
        "scene_dropout" => s.dropout = value(key, v)?,
        "scene_noise_points" => s.noise_points = value(key, v)?,
        "scene_max_points" => s.max_points = value(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn scene_entries(s: &SceneConfig) -> Vec<(String, String)> {
    let e = |k: &str, v: String| (k.to_string(), v);
    vec![
        e("scene_min_objects", s.min_objects.to_string()),
        e("scene_max_objects", s.max_objects.to_string()),
        e("scene_min_points_per_object", s.min_points_per_object.to_string()),
        e("scene_beams", s.beams.to_string()),
        e("scene_beam_min_deg", s.beam_min_deg.to_string()),
        e("scene_beam_max_deg", s.beam_max_deg.to_string()),
        e("scene_azimuth_steps", s.azimuth_steps.to_string()),
        e("scene_sensor_height_min", s.sensor_height_min.to_string()),
        e("scene_sensor_height_max", s.sensor_height_max.to_string()),
        e("scene_ground_falloff_start", s.ground_falloff_start.to_string()),
        e("scene_ground_falloff_end", s.ground_falloff_end.to_string()),
        e("scene_object_distance_min", s.object_distance_min.to_string()),
        e("scene_object_distance_max", s.object_distance_max.to_string()),
        e("scene_gain_min", s.gain_min.to_string()),
        e("scene_gain_max", s.gain_max.to_string()),
        e("scene_range_noise", s.range_noise.to_string()),
        e("scene_dropout", s.dropout.to_string()),
        e("scene_noise_points", s.noise_points.to_string()),
        e("scene_max_points", s.max_points.to_string()),
    ]
}

impl KvConfig for RunConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        if self.train.set(key, v)? {
            self.scene.range = self.train.model.grid.range;
            return Ok(true);
        }
        if set_scene(&mut self.scene, key, v)? {
            return Ok(true);
        }
        match key {
            "dataset" => {
                self.dataset = match v {
                    "synthetic" => DatasetSource::Synthetic,
                    "" => return Err(CoreError::Config("dataset: empty value".into())),
                    dir => DatasetSource::Dir(PathBuf::from(dir)),
                }
            }
            "scenes" => self.scenes = value(key, v)?,
            "data_seed" => self.data_seed = optional(key, v)?,
            "checkpoint_every" => self.checkpoint_every = value(key, v)?,
            "eval_scenes" => self.eval_scenes = value(key, v)?,
            "eval_seed" => self.eval_seed = optional(key, v)?,
            "eval_dataset" => self.eval_dataset = (v != "none").then(|| PathBuf::from(v)),
            "erank_threshold" => self.erank_threshold = value(key, v)?,
            "probe_scenes" => self.probe_scenes = value(key, v)?,
            "probe_steps" => self.probe_steps = value(key, v)?,
            "probe_lr" => self.probe_lr = value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        let mut out = self.train.entries();
        out.extend(scene_entries(&self.scene));
        let e = |k: &str, v: String| (k.to_string(), v);
        out.extend([
            e("dataset", self.dataset.to_string()),
            e("scenes", self.scenes.to_string()),
            e("data_seed", show_optional(&self.data_seed, "auto")),
            e("checkpoint_every", self.checkpoint_every.to_string()),
            e("eval_scenes", self.eval_scenes.to_string()),
            e("eval_seed", show_optional(&self.eval_seed, "auto")),
            e(
                "eval_dataset",
                self.eval_dataset.as_ref().map_or("none".into(), |p| p.display().to_string()),
            ),
            e("erank_threshold", self.erank_threshold.to_string()),
            e("probe_scenes", self.probe_scenes.to_string()),
            e("probe_steps", self.probe_steps.to_string()),
            e("probe_lr", self.probe_lr.to_string()),
        ]);
        out
    }
}

impl RunConfig {
    /// Sets a key that must exist.
    pub fn assign(&mut self, key: &str, v: &str, source: &str) -> Result<()> {
        if self.set(key, v)? {
            Ok(())
        } else {
            Err(CoreError::Config(format!("{source}: unknown key '{key}'")))
        }
    }

    pub fn apply_profile(&mut self, name: &str) -> Result<()> {
        for (k, v) in profile_entries(name)? {
            self.assign(k, v, &format!("profile {name}"))?;
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<()> {
        for a in parse_assignments(text, source)? {
            self.assign(&a.key, &a.value, &format!("{source}:{}", a.line))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.scene.validate()?;
        let bad = |m: &str| Err(CoreError::Config(m.to_string()));
        if self.scenes == 0 {
            return bad("scenes must be at least 1");
        }
        if self.eval_scenes == 0 || self.probe_scenes == 0 {
            return bad("eval_scenes and probe_scenes must be at least 1");
        }
        if !(self.probe_lr > 0.0) {
            return bad("probe_lr must be positive");
        }
        if !self.erank_threshold.is_finite() || self.erank_threshold < 0.0 {
            return bad("erank_threshold must be a non-negative number");
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        render(&self.entries())
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.train.seed)
    }

    pub fn eval_seed(&self) -> u64 {
        self.eval_seed
            .unwrap_or_else(|| mix_key(Stream::Scene, &[self.train.seed, 0x6576_616c]))
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            steps: self.probe_steps,
            lr: self.probe_lr,
            seed: self.train.seed,
        }
    }

    pub fn train_dataset(&self) -> Result<Dataset> {
        let grid = self.train.model.grid.clone();
        match &self.dataset {
            DatasetSource::Synthetic => Dataset::synthetic(self.scenes, self.data_seed(), &self.scene, grid),
            DatasetSource::Dir(dir) => Dataset::from_kitti_dir(dir, grid),
        }
    }

    pub fn eval_dataset(&self) -> Result<Dataset> {
        let grid = self.train.model.grid.clone();
        match &self.eval_dataset {
            None => Dataset::synthetic(self.eval_scenes, self.eval_seed(), &self.scene, grid),
            Some(dir) => Dataset::from_kitti_dir(dir, grid),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendered_config_reproduces_itself() {
        let mut c = RunConfig::default();
        c.apply_profile("tiny").unwrap();
        c.assign("scene_beams", "24", "t").unwrap();
        c.assign("dataset", "/tmp/scans", "t").unwrap();
        c.assign("eval_seed", "9", "t").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.render(), "echo").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_and_profiles_are_errors() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("learning_rate = 1\n", "t").is_err());
        assert!(c.apply_profile("huge").is_err());
    }

    #[test]
    fn scene_range_follows_the_grid() {
        let mut c = RunConfig::default();
        c.assign("range_x", "-20,20", "t").unwrap();
        assert_eq!(c.scene.range, c.train.model.grid.range);
        assert_eq!(c.scene.range.min[0], -20.0);
    }
}
