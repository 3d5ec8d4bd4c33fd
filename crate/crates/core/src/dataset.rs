//! In-memory scene collections ready for training and evaluation.

use std::path::Path;

use crate::bev::{occupancy_of_cloud, BevOccupancy, GridSpec};
use crate::data::{crop_to_range, generate_scene, read_kitti_bin, PointCloud, SceneAnnotation, SceneConfig};
use crate::rng::{mix_key, Stream};
use crate::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedScene {
    /// Cropped to the grid range.
    pub cloud: PointCloud,
    pub occupancy: BevOccupancy,
    pub annotation: Option<SceneAnnotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid: GridSpec,
    pub scenes: Vec<PreparedScene>,
}

/// Seed of synthetic scene `index` in a dataset generated from `seed`.
pub fn synthetic_scene_seed(seed: u64, index: usize) -> u64 {
    mix_key(Stream::Scene, &[seed, index as u64])
}

impl Dataset {
    pub fn from_scenes(grid: GridSpec, scenes: Vec<(PointCloud, Option<SceneAnnotation>)>) -> Result<Self> {
        grid.validate()?;
        let scenes = scenes
            .into_iter()
            .map(|(cloud, annotation)| {
                let cloud = crop_to_range(&cloud, &grid.range);
                let occupancy = occupancy_of_cloud(&cloud, &grid)?;
                Ok(PreparedScene {
                    cloud,
                    occupancy,
                    annotation,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { grid, scenes })
    }

    pub fn synthetic(count: usize, seed: u64, scene: &SceneConfig, grid: GridSpec) -> Result<Self> {
        let scenes = (0..count)
            .map(|i| generate_scene(synthetic_scene_seed(seed, i), scene).map(|(c, a)| (c, Some(a))))
            .collect::<Result<_>>()?;
        Self::from_scenes(grid, scenes)
    }

    /// Every `*.bin` in `dir`, sorted by name, with `.ann` sidecars when present.
    pub fn from_kitti_dir(dir: &Path, grid: GridSpec) -> Result<Self> {
        let mut bins: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| CoreError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "bin"))
            .collect();
        bins.sort();
        if bins.is_empty() {
            return Err(CoreError::Config(format!("no .bin files in {}", dir.display())));
        }
        let scenes = bins
            .iter()
            .map(|p| {
                let cloud = read_kitti_bin(p)?;
                let ann_path = p.with_extension("ann");
                let ann = if ann_path.exists() {
                    Some(SceneAnnotation::read(&ann_path)?)
                } else {
                    None
                };
                Ok((cloud, ann))
            })
            .collect::<Result<_>>()?;
        Self::from_scenes(grid, scenes)
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}
