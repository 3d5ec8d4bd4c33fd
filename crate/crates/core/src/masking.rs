//! BEV-guided masking over both non-empty and empty cells.

use rand::seq::index;

use crate::bev::{bev_cell_of_point, BevOccupancy, GridSpec};
use crate::data::PointCloud;
use crate::rng::{keyed_rng, Stream};
use crate::{CoreError, Result};

/// Per-scene masking decision. Index vectors hold row-major cell indices in
/// ascending order: `k` unmasked non-empty, `q` masked non-empty, `p` masked
/// empty, `u` unmasked empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BevMaskPlan {
    pub occupancy: BevOccupancy,
    pub masked: Vec<bool>,
    pub k: Vec<usize>,
    pub q: Vec<usize>,
    pub p: Vec<usize>,
    pub u: Vec<usize>,
}

impl BevMaskPlan {
    pub fn from_flags(occupancy: BevOccupancy, masked: Vec<bool>) -> Result<Self> {
        if masked.len() != occupancy.len() {
            return Err(CoreError::Shape(format!(
                "{} mask flags for {} cells",
                masked.len(),
                occupancy.len()
            )));
        }
        let (mut k, mut q, mut p, mut u) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (i, (&occ, &m)) in occupancy.cells.iter().zip(&masked).enumerate() {
            match (occ, m) {
                (true, false) => k.push(i),
                (true, true) => q.push(i),
                (false, true) => p.push(i),
                (false, false) => u.push(i),
            }
        }
        Ok(Self {
            occupancy,
            masked,
            k,
            q,
            p,
            u,
        })
    }

    /// Nothing masked; used for evaluation passes.
    pub fn unmasked(occupancy: BevOccupancy) -> Self {
        let n = occupancy.len();
        Self::from_flags(occupancy, vec![false; n]).expect("lengths agree")
    }

    pub fn cells(&self) -> usize {
        self.masked.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskOptions {
    pub ratio: f64,
    /// When false only non-empty cells are masked.
    pub mask_empty_cells: bool,
}

impl Default for MaskOptions {
    fn default() -> Self {
        Self {
            ratio: 0.5,
            mask_empty_cells: true,
        }
    }
}

/// Number of cells to mask out of `n`. Exact halves round up for non-empty
/// cells and down for empty cells.
pub fn masked_count(n: usize, ratio: f64, non_empty: bool) -> usize {
    let x = ratio * n as f64;
    let fl = x.floor();
    let frac = x - fl;
    let c = if (frac - 0.5).abs() < 1e-9 {
        if non_empty {
            fl + 1.0
        } else {
            fl
        }
    } else {
        x.round()
    };
    (c as usize).min(n)
}

pub fn sample_mask(occupancy: &BevOccupancy, opts: MaskOptions, seed: u64) -> Result<BevMaskPlan> {
    if !(opts.ratio > 0.0 && opts.ratio < 1.0) {
        return Err(CoreError::Config(format!("masking ratio {} outside (0, 1)", opts.ratio)));
    }
    let mut rng = keyed_rng(Stream::Mask, &[seed]);
    let mut masked = vec![false; occupancy.len()];
    let non_empty = occupancy.non_empty_indices();
    if non_empty.is_empty() {
        log::warn!("scene has no non-empty BEV cells; nothing to predict");
    }
    let nq = masked_count(non_empty.len(), opts.ratio, true);
    for i in index::sample(&mut rng, non_empty.len(), nq) {
        masked[non_empty[i]] = true;
    }
    if opts.mask_empty_cells {
        let empty = occupancy.empty_indices();
        let np = masked_count(empty.len(), opts.ratio, false);
        for i in index::sample(&mut rng, empty.len(), np) {
            masked[empty[i]] = true;
        }
    }
    BevMaskPlan::from_flags(occupancy.clone(), masked)
}

/// Mask seed for one scene of one epoch; independent of batch composition.
pub fn scene_mask_seed(global_seed: u64, epoch: u64, scene_index: u64) -> u64 {
    crate::rng::mix_key(Stream::Mask, &[global_seed, epoch, scene_index])
}

/// Splits a cloud into visible points (unmasked cells) and hidden points
/// (masked non-empty cells).
pub fn partition_points(cloud: &PointCloud, plan: &BevMaskPlan, spec: &GridSpec) -> Result<(PointCloud, PointCloud)> {
    let (h, w, _) = spec.bev_dims();
    if plan.occupancy.h != h || plan.occupancy.w != w {
        return Err(CoreError::Shape(format!(
            "plan is {}x{}, grid BEV is {h}x{w}",
            plan.occupancy.h, plan.occupancy.w
        )));
    }
    let mut visible = Vec::new();
    let mut hidden = Vec::new();
    for p in &cloud.points {
        let (ch, cw) = bev_cell_of_point(p, spec)?;
        let cell = ch * w + cw;
        if !plan.occupancy.cells[cell] {
            return Err(CoreError::Contract(format!(
                "point in cell ({ch}, {cw}) which the plan marks empty"
            )));
        }
        if plan.masked[cell] {
            hidden.push(*p);
        } else {
            visible.push(*p);
        }
    }
    Ok((
        PointCloud::new(cloud.scene_id.clone(), visible),
        PointCloud::new(cloud.scene_id.clone(), hidden),
    ))
}
