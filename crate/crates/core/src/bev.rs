//! Voxel grid, dense voxel features and BEV occupancy.

use adljepa_autodiff::Tensor;

use crate::data::{Point, PointCloud, SceneRange};
use crate::{CoreError, Result};

pub const FEATURE_CHANNELS: usize = 4;
/// Point count at which the count channel saturates.
pub const COUNT_SATURATION: f64 = 16.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub range: SceneRange,
    pub downsample: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            dims: [64, 64, 16],
            range: SceneRange::default(),
            downsample: 8,
        }
    }
}

impl GridSpec {
    pub fn new(dims: [usize; 3], range: SceneRange, downsample: usize) -> Result<Self> {
        let spec = Self {
            dims,
            range,
            downsample,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.range.validate()?;
        if self.downsample == 0 {
            return Err(CoreError::Config("downsample must be positive".into()));
        }
        for (a, &d) in self.dims.iter().enumerate() {
            if d == 0 || d % self.downsample != 0 {
                return Err(CoreError::Config(format!(
                    "grid axis {a} extent {d} is not a positive multiple of downsample {}",
                    self.downsample
                )));
            }
        }
        Ok(())
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.range.extent(a) / self.dims[a] as f64)
    }

    /// `(H, W, D)` of the downsampled grid.
    pub fn bev_dims(&self) -> (usize, usize, usize) {
        let s = self.downsample;
        (self.dims[0] / s, self.dims[1] / s, self.dims[2] / s)
    }

    pub fn bev_cells(&self) -> usize {
        let (h, w, _) = self.bev_dims();
        h * w
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    /// Voxel index of an in-range point.
    pub fn voxel_of(&self, p: &Point) -> Result<[usize; 3]> {
        if !self.range.contains(p) {
            return Err(CoreError::Contract(format!(
                "point ({}, {}, {}) lies outside the grid range; crop first",
                p.x, p.y, p.z
            )));
        }
        let size = self.voxel_size();
        let c = p.coords();
        Ok(std::array::from_fn(|a| {
            let i = ((c[a] - self.range.min[a]) / size[a]).floor() as usize;
            // rounding can push a point just below max onto the extent
            i.min(self.dims[a] - 1)
        }))
    }

    pub fn flat_voxel(&self, v: [usize; 3]) -> usize {
        (v[0] * self.dims[1] + v[1]) * self.dims[2] + v[2]
    }
}

/// `[4, X, Y, Z]` voxel features: saturated count, mean intensity, mean
/// in-voxel relative height, occupied flag.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelFeatures {
    pub tensor: Tensor,
}

impl VoxelFeatures {
    pub fn occupied(&self, flat_voxel: usize) -> bool {
        let v = self.tensor.numel() / FEATURE_CHANNELS;
        self.tensor.data()[3 * v + flat_voxel] != 0.0
    }
}

pub fn voxelize(cloud: &PointCloud, spec: &GridSpec) -> Result<VoxelFeatures> {
    let nv = spec.voxel_count();
    let size = spec.voxel_size();
    let mut keyed = Vec::with_capacity(cloud.len());
    for p in &cloud.points {
        let v = spec.voxel_of(p)?;
        keyed.push((spec.flat_voxel(v), v[2], p));
    }
    // canonical order makes the floating-point sums permutation invariant
    keyed.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.2.x.total_cmp(&b.2.x))
            .then(a.2.y.total_cmp(&b.2.y))
            .then(a.2.z.total_cmp(&b.2.z))
            .then(a.2.intensity.total_cmp(&b.2.intensity))
    });
    let mut data = vec![0.0; FEATURE_CHANNELS * nv];
    let mut i = 0;
    while i < keyed.len() {
        let (flat, vz, _) = keyed[i];
        let z0 = spec.range.min[2] + vz as f64 * size[2];
        let (mut n, mut si, mut sz) = (0usize, 0.0, 0.0);
        while i < keyed.len() && keyed[i].0 == flat {
            let p = keyed[i].2;
            n += 1;
            si += p.intensity;
            sz += ((p.z - z0) / size[2]).clamp(0.0, 1.0);
            i += 1;
        }
        data[flat] = (n as f64).min(COUNT_SATURATION) / COUNT_SATURATION;
        data[nv + flat] = si / n as f64;
        data[2 * nv + flat] = sz / n as f64;
        data[3 * nv + flat] = 1.0;
    }
    let [x, y, z] = spec.dims;
    Ok(VoxelFeatures {
        tensor: Tensor::new(vec![FEATURE_CHANNELS, x, y, z], data)?,
    })
}

/// Row-major `[H, W]` occupancy of BEV cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BevOccupancy {
    pub h: usize,
    pub w: usize,
    pub cells: Vec<bool>,
}

impl BevOccupancy {
    pub fn new(h: usize, w: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != h * w {
            return Err(CoreError::Shape(format!("{} cells for a {h}x{w} grid", cells.len())));
        }
        Ok(Self { h, w, cells })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            cells: vec![false; h * w],
        }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn is_occupied(&self, h: usize, w: usize) -> bool {
        self.cells[h * self.w + w]
    }

    pub fn count_occupied(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn non_empty_indices(&self) -> Vec<usize> {
        (0..self.cells.len()).filter(|&i| self.cells[i]).collect()
    }

    pub fn empty_indices(&self) -> Vec<usize> {
        (0..self.cells.len()).filter(|&i| !self.cells[i]).collect()
    }
}

pub fn bev_occupancy(features: &VoxelFeatures, spec: &GridSpec) -> Result<BevOccupancy> {
    let [x, y, z] = spec.dims;
    if features.tensor.shape() != [FEATURE_CHANNELS, x, y, z] {
        return Err(CoreError::Shape(format!(
            "features {:?} do not match grid {:?}",
            features.tensor.shape(),
            spec.dims
        )));
    }
    let (h, w, _) = spec.bev_dims();
    let s = spec.downsample;
    let nv = spec.voxel_count();
    let flags = &features.tensor.data()[3 * nv..];
    let mut cells = vec![false; h * w];
    for ix in 0..x {
        for iy in 0..y {
            let col = (ix * y + iy) * z;
            if flags[col..col + z].iter().any(|&f| f != 0.0) {
                cells[(ix / s) * w + iy / s] = true;
            }
        }
    }
    BevOccupancy::new(h, w, cells)
}

pub fn bev_cell_of_point(p: &Point, spec: &GridSpec) -> Result<(usize, usize)> {
    let v = spec.voxel_of(p)?;
    Ok((v[0] / spec.downsample, v[1] / spec.downsample))
}

/// Occupancy straight from points, without building features.
pub fn occupancy_of_cloud(cloud: &PointCloud, spec: &GridSpec) -> Result<BevOccupancy> {
    let (h, w, _) = spec.bev_dims();
    let mut occ = BevOccupancy::empty(h, w);
    for p in &cloud.points {
        let (ch, cw) = bev_cell_of_point(p, spec)?;
        occ.cells[ch * w + cw] = true;
    }
    Ok(occ)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_grid() {
        assert!(GridSpec::new([64, 60, 16], SceneRange::default(), 8).is_err());
        let g = GridSpec::new([64, 64, 16], SceneRange::default(), 8).unwrap();
        assert_eq!(g.bev_dims(), (8, 8, 2));
        assert_eq!(g.voxel_size(), [0.5, 0.5, 0.25]);
    }

    #[test]
    fn just_below_max_maps_to_last_voxel() {
        let g = GridSpec::default();
        let p = Point::new(16.0_f64.next_down(), 16.0_f64.next_down(), 2.0_f64.next_down(), 0.0);
        assert_eq!(g.voxel_of(&p).unwrap(), [63, 63, 15]);
        assert!(g.voxel_of(&Point::new(16.0, 0.0, 0.0, 0.0)).is_err());
    }
}
