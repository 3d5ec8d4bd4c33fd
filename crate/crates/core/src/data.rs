//! Scenes: a ray-cast synthetic street generator and KITTI `.bin` ingestion.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::rng::{keyed_rng, Stream};
use crate::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn coords(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub scene_id: String,
}

impl PointCloud {
    pub fn new(scene_id: impl Into<String>, points: Vec<Point>) -> Self {
        Self {
            points,
            scene_id: scene_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Per-axis half-open interval `[min, max)` in metres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneRange {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for SceneRange {
    fn default() -> Self {
        Self {
            min: [-16.0, -16.0, -2.0],
            max: [16.0, 16.0, 2.0],
        }
    }
}

impl SceneRange {
    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.min[a].is_finite() && self.max[a].is_finite() && self.min[a] < self.max[a]) {
                return Err(CoreError::Config(format!(
                    "range axis {a}: need finite min < max, got [{}, {})",
                    self.min[a], self.max[a]
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &Point) -> bool {
        let c = p.coords();
        (0..3).all(|a| c[a] >= self.min[a] && c[a] < self.max[a])
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectClass {
    Car,
    Pedestrian,
    Cyclist,
}

impl ObjectClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectClass::Car => "car",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Cyclist => "cyclist",
        }
    }

    /// Nominal (length, width, height) in metres.
    fn nominal_extents(self) -> [f64; 3] {
        match self {
            ObjectClass::Car => [4.2, 1.8, 1.55],
            ObjectClass::Pedestrian => [0.7, 0.7, 1.75],
            ObjectClass::Cyclist => [1.8, 0.7, 1.7],
        }
    }

    fn reflectivity(self) -> f64 {
        match self {
            ObjectClass::Car => 0.55,
            ObjectClass::Pedestrian => 0.35,
            ObjectClass::Cyclist => 0.45,
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectClass {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "car" => Ok(ObjectClass::Car),
            "pedestrian" => Ok(ObjectClass::Pedestrian),
            "cyclist" => Ok(ObjectClass::Cyclist),
            other => Err(CoreError::Config(format!("unknown object class '{other}'"))),
        }
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectBox {
    pub center: [f64; 3],
    pub extents: [f64; 3],
    pub class: ObjectClass,
}

impl ObjectBox {
    pub fn min(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.center[a] - 0.5 * self.extents[a])
    }

    pub fn max(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.center[a] + 0.5 * self.extents[a])
    }

    /// Closed containment with a small tolerance for points lying on faces.
    pub fn contains(&self, p: &Point) -> bool {
        const TOL: f64 = 1e-9;
        let (lo, hi, c) = (self.min(), self.max(), p.coords());
        (0..3).all(|a| c[a] >= lo[a] - TOL && c[a] <= hi[a] + TOL)
    }

    pub fn intersects(&self, range: &SceneRange) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|a| hi[a] > range.min[a] && lo[a] < range.max[a])
    }

    /// Ray entry distance for a ray from the origin along unit `dir`.
    fn ray_entry(&self, dir: [f64; 3]) -> Option<f64> {
        let (lo, hi) = (self.min(), self.max());
        let mut t0 = 0.0_f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-12 {
                if lo[a] > 0.0 || hi[a] < 0.0 {
                    return None;
                }
                continue;
            }
            let (mut ta, mut tb) = (lo[a] / dir[a], hi[a] / dir[a]);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 <= t1 && t0 > 0.0).then_some(t0)
    }

    fn footprint_overlaps(&self, other: &ObjectBox, gap: f64) -> bool {
        (0..2).all(|a| {
            (self.center[a] - other.center[a]).abs() < 0.5 * (self.extents[a] + other.extents[a]) + gap
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneAnnotation {
    pub boxes: Vec<ObjectBox>,
}

impl SceneAnnotation {
    /// One box per line: `class cx cy cz dx dy dz`.
    pub fn to_text(&self) -> String {
        self.boxes
            .iter()
            .map(|b| {
                format!(
                    "{} {} {} {} {} {} {}\n",
                    b.class, b.center[0], b.center[1], b.center[2], b.extents[0], b.extents[1], b.extents[2]
                )
            })
            .collect()
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut boxes = Vec::new();
        let mut offset = 0u64;
        for line in text.lines() {
            let start = offset;
            offset += line.len() as u64 + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |detail: String| CoreError::Format {
                path: source.to_string(),
                offset: start,
                detail,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 7 {
                return Err(bad(format!("expected 7 fields, found {}", fields.len())));
            }
            let class = fields[0].parse::<ObjectClass>().map_err(|e| bad(e.to_string()))?;
            let mut nums = [0.0; 6];
            for (n, f) in nums.iter_mut().zip(&fields[1..]) {
                *n = f.parse().map_err(|_| bad(format!("not a number: '{f}'")))?;
            }
            boxes.push(ObjectBox {
                center: [nums[0], nums[1], nums[2]],
                extents: [nums[3], nums[4], nums[5]],
                class,
            });
        }
        Ok(Self { boxes })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| CoreError::io(path, e))
    }
}

/// Synthetic scene parameters.
///
/// The sensor sits at the origin above a flat ground plane. Rays are cast on
/// a regular elevation × azimuth lattice; each ray returns its first hit on
/// an object box or the ground, so objects only show their sensor-facing
/// faces and cast shadows behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub range: SceneRange,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_points_per_object: usize,
    pub beams: usize,
    pub beam_min_deg: f64,
    pub beam_max_deg: f64,
    pub azimuth_steps: usize,
    pub sensor_height_min: f64,
    pub sensor_height_max: f64,
    /// Ground returns thin out linearly between these radii.
    pub ground_falloff_start: f64,
    pub ground_falloff_end: f64,
    pub object_distance_min: f64,
    pub object_distance_max: f64,
    /// Scene-wide reflectivity multiplier range.
    pub gain_min: f64,
    pub gain_max: f64,
    pub range_noise: f64,
    pub dropout: f64,
    pub noise_points: usize,
    pub max_points: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            range: SceneRange::default(),
            min_objects: 2,
            max_objects: 6,
            min_points_per_object: 10,
            beams: 16,
            beam_min_deg: -15.0,
            beam_max_deg: 15.0,
            azimuth_steps: 720,
            sensor_height_min: 1.5,
            sensor_height_max: 1.9,
            ground_falloff_start: 8.0,
            ground_falloff_end: 14.0,
            object_distance_min: 5.0,
            object_distance_max: 14.0,
            gain_min: 0.5,
            gain_max: 1.0,
            range_noise: 0.02,
            dropout: 0.05,
            noise_points: 24,
            max_points: 20_000,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.range.validate()?;
        let bad = |m: &str| Err(CoreError::Config(m.to_string()));
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects");
        }
        if self.beams == 0 || self.azimuth_steps == 0 {
            return bad("beams and azimuth_steps must be positive");
        }
        if !(self.beam_min_deg < self.beam_max_deg) || self.beam_min_deg <= -90.0 || self.beam_max_deg >= 90.0 {
            return bad("beam elevations must satisfy -90 < min < max < 90");
        }
        if !(0.0 < self.sensor_height_min && self.sensor_height_min <= self.sensor_height_max) {
            return bad("sensor heights must satisfy 0 < min <= max");
        }
        if !(0.0 < self.object_distance_min && self.object_distance_min < self.object_distance_max) {
            return bad("object distances must satisfy 0 < min < max");
        }
        if !(self.ground_falloff_start < self.ground_falloff_end) {
            return bad("ground falloff start must be below its end");
        }
        if !(0.0 < self.gain_min && self.gain_min <= self.gain_max) {
            return bad("gain range must satisfy 0 < min <= max");
        }
        if !(0.0..1.0).contains(&self.dropout) || self.range_noise < 0.0 {
            return bad("dropout must lie in [0,1) and range_noise be non-negative");
        }
        if self.max_points == 0 {
            return bad("max_points must be positive");
        }
        Ok(())
    }

    /// z interval holding every ground return, with margin for range noise.
    pub fn ground_band(&self) -> (f64, f64) {
        let margin = 4.0 * self.range_noise + 1e-9;
        (-self.sensor_height_max - margin, -self.sensor_height_min + margin)
    }
}

const PLACEMENT_ATTEMPTS: usize = 16;

/// Deterministic synthetic scene. Noise points, if any, come last in the list.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<(PointCloud, SceneAnnotation)> {
    config.validate()?;
    let mut rng = keyed_rng(Stream::Scene, &[seed]);
    let height = rng.gen_range(config.sensor_height_min..=config.sensor_height_max);
    let gain = rng.gen_range(config.gain_min..=config.gain_max);
    let ground_refl = rng.gen_range(0.12..0.2);
    let azimuth_offset = rng.gen_range(0.0..2.0 * PI / config.azimuth_steps as f64);
    let n_objects = rng.gen_range(config.min_objects..=config.max_objects);

    let mut boxes = Vec::new();
    let mut points = Vec::new();
    for attempt in 0..PLACEMENT_ATTEMPTS {
        boxes = place_objects(&mut rng, config, n_objects, height);
        points = cast_rays(&mut rng, config, &boxes, height, gain, ground_refl, azimuth_offset);
        let starved = boxes
            .iter()
            .any(|b| points.iter().filter(|p| b.contains(p)).count() < config.min_points_per_object);
        if !starved {
            break;
        }
        if attempt + 1 == PLACEMENT_ATTEMPTS {
            // keep the points, drop annotations that cannot meet the floor
            boxes.retain(|b| points.iter().filter(|p| b.contains(p)).count() >= config.min_points_per_object);
        }
    }

    let keep = config.max_points.saturating_sub(config.noise_points);
    if points.len() > keep {
        points = thin_ground_first(&mut rng, points, &boxes, keep);
    }

    let r = config.range;
    for _ in 0..config.noise_points {
        let p = Point::new(
            rng.gen_range(r.min[0]..r.max[0]),
            rng.gen_range(r.min[1]..r.max[1]),
            rng.gen_range(r.min[2]..r.max[2]),
            rng.gen_range(0.0..1.0),
        );
        points.push(p);
    }
    let cloud = PointCloud::new(format!("synthetic_{seed:016x}"), points);
    Ok((cloud, SceneAnnotation { boxes }))
}

/// Uniformly subsamples to `keep` points, taking ground returns before object
/// returns so the per-box floor survives whenever it can. Order is preserved.
fn thin_ground_first(rng: &mut impl Rng, points: Vec<Point>, boxes: &[ObjectBox], keep: usize) -> Vec<Point> {
    let on_object: Vec<bool> = points.iter().map(|p| boxes.iter().any(|b| b.contains(p))).collect();
    let (obj, ground): (Vec<usize>, Vec<usize>) = (0..points.len()).partition(|&i| on_object[i]);
    let mut chosen: Vec<usize> = if obj.len() >= keep {
        index::sample(rng, obj.len(), keep).into_iter().map(|i| obj[i]).collect()
    } else {
        let mut c = obj.clone();
        c.extend(index::sample(rng, ground.len(), keep - obj.len()).into_iter().map(|i| ground[i]));
        c
    };
    chosen.sort_unstable();
    chosen.into_iter().map(|i| points[i]).collect()
}

fn place_objects(rng: &mut impl Rng, config: &SceneConfig, n: usize, height: f64) -> Vec<ObjectBox> {
    let mut boxes: Vec<ObjectBox> = Vec::with_capacity(n);
    if n == 0 {
        return boxes;
    }
    let sector = 2.0 * PI / n as f64;
    let start = rng.gen_range(0.0..2.0 * PI);
    let r = config.range;
    for k in 0..n {
        let u: f64 = rng.gen();
        let class = if u < 0.6 {
            ObjectClass::Car
        } else if u < 0.85 {
            ObjectClass::Pedestrian
        } else {
            ObjectClass::Cyclist
        };
        for _ in 0..PLACEMENT_ATTEMPTS {
            let scale = rng.gen_range(0.9..1.1);
            let mut ext = class.nominal_extents().map(|e| e * scale);
            if rng.gen_bool(0.5) {
                ext.swap(0, 1);
            }
            let az = start + sector * (k as f64 + rng.gen_range(0.2..0.8));
            let dist = rng.gen_range(config.object_distance_min..config.object_distance_max);
            let c = [dist * az.cos(), dist * az.sin(), -height + 0.5 * ext[2]];
            let b = ObjectBox {
                center: c,
                extents: ext,
                class,
            };
            let (lo, hi) = (b.min(), b.max());
            let inside = (0..2).all(|a| lo[a] >= r.min[a] && hi[a] < r.max[a]);
            let clear = boxes.iter().all(|o| !b.footprint_overlaps(o, 0.5));
            let off_sensor = lo[0] > 0.5 || hi[0] < -0.5 || lo[1] > 0.5 || hi[1] < -0.5;
            if inside && clear && off_sensor {
                boxes.push(b);
                break;
            }
        }
    }
    boxes
}

fn cast_rays(
    rng: &mut impl Rng,
    config: &SceneConfig,
    boxes: &[ObjectBox],
    height: f64,
    gain: f64,
    ground_refl: f64,
    azimuth_offset: f64,
) -> Vec<Point> {
    let noise = Normal::new(0.0, config.range_noise.max(1e-300)).expect("finite std");
    let mut points = Vec::new();
    let beams = config.beams;
    for b in 0..beams {
        let frac = if beams == 1 { 0.5 } else { b as f64 / (beams - 1) as f64 };
        let elev = (config.beam_min_deg + frac * (config.beam_max_deg - config.beam_min_deg)).to_radians();
        for a in 0..config.azimuth_steps {
            let az = azimuth_offset + 2.0 * PI * a as f64 / config.azimuth_steps as f64;
            let dir = [elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin()];
            let mut hit: Option<(f64, Option<&ObjectBox>)> = None;
            if dir[2] < 0.0 {
                hit = Some((-height / dir[2], None));
            }
            for bx in boxes {
                if let Some(t) = bx.ray_entry(dir) {
                    if hit.map_or(true, |(th, _)| t < th) {
                        hit = Some((t, Some(bx)));
                    }
                }
            }
            let Some((t, obj)) = hit else { continue };
            if rng.gen::<f64>() < config.dropout {
                continue;
            }
            let p = match obj {
                Some(bx) => {
                    let refl = (bx.class.reflectivity() + rng.gen_range(-0.1..0.1)) * gain;
                    Point::new(t * dir[0], t * dir[1], t * dir[2], refl.clamp(0.0, 1.0))
                }
                None => {
                    let radial = t * elev.cos();
                    let keep = 1.0
                        - ((radial - config.ground_falloff_start)
                            / (config.ground_falloff_end - config.ground_falloff_start))
                            .clamp(0.0, 1.0);
                    if rng.gen::<f64>() >= keep {
                        continue;
                    }
                    let tn = t + noise.sample(rng);
                    let refl = (ground_refl + rng.gen_range(-0.05..0.05)) * gain;
                    Point::new(tn * dir[0], tn * dir[1], tn * dir[2], refl.clamp(0.0, 1.0))
                }
            };
            if config.range.contains(&p) {
                points.push(p);
            }
        }
    }
    points
}

/// Keeps points inside the half-open range, preserving order.
pub fn crop_to_range(cloud: &PointCloud, range: &SceneRange) -> PointCloud {
    PointCloud::new(
        cloud.scene_id.clone(),
        cloud.points.iter().filter(|p| range.contains(p)).copied().collect(),
    )
}

/// Parses KITTI velodyne bytes. Returns the cloud and the number of records
/// dropped for holding non-finite values.
pub fn parse_kitti_bin(bytes: &[u8], scene_id: &str) -> Result<(PointCloud, usize)> {
    if bytes.len() % 16 != 0 {
        return Err(CoreError::Format {
            path: scene_id.to_string(),
            offset: (bytes.len() - bytes.len() % 16) as u64,
            detail: format!("length {} is not a multiple of 16 (truncated record)", bytes.len()),
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut dropped = 0;
    for rec in bytes.chunks_exact(16) {
        let v: [f64; 4] = std::array::from_fn(|i| {
            f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().expect("4-byte slice")) as f64
        });
        if v.iter().any(|x| !x.is_finite()) {
            dropped += 1;
            continue;
        }
        points.push(Point::new(v[0], v[1], v[2], v[3].clamp(0.0, 1.0)));
    }
    Ok((PointCloud::new(scene_id, points), dropped))
}

pub fn read_kitti_bin(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let id = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let (cloud, dropped) = parse_kitti_bin(&bytes, &id).map_err(|e| match e {
        CoreError::Format { offset, detail, .. } => CoreError::Format {
            path: path.display().to_string(),
            offset,
            detail,
        },
        other => other,
    })?;
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} records with non-finite values", path.display());
    }
    Ok(cloud)
}

pub fn kitti_bytes(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_kitti_bin(cloud: &PointCloud, path: &Path) -> Result<()> {
    std::fs::write(path, kitti_bytes(cloud)).map_err(|e| CoreError::io(path, e))
}
