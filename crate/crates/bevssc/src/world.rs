//! Deterministic procedural scenes and sensor simulation. A scene is a
//! ground plane plus boxes/cylinders labeled by class; LiDAR, radar, and
//! cameras all observe it through the same voxel raycast. Every output is a
//! pure function of `(seed, config)`; each sensor draws from its own RNG
//! stream so condition tags degrade only the sensors they claim to.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::path::Path;

use crate::error::{Error, Result};
use crate::lcr1::{Lcr1File, Lcr1Writer};
use crate::types::{
    CameraBundle, CameraView, ConditionTag, GridConfig, LabelTable, PointCloud, PointKind,
    VoxelGrid,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarConfig {
    pub beams: usize,
    pub points_per_beam: usize,
    pub max_range: f64,
    /// Per-ray drop probability; rain adds `rain_extra_dropout`.
    pub dropout: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarConfig {
    /// Hard cap on returned points.
    pub budget: usize,
    pub pos_noise: f64,
    pub vel_noise: f64,
    /// Detection probability at zero range; decays linearly to 0 at
    /// `detect_range`.
    pub detect_base: f64,
    pub detect_range: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    pub views: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub height: f64,
    /// Focal length in pixels (fx = fy).
    pub focal: f64,
    pub max_range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub grid: GridConfig,
    pub labels: LabelTable,
    /// Voxel centers below this height are ground.
    pub ground_height: f64,
    /// `(min, max)` object count per semantic class after ground
    /// (class ids 2..).
    pub objects: Vec<(usize, usize)>,
    /// Fraction of empty voxels relabeled as noise.
    pub noise_fraction: f64,
    pub lidar: LidarConfig,
    pub radar: RadarConfig,
    pub camera: CameraConfig,
    pub condition: ConditionTag,
    pub rain_extra_dropout: f64,
    pub rain_camera_contrast: f64,
    pub night_camera_contrast: f64,
}

impl WorldConfig {
    /// Small CPU-friendly default world.
    pub fn desk_scale() -> Self {
        WorldConfig {
            grid: GridConfig::desk_scale(),
            labels: LabelTable::desk_scale(),
            ground_height: 0.0,
            // wall, car, pole, vegetation
            objects: vec![(1, 2), (1, 3), (1, 3), (1, 3)],
            noise_fraction: 0.002,
            lidar: LidarConfig {
                beams: 12,
                points_per_beam: 180,
                max_range: 12.0,
                dropout: 0.05,
                height: 1.2,
            },
            radar: RadarConfig {
                budget: 48,
                pos_noise: 0.10,
                vel_noise: 0.20,
                detect_base: 0.95,
                detect_range: 12.0,
                height: 0.8,
            },
            camera: CameraConfig {
                views: 2,
                image_h: 32,
                image_w: 32,
                height: 1.4,
                focal: 32.0,
                max_range: 12.0,
            },
            condition: ConditionTag::Sun,
            rain_extra_dropout: 0.30,
            rain_camera_contrast: 0.70,
            night_camera_contrast: 0.40,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        for p in [
            self.lidar.dropout,
            self.radar.detect_base,
            self.noise_fraction,
            self.rain_extra_dropout,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("probability {p} outside [0, 1]")));
            }
        }
        if self.radar.pos_noise < 0.0 || self.radar.vel_noise < 0.0 {
            return Err(Error::config("radar noise σ must be ≥ 0"));
        }
        if self.camera.views == 0 {
            return Err(Error::config("at least one camera view required"));
        }
        if self.objects.len() + 1 != self.labels.num_semantic() {
            return Err(Error::config(format!(
                "object count ranges ({}) must cover every non-ground class ({})",
                self.objects.len(),
                self.labels.num_semantic() - 1
            )));
        }
        if self.objects.iter().any(|&(lo, hi)| lo > hi) {
            return Err(Error::config("object count min > max"));
        }
        Ok(())
    }
}

/// A placed primitive with its class and ground-plane velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub class: u16,
    pub center: [f64; 3],
    pub half: [f64; 3],
    pub cylinder: bool,
    pub velocity: (f64, f64),
}

impl SceneObject {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let d = [
            p[0] - self.center[0],
            p[1] - self.center[1],
            p[2] - self.center[2],
        ];
        if d[2].abs() > self.half[2] {
            return false;
        }
        if self.cylinder {
            d[0] * d[0] + d[1] * d[1] <= self.half[0] * self.half[0]
        } else {
            d[0].abs() <= self.half[0] && d[1].abs() <= self.half[1]
        }
    }
}

/// Ground-truth grid plus the generating objects.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub gt: VoxelGrid,
    pub objects: Vec<SceneObject>,
}

/// One fully sensed scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub seed: u64,
    pub tag: ConditionTag,
    pub gt: VoxelGrid,
    pub lidar: PointCloud,
    pub radar: PointCloud,
    pub cameras: CameraBundle,
}

fn substream(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Per-class geometry priors: (half-extent ranges, cylinder?, moving?).
fn class_shape(class_idx: usize) -> (([f64; 2], [f64; 2], [f64; 2]), bool, bool) {
    match class_idx {
        // wall: long thin box
        0 => (([1.0, 2.0], [0.15, 0.25], [0.8, 1.2]), false, false),
        // car: box with velocity
        1 => (([0.8, 1.1], [0.4, 0.5], [0.3, 0.4]), false, true),
        // pole: thin tall cylinder
        2 => (([0.08, 0.15], [0.08, 0.15], [0.8, 1.3]), true, false),
        // vegetation: squat cylinder
        _ => (([0.3, 0.6], [0.3, 0.6], [0.3, 0.7]), true, false),
    }
}

/// Mean radar cross section per semantic class (ground first).
fn rcs_mean(class: u16) -> f64 {
    match class {
        1 => 0.5,
        2 => 5.0,
        3 => 10.0,
        4 => 2.0,
        _ => 1.0,
    }
}

pub fn generate_scene(seed: u64, cfg: &WorldConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = substream(seed, 0);
    let grid = &cfg.grid;
    let (xr, yr) = (grid.x_range, grid.y_range);
    let margin = 0.1 * (xr.1 - xr.0);

    let mut objects = Vec::new();
    for (i, &(lo, hi)) in cfg.objects.iter().enumerate() {
        let count = rng.gen_range(lo..=hi);
        let (ranges, cylinder, moving) = class_shape(i);
        for _ in 0..count {
            let half = [
                rng.gen_range(ranges.0[0]..ranges.0[1]),
                rng.gen_range(ranges.1[0]..ranges.1[1]),
                rng.gen_range(ranges.2[0]..ranges.2[1]),
            ];
            let center = [
                rng.gen_range(xr.0 + margin..xr.1 - margin),
                rng.gen_range(yr.0 + margin..yr.1 - margin),
                cfg.ground_height + half[2],
            ];
            let velocity = if moving {
                (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))
            } else {
                (0.0, 0.0)
            };
            objects.push(SceneObject {
                class: (i + 2) as u16,
                center,
                half,
                cylinder,
                velocity,
            });
        }
    }

    let mut gt = VoxelGrid::empty(grid.clone(), cfg.labels.clone());
    let (z, h, w) = grid.dims();
    for zi in 0..z {
        for hi in 0..h {
            for wi in 0..w {
                let c = grid.voxel_center(zi, hi, wi);
                let mut label = if c.2 < cfg.ground_height { 1 } else { 0 };
                for obj in &objects {
                    if obj.contains([c.0, c.1, c.2]) {
                        label = obj.class;
                    }
                }
                gt.labels[[zi, hi, wi]] = label;
            }
        }
    }
    if let Some(noise_id) = cfg.labels.noise_id {
        if cfg.noise_fraction > 0.0 {
            for l in gt.labels.iter_mut() {
                if *l == 0 && rng.gen::<f64>() < cfg.noise_fraction {
                    *l = noise_id;
                }
            }
        }
    }
    Ok(Scene { seed, gt, objects })
}

/// First semantic voxel along a ray (Amanatides–Woo traversal).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub t: f64,
    pub point: [f64; 3],
    pub voxel: (usize, usize, usize),
}

/// Cast from `origin` (which must lie inside the grid) along `dir`
/// (normalized internally); returns the entry of the first voxel whose label
/// is a semantic class, within `max_range`.
pub fn raycast(gt: &VoxelGrid, origin: [f64; 3], dir: [f64; 3], max_range: f64) -> Option<RayHit> {
    let g = &gt.grid;
    let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    if norm == 0.0 {
        return None;
    }
    let d = [dir[0] / norm, dir[1] / norm, dir[2] / norm];
    let (mut zi, mut hi, mut wi) = g.world_to_voxel(origin[0], origin[1], origin[2])?;
    // per-axis state in (x→w, y→h, z→z) order
    let lows = [g.x_range.0, g.y_range.0, g.z_range.0];
    let dims = [g.w_dim() as isize, g.h_dim() as isize, g.z_dim() as isize];
    let mut idx = [wi as isize, hi as isize, zi as isize];
    let mut step = [0isize; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        if d[a] > 0.0 {
            step[a] = 1;
            let boundary = lows[a] + (idx[a] + 1) as f64 * g.voxel_size;
            t_max[a] = (boundary - origin[a]) / d[a];
            t_delta[a] = g.voxel_size / d[a];
        } else if d[a] < 0.0 {
            step[a] = -1;
            let boundary = lows[a] + idx[a] as f64 * g.voxel_size;
            t_max[a] = (boundary - origin[a]) / d[a];
            t_delta[a] = g.voxel_size / -d[a];
        }
    }
    let mut t = 0.0;
    loop {
        if gt.table.is_semantic(gt.labels[[zi, hi, wi]]) {
            return Some(RayHit {
                t,
                point: [origin[0] + d[0] * t, origin[1] + d[1] * t, origin[2] + d[2] * t],
                voxel: (zi, hi, wi),
            });
        }
        let a = (0..3).min_by(|&i, &j| t_max[i].partial_cmp(&t_max[j]).unwrap()).unwrap();
        t = t_max[a];
        if t > max_range {
            return None;
        }
        // step every axis whose boundary is crossed at (numerically) the same
        // t, so exact corner grazes pass diagonally instead of registering a
        // hit in a voxel the ray never enters
        for b in 0..3 {
            if (t_max[b] - t).abs() <= 1e-12 {
                idx[b] += step[b];
                if idx[b] < 0 || idx[b] >= dims[b] {
                    return None;
                }
                t_max[b] += t_delta[b];
            }
        }
        wi = idx[0] as usize;
        hi = idx[1] as usize;
        zi = idx[2] as usize;
    }
}

pub fn simulate_lidar(scene: &Scene, cfg: &WorldConfig) -> PointCloud {
    let mut rng = substream(scene.seed, 1);
    let dropout = match cfg.condition {
        ConditionTag::Rain => (cfg.lidar.dropout + cfg.rain_extra_dropout).min(1.0),
        _ => cfg.lidar.dropout,
    };
    let origin = [0.0, 0.0, cfg.lidar.height];
    let mut rows = Vec::new();
    for b in 0..cfg.lidar.beams {
        // elevations spread below the horizon so beams reach the ground
        let elev = -1.2 + (b as f64 + 0.5) / cfg.lidar.beams as f64 * (1.2 - 0.08);
        for k in 0..cfg.lidar.points_per_beam {
            let az = k as f64 / cfg.lidar.points_per_beam as f64 * std::f64::consts::TAU;
            let drop = rng.gen::<f64>() < dropout;
            let dir = [
                az.cos() * elev.cos(),
                az.sin() * elev.cos(),
                elev.sin(),
            ];
            if drop {
                continue;
            }
            if let Some(hit) = raycast(&scene.gt, origin, dir, cfg.lidar.max_range) {
                rows.extend_from_slice(&hit.point);
            }
        }
    }
    let n = rows.len() / 3;
    PointCloud::new(PointKind::Lidar, Array2::from_shape_vec((n, 3), rows).unwrap()).unwrap()
}

fn object_velocity(scene: &Scene, p: [f64; 3]) -> (f64, f64) {
    for obj in &scene.objects {
        if obj.contains(p) {
            return obj.velocity;
        }
    }
    (0.0, 0.0)
}

pub fn simulate_radar(scene: &Scene, cfg: &WorldConfig) -> PointCloud {
    let mut rng = substream(scene.seed, 2);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let origin = [0.0, 0.0, cfg.radar.height];
    let mut rows = Vec::new();
    let attempts = cfg.radar.budget.saturating_mul(20);
    for _ in 0..attempts {
        if rows.len() / 6 >= cfg.radar.budget {
            break;
        }
        let az = rng.gen_range(0.0..std::f64::consts::TAU);
        let elev: f64 = rng.gen_range(-0.25..0.05);
        let dir = [az.cos() * elev.cos(), az.sin() * elev.cos(), elev.sin()];
        let Some(hit) = raycast(&scene.gt, origin, dir, cfg.radar.detect_range) else {
            continue;
        };
        let p_detect = cfg.radar.detect_base * (1.0 - hit.t / cfg.radar.detect_range).max(0.0);
        if rng.gen::<f64>() >= p_detect {
            continue;
        }
        let class = scene.gt.labels[[hit.voxel.0, hit.voxel.1, hit.voxel.2]];
        let (vx, vy) = object_velocity(scene, hit.point);
        let sigma = rcs_mean(class) + 0.1 * normal.sample(&mut rng);
        rows.extend_from_slice(&[
            hit.point[0] + cfg.radar.pos_noise * normal.sample(&mut rng),
            hit.point[1] + cfg.radar.pos_noise * normal.sample(&mut rng),
            hit.point[2] + cfg.radar.pos_noise * normal.sample(&mut rng),
            sigma,
            vx + cfg.radar.vel_noise * normal.sample(&mut rng),
            vy + cfg.radar.vel_noise * normal.sample(&mut rng),
        ]);
    }
    let n = rows.len() / 6;
    PointCloud::new(PointKind::Radar, Array2::from_shape_vec((n, 6), rows).unwrap()).unwrap()
}

/// Flat-shaded class colors in [0, 1].
fn class_color(class: u16) -> [f64; 3] {
    match class {
        1 => [0.35, 0.30, 0.25], // ground
        2 => [0.60, 0.60, 0.65], // wall
        3 => [0.85, 0.20, 0.20], // car
        4 => [0.70, 0.70, 0.30], // pole
        5 => [0.20, 0.65, 0.25], // vegetation
        _ => [0.0, 0.0, 0.0],
    }
}

const SKY_COLOR: [f64; 3] = [0.25, 0.40, 0.60];

pub fn simulate_camera_views(scene: &Scene, cfg: &WorldConfig) -> CameraBundle {
    let (h, w) = (cfg.camera.image_h, cfg.camera.image_w);
    let contrast = match cfg.condition {
        ConditionTag::Sun => 1.0,
        ConditionTag::Rain => cfg.rain_camera_contrast,
        ConditionTag::Night => cfg.night_camera_contrast,
    };
    let mut views = Vec::with_capacity(cfg.camera.views);
    for v in 0..cfg.camera.views {
        let yaw = v as f64 / cfg.camera.views as f64 * std::f64::consts::TAU;
        // camera x = right, y = down, z = forward (level, looking outward)
        let mut rotation = Array2::zeros((3, 3));
        rotation[[0, 0]] = yaw.sin();
        rotation[[1, 0]] = -yaw.cos();
        rotation[[0, 2]] = yaw.cos();
        rotation[[1, 2]] = yaw.sin();
        rotation[[2, 1]] = -1.0;
        let translation = [0.0, 0.0, cfg.camera.height];
        let mut intrinsics = Array2::eye(3);
        intrinsics[[0, 0]] = cfg.camera.focal;
        intrinsics[[1, 1]] = cfg.camera.focal;
        intrinsics[[0, 2]] = w as f64 / 2.0;
        intrinsics[[1, 2]] = h as f64 / 2.0;

        let mut image = Array3::zeros((3, h, w));
        let mut gt_depth = Array2::zeros((h, w));
        for row in 0..h {
            for col in 0..w {
                let xc = (col as f64 + 0.5 - w as f64 / 2.0) / cfg.camera.focal;
                let yc = (row as f64 + 0.5 - h as f64 / 2.0) / cfg.camera.focal;
                let dir = [
                    rotation[[0, 0]] * xc + rotation[[0, 1]] * yc + rotation[[0, 2]],
                    rotation[[1, 0]] * xc + rotation[[1, 1]] * yc + rotation[[1, 2]],
                    rotation[[2, 0]] * xc + rotation[[2, 1]] * yc + rotation[[2, 2]],
                ];
                let mut color = SKY_COLOR;
                if let Some(hit) = raycast(&scene.gt, translation, dir, cfg.camera.max_range) {
                    let class = scene.gt.labels[[hit.voxel.0, hit.voxel.1, hit.voxel.2]];
                    let shade = 1.0 / (1.0 + 0.08 * hit.t);
                    let base = class_color(class);
                    color = [base[0] * shade, base[1] * shade, base[2] * shade];
                    gt_depth[[row, col]] = hit.t;
                }
                for c in 0..3 {
                    // contrast scaling about mid-gray
                    image[[c, row, col]] = 0.5 + (color[c] - 0.5) * contrast;
                }
            }
        }
        views.push(CameraView {
            image,
            intrinsics,
            rotation,
            translation,
            gt_depth,
        });
    }
    CameraBundle { views }
}

pub fn generate_sample(seed: u64, cfg: &WorldConfig) -> Result<SceneSample> {
    let scene = generate_scene(seed, cfg)?;
    let lidar = simulate_lidar(&scene, cfg);
    let radar = simulate_radar(&scene, cfg);
    let cameras = simulate_camera_views(&scene, cfg);
    Ok(SceneSample {
        seed,
        tag: cfg.condition,
        gt: scene.gt,
        lidar,
        radar,
        cameras,
    })
}

fn to_dyn<T: Clone, D: ndarray::Dimension>(a: &ndarray::Array<T, D>) -> ArrayD<T> {
    a.clone().into_dyn()
}

pub fn write_dataset(samples: &[SceneSample], path: &Path) -> Result<()> {
    let first = samples
        .first()
        .ok_or_else(|| Error::config("cannot write an empty dataset"))?;
    let meta = json!({
        "format": "bevssc-dataset",
        "grid": serde_json::to_value(&first.gt.grid)?,
        "labels": serde_json::to_value(&first.gt.table)?,
        "num_samples": samples.len(),
        "views": first.cameras.views.len(),
        "seeds": samples.iter().map(|s| s.seed).collect::<Vec<_>>(),
        "tags": samples.iter().map(|s| serde_json::to_value(s.tag).unwrap()).collect::<Vec<_>>(),
    });
    let mut writer = Lcr1Writer::new(meta);
    for (i, s) in samples.iter().enumerate() {
        writer.put_u16(&format!("s{i}/gt"), &to_dyn(&s.gt.labels));
        writer.put_f64(&format!("s{i}/lidar"), &to_dyn(&s.lidar.points));
        writer.put_f64(&format!("s{i}/radar"), &to_dyn(&s.radar.points));
        for (j, v) in s.cameras.views.iter().enumerate() {
            writer.put_f64(&format!("s{i}/cam{j}/image"), &to_dyn(&v.image));
            writer.put_f64(&format!("s{i}/cam{j}/depth"), &to_dyn(&v.gt_depth));
            writer.put_f64(&format!("s{i}/cam{j}/intrinsics"), &to_dyn(&v.intrinsics));
            writer.put_f64(&format!("s{i}/cam{j}/rotation"), &to_dyn(&v.rotation));
            writer.put_f64(
                &format!("s{i}/cam{j}/translation"),
                &ArrayD::from_shape_vec(IxDyn(&[3]), v.translation.to_vec()).unwrap(),
            );
        }
    }
    writer.write_to(path)
}

fn meta_field<'a>(meta: &'a Value, key: &str) -> Result<&'a Value> {
    meta.get(key)
        .ok_or_else(|| Error::format(format!("dataset manifest missing `{key}`")))
}

pub fn read_dataset(path: &Path) -> Result<Vec<SceneSample>> {
    let file = Lcr1File::read_from(path)?;
    let grid: GridConfig = serde_json::from_value(meta_field(&file.meta, "grid")?.clone())?;
    let table: LabelTable = serde_json::from_value(meta_field(&file.meta, "labels")?.clone())?;
    let n = meta_field(&file.meta, "num_samples")?
        .as_u64()
        .ok_or_else(|| Error::format("num_samples must be an integer"))? as usize;
    let views = meta_field(&file.meta, "views")?
        .as_u64()
        .ok_or_else(|| Error::format("views must be an integer"))? as usize;
    let seeds: Vec<u64> = serde_json::from_value(meta_field(&file.meta, "seeds")?.clone())?;
    let tags: Vec<ConditionTag> = serde_json::from_value(meta_field(&file.meta, "tags")?.clone())?;
    if seeds.len() != n || tags.len() != n {
        return Err(Error::format("seed/tag list length mismatch"));
    }

    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let ctx = |e: Error| Error::format(format!("sample {i}: {e}"));
        let labels = file
            .get_u16(&format!("s{i}/gt"))
            .map_err(ctx)?
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|e| Error::format(format!("sample {i}: gt shape: {e}")))?;
        let gt = VoxelGrid {
            labels,
            grid: grid.clone(),
            table: table.clone(),
        };
        let as2 = |name: &str| -> Result<Array2<f64>> {
            file.get_f64(name)
                .map_err(ctx)?
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|e| Error::format(format!("sample {i}: {name}: {e}")))
        };
        let lidar = PointCloud::new(PointKind::Lidar, as2(&format!("s{i}/lidar"))?)?;
        let radar = PointCloud::new(PointKind::Radar, as2(&format!("s{i}/radar"))?)?;
        let mut cam_views = Vec::with_capacity(views);
        for j in 0..views {
            let image = file
                .get_f64(&format!("s{i}/cam{j}/image"))
                .map_err(ctx)?
                .into_dimensionality::<ndarray::Ix3>()
                .map_err(|e| Error::format(format!("sample {i}: image shape: {e}")))?;
            let t = file.get_f64(&format!("s{i}/cam{j}/translation")).map_err(ctx)?;
            cam_views.push(CameraView {
                image,
                intrinsics: as2(&format!("s{i}/cam{j}/intrinsics"))?,
                rotation: as2(&format!("s{i}/cam{j}/rotation"))?,
                translation: [t[[0]], t[[1]], t[[2]]],
                gt_depth: as2(&format!("s{i}/cam{j}/depth"))?,
            });
        }
        samples.push(SceneSample {
            seed: seeds[i],
            tag: tags[i],
            gt,
            lidar,
            radar,
            cameras: CameraBundle { views: cam_views },
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_cfg() -> WorldConfig {
        let mut cfg = WorldConfig::desk_scale();
        // smaller sensors keep tests fast
        cfg.lidar.beams = 6;
        cfg.lidar.points_per_beam = 60;
        cfg.camera.image_h = 16;
        cfg.camera.image_w = 16;
        cfg.camera.focal = 16.0;
        cfg
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = quiet_cfg();
        let a = generate_sample(7, &cfg).unwrap();
        let b = generate_sample(7, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_sample(8, &cfg).unwrap();
        assert_ne!(a.gt.labels, c.gt.labels);
    }

    #[test]
    fn zero_objects_leaves_only_ground() {
        let mut cfg = quiet_cfg();
        cfg.objects = vec![(0, 0); 4];
        cfg.noise_fraction = 0.0;
        let scene = generate_scene(1, &cfg).unwrap();
        let mut seen: Vec<u16> = scene.gt.labels.iter().copied().collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen, vec![0, 1]);
        assert!(scene.objects.is_empty());
    }

    #[test]
    fn object_counts_respect_bounds() {
        let cfg = quiet_cfg();
        for seed in 0..10 {
            let scene = generate_scene(seed, &cfg).unwrap();
            for (i, &(lo, hi)) in cfg.objects.iter().enumerate() {
                let n = scene
                    .objects
                    .iter()
                    .filter(|o| o.class == (i + 2) as u16)
                    .count();
                assert!((lo..=hi).contains(&n), "class {i}: {n} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn lidar_on_flat_scene_hits_ground() {
        let mut cfg = quiet_cfg();
        cfg.objects = vec![(0, 0); 4];
        cfg.noise_fraction = 0.0;
        cfg.lidar.dropout = 0.0;
        let scene = generate_scene(2, &cfg).unwrap();
        let cloud = simulate_lidar(&scene, &cfg);
        assert!(!cloud.is_empty());
        for row in cloud.points.rows() {
            assert!(
                (row[2] - cfg.ground_height).abs() <= cfg.grid.voxel_size,
                "z = {}",
                row[2]
            );
        }
    }

    #[test]
    fn lidar_dropout_one_gives_empty_cloud() {
        let mut cfg = quiet_cfg();
        cfg.lidar.dropout = 1.0;
        let scene = generate_scene(3, &cfg).unwrap();
        assert!(simulate_lidar(&scene, &cfg).is_empty());
    }

    /// Hit points sit on voxel faces/edges, so an occupied voxel must touch
    /// the point: probe the surrounding neighborhood with tiny nudges.
    fn near_occupied(scene: &Scene, p: [f64; 3]) -> bool {
        let g = &scene.gt.grid;
        let eps = 1e-9;
        for dx in [-eps, 0.0, eps] {
            for dy in [-eps, 0.0, eps] {
                for dz in [-eps, 0.0, eps] {
                    if let Some((zi, hi, wi)) = g.world_to_voxel(p[0] + dx, p[1] + dy, p[2] + dz) {
                        if scene.gt.table.is_semantic(scene.gt.labels[[zi, hi, wi]]) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }

    #[test]
    fn lidar_points_lie_on_occupied_surfaces() {
        let cfg = quiet_cfg();
        let scene = generate_scene(4, &cfg).unwrap();
        let cloud = simulate_lidar(&scene, &cfg);
        assert!(!cloud.is_empty());
        for row in cloud.points.rows() {
            assert!(
                near_occupied(&scene, [row[0], row[1], row[2]]),
                "point {:?} not adjacent to occupied voxel",
                row
            );
        }
    }

    #[test]
    fn radar_respects_budget_and_noise_free_points_on_surfaces() {
        let mut cfg = quiet_cfg();
        cfg.radar.pos_noise = 0.0;
        cfg.radar.vel_noise = 0.0;
        for seed in 0..5 {
            let scene = generate_scene(seed, &cfg).unwrap();
            let cloud = simulate_radar(&scene, &cfg);
            assert!(cloud.len() <= cfg.radar.budget);
            for row in cloud.points.rows() {
                assert!(
                    near_occupied(&scene, [row[0], row[1], row[2]]),
                    "radar point off-surface"
                );
            }
        }
    }

    #[test]
    fn static_noiseless_radar_has_zero_velocity() {
        let mut cfg = quiet_cfg();
        cfg.radar.pos_noise = 0.0;
        cfg.radar.vel_noise = 0.0;
        cfg.objects = vec![(1, 1), (0, 0), (1, 1), (1, 1)]; // no cars
        let scene = generate_scene(5, &cfg).unwrap();
        let cloud = simulate_radar(&scene, &cfg);
        assert!(!cloud.is_empty());
        for row in cloud.points.rows() {
            assert_eq!(row[4], 0.0);
            assert_eq!(row[5], 0.0);
        }
    }

    #[test]
    fn radar_budget_zero_gives_empty_cloud() {
        let mut cfg = quiet_cfg();
        cfg.radar.budget = 0;
        let scene = generate_scene(6, &cfg).unwrap();
        assert!(simulate_radar(&scene, &cfg).is_empty());
    }

    #[test]
    fn camera_depth_matches_ray_march_oracle() {
        let cfg = quiet_cfg();
        let scene = generate_scene(7, &cfg).unwrap();
        let bundle = simulate_camera_views(&scene, &cfg);
        let view = &bundle.views[0];
        let (h, w) = view.image_dims();
        let mut checked = 0;
        for row in (0..h).step_by(3) {
            for col in (0..w).step_by(3) {
                let d = view.gt_depth[[row, col]];
                if d <= 0.0 {
                    continue;
                }
                // slow independent march along the same ray
                let xc = (col as f64 + 0.5 - w as f64 / 2.0) / cfg.camera.focal;
                let yc = (row as f64 + 0.5 - h as f64 / 2.0) / cfg.camera.focal;
                let norm = (xc * xc + yc * yc + 1.0).sqrt();
                let mut dir = [0.0; 3];
                for i in 0..3 {
                    dir[i] = (view.rotation[[i, 0]] * xc
                        + view.rotation[[i, 1]] * yc
                        + view.rotation[[i, 2]])
                        / norm;
                }
                let mut found = None;
                let step = 0.005;
                let mut t = step;
                while t < cfg.camera.max_range {
                    let p = [
                        view.translation[0] + dir[0] * t,
                        view.translation[1] + dir[1] * t,
                        view.translation[2] + dir[2] * t,
                    ];
                    if let Some((zi, hi, wi)) = scene.gt.grid.world_to_voxel(p[0], p[1], p[2]) {
                        if scene.gt.table.is_semantic(scene.gt.labels[[zi, hi, wi]]) {
                            found = Some(t);
                            break;
                        }
                    }
                    t += step;
                }
                let oracle = found.expect("oracle must also hit");
                assert!(
                    (d - oracle).abs() <= 0.5 * cfg.grid.voxel_size,
                    "depth {d} vs oracle {oracle}"
                );
                checked += 1;
            }
        }
        assert!(checked > 5, "too few supervised pixels checked");
    }

    #[test]
    fn sky_pixels_use_sentinel_and_background() {
        let mut cfg = quiet_cfg();
        cfg.objects = vec![(0, 0); 4];
        cfg.noise_fraction = 0.0;
        let scene = generate_scene(8, &cfg).unwrap();
        let bundle = simulate_camera_views(&scene, &cfg);
        let view = &bundle.views[0];
        // top row looks above the horizon on a flat scene
        for col in 0..16 {
            assert_eq!(view.gt_depth[[0, col]], 0.0);
            assert_eq!(view.image[[0, 0, col]], SKY_COLOR[0]);
        }
    }

    #[test]
    fn condition_tags_degrade_only_their_sensors() {
        let base = quiet_cfg();
        let mut rain = base.clone();
        rain.condition = ConditionTag::Rain;
        let mut night = base.clone();
        night.condition = ConditionTag::Night;

        let (a, b, c) = (
            generate_sample(9, &base).unwrap(),
            generate_sample(9, &rain).unwrap(),
            generate_sample(9, &night).unwrap(),
        );
        // radar invariant across all tags
        assert_eq!(a.radar, b.radar);
        assert_eq!(a.radar, c.radar);
        // night leaves lidar identical; rain thins it
        assert_eq!(a.lidar, c.lidar);
        assert!(b.lidar.len() < a.lidar.len());
        // night reduces pixel variance
        let var = |s: &SceneSample| {
            let img = &s.cameras.views[0].image;
            let mean = img.iter().sum::<f64>() / img.len() as f64;
            img.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / img.len() as f64
        };
        assert!(var(&c) < var(&a));
    }

    #[test]
    fn dataset_round_trip_and_corruption() {
        let cfg = quiet_cfg();
        let samples: Vec<SceneSample> = (0..3)
            .map(|s| generate_sample(s, &cfg).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.lcr1");
        write_dataset(&samples, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(samples, back);

        // manifest tag counts equal recounted tags
        let file = Lcr1File::read_from(&path).unwrap();
        let tags: Vec<ConditionTag> =
            serde_json::from_value(file.meta.get("tags").unwrap().clone()).unwrap();
        assert_eq!(
            tags,
            back.iter().map(|s| s.tag).collect::<Vec<_>>()
        );

        // truncation must surface as a format error
        let bytes = std::fs::read(&path).unwrap();
        let cut = &bytes[..bytes.len() - 16];
        std::fs::write(dir.path().join("cut.lcr1"), cut).unwrap();
        let err = read_dataset(&dir.path().join("cut.lcr1")).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err:?}");
    }
}
