//! Shared domain types: grid geometry, label conventions, voxel volumes,
//! point clouds and BEV feature planes.
//!
//! Axis convention, fixed once and reused everywhere: label volumes are
//! `(Z, H, W)` with `H ↔ y` and `W ↔ x`. Voxels are half-open intervals
//! `[lo, hi)` along every axis, so a coordinate exactly at the upper grid
//! bound is out of range.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense voxel grid geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub voxel_size: f64,
}

impl GridConfig {
    pub fn new(
        x_range: (f64, f64),
        y_range: (f64, f64),
        z_range: (f64, f64),
        voxel_size: f64,
    ) -> Result<Self> {
        let cfg = GridConfig {
            x_range,
            y_range,
            z_range,
            voxel_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full-scale grid: x,y ∈ [−51.2, 51.2], z ∈ [−5, 3], 0.2 m voxels → 40×512×512.
    pub fn full_scale() -> Self {
        GridConfig {
            x_range: (-51.2, 51.2),
            y_range: (-51.2, 51.2),
            z_range: (-5.0, 3.0),
            voxel_size: 0.2,
        }
    }

    /// Desk-scale default: 16×64×64 voxels at 0.2 m.
    pub fn desk_scale() -> Self {
        GridConfig {
            x_range: (-6.4, 6.4),
            y_range: (-6.4, 6.4),
            z_range: (-0.4, 2.8),
            voxel_size: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0) {
            return Err(Error::config("voxel_size must be > 0"));
        }
        for (name, (lo, hi)) in [
            ("x", self.x_range),
            ("y", self.y_range),
            ("z", self.z_range),
        ] {
            if !(hi > lo) {
                return Err(Error::config(format!("{name}_range must be increasing")));
            }
            let cells = (hi - lo) / self.voxel_size;
            if (cells - cells.round()).abs() > 1e-9 || cells.round() < 1.0 {
                return Err(Error::config(format!(
                    "{name}_range extent {} is not an integer multiple of voxel_size {}",
                    hi - lo,
                    self.voxel_size
                )));
            }
        }
        Ok(())
    }

    fn cells(&self, lo: f64, hi: f64) -> usize {
        ((hi - lo) / self.voxel_size).round() as usize
    }

    /// Number of voxels along z.
    pub fn z_dim(&self) -> usize {
        self.cells(self.z_range.0, self.z_range.1)
    }
    /// Number of voxels along y (the H axis).
    pub fn h_dim(&self) -> usize {
        self.cells(self.y_range.0, self.y_range.1)
    }
    /// Number of voxels along x (the W axis).
    pub fn w_dim(&self) -> usize {
        self.cells(self.x_range.0, self.x_range.1)
    }
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.z_dim(), self.h_dim(), self.w_dim())
    }

    /// BEV plane size at scale `i` (each scale halves H and W).
    pub fn bev_dims_at_scale(&self, scale: usize) -> (usize, usize) {
        (self.h_dim() >> scale, self.w_dim() >> scale)
    }

    /// Map a world point to its `(z, h, w)` voxel index, or `None` when outside
    /// the grid. Half-open intervals: the exact upper bound is out of range.
    pub fn world_to_voxel(&self, x: f64, y: f64, z: f64) -> Option<(usize, usize, usize)> {
        let wi = axis_index(x, self.x_range, self.voxel_size, self.w_dim())?;
        let hi = axis_index(y, self.y_range, self.voxel_size, self.h_dim())?;
        let zi = axis_index(z, self.z_range, self.voxel_size, self.z_dim())?;
        Some((zi, hi, wi))
    }

    /// World coordinates of the center of voxel `(z, h, w)`.
    pub fn voxel_center(&self, z: usize, h: usize, w: usize) -> (f64, f64, f64) {
        let half = 0.5 * self.voxel_size;
        (
            self.x_range.0 + w as f64 * self.voxel_size + half,
            self.y_range.0 + h as f64 * self.voxel_size + half,
            self.z_range.0 + z as f64 * self.voxel_size + half,
        )
    }
}

fn axis_index(v: f64, range: (f64, f64), voxel: f64, dim: usize) -> Option<usize> {
    if !v.is_finite() || v < range.0 || v >= range.1 {
        return None;
    }
    let idx = ((v - range.0) / voxel).floor() as usize;
    // Guard against floating rounding right at the upper face.
    Some(idx.min(dim - 1))
}

/// Label-id conventions for a grid.
///
/// Ids: `0` = empty, `1..=num_semantic` = semantic classes, and when a noise
/// class is present it is the last id. Noise appears only in ground truth;
/// prediction heads emit `num_semantic + 1` channels (semantic + empty).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelTable {
    pub class_names: Vec<String>,
    pub empty_id: u16,
    pub noise_id: Option<u16>,
}

impl LabelTable {
    pub fn new(class_names: Vec<String>, with_noise: bool) -> Self {
        let n = class_names.len() as u16;
        LabelTable {
            class_names,
            empty_id: 0,
            noise_id: with_noise.then_some(n + 1),
        }
    }

    /// Desk-scale default: 5 semantic classes plus empty and noise.
    pub fn desk_scale() -> Self {
        LabelTable::new(
            ["ground", "wall", "car", "pole", "vegetation"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            true,
        )
    }

    /// Count of semantic classes (excludes empty and noise).
    pub fn num_semantic(&self) -> usize {
        self.class_names.len()
    }

    /// Total distinct label ids (semantic + empty + optional noise).
    pub fn num_labels(&self) -> usize {
        self.num_semantic() + 1 + self.noise_id.is_some() as usize
    }

    /// Channels predicted by the SSC head: semantic classes + empty.
    pub fn num_channels(&self) -> usize {
        self.num_semantic() + 1
    }

    pub fn is_valid(&self, id: u16) -> bool {
        (id as usize) < self.num_labels()
    }

    pub fn is_noise(&self, id: u16) -> bool {
        self.noise_id == Some(id)
    }

    pub fn is_semantic(&self, id: u16) -> bool {
        id != self.empty_id && !self.is_noise(id)
    }

    /// Ids of the semantic classes, in order.
    pub fn semantic_ids(&self) -> impl Iterator<Item = u16> + '_ {
        1..=self.num_semantic() as u16
    }
}

/// Dense semantic-label volume over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub labels: Array3<u16>,
    pub grid: GridConfig,
    pub table: LabelTable,
}

impl VoxelGrid {
    pub fn empty(grid: GridConfig, table: LabelTable) -> Self {
        let dims = grid.dims();
        VoxelGrid {
            labels: Array3::zeros(dims),
            grid,
            table,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.dim() != self.grid.dims() {
            return Err(Error::shape(format!(
                "label volume {:?} does not match grid dims {:?}",
                self.labels.dim(),
                self.grid.dims()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| !self.table.is_valid(l)) {
            return Err(Error::format(format!("label id {bad} not in table")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointKind {
    Lidar,
    Radar,
}

impl PointKind {
    /// Row width: lidar (x,y,z); radar (x,y,z,σ,vx,vy).
    pub fn row_width(self) -> usize {
        match self {
            PointKind::Lidar => 3,
            PointKind::Radar => 6,
        }
    }
}

/// LiDAR or radar point set. Points outside the grid are permitted here and
/// dropped at pillarization.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub kind: PointKind,
    /// `(N, row_width)` rows.
    pub points: Array2<f64>,
}

impl PointCloud {
    pub fn new(kind: PointKind, points: Array2<f64>) -> Result<Self> {
        if points.ncols() != kind.row_width() && points.nrows() > 0 {
            return Err(Error::shape(format!(
                "{:?} cloud must have {} columns, got {}",
                kind,
                kind.row_width(),
                points.ncols()
            )));
        }
        if points
            .columns()
            .into_iter()
            .take(3)
            .any(|c| c.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::format("non-finite xyz in point cloud"));
        }
        Ok(PointCloud { kind, points })
    }

    pub fn empty(kind: PointKind) -> Self {
        PointCloud {
            kind,
            points: Array2::zeros((0, kind.row_width())),
        }
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A `(C, H, W)` feature plane at some resolution scale of the BEV grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeatureMap<S: Scalar> {
    pub data: Array3<S>,
    /// 0 = full resolution; scale i halves H and W i times.
    pub scale_index: usize,
}

impl<S: Scalar> BevFeatureMap<S> {
    pub fn new(data: Array3<S>, scale_index: usize) -> Self {
        BevFeatureMap { data, scale_index }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn validate_against(&self, grid: &GridConfig) -> Result<()> {
        let (h, w) = grid.bev_dims_at_scale(self.scale_index);
        let (_, dh, dw) = self.data.dim();
        if (dh, dw) != (h, w) {
            return Err(Error::shape(format!(
                "BEV map {}x{} at scale {} does not match grid {}x{}",
                dh, dw, self.scale_index, h, w
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("non-finite value in BEV feature map"));
        }
        Ok(())
    }
}

/// One rendered camera view with calibration and ground-truth depth.
/// `gt_depth` uses values ≤ 0 as the "no hit" sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    /// `(3, h, w)` color planes.
    pub image: Array3<f64>,
    /// 3×3 pinhole intrinsics.
    pub intrinsics: Array2<f64>,
    /// Camera→world rotation (3×3) and translation.
    pub rotation: Array2<f64>,
    pub translation: [f64; 3],
    pub gt_depth: Array2<f64>,
}

impl CameraView {
    pub fn image_dims(&self) -> (usize, usize) {
        let (_, h, w) = self.image.dim();
        (h, w)
    }

    /// World coordinates of the point at pixel center `(row, col)` and
    /// camera-frame depth `d` along the optical axis.
    pub fn unproject(&self, row: usize, col: usize, d: f64) -> [f64; 3] {
        let (fx, fy) = (self.intrinsics[[0, 0]], self.intrinsics[[1, 1]]);
        let (cx, cy) = (self.intrinsics[[0, 2]], self.intrinsics[[1, 2]]);
        let xc = (col as f64 + 0.5 - cx) / fx * d;
        let yc = (row as f64 + 0.5 - cy) / fy * d;
        let p = [xc, yc, d];
        let mut out = self.translation;
        for i in 0..3 {
            for j in 0..3 {
                out[i] += self.rotation[[i, j]] * p[j];
            }
        }
        out
    }
}

/// All camera views of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraBundle {
    pub views: Vec<CameraView>,
}

/// Scene condition tags, mirroring weather/lighting breakdown axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionTag {
    Sun,
    Rain,
    Night,
}

impl ConditionTag {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sun" => Ok(ConditionTag::Sun),
            "rain" => Ok(ConditionTag::Rain),
            "night" => Ok(ConditionTag::Night),
            other => Err(Error::config(format!("unknown condition tag '{other}'"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConditionTag::Sun => "sun",
            ConditionTag::Rain => "rain",
            ConditionTag::Night => "night",
        }
    }
}
