//! Run configuration: TOML files plus dotted-path command line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::distill::KdParams;
use crate::error::{Error, Result};
use crate::fusion::FusionParams;
use crate::image_branch::ImageBranchParams;
use crate::point_branch::PointBranchParams;
use crate::world::WorldConfig;

/// AdamW-style optimizer with linear warmup into a cosine decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    /// Total schedule length; the cosine reaches zero here.
    pub horizon_iters: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 2e-4,
            weight_decay: 0.01,
            warmup_iters: 50,
            horizon_iters: 2000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    /// Learning rate at step `t` (0-based): linear warmup then cosine decay.
    pub fn lr_at(&self, t: usize) -> f64 {
        if self.warmup_iters > 0 && t < self.warmup_iters {
            return self.lr * (t + 1) as f64 / self.warmup_iters as f64;
        }
        let span = self.horizon_iters.saturating_sub(self.warmup_iters).max(1);
        let p = ((t - self.warmup_iters) as f64 / span as f64).min(1.0);
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// Which sensors the student consumes (the teacher always uses lidar+camera).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensorSet {
    /// Radar only.
    R,
    /// Radar plus cameras.
    Rc,
}

impl SensorSet {
    pub fn has_camera(self) -> bool {
        matches!(self, SensorSet::Rc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub point: PointBranchParams,
    pub image: ImageBranchParams,
    pub fusion: FusionParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            point: PointBranchParams::default(),
            image: ImageBranchParams::default(),
            fusion: FusionParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub kd: KdParams,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub student_sensors: SensorSet,
    pub num_train_scenes: usize,
    pub num_eval_scenes: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            world: WorldConfig::desk_scale(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            kd: KdParams::default(),
            batch_size: 4,
            steps: 200,
            seed: 0,
            student_sensors: SensorSet::Rc,
            num_train_scenes: 4,
            num_eval_scenes: 2,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        if self.optim.horizon_iters < self.optim.warmup_iters {
            return Err(Error::config(format!(
                "schedule horizon ({}) must be ≥ warmup ({})",
                self.optim.horizon_iters, self.optim.warmup_iters
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be ≥ 1"));
        }
        if self.num_train_scenes == 0 {
            return Err(Error::config("need at least one training scene"));
        }
        let head = self.world.labels.num_channels();
        if self.model.fusion.num_classes != head {
            return Err(Error::config(format!(
                "fusion head predicts {} classes but the label table needs {}",
                self.model.fusion.num_classes, head
            )));
        }
        if self.model.fusion.z != self.world.grid.z_dim() {
            return Err(Error::config(format!(
                "fusion head z ({}) must match grid z ({})",
                self.model.fusion.z,
                self.world.grid.z_dim()
            )));
        }
        if self.kd.lambda_brd > 0.0
            && !self.kd.brd_scales.is_empty()
            && !self.student_sensors.has_camera()
            && !self.kd.brd_without_camera
        {
            return Err(Error::config(
                "relation distillation needs a camera stream on the student; \
                 set kd.lambda_brd = 0 or kd.brd_without_camera = true",
            ));
        }
        Ok(())
    }

    /// Read a TOML file (or start from defaults when `path` is `None`), apply
    /// dotted-path overrides like `optim.lr=1e-3`, and validate.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if !overrides.is_empty() {
            let mut value = serde_json::to_value(&cfg)?;
            for ov in overrides {
                apply_override(&mut value, ov)?;
            }
            cfg = serde_json::from_value(value)
                .map_err(|e| Error::config(format!("override produced invalid config: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("serialize config: {e}")))
    }
}

/// Set one `path.to.field=value` override in a JSON view of the config. The
/// value is parsed as JSON when possible, otherwise taken as a bare string.
fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{spec}` is not of the form key=value")))?;
    let parsed: Value = serde_json::from_str(raw.trim())
        .unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut cur = root;
    let segments: Vec<&str> = path.trim().split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let map = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("`{path}`: `{seg}` is not a table")))?;
        if i + 1 == segments.len() {
            if !map.contains_key(*seg) {
                return Err(Error::config(format!("unknown config field `{path}`")));
            }
            map.insert(seg.to_string(), parsed);
            return Ok(());
        }
        cur = map
            .get_mut(*seg)
            .ok_or_else(|| Error::config(format!("unknown config field `{path}`")))?;
    }
    unreachable!("split always yields at least one segment")
}
