//! TOML pipeline configuration. Every field has a working default, so an
//! empty file (or no file) runs the desk-scale pipeline as-is and a config
//! only needs the keys it changes.

use crate::fusion::FusionParams;
use crate::sfs::{SfsParams, ShadingModel};
use crate::surfel::{CloseLoopParams, SurfelMapParams};
use crate::tracker::TrackerParams;
use crate::vessel::VesselnessParams;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: String,
        source: Box<toml::de::Error>,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Where per-frame depth comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthSource {
    /// Read the depth images stored next to the color frames.
    Dataset,
    /// Recover depth from shading (monocular mode).
    Shading,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub depth_source: DepthSource,
    /// Process every nth frame; 1 uses all of them.
    pub frame_stride: usize,
    /// Stop after this many processed frames (0 means no cap).
    pub max_frames: usize,
    /// Attempt a loop closure every nth processed frame (0 disables).
    pub close_loop_every: usize,
    /// Blend vessel enhancement into the tracked intensity.
    pub enhance: bool,
    /// Tracked frames below this inlier fraction are fused but not
    /// integrated into the map.
    pub min_map_inliers: f64,
    /// Tracked frames whose pose disagrees with the fused posterior by
    /// more than this translation (cm) are kept out of the map.
    pub max_map_offset: f64,
    /// Rotation half of the map agreement gate, in radians.
    pub max_map_tilt: f64,
    pub tracker: TrackerParams,
    pub fusion: FusionParams,
    pub surfel: SurfelMapParams,
    pub close_loop: CloseLoopParams,
    pub vessel: VesselnessParams,
    pub shading: ShadingModel,
    pub sfs: SfsParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            depth_source: DepthSource::Dataset,
            frame_stride: 1,
            max_frames: 0,
            close_loop_every: 0,
            enhance: true,
            min_map_inliers: 0.6,
            max_map_offset: 0.5,
            max_map_tilt: 0.25,
            tracker: TrackerParams::default(),
            fusion: FusionParams::default(),
            surfel: SurfelMapParams::default(),
            close_loop: CloseLoopParams::default(),
            vessel: VesselnessParams::default(),
            shading: ShadingModel::default(),
            sfs: SfsParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.frame_stride == 0 {
            return Err(ConfigError::Invalid("frame_stride must be >= 1".into()));
        }
        if self.fusion.n_particles == 0 {
            return Err(ConfigError::Invalid("n_particles must be >= 1".into()));
        }
        self.vessel
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<PipelineConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let config: PipelineConfig = toml::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.display().to_string(),
        source: Box::new(source),
    })?;
    config.validate()?;
    Ok(config)
}

pub fn save_config(path: &Path, config: &PipelineConfig) -> Result<(), ConfigError> {
    let text = toml::to_string_pretty(config).expect("config serializes");
    std::fs::write(path, text).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Config from an optional path: `None` gives the defaults.
pub fn load_or_default(path: Option<&Path>) -> Result<PipelineConfig, ConfigError> {
    match path {
        Some(p) => load_config(p),
        None => Ok(PipelineConfig::default()),
    }
}
