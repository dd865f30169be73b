//! Multi-view gridworld: world dynamics, the expert oracle, FPV/TPV
//! rasterizers, trajectory files and dataset manifests.

mod dataset;
mod render;
mod trajectory;
mod world;

pub use dataset::{
    collect_dataset, test_count, Dataset, Manifest, ManifestEntry, Split, MANIFEST_FILE,
};
pub use render::{
    apply_viewpoint, fpv_window_cell, fpv_world_cell, mirror_horizontal, render_fpv, render_tpv,
    render_world, rotate_quarter, translate, viewpoints, Frame, FrameKind, Rgb, Viewpoint, AGENT,
    BLACK, FLOOR_DARK, FLOOR_LIGHT, FPV_WINDOW, MAX_VIEWS, TARGET, WALL,
};
pub use trajectory::{
    collect_trajectory, read_trajectory, render_trajectory, write_trajectory, StateRecord,
    Trajectory, TRAJECTORY_MAGIC,
};
pub use world::{
    eligible_targets, expert_action, manhattan, reset, step, with_target, Action, Heading,
    WorldState,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("episode already reached its horizon of {horizon} steps")]
    EpisodeFinished { horizon: usize },
    #[error("at least one viewpoint is required")]
    NoViews,
    #[error("bad trajectory magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("trajectory truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{0} unexpected trailing bytes after trajectory")]
    TrailingBytes(usize),
    #[error("invalid trajectory field {field}: {value}")]
    InvalidField { field: &'static str, value: u64 },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("manifest JSON: {0}")]
    ManifestJson(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Path {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub grid_size: usize,
    pub horizon: usize,
    /// Frame side length in pixels.
    pub resolution: usize,
    pub n_views: usize,
    pub min_target_distance: usize,
    /// Render held-out trajectories through the shifted camera set.
    pub shift_test_views: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            grid_size: 12,
            horizon: 40,
            resolution: 32,
            n_views: 8,
            min_target_distance: 4,
            shift_test_views: true,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.grid_size < 2 * self.min_target_distance.max(1) {
            return Err(format!(
                "grid_size {} too small for min_target_distance {}",
                self.grid_size, self.min_target_distance
            ));
        }
        if self.n_views == 0 || self.n_views > MAX_VIEWS {
            return Err(format!("n_views must be in 1..={MAX_VIEWS}"));
        }
        if self.resolution < 8 {
            return Err("resolution must be at least 8".into());
        }
        if self.horizon == 0 {
            return Err("horizon must be positive".into());
        }
        Ok(())
    }
}
