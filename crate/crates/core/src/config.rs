//! Pipeline configuration (TOML).
//!
//! Precedence: built-in defaults, then the config file, then command-line
//! flags. The digest covers every section except `[paths]`, so moving input or
//! output directories does not change it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::curate::{
    PoolSpec, DEFAULT_BASELINE_PIXELS, DEFAULT_BIN_WIDTH_PP, DEFAULT_TARGET_DENSITY,
    DEFAULT_TOLERANCE_PP,
};
use crate::fetch::{validate_template, FetchPolicy};
use crate::osm::{Classifier, StrokeTable, DEFAULT_MARGIN_PX, DEFAULT_SMALL_ROADS};
use crate::sample::{position_count, SampleParams, DEFAULT_BLOCK, DEFAULT_PATCH_PX};
use crate::tile::{DEFAULT_GRID, DEFAULT_TILE_PX, DEFAULT_ZOOM, MAX_ZOOM};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unsupported schema_version {0} (expected {SCHEMA_VERSION})")]
    Schema(u32),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TileConfig {
    pub zoom: u8,
    pub grid: u32,
    pub tile_px: u32,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            zoom: DEFAULT_ZOOM,
            grid: DEFAULT_GRID,
            tile_px: DEFAULT_TILE_PX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub margin_px: u32,
    pub main_px: u32,
    pub middle_px: u32,
    pub small_px: u32,
    /// Highway values rendered as small roads.
    pub small_roads: Vec<String>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        let s = StrokeTable::default();
        Self {
            margin_px: DEFAULT_MARGIN_PX,
            main_px: s.main,
            middle_px: s.middle,
            small_px: s.small,
            small_roads: DEFAULT_SMALL_ROADS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurateConfig {
    pub baseline_pixels: f64,
    pub scale: f64,
    pub target_density: f64,
    pub tolerance_pp: f64,
    pub min_density: f64,
    pub bin_width_pp: f64,
}

impl Default for CurateConfig {
    fn default() -> Self {
        Self {
            baseline_pixels: DEFAULT_BASELINE_PIXELS,
            scale: 1.0,
            target_density: DEFAULT_TARGET_DENSITY,
            tolerance_pp: DEFAULT_TOLERANCE_PP,
            min_density: 0.0,
            bin_width_pp: DEFAULT_BIN_WIDTH_PP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub patch_px: u32,
    pub block: u32,
    pub n: u64,
    pub workers: u32,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            patch_px: DEFAULT_PATCH_PX,
            block: DEFAULT_BLOCK,
            n: 1024,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FetchConfig {
    pub template: Option<String>,
    pub rate: f64,
    pub concurrency: usize,
    pub timeout_s: f64,
    pub max_attempts: u32,
    pub offline: bool,
    pub revalidate: bool,
}

impl Default for FetchConfig {
    fn default() -> Self {
        let p = FetchPolicy::default();
        Self {
            template: None,
            rate: p.rate,
            concurrency: p.concurrency,
            timeout_s: p.timeout.as_secs_f64(),
            max_attempts: p.max_attempts,
            offline: false,
            revalidate: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    pub osm: Option<PathBuf>,
    pub tile_cache: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub tiles: TileConfig,
    pub render: RenderConfig,
    pub curate: CurateConfig,
    pub sample: SampleConfig,
    pub fetch: FetchConfig,
    pub paths: PathConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            tiles: TileConfig::default(),
            render: RenderConfig::default(),
            curate: CurateConfig::default(),
            sample: SampleConfig::default(),
            fetch: FetchConfig::default(),
            paths: PathConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = toml::from_str(text)?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Schema(cfg.schema_version));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let t = &self.tiles;
        if t.zoom > MAX_ZOOM {
            return bad(format!("zoom {} exceeds {MAX_ZOOM}", t.zoom));
        }
        if t.grid == 0 || t.tile_px == 0 || !t.grid.is_power_of_two() {
            return bad("grid must be a positive power of two and tile_px positive".into());
        }
        if u64::from(t.grid) > 1u64 << t.zoom {
            return bad(format!(
                "grid {} larger than the zoom {} world",
                t.grid, t.zoom
            ));
        }
        self.classifier()?;
        self.pool_spec()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.curate.bin_width_pp > 0.0) {
            return bad("bin_width_pp must be positive".into());
        }
        position_count(self.frame_px(), self.sample.patch_px)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.sample.block == 0 || self.sample.workers == 0 {
            return bad("sample block and workers must be positive".into());
        }
        if let Some(tpl) = &self.fetch.template {
            validate_template(tpl).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.fetch.concurrency == 0
            || self.fetch.max_attempts == 0
            || !(self.fetch.timeout_s > 0.0)
        {
            return bad("fetch concurrency, max_attempts and timeout_s must be positive".into());
        }
        Ok(())
    }

    pub fn frame_px(&self) -> u32 {
        self.tiles.grid * self.tiles.tile_px
    }

    pub fn strokes(&self) -> StrokeTable {
        StrokeTable {
            main: self.render.main_px,
            middle: self.render.middle_px,
            small: self.render.small_px,
        }
    }

    pub fn classifier(&self) -> Result<Classifier, ConfigError> {
        Classifier::new(
            self.render.small_roads.iter().map(String::as_str),
            self.strokes(),
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn pool_spec(&self) -> PoolSpec {
        PoolSpec {
            scale_k: self.curate.scale,
            baseline_pixels: self.curate.baseline_pixels,
            target_mean_density: self.curate.target_density,
            tolerance_pp: self.curate.tolerance_pp,
            min_density: self.curate.min_density,
            frame_px: self.frame_px(),
        }
    }

    pub fn sample_params(&self) -> SampleParams {
        SampleParams {
            n: self.sample.n,
            seed: self.seed,
            size: self.sample.patch_px,
            block: self.sample.block,
            workers: self.sample.workers,
        }
    }

    pub fn fetch_policy(&self) -> FetchPolicy {
        FetchPolicy {
            rate: self.fetch.rate,
            concurrency: self.fetch.concurrency,
            timeout: std::time::Duration::from_secs_f64(self.fetch.timeout_s),
            max_attempts: self.fetch.max_attempts,
            offline: self.fetch.offline,
            revalidate: self.fetch.revalidate,
            tile_px: self.tiles.tile_px,
            ..FetchPolicy::default()
        }
    }

    /// SHA-256 over the canonical JSON form of everything but `[paths]`.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("paths");
        }
        hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("json")))
    }
}
