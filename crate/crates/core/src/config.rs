//! Pipeline configuration: one TOML document with one level of sections.
//! Every numeric default lives here; paths are excluded from the hash.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::evaluation::SweepConfig;
use crate::features::EncoderConfig;
use crate::keypoints::KeypointConfig;
use crate::radar::{RenderParams, StructuredSceneParams, TrajectorySpec, DEFAULT_EXCLUSION_WINDOW, DEFAULT_LOOP_RADIUS};
use crate::registration::ClosureConfig;
use crate::scancontext::{DEFAULT_MAX_RANGE, DEFAULT_RINGS, DEFAULT_SECTORS};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config value `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    /// Point landmarks uniform over the square.
    Uniform,
    /// Walls, clusters and lone reflectors with a per-block mix.
    Structured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub scan_count: usize,
    pub revisits: usize,
    pub route_width: f64,
    pub route_height: f64,
    pub end_gap: f64,
    pub lateral_offset: f64,
    pub heading_jitter: f64,
    pub scene: SceneKind,
    /// Landmark count of a uniform scene.
    pub landmark_count: usize,
    pub scene_extent: f64,
    pub block_size: f64,
    pub objects_per_block: usize,
    pub wall_spacing: f64,
    pub azimuth_count: usize,
    pub range_bins: usize,
    pub range_resolution: f64,
    pub noise_sigma: f64,
    /// Seconds between scans.
    pub scan_period: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            scan_count: 240,
            revisits: 2,
            route_width: 60.0,
            route_height: 40.0,
            end_gap: 10.0,
            lateral_offset: 1.5,
            heading_jitter: 0.05,
            scene: SceneKind::Structured,
            landmark_count: 600,
            scene_extent: 160.0,
            block_size: 40.0,
            objects_per_block: 32,
            wall_spacing: 0.6,
            azimuth_count: 360,
            range_bins: 128,
            range_resolution: 0.25,
            noise_sigma: 0.02,
            scan_period: 0.25,
        }
    }
}

impl SimulateConfig {
    pub fn trajectory(&self) -> TrajectorySpec {
        TrajectorySpec {
            scan_count: self.scan_count,
            revisits: self.revisits,
            route_width: self.route_width,
            route_height: self.route_height,
            end_gap: self.end_gap,
            lateral_offset: self.lateral_offset,
            heading_jitter: self.heading_jitter,
        }
    }

    pub fn structure(&self) -> StructuredSceneParams {
        StructuredSceneParams {
            extent: self.scene_extent,
            block_size: self.block_size,
            objects_per_block: self.objects_per_block,
            wall_spacing: self.wall_spacing,
        }
    }

    pub fn render(&self) -> RenderParams {
        RenderParams {
            azimuth_count: self.azimuth_count,
            range_bins: self.range_bins,
            range_resolution: self.range_resolution,
            noise_sigma: self.noise_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageConfig {
    pub width: usize,
    pub height: usize,
    pub meters_per_pixel: f64,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            meters_per_pixel: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelConfig {
    pub loop_radius: f64,
    pub exclusion_window: usize,
    /// Scans before this fraction of the sequence feed training; pairs whose
    /// later scan falls after it are held out for evaluation.
    pub train_fraction: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            loop_radius: DEFAULT_LOOP_RADIUS,
            exclusion_window: DEFAULT_EXCLUSION_WINDOW,
            train_fraction: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetVladConfig {
    pub clusters: usize,
    pub temperature: f64,
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub triplets: usize,
    pub kmeans_iterations: usize,
    /// Local descriptors drawn per training scan for k-means.
    pub kmeans_per_scan: usize,
    pub detect_threshold: f64,
}

impl Default for NetVladConfig {
    fn default() -> Self {
        Self {
            clusters: 32,
            temperature: 1.0,
            margin: 0.5,
            learning_rate: 0.1,
            epochs: 20,
            triplets: 1500,
            kmeans_iterations: 25,
            kmeans_per_scan: 32,
            detect_threshold: crate::descriptor::DEFAULT_LOOP_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanContextConfig {
    pub rings: usize,
    pub sectors: usize,
    pub max_range: f64,
}

impl Default for ScanContextConfig {
    fn default() -> Self {
        Self {
            rings: DEFAULT_RINGS,
            sectors: DEFAULT_SECTORS,
            max_range: DEFAULT_MAX_RANGE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("run"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub simulate: SimulateConfig,
    pub image: ImageConfig,
    pub features: EncoderConfig,
    pub keypoints: KeypointConfig,
    pub labels: LabelConfig,
    pub netvlad: NetVladConfig,
    pub registration: ClosureConfig,
    pub scancontext: ScanContextConfig,
    pub evaluation: SweepConfig,
    pub paths: PathsConfig,
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

fn positive(field: &'static str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("{v} must be positive and finite")))
    }
}

fn at_least(field: &'static str, v: usize, min: usize) -> Result<(), ConfigError> {
    if v >= min {
        Ok(())
    } else {
        Err(invalid(field, format!("{v} must be >= {min}")))
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.simulate;
        at_least("simulate.scan_count", s.scan_count, 2)?;
        positive("simulate.route_width", s.route_width)?;
        positive("simulate.route_height", s.route_height)?;
        if !(s.end_gap >= 0.0 && s.lateral_offset >= 0.0 && s.heading_jitter >= 0.0) {
            return Err(invalid("simulate", "end_gap, lateral_offset and heading_jitter must be >= 0"));
        }
        at_least("simulate.landmark_count", s.landmark_count, 1)?;
        positive("simulate.scene_extent", s.scene_extent)?;
        positive("simulate.block_size", s.block_size)?;
        at_least("simulate.objects_per_block", s.objects_per_block, 1)?;
        positive("simulate.wall_spacing", s.wall_spacing)?;
        at_least("simulate.azimuth_count", s.azimuth_count, 4)?;
        at_least("simulate.range_bins", s.range_bins, 4)?;
        positive("simulate.range_resolution", s.range_resolution)?;
        if !(s.noise_sigma >= 0.0 && s.noise_sigma.is_finite()) {
            return Err(invalid("simulate.noise_sigma", "must be >= 0"));
        }
        positive("simulate.scan_period", s.scan_period)?;

        at_least("image.width", self.image.width, 8)?;
        at_least("image.height", self.image.height, 8)?;
        positive("image.meters_per_pixel", self.image.meters_per_pixel)?;

        let k = &self.keypoints;
        at_least("keypoints.budget", k.budget, 1)?;
        if k.window < 3 || k.window.is_multiple_of(2) {
            return Err(invalid("keypoints.window", "must be odd and >= 3"));
        }
        positive("keypoints.step_tolerance", k.step_tolerance)?;
        positive("keypoints.weight_floor", k.weight_floor)?;
        if !(0.0..=1.0).contains(&k.mask_quantile) {
            return Err(invalid("keypoints.mask_quantile", "must lie in [0, 1]"));
        }
        if !(k.min_separation >= 0.0) {
            return Err(invalid("keypoints.min_separation", "must be >= 0"));
        }

        positive("labels.loop_radius", self.labels.loop_radius)?;
        at_least("labels.exclusion_window", self.labels.exclusion_window, 1)?;
        if !(self.labels.train_fraction > 0.0 && self.labels.train_fraction < 1.0) {
            return Err(invalid("labels.train_fraction", "must lie in (0, 1)"));
        }

        let n = &self.netvlad;
        at_least("netvlad.clusters", n.clusters, 1)?;
        positive("netvlad.temperature", n.temperature)?;
        positive("netvlad.margin", n.margin)?;
        if !(n.learning_rate >= 0.0 && n.learning_rate.is_finite()) {
            return Err(invalid("netvlad.learning_rate", "must be finite and >= 0"));
        }
        at_least("netvlad.epochs", n.epochs, 1)?;
        at_least("netvlad.triplets", n.triplets, 1)?;
        at_least("netvlad.kmeans_per_scan", n.kmeans_per_scan, 1)?;
        if !(n.detect_threshold > 0.0 && n.detect_threshold < 2.0) {
            return Err(invalid("netvlad.detect_threshold", "must lie in (0, 2)"));
        }

        let r = &self.registration;
        if !(r.ratio > 0.0 && r.ratio <= 1.0) {
            return Err(invalid("registration.ratio", "must lie in (0, 1]"));
        }
        at_least("registration.ransac_iterations", r.ransac_iterations, 1)?;
        positive("registration.inlier_tol", r.inlier_tol)?;
        at_least("registration.icp_max_iterations", r.icp_max_iterations, 1)?;
        positive("registration.correspondence_radius", r.correspondence_radius)?;
        positive("registration.convergence_tol", r.convergence_tol)?;
        positive("registration.max_residual", r.max_residual)?;

        at_least("scancontext.rings", self.scancontext.rings, 2)?;
        at_least("scancontext.sectors", self.scancontext.sectors, 2)?;
        positive("scancontext.max_range", self.scancontext.max_range)?;

        at_least("evaluation.t_count", self.evaluation.t_count, 1)?;
        if !(self.evaluation.t_start.is_finite() && self.evaluation.t_step.is_finite()) {
            return Err(invalid("evaluation", "sweep bounds must be finite"));
        }
        Ok(())
    }

    /// SHA-256 over the canonical TOML of every field except paths.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsConfig {
            run_dir: PathBuf::new(),
        };
        if let EncoderConfig::External { dir } = &mut c.features {
            *dir = PathBuf::new();
        }
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }
}

/// Independent per-item seed stream: SplitMix64 over the base seed, a tag
/// and an index.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for b in tag.bytes().chain(index.to_le_bytes()) {
        h = h.wrapping_add(b as u64).wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}
