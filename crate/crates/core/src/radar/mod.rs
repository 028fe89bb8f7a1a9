//! Radar scan data model, projection, simulation and dataset labeling.

mod dataset;
mod pose;
mod projection;
mod scan;
mod sim;

pub use dataset::{
    balance_pairs, label_loops, label_pair, read_labels_csv, sample_triplets, write_labels_csv,
    DatasetManifest, LoopLabel, ManifestEntry, Triplet, DEFAULT_EXCLUSION_WINDOW,
    DEFAULT_LOOP_RADIUS,
};
pub use pose::{wrap_angle, Pose2};
pub use projection::polar_to_cartesian;
pub use scan::{read_polar_scan, uniform_azimuths, write_polar_scan, CartesianImage, PolarScan};
pub use sim::{
    render_scan, route_trajectory, simulate_scene, simulate_structured_scene, Landmark, RenderParams, SceneModel,
    StructuredSceneParams, TrajectorySpec,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RadarError {
    #[error("scan has zero azimuths")]
    ZeroAzimuths,
    #[error("scan power contains non-finite values")]
    NonFinitePower,
    #[error("invalid scan: {0}")]
    InvalidScan(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("duplicate scan id {0:?}")]
    DuplicateScanId(String),
    #[error("manifest timestamps decrease")]
    NonMonotonicTimestamps,
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("labels hold a single class ({positives} positives, {negatives} negatives)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("no positive pairs to build triplets from")]
    NoPositivePairs,
    #[error("no positive pair has a member with a negative partner")]
    NoTripletCandidates,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
