//! Loop closure geometry: descriptor matching, RANSAC over two-point rigid
//! fits, and point-to-point ICP.

mod icp;
mod matching;
mod ransac;
mod rigid;

pub use icp::{icp2d, IcpParams};
pub use matching::match_descriptors;
pub use ransac::ransac_rigid2d;
pub use rigid::{estimate_rigid2d, sum_squared_residual};

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::keypoints::LocalDescriptorSet;
use crate::radar::Pose2;

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("paired lists differ in length: {src} vs {dst}")]
    LengthMismatch { src: usize, dst: usize },
    #[error("need at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("point set is coincident")]
    CoincidentPoints,
    #[error("each cloud needs at least 3 points")]
    TooFewPoints,
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("no descriptors")]
    EmptyDescriptors,
    #[error("every descriptor has zero norm")]
    AllDescriptorsDegenerate,
    #[error("match index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud2 {
    pub points: Vec<(f64, f64)>,
}

impl PointCloud2 {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, RegistrationError> {
        if points.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
            return Err(RegistrationError::NonFinite);
        }
        Ok(Self { points })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    pub pairs: Vec<(usize, usize)>,
    pub distances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    /// Maps source coordinates into the target frame.
    pub pose: Pose2,
    pub converged: bool,
    pub iterations: usize,
    pub mean_residual: f64,
    pub inlier_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClosureConfig {
    pub ratio: f64,
    pub ransac_iterations: usize,
    pub inlier_tol: f64,
    pub icp_max_iterations: usize,
    pub correspondence_radius: f64,
    pub convergence_tol: f64,
    /// Converged registrations with a larger mean residual are not accepted.
    pub max_residual: f64,
}

impl Default for ClosureConfig {
    fn default() -> Self {
        Self {
            ratio: 0.8,
            ransac_iterations: 500,
            inlier_tol: 0.5,
            icp_max_iterations: 50,
            correspondence_radius: 2.0,
            convergence_tol: 1e-4,
            max_residual: 0.85,
        }
    }
}

impl ClosureConfig {
    pub fn icp(&self) -> IcpParams {
        IcpParams {
            max_iterations: self.icp_max_iterations,
            correspondence_radius: self.correspondence_radius,
            convergence_tol: self.convergence_tol,
        }
    }
}

/// Metric keypoints and their descriptors for one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanArtifacts {
    pub points: PointCloud2,
    pub descriptors: LocalDescriptorSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosureOutcome {
    pub icp: RegistrationResult,
    pub ransac_pose: Pose2,
    pub match_count: usize,
    /// RANSAC failed and ICP started from the identity.
    pub fallback: bool,
    /// Converged with mean residual at most `max_residual`.
    pub accepted: bool,
}

/// Registers `source` into the frame of `target`.
pub fn close_loop(
    target: &ScanArtifacts,
    source: &ScanArtifacts,
    cfg: &ClosureConfig,
    seed: u64,
) -> Result<ClosureOutcome, RegistrationError> {
    if source.points.points.len() != source.descriptors.len() || target.points.points.len() != target.descriptors.len() {
        return Err(RegistrationError::InvalidArgument("keypoint and descriptor counts differ".into()));
    }
    let matches = match match_descriptors(&source.descriptors, &target.descriptors, cfg.ratio) {
        Ok(m) => m,
        Err(RegistrationError::AllDescriptorsDegenerate) => MatchSet::default(),
        Err(e) => return Err(e),
    };
    let ransac = if matches.pairs.len() >= 2 {
        Some(ransac_rigid2d(
            &matches,
            &source.points,
            &target.points,
            cfg.ransac_iterations,
            cfg.inlier_tol,
            seed,
        )?)
    } else {
        None
    };
    let (guess, fallback) = match &ransac {
        Some(r) if r.converged => (r.pose, false),
        _ => (Pose2::identity(), true),
    };
    let icp = icp2d(&source.points, &target.points, guess, &cfg.icp())?;
    let accepted = icp.converged && icp.mean_residual <= cfg.max_residual;
    Ok(ClosureOutcome {
        icp,
        ransac_pose: guess,
        match_count: matches.pairs.len(),
        fallback,
        accepted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosureRecord {
    pub id_i: String,
    pub id_j: String,
    pub dx_m: f64,
    pub dy_m: f64,
    pub dtheta_rad: f64,
    pub converged: bool,
    pub residual_m: f64,
    pub inliers: usize,
}

pub fn write_closures_csv(records: &[ClosureRecord], path: &Path) -> Result<(), RegistrationError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    if records.is_empty() {
        w.write_record(["id_i", "id_j", "dx_m", "dy_m", "dtheta_rad", "converged", "residual_m", "inliers"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_closures_csv(path: &Path) -> Result<Vec<ClosureRecord>, RegistrationError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Landmarks carry random descriptors; the source scan sees them from a
    /// displaced pose.
    fn scan_pair(seed: u64, truth: Pose2, related: bool) -> (ScanArtifacts, ScanArtifacts) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 120;
        let world: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0))).collect();
        let desc: Vec<Vec<f64>> = (0..n).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let target = ScanArtifacts {
            points: PointCloud2::new(world.clone()).unwrap(),
            descriptors: LocalDescriptorSet::from_rows(8, &desc),
        };
        let inv = truth.inverse();
        let src_pts: Vec<_> = if related {
            world.iter().map(|p| inv.transform_point(*p)).collect()
        } else {
            (0..n).map(|_| (rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0))).collect()
        };
        let src_desc: Vec<Vec<f64>> = if related {
            desc.iter().map(|d| d.iter().map(|v| v + rng.random_range(-0.05..0.05)).collect()).collect()
        } else {
            (0..n).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let source = ScanArtifacts {
            points: PointCloud2::new(src_pts).unwrap(),
            descriptors: LocalDescriptorSet::from_rows(8, &src_desc),
        };
        (target, source)
    }

    #[test]
    fn identical_scans_close_at_identity() {
        let (a, _) = scan_pair(1, Pose2::identity(), true);
        let out = close_loop(&a, &a, &ClosureConfig::default(), 0).unwrap();
        assert!(out.icp.converged && out.accepted && !out.fallback);
        assert!(out.icp.pose.x.abs() < 1e-9 && out.icp.pose.y.abs() < 1e-9 && out.icp.pose.theta.abs() < 1e-9);
    }

    #[test]
    fn known_revisit_is_recovered() {
        let truth = Pose2::new(2.0, 1.0, 15f64.to_radians());
        let (a, b) = scan_pair(2, truth, true);
        let out = close_loop(&a, &b, &ClosureConfig::default(), 4).unwrap();
        assert!(out.accepted);
        assert!((out.icp.pose.x - truth.x).hypot(out.icp.pose.y - truth.y) < 0.1);
        assert!((out.icp.pose.theta - truth.theta).abs().to_degrees() < 1.0);
    }

    #[test]
    fn unrelated_scenes_are_not_accepted() {
        for seed in 0..5 {
            let (a, b) = scan_pair(10 + seed, Pose2::identity(), false);
            let out = close_loop(&a, &b, &ClosureConfig::default(), seed).unwrap();
            assert!(!out.accepted, "seed {seed}: residual {}", out.icp.mean_residual);
        }
    }

    #[test]
    fn closure_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let recs = vec![ClosureRecord {
            id_i: "a".into(),
            id_j: "b".into(),
            dx_m: 1.5,
            dy_m: -0.25,
            dtheta_rad: 0.1,
            converged: true,
            residual_m: 0.01,
            inliers: 42,
        }];
        write_closures_csv(&recs, &p).unwrap();
        assert_eq!(read_closures_csv(&p).unwrap(), recs);
        write_closures_csv(&[], &p).unwrap();
        assert!(read_closures_csv(&p).unwrap().is_empty());
    }
}
