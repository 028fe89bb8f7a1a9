//! Synthetic point-landmark scenes, scan rendering and revisit trajectories.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::{uniform_azimuths, PolarScan, Pose2, RadarError};

/// Blob half-width in bins; the Gaussian is negligible beyond 4 sigma.
const BLOB_RADIUS_BINS: i64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub x: f64,
    pub y: f64,
    /// In (0, 1].
    pub reflectivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneModel {
    pub extent: f64,
    pub landmarks: Vec<Landmark>,
}

/// Landmarks uniform over the square `[-extent/2, extent/2]^2`.
pub fn simulate_scene(seed: u64, landmark_count: usize, extent: f64) -> Result<SceneModel, RadarError> {
    if landmark_count == 0 {
        return Err(RadarError::InvalidArgument("landmark_count must be >= 1".into()));
    }
    if !(extent > 0.0 && extent.is_finite()) {
        return Err(RadarError::InvalidArgument("extent must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = extent / 2.0;
    let landmarks = (0..landmark_count)
        .map(|_| {
            let x = rng.random_range(-half..half);
            let y = rng.random_range(-half..half);
            let u: f64 = rng.random();
            Landmark {
                x,
                y,
                reflectivity: 1.0 - 0.7 * u,
            }
        })
        .collect();
    Ok(SceneModel { extent, landmarks })
}

/// Layout of a block-structured scene. Every block draws its own style
/// (dominant wall orientation, object mix, base reflectivity), so the local
/// appearance of the world changes from place to place.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructuredSceneParams {
    pub extent: f64,
    pub block_size: f64,
    pub objects_per_block: usize,
    /// Spacing of the point reflectors that make up a wall.
    pub wall_spacing: f64,
}

/// Scene built from point landmarks grouped into walls, clusters and lone
/// reflectors, with a per-block mix of the three.
pub fn simulate_structured_scene(seed: u64, params: &StructuredSceneParams) -> Result<SceneModel, RadarError> {
    let StructuredSceneParams {
        extent,
        block_size,
        objects_per_block,
        wall_spacing,
    } = *params;
    if !(extent > 0.0 && extent.is_finite()) || !(block_size > 0.0 && block_size.is_finite()) {
        return Err(RadarError::InvalidArgument("extent and block_size must be > 0".into()));
    }
    if objects_per_block == 0 || !(wall_spacing > 0.0) {
        return Err(RadarError::InvalidArgument("need objects_per_block >= 1 and wall_spacing > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = extent / 2.0;
    let blocks = (extent / block_size).ceil() as usize;
    let mut landmarks = Vec::new();
    let push = |x: f64, y: f64, reflectivity: f64, out: &mut Vec<Landmark>| {
        if x.abs() <= half && y.abs() <= half {
            out.push(Landmark {
                x,
                y,
                reflectivity: reflectivity.clamp(0.05, 1.0),
            });
        }
    };
    for bi in 0..blocks {
        for bj in 0..blocks {
            let x0 = -half + bi as f64 * block_size;
            let y0 = -half + bj as f64 * block_size;
            let orientation = rng.random_range(0.0..PI);
            let wall_share: f64 = rng.random();
            let cluster_share = rng.random_range(0.0..1.0 - wall_share);
            let base = rng.random_range(0.3..1.0);
            for _ in 0..objects_per_block {
                let cx = x0 + rng.random_range(0.0..block_size);
                let cy = y0 + rng.random_range(0.0..block_size);
                let kind: f64 = rng.random();
                if kind < wall_share {
                    let len = rng.random_range(3.0..10.0);
                    let turn = if rng.random_bool(0.3) { PI / 2.0 } else { 0.0 };
                    let a = orientation + turn + rng.random_range(-0.15..0.15);
                    let n = (len / wall_spacing).round() as usize + 1;
                    for k in 0..n {
                        let s = k as f64 * wall_spacing - len / 2.0;
                        let r = base * rng.random_range(0.6..1.0);
                        push(cx + s * a.cos(), cy + s * a.sin(), r, &mut landmarks);
                    }
                } else if kind < wall_share + cluster_share {
                    for _ in 0..rng.random_range(3..7) {
                        let ang = rng.random_range(0.0..2.0 * PI);
                        let rad = rng.random_range(0.0..1.5);
                        let r = base * rng.random_range(0.4..1.0);
                        push(cx + rad * ang.cos(), cy + rad * ang.sin(), r, &mut landmarks);
                    }
                } else {
                    let r = rng.random_range(0.5..1.0);
                    push(cx, cy, r, &mut landmarks);
                }
            }
        }
    }
    Ok(SceneModel { extent, landmarks })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderParams {
    pub azimuth_count: usize,
    pub range_bins: usize,
    pub range_resolution: f64,
    pub noise_sigma: f64,
}

/// Renders the scene as seen from `sensor_pose`. Each landmark inside the
/// maximum range adds `reflectivity * exp(-(da^2 + dr^2) / 2)` around its
/// (azimuth, range) bin position, with `da` taken circularly.
pub fn render_scan(
    scene: &SceneModel,
    sensor_pose: &Pose2,
    params: &RenderParams,
    rng_seed: u64,
    scan_id: impl Into<String>,
    timestamp: i64,
) -> Result<PolarScan, RadarError> {
    let RenderParams {
        azimuth_count: a,
        range_bins: r,
        range_resolution,
        noise_sigma,
    } = *params;
    if a < 4 || r < 4 {
        return Err(RadarError::InvalidArgument("render needs A >= 4 and R >= 4".into()));
    }
    if !(range_resolution > 0.0) || !(noise_sigma >= 0.0) {
        return Err(RadarError::InvalidArgument("bad range_resolution or noise_sigma".into()));
    }
    let max_range = r as f64 * range_resolution;
    let az_width = 2.0 * PI / a as f64;
    let mut acc = vec![0.0f64; a * r];
    let to_sensor = sensor_pose.inverse();
    for lm in &scene.landmarks {
        let (sx, sy) = to_sensor.transform_point((lm.x, lm.y));
        let range = sx.hypot(sy);
        if range > max_range {
            continue;
        }
        let mut bearing = sy.atan2(sx);
        if bearing < 0.0 {
            bearing += 2.0 * PI;
        }
        let fa = bearing / az_width;
        let fr = range / range_resolution;
        let ca = fa.round() as i64;
        let cr = fr.round() as i64;
        for da in -BLOB_RADIUS_BINS..=BLOB_RADIUS_BINS {
            let ai = ca + da;
            let dist_a = ai as f64 - fa;
            let row = ai.rem_euclid(a as i64) as usize;
            for dr in -BLOB_RADIUS_BINS..=BLOB_RADIUS_BINS {
                let ri = cr + dr;
                if ri < 0 || ri >= r as i64 {
                    continue;
                }
                let dist_r = ri as f64 - fr;
                acc[row * r + ri as usize] +=
                    lm.reflectivity * (-(dist_a * dist_a + dist_r * dist_r) / 2.0).exp();
            }
        }
    }
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let normal = Normal::new(0.0, noise_sigma)
            .map_err(|e| RadarError::InvalidArgument(e.to_string()))?;
        for v in acc.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let power = acc.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Ok(PolarScan {
        scan_id: scan_id.into(),
        azimuth_count: a,
        range_bins: r,
        range_resolution,
        azimuths: uniform_azimuths(a),
        power,
        timestamp,
    })
}

/// A rectangular route driven counter-clockwise, repeated `1 + revisits`
/// times. The final `end_gap` meters are left undriven so a trajectory
/// without revisits never returns to its start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub scan_count: usize,
    pub revisits: usize,
    pub route_width: f64,
    pub route_height: f64,
    pub end_gap: f64,
    /// Per-lap lateral offset drawn uniformly from `[-lateral, lateral]`.
    pub lateral_offset: f64,
    /// Per-scan heading jitter (radians, uniform).
    pub heading_jitter: f64,
}

pub fn route_trajectory(spec: &TrajectorySpec, seed: u64) -> Result<Vec<Pose2>, RadarError> {
    if spec.scan_count < 2 {
        return Err(RadarError::InvalidArgument("trajectory needs at least 2 scans".into()));
    }
    if !(spec.route_width > 0.0 && spec.route_height > 0.0) {
        return Err(RadarError::InvalidArgument("route dimensions must be > 0".into()));
    }
    let perimeter = 2.0 * (spec.route_width + spec.route_height);
    let total = (1 + spec.revisits) as f64 * perimeter - spec.end_gap;
    if !(total > 0.0) || !(spec.end_gap >= 0.0) {
        return Err(RadarError::InvalidArgument("end_gap leaves no route to drive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let laps = 1 + spec.revisits;
    let offsets: Vec<f64> = (0..laps)
        .map(|_| {
            if spec.lateral_offset > 0.0 {
                rng.random_range(-spec.lateral_offset..=spec.lateral_offset)
            } else {
                0.0
            }
        })
        .collect();
    let (w, h) = (spec.route_width, spec.route_height);
    let step = total / (spec.scan_count - 1) as f64;
    let poses = (0..spec.scan_count)
        .map(|k| {
            let s = k as f64 * step;
            let lap = ((s / perimeter).floor() as usize).min(laps - 1);
            let along = s - lap as f64 * perimeter;
            // Corner origin at (-w/2, -h/2); sides traversed +x, +y, -x, -y.
            let (px, py, heading) = if along < w {
                (-w / 2.0 + along, -h / 2.0, 0.0)
            } else if along < w + h {
                (w / 2.0, -h / 2.0 + (along - w), PI / 2.0)
            } else if along < 2.0 * w + h {
                (w / 2.0 - (along - w - h), h / 2.0, PI)
            } else {
                (-w / 2.0, h / 2.0 - (along - 2.0 * w - h), -PI / 2.0)
            };
            // Lateral offset to the left of the driving direction.
            let off = offsets[lap];
            let (lx, ly) = (-heading.sin() * off, heading.cos() * off);
            let jitter = if spec.heading_jitter > 0.0 {
                rng.random_range(-spec.heading_jitter..=spec.heading_jitter)
            } else {
                0.0
            };
            Pose2::new(px + lx, py + ly, heading + jitter)
        })
        .collect();
    Ok(poses)
}
