use std::collections::HashMap;

use super::{estimate_rigid2d, PointCloud2, RegistrationError, RegistrationResult};
use crate::radar::Pose2;

/// Uniform grid over the target cloud; a radius query only visits the 3x3
/// block of cells around the query.
struct Grid<'a> {
    points: &'a [(f64, f64)],
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl<'a> Grid<'a> {
    fn new(points: &'a [(f64, f64)], cell: f64) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (k, p) in points.iter().enumerate() {
            buckets.entry(Self::key(*p, cell)).or_default().push(k);
        }
        Self { points, cell, buckets }
    }

    fn key(p: (f64, f64), cell: f64) -> (i64, i64) {
        ((p.0 / cell).floor() as i64, (p.1 / cell).floor() as i64)
    }

    /// Nearest point within `radius` (lowest index on ties).
    fn nearest(&self, q: (f64, f64), radius: f64) -> Option<(usize, f64)> {
        let (cx, cy) = Self::key(q, self.cell);
        let mut best: Option<(usize, f64)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                let Some(bucket) = self.buckets.get(&(cx + dx, cy + dy)) else {
                    continue;
                };
                for &k in bucket {
                    let p = self.points[k];
                    let d = (p.0 - q.0).hypot(p.1 - q.1);
                    if d > radius {
                        continue;
                    }
                    match best {
                        Some((bk, bd)) if d > bd || (d == bd && k > bk) => {}
                        _ => best = Some((k, d)),
                    }
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpParams {
    pub max_iterations: usize,
    pub correspondence_radius: f64,
    pub convergence_tol: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            correspondence_radius: 2.0,
            convergence_tol: 1e-4,
        }
    }
}

type Pairs = (Vec<(f64, f64)>, Vec<(f64, f64)>, f64);

fn correspondences(src: &[(f64, f64)], grid: &Grid, pose: &Pose2, radius: f64) -> Pairs {
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut sum = 0.0;
    for s in src {
        let p = pose.transform_point(*s);
        if let Some((k, d)) = grid.nearest(p, radius) {
            a.push(p);
            b.push(grid.points[k]);
            sum += d;
        }
    }
    let mean = if a.is_empty() { 0.0 } else { sum / a.len() as f64 };
    (a, b, mean)
}

/// Point-to-point ICP from `guess`. Stops when the incremental update moves
/// less than `convergence_tol` (meters, and radians for the heading).
pub fn icp2d(src: &PointCloud2, dst: &PointCloud2, guess: Pose2, params: &IcpParams) -> Result<RegistrationResult, RegistrationError> {
    if src.points.len() < 3 || dst.points.len() < 3 {
        return Err(RegistrationError::TooFewPoints);
    }
    let IcpParams {
        max_iterations,
        correspondence_radius: radius,
        convergence_tol: tol,
    } = *params;
    if max_iterations == 0 || !(radius > 0.0) || !(tol > 0.0) {
        return Err(RegistrationError::InvalidArgument("ICP parameters must be positive".into()));
    }
    let grid = Grid::new(&dst.points, radius);
    let mut pose = guess;
    let mut converged = false;
    let mut used = 0;
    for it in 1..=max_iterations {
        used = it;
        let (a, b, _) = correspondences(&src.points, &grid, &pose, radius);
        let Ok(step) = estimate_rigid2d(&a, &b) else {
            break;
        };
        pose = step.compose(&pose);
        if step.x.hypot(step.y) < tol && step.theta.abs() < tol {
            converged = true;
            break;
        }
    }
    let (a, _, mean_residual) = correspondences(&src.points, &grid, &pose, radius);
    if a.is_empty() {
        converged = false;
    }
    Ok(RegistrationResult {
        pose,
        converged,
        iterations: used,
        mean_residual,
        inlier_count: a.len(),
    })
}
