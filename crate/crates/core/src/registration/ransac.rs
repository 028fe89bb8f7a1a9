use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{estimate_rigid2d, MatchSet, PointCloud2, RegistrationError, RegistrationResult};
use crate::radar::Pose2;

fn consensus(pose: &Pose2, src: &[(f64, f64)], dst: &[(f64, f64)], tol: f64) -> (Vec<usize>, f64) {
    let mut inliers = Vec::new();
    let mut sum = 0.0;
    for (k, (s, d)) in src.iter().zip(dst).enumerate() {
        let p = pose.transform_point(*s);
        let r = (p.0 - d.0).hypot(p.1 - d.1);
        if r <= tol {
            inliers.push(k);
            sum += r;
        }
    }
    let mean = if inliers.is_empty() { f64::INFINITY } else { sum / inliers.len() as f64 };
    (inliers, mean)
}

/// Seeded two-match RANSAC. Hypotheses are drawn sequentially, scored in
/// parallel and reduced by (inlier count, mean residual, index).
pub fn ransac_rigid2d(
    matches: &MatchSet,
    src: &PointCloud2,
    dst: &PointCloud2,
    iterations: usize,
    inlier_tol: f64,
    seed: u64,
) -> Result<RegistrationResult, RegistrationError> {
    if matches.pairs.len() < 2 {
        return Err(RegistrationError::TooFewPairs(matches.pairs.len()));
    }
    if !(inlier_tol > 0.0 && inlier_tol.is_finite()) {
        return Err(RegistrationError::InvalidArgument("inlier_tol must be positive".into()));
    }
    if iterations == 0 {
        return Err(RegistrationError::InvalidArgument("iterations must be >= 1".into()));
    }
    let mut a = Vec::with_capacity(matches.pairs.len());
    let mut b = Vec::with_capacity(matches.pairs.len());
    for &(i, j) in &matches.pairs {
        let s = *src.points.get(i).ok_or(RegistrationError::IndexOutOfRange(i))?;
        let d = *dst.points.get(j).ok_or(RegistrationError::IndexOutOfRange(j))?;
        a.push(s);
        b.push(d);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<[usize; 2]> = (0..iterations)
        .map(|_| {
            let s = sample(&mut rng, a.len(), 2);
            [s.index(0), s.index(1)]
        })
        .collect();
    let best = samples
        .par_iter()
        .enumerate()
        .filter_map(|(h, &[i, j])| {
            let pose = estimate_rigid2d(&[a[i], a[j]], &[b[i], b[j]]).ok()?;
            let (inliers, mean) = consensus(&pose, &a, &b, inlier_tol);
            (inliers.len() >= 2).then_some((inliers.len(), mean, h, pose))
        })
        .reduce_with(|x, y| {
            let better = y.0 > x.0 || (y.0 == x.0 && (y.1 < x.1 || (y.1 == x.1 && y.2 < x.2)));
            if better {
                y
            } else {
                x
            }
        });
    let Some((_, _, _, hypothesis)) = best else {
        return Ok(RegistrationResult {
            pose: Pose2::identity(),
            converged: false,
            iterations,
            mean_residual: 0.0,
            inlier_count: 0,
        });
    };
    let (inliers, _) = consensus(&hypothesis, &a, &b, inlier_tol);
    let ia: Vec<_> = inliers.iter().map(|&k| a[k]).collect();
    let ib: Vec<_> = inliers.iter().map(|&k| b[k]).collect();
    let pose = estimate_rigid2d(&ia, &ib).unwrap_or(hypothesis);
    let mean_residual = ia
        .iter()
        .zip(&ib)
        .map(|(s, d)| {
            let p = pose.transform_point(*s);
            (p.0 - d.0).hypot(p.1 - d.1)
        })
        .sum::<f64>()
        / ia.len() as f64;
    Ok(RegistrationResult {
        pose,
        converged: true,
        iterations,
        mean_residual,
        inlier_count: inliers.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn scenario(seed: u64, n: usize, outlier_frac: f64, truth: Pose2) -> (MatchSet, PointCloud2, PointCloud2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src: Vec<_> = (0..n).map(|_| (rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0))).collect();
        let outliers = (n as f64 * outlier_frac).round() as usize;
        let dst: Vec<_> = src
            .iter()
            .enumerate()
            .map(|(k, &p)| {
                if k < outliers {
                    (rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0))
                } else {
                    truth.transform_point(p)
                }
            })
            .collect();
        let matches = MatchSet {
            pairs: (0..n).map(|k| (k, k)).collect(),
            distances: vec![0.0; n],
        };
        (matches, PointCloud2::new(src).unwrap(), PointCloud2::new(dst).unwrap())
    }

    #[test]
    fn noiseless_consensus_is_exact() {
        let t = Pose2::new(3.0, -1.5, 0.7);
        let (m, s, d) = scenario(1, 40, 0.0, t);
        let r = ransac_rigid2d(&m, &s, &d, 50, 0.5, 7).unwrap();
        assert!(r.converged);
        assert_eq!(r.inlier_count, 40);
        assert!((r.pose.x - t.x).abs() < 1e-6 && (r.pose.y - t.y).abs() < 1e-6 && (r.pose.theta - t.theta).abs() < 1e-6);
    }

    #[test]
    fn recovers_with_twenty_percent_outliers() {
        let t = Pose2::new(-4.0, 2.5, -0.4);
        let (m, s, d) = scenario(2, 100, 0.2, t);
        let r = ransac_rigid2d(&m, &s, &d, 200, 0.5, 3).unwrap();
        assert!((r.pose.x - t.x).hypot(r.pose.y - t.y) < 0.05);
        assert!((r.pose.theta - t.theta).abs().to_degrees() < 0.5);
    }

    #[test]
    fn two_matches_fit_exactly() {
        let t = Pose2::new(1.0, 1.0, 0.3);
        let (m, s, d) = scenario(3, 2, 0.0, t);
        let r = ransac_rigid2d(&m, &s, &d, 10, 0.5, 0).unwrap();
        assert!(r.mean_residual < 1e-9);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let (m, s, d) = scenario(4, 60, 0.4, Pose2::new(0.5, 0.5, 0.1));
        let a = ransac_rigid2d(&m, &s, &d, 100, 0.5, 11).unwrap();
        let b = ransac_rigid2d(&m, &s, &d, 100, 0.5, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn preconditions() {
        let (m, s, d) = scenario(5, 1, 0.0, Pose2::identity());
        assert!(ransac_rigid2d(&m, &s, &d, 10, 0.5, 0).is_err());
        let (m, s, d) = scenario(5, 5, 0.0, Pose2::identity());
        assert!(ransac_rigid2d(&m, &s, &d, 10, 0.0, 0).is_err());
    }
}
