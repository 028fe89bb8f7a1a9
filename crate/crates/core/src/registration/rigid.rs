use nalgebra::{Matrix2, Vector2};

use super::RegistrationError;
use crate::radar::Pose2;

const COINCIDENT_EPS: f64 = 1e-12;

/// Closed-form least-squares rigid transform mapping `src[i]` onto `dst[i]`
/// (centroid subtraction, SVD of the 2x2 cross-covariance, determinant
/// correction against reflections).
pub fn estimate_rigid2d(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Result<Pose2, RegistrationError> {
    if src.len() != dst.len() {
        return Err(RegistrationError::LengthMismatch {
            src: src.len(),
            dst: dst.len(),
        });
    }
    if src.len() < 2 {
        return Err(RegistrationError::TooFewPairs(src.len()));
    }
    let n = src.len() as f64;
    let centroid = |pts: &[(f64, f64)]| {
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
        Vector2::new(sx / n, sy / n)
    };
    let (cs, cd) = (centroid(src), centroid(dst));
    let mut h = Matrix2::zeros();
    let (mut spread_s, mut spread_d) = (0.0, 0.0);
    for (s, d) in src.iter().zip(dst) {
        let a = Vector2::new(s.0, s.1) - cs;
        let b = Vector2::new(d.0, d.1) - cd;
        spread_s += a.norm_squared();
        spread_d += b.norm_squared();
        h += a * b.transpose();
    }
    if spread_s <= COINCIDENT_EPS || spread_d <= COINCIDENT_EPS {
        return Err(RegistrationError::CoincidentPoints);
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("u requested");
    let mut v = svd.v_t.expect("v_t requested").transpose();
    let mut r = v * u.transpose();
    if r.determinant() < 0.0 {
        v.set_column(1, &(-v.column(1)));
        r = v * u.transpose();
    }
    let t = cd - r * cs;
    Ok(Pose2::new(t.x, t.y, r[(1, 0)].atan2(r[(0, 0)])))
}

pub fn sum_squared_residual(pose: &Pose2, src: &[(f64, f64)], dst: &[(f64, f64)]) -> f64 {
    src.iter()
        .zip(dst)
        .map(|(s, d)| {
            let p = pose.transform_point(*s);
            (p.0 - d.0).powi(2) + (p.1 - d.1).powi(2)
        })
        .sum()
}
