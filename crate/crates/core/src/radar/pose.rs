use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Wraps an angle to the half-open interval (-pi, pi].
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// Planar rigid pose. `theta` is always kept wrapped to (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Default for Pose2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }

    /// Maps a point expressed in this pose's frame into the parent frame.
    pub fn transform_point(&self, p: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (c * p.0 - s * p.1 + self.x, s * p.0 + c * p.1 + self.y)
    }

    /// `self ⊕ other`: applies `other` in the frame of `self`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (x, y) = self.transform_point((other.x, other.y));
        Pose2::new(x, y, self.theta + other.theta)
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.theta)
    }

    /// Pose of `other` expressed in the frame of `self`.
    pub fn relative_to_self(&self, other: &Pose2) -> Pose2 {
        self.inverse().compose(other)
    }

    pub fn planar_distance(&self, other: &Pose2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_keeps_pi_and_maps_minus_pi() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.5 + 4.0 * PI) - 0.5).abs() < 1e-12);
        assert!((wrap_angle(-0.5 - 2.0 * PI) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn relative_then_compose_roundtrips() {
        let a = Pose2::new(3.0, -1.0, 2.9);
        let b = Pose2::new(-4.0, 7.5, -2.8);
        let rel = a.relative_to_self(&b);
        let back = a.compose(&rel);
        assert!((back.x - b.x).abs() < 1e-9);
        assert!((back.y - b.y).abs() < 1e-9);
        assert!(wrap_angle(back.theta - b.theta).abs() < 1e-9);
    }

    #[test]
    fn inverse_composes_to_identity() {
        let a = Pose2::new(1.5, 2.0, 0.7);
        let id = a.compose(&a.inverse());
        assert!(id.x.abs() < 1e-12 && id.y.abs() < 1e-12 && id.theta.abs() < 1e-12);
    }
}
