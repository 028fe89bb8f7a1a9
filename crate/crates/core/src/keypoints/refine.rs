use crate::features::GuidanceMap;

use super::{KeypointError, KeypointSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineParams {
    pub iterations: usize,
    /// Odd side length of the square window, in cells.
    pub window: usize,
    pub step_tolerance: f64,
    /// Added to every weight so a flat window still has a centroid.
    pub weight_floor: f64,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self {
            iterations: 10,
            window: 9,
            step_tolerance: 1e-3,
            weight_floor: 1e-6,
        }
    }
}

/// One mean-shift update. The window is centered on the subpixel position
/// `p` and sampled bilinearly; weights are the guidance minus the window
/// minimum, plus the floor. Returns the weighted centroid.
pub fn mean_shift_step(g: &GuidanceMap, p: (f64, f64), window: usize, weight_floor: f64) -> (f64, f64) {
    let half = (window / 2) as isize;
    let mut samples = Vec::with_capacity(window * window);
    let mut min = f64::INFINITY;
    for dv in -half..=half {
        for du in -half..=half {
            let val = g.sample(p.0 + du as f64, p.1 + dv as f64);
            min = min.min(val);
            samples.push((du as f64, dv as f64, val));
        }
    }
    let (mut sw, mut su, mut sv) = (0.0, 0.0, 0.0);
    for (du, dv, val) in samples {
        let w = (val - min).max(0.0) + weight_floor;
        sw += w;
        su += w * du;
        sv += w * dv;
    }
    (p.0 + su / sw, p.1 + sv / sw)
}

pub fn refine_keypoints(kp: &KeypointSet, g: &GuidanceMap, params: &RefineParams) -> Result<KeypointSet, KeypointError> {
    if params.window < 3 || params.window.is_multiple_of(2) {
        return Err(KeypointError::InvalidArgument("window must be odd and >= 3".into()));
    }
    if params.window > g.width || params.window > g.height {
        return Err(KeypointError::WindowTooLarge {
            window: params.window,
            width: g.width,
            height: g.height,
        });
    }
    let (umax, vmax) = ((g.width - 1) as f64, (g.height - 1) as f64);
    let clamp = |p: (f64, f64)| (p.0.clamp(0.0, umax), p.1.clamp(0.0, vmax));
    let points: Vec<(f64, f64)> = kp
        .points
        .iter()
        .map(|&start| {
            let mut p = clamp(start);
            for _ in 0..params.iterations {
                let next = clamp(mean_shift_step(g, p, params.window, params.weight_floor));
                let step = (next.0 - p.0).hypot(next.1 - p.1);
                p = next;
                if step < params.step_tolerance {
                    break;
                }
            }
            p
        })
        .collect();
    let scores = points.iter().map(|&(u, v)| g.sample(u, v)).collect();
    Ok(KeypointSet { points, scores })
}
