//! Polar to Cartesian resampling.
//!
//! Each output pixel is mapped to (range, bearing) about the sensor and
//! sampled bilinearly over (azimuth, range). Azimuth interpolation wraps
//! circularly between the last and first rows, so azimuths need not be
//! uniformly spaced. Pixels farther than `R * range_resolution` are zero.

use std::f64::consts::PI;

use super::{CartesianImage, PolarScan, RadarError};

/// Locates `bearing` between two azimuth rows. Returns `(lo, hi, frac)`
/// so that the sample is `(1 - frac) * row[lo] + frac * row[hi]`.
pub(crate) fn azimuth_bracket(azimuths: &[f64], bearing: f64) -> (usize, usize, f64) {
    let n = azimuths.len();
    if n == 1 {
        return (0, 0, 0.0);
    }
    let first = azimuths[0];
    let last = azimuths[n - 1];
    if bearing < first || bearing >= last {
        let gap = first + 2.0 * PI - last;
        let offset = if bearing >= last {
            bearing - last
        } else {
            bearing + 2.0 * PI - last
        };
        return (n - 1, 0, (offset / gap).clamp(0.0, 1.0));
    }
    // first <= bearing < last
    let hi = azimuths.partition_point(|&a| a <= bearing);
    let lo = hi - 1;
    let frac = (bearing - azimuths[lo]) / (azimuths[hi] - azimuths[lo]);
    (lo, hi, frac)
}

pub fn polar_to_cartesian(
    scan: &PolarScan,
    width: usize,
    height: usize,
    meters_per_pixel: f64,
) -> Result<CartesianImage, RadarError> {
    if width < 8 || height < 8 {
        return Err(RadarError::InvalidArgument("output image must be at least 8x8".into()));
    }
    if !(meters_per_pixel > 0.0 && meters_per_pixel.is_finite()) {
        return Err(RadarError::InvalidArgument("meters_per_pixel must be > 0".into()));
    }
    scan.validate()?;

    let mut image = CartesianImage::zeros(width, height, meters_per_pixel);
    let max_range = scan.max_range();
    let last_bin = scan.range_bins - 1;
    for row in 0..height {
        for col in 0..width {
            let (x, y) = image.pixel_to_metric(row, col);
            let radius = x.hypot(y);
            if radius > max_range {
                continue;
            }
            let mut bearing = y.atan2(x);
            if bearing < 0.0 {
                bearing += 2.0 * PI;
            }
            if bearing >= 2.0 * PI {
                bearing = 0.0;
            }
            let rr = (radius / scan.range_resolution).min(last_bin as f64);
            let r0 = rr.floor() as usize;
            let r1 = (r0 + 1).min(last_bin);
            let fr = rr - r0 as f64;
            let (a0, a1, fa) = azimuth_bracket(&scan.azimuths, bearing);
            let s = |a: usize, r: usize| scan.at(a, r) as f64;
            let v0 = (1.0 - fr) * s(a0, r0) + fr * s(a0, r1);
            let v1 = (1.0 - fr) * s(a1, r0) + fr * s(a1, r1);
            let v = (1.0 - fa) * v0 + fa * v1;
            image.pixels[row * width + col] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(image)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_power_maps_to_constant_in_range() {
        let c = 0.37f32;
        let scan = PolarScan::uniform("c", 64, 40, 0.5, vec![c; 64 * 40], 0).unwrap();
        let img = polar_to_cartesian(&scan, 64, 64, 0.5).unwrap();
        for row in 0..64 {
            for col in 0..64 {
                let (x, y) = img.pixel_to_metric(row, col);
                let v = img.at(row, col);
                if x.hypot(y) <= scan.max_range() {
                    assert!((v - c).abs() < 1e-6, "pixel ({row},{col}) = {v}");
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn impulse_lands_at_its_metric_offset() {
        let (a, r, res) = (90usize, 50usize, 0.5);
        let bin = 30usize;
        let mut power = vec![0.0f32; a * r];
        power[bin] = 1.0; // azimuth row 0
        let scan = PolarScan::uniform("i", a, r, res, power, 0).unwrap();
        let img = polar_to_cartesian(&scan, 101, 101, 0.5).unwrap();
        let (mut best, mut arg) = (f32::MIN, (0, 0));
        for row in 0..img.height {
            for col in 0..img.width {
                if img.at(row, col) > best {
                    best = img.at(row, col);
                    arg = (row, col);
                }
            }
        }
        let (x, y) = img.pixel_to_metric(arg.0, arg.1);
        assert!((x - bin as f64 * res).abs() <= img.meters_per_pixel);
        assert!(y.abs() <= img.meters_per_pixel);
    }

    #[test]
    fn rejects_tiny_output_and_bad_scale() {
        let scan = PolarScan::uniform("c", 8, 8, 1.0, vec![0.0; 64], 0).unwrap();
        assert!(polar_to_cartesian(&scan, 4, 16, 1.0).is_err());
        assert!(polar_to_cartesian(&scan, 16, 16, 0.0).is_err());
    }

    #[test]
    fn nonuniform_azimuth_bracket_wraps() {
        let az = [0.5, 1.0, 4.0];
        let (lo, hi, f) = azimuth_bracket(&az, 0.1);
        assert_eq!((lo, hi), (2, 0));
        let gap = 0.5 + 2.0 * PI - 4.0;
        assert!((f - (0.1 + 2.0 * PI - 4.0) / gap).abs() < 1e-12);
        let (lo, hi, f) = azimuth_bracket(&az, 2.5);
        assert_eq!((lo, hi), (1, 2));
        assert!((f - 0.5).abs() < 1e-12);
    }
}
