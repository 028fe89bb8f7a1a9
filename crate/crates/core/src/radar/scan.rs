use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use super::RadarError;

/// Raw radar power raster, one row per azimuth.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarScan {
    pub scan_id: String,
    pub azimuth_count: usize,
    pub range_bins: usize,
    /// Meters per range bin; bin `k` is centered at range `k * range_resolution`.
    pub range_resolution: f64,
    /// Strictly increasing azimuths in [0, 2pi).
    pub azimuths: Vec<f64>,
    /// Row-major `azimuth_count x range_bins`, values in [0, 1].
    pub power: Vec<f32>,
    pub timestamp: i64,
}

impl PolarScan {
    /// Builds a scan with uniformly spaced azimuths `2*pi*k/A`.
    pub fn uniform(
        scan_id: impl Into<String>,
        azimuth_count: usize,
        range_bins: usize,
        range_resolution: f64,
        power: Vec<f32>,
        timestamp: i64,
    ) -> Result<Self, RadarError> {
        let azimuths = uniform_azimuths(azimuth_count);
        let scan = Self {
            scan_id: scan_id.into(),
            azimuth_count,
            range_bins,
            range_resolution,
            azimuths,
            power,
            timestamp,
        };
        scan.validate()?;
        Ok(scan)
    }

    pub fn validate(&self) -> Result<(), RadarError> {
        if self.azimuth_count == 0 {
            return Err(RadarError::ZeroAzimuths);
        }
        if self.range_bins == 0 {
            return Err(RadarError::InvalidScan("range_bins must be positive".into()));
        }
        if !(self.range_resolution > 0.0 && self.range_resolution.is_finite()) {
            return Err(RadarError::InvalidScan("range_resolution must be > 0".into()));
        }
        if self.azimuths.len() != self.azimuth_count {
            return Err(RadarError::InvalidScan(format!(
                "expected {} azimuths, got {}",
                self.azimuth_count,
                self.azimuths.len()
            )));
        }
        if self.power.len() != self.azimuth_count * self.range_bins {
            return Err(RadarError::InvalidScan(format!(
                "expected {} power values, got {}",
                self.azimuth_count * self.range_bins,
                self.power.len()
            )));
        }
        for w in self.azimuths.windows(2) {
            if !(w[1] > w[0]) {
                return Err(RadarError::InvalidScan("azimuths must be strictly increasing".into()));
            }
        }
        if self.azimuths.iter().any(|a| !(0.0..2.0 * PI).contains(a)) {
            return Err(RadarError::InvalidScan("azimuths must lie in [0, 2pi)".into()));
        }
        if self.power.iter().any(|p| !p.is_finite()) {
            return Err(RadarError::NonFinitePower);
        }
        if self.power.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(RadarError::InvalidScan("power values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn max_range(&self) -> f64 {
        self.range_bins as f64 * self.range_resolution
    }

    #[inline]
    pub fn at(&self, azimuth: usize, bin: usize) -> f32 {
        self.power[azimuth * self.range_bins + bin]
    }
}

pub fn uniform_azimuths(count: usize) -> Vec<f64> {
    (0..count)
        .map(|k| 2.0 * PI * k as f64 / count as f64)
        .collect()
}

/// Metric Cartesian projection of a scan. The sensor sits at pixel
/// `((W-1)/2, (H-1)/2)`; column grows with +x and row grows with +y.
#[derive(Debug, Clone, PartialEq)]
pub struct CartesianImage {
    pub width: usize,
    pub height: usize,
    pub meters_per_pixel: f64,
    /// Row-major `height x width`.
    pub pixels: Vec<f32>,
}

impl CartesianImage {
    pub fn zeros(width: usize, height: usize, meters_per_pixel: f64) -> Self {
        Self {
            width,
            height,
            meters_per_pixel,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    /// Metric offset of a pixel center from the sensor.
    pub fn pixel_to_metric(&self, row: usize, col: usize) -> (f64, f64) {
        let (cx, cy) = self.center();
        (
            (col as f64 - cx) * self.meters_per_pixel,
            (row as f64 - cy) * self.meters_per_pixel,
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PolarSidecar {
    scan_id: String,
    #[serde(rename = "A")]
    azimuth_count: usize,
    #[serde(rename = "R")]
    range_bins: usize,
    range_resolution: f64,
    azimuths: Vec<f64>,
    timestamp: i64,
    /// Raw values are divided by this at load time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_power: Option<f64>,
}

/// Writes `<stem>.json` and `<stem>.bin` (little-endian f32, row-major by azimuth).
/// `json_path` must end in `.json`; the payload path is derived from it.
pub fn write_polar_scan(scan: &PolarScan, json_path: &Path) -> Result<(), RadarError> {
    let sidecar = PolarSidecar {
        scan_id: scan.scan_id.clone(),
        azimuth_count: scan.azimuth_count,
        range_bins: scan.range_bins,
        range_resolution: scan.range_resolution,
        azimuths: scan.azimuths.clone(),
        timestamp: scan.timestamp,
        max_power: None,
    };
    fs::write(json_path, serde_json::to_string_pretty(&sidecar)?)?;
    let mut payload = Vec::with_capacity(scan.power.len() * 4);
    for v in &scan.power {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(json_path.with_extension("bin"), payload)?;
    Ok(())
}

pub fn read_polar_scan(json_path: &Path) -> Result<PolarScan, RadarError> {
    let sidecar: PolarSidecar = serde_json::from_slice(&fs::read(json_path)?)?;
    let raw = fs::read(json_path.with_extension("bin"))?;
    let expected = sidecar.azimuth_count * sidecar.range_bins * 4;
    if raw.len() != expected {
        return Err(RadarError::InvalidScan(format!(
            "{}: payload has {} bytes, expected {}",
            json_path.display(),
            raw.len(),
            expected
        )));
    }
    let scale = sidecar.max_power.unwrap_or(1.0);
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(RadarError::InvalidScan("max_power must be > 0".into()));
    }
    let power: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if scale == 1.0 {
                v
            } else {
                (v as f64 / scale) as f32
            }
        })
        .collect();
    let scan = PolarScan {
        scan_id: sidecar.scan_id,
        azimuth_count: sidecar.azimuth_count,
        range_bins: sidecar.range_bins,
        range_resolution: sidecar.range_resolution,
        azimuths: sidecar.azimuths,
        power,
        timestamp: sidecar.timestamp,
    };
    scan.validate()?;
    Ok(scan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validate_rejects_nan_and_zero_azimuths() {
        let mut s = PolarScan::uniform("a", 4, 4, 1.0, vec![0.5; 16], 0).unwrap();
        s.power[3] = f32::NAN;
        assert!(matches!(s.validate(), Err(RadarError::NonFinitePower)));
        let z = PolarScan {
            scan_id: "z".into(),
            azimuth_count: 0,
            range_bins: 4,
            range_resolution: 1.0,
            azimuths: vec![],
            power: vec![],
            timestamp: 0,
        };
        assert!(matches!(z.validate(), Err(RadarError::ZeroAzimuths)));
    }

    #[test]
    fn file_roundtrip_and_max_power_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        let power: Vec<f32> = (0..32).map(|i| i as f32 / 31.0).collect();
        let s = PolarScan::uniform("s", 8, 4, 0.5, power, 42).unwrap();
        write_polar_scan(&s, &path).unwrap();
        assert_eq!(read_polar_scan(&path).unwrap(), s);

        // Raw values in [0, 200] with a declared max of 200.
        let raw: Vec<u8> = (0..32)
            .flat_map(|i| ((i as f32) * 200.0 / 31.0).to_le_bytes())
            .collect();
        std::fs::write(path.with_extension("bin"), raw).unwrap();
        let mut json: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        json["max_power"] = serde_json::json!(200.0);
        std::fs::write(&path, json.to_string()).unwrap();
        let loaded = read_polar_scan(&path).unwrap();
        assert!((loaded.power[31] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        let s = PolarScan::uniform("s", 4, 4, 0.5, vec![0.1; 16], 0).unwrap();
        write_polar_scan(&s, &path).unwrap();
        std::fs::write(path.with_extension("bin"), [0u8; 10]).unwrap();
        assert!(matches!(read_polar_scan(&path), Err(RadarError::InvalidScan(_))));
    }
}
