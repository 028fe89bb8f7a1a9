//! Feature extraction and guidance-heatmap reduction.

mod encoder;
mod io;

pub use encoder::{reference_features, ReferenceEncoder, REFERENCE_CHANNELS, REFERENCE_STRIDE};
pub use io::{load_feature_map, write_feature_map};

use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

use crate::radar::CartesianImage;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("image {width}x{height} is too small for stride {stride}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        stride: usize,
    },
    #[error("image pixels are malformed or non-finite")]
    InvalidImage,
    #[error("feature file has bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("feature payload holds {actual} bytes, header implies {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("feature map contains non-finite values")]
    NonFinite,
    #[error("feature map {fw}x{fh} at stride {stride} does not fit image {iw}x{ih}")]
    IncompatibleMap {
        fw: usize,
        fh: usize,
        stride: usize,
        iw: usize,
        ih: usize,
    },
    #[error("feature map has no channels")]
    NoChannels,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Channel-major `channels x height x width` encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Cartesian pixels per feature cell.
    pub stride: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    pub fn channel(&self, channel: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.channels == 0 {
            return Err(FeatureError::NoChannels);
        }
        let expected = self.channels * self.height * self.width;
        if self.data.len() != expected {
            return Err(FeatureError::DimensionMismatch {
                expected: expected * 4,
                actual: self.data.len() * 4,
            });
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite);
        }
        Ok(())
    }
}

/// Channel-averaged heatmap over the feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceMap {
    pub height: usize,
    pub width: usize,
    /// Row-major.
    pub values: Vec<f64>,
}

impl GuidanceMap {
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Bilinear sample at real coordinates `(u, v)` = (column, row),
    /// clamped to the grid.
    pub fn sample(&self, u: f64, v: f64) -> f64 {
        let u = u.clamp(0.0, (self.width - 1) as f64);
        let v = v.clamp(0.0, (self.height - 1) as f64);
        let (c0, r0) = (u.floor() as usize, v.floor() as usize);
        let (c1, r1) = ((c0 + 1).min(self.width - 1), (r0 + 1).min(self.height - 1));
        let (fu, fv) = (u - c0 as f64, v - r0 as f64);
        let top = (1.0 - fu) * self.get(r0, c0) + fu * self.get(r0, c1);
        let bottom = (1.0 - fu) * self.get(r1, c0) + fu * self.get(r1, c1);
        (1.0 - fv) * top + fv * bottom
    }
}

/// Mean over channels at every cell.
pub fn guidance_map(features: &FeatureMap) -> Result<GuidanceMap, FeatureError> {
    if features.channels == 0 {
        return Err(FeatureError::NoChannels);
    }
    let n = features.height * features.width;
    let mut values = vec![0.0f64; n];
    for c in 0..features.channels {
        for (acc, &v) in values.iter_mut().zip(features.channel(c)) {
            *acc += v as f64;
        }
    }
    let inv = 1.0 / features.channels as f64;
    values.iter_mut().for_each(|v| *v *= inv);
    Ok(GuidanceMap {
        height: features.height,
        width: features.width,
        values,
    })
}

/// Anything that turns a Cartesian image into a feature map.
pub trait FeatureExtractor: Send + Sync {
    fn extract(&self, image: &CartesianImage) -> Result<FeatureMap, FeatureError>;
}

/// Reads a precomputed map (e.g. from a pretrained network) and checks it
/// fits the image it is paired with.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalFeatures {
    pub path: PathBuf,
}

impl FeatureExtractor for ExternalFeatures {
    fn extract(&self, image: &CartesianImage) -> Result<FeatureMap, FeatureError> {
        let fm = load_feature_map(&self.path)?;
        if fm.height * fm.stride > image.height || fm.width * fm.stride > image.width {
            return Err(FeatureError::IncompatibleMap {
                fw: fm.width,
                fh: fm.height,
                stride: fm.stride,
                iw: image.width,
                ih: image.height,
            });
        }
        Ok(fm)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum EncoderConfig {
    #[default]
    Reference,
    /// `dir` holds one `<scan_id>.rfm` per scan.
    External { dir: PathBuf },
}

pub fn extract_features(
    image: &CartesianImage,
    encoder: &EncoderConfig,
    scan_id: &str,
) -> Result<FeatureMap, FeatureError> {
    match encoder {
        EncoderConfig::Reference => ReferenceEncoder.extract(image),
        EncoderConfig::External { dir } => ExternalFeatures {
            path: dir.join(format!("{scan_id}.rfm")),
        }
        .extract(image),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(seed: u64, c: usize, h: usize, w: usize) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap {
            channels: c,
            height: h,
            width: w,
            stride: 4,
            data: (0..c * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        }
    }

    #[test]
    fn identical_channels_and_cancellation() {
        let m = random_map(1, 1, 3, 4);
        let mut same = m.clone();
        same.channels = 3;
        same.data = m.data.repeat(3);
        let g = guidance_map(&same).unwrap();
        for (a, b) in g.values.iter().zip(&m.data) {
            assert!((a - *b as f64).abs() < 1e-7);
        }
        let mut cancel = m.clone();
        cancel.channels = 2;
        cancel.data = m.data.iter().copied().chain(m.data.iter().map(|v| -v)).collect();
        assert!(guidance_map(&cancel).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn guidance_matches_summation_oracle() {
        let m = random_map(7, 3, 4, 5);
        let g = guidance_map(&m).unwrap();
        assert_eq!((g.height, g.width), (4, 5));
        for r in 0..4 {
            for c in 0..5 {
                let mut s = 0.0f64;
                for ch in 0..3 {
                    s += m.data[ch * 20 + r * 5 + c] as f64;
                }
                assert!((g.get(r, c) - s / 3.0).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn guidance_is_linear() {
        let f = random_map(2, 4, 6, 7);
        let g = random_map(3, 4, 6, 7);
        let (alpha, beta) = (0.7f32, -1.3f32);
        let mix = FeatureMap {
            data: f.data.iter().zip(&g.data).map(|(a, b)| alpha * a + beta * b).collect(),
            ..f.clone()
        };
        let gm = guidance_map(&mix).unwrap();
        let (gf, gg) = (guidance_map(&f).unwrap(), guidance_map(&g).unwrap());
        for k in 0..gm.values.len() {
            let want = alpha as f64 * gf.values[k] + beta as f64 * gg.values[k];
            assert!((gm.values[k] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn sample_interpolates_and_clamps() {
        let g = GuidanceMap {
            height: 2,
            width: 2,
            values: vec![0.0, 1.0, 2.0, 3.0],
        };
        assert!((g.sample(0.5, 0.5) - 1.5).abs() < 1e-12);
        assert_eq!(g.sample(1.0, 1.0), 3.0);
        assert_eq!(g.sample(-3.0, 9.0), 2.0);
    }

    #[test]
    fn external_map_must_fit_image() {
        let dir = tempfile::tempdir().unwrap();
        let m = random_map(4, 2, 8, 8);
        write_feature_map(&m, &dir.path().join("s1.rfm")).unwrap();
        let enc = EncoderConfig::External {
            dir: dir.path().to_path_buf(),
        };
        let ok = extract_features(&CartesianImage::zeros(32, 32, 1.0), &enc, "s1").unwrap();
        assert_eq!(ok, m);
        assert!(matches!(
            extract_features(&CartesianImage::zeros(16, 32, 1.0), &enc, "s1"),
            Err(FeatureError::IncompatibleMap { .. })
        ));
    }
}
