//! Guidance-driven keypoint selection and pixel-wise descriptor sampling.
//!
//! Points start uniformly over the feature grid, climb the guidance map by
//! windowed mean-shift, are de-duplicated, then filtered against a quantile
//! of the guidance values. Descriptors are bilinear samples of every
//! feature channel at the surviving points.

mod refine;

pub use refine::{mean_shift_step, refine_keypoints, RefineParams};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::features::{FeatureMap, GuidanceMap};

#[derive(Debug, Error)]
pub enum KeypointError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("window {window} does not fit a {width}x{height} map")]
    WindowTooLarge {
        window: usize,
        width: usize,
        height: usize,
    },
    #[error("every keypoint was filtered out by the mask (threshold {threshold})")]
    AllFiltered { threshold: f64 },
    #[error("keypoint {index} at ({u}, {v}) lies outside the {width}x{height} feature map")]
    OutOfBounds {
        index: usize,
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },
    #[error("malformed descriptor file: {0}")]
    BadDescriptorFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Subpixel feature-grid locations `(u, v)` = (column, row) with the
/// guidance value at each.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeypointSet {
    pub points: Vec<(f64, f64)>,
    pub scores: Vec<f64>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `len x dim` descriptors, row `i` sampled at keypoint `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDescriptorSet {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl LocalDescriptorSet {
    pub fn from_rows(dim: usize, rows: &[Vec<f64>]) -> Self {
        assert!(rows.iter().all(|r| r.len() == dim), "row length must equal dim");
        Self {
            dim,
            data: rows.concat(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }
}

/// Per-channel standardisation `(d - mean) / scale` fitted on a sample of
/// descriptor sets. Channels with zero spread keep scale 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ChannelScaler {
    pub fn fit<'a>(sets: impl IntoIterator<Item = &'a LocalDescriptorSet>) -> Option<Self> {
        let (mut n, mut sum, mut sq) = (0usize, Vec::new(), Vec::new());
        for set in sets {
            if sum.is_empty() {
                sum = vec![0.0; set.dim];
                sq = vec![0.0; set.dim];
            }
            for row in set.rows() {
                for (c, &v) in row.iter().enumerate() {
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return None;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let sd = (q / n as f64 - m * m).max(0.0).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Some(Self { mean, scale })
    }

    pub fn apply(&self, set: &mut LocalDescriptorSet) {
        for row in set.data.chunks_exact_mut(set.dim.max(1)) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KeypointConfig {
    pub budget: usize,
    pub window: usize,
    pub iterations: usize,
    pub step_tolerance: f64,
    pub weight_floor: f64,
    pub mask_quantile: f64,
    /// Points closer than this (cells) are merged after refinement.
    pub min_separation: f64,
}

impl Default for KeypointConfig {
    fn default() -> Self {
        Self {
            budget: 4096,
            window: 9,
            iterations: 10,
            step_tolerance: 1e-3,
            weight_floor: 1e-6,
            mask_quantile: 0.7,
            min_separation: 1.0,
        }
    }
}

pub fn init_keypoints(n: usize, height: usize, width: usize, seed: u64) -> Result<KeypointSet, KeypointError> {
    if n == 0 {
        return Err(KeypointError::InvalidArgument("keypoint count must be >= 1".into()));
    }
    if height < 2 || width < 2 {
        return Err(KeypointError::InvalidArgument("feature map must be at least 2x2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (umax, vmax) = ((width - 1) as f64, (height - 1) as f64);
    let points = (0..n)
        .map(|_| (rng.random_range(0.0..=umax), rng.random_range(0.0..=vmax)))
        .collect();
    Ok(KeypointSet {
        points,
        scores: vec![0.0; n],
    })
}

/// Greedy merge: visiting points by descending score (index breaks ties),
/// a point survives unless a survivor lies closer than `min_separation`.
/// Survivors keep their input order.
pub fn collapse_duplicates(kp: &KeypointSet, min_separation: f64) -> KeypointSet {
    let mut order: Vec<usize> = (0..kp.len()).collect();
    order.sort_by(|&a, &b| kp.scores[b].total_cmp(&kp.scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let (u, v) = kp.points[i];
        let clash = kept.iter().any(|&k| {
            let (ku, kv) = kp.points[k];
            (u - ku).hypot(v - kv) < min_separation
        });
        if !clash {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    KeypointSet {
        points: kept.iter().map(|&i| kp.points[i]).collect(),
        scores: kept.iter().map(|&i| kp.scores[i]).collect(),
    }
}

/// Linear-interpolated quantile of `values` (q in [0, 1]).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Keeps points whose score reaches the `quantile` of all guidance values.
pub fn filter_by_mask(kp: &KeypointSet, g: &GuidanceMap, q: f64) -> Result<KeypointSet, KeypointError> {
    if !(0.0..1.0).contains(&q) {
        return Err(KeypointError::InvalidArgument("mask quantile must be in [0, 1)".into()));
    }
    if g.values.is_empty() {
        return Err(KeypointError::InvalidArgument("empty guidance map".into()));
    }
    let threshold = quantile(&g.values, q);
    let keep: Vec<usize> = (0..kp.len()).filter(|&i| kp.scores[i] >= threshold).collect();
    if keep.is_empty() {
        return Err(KeypointError::AllFiltered { threshold });
    }
    Ok(KeypointSet {
        points: keep.iter().map(|&i| kp.points[i]).collect(),
        scores: keep.iter().map(|&i| kp.scores[i]).collect(),
    })
}

pub fn sample_descriptors(features: &FeatureMap, kp: &KeypointSet) -> Result<LocalDescriptorSet, KeypointError> {
    let (w, h, c) = (features.width, features.height, features.channels);
    let mut data = Vec::with_capacity(kp.len() * c);
    for (index, &(u, v)) in kp.points.iter().enumerate() {
        if !(u >= 0.0 && u <= (w - 1) as f64 && v >= 0.0 && v <= (h - 1) as f64) {
            return Err(KeypointError::OutOfBounds {
                index,
                u,
                v,
                width: w,
                height: h,
            });
        }
        let (c0, r0) = (u.floor() as usize, v.floor() as usize);
        let (c1, r1) = ((c0 + 1).min(w - 1), (r0 + 1).min(h - 1));
        let (fu, fv) = (u - c0 as f64, v - r0 as f64);
        for ch in 0..c {
            let f = |r: usize, col: usize| features.get(ch, r, col) as f64;
            let top = (1.0 - fu) * f(r0, c0) + fu * f(r0, c1);
            let bottom = (1.0 - fu) * f(r1, c0) + fu * f(r1, c1);
            data.push((1.0 - fv) * top + fv * bottom);
        }
    }
    Ok(LocalDescriptorSet { dim: c, data })
}

/// Feature-grid coordinates to metric sensor-frame points:
/// `x = (u * stride - center.0) * mpp`, `y = (v * stride - center.1) * mpp`.
pub fn keypoints_to_points(
    kp: &KeypointSet,
    stride: usize,
    meters_per_pixel: f64,
    image_center: (f64, f64),
) -> Result<Vec<(f64, f64)>, KeypointError> {
    if stride == 0 {
        return Err(KeypointError::InvalidArgument("stride must be >= 1".into()));
    }
    let s = stride as f64;
    Ok(kp
        .points
        .iter()
        .map(|&(u, v)| {
            (
                (u * s - image_center.0) * meters_per_pixel,
                (v * s - image_center.1) * meters_per_pixel,
            )
        })
        .collect())
}

/// Inverse of [`keypoints_to_points`].
pub fn points_to_keypoints(
    points: &[(f64, f64)],
    stride: usize,
    meters_per_pixel: f64,
    image_center: (f64, f64),
) -> Vec<(f64, f64)> {
    let s = stride as f64;
    points
        .iter()
        .map(|&(x, y)| {
            (
                (x / meters_per_pixel + image_center.0) / s,
                (y / meters_per_pixel + image_center.1) / s,
            )
        })
        .collect()
}

/// Init, refine, de-duplicate and mask-filter in one go.
pub fn select_keypoints(g: &GuidanceMap, cfg: &KeypointConfig, seed: u64) -> Result<KeypointSet, KeypointError> {
    let init = init_keypoints(cfg.budget, g.height, g.width, seed)?;
    let refined = refine_keypoints(
        &init,
        g,
        &RefineParams {
            iterations: cfg.iterations,
            window: cfg.window,
            step_tolerance: cfg.step_tolerance,
            weight_floor: cfg.weight_floor,
        },
    )?;
    let unique = collapse_duplicates(&refined, cfg.min_separation);
    filter_by_mask(&unique, g, cfg.mask_quantile)
}

#[derive(Debug, Serialize, Deserialize)]
struct KeypointRow {
    u: f64,
    v: f64,
    score: f64,
}

/// Debug dump: CSV `u,v,score`.
pub fn write_keypoints_csv(kp: &KeypointSet, path: &Path) -> Result<(), KeypointError> {
    let mut w = csv::Writer::from_path(path)?;
    for (&(u, v), &score) in kp.points.iter().zip(&kp.scores) {
        w.serialize(KeypointRow { u, v, score })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_keypoints_csv(path: &Path) -> Result<KeypointSet, KeypointError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut kp = KeypointSet::default();
    for row in r.deserialize() {
        let row: KeypointRow = row?;
        kp.points.push((row.u, row.v));
        kp.scores.push(row.score);
    }
    Ok(kp)
}

/// Descriptor file: `RLD1`, u32 count, u32 dim, then row-major LE f32.
pub fn write_descriptors(set: &LocalDescriptorSet, path: &Path) -> Result<(), KeypointError> {
    let mut buf = Vec::with_capacity(12 + set.data.len() * 4);
    buf.extend_from_slice(b"RLD1");
    buf.extend_from_slice(&(set.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(set.dim as u32).to_le_bytes());
    for v in &set.data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_descriptors(path: &Path) -> Result<LocalDescriptorSet, KeypointError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 || &bytes[..4] != b"RLD1" {
        return Err(KeypointError::BadDescriptorFile("missing RLD1 header".into()));
    }
    let word = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
    let (n, dim) = (word(4), word(8));
    let payload = &bytes[12..];
    if dim == 0 || payload.len() != n * dim * 4 {
        return Err(KeypointError::BadDescriptorFile(format!(
            "{} payload bytes for {n} x {dim}",
            payload.len()
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(KeypointError::BadDescriptorFile("non-finite value".into()));
    }
    Ok(LocalDescriptorSet { dim, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn guidance(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> GuidanceMap {
        let mut values = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                values.push(f(r, c));
            }
        }
        GuidanceMap {
            height: h,
            width: w,
            values,
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = init_keypoints(50, 10, 20, 4).unwrap();
        assert_eq!(a, init_keypoints(50, 10, 20, 4).unwrap());
        let one = init_keypoints(1, 5, 5, 0).unwrap();
        assert_eq!(one.len(), 1);
        for &(u, v) in &a.points {
            assert!((0.0..=19.0).contains(&u) && (0.0..=9.0).contains(&v));
        }
        assert!(a.scores.iter().all(|&s| s == 0.0));
        assert!(init_keypoints(0, 5, 5, 0).is_err());
        assert!(init_keypoints(3, 1, 5, 0).is_err());
    }

    #[test]
    fn init_mean_near_grid_center() {
        let kp = init_keypoints(10_000, 32, 32, 11).unwrap();
        let n = kp.len() as f64;
        let mu = kp.points.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
        assert!((mu.0 - 15.5).abs() < 0.05 * 15.5);
        assert!((mu.1 - 15.5).abs() < 0.05 * 15.5);
    }

    #[test]
    fn mask_examples() {
        let g = guidance(10, 10, |r, c| (r * 10 + c) as f64);
        let kp = KeypointSet {
            points: vec![(1.0, 1.0), (2.0, 2.0)],
            scores: vec![quantile(&g.values, 0.1), quantile(&g.values, 0.9)],
        };
        // Sorting oracle: the 0.5 quantile of 0..99 is 49.5.
        let mut sorted = g.values.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!((sorted[49] + sorted[50]) / 2.0, quantile(&g.values, 0.5));
        let kept = filter_by_mask(&kp, &g, 0.5).unwrap();
        assert_eq!(kept.points, vec![(2.0, 2.0)]);
        assert_eq!(filter_by_mask(&kp, &g, 0.0).unwrap(), kp);

        let flat = guidance(4, 4, |_, _| 0.3);
        let kp_flat = KeypointSet {
            points: vec![(0.0, 0.0), (3.0, 3.0)],
            scores: vec![0.3, 0.3],
        };
        assert_eq!(filter_by_mask(&kp_flat, &flat, 0.95).unwrap().len(), 2);

        let low = KeypointSet {
            points: vec![(0.0, 0.0)],
            scores: vec![-1.0],
        };
        assert!(matches!(filter_by_mask(&low, &g, 0.5), Err(KeypointError::AllFiltered { .. })));
    }

    fn feature_map(seed: u64, c: usize, h: usize, w: usize) -> FeatureMap {
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
    fn descriptors_exact_at_nodes_and_midway() {
        let fm = feature_map(3, 5, 6, 7);
        let kp = KeypointSet {
            points: vec![(2.0, 3.0), (6.0, 5.0), (2.5, 3.0)],
            scores: vec![0.0; 3],
        };
        let d = sample_descriptors(&fm, &kp).unwrap();
        assert_eq!(d.len(), 3);
        for ch in 0..5 {
            assert_eq!(d.row(0)[ch], fm.get(ch, 3, 2) as f64);
            assert_eq!(d.row(1)[ch], fm.get(ch, 5, 6) as f64);
            let mid = 0.5 * (fm.get(ch, 3, 2) as f64 + fm.get(ch, 3, 3) as f64);
            assert!((d.row(2)[ch] - mid).abs() < 1e-7);
        }
        let zero = FeatureMap {
            data: vec![0.0; fm.data.len()],
            ..fm.clone()
        };
        assert!(sample_descriptors(&zero, &kp).unwrap().data.iter().all(|&v| v == 0.0));
        let out = KeypointSet {
            points: vec![(6.5, 0.0)],
            scores: vec![0.0],
        };
        assert!(matches!(sample_descriptors(&fm, &out), Err(KeypointError::OutOfBounds { .. })));
    }

    #[test]
    fn descriptor_continuity_bound() {
        let fm = feature_map(9, 4, 8, 8);
        let maxf = fm.data.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let (u, v) = (rng.random_range(0.0..6.9), rng.random_range(0.0..6.9));
            let delta = rng.random_range(0.0..0.1);
            let p = KeypointSet {
                points: vec![(u, v), (u + delta, v)],
                scores: vec![0.0; 2],
            };
            let d = sample_descriptors(&fm, &p).unwrap();
            let change: f64 = (0..4).map(|c| (d.row(0)[c] - d.row(1)[c]).abs()).sum();
            assert!(change <= 2.0 * 4.0 * maxf * delta + 1e-12);
        }
    }

    #[test]
    fn metric_mapping() {
        let center = (126.0, 126.0);
        let kp = KeypointSet {
            points: vec![(31.5, 31.5), (32.5, 31.5)],
            scores: vec![0.0; 2],
        };
        let pts = keypoints_to_points(&kp, 4, 0.5, center).unwrap();
        assert_eq!(pts[0], (0.0, 0.0));
        assert!((pts[1].0 - 2.0).abs() < 1e-12);
        let back = points_to_keypoints(&pts, 4, 0.5, center);
        for (a, b) in back.iter().zip(&kp.points) {
            assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
        }
        assert!(keypoints_to_points(&kp, 0, 0.5, center).is_err());
    }

    #[test]
    fn collapse_keeps_best_of_close_points() {
        let kp = KeypointSet {
            points: vec![(1.0, 1.0), (1.5, 1.0), (5.0, 5.0), (1.2, 1.1)],
            scores: vec![0.2, 0.9, 0.1, 0.5],
        };
        let c = collapse_duplicates(&kp, 1.0);
        assert_eq!(c.points, vec![(1.5, 1.0), (5.0, 5.0)]);
        assert_eq!(c.scores, vec![0.9, 0.1]);
    }

    #[test]
    fn keypoint_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kp.csv");
        let kp = KeypointSet {
            points: vec![(1.25, 3.5), (0.0, 7.0)],
            scores: vec![0.125, -0.5],
        };
        write_keypoints_csv(&kp, &path).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("u,v,score\n"));
        assert_eq!(read_keypoints_csv(&path).unwrap(), kp);
    }

    #[test]
    fn descriptor_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.rld");
        let set = LocalDescriptorSet::from_rows(3, &[vec![0.5, -1.25, 3.0], vec![0.1, 0.2, 0.3]]);
        write_descriptors(&set, &p).unwrap();
        let back = read_descriptors(&p).unwrap();
        assert_eq!(back.dim, 3);
        assert_eq!(back.data, set.data.iter().map(|v| *v as f32 as f64).collect::<Vec<_>>());
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 2);
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_descriptors(&p), Err(KeypointError::BadDescriptorFile(_))));
    }
}
