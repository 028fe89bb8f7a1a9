//! Scan Context baseline: a ring-by-sector polar grid of maximum return
//! power, compared under circular column shifts.

use rayon::prelude::*;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use thiserror::Error;

use crate::radar::{wrap_angle, CartesianImage};

pub const DEFAULT_RINGS: usize = 20;
pub const DEFAULT_SECTORS: usize = 60;
pub const DEFAULT_MAX_RANGE: f64 = 80.0;

const MAGIC: &[u8; 4] = b"RSC1";

#[derive(Debug, Error)]
pub enum ScanContextError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("descriptor shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("both descriptors are empty")]
    BothEmpty,
    #[error("malformed descriptor file: {0}")]
    BadFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanContextDescriptor {
    pub rings: usize,
    pub sectors: usize,
    /// Radius actually covered by the rings.
    pub max_range: f64,
    /// Row-major `rings x sectors`.
    pub matrix: Vec<f64>,
    pub ring_key: Vec<f64>,
    /// The requested range exceeded the image and was reduced.
    pub clipped: bool,
}

impl ScanContextDescriptor {
    pub fn from_matrix(rings: usize, sectors: usize, max_range: f64, matrix: Vec<f64>) -> Result<Self, ScanContextError> {
        if rings < 2 || sectors < 2 {
            return Err(ScanContextError::InvalidArgument("rings and sectors must be >= 2".into()));
        }
        if matrix.len() != rings * sectors {
            return Err(ScanContextError::InvalidArgument("matrix size does not match shape".into()));
        }
        if matrix.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ScanContextError::InvalidArgument("cells must lie in [0, 1]".into()));
        }
        let ring_key = matrix.chunks_exact(sectors).map(|r| r.iter().sum::<f64>() / sectors as f64).collect();
        Ok(Self {
            rings,
            sectors,
            max_range,
            matrix,
            ring_key,
            clipped: false,
        })
    }

    #[inline]
    pub fn at(&self, ring: usize, sector: usize) -> f64 {
        self.matrix[ring * self.sectors + sector]
    }

    fn column_norms(&self) -> Vec<f64> {
        (0..self.sectors)
            .map(|s| (0..self.rings).map(|r| self.at(r, s).powi(2)).sum::<f64>().sqrt())
            .collect()
    }
}

/// Bins every pixel by (radius, bearing) about the image center and keeps
/// the maximum power per cell. A range beyond the inscribed circle of the
/// image is reduced to it and flagged.
pub fn make_scan_context(
    image: &CartesianImage,
    rings: usize,
    sectors: usize,
    max_range: f64,
) -> Result<ScanContextDescriptor, ScanContextError> {
    if rings < 2 || sectors < 2 {
        return Err(ScanContextError::InvalidArgument("rings and sectors must be >= 2".into()));
    }
    if !(max_range > 0.0 && max_range.is_finite()) {
        return Err(ScanContextError::InvalidArgument("max_range must be positive".into()));
    }
    let extent = (image.width.min(image.height) as f64 - 1.0) / 2.0 * image.meters_per_pixel;
    let clipped = max_range > extent;
    let range = if clipped { extent } else { max_range };
    if !(range > 0.0) {
        return Err(ScanContextError::InvalidArgument("image has no radial extent".into()));
    }
    let ring_width = range / rings as f64;
    let sector_width = 2.0 * PI / sectors as f64;
    let mut matrix = vec![0.0f64; rings * sectors];
    for row in 0..image.height {
        for col in 0..image.width {
            let v = image.at(row, col) as f64;
            if v <= 0.0 {
                continue;
            }
            let (x, y) = image.pixel_to_metric(row, col);
            let r = x.hypot(y);
            if r >= range {
                continue;
            }
            let mut phi = y.atan2(x);
            if phi < 0.0 {
                phi += 2.0 * PI;
            }
            let ring = ((r / ring_width) as usize).min(rings - 1);
            let sector = ((phi / sector_width) as usize).min(sectors - 1);
            let cell = &mut matrix[ring * sectors + sector];
            *cell = cell.max(v.clamp(0.0, 1.0));
        }
    }
    let mut d = ScanContextDescriptor::from_matrix(rings, sectors, range, matrix)?;
    d.clipped = clipped;
    if clipped {
        log::debug!("scan context range {max_range} m clipped to image extent {range} m");
    }
    Ok(d)
}

/// Minimum over circular shifts `s` of the mean column cosine distance
/// between `d1[:, c + s]` and `d2[:, c]`. Columns empty in both are
/// skipped; a column empty in only one counts as distance 1. The shift is
/// the sector offset of the second scan's heading relative to the first.
pub fn sc_distance(d1: &ScanContextDescriptor, d2: &ScanContextDescriptor) -> Result<(f64, usize), ScanContextError> {
    if d1.rings != d2.rings || d1.sectors != d2.sectors {
        return Err(ScanContextError::ShapeMismatch(d1.rings, d1.sectors, d2.rings, d2.sectors));
    }
    let (n1, n2) = (d1.column_norms(), d2.column_norms());
    if n1.iter().all(|&n| n == 0.0) && n2.iter().all(|&n| n == 0.0) {
        return Err(ScanContextError::BothEmpty);
    }
    let ns = d1.sectors;
    let mut best = (f64::INFINITY, 0);
    for s in 0..ns {
        let (mut sum, mut used) = (0.0, 0usize);
        for c in 0..ns {
            let c1 = (c + s) % ns;
            let (a, b) = (n1[c1], n2[c]);
            if a == 0.0 && b == 0.0 {
                continue;
            }
            used += 1;
            if a == 0.0 || b == 0.0 {
                sum += 1.0;
                continue;
            }
            let dot: f64 = (0..d1.rings).map(|r| d1.at(r, c1) * d2.at(r, c)).sum();
            sum += (1.0 - dot / (a * b)).clamp(0.0, 1.0);
        }
        let dist = sum / used as f64;
        if dist < best.0 {
            best = (dist, s);
        }
    }
    Ok(best)
}

/// Heading change in radians implied by a column shift.
pub fn shift_to_yaw(shift: usize, sectors: usize) -> f64 {
    wrap_angle(shift as f64 * 2.0 * PI / sectors as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScMatch {
    pub index: usize,
    pub distance: f64,
    pub yaw: f64,
}

/// Ring-key L1 pruning to `candidate_k` entries, then full distance.
/// Results within `threshold`, ascending by distance then index.
pub fn sc_detect(
    query: &ScanContextDescriptor,
    database: &[ScanContextDescriptor],
    candidate_k: usize,
    threshold: f64,
) -> Result<Vec<ScMatch>, ScanContextError> {
    if database.is_empty() {
        return Err(ScanContextError::InvalidArgument("database is empty".into()));
    }
    if candidate_k == 0 {
        return Err(ScanContextError::InvalidArgument("candidate_k must be >= 1".into()));
    }
    let mut keyed: Vec<(f64, usize)> = database
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let l1 = d.ring_key.iter().zip(&query.ring_key).map(|(a, b)| (a - b).abs()).sum::<f64>();
            (l1, i)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.truncate(candidate_k);
    let scored: Vec<Option<ScMatch>> = keyed
        .par_iter()
        .map(|&(_, i)| match sc_distance(query, &database[i]) {
            Ok((distance, shift)) => Ok((distance <= threshold).then(|| ScMatch {
                index: i,
                distance,
                yaw: shift_to_yaw(shift, query.sectors),
            })),
            Err(ScanContextError::BothEmpty) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_, _>>()?;
    let mut out: Vec<ScMatch> = scored.into_iter().flatten().collect();
    out.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
    Ok(out)
}

/// `RSC1`, u32 rings, u32 sectors, f32 max_range, then row-major f32 cells.
pub fn write_scan_context(d: &ScanContextDescriptor, path: &Path) -> Result<(), ScanContextError> {
    let mut buf = Vec::with_capacity(16 + d.matrix.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(d.rings as u32).to_le_bytes());
    buf.extend_from_slice(&(d.sectors as u32).to_le_bytes());
    buf.extend_from_slice(&(d.max_range as f32).to_le_bytes());
    for v in &d.matrix {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_scan_context(path: &Path) -> Result<ScanContextDescriptor, ScanContextError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(ScanContextError::BadFile("missing RSC1 header".into()));
    }
    let word = |o: usize| [bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]];
    let rings = u32::from_le_bytes(word(4)) as usize;
    let sectors = u32::from_le_bytes(word(8)) as usize;
    let max_range = f32::from_le_bytes(word(12)) as f64;
    let payload = &bytes[16..];
    if payload.len() != rings * sectors * 4 {
        return Err(ScanContextError::BadFile(format!(
            "payload holds {} bytes, header implies {}",
            payload.len(),
            rings * sectors * 4
        )));
    }
    let matrix = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    ScanContextDescriptor::from_matrix(rings, sectors, max_range, matrix)
}
