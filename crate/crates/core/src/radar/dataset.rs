//! Dataset manifests, ground-truth loop labels and pair/triplet sampling.

use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use super::{Pose2, RadarError};

pub const DEFAULT_LOOP_RADIUS: f64 = 4.0;
pub const DEFAULT_EXCLUSION_WINDOW: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub scan_id: String,
    /// Path to the scan's JSON sidecar, relative to the manifest's directory.
    pub path: String,
    pub timestamp_us: i64,
    pub pose: Pose2,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    scan_id: String,
    path: String,
    timestamp_us: i64,
    x_m: f64,
    y_m: f64,
    theta_rad: f64,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), RadarError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.scan_id.as_str()) {
                return Err(RadarError::DuplicateScanId(e.scan_id.clone()));
            }
        }
        if self
            .entries
            .windows(2)
            .any(|w| w[1].timestamp_us < w[0].timestamp_us)
        {
            return Err(RadarError::NonMonotonicTimestamps);
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), RadarError> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(ManifestRow {
                scan_id: e.scan_id.clone(),
                path: e.path.clone(),
                timestamp_us: e.timestamp_us,
                x_m: e.pose.x,
                y_m: e.pose.y,
                theta_rad: e.pose.theta,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, RadarError> {
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        let expected = ["scan_id", "path", "timestamp_us", "x_m", "y_m", "theta_rad"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(RadarError::InvalidManifest(format!(
                "unexpected header {:?}",
                headers
            )));
        }
        let mut entries = Vec::new();
        for row in r.deserialize() {
            let row: ManifestRow = row?;
            entries.push(ManifestEntry {
                scan_id: row.scan_id,
                path: row.path,
                timestamp_us: row.timestamp_us,
                pose: Pose2::new(row.x_m, row.y_m, row.theta_rad),
            });
        }
        let m = Self { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn index_of(&self, scan_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.scan_id == scan_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopLabel {
    pub id_i: String,
    pub id_j: String,
    pub is_loop: bool,
    /// Pose of scan j in the frame of scan i; only present for loops.
    pub relative_pose: Option<Pose2>,
}

/// Labels a single pair of poses.
pub fn label_pair(
    id_i: &str,
    pose_i: &Pose2,
    id_j: &str,
    pose_j: &Pose2,
    loop_radius: f64,
) -> LoopLabel {
    let is_loop = pose_i.planar_distance(pose_j) <= loop_radius;
    LoopLabel {
        id_i: id_i.to_string(),
        id_j: id_j.to_string(),
        is_loop,
        relative_pose: is_loop.then(|| pose_i.relative_to_self(pose_j)),
    }
}

/// Labels every pair `(i, j)`, `i < j`, whose index gap exceeds
/// `exclusion_window`. Pairs inside the window are never emitted.
pub fn label_loops(
    manifest: &DatasetManifest,
    loop_radius: f64,
    exclusion_window: usize,
) -> Result<Vec<LoopLabel>, RadarError> {
    if manifest.entries.is_empty() {
        return Err(RadarError::EmptyManifest);
    }
    if exclusion_window < 1 {
        return Err(RadarError::InvalidArgument("exclusion_window must be >= 1".into()));
    }
    if !(loop_radius > 0.0) {
        return Err(RadarError::InvalidArgument("loop_radius must be > 0".into()));
    }
    manifest.validate()?;
    let e = &manifest.entries;
    let mut labels = Vec::new();
    for i in 0..e.len() {
        for j in (i + exclusion_window + 1)..e.len() {
            labels.push(label_pair(
                &e[i].scan_id,
                &e[i].pose,
                &e[j].scan_id,
                &e[j].pose,
                loop_radius,
            ));
        }
    }
    Ok(labels)
}

/// Down-samples the majority class so both classes have equal counts.
/// Selected labels keep their input order.
pub fn balance_pairs(labels: &[LoopLabel], seed: u64) -> Result<Vec<LoopLabel>, RadarError> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_loop).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i].is_loop).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(RadarError::SingleClass {
            positives: pos.len(),
            negatives: neg.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = pos.len().min(neg.len());
    let mut pick = |class: &[usize]| -> Vec<usize> {
        if class.len() == n {
            class.to_vec()
        } else {
            index::sample(&mut rng, class.len(), n)
                .into_iter()
                .map(|k| class[k])
                .collect()
        }
    };
    let mut keep = pick(&pos);
    keep.extend(pick(&neg));
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| labels[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
}

/// Draws `count` triplets. Each draw picks a positive pair uniformly,
/// orients it so the anchor has at least one negative partner, then picks
/// one of the anchor's negative partners uniformly.
pub fn sample_triplets(labels: &[LoopLabel], seed: u64, count: usize) -> Result<Vec<Triplet>, RadarError> {
    let mut negatives: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut positives = Vec::new();
    for l in labels {
        if l.is_loop {
            positives.push((l.id_i.as_str(), l.id_j.as_str()));
        } else {
            negatives.entry(&l.id_i).or_default().push(&l.id_j);
            negatives.entry(&l.id_j).or_default().push(&l.id_i);
        }
    }
    if positives.is_empty() {
        return Err(RadarError::NoPositivePairs);
    }
    if negatives.is_empty() {
        return Err(RadarError::SingleClass {
            positives: positives.len(),
            negatives: 0,
        });
    }
    let usable: Vec<(&str, &str)> = positives
        .iter()
        .copied()
        .filter(|(a, b)| negatives.contains_key(a) || negatives.contains_key(b))
        .collect();
    if usable.is_empty() {
        return Err(RadarError::NoTripletCandidates);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let &(a, b) = usable.choose(&mut rng).expect("non-empty");
        let (anchor, positive) = match (negatives.contains_key(a), negatives.contains_key(b)) {
            (true, true) => {
                if rng.random_bool(0.5) {
                    (a, b)
                } else {
                    (b, a)
                }
            }
            (true, false) => (a, b),
            _ => (b, a),
        };
        let negative = *negatives[anchor].choose(&mut rng).expect("non-empty");
        out.push(Triplet {
            anchor: anchor.to_string(),
            positive: positive.to_string(),
            negative: negative.to_string(),
        });
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    id_i: String,
    id_j: String,
    is_loop: u8,
    dx_m: Option<f64>,
    dy_m: Option<f64>,
    dtheta_rad: Option<f64>,
}

pub fn write_labels_csv(labels: &[LoopLabel], path: &Path) -> Result<(), RadarError> {
    let mut w = csv::Writer::from_path(path)?;
    for l in labels {
        w.serialize(LabelRow {
            id_i: l.id_i.clone(),
            id_j: l.id_j.clone(),
            is_loop: l.is_loop as u8,
            dx_m: l.relative_pose.map(|p| p.x),
            dy_m: l.relative_pose.map(|p| p.y),
            dtheta_rad: l.relative_pose.map(|p| p.theta),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels_csv(path: &Path) -> Result<Vec<LoopLabel>, RadarError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: LabelRow = row?;
        let is_loop = match row.is_loop {
            0 => false,
            1 => true,
            v => return Err(RadarError::InvalidManifest(format!("is_loop must be 0 or 1, got {v}"))),
        };
        let relative_pose = match (is_loop, row.dx_m, row.dy_m, row.dtheta_rad) {
            (true, Some(x), Some(y), Some(t)) => Some(Pose2::new(x, y, t)),
            (true, ..) => {
                return Err(RadarError::InvalidManifest(format!(
                    "loop ({}, {}) is missing its relative pose",
                    row.id_i, row.id_j
                )))
            }
            (false, ..) => None,
        };
        out.push(LoopLabel {
            id_i: row.id_i,
            id_j: row.id_j,
            is_loop,
            relative_pose,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(poses: &[Pose2]) -> DatasetManifest {
        DatasetManifest {
            entries: poses
                .iter()
                .enumerate()
                .map(|(k, p)| ManifestEntry {
                    scan_id: format!("s{k:03}"),
                    path: format!("s{k:03}.json"),
                    timestamp_us: k as i64 * 1000,
                    pose: *p,
                })
                .collect(),
        }
    }

    fn label(i: &str, j: &str, is_loop: bool) -> LoopLabel {
        LoopLabel {
            id_i: i.into(),
            id_j: j.into(),
            is_loop,
            relative_pose: is_loop.then(Pose2::identity),
        }
    }

    #[test]
    fn loop_radius_boundary_cases() {
        let m = manifest(&[
            Pose2::new(0.0, 0.0, 0.0),
            Pose2::new(50.0, 0.0, 0.0),
            Pose2::new(3.0, 0.0, 0.0),
            Pose2::new(5.0, 0.0, 0.0),
        ]);
        let labels = label_loops(&m, 4.0, 1).unwrap();
        let find = |a: &str, b: &str| labels.iter().find(|l| l.id_i == a && l.id_j == b).unwrap();
        assert!(find("s000", "s002").is_loop);
        assert!(!find("s000", "s003").is_loop);
        // gap of 1 is inside the window
        assert!(!labels.iter().any(|l| l.id_i == "s000" && l.id_j == "s001"));
    }

    #[test]
    fn identical_poses_have_identity_relative_pose() {
        let p = Pose2::new(4.0, -2.0, 1.1);
        let l = label_pair("a", &p, "b", &p, 4.0);
        let r = l.relative_pose.unwrap();
        assert!(r.x.abs() < 1e-12 && r.y.abs() < 1e-12 && r.theta.abs() < 1e-12);
    }

    #[test]
    fn empty_manifest_rejected() {
        assert!(matches!(
            label_loops(&DatasetManifest::default(), 4.0, 50),
            Err(RadarError::EmptyManifest)
        ));
    }

    #[test]
    fn balance_examples() {
        let mut labels: Vec<LoopLabel> = (0..10).map(|k| label(&format!("p{k}"), "x", true)).collect();
        labels.extend((0..30).map(|k| label(&format!("n{k}"), "y", false)));
        let b = balance_pairs(&labels, 3).unwrap();
        assert_eq!(b.iter().filter(|l| l.is_loop).count(), 10);
        assert_eq!(b.iter().filter(|l| !l.is_loop).count(), 10);
        assert_eq!(b, balance_pairs(&labels, 3).unwrap());

        let even: Vec<LoopLabel> = (0..5)
            .map(|k| label(&format!("p{k}"), "x", true))
            .chain((0..5).map(|k| label(&format!("n{k}"), "y", false)))
            .collect();
        let mut got = balance_pairs(&even, 1).unwrap();
        let mut want = even.clone();
        got.sort_by(|a, b| a.id_i.cmp(&b.id_i));
        want.sort_by(|a, b| a.id_i.cmp(&b.id_i));
        assert_eq!(got, want);

        let single: Vec<LoopLabel> = (0..3).map(|k| label(&format!("p{k}"), "x", true)).collect();
        assert!(matches!(balance_pairs(&single, 0), Err(RadarError::SingleClass { .. })));
    }

    #[test]
    fn triplets_forced_and_empty() {
        let labels = vec![label("a", "b", true), label("a", "c", false)];
        let t = sample_triplets(&labels, 5, 20).unwrap();
        assert_eq!(t.len(), 20);
        for tr in &t {
            assert_eq!((tr.anchor.as_str(), tr.positive.as_str(), tr.negative.as_str()), ("a", "b", "c"));
        }
        assert!(sample_triplets(&labels, 5, 0).unwrap().is_empty());
        assert!(matches!(
            sample_triplets(&[label("a", "c", false)], 0, 3),
            Err(RadarError::NoPositivePairs)
        ));
    }

    #[test]
    fn labels_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        let labels = vec![
            LoopLabel {
                id_i: "a".into(),
                id_j: "b".into(),
                is_loop: true,
                relative_pose: Some(Pose2::new(1.5, -0.25, 0.1)),
            },
            label("a", "c", false),
        ];
        write_labels_csv(&labels, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("id_i,id_j,is_loop,dx_m,dy_m,dtheta_rad\n"));
        assert!(text.contains("a,c,0,,,"));
        assert_eq!(read_labels_csv(&path).unwrap(), labels);
    }

    #[test]
    fn manifest_csv_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let m = manifest(&[Pose2::new(1.0, 2.0, 0.5), Pose2::new(-1.0, 0.0, -3.0)]);
        m.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("scan_id,path,timestamp_us,x_m,y_m,theta_rad\n"));
        assert_eq!(DatasetManifest::read_csv(&path).unwrap(), m);

        let mut dup = m.clone();
        dup.entries[1].scan_id = dup.entries[0].scan_id.clone();
        assert!(matches!(dup.validate(), Err(RadarError::DuplicateScanId(_))));
        let mut back = m;
        back.entries[1].timestamp_us = -5;
        assert!(matches!(back.validate(), Err(RadarError::NonMonotonicTimestamps)));
    }
}
