//! Stage orchestration over a run directory with fixed artifact names.
//!
//! ```text
//! <run>/dataset/{manifest.csv, scans/<id>.json|.bin, stamp.json}
//! <run>/features/{<id>.rfm, stamp.json}
//! <run>/keypoints/{<id>.csv, stamp.json}
//! <run>/describe/{<id>.rld, stamp.json}
//! <run>/train/{model.rnv, model_init.rnv, loss.csv, labels.csv, stamp.json}
//! <run>/detect/{labels.csv, scores.csv, scores_untrained.csv, stamp.json}
//! <run>/scancontext/{<id>.rsc, scores.csv, stamp.json}
//! <run>/close/{closures.csv, stamp.json}
//! <run>/evaluate/{report*.json, report*.csv, stamp.json}
//! ```
//!
//! Every stamp records the configuration hash; a stage refuses upstream
//! output stamped with a different hash unless forced.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::config::{derive_seed, ConfigError, PipelineConfig, SceneKind};
use crate::descriptor::{
    descriptor_similarity, netvlad_forward, read_model, train_netvlad, write_loss_trace, write_model, DescriptorError,
    GlobalDescriptor, NetVladParams, TripletBatch,
};
use crate::evaluation::{build_report, read_scores_csv, write_report, write_scores_csv, ClosureEval, EvalError, ScoredPair};
use crate::features::{extract_features, guidance_map, load_feature_map, write_feature_map, FeatureError};
use crate::keypoints::{
    keypoints_to_points, read_descriptors, read_keypoints_csv, sample_descriptors, select_keypoints, write_descriptors,
    write_keypoints_csv, ChannelScaler, KeypointError, LocalDescriptorSet,
};
use crate::radar::{
    balance_pairs, label_loops, polar_to_cartesian, read_polar_scan, render_scan, route_trajectory, sample_triplets,
    simulate_scene, simulate_structured_scene, write_labels_csv, write_polar_scan, CartesianImage, DatasetManifest, LoopLabel, ManifestEntry,
    Pose2, RadarError,
};
use crate::registration::{
    close_loop, read_closures_csv, write_closures_csv, ClosureRecord, PointCloud2, RegistrationError, ScanArtifacts,
};
use crate::scancontext::{make_scan_context, sc_distance, write_scan_context, ScanContextError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage `{stage}` has not produced {path}")]
    MissingArtifact { stage: &'static str, path: PathBuf },
    #[error("stage `{stage}` ran under config {found}, current config is {expected}; rerun it or pass --force")]
    HashMismatch {
        stage: &'static str,
        expected: String,
        found: String,
    },
    #[error("{0}")]
    Numeric(String),
    #[error(transparent)]
    Radar(#[from] RadarError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Keypoint(#[from] KeypointError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
    #[error(transparent)]
    ScanContext(#[from] ScanContextError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Io,
    Numeric,
}

impl PipelineError {
    pub fn class(&self) -> ErrorClass {
        use PipelineError as P;
        match self {
            P::Config(_) | P::HashMismatch { .. } => ErrorClass::Config,
            P::MissingArtifact { .. } | P::Io(_) | P::Json(_) => ErrorClass::Io,
            P::Radar(RadarError::Io(_) | RadarError::Json(_) | RadarError::Csv(_))
            | P::Feature(FeatureError::Io(_) | FeatureError::BadMagic(_) | FeatureError::DimensionMismatch { .. })
            | P::Keypoint(KeypointError::Io(_) | KeypointError::Csv(_) | KeypointError::BadDescriptorFile(_))
            | P::Descriptor(
                DescriptorError::Io(_) | DescriptorError::Json(_) | DescriptorError::Csv(_) | DescriptorError::BadModelFile(_),
            )
            | P::Registration(RegistrationError::Io(_) | RegistrationError::Csv(_))
            | P::ScanContext(ScanContextError::Io(_) | ScanContextError::BadFile(_))
            | P::Eval(EvalError::Io(_) | EvalError::Json(_) | EvalError::Csv(_)) => ErrorClass::Io,
            P::Radar(RadarError::InvalidManifest(_) | RadarError::DuplicateScanId(_) | RadarError::NonMonotonicTimestamps) => {
                ErrorClass::Io
            }
            _ => ErrorClass::Numeric,
        }
    }
}

pub const STAGES: [&str; 9] = [
    "dataset",
    "features",
    "keypoints",
    "describe",
    "train",
    "detect",
    "scancontext",
    "close",
    "evaluate",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    pub config_hash: String,
    pub summary: serde_json::Value,
}

/// A configured run directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub cfg: PipelineConfig,
    pub hash: String,
    pub dir: PathBuf,
    pub force: bool,
}

/// Held-out evaluation pairs and the training labels, split by sequence
/// position.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<LoopLabel>,
    pub eval: Vec<LoopLabel>,
}

impl Run {
    pub fn new(cfg: PipelineConfig, force: bool) -> Result<Self, PipelineError> {
        cfg.validate()?;
        Ok(Self {
            hash: cfg.config_hash(),
            dir: cfg.paths.run_dir.clone(),
            cfg,
            force,
        })
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.dir.join(stage)
    }

    fn fresh_dir(&self, stage: &str) -> Result<PathBuf, PipelineError> {
        let d = self.stage_dir(stage);
        fs::create_dir_all(&d)?;
        Ok(d)
    }

    fn write_stamp(&self, stage: &str, summary: serde_json::Value) -> Result<(), PipelineError> {
        let stamp = Stamp {
            stage: stage.to_string(),
            config_hash: self.hash.clone(),
            summary,
        };
        let mut text = serde_json::to_string_pretty(&stamp)?;
        text.push('\n');
        fs::write(self.stage_dir(stage).join("stamp.json"), text)?;
        Ok(())
    }

    /// Checks that `stage` completed under the current configuration.
    pub fn require(&self, stage: &'static str) -> Result<(), PipelineError> {
        let path = self.stage_dir(stage).join("stamp.json");
        if !path.exists() {
            return Err(PipelineError::MissingArtifact { stage, path });
        }
        let stamp: Stamp = serde_json::from_slice(&fs::read(&path)?)?;
        if stamp.config_hash != self.hash && !self.force {
            return Err(PipelineError::HashMismatch {
                stage,
                expected: self.hash.clone(),
                found: stamp.config_hash,
            });
        }
        Ok(())
    }

    fn require_file(&self, stage: &'static str, path: PathBuf) -> Result<PathBuf, PipelineError> {
        if path.exists() {
            Ok(path)
        } else {
            Err(PipelineError::MissingArtifact { stage, path })
        }
    }

    /// The manifest, from a simulated dataset or one placed in
    /// `<run>/dataset/` by hand (which carries no stamp).
    pub fn manifest(&self) -> Result<DatasetManifest, PipelineError> {
        let dir = self.stage_dir("dataset");
        let path = self.require_file("dataset", dir.join("manifest.csv"))?;
        if dir.join("stamp.json").exists() {
            self.require("dataset")?;
        }
        Ok(DatasetManifest::read_csv(&path)?)
    }

    pub fn split(&self, manifest: &DatasetManifest) -> Result<Split, PipelineError> {
        let l = &self.cfg.labels;
        let labels = label_loops(manifest, l.loop_radius, l.exclusion_window)?;
        let index: HashMap<&str, usize> = manifest
            .entries
            .iter()
            .enumerate()
            .map(|(k, e)| (e.scan_id.as_str(), k))
            .collect();
        let cut = split_index(manifest.entries.len(), l.train_fraction);
        let (train, held): (Vec<LoopLabel>, Vec<LoopLabel>) = labels.into_iter().partition(|x| index[x.id_j.as_str()] < cut);
        let eval = balance_pairs(&held, derive_seed(self.cfg.seed, "balance", 0))?;
        Ok(Split { train, eval })
    }

    fn image(&self, entry: &ManifestEntry) -> Result<CartesianImage, PipelineError> {
        let scan = read_polar_scan(&self.stage_dir("dataset").join(&entry.path))?;
        let im = &self.cfg.image;
        Ok(polar_to_cartesian(&scan, im.width, im.height, im.meters_per_pixel)?)
    }

    fn artifact(&self, stage: &str, id: &str, ext: &str) -> PathBuf {
        self.stage_dir(stage).join(format!("{id}.{ext}"))
    }
}

pub fn split_index(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n)
}

pub fn simulate(run: &Run) -> Result<String, PipelineError> {
    let s = &run.cfg.simulate;
    let seed = run.cfg.seed;
    let scene_seed = derive_seed(seed, "scene", 0);
    let scene = match s.scene {
        SceneKind::Uniform => simulate_scene(scene_seed, s.landmark_count, s.scene_extent)?,
        SceneKind::Structured => simulate_structured_scene(scene_seed, &s.structure())?,
    };
    let poses = route_trajectory(&s.trajectory(), derive_seed(seed, "route", 0))?;
    let dir = run.fresh_dir("dataset")?;
    fs::create_dir_all(dir.join("scans"))?;
    let period_us = (s.scan_period * 1e6).round() as i64;
    let render = s.render();
    let entries = poses
        .par_iter()
        .enumerate()
        .map(|(k, pose)| {
            let id = format!("scan_{k:05}");
            let ts = k as i64 * period_us;
            let scan = render_scan(&scene, pose, &render, derive_seed(seed, "noise", k as u64), id.as_str(), ts)?;
            let rel = format!("scans/{id}.json");
            write_polar_scan(&scan, &dir.join(&rel))?;
            Ok(ManifestEntry {
                scan_id: id,
                path: rel,
                timestamp_us: ts,
                pose: *pose,
            })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let manifest = DatasetManifest { entries };
    manifest.write_csv(&dir.join("manifest.csv"))?;
    let l = &run.cfg.labels;
    let loops = label_loops(&manifest, l.loop_radius, l.exclusion_window)?
        .iter()
        .filter(|x| x.is_loop)
        .count();
    run.write_stamp("dataset", json!({ "scans": manifest.entries.len(), "loop_pairs": loops }))?;
    Ok(format!("simulate: {} scans, {loops} loop pairs", manifest.entries.len()))
}

pub fn features(run: &Run) -> Result<String, PipelineError> {
    let manifest = run.manifest()?;
    run.fresh_dir("features")?;
    let shapes = manifest
        .entries
        .par_iter()
        .map(|e| {
            let image = run.image(e)?;
            let map = extract_features(&image, &run.cfg.features, &e.scan_id)?;
            write_feature_map(&map, &run.artifact("features", &e.scan_id, "rfm"))?;
            Ok((map.channels, map.height, map.width, map.stride))
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let (c, h, w, stride) = shapes.first().copied().unwrap_or_default();
    run.write_stamp(
        "features",
        json!({ "scans": shapes.len(), "channels": c, "height": h, "width": w, "stride": stride }),
    )?;
    Ok(format!("features: {} maps of {c}x{h}x{w}", shapes.len()))
}

pub fn keypoints(run: &Run) -> Result<String, PipelineError> {
    let manifest = run.manifest()?;
    run.require("features")?;
    run.fresh_dir("keypoints")?;
    let counts = manifest
        .entries
        .par_iter()
        .enumerate()
        .map(|(k, e)| {
            let map = load_feature_map(&run.artifact("features", &e.scan_id, "rfm"))?;
            let g = guidance_map(&map)?;
            let kp = select_keypoints(&g, &run.cfg.keypoints, derive_seed(run.cfg.seed, "keypoints", k as u64))?;
            write_keypoints_csv(&kp, &run.artifact("keypoints", &e.scan_id, "csv"))?;
            Ok(kp.len())
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let total: usize = counts.iter().sum();
    run.write_stamp("keypoints", json!({ "scans": counts.len(), "keypoints": total }))?;
    Ok(format!(
        "keypoints: {total} over {} scans ({:.1} per scan)",
        counts.len(),
        total as f64 / counts.len().max(1) as f64
    ))
}

pub fn describe(run: &Run) -> Result<String, PipelineError> {
    let manifest = run.manifest()?;
    run.require("features")?;
    run.require("keypoints")?;
    let dir = run.fresh_dir("describe")?;
    let mut sets = manifest
        .entries
        .par_iter()
        .map(|e| {
            let map = load_feature_map(&run.artifact("features", &e.scan_id, "rfm"))?;
            let kp = read_keypoints_csv(&run.artifact("keypoints", &e.scan_id, "csv"))?;
            Ok(sample_descriptors(&map, &kp)?)
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    // Channel statistics come from the training scans only.
    let cut = split_index(sets.len(), run.cfg.labels.train_fraction);
    let scaler = ChannelScaler::fit(&sets[..cut])
        .ok_or_else(|| PipelineError::Numeric("no keypoints in the training scans".into()))?;
    fs::write(dir.join("scaler.json"), serde_json::to_string_pretty(&scaler)?)?;
    sets.par_iter_mut()
        .zip(&manifest.entries)
        .try_for_each(|(set, e)| {
            scaler.apply(set);
            write_descriptors(set, &run.artifact("describe", &e.scan_id, "rld"))
        })?;
    let dim = scaler.mean.len();
    run.write_stamp("describe", json!({ "scans": sets.len(), "dim": dim }))?;
    Ok(format!("describe: {} descriptor sets of dimension {dim}", sets.len()))
}

fn load_descriptor_sets(run: &Run, ids: &BTreeSet<&str>) -> Result<HashMap<String, LocalDescriptorSet>, PipelineError> {
    let ids: Vec<&str> = ids.iter().copied().collect();
    let sets = ids
        .par_iter()
        .map(|id| Ok((id.to_string(), read_descriptors(&run.artifact("describe", id, "rld"))?)))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(sets.into_iter().collect())
}

fn pair_ids(labels: &[LoopLabel]) -> BTreeSet<&str> {
    labels.iter().flat_map(|l| [l.id_i.as_str(), l.id_j.as_str()]).collect()
}

pub fn train(run: &Run) -> Result<String, PipelineError> {
    let manifest = run.manifest()?;
    run.require("describe")?;
    let dir = run.fresh_dir("train")?;
    let split = run.split(&manifest)?;
    let n = &run.cfg.netvlad;
    let seed = run.cfg.seed;
    let triplets = sample_triplets(&split.train, derive_seed(seed, "triplets", 0), n.triplets)?;
    let cut = split_index(manifest.entries.len(), run.cfg.labels.train_fraction);
    let train_ids: BTreeSet<&str> = manifest.entries[..cut].iter().map(|e| e.scan_id.as_str()).collect();
    let sets = load_descriptor_sets(run, &train_ids)?;

    // k-means sample: evenly strided rows from every training scan.
    let mut sample: Vec<&[f64]> = Vec::new();
    for id in &train_ids {
        let set = &sets[*id];
        let take = n.kmeans_per_scan.min(set.len());
        for r in 0..take {
            sample.push(set.row(r * set.len() / take));
        }
    }
    let params0 = NetVladParams::from_kmeans(&sample, n.clusters, n.temperature, n.kmeans_iterations, derive_seed(seed, "kmeans", 0))?;
    let batches: Vec<TripletBatch> = triplets
        .iter()
        .map(|t| TripletBatch {
            anchor: sets[&t.anchor].clone(),
            positive: sets[&t.positive].clone(),
            negative: sets[&t.negative].clone(),
        })
        .collect();
    let outcome = train_netvlad(&batches, &params0, n.learning_rate, n.epochs, n.margin, derive_seed(seed, "train", 0))?;
    if outcome.params.centers.iter().any(|v| !v.is_finite()) {
        return Err(PipelineError::Numeric("training diverged".into()));
    }
    write_model(&params0, Some(&run.hash), &dir.join("model_init.rnv"))?;
    write_model(&outcome.params, Some(&run.hash), &dir.join("model.rnv"))?;
    write_loss_trace(&outcome.loss_trace, &dir.join("loss.csv"))?;
    write_labels_csv(&split.train, &dir.join("labels.csv"))?;
    let first = outcome.loss_trace[0];
    let last = *outcome.loss_trace.last().expect("epochs >= 1");
    run.write_stamp(
        "train",
        json!({ "triplets": batches.len(), "epochs": n.epochs, "initial_loss": first, "final_loss": last, "skipped": outcome.skipped }),
    )?;
    Ok(format!(
        "train: {} triplets, {} epochs, loss {first:.4} -> {last:.4}",
        batches.len(),
        n.epochs
    ))
}

fn load_model(run: &Run, name: &str) -> Result<NetVladParams, PipelineError> {
    let path = run.require_file("train", run.stage_dir("train").join(name))?;
    let (params, hash) = read_model(&path)?;
    if let Some(h) = hash {
        if h != run.hash && !run.force {
            return Err(PipelineError::HashMismatch {
                stage: "train",
                expected: run.hash.clone(),
                found: h,
            });
        }
    }
    Ok(params)
}

fn score_pairs(
    labels: &[LoopLabel],
    globals: &HashMap<String, GlobalDescriptor>,
) -> Result<Vec<ScoredPair>, PipelineError> {
    labels
        .iter()
        .map(|l| {
            let (a, b) = (&globals[&l.id_i], &globals[&l.id_j]);
            let score = match descriptor_similarity(a, b) {
                Ok(s) => s.clamp(0.0, 1.0),
                Err(DescriptorError::Degenerate) => {
                    log::warn!("degenerate descriptor in pair ({}, {}); scored 0", l.id_i, l.id_j);
                    0.0
                }
                Err(e) => return Err(e.into()),
            };
            Ok(ScoredPair {
                id_i: l.id_i.clone(),
                id_j: l.id_j.clone(),
                score,
                is_loop: l.is_loop,
            })
        })
        .collect()
}

fn globals_for(
    sets: &HashMap<String, LocalDescriptorSet>,
    params: &NetVladParams,
) -> Result<HashMap<String, GlobalDescriptor>, PipelineError> {
    let mut ids: Vec<&String> = sets.keys().collect();
    ids.sort();
    let out = ids
        .par_iter()
        .map(|id| Ok(((*id).clone(), netvlad_forward(&sets[*id], params)?)))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(out.into_iter().collect())
}

pub fn detect(run: &Run) -> Result<String, PipelineError> {
    let manifest = run.manifest()?;
    run.require("describe")?;
    run.require("train")?;
    let trained = load_model(run, "model.rnv")?;
    let init = load_model(run, "model_init.rnv")?;
    let dir = run.fresh_dir("detect")?;
    let split = run.split(&manifest)?;
    let sets = load_descriptor_sets(run, &pair_ids(&split.eval))?;
    let scores = score_pairs(&split.eval, &globals_for(&sets, &trained)?)?;
    let baseline = score_pairs(&split.eval, &globals_for(&sets, &init)?)?;
    write_labels_csv(&split.eval, &dir.join("labels.csv"))?;
    write_scores_csv(&scores, &dir.join("scores.csv"))?;
    write_scores_csv(&baseline, &dir.join("scores_untrained.csv"))?;
    let min_score = 1.0 - run.cfg.netvlad.detect_threshold / 2.0;
    let detected = scores.iter().filter(|p| p.score >= min_score).count();
    let hits = scores.iter().filter(|p| p.score >= min_score && p.is_loop).count();
    run.write_stamp(
        "detect",
        json!({ "pairs": scores.len(), "detected": detected, "true_detections": hits }),
    )?;
    Ok(format!(
        "detect: {} held-out pairs, {detected} detected as loops ({hits} correct)",
        scores.len()
    ))
}

pub fn scancontext(run: &Run) -> Result<String, PipelineError> {
    let manifest = run.manifest()?;
    run.fresh_dir("scancontext")?;
    let split = run.split(&manifest)?;
    let ids = pair_ids(&split.eval);
    let sc = &run.cfg.scancontext;
    let entries: Vec<&ManifestEntry> = manifest.entries.iter().filter(|e| ids.contains(e.scan_id.as_str())).collect();
    let descs = entries
        .par_iter()
        .map(|e| {
            let d = make_scan_context(&run.image(e)?, sc.rings, sc.sectors, sc.max_range)?;
            write_scan_context(&d, &run.artifact("scancontext", &e.scan_id, "rsc"))?;
            Ok((e.scan_id.clone(), d))
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let clipped = descs.iter().any(|(_, d)| d.clipped);
    let descs: HashMap<String, _> = descs.into_iter().collect();
    let scores = split
        .eval
        .par_iter()
        .map(|l| {
            let score = match sc_distance(&descs[&l.id_i], &descs[&l.id_j]) {
                Ok((d, _)) => 1.0 - d,
                Err(ScanContextError::BothEmpty) => 0.0,
                Err(e) => return Err(e.into()),
            };
            Ok(ScoredPair {
                id_i: l.id_i.clone(),
                id_j: l.id_j.clone(),
                score: score.clamp(0.0, 1.0),
                is_loop: l.is_loop,
            })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    write_scores_csv(&scores, &run.stage_dir("scancontext").join("scores.csv"))?;
    run.write_stamp(
        "scancontext",
        json!({ "descriptors": descs.len(), "pairs": scores.len(), "range_clipped": clipped }),
    )?;
    Ok(format!("scancontext: {} descriptors, {} pairs scored", descs.len(), scores.len()))
}

fn scan_artifacts(run: &Run, id: &str, stride: usize) -> Result<ScanArtifacts, PipelineError> {
    let kp = read_keypoints_csv(&run.artifact("keypoints", id, "csv"))?;
    let descriptors = read_descriptors(&run.artifact("describe", id, "rld"))?;
    let im = &run.cfg.image;
    let half = (stride as f64 - 1.0) / 2.0;
    let center = ((im.width as f64 - 1.0) / 2.0 - half, (im.height as f64 - 1.0) / 2.0 - half);
    let points = keypoints_to_points(&kp, stride, im.meters_per_pixel, center)?;
    Ok(ScanArtifacts {
        points: PointCloud2::new(points)?,
        descriptors,
    })
}

pub fn close(run: &Run) -> Result<String, PipelineError> {
    let manifest = run.manifest()?;
    run.require("keypoints")?;
    run.require("describe")?;
    let stamp: Stamp = serde_json::from_slice(&fs::read(run.stage_dir("features").join("stamp.json"))?)?;
    let stride = stamp.summary["stride"].as_u64().unwrap_or(1) as usize;
    run.fresh_dir("close")?;
    let split = run.split(&manifest)?;
    let loops: Vec<&LoopLabel> = split.eval.iter().filter(|l| l.is_loop).collect();
    let records = loops
        .par_iter()
        .enumerate()
        .map(|(k, l)| {
            let target = scan_artifacts(run, &l.id_i, stride)?;
            let source = scan_artifacts(run, &l.id_j, stride)?;
            let out = close_loop(&target, &source, &run.cfg.registration, derive_seed(run.cfg.seed, "close", k as u64))?;
            if out.fallback {
                log::info!("({}, {}): RANSAC failed, ICP from identity", l.id_i, l.id_j);
            }
            Ok(ClosureRecord {
                id_i: l.id_i.clone(),
                id_j: l.id_j.clone(),
                dx_m: out.icp.pose.x,
                dy_m: out.icp.pose.y,
                dtheta_rad: out.icp.pose.theta,
                converged: out.accepted,
                residual_m: out.icp.mean_residual,
                inliers: out.icp.inlier_count,
            })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    write_closures_csv(&records, &run.stage_dir("close").join("closures.csv"))?;
    let accepted = records.iter().filter(|r| r.converged).count();
    run.write_stamp("close", json!({ "pairs": records.len(), "converged": accepted }))?;
    Ok(format!("close: {accepted}/{} loop pairs registered", records.len()))
}

fn report_pair(
    run: &Run,
    pairs: &[ScoredPair],
    closures: &[ClosureEval],
    name: &str,
) -> Result<f64, PipelineError> {
    let report = build_report(pairs, closures, &run.cfg.evaluation, &run.hash)?;
    let dir = run.stage_dir("evaluate");
    write_report(&report, &dir.join(format!("{name}.json")), &dir.join(format!("{name}.csv")))?;
    Ok(report.map)
}

pub fn evaluate(run: &Run) -> Result<String, PipelineError> {
    let manifest = run.manifest()?;
    run.require("detect")?;
    run.fresh_dir("evaluate")?;
    let poses: HashMap<&str, Pose2> = manifest.entries.iter().map(|e| (e.scan_id.as_str(), e.pose)).collect();
    let scores = read_scores_csv(&run.stage_dir("detect").join("scores.csv"))?;
    let baseline = read_scores_csv(&run.stage_dir("detect").join("scores_untrained.csv"))?;

    let closures_path = run.stage_dir("close").join("closures.csv");
    let closures = if closures_path.exists() {
        run.require("close")?;
        read_closures_csv(&closures_path)?
            .into_iter()
            .map(|r| {
                let (pi, pj) = (poses.get(r.id_i.as_str()), poses.get(r.id_j.as_str()));
                let (Some(pi), Some(pj)) = (pi, pj) else {
                    return Err(PipelineError::Eval(EvalError::SplitMismatch(r.id_i, r.id_j)));
                };
                Ok(ClosureEval {
                    estimate: Pose2::new(r.dx_m, r.dy_m, r.dtheta_rad),
                    truth: pi.relative_to_self(pj),
                    converged: r.converged,
                    id_i: r.id_i,
                    id_j: r.id_j,
                })
            })
            .collect::<Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };

    let trained = report_pair(run, &scores, &closures, "report")?;
    let untrained = report_pair(run, &baseline, &[], "report_untrained")?;
    let sc_path = run.stage_dir("scancontext").join("scores.csv");
    let sc = if sc_path.exists() {
        run.require("scancontext")?;
        Some(report_pair(run, &read_scores_csv(&sc_path)?, &[], "report_scancontext")?)
    } else {
        None
    };
    run.write_stamp(
        "evaluate",
        json!({ "map": trained, "map_untrained": untrained, "map_scancontext": sc, "closures": closures.len() }),
    )?;
    let mut line = format!("evaluate: mAP {trained:.4} (untrained {untrained:.4}");
    if let Some(s) = sc {
        line.push_str(&format!(", scan context {s:.4}"));
    }
    line.push(')');
    let report = crate::evaluation::read_report(&run.stage_dir("evaluate").join("report.json"))?;
    if let (Some(r), Some(t)) = (report.r_eps_deg, report.t_eps_m) {
        line.push_str(&format!(
            "; R_eps {r:.3} deg, T_eps {t:.3} m over {}/{} closures",
            report.n_closures, report.n_closures_attempted
        ));
    }
    Ok(line)
}

/// Every stage in dependency order; returns the summary lines.
pub fn run_all(run: &Run) -> Result<Vec<String>, PipelineError> {
    type Stage = fn(&Run) -> Result<String, PipelineError>;
    let stages: [Stage; 9] =
        [simulate, features, keypoints, describe, train, detect, scancontext, close, evaluate];
    stages.iter().map(|f| f(run)).collect()
}

/// Reads a stage stamp, if present.
pub fn read_stamp(dir: &Path) -> Result<Option<Stamp>, PipelineError> {
    let p = dir.join("stamp.json");
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_slice(&fs::read(p)?)?))
}
