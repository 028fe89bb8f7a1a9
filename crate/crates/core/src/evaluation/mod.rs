//! Loop detection and loop closure metrics, and report assembly.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;
use thiserror::Error;

use crate::radar::{wrap_angle, Pose2};

pub const DEFAULT_T_START: f64 = 0.25;
pub const DEFAULT_T_STEP: f64 = 0.05;
pub const DEFAULT_T_COUNT: usize = 13;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no positive labels")]
    NoPositives,
    #[error("score {0} outside [0, 1]")]
    BadScore(f64),
    #[error("empty input")]
    Empty,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("closure pair ({0}, {1}) is not part of the detection split")]
    SplitMismatch(String, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub id_i: String,
    pub id_j: String,
    pub score: f64,
    pub is_loop: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub t_start: f64,
    pub t_step: f64,
    pub t_count: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            t_start: DEFAULT_T_START,
            t_step: DEFAULT_T_STEP,
            t_count: DEFAULT_T_COUNT,
        }
    }
}

impl SweepConfig {
    pub fn thresholds(&self) -> Vec<f64> {
        (0..self.t_count).map(|k| self.t_start + k as f64 * self.t_step).collect()
    }
}

fn check(pairs: &[ScoredPair]) -> Result<(), EvalError> {
    if let Some(p) = pairs.iter().find(|p| !(0.0..=1.0).contains(&p.score)) {
        return Err(EvalError::BadScore(p.score));
    }
    if !pairs.iter().any(|p| p.is_loop) {
        return Err(EvalError::NoPositives);
    }
    Ok(())
}

/// A pair is predicted a loop iff its score is at least `t`. Precision is 1
/// when nothing is predicted.
pub fn pr_at_threshold(pairs: &[ScoredPair], t: f64) -> Result<(f64, f64), EvalError> {
    check(pairs)?;
    Ok(pr_unchecked(pairs, t))
}

fn pr_unchecked(pairs: &[ScoredPair], t: f64) -> (f64, f64) {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for p in pairs {
        match (p.score >= t, p.is_loop) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    (precision, tp as f64 / (tp + fneg) as f64)
}

/// Recall-weighted precision over the sweep, visited from the highest
/// threshold down with recall starting at 0. The table is in sweep order.
pub fn map_over_thresholds(pairs: &[ScoredPair], sweep: &SweepConfig) -> Result<(f64, Vec<OperatingPoint>), EvalError> {
    if sweep.t_count == 0 {
        return Err(EvalError::InvalidArgument("t_count must be >= 1".into()));
    }
    if !sweep.t_start.is_finite() || !sweep.t_step.is_finite() {
        return Err(EvalError::InvalidArgument("sweep bounds must be finite".into()));
    }
    check(pairs)?;
    let table: Vec<OperatingPoint> = sweep
        .thresholds()
        .into_iter()
        .map(|threshold| {
            let (precision, recall) = pr_unchecked(pairs, threshold);
            OperatingPoint {
                threshold,
                precision,
                recall,
            }
        })
        .collect();
    let mut order: Vec<&OperatingPoint> = table.iter().collect();
    order.sort_by(|a, b| b.threshold.total_cmp(&a.threshold));
    let mut ap = 0.0;
    let mut prev = 0.0;
    for op in order {
        ap += (op.recall - prev) * op.precision;
        prev = op.recall;
    }
    Ok((ap, table))
}

/// Mean rotation error in degrees and mean planar translation error in
/// meters, for `(estimate, truth)` pairs.
pub fn pose_errors(results: &[(Pose2, Pose2)]) -> Result<(f64, f64), EvalError> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = results.len() as f64;
    let (mut r, mut t) = (0.0, 0.0);
    for (est, truth) in results {
        t += est.planar_distance(truth);
        r += wrap_angle(truth.theta - est.theta).abs();
    }
    Ok(((r / n).to_degrees(), t / n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosureEval {
    pub id_i: String,
    pub id_j: String,
    pub estimate: Pose2,
    pub truth: Pose2,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    /// Absent when no registration converged.
    pub r_eps_deg: Option<f64>,
    pub t_eps_m: Option<f64>,
    pub n_pairs: usize,
    /// Converged registrations entering the pose errors.
    pub n_closures: usize,
    pub n_closures_attempted: usize,
    pub config_hash: String,
}

/// Pose errors are averaged over converged registrations only.
pub fn build_report(
    pairs: &[ScoredPair],
    closures: &[ClosureEval],
    sweep: &SweepConfig,
    config_hash: &str,
) -> Result<EvalReport, EvalError> {
    let (map, table) = map_over_thresholds(pairs, sweep)?;
    let ids: BTreeSet<&str> = pairs.iter().flat_map(|p| [p.id_i.as_str(), p.id_j.as_str()]).collect();
    if let Some(c) = closures
        .iter()
        .find(|c| !ids.contains(c.id_i.as_str()) || !ids.contains(c.id_j.as_str()))
    {
        return Err(EvalError::SplitMismatch(c.id_i.clone(), c.id_j.clone()));
    }
    let converged: Vec<(Pose2, Pose2)> = closures.iter().filter(|c| c.converged).map(|c| (c.estimate, c.truth)).collect();
    let errors = if converged.is_empty() { None } else { Some(pose_errors(&converged)?) };
    Ok(EvalReport {
        map,
        thresholds: table.iter().map(|o| o.threshold).collect(),
        precision: table.iter().map(|o| o.precision).collect(),
        recall: table.iter().map(|o| o.recall).collect(),
        r_eps_deg: errors.map(|e| e.0),
        t_eps_m: errors.map(|e| e.1),
        n_pairs: pairs.len(),
        n_closures: converged.len(),
        n_closures_attempted: closures.len(),
        config_hash: config_hash.to_string(),
    })
}

/// Writes `report.json` content to `json_path` and the threshold table
/// (`threshold,precision,recall`) to `csv_path`.
pub fn write_report(report: &EvalReport, json_path: &Path, csv_path: &Path) -> Result<(), EvalError> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    std::fs::write(json_path, text)?;
    let mut w = csv::Writer::from_path(csv_path)?;
    w.write_record(["threshold", "precision", "recall"])?;
    for k in 0..report.thresholds.len() {
        w.write_record([
            report.thresholds[k].to_string(),
            report.precision[k].to_string(),
            report.recall[k].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report(json_path: &Path) -> Result<EvalReport, EvalError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(json_path)?)?)
}

pub fn write_scores_csv(pairs: &[ScoredPair], path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id_i", "id_j", "score", "is_loop"])?;
    for p in pairs {
        w.write_record([p.id_i.as_str(), p.id_j.as_str(), &p.score.to_string(), if p.is_loop { "1" } else { "0" }])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoredPair>, EvalError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |k: usize| rec.get(k).ok_or_else(|| EvalError::InvalidArgument("short score row".into()));
        let score: f64 = field(2)?
            .parse()
            .map_err(|_| EvalError::InvalidArgument("unparsable score".into()))?;
        let is_loop = match field(3)? {
            "1" => true,
            "0" => false,
            other => return Err(EvalError::InvalidArgument(format!("bad label {other}"))),
        };
        out.push(ScoredPair {
            id_i: field(0)?.to_string(),
            id_j: field(1)?.to_string(),
            score,
            is_loop,
        });
    }
    Ok(out)
}
