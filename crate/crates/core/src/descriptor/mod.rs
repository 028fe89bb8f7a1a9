//! Loss functions, NetVLAD aggregation and training, and loop detection by
//! cosine distance between global descriptors.

mod loss;
mod netvlad;
mod train;

pub use loss::{
    bce_loss, closure_loss, cosine_distance, dmtl_total_loss, triplet_loss, LossWeights, BCE_EPSILON,
};
pub use netvlad::{
    batch_loss, netvlad_forward, netvlad_gradients, GlobalDescriptor, NetVladGradients, NetVladParams,
    TripletBatch,
};
pub use train::{train_netvlad, TrainingOutcome};

use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("label {0} is not 0 or 1")]
    InvalidLabel(u8),
    #[error("closure mask selects no samples")]
    EmptyMask,
    #[error("zero-norm vector has no cosine distance")]
    ZeroNorm,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("no local descriptors")]
    EmptyDescriptors,
    #[error("global descriptor is degenerate (all zero)")]
    Degenerate,
    #[error("every training batch is degenerate")]
    AllBatchesDegenerate,
    #[error("non-finite value")]
    NonFinite,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed model file: {0}")]
    BadModelFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub const DEFAULT_LOOP_THRESHOLD: f64 = 0.5;

/// Loop iff the cosine distance is at most `threshold` (ties count as loops).
pub fn detect_loop(ga: &GlobalDescriptor, gb: &GlobalDescriptor, threshold: f64) -> Result<(bool, f64), DescriptorError> {
    if !(threshold > 0.0 && threshold < 2.0) {
        return Err(DescriptorError::InvalidArgument("threshold must lie in (0, 2)".into()));
    }
    if ga.degenerate || gb.degenerate {
        return Err(DescriptorError::Degenerate);
    }
    let d = cosine_distance(&ga.values, &gb.values)?;
    Ok((d <= threshold, d))
}

/// Similarity used by the threshold sweep: `1 - d / 2`.
pub fn descriptor_similarity(ga: &GlobalDescriptor, gb: &GlobalDescriptor) -> Result<f64, DescriptorError> {
    if ga.degenerate || gb.degenerate {
        return Err(DescriptorError::Degenerate);
    }
    Ok(1.0 - cosine_distance(&ga.values, &gb.values)? / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelHeader {
    #[serde(rename = "K")]
    clusters: usize,
    #[serde(rename = "C")]
    dim: usize,
    temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

/// Model file: one JSON header line, a newline, then little-endian f32
/// centers, assignment weights and assignment bias, in that order.
pub fn write_model(params: &NetVladParams, config_hash: Option<&str>, path: &Path) -> Result<(), DescriptorError> {
    params.validate()?;
    let header = ModelHeader {
        clusters: params.clusters,
        dim: params.dim,
        temperature: params.temperature,
        config_hash: config_hash.map(str::to_string),
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    for v in params
        .centers
        .iter()
        .chain(&params.assignment_weights)
        .chain(&params.assignment_bias)
    {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Returns the parameters and the embedded configuration hash, if any.
pub fn read_model(path: &Path) -> Result<(NetVladParams, Option<String>), DescriptorError> {
    let bytes = fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| DescriptorError::BadModelFile("missing header line".into()))?;
    let header: ModelHeader = serde_json::from_slice(&bytes[..nl])?;
    let payload = &bytes[nl + 1..];
    let kc = header.clusters * header.dim;
    let expected = (2 * kc + header.clusters) * 4;
    if payload.len() != expected {
        return Err(DescriptorError::BadModelFile(format!(
            "payload holds {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let vals: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let params = NetVladParams {
        clusters: header.clusters,
        dim: header.dim,
        centers: vals[..kc].to_vec(),
        assignment_weights: vals[kc..2 * kc].to_vec(),
        assignment_bias: vals[2 * kc..].to_vec(),
        temperature: header.temperature,
    };
    params.validate()?;
    Ok((params, header.config_hash))
}

/// Loss trace CSV: `epoch,mean_loss`.
pub fn write_loss_trace(trace: &[f64], path: &Path) -> Result<(), DescriptorError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "mean_loss"])?;
    for (epoch, loss) in trace.iter().enumerate() {
        w.write_record([epoch.to_string(), loss.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
