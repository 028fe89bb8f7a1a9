//! NetVLAD aggregation with exact reverse-mode gradients of the triplet
//! objective.
//!
//! Forward pass for a set of descriptors `d_i`:
//!
//! ```text
//! z_ik = (w_k . d_i + b_k) / T          a_ik = softmax_k(z_ik)
//! V_k  = sum_i a_ik (d_i - c_k)         U_k  = V_k / |V_k|   (zero rows stay zero)
//! g    = flatten(U) / |flatten(U)|
//! ```

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DescriptorError;
use crate::keypoints::LocalDescriptorSet;

#[derive(Debug, Clone, PartialEq)]
pub struct NetVladParams {
    pub clusters: usize,
    pub dim: usize,
    /// `clusters x dim`, row-major.
    pub centers: Vec<f64>,
    /// `clusters x dim`, row-major.
    pub assignment_weights: Vec<f64>,
    pub assignment_bias: Vec<f64>,
    pub temperature: f64,
}

/// Unit-norm place signature; `degenerate` marks the all-zero output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalDescriptor {
    pub values: Vec<f64>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub anchor: LocalDescriptorSet,
    pub positive: LocalDescriptorSet,
    pub negative: LocalDescriptorSet,
}

/// Same layout as [`NetVladParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetVladGradients {
    pub centers: Vec<f64>,
    pub assignment_weights: Vec<f64>,
    pub assignment_bias: Vec<f64>,
    pub temperature: f64,
}

impl NetVladGradients {
    fn zeros(p: &NetVladParams) -> Self {
        Self {
            centers: vec![0.0; p.centers.len()],
            assignment_weights: vec![0.0; p.assignment_weights.len()],
            assignment_bias: vec![0.0; p.assignment_bias.len()],
            temperature: 0.0,
        }
    }

    fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.centers.iter_mut().zip(&other.centers) {
            *a += b;
        }
        for (a, b) in self.assignment_weights.iter_mut().zip(&other.assignment_weights) {
            *a += b;
        }
        for (a, b) in self.assignment_bias.iter_mut().zip(&other.assignment_bias) {
            *a += b;
        }
        self.temperature += other.temperature;
    }
}

impl NetVladParams {
    pub fn validate(&self) -> Result<(), DescriptorError> {
        let kc = self.clusters * self.dim;
        if self.clusters == 0 || self.dim == 0 {
            return Err(DescriptorError::InvalidArgument("NetVLAD needs K >= 1 and C >= 1".into()));
        }
        if self.centers.len() != kc || self.assignment_weights.len() != kc || self.assignment_bias.len() != self.clusters {
            return Err(DescriptorError::InvalidArgument("NetVLAD parameter shapes disagree".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(DescriptorError::InvalidArgument("temperature must be > 0".into()));
        }
        let all = self.centers.iter().chain(&self.assignment_weights).chain(&self.assignment_bias);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(DescriptorError::NonFinite);
        }
        Ok(())
    }

    /// Soft-assignment initialised from centers: `w_k = 2 c_k`,
    /// `b_k = -|c_k|^2`, so `z_ik = -(|d_i - c_k|^2 - |d_i|^2) / T`.
    pub fn from_centers(centers: Vec<f64>, clusters: usize, dim: usize, temperature: f64) -> Result<Self, DescriptorError> {
        if centers.len() != clusters * dim {
            return Err(DescriptorError::InvalidArgument("centers must be K x C".into()));
        }
        let assignment_weights = centers.iter().map(|c| 2.0 * c).collect();
        let assignment_bias = centers
            .chunks_exact(dim)
            .map(|c| -c.iter().map(|v| v * v).sum::<f64>())
            .collect();
        let p = Self {
            clusters,
            dim,
            centers,
            assignment_weights,
            assignment_bias,
            temperature,
        };
        p.validate()?;
        Ok(p)
    }

    /// k-means++ seeding followed by Lloyd iterations on `sample`.
    pub fn from_kmeans(
        sample: &[&[f64]],
        clusters: usize,
        temperature: f64,
        iterations: usize,
        seed: u64,
    ) -> Result<Self, DescriptorError> {
        let dim = sample.first().map(|r| r.len()).ok_or(DescriptorError::EmptyDescriptors)?;
        if sample.iter().any(|r| r.len() != dim) {
            return Err(DescriptorError::DimensionMismatch {
                expected: dim,
                actual: sample.iter().map(|r| r.len()).find(|&l| l != dim).unwrap_or(dim),
            });
        }
        let centers = kmeans(sample, clusters, iterations, seed)?;
        Self::from_centers(centers, clusters, dim, temperature)
    }

    pub fn center(&self, k: usize) -> &[f64] {
        &self.centers[k * self.dim..(k + 1) * self.dim]
    }

    pub fn apply_step(&mut self, grads: &NetVladGradients, lr: f64) {
        for (p, g) in self.centers.iter_mut().zip(&grads.centers) {
            *p -= lr * g;
        }
        for (p, g) in self.assignment_weights.iter_mut().zip(&grads.assignment_weights) {
            *p -= lr * g;
        }
        for (p, g) in self.assignment_bias.iter_mut().zip(&grads.assignment_bias) {
            *p -= lr * g;
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans(sample: &[&[f64]], k: usize, iterations: usize, seed: u64) -> Result<Vec<f64>, DescriptorError> {
    if sample.is_empty() {
        return Err(DescriptorError::EmptyDescriptors);
    }
    if k == 0 {
        return Err(DescriptorError::InvalidArgument("cluster count must be >= 1".into()));
    }
    let dim = sample[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = vec![sample.choose(&mut rng).expect("non-empty").to_vec()];
    while centers.len() < k {
        let d2: Vec<f64> = sample
            .iter()
            .map(|s| centers.iter().map(|c| sq_dist(s, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = sample.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..sample.len())
        };
        centers.push(sample[next].to_vec());
    }
    let mut assign = vec![usize::MAX; sample.len()];
    for _ in 0..iterations {
        let mut changed = false;
        for (i, s) in sample.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(s, &centers[a]).total_cmp(&sq_dist(s, &centers[b])))
                .expect("k >= 1");
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (s, &a) in sample.iter().zip(&assign) {
            counts[a] += 1;
            for (acc, v) in sums[a].iter_mut().zip(s.iter()) {
                *acc += v;
            }
        }
        for c in 0..k {
            // Empty clusters keep their previous center.
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|v| v / counts[c] as f64).collect();
            }
        }
    }
    Ok(centers.concat())
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct SetForward {
    /// `n x K` soft assignments.
    assign: Vec<f64>,
    /// `n x K` logits.
    logits: Vec<f64>,
    row_norms: Vec<f64>,
    /// `K x C` intra-normalised rows.
    intra: Vec<f64>,
    total_norm: f64,
    pub(crate) output: Vec<f64>,
}

fn check_set(desc: &LocalDescriptorSet, params: &NetVladParams) -> Result<(), DescriptorError> {
    if desc.is_empty() {
        return Err(DescriptorError::EmptyDescriptors);
    }
    if desc.dim != params.dim {
        return Err(DescriptorError::DimensionMismatch {
            expected: params.dim,
            actual: desc.dim,
        });
    }
    Ok(())
}

pub(crate) fn forward_set(desc: &LocalDescriptorSet, params: &NetVladParams) -> Result<SetForward, DescriptorError> {
    check_set(desc, params)?;
    let (k_count, dim, n) = (params.clusters, params.dim, desc.len());
    let mut logits = vec![0.0; n * k_count];
    let mut assign = vec![0.0; n * k_count];
    for (i, d) in desc.rows().enumerate() {
        let z = &mut logits[i * k_count..(i + 1) * k_count];
        for k in 0..k_count {
            let w = &params.assignment_weights[k * dim..(k + 1) * dim];
            let dot: f64 = w.iter().zip(d).map(|(a, b)| a * b).sum();
            z[k] = (dot + params.assignment_bias[k]) / params.temperature;
        }
        let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let a = &mut assign[i * k_count..(i + 1) * k_count];
        let mut sum = 0.0;
        for k in 0..k_count {
            a[k] = (z[k] - zmax).exp();
            sum += a[k];
        }
        a.iter_mut().for_each(|v| *v /= sum);
    }
    let mut vlad = vec![0.0; k_count * dim];
    for (i, d) in desc.rows().enumerate() {
        for k in 0..k_count {
            let a = assign[i * k_count + k];
            let c = params.center(k);
            let row = &mut vlad[k * dim..(k + 1) * dim];
            for j in 0..dim {
                row[j] += a * (d[j] - c[j]);
            }
        }
    }
    let mut intra = vlad.clone();
    let mut row_norms = vec![0.0; k_count];
    for k in 0..k_count {
        let row = &mut intra[k * dim..(k + 1) * dim];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row_norms[k] = norm;
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    let total_norm = intra.iter().map(|v| v * v).sum::<f64>().sqrt();
    let output = if total_norm > 0.0 {
        intra.iter().map(|v| v / total_norm).collect()
    } else {
        vec![0.0; intra.len()]
    };
    Ok(SetForward {
        assign,
        logits,
        row_norms,
        intra,
        total_norm,
        output,
    })
}

pub fn netvlad_forward(desc: &LocalDescriptorSet, params: &NetVladParams) -> Result<GlobalDescriptor, DescriptorError> {
    let fwd = forward_set(desc, params)?;
    Ok(GlobalDescriptor {
        degenerate: fwd.total_norm == 0.0,
        values: fwd.output,
    })
}

/// Gradient of the loss with respect to the pre-normalisation residual
/// sums `V`, given the gradient with respect to the output descriptor.
pub(crate) fn backprop_to_vlad(fwd: &SetForward, dim: usize, grad_out: &[f64]) -> Vec<f64> {
    let norm = fwd.total_norm;
    // g = u / |u|  =>  dL/du = (dL/dg - g (g . dL/dg)) / |u|
    let proj: f64 = fwd.output.iter().zip(grad_out).map(|(g, d)| g * d).sum();
    let grad_intra: Vec<f64> = fwd
        .output
        .iter()
        .zip(grad_out)
        .map(|(g, d)| (d - g * proj) / norm)
        .collect();
    let k_count = fwd.row_norms.len();
    let mut grad_vlad = vec![0.0; k_count * dim];
    for k in 0..k_count {
        let rn = fwd.row_norms[k];
        if rn == 0.0 {
            continue;
        }
        let u = &fwd.intra[k * dim..(k + 1) * dim];
        let gu = &grad_intra[k * dim..(k + 1) * dim];
        let p: f64 = u.iter().zip(gu).map(|(a, b)| a * b).sum();
        for j in 0..dim {
            grad_vlad[k * dim + j] = (gu[j] - u[j] * p) / rn;
        }
    }
    grad_vlad
}

/// Parameter gradients given `dL/dV`.
pub(crate) fn backprop_from_vlad(
    desc: &LocalDescriptorSet,
    params: &NetVladParams,
    fwd: &SetForward,
    grad_vlad: &[f64],
) -> NetVladGradients {
    let (k_count, dim) = (params.clusters, params.dim);
    let mut grads = NetVladGradients::zeros(params);
    let t = params.temperature;
    for (i, d) in desc.rows().enumerate() {
        let a = &fwd.assign[i * k_count..(i + 1) * k_count];
        let z = &fwd.logits[i * k_count..(i + 1) * k_count];
        // dL/da_ik = (d_i - c_k) . dL/dV_k
        let mut e = vec![0.0; k_count];
        for k in 0..k_count {
            let c = params.center(k);
            let gv = &grad_vlad[k * dim..(k + 1) * dim];
            e[k] = (0..dim).map(|j| (d[j] - c[j]) * gv[j]).sum();
            for j in 0..dim {
                grads.centers[k * dim + j] -= a[k] * gv[j];
            }
        }
        let mean_e: f64 = a.iter().zip(&e).map(|(x, y)| x * y).sum();
        for k in 0..k_count {
            let gz = a[k] * (e[k] - mean_e);
            for j in 0..dim {
                grads.assignment_weights[k * dim + j] += gz * d[j] / t;
            }
            grads.assignment_bias[k] += gz / t;
            grads.temperature -= gz * z[k] / t;
        }
    }
    grads
}

fn cosine_distance_grad(u: &[f64], v: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let cos = dot / (nu * nv);
    // d = 1 - cos; dcos/du = v/(|u||v|) - cos * u/|u|^2
    let gu = u.iter().zip(v).map(|(a, b)| -(b / (nu * nv) - cos * a / (nu * nu))).collect();
    let gv = u.iter().zip(v).map(|(a, b)| -(a / (nu * nv) - cos * b / (nv * nv))).collect();
    (1.0 - cos, gu, gv)
}

/// Triplet loss on one batch and its exact gradient with respect to every
/// parameter. An inactive hinge yields an all-zero gradient.
pub fn netvlad_gradients(
    batch: &TripletBatch,
    params: &NetVladParams,
    delta: f64,
) -> Result<(f64, NetVladGradients), DescriptorError> {
    params.validate()?;
    let fa = forward_set(&batch.anchor, params)?;
    let fp = forward_set(&batch.positive, params)?;
    let fn_ = forward_set(&batch.negative, params)?;
    if [&fa, &fp, &fn_].iter().any(|f| f.total_norm == 0.0) {
        return Err(DescriptorError::Degenerate);
    }
    let (dp, gap_a, gap_p) = cosine_distance_grad(&fa.output, &fp.output);
    let (dn, gan_a, gan_n) = cosine_distance_grad(&fa.output, &fn_.output);
    let loss = dp - dn + delta;
    if loss <= 0.0 {
        return Ok((0.0, NetVladGradients::zeros(params)));
    }
    let grad_a: Vec<f64> = gap_a.iter().zip(&gan_a).map(|(x, y)| x - y).collect();
    let grad_n: Vec<f64> = gan_n.iter().map(|v| -v).collect();
    let mut total = NetVladGradients::zeros(params);
    for (desc, fwd, g) in [
        (&batch.anchor, &fa, grad_a),
        (&batch.positive, &fp, gap_p),
        (&batch.negative, &fn_, grad_n),
    ] {
        let gv = backprop_to_vlad(fwd, params.dim, &g);
        total.accumulate(&backprop_from_vlad(desc, params, fwd, &gv));
    }
    Ok((loss, total))
}

/// Loss only; used by finite-difference checks and evaluation.
pub fn batch_loss(batch: &TripletBatch, params: &NetVladParams, delta: f64) -> Result<f64, DescriptorError> {
    let a = netvlad_forward(&batch.anchor, params)?;
    let p = netvlad_forward(&batch.positive, params)?;
    let n = netvlad_forward(&batch.negative, params)?;
    if a.degenerate || p.degenerate || n.degenerate {
        return Err(DescriptorError::Degenerate);
    }
    super::triplet_loss(&a.values, &p.values, &n.values, delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_set(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> LocalDescriptorSet {
        LocalDescriptorSet {
            dim,
            data: (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn random_params(rng: &mut ChaCha8Rng, k: usize, dim: usize) -> NetVladParams {
        NetVladParams {
            clusters: k,
            dim,
            centers: (0..k * dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
            assignment_weights: (0..k * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            assignment_bias: (0..k).map(|_| rng.random_range(-0.5..0.5)).collect(),
            temperature: rng.random_range(0.5..1.5),
        }
    }

    #[test]
    fn single_cluster_is_normalized_residual_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let desc = random_set(&mut rng, 5, 3);
        let params = random_params(&mut rng, 1, 3);
        let g = netvlad_forward(&desc, &params).unwrap();
        // brute force: sum of residuals, normalised
        let mut s = [0.0f64; 3];
        for i in 0..5 {
            for j in 0..3 {
                s[j] += desc.data[i * 3 + j] - params.centers[j];
            }
        }
        let n = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt();
        for j in 0..3 {
            assert!((g.values[j] - s[j] / n).abs() < 1e-12);
        }
    }

    #[test]
    fn descriptors_at_center_are_degenerate() {
        let params = NetVladParams::from_centers(vec![0.3, -0.2], 1, 2, 1.0).unwrap();
        let desc = LocalDescriptorSet::from_rows(2, &[vec![0.3, -0.2], vec![0.3, -0.2]]);
        let g = netvlad_forward(&desc, &params).unwrap();
        assert!(g.degenerate);
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_is_unit_norm_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let desc = random_set(&mut rng, 12, 4);
            let params = random_params(&mut rng, 3, 4);
            let g = netvlad_forward(&desc, &params).unwrap();
            let norm = g.values.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            let mut rows: Vec<Vec<f64>> = desc.rows().map(|r| r.to_vec()).collect();
            rows.reverse();
            rows.swap(0, 5);
            let shuffled = LocalDescriptorSet::from_rows(4, &rows);
            let h = netvlad_forward(&shuffled, &params).unwrap();
            for (a, b) in g.values.iter().zip(&h.values) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let params = NetVladParams::from_centers(vec![0.0; 6], 2, 3, 1.0).unwrap();
        let empty = LocalDescriptorSet { dim: 3, data: vec![] };
        assert!(matches!(netvlad_forward(&empty, &params), Err(DescriptorError::EmptyDescriptors)));
        let wrong = LocalDescriptorSet::from_rows(2, &[vec![1.0, 2.0]]);
        assert!(matches!(netvlad_forward(&wrong, &params), Err(DescriptorError::DimensionMismatch { .. })));
    }

    #[test]
    fn inactive_hinge_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = random_params(&mut rng, 2, 4);
        let anchor = random_set(&mut rng, 3, 4);
        let negative = random_set(&mut rng, 3, 4);
        let batch = TripletBatch {
            positive: anchor.clone(),
            anchor,
            negative,
        };
        // d(a,p) = 0 and delta = 0: loss is max(0, -d(a,n)) = 0.
        let (loss, g) = netvlad_gradients(&batch, &params, 0.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.centers.iter().chain(&g.assignment_weights).chain(&g.assignment_bias).all(|&v| v == 0.0));
        assert_eq!(g.temperature, 0.0);
    }

    #[test]
    fn duplicate_descriptor_doubles_its_center_contribution() {
        // K = 1: dL/dc = -sum_i a_i dL/dV with a_i = 1, so each descriptor
        // adds exactly -dL/dV before the normalisation terms couple them.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = random_params(&mut rng, 1, 4);
        let base = random_set(&mut rng, 3, 4);
        let mut rows: Vec<Vec<f64>> = base.rows().map(|r| r.to_vec()).collect();
        rows.push(rows[0].clone());
        let dup = LocalDescriptorSet::from_rows(4, &rows);
        let upstream = [0.3, -1.2, 0.7, 0.05];
        let f1 = forward_set(&base, &params).unwrap();
        let f2 = forward_set(&dup, &params).unwrap();
        let g1 = backprop_from_vlad(&base, &params, &f1, &upstream);
        let g2 = backprop_from_vlad(&dup, &params, &f2, &upstream);
        for j in 0..4 {
            assert!((g1.centers[j] + 3.0 * upstream[j]).abs() < 1e-12);
            assert!((g2.centers[j] - g1.centers[j] + upstream[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_finds_separated_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rows = Vec::new();
        for c in [[-5.0, -5.0], [5.0, 5.0]] {
            for _ in 0..50 {
                rows.push(vec![c[0] + rng.random_range(-0.1..0.1), c[1] + rng.random_range(-0.1..0.1)]);
            }
        }
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let p = NetVladParams::from_kmeans(&refs, 2, 1.0, 20, 3).unwrap();
        let mut cs: Vec<f64> = (0..2).map(|k| p.center(k)[0]).collect();
        cs.sort_by(f64::total_cmp);
        assert!((cs[0] + 5.0).abs() < 0.1 && (cs[1] - 5.0).abs() < 0.1);
        assert_eq!(p.assignment_bias[0], -p.center(0).iter().map(|v| v * v).sum::<f64>());
    }
}
