use super::{MatchSet, RegistrationError};
use crate::keypoints::LocalDescriptorSet;

fn norms(set: &LocalDescriptorSet) -> Vec<f64> {
    set.rows().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

/// Mutual nearest neighbours under cosine distance, kept only when the
/// best/second-best ratio passes `ratio`. Zero-norm descriptors never match.
pub fn match_descriptors(
    src: &LocalDescriptorSet,
    dst: &LocalDescriptorSet,
    ratio: f64,
) -> Result<MatchSet, RegistrationError> {
    if src.is_empty() || dst.is_empty() {
        return Err(RegistrationError::EmptyDescriptors);
    }
    if src.dim != dst.dim {
        return Err(RegistrationError::InvalidArgument("descriptor dimensions differ".into()));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(RegistrationError::InvalidArgument("ratio must lie in (0, 1]".into()));
    }
    let (ns, nd) = (norms(src), norms(dst));
    if ns.iter().all(|&n| n == 0.0) || nd.iter().all(|&n| n == 0.0) {
        return Err(RegistrationError::AllDescriptorsDegenerate);
    }
    let (m, n) = (src.len(), dst.len());
    let mut dist = vec![f64::INFINITY; m * n];
    for i in 0..m {
        if ns[i] == 0.0 {
            continue;
        }
        let a = src.row(i);
        for j in 0..n {
            if nd[j] == 0.0 {
                continue;
            }
            let dot: f64 = a.iter().zip(dst.row(j)).map(|(x, y)| x * y).sum();
            dist[i * n + j] = (1.0 - dot / (ns[i] * nd[j])).clamp(0.0, 2.0);
        }
    }
    // Best column per row (lowest index on ties) and the runner-up distance.
    let mut best_dst = vec![(usize::MAX, f64::INFINITY, f64::INFINITY); m];
    for i in 0..m {
        let (mut bj, mut b1, mut b2) = (usize::MAX, f64::INFINITY, f64::INFINITY);
        for j in 0..n {
            let d = dist[i * n + j];
            if d < b1 {
                b2 = b1;
                b1 = d;
                bj = j;
            } else if d < b2 {
                b2 = d;
            }
        }
        best_dst[i] = (bj, b1, b2);
    }
    let mut best_src = vec![usize::MAX; n];
    for j in 0..n {
        let mut bd = f64::INFINITY;
        for i in 0..m {
            if dist[i * n + j] < bd {
                bd = dist[i * n + j];
                best_src[j] = i;
            }
        }
    }
    let mut out = MatchSet::default();
    for (i, &(j, b1, b2)) in best_dst.iter().enumerate() {
        if j == usize::MAX || best_src[j] != i {
            continue;
        }
        let passes = if b2.is_infinite() {
            true
        } else if b2 == 0.0 {
            false
        } else {
            b1 / b2 <= ratio
        };
        if passes {
            out.pairs.push((i, j));
            out.distances.push(b1);
        }
    }
    Ok(out)
}
