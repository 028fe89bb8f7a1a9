use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{netvlad_gradients, DescriptorError, NetVladParams, TripletBatch};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcome {
    pub params: NetVladParams,
    /// Mean triplet loss per epoch, measured before each update.
    pub loss_trace: Vec<f64>,
    /// Batches skipped because a descriptor collapsed to zero.
    pub skipped: usize,
}

/// Plain per-triplet gradient descent; the visiting order is reshuffled
/// every epoch from `seed`. The softmax temperature is held fixed.
pub fn train_netvlad(
    triplets: &[TripletBatch],
    params0: &NetVladParams,
    lr: f64,
    epochs: usize,
    delta: f64,
    seed: u64,
) -> Result<TrainingOutcome, DescriptorError> {
    if epochs == 0 {
        return Err(DescriptorError::InvalidArgument("epochs must be >= 1".into()));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(DescriptorError::InvalidArgument("learning rate must be finite and >= 0".into()));
    }
    if triplets.is_empty() {
        return Err(DescriptorError::InvalidArgument("no triplets to train on".into()));
    }
    params0.validate()?;
    let mut params = params0.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let mut trace = Vec::with_capacity(epochs);
    let mut skipped = 0;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut used) = (0.0, 0usize);
        for &i in &order {
            match netvlad_gradients(&triplets[i], &params, delta) {
                Ok((loss, grads)) => {
                    sum += loss;
                    used += 1;
                    params.apply_step(&grads, lr);
                }
                Err(DescriptorError::Degenerate) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        if used == 0 {
            return Err(DescriptorError::AllBatchesDegenerate);
        }
        trace.push(sum / used as f64);
    }
    Ok(TrainingOutcome {
        params,
        loss_trace: trace,
        skipped,
    })
}
