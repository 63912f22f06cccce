//! Shared minibatch loop: shuffling, FGM passes, gradient accumulation and
//! optimiser updates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fgm::{adversarial_step, FgmConfig};
use crate::nn::{Adam, Grads, NnError, NodeId, ParamStore, Tape, TrainStep};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub step: TrainStep,
    pub fgm: Option<FgmConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub updates: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    /// Item indices in the order the first epoch batched them.
    pub first_epoch_items: Vec<usize>,
    pub updates: usize,
}

/// Derives a sub-seed from a base seed and a path of counters.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for p in path {
        h.update(p.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Trains `store` on `n_items` items for `cfg.epochs` epochs. `batch_loss`
/// builds the (mean) loss of a batch of item indices on the given tape.
/// `after_epoch` sees the parameters after each epoch and may stop training
/// early by returning `false`.
pub fn run_epochs<F, E>(
    store: &mut ParamStore,
    n_items: usize,
    cfg: &LoopConfig,
    batch_loss: F,
    mut after_epoch: E,
) -> Result<TrainLog, NnError>
where
    F: Fn(&mut Tape, &[usize]) -> Result<NodeId, NnError>,
    E: FnMut(&EpochStats, &ParamStore) -> bool,
{
    cfg.step.validate()?;
    if cfg.batch_size == 0 {
        return Err(NnError::InvalidConfig("train_batch_size must be at least 1".into()));
    }
    if let Some(f) = &cfg.fgm {
        f.validate()?;
    }
    let mut adam = Adam::new(store);
    let mut grads = Grads::zeros_like(store);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.step.seed);
    let acc = cfg.step.accumulation_steps;
    let mut pending = 0usize;
    let mut batch_counter = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut updates = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if epoch == 0 {
                log.first_epoch_items.extend_from_slice(batch);
            }
            let seed = derive_seed(cfg.step.seed, &[epoch as u64, batches as u64]);
            let fgm = cfg.fgm.as_ref().filter(|f| f.active_at(batch_counter));
            let report = adversarial_step(store, &mut grads, fgm, cfg.step.dropout, seed, |tape| {
                batch_loss(tape, batch)
            })?;
            let loss = report.loss();
            if !loss.is_finite() {
                return Err(NnError::NonFiniteLoss(loss));
            }
            loss_sum += loss;
            batches += 1;
            batch_counter += 1;
            pending += 1;
            if pending == acc {
                grads.scale(1.0 / acc as f64);
                adam.step(store, &mut grads, &cfg.step)?;
                grads.zero();
                pending = 0;
                updates += 1;
            }
        }
        if pending > 0 {
            grads.scale(1.0 / pending as f64);
            adam.step(store, &mut grads, &cfg.step)?;
            grads.zero();
            pending = 0;
            updates += 1;
        }
        log.updates += updates;
        let stats = EpochStats {
            epoch,
            mean_loss: if batches > 0 { loss_sum / batches as f64 } else { 0.0 },
            updates,
        };
        log::debug!("epoch {epoch}: loss {:.4}", stats.mean_loss);
        let go_on = after_epoch(&stats, store);
        log.epochs.push(stats);
        if !go_on {
            break;
        }
    }
    Ok(log)
}
