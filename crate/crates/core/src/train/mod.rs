//! The fine-tuning loop: batches, loss monitoring, stopping, checkpoints and
//! divergence recovery.

mod config;
mod monitor;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{choose_input_dim, compose_batch, BatchOptions, Dataset};
use crate::error::{Error, Result};
use crate::network::region::{assign_truths, region_loss_weighted, GridShape};
use crate::network::Network;
use crate::tensor::{Sgd, Tensor};
use crate::transfer::save_weights;

pub use config::{LrSpike, TrainingConfig};
pub use monitor::{
    backoff_and_restore, detect_divergence, select_best_checkpoint, should_stop, update_avg_loss,
    CheckpointRecord, HistoryPoint, Snapshot, TrainingState,
};

/// Why a run ended normally.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    /// Average loss fell below the stop threshold after warm-up.
    LossThreshold,
    IterationBudget,
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub state: TrainingState,
    pub checkpoints: Vec<CheckpointRecord>,
    pub stop: StopReason,
}

/// Weights at the end of a run, kept apart from the scheduled checkpoints.
pub const FINAL_WEIGHTS: &str = "final.ylw";

pub fn checkpoint_name(iteration: usize) -> String {
    format!("model_{iteration}.ylw")
}

/// Mean per-image loss of a batch and its gradient w.r.t. the raw output.
pub fn batch_loss(network: &Network, raw: &Tensor, truths: &[Vec<crate::data::BoxAnnotation>], cfg: &TrainingConfig) -> Result<(f64, Tensor)> {
    let [n, channels, gh, gw] = *raw.shape() else {
        return Err(Error::config("network output must be 4-d"));
    };
    let head = network.head();
    let grid = GridShape::for_head(head, gw, gh);
    let per = raw.len() / n;
    let parts = network.exec().map(n, |s| -> Result<(f32, Tensor)> {
        let sample = Tensor::from_vec(&[channels, gh, gw], raw.outer(s).to_vec())?;
        let assignments = assign_truths(&truths[s], head, &grid)?;
        region_loss_weighted(&sample, &assignments, head, &cfg.loss_weights)
    });
    let scale = 1.0 / n as f32;
    let mut total = 0.0f64;
    let mut grad = Vec::with_capacity(n * per);
    for p in parts {
        let (loss, g) = p?;
        total += loss as f64;
        grad.extend(g.data().iter().map(|v| v * scale));
    }
    Ok((total / n as f64, Tensor::from_vec(raw.shape(), grad)?))
}

/// Runs the loop described by `cfg` on `network`.
///
/// Each iteration composes an augmented batch (the input size is redrawn
/// every `multiscale_interval` iterations), computes the mean region loss,
/// back-propagates and takes an SGD step. A diverging loss skips the step
/// and triggers [`backoff_and_restore`]. Checkpoints go to `out_dir` when
/// given, together with `loss.csv`.
pub fn train(network: &mut Network, dataset: &Dataset, cfg: &TrainingConfig, out_dir: Option<&Path>) -> Result<TrainingOutcome> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = TrainingState::new(cfg.learning_rate);
    let mut checkpoints = Vec::new();
    let base = network.config().input_width;
    let stride = network.config().total_stride();
    let mut dim = base;
    let mut good: Option<Snapshot> = Some(Snapshot::take(network, &state));
    let mut pending: Option<Snapshot> = None;
    let mut spike_active = cfg.lr_spike.is_some();
    let mut stop = StopReason::IterationBudget;

    let result = (|| -> Result<()> {
        while state.iteration < cfg.max_iterations {
            if state.iteration.is_multiple_of(cfg.multiscale_interval) {
                dim = choose_input_dim(base, cfg.augmentation.scale_jitter, stride, &mut rng);
            }
            let options = BatchOptions {
                batch_size: cfg.batch_size,
                hard_negative_cap: cfg.hard_negative_cap,
                input_dim: dim,
            };
            if let Some(&(_, factor)) = cfg.lr_steps.iter().find(|s| s.0 == state.iteration + 1) {
                state.current_lr *= factor;
            }
            let batch = compose_batch(dataset, &options, &cfg.augmentation, &mut rng, network.exec())?;
            let (raw, trace) = network.forward_train(&batch.images)?;
            let (loss, dout) = batch_loss(network, &raw, &batch.truths, cfg)?;
            state.iteration += 1;

            let mut diverged = detect_divergence(&state, loss, cfg);
            if !diverged {
                network.backward(&trace, &dout)?;
                let mut lr = state.current_lr;
                if let Some(spike) = cfg.lr_spike.filter(|_| spike_active) {
                    lr *= spike.multiplier(state.iteration);
                }
                let sgd = Sgd {
                    learning_rate: lr,
                    momentum: cfg.momentum,
                    weight_decay: cfg.weight_decay,
                };
                diverged = sgd.step(&mut network.params_mut()).is_err();
            }
            if diverged {
                state.last_loss = loss;
                state.divergences.push(state.iteration);
                log::warn!(
                    "iteration {}: loss {loss} diverged from average {}; backing off",
                    state.iteration,
                    state.avg_loss
                );
                spike_active = false;
                pending = None;
                backoff_and_restore(&mut state, network, good.as_ref(), cfg)?;
                continue;
            }
            state.record(loss, cfg.ema_factor);

            if cfg.checkpoint_iterations.contains(&state.iteration) {
                checkpoints.push(write_checkpoint(network, state.iteration, out_dir)?);
            }
            if state.iteration.is_multiple_of(cfg.snapshot_interval) {
                // a snapshot is trusted only after surviving a full interval
                good = pending.take().or(good.take());
                pending = Some(Snapshot::take(network, &state));
            }
            if state.iteration.is_multiple_of(100) {
                log::info!(
                    "iteration {} loss {:.4} avg {:.4} lr {:e}",
                    state.iteration,
                    loss,
                    state.avg_loss,
                    state.current_lr
                );
            }
            if should_stop(&state, cfg) {
                stop = StopReason::LossThreshold;
                break;
            }
        }
        Ok(())
    })();

    if let Some(dir) = out_dir {
        write_loss_csv(&state.history, &dir.join("loss.csv"))?;
    }
    result?;
    if let Some(dir) = out_dir {
        save_weights(network, dir.join(FINAL_WEIGHTS))?;
    }
    Ok(TrainingOutcome {
        state,
        checkpoints,
        stop,
    })
}

fn write_checkpoint(network: &Network, iteration: usize, out_dir: Option<&Path>) -> Result<CheckpointRecord> {
    let path = match out_dir {
        Some(dir) => {
            let p = dir.join(checkpoint_name(iteration));
            save_weights(network, &p)?;
            p
        }
        None => PathBuf::new(),
    };
    Ok(CheckpointRecord {
        iteration,
        path,
        validation_ap: None,
    })
}

/// `iteration,loss,avg_loss` rows.
pub fn loss_csv(history: &[HistoryPoint]) -> String {
    let mut s = String::from("iteration,loss,avg_loss\n");
    for h in history {
        let _ = writeln!(s, "{},{},{}", h.iteration, h.loss, h.avg_loss);
    }
    s
}

pub fn write_loss_csv(history: &[HistoryPoint], path: &Path) -> Result<()> {
    std::fs::write(path, loss_csv(history)).map_err(|e| Error::io(path, e))
}
