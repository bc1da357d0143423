use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::network::Network;

use super::TrainingConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryPoint {
    pub iteration: usize,
    pub loss: f64,
    pub avg_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub iteration: usize,
    pub last_loss: f64,
    /// NaN until the first accepted step.
    pub avg_loss: f64,
    pub current_lr: f64,
    pub history: Vec<HistoryPoint>,
    pub backoffs: usize,
    /// Iterations at which divergence was detected.
    pub divergences: Vec<usize>,
}

impl TrainingState {
    pub fn new(learning_rate: f64) -> Self {
        TrainingState {
            iteration: 0,
            last_loss: f64::NAN,
            avg_loss: f64::NAN,
            current_lr: learning_rate,
            history: Vec::new(),
            backoffs: 0,
            divergences: Vec::new(),
        }
    }

    /// Folds an accepted loss into the average; the first one initializes it.
    /// Non-finite losses are ignored.
    pub fn record(&mut self, loss: f64, ema_factor: f64) {
        if !loss.is_finite() {
            return;
        }
        self.last_loss = loss;
        self.avg_loss = if self.avg_loss.is_finite() {
            update_avg_loss(self.avg_loss, loss, ema_factor)
        } else {
            loss
        };
        self.history.push(HistoryPoint {
            iteration: self.iteration,
            loss,
            avg_loss: self.avg_loss,
        });
    }

    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "iteration={}\nlast_loss={}\navg_loss={}\ncurrent_lr={}\nbackoffs={}\n",
            self.iteration, self.last_loss, self.avg_loss, self.current_lr, self.backoffs
        )
    }
}

/// `ema·avg + (1 − ema)·loss`.
pub fn update_avg_loss(avg: f64, loss: f64, ema_factor: f64) -> f64 {
    ema_factor * avg + (1.0 - ema_factor) * loss
}

pub fn should_stop(state: &TrainingState, cfg: &TrainingConfig) -> bool {
    cfg.stop_on_loss && state.iteration >= cfg.warmup_iterations && state.avg_loss < cfg.loss_stop_threshold
}

/// Non-finite loss, or loss above `divergence_ratio · avg_loss`.
pub fn detect_divergence(state: &TrainingState, loss: f64, cfg: &TrainingConfig) -> bool {
    !loss.is_finite() || (state.avg_loss.is_finite() && loss > cfg.divergence_ratio * state.avg_loss)
}

/// Weights and loss average at some iteration.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub iteration: usize,
    pub network: Network,
    pub avg_loss: f64,
}

impl Snapshot {
    pub fn take(network: &Network, state: &TrainingState) -> Self {
        Snapshot {
            iteration: state.iteration,
            network: network.clone(),
            avg_loss: state.avg_loss,
        }
    }
}

/// Scales the learning rate by `lr_backoff_factor`, restores weights and
/// loss average from `snapshot` and clears momentum. The iteration counter
/// keeps running. Fails once `max_backoffs` is reached or without a
/// snapshot.
pub fn backoff_and_restore(
    state: &mut TrainingState,
    network: &mut Network,
    snapshot: Option<&Snapshot>,
    cfg: &TrainingConfig,
) -> Result<()> {
    state.backoffs += 1;
    if state.backoffs >= cfg.max_backoffs {
        return Err(Error::Diverged(format!(
            "divergence #{} at iteration {} (loss {}, average {}); recovery budget of {} exhausted",
            state.backoffs, state.iteration, state.last_loss, state.avg_loss, cfg.max_backoffs
        )));
    }
    let Some(snap) = snapshot else {
        return Err(Error::Diverged(format!(
            "divergence at iteration {} with no snapshot to restore",
            state.iteration
        )));
    };
    state.current_lr *= cfg.lr_backoff_factor;
    let exec = network.exec();
    *network = snap.network.clone();
    network.set_exec(exec);
    network.reset_momentum();
    network.zero_grad();
    state.avg_loss = snap.avg_loss;
    log::warn!(
        "restored weights from iteration {}, learning rate now {:e}",
        snap.iteration,
        state.current_lr
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub iteration: usize,
    pub path: PathBuf,
    pub validation_ap: Option<f64>,
}

/// The checkpoint right before the first strict drop in validation AP, or
/// the last one if AP never drops.
pub fn select_best_checkpoint(checkpoints: &[CheckpointRecord]) -> Result<&CheckpointRecord> {
    if checkpoints.is_empty() {
        return Err(Error::config("no checkpoints to select from"));
    }
    let aps: Vec<f64> = checkpoints
        .iter()
        .map(|c| {
            c.validation_ap
                .ok_or_else(|| Error::config(format!("checkpoint {} has no validation AP", c.iteration)))
        })
        .collect::<Result<_>>()?;
    if !checkpoints.windows(2).all(|w| w[0].iteration < w[1].iteration) {
        return Err(Error::config("checkpoints must be in iteration order"));
    }
    let drop = aps.windows(2).position(|w| w[1] < w[0]);
    Ok(&checkpoints[drop.unwrap_or(checkpoints.len() - 1)])
}
