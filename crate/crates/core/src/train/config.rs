use crate::data::AugmentationConfig;
use crate::error::{Error, Result};
use crate::network::region::LossWeights;

/// Temporarily multiplies the learning rate, for exercising the divergence
/// guard. A backoff cancels it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSpike {
    /// First iteration (1-based) at which the spike applies.
    pub start: usize,
    pub duration: usize,
    pub factor: f64,
}

impl LrSpike {
    pub fn multiplier(&self, iteration: usize) -> f64 {
        if iteration >= self.start && iteration < self.start + self.duration {
            self.factor
        } else {
            1.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub max_iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Stop once the average loss is below this (after warm-up).
    pub loss_stop_threshold: f64,
    pub stop_on_loss: bool,
    pub warmup_iterations: usize,
    pub ema_factor: f64,
    pub checkpoint_iterations: Vec<usize>,
    /// A loss above `ratio · avg_loss` counts as divergence.
    pub divergence_ratio: f64,
    pub lr_backoff_factor: f64,
    /// The run aborts on the divergence that uses up this many backoffs.
    pub max_backoffs: usize,
    /// Weight snapshots for recovery are taken this often.
    pub snapshot_interval: usize,
    pub hard_negative_cap: f64,
    /// The input size is redrawn this often.
    pub multiscale_interval: usize,
    pub augmentation: AugmentationConfig,
    pub loss_weights: LossWeights,
    pub lr_spike: Option<LrSpike>,
    /// `(iteration, factor)`: the learning rate is multiplied by `factor`
    /// from that iteration on. Empty means a constant rate.
    pub lr_steps: Vec<(usize, f64)>,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 64,
            max_iterations: 30_000,
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            loss_stop_threshold: 0.5,
            stop_on_loss: true,
            warmup_iterations: 1000,
            ema_factor: 0.9,
            checkpoint_iterations: vec![1000, 5000, 10_000, 15_000, 20_000, 25_000, 30_000],
            divergence_ratio: 10.0,
            lr_backoff_factor: 0.5,
            max_backoffs: 3,
            snapshot_interval: 100,
            hard_negative_cap: 0.25,
            multiscale_interval: 10,
            augmentation: AugmentationConfig::default(),
            loss_weights: LossWeights::default(),
            lr_spike: None,
            lr_steps: Vec::new(),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !self.checkpoint_iterations.windows(2).all(|w| w[0] < w[1]) {
            return bad("checkpoint iterations must be strictly increasing");
        }
        if !self.lr_steps.windows(2).all(|w| w[0].0 < w[1].0) || self.lr_steps.iter().any(|s| s.1.is_nan() || s.1 <= 0.0) {
            return bad("lr steps must have increasing iterations and positive factors");
        }
        if self.checkpoint_iterations.first() == Some(&0) {
            return bad("checkpoint iterations must be positive");
        }
        let positive = [
            self.learning_rate >= 0.0,
            self.loss_stop_threshold > 0.0,
            self.divergence_ratio > 0.0,
            self.lr_backoff_factor > 0.0 && self.lr_backoff_factor < 1.0,
            self.ema_factor >= 0.0 && self.ema_factor < 1.0,
            self.multiscale_interval > 0,
            self.snapshot_interval > 0,
            self.max_backoffs > 0,
        ];
        if !positive.iter().all(|&ok| ok) {
            return bad("learning rate, thresholds, factors and intervals must be positive (EMA and backoff factors below 1)");
        }
        self.augmentation.validate()
    }
}
