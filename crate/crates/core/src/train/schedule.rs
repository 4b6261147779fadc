//! Reduce-on-plateau learning-rate rule driven by validation macro-mIoU.

pub const DEFAULT_PATIENCE: usize = 5;
pub const MIN_LR: f64 = 1e-6;
/// An epoch counts as an improvement only if it beats the best by more than this.
pub const MIN_DELTA: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plateau {
    pub patience: usize,
    best: f64,
    stale: usize,
}

impl Plateau {
    pub fn new(patience: usize) -> Self {
        Self { patience: patience.max(1), best: f64::NEG_INFINITY, stale: 0 }
    }

    /// Feeds one epoch's score; returns the learning rate for the next epoch.
    /// After `patience` consecutive epochs without improvement the rate is
    /// halved (never below [`MIN_LR`]) and the count restarts.
    pub fn observe(&mut self, score: f64, lr: f64) -> f64 {
        if score > self.best + MIN_DELTA {
            self.best = score;
            self.stale = 0;
            return lr;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            return (lr * 0.5).max(MIN_LR);
        }
        lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Replays `history` from scratch and returns the rate to use after its last
/// epoch, given the rate `lr` that was in force during it.
pub fn lr_schedule(history: &[f64], lr: f64, patience: usize) -> f64 {
    let mut p = Plateau::new(patience);
    let mut out = lr;
    for &score in history {
        out = p.observe(score, lr);
    }
    out
}
