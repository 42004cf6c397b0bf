//! Plateau learning-rate decay and early stopping.
//!
//! Both track the best validation loss seen so far; an epoch counts as
//! improving only when it beats the best by more than `min_delta`, and the
//! best updates only on such epochs. They differ on the first observation:
//! the decay scheduler treats it as improving (it establishes the baseline),
//! while the stopper counts it toward stagnation, so a run of N identical
//! losses stops exactly at N = patience.

#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    min_delta: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64, factor: f64, patience: usize, min_delta: f64) -> Self {
        PlateauScheduler {
            lr: initial_lr,
            factor,
            patience,
            min_delta,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Observe one epoch's validation loss; returns the learning rate to use
    /// from the next epoch on.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    min_delta: f64,
    best: Option<f64>,
    stagnant: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopper { patience, min_delta, best: None, stagnant: 0 }
    }

    /// Observe one epoch's validation loss; true means stop now.
    pub fn step(&mut self, val_loss: f64) -> bool {
        match self.best {
            None => {
                self.best = Some(val_loss);
                self.stagnant = 1;
            }
            Some(best) => {
                if val_loss < best - self.min_delta {
                    self.best = Some(val_loss);
                    self.stagnant = 0;
                } else {
                    self.stagnant += 1;
                }
            }
        }
        self.stagnant >= self.patience
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay_epochs(losses: &[f64], patience: usize) -> Vec<usize> {
        let mut s = PlateauScheduler::new(1.0, 0.1, patience, 1e-4);
        let mut fired = Vec::new();
        let mut prev_lr = s.lr();
        for (i, &l) in losses.iter().enumerate() {
            let lr = s.step(l);
            if lr != prev_lr {
                fired.push(i + 1);
                prev_lr = lr;
            }
        }
        fired
    }

    #[test]
    fn decay_fires_after_three_flat_epochs_following_baseline() {
        assert_eq!(decay_epochs(&[1.0, 1.0, 1.0, 1.0], 3), vec![4]);
    }

    #[test]
    fn strictly_improving_losses_never_decay() {
        let losses: Vec<f64> = (0..12).map(|i| 1.0 - 0.05 * i as f64).collect();
        assert!(decay_epochs(&losses, 3).is_empty());
    }

    #[test]
    fn two_plateaus_compose_to_a_hundredth() {
        let mut s = PlateauScheduler::new(1e-3, 0.1, 3, 1e-4);
        for _ in 0..7 {
            s.step(1.0);
        }
        assert!((s.lr() - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn stopper_fires_on_exactly_patience_identical_losses() {
        let mut s = EarlyStopper::new(10, 1e-4);
        for i in 1..=10 {
            let stop = s.step(0.7);
            assert_eq!(stop, i == 10, "epoch {i}");
        }
    }

    #[test]
    fn nine_identical_losses_do_not_stop() {
        let mut s = EarlyStopper::new(10, 1e-4);
        assert!(!(1..=9).any(|_| s.step(0.7)));
    }

    #[test]
    fn improvement_resets_the_stagnation_counter() {
        let mut s = EarlyStopper::new(10, 1e-4);
        for _ in 0..8 {
            assert!(!s.step(0.5));
        }
        assert!(!s.step(0.4)); // epoch 9 improves
        for _ in 0..9 {
            assert!(!s.step(0.4));
        }
        assert!(s.step(0.4)); // ten stagnant epochs after the reset
    }

    #[test]
    fn sub_threshold_improvements_count_as_stagnation() {
        let mut s = EarlyStopper::new(3, 1e-2);
        assert!(!s.step(1.000));
        assert!(!s.step(0.995));
        assert!(s.step(0.991));
    }
}
