//! Reduce-on-plateau learning-rate schedule: halve after 3 consecutive
//! epochs without a strict improvement of the training loss, floored at
//! 1e-5.

#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub lr_min: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, lr_min: f64) -> Self {
        PlateauScheduler {
            lr,
            factor,
            patience,
            lr_min,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Feed one epoch's training loss; returns the learning rate to use
    /// from the next epoch on.
    pub fn step(&mut self, epoch_train_loss: f64) -> f64 {
        if epoch_train_loss < self.best {
            self.best = epoch_train_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr = (self.lr * self.factor).max(self.lr_min);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halves_after_three_flat_epochs() {
        let mut s = PlateauScheduler::new(3e-4, 0.5, 3, 1e-5);
        for loss in [1.0, 0.9, 0.91, 0.92] {
            assert_eq!(s.step(loss), 3e-4);
        }
        assert_eq!(s.step(0.93), 1.5e-4);
    }

    #[test]
    fn strictly_decreasing_never_changes() {
        let mut s = PlateauScheduler::new(3e-4, 0.5, 3, 1e-5);
        for i in 0..50 {
            assert_eq!(s.step(1.0 - i as f64 * 0.01), 3e-4);
        }
    }

    #[test]
    fn floor_clamps_exactly() {
        let mut s = PlateauScheduler::new(1.5e-5, 0.5, 3, 1e-5);
        s.step(1.0); // establishes the best
        for _ in 0..3 {
            s.step(1.0);
        }
        assert_eq!(s.lr, 1e-5);
        // later triggers keep it at the floor
        for loss in [1.0, 1.0, 1.0] {
            s.step(loss);
        }
        assert_eq!(s.lr, 1e-5);
    }

    #[test]
    fn improvement_resets_counter() {
        let mut s = PlateauScheduler::new(1e-3, 0.5, 3, 1e-5);
        s.step(1.0);
        s.step(1.1);
        s.step(1.2);
        s.step(0.5); // strict improvement resets
        s.step(0.6);
        s.step(0.7);
        assert_eq!(s.lr, 1e-3);
        s.step(0.8);
        assert_eq!(s.lr, 5e-4);
    }
}
