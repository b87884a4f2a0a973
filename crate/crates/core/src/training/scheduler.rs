/// Halves the learning rate after every epoch whose validation loss fails to
/// beat the best seen so far. Equal losses count as no improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    lr: f64,
    best: Option<f64>,
}

impl PlateauScheduler {
    pub fn new(lr: f64) -> Self {
        PlateauScheduler { lr, best: None }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Records one epoch's validation loss; returns true if it was a new best.
    pub fn step(&mut self, val_loss: f64) -> bool {
        match self.best {
            Some(b) if !(val_loss < b) => {
                self.lr *= 0.5;
                false
            }
            _ => {
                self.best = Some(val_loss);
                true
            }
        }
    }
}

/// Learning rate in effect after each epoch of `losses`, starting from `lr`.
pub fn lr_schedule(lr: f64, losses: &[f64]) -> Vec<f64> {
    let mut s = PlateauScheduler::new(lr);
    losses
        .iter()
        .map(|&l| {
            s.step(l);
            s.lr()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_rule() {
        assert_eq!(lr_schedule(1.0, &[1.0, 0.9, 0.8]), [1.0, 1.0, 1.0]);
        assert_eq!(lr_schedule(1.0, &[1.0, 0.9, 0.95]), [1.0, 1.0, 0.5]);
        assert_eq!(lr_schedule(1.0, &[1.0, 1.0]), [1.0, 0.5]);
        // Recovery below the old best does not restore the rate.
        assert_eq!(lr_schedule(1.0, &[1.0, 2.0, 0.5, 0.6]), [1.0, 0.5, 0.5, 0.25]);
    }

    #[test]
    fn nan_never_counts_as_improvement() {
        assert_eq!(lr_schedule(1.0, &[1.0, f64::NAN]), [1.0, 0.5]);
    }
}
