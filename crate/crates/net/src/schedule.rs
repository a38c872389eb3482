//! Plateau learning-rate schedule driven by an EMA of the epoch loss.

use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub ema_alpha: f64,
    pub decay_factor: f64,
    pub patience_epochs: usize,
    pub min_improvement: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            ema_alpha: 0.9,
            decay_factor: 5.0,
            patience_epochs: 30,
            min_improvement: 5e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LRState {
    pub current_lr: f64,
    pub ema: Vec<f64>,
    /// Unset until the first epoch.
    pub best_ema: Option<f64>,
    pub epochs_since_improvement: usize,
}

impl LRState {
    pub fn new(initial_lr: f64) -> Self {
        LRState {
            current_lr: initial_lr,
            ema: Vec::new(),
            best_ema: None,
            epochs_since_improvement: 0,
        }
    }
}

/// Appends the EMA of `epoch_loss`. The EMA counts as improved when it falls
/// at least `min_improvement` below the best improved EMA so far; after
/// `patience_epochs` epochs without improvement the rate is divided by
/// `decay_factor` and the counter restarts.
pub fn lr_update(state: &LRState, epoch_loss: f64, p: &ScheduleParams) -> Result<LRState> {
    if !epoch_loss.is_finite() {
        return Err(NetError::NonFinite(format!("epoch loss {epoch_loss}")));
    }
    let mut s = state.clone();
    let ema = match s.ema.last() {
        Some(&prev) => p.ema_alpha * prev + (1.0 - p.ema_alpha) * epoch_loss,
        None => epoch_loss,
    };
    s.ema.push(ema);
    match s.best_ema {
        Some(best) if ema >= best - p.min_improvement => s.epochs_since_improvement += 1,
        _ => {
            s.best_ema = Some(ema);
            s.epochs_since_improvement = 0;
        }
    }
    if s.epochs_since_improvement >= p.patience_epochs {
        s.current_lr /= p.decay_factor;
        s.epochs_since_improvement = 0;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_epoch_sets_best() {
        let s = lr_update(&LRState::new(1.0), 2.0, &ScheduleParams::default()).unwrap();
        assert_eq!(s.ema, vec![2.0]);
        assert_eq!(s.best_ema, Some(2.0));
        assert_eq!(s.epochs_since_improvement, 0);
    }

    #[test]
    fn strict_improvement_never_decays() {
        let p = ScheduleParams::default();
        let mut s = LRState::new(3e-4);
        for e in 0..200 {
            s = lr_update(&s, 10.0 - 0.1 * e as f64, &p).unwrap();
        }
        assert_eq!(s.current_lr, 3e-4);
    }

    #[test]
    fn flat_loss_decays_after_patience() {
        let p = ScheduleParams::default();
        let mut s = LRState::new(1.0);
        for e in 0..61 {
            s = lr_update(&s, 1.0, &p).unwrap();
            let expected = match e {
                0..=29 => 1.0,
                30..=59 => 0.2,
                _ => 0.04,
            };
            assert_eq!(s.current_lr, expected, "epoch {e}");
        }
    }

    #[test]
    fn nan_rejected() {
        assert!(lr_update(&LRState::new(1.0), f64::NAN, &ScheduleParams::default()).is_err());
    }
}
