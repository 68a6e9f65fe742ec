use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cosine decay from `lr_init` at iteration 0 to `lr_final` at `total_iters`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub lr_init: f64,
    pub lr_final: f64,
    pub total_iters: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { lr_init: 2e-4, lr_final: 1e-6, total_iters: 1000 }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init >= self.lr_final && self.lr_final >= 0.0) || self.total_iters == 0 {
            return Err(Error::Config(format!("invalid schedule {self:?}")));
        }
        Ok(())
    }

    pub fn lr_at(&self, iter: u64) -> Result<f64> {
        if iter > self.total_iters {
            return Err(Error::Config(format!("iteration {iter} is past the schedule end {}", self.total_iters)));
        }
        if iter == self.total_iters {
            return Ok(self.lr_final);
        }
        let phase = std::f64::consts::PI * iter as f64 / self.total_iters as f64;
        // Written as a decrement from `lr_init` so iteration 0 is exact.
        Ok(self.lr_init - 0.5 * (self.lr_init - self.lr_final) * (1.0 - phase.cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_midpoint_and_monotone() {
        let s = Schedule { total_iters: 400, ..Schedule::default() };
        assert_eq!(s.lr_at(0).unwrap(), 2e-4);
        assert_eq!(s.lr_at(400).unwrap(), 1e-6);
        assert!((s.lr_at(200).unwrap() - 1.005e-4).abs() < 1e-15);
        let lrs: Vec<f64> = (0..=400).map(|i| s.lr_at(i).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(s.lr_at(401).is_err());
    }
}
