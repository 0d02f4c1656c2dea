//! Step rewards and return-to-go targets.
//!
//! Every non-terminal step earns `1/T`; the terminal step earns nothing on
//! success and a unit penalty on failure. The resulting return-to-go is
//! normalized progress in `[0, 1]` for successes and the same quantity shifted
//! by exactly `1.0` for failures. Returns are undiscounted.

use crate::error::{Error, Result};

/// Outcome and length of one episode, enough to define every reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RewardSchedule {
    horizon: usize,
    success: bool,
}

impl RewardSchedule {
    /// `horizon` is the terminal step index `T` (the episode has `T + 1` steps).
    pub fn new(horizon: usize, success: bool) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::invalid("episode length T must be at least 1"));
        }
        Ok(Self { horizon, success })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn success(&self) -> bool {
        self.success
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.horizon {
            Err(Error::StepOutOfRange {
                t,
                max: self.horizon,
            })
        } else {
            Ok(())
        }
    }

    pub fn reward(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(if t < self.horizon {
            1.0 / self.horizon as f64
        } else if self.success {
            0.0
        } else {
            1.0
        })
    }

    pub fn return_to_go(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(shifted_return(self.horizon, t, self.success))
    }
}

// Computed on the failure branch first: `f - 1.0` is exact for f in [1, 2],
// so failure minus success is exactly 1.0 in floating point.
fn shifted_return(horizon: usize, t: usize, success: bool) -> f64 {
    let shifted = (2 * horizon - t) as f64 / horizon as f64;
    if success {
        shifted - 1.0
    } else {
        shifted
    }
}

/// Return gap between a failed and a successful episode of equal length at step `t`.
pub fn margin(t: usize, horizon: usize) -> Result<f64> {
    let fail = RewardSchedule::new(horizon, false)?.return_to_go(t)?;
    let succ = RewardSchedule::new(horizon, true)?.return_to_go(t)?;
    Ok(fail - succ)
}

/// Ground-truth progress score implied by a return-to-go value.
pub fn progress_from_value(v: f64) -> f64 {
    1.0 - v.clamp(0.0, 2.0).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(sched: &RewardSchedule, t: usize) -> f64 {
        (t..=sched.horizon())
            .map(|k| sched.reward(k).unwrap())
            .sum()
    }

    #[test]
    fn reward_cases() {
        let s = RewardSchedule::new(200, true).unwrap();
        let f = RewardSchedule::new(200, false).unwrap();
        assert_eq!(s.reward(10).unwrap(), 0.005);
        assert_eq!(s.reward(200).unwrap(), 0.0);
        assert_eq!(f.reward(200).unwrap(), 1.0);
        assert!(matches!(s.reward(201), Err(Error::StepOutOfRange { .. })));
    }

    #[test]
    fn return_examples() {
        let s = RewardSchedule::new(100, true).unwrap();
        let f = RewardSchedule::new(100, false).unwrap();
        assert_eq!(s.return_to_go(0).unwrap(), 1.0);
        assert_eq!(s.return_to_go(100).unwrap(), 0.0);
        assert_eq!(f.return_to_go(50).unwrap(), 1.5);
        assert_eq!(s.return_to_go(25).unwrap(), 0.75);
        assert!(RewardSchedule::new(0, true).is_err());
    }

    #[test]
    fn margin_is_one_everywhere() {
        for horizon in 1..300 {
            for t in 0..=horizon {
                assert_eq!(margin(t, horizon).unwrap(), 1.0, "T={horizon} t={t}");
            }
        }
    }

    #[test]
    fn matches_brute_force_and_decreases() {
        for horizon in [1, 2, 7, 60, 99, 140] {
            for success in [true, false] {
                let sched = RewardSchedule::new(horizon, success).unwrap();
                let mut prev = f64::INFINITY;
                for t in 0..=horizon {
                    let g = sched.return_to_go(t).unwrap();
                    assert!((g - brute_force(&sched, t)).abs() < 1e-9);
                    assert!(g < prev);
                    prev = g;
                    if success {
                        assert!((0.0..=1.0).contains(&g));
                    } else {
                        assert!((1.0..=2.0).contains(&g));
                    }
                }
            }
        }
    }

    #[test]
    fn progress_score() {
        assert_eq!(progress_from_value(0.0), 1.0);
        assert_eq!(progress_from_value(0.25), 0.75);
        assert_eq!(progress_from_value(1.6), 0.0);
    }
}
