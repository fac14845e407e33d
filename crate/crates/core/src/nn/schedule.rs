use std::f64::consts::PI;

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum LrSchedule {
    /// `base * factor^(milestones passed)`; milestones are fractions of the horizon.
    StepDecay {
        base: f64,
        factor: f64,
        milestones: Vec<f64>,
    },
    /// `base * (1 + cos(pi * t / horizon)) / 2`
    Cosine { base: f64 },
    /// `base / (1 + a * p)^b` with `p = t / horizon`
    Polynomial { base: f64, a: f64, b: f64 },
}

impl LrSchedule {
    pub fn base(&self) -> f64 {
        match self {
            Self::StepDecay { base, .. } | Self::Cosine { base } | Self::Polynomial { base, .. } => *base,
        }
    }

    pub fn lr_at(&self, t: u64, horizon: u64) -> Result<f64> {
        if horizon == 0 {
            return Err(invalid("schedule horizon must be positive"));
        }
        if t > horizon {
            return Err(invalid(format!("step {t} beyond horizon {horizon}")));
        }
        let p = t as f64 / horizon as f64;
        Ok(match self {
            Self::StepDecay {
                base,
                factor,
                milestones,
            } => {
                let passed = milestones.iter().filter(|&&m| t as f64 >= m * horizon as f64).count();
                base * factor.powi(passed as i32)
            }
            Self::Cosine { base } => base * (1.0 + (PI * p).cos()) / 2.0,
            Self::Polynomial { base, a, b } => base / (1.0 + a * p).powf(*b),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_decay_after_milestone() {
        let s = LrSchedule::StepDecay {
            base: 3e-3,
            factor: 0.1,
            milestones: vec![0.8],
        };
        assert_eq!(s.lr_at(0, 1000).unwrap(), 3e-3);
        assert_eq!(s.lr_at(799, 1000).unwrap(), 3e-3);
        assert!((s.lr_at(900, 1000).unwrap() - 3e-4).abs() < 1e-18);
    }

    #[test]
    fn cosine_reaches_zero_at_horizon() {
        let s = LrSchedule::Cosine { base: 0.1 };
        assert!(s.lr_at(100, 100).unwrap().abs() < 1e-17);
        assert!((s.lr_at(50, 100).unwrap() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn polynomial_closed_form() {
        let s = LrSchedule::Polynomial {
            base: 1.0,
            a: 10.0,
            b: 0.75,
        };
        let lr = s.lr_at(10, 10).unwrap();
        assert!((lr - 11f64.powf(-0.75)).abs() < 1e-15);
        assert!((lr - 0.165560).abs() < 5e-7);
    }

    #[test]
    fn zero_horizon_rejected() {
        assert!(LrSchedule::Cosine { base: 1.0 }.lr_at(0, 0).is_err());
    }

    #[test]
    fn all_schedules_non_increasing() {
        let schedules = [
            LrSchedule::StepDecay {
                base: 1.0,
                factor: 0.1,
                milestones: vec![0.3, 0.8],
            },
            LrSchedule::Cosine { base: 1.0 },
            LrSchedule::Polynomial {
                base: 1.0,
                a: 10.0,
                b: 0.75,
            },
        ];
        for s in &schedules {
            let mut prev = f64::INFINITY;
            for t in 0..=500 {
                let lr = s.lr_at(t, 500).unwrap();
                assert!(lr <= prev, "{s:?} increased at {t}");
                if t < 500 {
                    assert!(lr > 0.0);
                }
                prev = lr;
            }
        }
    }
}
