//! Mixing-coefficient schedules for the alignment term.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Const,
    Linear,
    Cos,
    Halfcos,
    Jump,
}

impl core::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "const" => ScheduleKind::Const,
            "linear" => ScheduleKind::Linear,
            "cos" => ScheduleKind::Cos,
            "halfcos" => ScheduleKind::Halfcos,
            "jump" => ScheduleKind::Jump,
            other => return Err(Error::Config(format!("unknown schedule `{other}`"))),
        })
    }
}

fn default_ramp() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    /// Peak value `lambda`.
    pub peak: f64,
    pub total_epochs: usize,
    #[serde(default)]
    pub jump_epoch: usize,
    #[serde(default = "default_ramp")]
    pub ramp: usize,
}

impl ScheduleSpec {
    pub fn constant(peak: f64, total_epochs: usize) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Const,
            peak,
            total_epochs,
            jump_epoch: 0,
            ramp: default_ramp(),
        }
    }

    pub fn jump(peak: f64, total_epochs: usize, jump_epoch: usize, ramp: usize) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Jump,
            peak,
            total_epochs,
            jump_epoch,
            ramp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.peak) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.peak)));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("schedule needs at least one epoch".into()));
        }
        if self.kind == ScheduleKind::Jump {
            if self.ramp == 0 {
                return Err(Error::Config("jump ramp must be positive".into()));
            }
            if self.jump_epoch + self.ramp > self.total_epochs {
                return Err(Error::Config(format!(
                    "jump epoch {} + ramp {} exceeds {} epochs",
                    self.jump_epoch, self.ramp, self.total_epochs
                )));
            }
        }
        Ok(())
    }
}

/// `lambda_t` at epoch `epoch` (0-based).
pub fn lambda_at(spec: &ScheduleSpec, epoch: usize) -> Result<f64> {
    spec.validate()?;
    if epoch >= spec.total_epochs {
        return Err(Error::Contract(format!(
            "epoch {epoch} outside schedule of {} epochs",
            spec.total_epochs
        )));
    }
    let lambda = spec.peak;
    let frac = epoch as f64 / spec.total_epochs as f64;
    let pi = core::f64::consts::PI;
    Ok(match spec.kind {
        ScheduleKind::Const => lambda,
        ScheduleKind::Linear => lambda * (1.0 - frac),
        ScheduleKind::Cos => lambda * (1.0 + libm::cos(pi * frac)) / 2.0,
        ScheduleKind::Halfcos => lambda * libm::cos(pi * frac / 2.0),
        ScheduleKind::Jump => {
            if epoch < spec.jump_epoch {
                lambda
            } else if epoch < spec.jump_epoch + spec.ramp {
                lambda * (1.0 - (epoch - spec.jump_epoch) as f64 / spec.ramp as f64)
            } else {
                0.0
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: ScheduleKind) -> ScheduleSpec {
        ScheduleSpec {
            kind,
            peak: 0.5,
            total_epochs: 100,
            jump_epoch: 50,
            ramp: 10,
        }
    }

    #[test]
    fn constant_everywhere() {
        for e in 0..100 {
            assert_eq!(lambda_at(&spec(ScheduleKind::Const), e).unwrap(), 0.5);
        }
    }

    #[test]
    fn jump_midpoint_and_tail() {
        let s = spec(ScheduleKind::Jump);
        assert_eq!(lambda_at(&s, 49).unwrap(), 0.5);
        assert_eq!(lambda_at(&s, 50).unwrap(), 0.5);
        assert_eq!(lambda_at(&s, 55).unwrap(), 0.25);
        assert_eq!(lambda_at(&s, 60).unwrap(), 0.0);
        assert_eq!(lambda_at(&s, 99).unwrap(), 0.0);
    }

    #[test]
    fn linear_endpoints() {
        let s = spec(ScheduleKind::Linear);
        assert_eq!(lambda_at(&s, 0).unwrap(), 0.5);
        assert!((lambda_at(&s, 99).unwrap() - 0.005).abs() < 1e-15);
    }

    #[test]
    fn quarter_point_values() {
        let at = |k| lambda_at(&spec(k), 25).unwrap();
        assert!((at(ScheduleKind::Halfcos) - 0.461_939_766_255_643_4).abs() < 1e-12);
        assert!((at(ScheduleKind::Cos) - 0.426_776_695_296_636_9).abs() < 1e-12);
        assert_eq!(at(ScheduleKind::Linear), 0.375);
    }

    #[test]
    fn out_of_range_epoch_is_an_error() {
        assert!(lambda_at(&spec(ScheduleKind::Const), 100).is_err());
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec(ScheduleKind::Jump);
        s.jump_epoch = 95;
        assert!(s.validate().is_err());
        let mut s = spec(ScheduleKind::Const);
        s.peak = 1.5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn parses_kind_names() {
        assert_eq!("halfcos".parse::<ScheduleKind>().unwrap(), ScheduleKind::Halfcos);
        assert!("step".parse::<ScheduleKind>().is_err());
    }
}
