//! Per-component weight schedules and value sign constraints.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapingError {
    #[error("component `{0}`: constraints need a non-free sign")]
    ConstraintWithoutSign(String),
    #[error("component `{name}`: schedule {field} must be positive, got {value}")]
    BadSchedule {
        name: String,
        field: &'static str,
        value: f64,
    },
    #[error("component `{0}`: weight must be finite")]
    NonFiniteWeight(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    #[default]
    Free,
    NonPositive,
    NonNegative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    ClipTarget,
    Penalty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSchedule {
    #[serde(default = "default_warmup")]
    pub warmup: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Use `max(0.01, tanh(..))` instead of the bare formula.
    #[serde(default)]
    pub floor_weight: bool,
}

fn default_warmup() -> f64 {
    100.0
}

fn default_beta() -> f64 {
    0.0004
}

impl Default for WeightSchedule {
    fn default() -> Self {
        Self {
            warmup: default_warmup(),
            beta: default_beta(),
            floor_weight: false,
        }
    }
}

impl WeightSchedule {
    pub fn weight(&self, step: u64) -> f64 {
        let w = schedule_weight(step, self.warmup, self.beta);
        if self.floor_weight {
            w.max(0.01)
        } else {
            w
        }
    }
}

fn default_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub name: String,
    #[serde(default = "default_weight")]
    pub weight: f64,
    #[serde(default)]
    pub sign: Sign,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub constraints: Vec<ConstraintMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<WeightSchedule>,
}

impl ComponentSpec {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            weight: 1.0,
            sign: Sign::Free,
            constraints: Vec::new(),
            schedule: None,
        }
    }

    pub fn validate(&self) -> Result<(), ShapingError> {
        if !self.weight.is_finite() {
            return Err(ShapingError::NonFiniteWeight(self.name.clone()));
        }
        if !self.constraints.is_empty() && self.sign == Sign::Free {
            return Err(ShapingError::ConstraintWithoutSign(self.name.clone()));
        }
        if let Some(s) = &self.schedule {
            for (field, value) in [("warmup", s.warmup), ("beta", s.beta)] {
                if !(value > 0.0 && value.is_finite()) {
                    return Err(ShapingError::BadSchedule {
                        name: self.name.clone(),
                        field,
                        value,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn clips_target(&self) -> bool {
        self.sign != Sign::Free && self.constraints.contains(&ConstraintMode::ClipTarget)
    }

    pub fn penalized(&self) -> bool {
        self.sign != Sign::Free && self.constraints.contains(&ConstraintMode::Penalty)
    }

    /// Effective weight after `step` gradient steps.
    pub fn weight_at(&self, step: u64) -> f64 {
        match &self.schedule {
            Some(s) => self.weight * s.weight(step),
            None => self.weight,
        }
    }
}

/// `tanh(beta * |t - warmup|+)` where `|x|+` is `x` for `x >= 0` and `0.01` otherwise.
pub fn schedule_weight(step: u64, warmup: f64, beta: f64) -> f64 {
    let x = step as f64 - warmup;
    let pos = if x < 0.0 { 0.01 } else { x };
    (beta * pos).tanh()
}

pub fn clip_target(sign: Sign, y: f64) -> f64 {
    match sign {
        Sign::Free => y,
        Sign::NonPositive => y.min(0.0),
        Sign::NonNegative => y.max(0.0),
    }
}

/// Loss term that is zero on the feasible half-line and linear off it.
pub fn sign_penalty(sign: Sign, q: f64) -> f64 {
    match sign {
        Sign::Free => 0.0,
        Sign::NonPositive if q > 0.0 => 0.5 * q,
        Sign::NonNegative if q < 0.0 => -0.5 * q,
        _ => 0.0,
    }
}

/// Derivative of [`sign_penalty`] with respect to `q` (zero at the kink).
pub fn sign_penalty_grad(sign: Sign, q: f64) -> f64 {
    match sign {
        Sign::Free => 0.0,
        Sign::NonPositive if q > 0.0 => 0.5,
        Sign::NonNegative if q < 0.0 => -0.5,
        _ => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        assert_eq!(schedule_weight(100, 100.0, 0.0004), 0.0);
        let below = schedule_weight(10, 100.0, 0.0004);
        assert!((below - 4.0e-6).abs() < 1e-12);
        assert!((schedule_weight(1_000_100, 100.0, 0.0004) - 1.0).abs() < 1e-12);
        let floored = WeightSchedule {
            floor_weight: true,
            ..Default::default()
        };
        assert_eq!(floored.weight(0), 0.01);
        assert_eq!(floored.weight(1_000_100), schedule_weight(1_000_100, 100.0, 0.0004));
    }

    #[test]
    fn clipping() {
        assert_eq!(clip_target(Sign::NonPositive, 0.7), 0.0);
        assert_eq!(clip_target(Sign::NonPositive, -3.0), -3.0);
        assert_eq!(clip_target(Sign::NonNegative, -0.2), 0.0);
        assert_eq!(clip_target(Sign::Free, 0.7), 0.7);
    }

    #[test]
    fn penalties() {
        assert_eq!(sign_penalty(Sign::NonPositive, 2.0), 1.0);
        assert_eq!(sign_penalty(Sign::NonPositive, -2.0), 0.0);
        assert_eq!(sign_penalty(Sign::NonNegative, -4.0), 2.0);
        assert_eq!(sign_penalty_grad(Sign::NonNegative, -4.0), -0.5);
        assert_eq!(sign_penalty_grad(Sign::NonPositive, 0.0), 0.0);
    }

    #[test]
    fn component_validation() {
        let mut c = ComponentSpec::new("crash");
        c.constraints.push(ConstraintMode::ClipTarget);
        assert_eq!(
            c.validate(),
            Err(ShapingError::ConstraintWithoutSign("crash".into()))
        );
        c.sign = Sign::NonPositive;
        assert!(c.validate().is_ok());
        assert!(c.clips_target() && !c.penalized());
        c.schedule = Some(WeightSchedule {
            beta: 0.0,
            ..Default::default()
        });
        assert!(matches!(c.validate(), Err(ShapingError::BadSchedule { field: "beta", .. })));
    }

    #[test]
    fn scheduled_weight_scales_base() {
        let c = ComponentSpec {
            weight: 2.0,
            schedule: Some(WeightSchedule::default()),
            ..ComponentSpec::new("failure")
        };
        assert_eq!(c.weight_at(100), 0.0);
        assert!((c.weight_at(5100) - 2.0 * (2.0f64).tanh()).abs() < 1e-12);
    }

    #[test]
    fn component_spec_from_toml() {
        let c: ComponentSpec = toml::from_str(
            "name = \"crash\"\nsign = \"non_positive\"\nconstraints = [\"clip_target\", \"penalty\"]\n",
        )
        .unwrap();
        assert!(c.clips_target() && c.penalized());
        assert_eq!(c.weight, 1.0);
        assert!(toml::from_str::<ComponentSpec>("name = \"x\"\nwieght = 2.0\n").is_err());
    }
}
