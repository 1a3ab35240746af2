//! Stock payoffs, integrands and stopping rules used by the test suites.

use serde::{Deserialize, Serialize};

use crate::grid::TimeGrid;
use crate::model::MarkLaw;
use crate::special::norm_cdf;

/// Bounded function of `(t, m)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StateFunction {
    Zero,
    Constant { value: f64 },
    /// `1{m > 0}`.
    FactorPositive,
    /// `1{m > level}`.
    FactorAbove { level: f64 },
    /// `min(max(m, 0), cap)`.
    PositivePart { cap: f64 },
    /// `intercept + slope · m`; unbounded, only for short horizons.
    Affine { intercept: f64, slope: f64 },
    /// `Φ(m / scale)`, a smooth step.
    SmoothStep { scale: f64 },
}

impl StateFunction {
    pub fn eval(&self, _t: f64, m: f64) -> f64 {
        match *self {
            StateFunction::Zero => 0.0,
            StateFunction::Constant { value } => value,
            StateFunction::FactorPositive => f64::from(m > 0.0),
            StateFunction::FactorAbove { level } => f64::from(m > level),
            StateFunction::PositivePart { cap } => m.max(0.0).min(cap),
            StateFunction::Affine { intercept, slope } => intercept + slope * m,
            StateFunction::SmoothStep { scale } => norm_cdf(m / scale),
        }
    }

    /// Bound on `|f|` when finite.
    pub fn sup_abs(&self) -> f64 {
        match *self {
            StateFunction::Zero => 0.0,
            StateFunction::Constant { value } => value.abs(),
            StateFunction::FactorPositive | StateFunction::FactorAbove { .. } | StateFunction::SmoothStep { .. } => 1.0,
            StateFunction::PositivePart { cap } => cap.abs(),
            StateFunction::Affine { slope, intercept } => {
                if slope == 0.0 {
                    intercept.abs()
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, StateFunction::Zero) || matches!(self, StateFunction::Constant { value } if *value == 0.0)
    }

    pub fn label(&self) -> String {
        match *self {
            StateFunction::Zero => "zero".into(),
            StateFunction::Constant { value } => format!("const_{value}"),
            StateFunction::FactorPositive => "factor_positive".into(),
            StateFunction::FactorAbove { level } => format!("factor_above_{level}"),
            StateFunction::PositivePart { cap } => format!("positive_part_cap_{cap}"),
            StateFunction::Affine { intercept, slope } => format!("affine_{intercept}_{slope}"),
            StateFunction::SmoothStep { scale } => format!("smooth_step_{scale}"),
        }
    }
}

/// Integrand `Ψ(t, e)` against the jump measure, allowed to depend on the
/// factor value just before the jump.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpIntegrand {
    Zero,
    One,
    Mark,
    /// `e · 1{m_{t−} > 0}`.
    MarkIfFactorPositive,
}

impl JumpIntegrand {
    pub fn eval(&self, mark: f64, m_prev: f64) -> f64 {
        match self {
            JumpIntegrand::Zero => 0.0,
            JumpIntegrand::One => 1.0,
            JumpIntegrand::Mark => mark,
            JumpIntegrand::MarkIfFactorPositive => {
                if m_prev > 0.0 {
                    mark
                } else {
                    0.0
                }
            }
        }
    }

    /// `∫ Ψ(e) m(de)` given the factor value.
    pub fn mark_mean(&self, law: &MarkLaw, m_prev: f64) -> f64 {
        match self {
            JumpIntegrand::Zero => 0.0,
            JumpIntegrand::One => 1.0,
            JumpIntegrand::Mark => law.mean(),
            JumpIntegrand::MarkIfFactorPositive => {
                if m_prev > 0.0 {
                    law.mean()
                } else {
                    0.0
                }
            }
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            JumpIntegrand::Zero => "zero",
            JumpIntegrand::One => "one",
            JumpIntegrand::Mark => "mark",
            JumpIntegrand::MarkIfFactorPositive => "mark_if_factor_positive",
        }
    }
}

/// Stopping rule of the small filtration, resolved to a grid index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum StoppingRule {
    /// The grid point nearest to `t`.
    Fixed { t: f64 },
    /// First grid time with `m ≥ level`, else the horizon.
    FirstPassage { level: f64 },
}

impl StoppingRule {
    pub fn index(&self, grid: &TimeGrid, m: &[f64]) -> usize {
        match *self {
            StoppingRule::Fixed { t } => grid.nearest_index(t),
            StoppingRule::FirstPassage { level } => m.iter().position(|&x| x >= level).unwrap_or(grid.n_steps()),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            StoppingRule::Fixed { t } => format!("fixed_{t}"),
            StoppingRule::FirstPassage { level } => format!("first_passage_{level}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stock_functions() {
        assert_eq!(StateFunction::FactorPositive.eval(0.3, 0.0), 0.0);
        assert_eq!(StateFunction::FactorPositive.eval(0.3, 1e-300), 1.0);
        assert_eq!(StateFunction::PositivePart { cap: 2.0 }.eval(0.0, 5.0), 2.0);
        assert_eq!(StateFunction::SmoothStep { scale: 1.0 }.eval(0.0, 0.0), 0.5);
        assert!(StateFunction::Constant { value: 0.0 }.is_zero());
        assert!(StateFunction::Affine { intercept: 1.0, slope: 1.0 }.sup_abs().is_infinite());
    }

    #[test]
    fn stopping_rules() {
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        let m = [0.0, 0.2, 0.6, 0.1, 0.9];
        assert_eq!(StoppingRule::Fixed { t: 0.49 }.index(&g, &m), 2);
        assert_eq!(StoppingRule::FirstPassage { level: 0.5 }.index(&g, &m), 2);
        assert_eq!(StoppingRule::FirstPassage { level: 5.0 }.index(&g, &m), 4);
    }

    #[test]
    fn jump_integrand_means() {
        let law = MarkLaw::Exponential { mean: 2.0 };
        assert_eq!(JumpIntegrand::Mark.mark_mean(&law, -1.0), 2.0);
        assert_eq!(JumpIntegrand::MarkIfFactorPositive.mark_mean(&law, -1.0), 0.0);
        assert_eq!(JumpIntegrand::MarkIfFactorPositive.eval(3.0, 0.5), 3.0);
    }
}
