//! Rejection of low-confidence predictions.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{validation, ClampError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyThresholds {
    /// Floor on the largest probability.
    pub p1: f64,
    /// Floor on the gap between the two largest probabilities.
    pub p2: f64,
}

impl UncertaintyThresholds {
    pub const EVAL: Self = Self { p1: 0.45, p2: 0.25 };
    pub const SORTING: Self = Self { p1: 0.18, p2: 0.04 };

    pub fn new(p1: f64, p2: f64) -> Result<Self> {
        let t = Self { p1, p2 };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("p1", self.p1), ("p2", self.p2)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ClampError::Range { value: v, range: format!("[0, 1] for {name}") });
            }
        }
        Ok(())
    }
}

impl FromStr for UncertaintyThresholds {
    type Err = ClampError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eval" => Ok(Self::EVAL),
            "sorting" => Ok(Self::SORTING),
            other => Err(validation(format!("unknown uncertainty preset {other:?} (expected eval or sorting)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Accept(usize),
    Uncertain,
}

/// Accepts the argmax iff `max ≥ p1` and `max − second ≥ p2`. Thresholds
/// are not range-checked here so that `p1 > 1` can reject everything.
pub fn uncertainty_filter(probs: &[f64], th: &UncertaintyThresholds) -> Decision {
    let (mut best, mut first, mut second) = (0, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (i, &p) in probs.iter().enumerate() {
        if p > first {
            second = first;
            first = p;
            best = i;
        } else if p > second {
            second = p;
        }
    }
    if probs.is_empty() {
        return Decision::Uncertain;
    }
    let margin = if second.is_finite() { first - second } else { first };
    if first >= th.p1 && margin >= th.p2 {
        Decision::Accept(best)
    } else {
        Decision::Uncertain
    }
}

/// Accuracy on accepted predictions and the accepted fraction.
pub fn filtered_accuracy(probs: &[Vec<f64>], labels: &[usize], th: &UncertaintyThresholds) -> (f64, f64) {
    let mut kept = 0usize;
    let mut correct = 0usize;
    for (p, &y) in probs.iter().zip(labels) {
        if let Decision::Accept(c) = uncertainty_filter(p, th) {
            kept += 1;
            correct += (c == y) as usize;
        }
    }
    let acc = if kept == 0 { f64::NAN } else { correct as f64 / kept as f64 };
    (acc, kept as f64 / probs.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn probs(top: &[f64]) -> Vec<f64> {
        let rest = (1.0 - top.iter().sum::<f64>()) / (14 - top.len()) as f64;
        let mut p = top.to_vec();
        p.resize(14, rest);
        p
    }

    #[test]
    fn eval_preset_examples() {
        let th: UncertaintyThresholds = "eval".parse().unwrap();
        assert_eq!(uncertainty_filter(&probs(&[0.9, 0.05]), &th), Decision::Accept(0));
        assert_eq!(uncertainty_filter(&probs(&[0.40]), &th), Decision::Uncertain);
        assert_eq!(uncertainty_filter(&probs(&[0.50, 0.40]), &th), Decision::Uncertain);
        assert_eq!("sorting".parse::<UncertaintyThresholds>().unwrap(), UncertaintyThresholds::SORTING);
        assert!("loose".parse::<UncertaintyThresholds>().is_err());
        assert!(UncertaintyThresholds::new(1.2, 0.0).is_err());
    }

    #[test]
    fn sorting_preset_is_looser() {
        let p = probs(&[0.2, 0.15]);
        assert_eq!(uncertainty_filter(&p, &UncertaintyThresholds::SORTING), Decision::Accept(0));
        assert_eq!(uncertainty_filter(&p, &UncertaintyThresholds::EVAL), Decision::Uncertain);
    }

    proptest! {
        #[test]
        fn extremes(raw in proptest::collection::vec(0.0f64..1.0, 14)) {
            let s: f64 = raw.iter().sum::<f64>() + 1e-9;
            let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let open = UncertaintyThresholds { p1: 0.0, p2: 0.0 };
            let closed = UncertaintyThresholds { p1: 1.0 + 1e-9, p2: 0.0 };
            prop_assert!(matches!(uncertainty_filter(&p, &open), Decision::Accept(_)));
            prop_assert_eq!(uncertainty_filter(&p, &closed), Decision::Uncertain);
        }
    }
}
