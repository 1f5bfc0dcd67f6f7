//! Per-class confusion counts and the F-beta / G-beta measures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default beta for both measures.
pub const BETA: f64 = 2.0;

/// Fractional confusion counts of one class.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
    pub tn: f64,
}

impl ConfusionCounts {
    pub fn new(tp: f64, fp: f64, fn_: f64, tn: f64) -> Result<Self> {
        let c = ConfusionCounts { tp, fp, fn_, tn };
        if [tp, fp, fn_, tn].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data(format!("confusion counts must be finite and nonnegative: {c:?}")));
        }
        Ok(c)
    }

    pub fn total(&self) -> f64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

/// `(1+β²)TP / ((1+β²)TP + FP + β²FN)`, or 0 when the denominator is 0.
pub fn fbeta(c: &ConfusionCounts, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = (1.0 + b2) * c.tp + c.fp + b2 * c.fn_;
    if den > 0.0 {
        (1.0 + b2) * c.tp / den
    } else {
        0.0
    }
}

/// `TP / (TP + FP + βFN)`, or 0 when the denominator is 0.
pub fn gbeta(c: &ConfusionCounts, beta: f64) -> f64 {
    let den = c.tp + c.fp + beta * c.fn_;
    if den > 0.0 {
        c.tp / den
    } else {
        0.0
    }
}

/// Converts label sets to membership masks, rejecting indices `>= n`.
pub(crate) fn masks(sets: &[Vec<usize>], n: usize) -> Result<Vec<Vec<bool>>> {
    sets.iter()
        .map(|s| {
            let mut m = vec![false; n];
            for &k in s {
                if k >= n {
                    return Err(Error::Data(format!("label index {k} out of range for {n} classes")));
                }
                m[k] = true;
            }
            Ok(m)
        })
        .collect()
}

pub(crate) fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Data(format!("{a} label sets but {b} prediction sets")));
    }
    Ok(())
}

/// Per-class counts where each recording carries weight
/// `1 / max(1, |true ∪ pred|)`.
pub fn per_class_counts(true_sets: &[Vec<usize>], pred_sets: &[Vec<usize>], n: usize) -> Result<Vec<ConfusionCounts>> {
    check_lengths(true_sets.len(), pred_sets.len())?;
    let t = masks(true_sets, n)?;
    let p = masks(pred_sets, n)?;
    let mut out = vec![ConfusionCounts::default(); n];
    for (t, p) in t.iter().zip(&p) {
        let union = t.iter().zip(p).filter(|(a, b)| **a || **b).count();
        let w = 1.0 / union.max(1) as f64;
        for (k, c) in out.iter_mut().enumerate() {
            match (t[k], p[k]) {
                (true, true) => c.tp += w,
                (false, true) => c.fp += w,
                (true, false) => c.fn_ += w,
                (false, false) => c.tn += w,
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cc(tp: f64, fp: f64, fn_: f64) -> ConfusionCounts {
        ConfusionCounts::new(tp, fp, fn_, 0.0).unwrap()
    }

    #[test]
    fn hand_examples() {
        assert_eq!(fbeta(&cc(1.0, 0.0, 0.0), BETA), 1.0);
        assert!((fbeta(&cc(2.0, 1.0, 1.0), BETA) - 10.0 / 15.0).abs() < 1e-15);
        assert_eq!(fbeta(&cc(0.0, 0.0, 0.0), BETA), 0.0);
        assert_eq!(gbeta(&cc(1.0, 0.0, 0.0), BETA), 1.0);
        assert!((gbeta(&cc(2.0, 1.0, 1.0), BETA) - 0.4).abs() < 1e-15);
        assert_eq!(gbeta(&cc(0.0, 0.0, 0.0), BETA), 0.0);
    }

    #[test]
    fn negative_counts_rejected() {
        assert!(ConfusionCounts::new(-1.0, 0.0, 0.0, 0.0).is_err());
        assert!(ConfusionCounts::new(f64::NAN, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn union_weighting() {
        // true {0}, pred {0,1}: weight 1/2 on every class.
        let c = per_class_counts(&[vec![0]], &[vec![0, 1]], 3).unwrap();
        assert_eq!(c[0], ConfusionCounts { tp: 0.5, fp: 0.0, fn_: 0.0, tn: 0.0 });
        assert_eq!(c[1], ConfusionCounts { tp: 0.0, fp: 0.5, fn_: 0.0, tn: 0.0 });
        assert_eq!(c[2], ConfusionCounts { tp: 0.0, fp: 0.0, fn_: 0.0, tn: 0.5 });
        assert!(per_class_counts(&[vec![3]], &[vec![]], 3).is_err());
        assert!(per_class_counts(&[vec![0]], &[], 3).is_err());
    }

    proptest! {
        #[test]
        fn beta_one_is_harmonic_mean(tp in 0.01f64..50.0, fp in 0.0f64..50.0, fn_ in 0.0f64..50.0) {
            let p = tp / (tp + fp);
            let r = tp / (tp + fn_);
            let f1 = 2.0 * p * r / (p + r);
            prop_assert!((fbeta(&cc(tp, fp, fn_), 1.0) - f1).abs() < 1e-12);
        }

        #[test]
        fn measures_lie_in_unit_interval(tp in 0.0f64..50.0, fp in 0.0f64..50.0, fn_ in 0.0f64..50.0) {
            let c = cc(tp, fp, fn_);
            for v in [fbeta(&c, BETA), gbeta(&c, BETA)] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
