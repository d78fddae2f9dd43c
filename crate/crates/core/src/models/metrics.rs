use serde::{Deserialize, Serialize};

use crate::error::{validation, ClampError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub mcc: f64,
    pub nmcc: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<Vec<Vec<u64>>> {
    if preds.len() != labels.len() {
        return Err(ClampError::Shape {
            expected: format!("{} predictions", labels.len()),
            got: format!("{}", preds.len()),
        });
    }
    let mut c = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= n_classes || l >= n_classes {
            return Err(validation(format!("class index outside [0, {n_classes})")));
        }
        c[l][p] += 1;
    }
    Ok(c)
}

/// Multiclass Matthews correlation from a confusion matrix; 0 when the
/// denominator vanishes.
pub fn mcc_from_confusion(c: &[Vec<u64>]) -> f64 {
    let k = c.len();
    let s: f64 = c.iter().flatten().map(|&v| v as f64).sum();
    let correct: f64 = (0..k).map(|i| c[i][i] as f64).sum();
    let t: Vec<f64> = (0..k).map(|i| c[i].iter().sum::<u64>() as f64).collect();
    let p: Vec<f64> = (0..k).map(|j| (0..k).map(|i| c[i][j]).sum::<u64>() as f64).collect();
    let pt: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
    let pp: f64 = p.iter().map(|v| v * v).sum();
    let tt: f64 = t.iter().map(|v| v * v).sum();
    let denom = ((s * s - pp) * (s * s - tt)).sqrt();
    if denom == 0.0 || !denom.is_finite() {
        0.0
    } else {
        (correct * s - pt) / denom
    }
}

pub fn nmcc(mcc: f64) -> f64 {
    (mcc + 1.0) / 2.0
}

pub fn evaluate(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<Metrics> {
    if labels.is_empty() {
        return Err(ClampError::Empty("evaluation set".into()));
    }
    let confusion = confusion_matrix(preds, labels, n_classes)?;
    let correct: u64 = (0..n_classes).map(|i| confusion[i][i]).sum();
    let mcc = mcc_from_confusion(&confusion);
    Ok(Metrics { accuracy: correct as f64 / labels.len() as f64, mcc, nmcc: nmcc(mcc), confusion })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Covariance form: sum over class pairs of indicator covariances.
    fn brute_mcc(c: &[Vec<u64>]) -> f64 {
        let k = c.len();
        let mut pairs = Vec::new();
        for i in 0..k {
            for j in 0..k {
                for _ in 0..c[i][j] {
                    pairs.push((i, j));
                }
            }
        }
        let n = pairs.len() as f64;
        let cov = |a: &dyn Fn(usize, usize) -> usize, b: &dyn Fn(usize, usize) -> usize| {
            let mut total = 0.0;
            for cls in 0..k {
                let xs: Vec<f64> = pairs.iter().map(|&(t, p)| (a(t, p) == cls) as u8 as f64).collect();
                let ys: Vec<f64> = pairs.iter().map(|&(t, p)| (b(t, p) == cls) as u8 as f64).collect();
                let mx = xs.iter().sum::<f64>() / n;
                let my = ys.iter().sum::<f64>() / n;
                total += xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
            }
            total
        };
        let truth = |t: usize, _p: usize| t;
        let pred = |_t: usize, p: usize| p;
        let d = (cov(&truth, &truth) * cov(&pred, &pred)).sqrt();
        if d == 0.0 {
            0.0
        } else {
            cov(&truth, &pred) / d
        }
    }

    #[test]
    fn perfect_and_constant() {
        let labels = [0, 1, 2, 1, 0, 2];
        let m = evaluate(&labels, &labels, 3).unwrap();
        assert_eq!((m.accuracy, m.nmcc), (1.0, 1.0));
        let m = evaluate(&[1; 6], &labels, 3).unwrap();
        assert_eq!((m.mcc, m.nmcc), (0.0, 0.5));
        assert!(evaluate(&[], &[], 3).is_err());
        assert!(evaluate(&[0], &[0, 1], 3).is_err());
    }

    #[test]
    fn binary_case_matches_classic_formula() {
        let c = vec![vec![5, 2], vec![1, 7]];
        let (tn, fp, fn_, tp) = (5.0, 2.0, 1.0, 7.0);
        let classic = (tp * tn - fp * fn_) / f64::sqrt((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_));
        assert!((mcc_from_confusion(&c) - classic).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn matches_brute_force(cells in proptest::collection::vec(0u64..6, 9)) {
            let c: Vec<Vec<u64>> = cells.chunks(3).map(|r| r.to_vec()).collect();
            prop_assume!(cells.iter().sum::<u64>() > 0);
            prop_assert!((mcc_from_confusion(&c) - brute_mcc(&c)).abs() < 1e-12);
        }

        #[test]
        fn relabeling_invariance(
            pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..50),
            perm_idx in 0usize..24,
        ) {
            let mut perm = vec![0, 1, 2, 3];
            let mut k = perm_idx;
            for i in (1..4).rev() {
                perm.swap(i, k % (i + 1));
                k /= i + 1;
            }
            let (l, p): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let lp: Vec<usize> = l.iter().map(|&v| perm[v]).collect();
            let pp: Vec<usize> = p.iter().map(|&v| perm[v]).collect();
            let a = evaluate(&p, &l, 4).unwrap();
            let b = evaluate(&pp, &lp, 4).unwrap();
            prop_assert!((a.accuracy - b.accuracy).abs() < 1e-15);
            prop_assert!((a.nmcc - b.nmcc).abs() < 1e-12);
        }
    }
}
