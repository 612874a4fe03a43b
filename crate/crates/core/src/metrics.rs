//! Evaluation metrics: PLCC, SRCC and RMSE.

use crate::error::{IqaError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub plcc: f64,
    pub srcc: f64,
    pub rmse: f64,
    pub n: usize,
}

impl MetricReport {
    pub fn compute(pred: &[f64], target: &[f64]) -> Result<Self> {
        Ok(Self {
            plcc: plcc(pred, target)?,
            srcc: srcc(pred, target)?,
            rmse: rmse(pred, target)?,
            n: pred.len(),
        })
    }

    pub const CSV_HEADER: &'static str = "n,plcc,srcc,rmse";

    pub fn to_csv_line(&self) -> String {
        format!("{},{:.10},{:.10},{:.10}", self.n, self.plcc, self.srcc, self.rmse)
    }
}

impl std::fmt::Display for MetricReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "samples  {:>10}", self.n)?;
        writeln!(f, "PLCC     {:>10.4}", self.plcc)?;
        writeln!(f, "SRCC     {:>10.4}", self.srcc)?;
        write!(f, "RMSE     {:>10.4}", self.rmse)
    }
}

fn check_pair(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(IqaError::LengthMismatch(pred.len(), target.len()));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Pearson correlation from centered sums; fails on a constant input.
pub fn plcc(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    if pred.len() < 2 {
        return Err(IqaError::CorrelationNeedsTwo);
    }
    let (mp, mt) = (mean(pred), mean(target));
    let (mut num, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(target) {
        num += (t - mt) * (p - mp);
        sp += (p - mp) * (p - mp);
        st += (t - mt) * (t - mt);
    }
    if sp == 0.0 || st == 0.0 {
        return Err(IqaError::ZeroVariance);
    }
    Ok((num / (st.sqrt() * sp.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with tied values sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // Positions start..end hold ranks start+1..=end.
        let avg = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman correlation: PLCC of average ranks.
pub fn srcc(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    if pred.len() < 2 {
        return Err(IqaError::CorrelationNeedsTwo);
    }
    plcc(&average_ranks(pred), &average_ranks(target)).map_err(|e| match e {
        IqaError::ZeroVariance => IqaError::ZeroRankVariance,
        other => other,
    })
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    if pred.is_empty() {
        return Err(IqaError::EmptyBatch);
    }
    let ss: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn plcc_examples() {
        let t = [0.1, 0.5, 0.2, 0.9, 0.4];
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        let aff: Vec<f64> = t.iter().map(|v| 3.0 * v + 7.0).collect();
        assert!((plcc(&t, &t).unwrap() - 1.0).abs() < 1e-15);
        assert!((plcc(&neg, &t).unwrap() + 1.0).abs() < 1e-15);
        assert!((plcc(&aff, &t).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(plcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(IqaError::ZeroVariance)));
        assert!(matches!(plcc(&[1.0], &[1.0]), Err(IqaError::CorrelationNeedsTwo)));
    }

    #[test]
    fn srcc_examples() {
        let t = [1.0, 2.0, 3.0, 4.0, 5.0];
        let rev = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert!((srcc(&rev, &t).unwrap() + 1.0).abs() < 1e-15);
        let mono: Vec<f64> = t.iter().map(|v: &f64| v.exp() - 10.0).collect();
        assert!((srcc(&mono, &t).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(srcc(&[2.0, 2.0], &[1.0, 2.0]), Err(IqaError::ZeroRankVariance)));
    }

    #[test]
    fn srcc_with_ties() {
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
        // Ranks [1, 2.5, 2.5, 4] vs [1, 2, 3, 4]: centered cross sum 4.5,
        // squared sums 4.5 and 5.
        let want = 4.5 / (4.5f64.sqrt() * 5f64.sqrt());
        let got = srcc(&[1.0, 2.0, 2.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[1.5, 2.5], &[1.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 3.5355).abs() < 1e-4);
        assert!(matches!(rmse(&[], &[]), Err(IqaError::EmptyBatch)));
    }

    proptest! {
        #[test]
        fn srcc_monotone_invariance(x in proptest::collection::vec(-10.0f64..10.0, 3..50), y in proptest::collection::vec(-10.0f64..10.0, 50)) {
            let y = &y[..x.len()];
            if let Ok(base) = srcc(&x, y) {
                let tx: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0 * v).collect();
                let ty: Vec<f64> = y.iter().map(|v| (v / 3.0).exp()).collect();
                prop_assert!((srcc(&tx, y).unwrap() - base).abs() < 1e-12);
                prop_assert!((srcc(&x, &ty).unwrap() - base).abs() < 1e-12);
            }
        }

        #[test]
        fn plcc_affine(x in proptest::collection::vec(-10.0f64..10.0, 3..50), a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v * 0.5 + (i as f64).sin()).collect();
            if let Ok(base) = plcc(&x, &y) {
                let pos: Vec<f64> = x.iter().map(|v| a * v + b).collect();
                let neg: Vec<f64> = x.iter().map(|v| -a * v + b).collect();
                prop_assert!((plcc(&pos, &y).unwrap() - base).abs() < 1e-9);
                prop_assert!((plcc(&neg, &y).unwrap() + base).abs() < 1e-9);
            }
        }

        #[test]
        fn rmse_triangle(v in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 1..40)) {
            let a: Vec<f64> = v.iter().map(|t| t.0).collect();
            let b: Vec<f64> = v.iter().map(|t| t.1).collect();
            let c: Vec<f64> = v.iter().map(|t| t.2).collect();
            prop_assert!(rmse(&a, &c).unwrap() <= rmse(&a, &b).unwrap() + rmse(&b, &c).unwrap() + 1e-12);
        }
    }
}
