//! RMSE, MAE and the asymmetric prognostics score over prediction errors
//! `d_i = prediction_i - true_i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn non_empty(d: &[f64], what: &str) -> Result<()> {
    if d.is_empty() {
        Err(Error::Data(format!("{what} of an empty error vector")))
    } else {
        Ok(())
    }
}

pub fn errors(predictions: &[f64], truth: &[f64]) -> Result<Vec<f64>> {
    if predictions.len() != truth.len() {
        return Err(Error::Shape {
            op: "errors",
            lhs: vec![predictions.len()],
            rhs: vec![truth.len()],
        });
    }
    Ok(predictions.iter().zip(truth).map(|(p, t)| p - t).collect())
}

pub fn rmse(d: &[f64]) -> Result<f64> {
    non_empty(d, "rmse")?;
    Ok((d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64).sqrt())
}

pub fn mae(d: &[f64]) -> Result<f64> {
    non_empty(d, "mae")?;
    Ok(d.iter().map(|x| x.abs()).sum::<f64>() / d.len() as f64)
}

/// Sum of `exp(-d/13) - 1` for early (`d < 0`) and `exp(d/10) - 1` for late predictions.
pub fn score(d: &[f64]) -> Result<f64> {
    non_empty(d, "score")?;
    Ok(d.iter()
        .map(|&x| {
            if x < 0.0 {
                (-x / 13.0).exp_m1()
            } else {
                (x / 10.0).exp_m1()
            }
        })
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub rmse: f64,
    pub mae: f64,
    pub score: f64,
}

impl MetricTriple {
    pub fn evaluate(predictions: &[f64], truth: &[f64]) -> Result<Self> {
        let d = errors(predictions, truth)?;
        Ok(MetricTriple {
            rmse: rmse(&d)?,
            mae: mae(&d)?,
            score: score(&d)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::E;

    #[test]
    fn closed_forms() {
        assert_eq!(rmse(&[0.0, 0.0]).unwrap(), 0.0);
        assert!((rmse(&[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(rmse(&[-5.0]).unwrap(), 5.0);
        assert_eq!(mae(&[-2.0, 2.0]).unwrap(), 2.0);
        assert_eq!(mae(&[1.0, 2.0, 3.0]).unwrap(), 2.0);
        assert_eq!(mae(&[0.0]).unwrap(), 0.0);
        assert_eq!(score(&[0.0]).unwrap(), 0.0);
        assert!((score(&[10.0]).unwrap() - (E - 1.0)).abs() < 1e-12);
        assert!((score(&[-13.0]).unwrap() - (E - 1.0)).abs() < 1e-12);
        assert!((score(&[13.0]).unwrap() - 2.6693).abs() < 1e-4);
        assert!(score(&[13.0]).unwrap() > score(&[-13.0]).unwrap());
    }

    #[test]
    fn empty_is_an_error() {
        assert!(rmse(&[]).is_err());
        assert!(mae(&[]).is_err());
        assert!(score(&[]).is_err());
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(d in prop::collection::vec(-200.0f64..200.0, 1..50)) {
            prop_assert!(rmse(&d).unwrap() >= mae(&d).unwrap() * (1.0 - 1e-12));
        }

        #[test]
        fn late_is_worse(d in prop::collection::vec(1e-3f64..100.0, 1..50)) {
            let neg: Vec<f64> = d.iter().map(|x| -x).collect();
            prop_assert!(score(&d).unwrap() > score(&neg).unwrap());
        }

        #[test]
        fn permutation_invariant_and_non_negative(
            d in prop::collection::vec(-100.0f64..100.0, 1..30),
            rot in 0usize..30,
        ) {
            let mut p = d.clone();
            let r = rot % p.len();
            p.rotate_left(r);
            for f in [rmse, mae, score] {
                let a = f(&d).unwrap();
                let b = f(&p).unwrap();
                prop_assert!(a >= 0.0);
                prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
            }
        }

        #[test]
        fn zero_only_for_zero_errors(d in prop::collection::vec(-10.0f64..10.0, 1..20)) {
            let all_zero = d.iter().all(|x| *x == 0.0);
            for f in [rmse, mae, score] {
                prop_assert_eq!(f(&d).unwrap() == 0.0, all_zero);
            }
        }
    }
}
