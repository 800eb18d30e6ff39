//! Selection quality metrics.

use crate::error::{contract, Error, Result};
use crate::matrix::Matrix;

/// Normalized Chamfer cosine similarity: the mean over rows of `y` of the
/// best cosine similarity against any row of `y_hat`.
pub fn nccs(y: &Matrix, y_hat: &Matrix) -> Result<f64> {
    if y.shape() != y_hat.shape() {
        return Err(Error::Shape {
            op: "nccs",
            left: y.shape(),
            right: y_hat.shape(),
        });
    }
    if y.rows() == 0 {
        return Err(contract("nccs of an empty selection"));
    }
    // squared norms; sqrt(a * a) == a makes self-similarity exactly one
    let norms = |m: &Matrix| -> Result<Vec<f64>> {
        (0..m.rows())
            .map(|i| {
                let n = m.row(i).iter().map(|x| x * x).sum::<f64>();
                if n == 0.0 {
                    Err(contract(format!("row {i} has zero norm")))
                } else {
                    Ok(n)
                }
            })
            .collect()
    };
    let (ny, nh) = (norms(y)?, norms(y_hat)?);
    let mut total = 0.0;
    for i in 0..y.rows() {
        let best = (0..y_hat.rows())
            .map(|j| {
                let dot: f64 = y.row(i).iter().zip(y_hat.row(j)).map(|(a, b)| a * b).sum();
                (dot / (ny[i] * nh[j]).sqrt()).clamp(-1.0, 1.0)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        total += best;
    }
    Ok(total / y.rows() as f64)
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half.
pub fn ranking_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(contract("scores and labels differ in length"));
    }
    let pos: Vec<f64> = scores.iter().zip(positive).filter(|(_, &p)| p).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(positive).filter(|(_, &p)| !p).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(contract("AUC needs both positive and negative examples"));
    }
    let mut wins = 0.0;
    for p in &pos {
        for q in &neg {
            if p > q {
                wins += 1.0;
            } else if p == q {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_similarity_is_one() {
        let y = Matrix::from_rows(&[[1.0, 2.0], [-3.0, 0.5], [0.0, 1.0], [0.1, 0.7]]).unwrap();
        assert_eq!(nccs(&y, &y).unwrap(), 1.0);
    }

    #[test]
    fn single_row_is_cosine() {
        let a = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        assert!((nccs(&a, &b).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn order_invariant() {
        let a = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(nccs(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn zero_row_rejected() {
        let a = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(matches!(nccs(&a, &b), Err(Error::Contract(_))));
        assert!(nccs(&b, &a).is_err());
    }

    #[test]
    fn auc_bounds() {
        let labels = [true, false, true, false];
        assert_eq!(ranking_auc(&[0.9, 0.1, 0.8, 0.2], &labels).unwrap(), 1.0);
        assert_eq!(ranking_auc(&[0.1, 0.9, 0.2, 0.8], &labels).unwrap(), 0.0);
        assert_eq!(ranking_auc(&[0.5; 4], &labels).unwrap(), 0.5);
        assert!(ranking_auc(&[0.5], &[true]).is_err());
    }
}
