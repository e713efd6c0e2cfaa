use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Numerically stable softmax (max-subtraction, so shift-invariant).
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteScore);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// log(softmax(scores)), kept in log space so ln(0) never appears.
pub fn log_softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteScore);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = scores.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    Ok(scores.iter().map(|&v| v - log_sum).collect())
}

/// Mean over rows of -log softmax(row)[label].
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != logits.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            logits.rows()
        )));
    }
    let classes = logits.cols();
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let lp = log_softmax(logits.row(r))?;
        total -= lp[label];
    }
    Ok(total / logits.rows() as f64)
}

/// Index of the row maximum; ties go to the lowest class index so that
/// evaluation is deterministic.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != logits.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            logits.rows()
        )));
    }
    if logits.rows() == 0 {
        return Err(Error::InvalidArgument("accuracy of an empty batch".into()));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(r, &y)| argmax(logits.row(*r)) == y)
        .count();
    Ok(hits as f64 / logits.rows() as f64)
}

/// Mean over rows of KL(softmax(p_row) || softmax(q_row)), computed in log
/// space as sum_k p_k (log p_k - log q_k).
pub fn kl_divergence(logits_p: &Matrix, logits_q: &Matrix) -> Result<f64> {
    if logits_p.rows() != logits_q.rows() || logits_p.cols() != logits_q.cols() {
        return Err(Error::ShapeMismatch(format!(
            "kl_divergence: {}x{} vs {}x{}",
            logits_p.rows(),
            logits_p.cols(),
            logits_q.rows(),
            logits_q.cols()
        )));
    }
    let mut total = 0.0;
    for r in 0..logits_p.rows() {
        let lp = log_softmax(logits_p.row(r))?;
        let lq = log_softmax(logits_q.row(r))?;
        let mut row_kl = 0.0;
        for k in 0..lp.len() {
            row_kl += lp[k].exp() * (lp[k] - lq[k]);
        }
        total += row_kl;
    }
    Ok(total / logits_p.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn softmax_symmetry() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_shift_invariance() {
        let p = softmax(&[1000.0, 1000.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_direct_evaluation() {
        // e^0 : e^(ln 2) = 1 : 2
        let p = softmax(&[0.0, 2.0f64.ln()]).unwrap();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let err = softmax(&[0.0, f64::NAN]).unwrap_err();
        assert_eq!(err.to_string(), "non-finite score");
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let logits = Matrix::zeros(3, 10);
        let ce = cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((ce - 10.0f64.ln()).abs() < 1e-12, "ce = {ce}");
    }

    #[test]
    fn cross_entropy_confident_correct() {
        // -log softmax([20, 0])[0] = ln(1 + e^-20)
        let logits = Matrix::from_vec(1, 2, vec![20.0, 0.0]).unwrap();
        let ce = cross_entropy(&logits, &[0]).unwrap();
        // The log-sum-exp path subtracts 20 from ~20, so accuracy is limited
        // to absolute ~1e-15, not relative precision of the tiny result.
        let expected = (-20.0f64).exp().ln_1p();
        assert!((ce - expected).abs() < 1e-14, "ce = {ce:e}");
        assert!((ce - 2.061e-9).abs() < 1e-11);
    }

    #[test]
    fn cross_entropy_confident_wrong() {
        let logits = Matrix::from_vec(1, 2, vec![0.0, 20.0]).unwrap();
        let ce = cross_entropy(&logits, &[0]).unwrap();
        let expected = 20.0 + (-20.0f64).exp().ln_1p();
        assert!((ce - expected).abs() < 1e-12, "ce = {ce}");
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = Matrix::zeros(1, 3);
        assert!(matches!(
            cross_entropy(&logits, &[3]),
            Err(crate::error::Error::LabelOutOfRange {
                label: 3,
                classes: 3
            })
        ));
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[-5.0]), 0);
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let logits =
            Matrix::from_vec(3, 3, vec![9.0, 0.0, 0.0, 0.0, 9.0, 0.0, 0.0, 9.0, 0.0]).unwrap();
        let acc = accuracy(&logits, &[0, 1, 2]).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-15);
        assert!(accuracy(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn random_logits_score_near_chance() {
        let k = 5;
        let n = 20_000;
        let mut rng = SeededRng::new(321);
        let logits = Matrix::from_vec(n, k, rng.normal_vec(n * k, 1.0)).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.next_below(k as u64) as usize).collect();
        let acc = accuracy(&logits, &labels).unwrap();
        assert!((acc - 1.0 / k as f64).abs() < 0.02, "acc = {acc}");
    }

    #[test]
    fn kl_identical_is_zero() {
        let mut rng = SeededRng::new(1);
        let logits = Matrix::from_vec(4, 6, rng.normal_vec(24, 2.0)).unwrap();
        let kl = kl_divergence(&logits, &logits).unwrap();
        assert!(kl.abs() <= 1e-12);
    }

    #[test]
    fn kl_half_half_vs_nine_one() {
        // p = [0.5, 0.5], q = [0.9, 0.1]:
        // 0.5 ln(0.5/0.9) + 0.5 ln(0.5/0.1) = 0.5 ln(25/9)
        let p = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let q = Matrix::from_vec(1, 2, vec![0.9f64.ln(), 0.1f64.ln()]).unwrap();
        let kl = kl_divergence(&p, &q).unwrap();
        let expected = 0.5 * (25.0f64 / 9.0).ln();
        assert!((kl - expected).abs() < 1e-12);
        assert!((kl - 0.510826).abs() < 1e-6);
    }

    #[test]
    fn kl_is_asymmetric() {
        let p = Matrix::from_vec(1, 2, vec![0.9f64.ln(), 0.1f64.ln()]).unwrap();
        let q = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let kl = kl_divergence(&p, &q).unwrap();
        let expected = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((kl - expected).abs() < 1e-12);
        assert!((kl - 0.368064).abs() < 1e-6);
        // Strictly different from the reversed direction.
        assert!((kl - 0.510826).abs() > 0.1);
    }

    #[test]
    fn kl_rejects_shape_mismatch() {
        let p = Matrix::zeros(2, 3);
        let q = Matrix::zeros(2, 4);
        assert!(kl_divergence(&p, &q).is_err());
    }

    #[test]
    fn cross_entropy_matches_two_pass_oracle() {
        // Slow oracle: materialize the probabilities with a plain two-pass
        // softmax and take -ln p[label] directly.
        let mut rng = SeededRng::new(77);
        for _ in 0..50 {
            let rows = 1 + rng.next_below(6) as usize;
            let cols = 2 + rng.next_below(8) as usize;
            let logits = Matrix::from_vec(rows, cols, rng.normal_vec(rows * cols, 3.0)).unwrap();
            let labels: Vec<usize> = (0..rows)
                .map(|_| rng.next_below(cols as u64) as usize)
                .collect();

            let mut oracle = 0.0;
            for (r, &y) in labels.iter().enumerate() {
                let row = logits.row(r);
                let sum: f64 = row.iter().map(|&v| v.exp()).sum();
                oracle -= (row[y].exp() / sum).ln();
            }
            oracle /= rows as f64;

            let ce = cross_entropy(&logits, &labels).unwrap();
            assert!((ce - oracle).abs() < 1e-10, "ce={ce} oracle={oracle}");
        }
    }

    #[test]
    fn softmax_sums_to_one_on_extreme_rows() {
        // 1000 random rows with entries up to +-1e4.
        let mut rng = SeededRng::new(2024);
        for _ in 0..1000 {
            let len = 2 + rng.next_below(31) as usize;
            let row: Vec<f64> = (0..len)
                .map(|_| (rng.next_f64() * 2.0 - 1.0) * 1e4)
                .collect();
            let p = softmax(&row).unwrap();
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12, "sum = {sum}");
            // Entries 1e4 below the max legitimately underflow to exactly 0.
            assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut rng = SeededRng::new(31);
        for _ in 0..1000 {
            let cols = 2 + rng.next_below(10) as usize;
            let p = Matrix::from_vec(1, cols, rng.normal_vec(cols, 5.0)).unwrap();
            let q = Matrix::from_vec(1, cols, rng.normal_vec(cols, 5.0)).unwrap();
            let kl = kl_divergence(&p, &q).unwrap();
            assert!(kl >= -1e-12, "kl = {kl}");
        }
    }

    proptest! {
        #[test]
        fn softmax_normalizes(row in proptest::collection::vec(-100.0f64..100.0, 1..16)) {
            let p = softmax(&row).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn kl_self_is_zero(row in proptest::collection::vec(-50.0f64..50.0, 2..12)) {
            let m = Matrix::from_vec(1, row.len(), row).unwrap();
            let kl = kl_divergence(&m, &m).unwrap();
            prop_assert!(kl.abs() <= 1e-12);
        }
    }
}
