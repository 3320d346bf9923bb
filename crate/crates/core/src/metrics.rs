//! Evaluation measures: MAE, one-vs-rest AUC, multiclass AUC and balanced accuracy.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

fn check_pair(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("length mismatch: {a} vs {b}")));
    }
    if a == 0 {
        return Err(Error::Data("empty input".into()));
    }
    Ok(())
}

pub fn mae(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_pair(y_true.len(), y_pred.len())?;
    if y_true.iter().chain(y_pred).any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in mae input".into()));
    }
    Ok(y_true.iter().zip(y_pred).map(|(a, b)| (a - b).abs()).sum::<f64>() / y_true.len() as f64)
}

/// Rank-based AUC of `scores` for the positive set, counting ties as one half.
pub fn auc_one_vs_rest(scores: &[f64], is_class: &[bool]) -> Result<f64> {
    check_pair(scores.len(), is_class.len())?;
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::Data("NaN score".into()));
    }
    let n_pos = is_class.iter().filter(|&&c| c).count();
    let n_neg = is_class.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("AUC needs both positive and negative samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of mid-ranks (1-based) of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| is_class[k]).count() as f64;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaucWeighting {
    /// Each class weighted by its share of the samples.
    #[default]
    ClassCount,
    /// Plain mean over classes.
    Uniform,
}

/// Class-count-weighted mean of one-vs-rest AUCs.
pub fn mauc(scores: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    mauc_with(scores, labels, MaucWeighting::ClassCount)
}

pub fn mauc_with(scores: &DMatrix<f64>, labels: &[usize], weighting: MaucWeighting) -> Result<f64> {
    check_pair(scores.nrows(), labels.len())?;
    let c = scores.ncols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!("label {bad} has no score column")));
    }
    let n = labels.len() as f64;
    let mut total = 0.0;
    for class in 0..c {
        let is_class: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        let count = is_class.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::Data(format!("class {class} has no samples")));
        }
        let col: Vec<f64> = scores.column(class).iter().copied().collect();
        let auc = auc_one_vs_rest(&col, &is_class)?;
        total += match weighting {
            MaucWeighting::ClassCount => count as f64 / n * auc,
            MaucWeighting::Uniform => auc / c as f64,
        };
    }
    Ok(total)
}

/// Mean of per-class recalls over the classes present in `truth`.
pub fn balanced_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_pair(pred.len(), truth.len())?;
    let c = truth.iter().max().map_or(0, |m| m + 1);
    let mut hits = vec![0usize; c];
    let mut counts = vec![0usize; c];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[t] += 1;
        if p == t {
            hits[t] += 1;
        }
    }
    let present: Vec<usize> = (0..c).filter(|&k| counts[k] > 0).collect();
    Ok(present.iter().map(|&k| hits[k] as f64 / counts[k] as f64).sum::<f64>() / present.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(mae(&[0.0, 4.0], &[1.0, 1.0]).unwrap(), 2.0);
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mae(&[], &[]).is_err());
    }

    #[test]
    fn auc_examples() {
        let y = [false, false, true, true];
        assert_eq!(auc_one_vs_rest(&[0.1, 0.4, 0.35, 0.8], &y).unwrap(), 0.75);
        assert_eq!(auc_one_vs_rest(&[0.0, 0.1, 0.5, 0.9], &y).unwrap(), 1.0);
        assert_eq!(auc_one_vs_rest(&[0.3; 4], &y).unwrap(), 0.5);
        assert!(auc_one_vs_rest(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn mauc_examples() {
        let perfect = DMatrix::from_row_slice(3, 3, &[0.9, 0.05, 0.05, 0.1, 0.8, 0.1, 0.0, 0.2, 0.8]);
        assert_eq!(mauc(&perfect, &[0, 1, 2]).unwrap(), 1.0);
        let flat = DMatrix::from_element(4, 3, 1.0 / 3.0);
        assert_eq!(mauc(&flat, &[0, 1, 2, 2]).unwrap(), 0.5);
        assert!(mauc(&flat, &[0, 1, 1, 1]).is_err());
    }

    #[test]
    fn balanced_accuracy_examples() {
        assert_eq!(balanced_accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.5);
        assert_eq!(balanced_accuracy(&[0, 1, 0, 0], &[0, 1, 1, 2]).unwrap(), 0.5);
        assert!(balanced_accuracy(&[], &[]).is_err());
    }

    fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..20).prop_flat_map(|n| {
            (prop::collection::vec((0i32..6).prop_map(|v| v as f64 * 0.25), n), prop::collection::vec(any::<bool>(), n))
        })
    }

    proptest! {
        #[test]
        fn mae_symmetric_and_translation_invariant(
            a in prop::collection::vec(-100.0f64..100.0, 1..20),
            shift in -50.0f64..50.0,
            seed in any::<u64>(),
        ) {
            let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v * 0.5 + ((seed >> (i % 60)) & 7) as f64).collect();
            prop_assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
            let a2: Vec<f64> = a.iter().map(|v| v + shift).collect();
            let b2: Vec<f64> = b.iter().map(|v| v + shift).collect();
            prop_assert!((mae(&a2, &b2).unwrap() - mae(&a, &b).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn auc_invariant_to_monotone_maps((s, y) in scores_and_labels(), k in 0.1f64..5.0) {
            prop_assume!(y.iter().any(|&b| b) && y.iter().any(|&b| !b));
            let t: Vec<f64> = s.iter().map(|v| (k * v).exp() + v * v * v).collect();
            prop_assert_eq!(auc_one_vs_rest(&s, &y).unwrap(), auc_one_vs_rest(&t, &y).unwrap());
        }

        #[test]
        fn binary_mauc_is_auc((s, y) in scores_and_labels()) {
            prop_assume!(y.iter().any(|&b| b) && y.iter().any(|&b| !b));
            let m = DMatrix::from_fn(s.len(), 2, |i, j| if j == 1 { s[i] } else { 1.0 - s[i] });
            let labels: Vec<usize> = y.iter().map(|&b| b as usize).collect();
            let auc = auc_one_vs_rest(&s, &y).unwrap();
            prop_assert!((mauc(&m, &labels).unwrap() - auc).abs() < 1e-12);
        }
    }
}
