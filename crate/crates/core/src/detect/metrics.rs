use serde::{Deserialize, Serialize};

use super::DetectError;

/// Scores at or above this are predicted as class 1.
pub const THRESHOLD: f64 = 0.5;

/// Mann-Whitney AUC from average ranks; tied scores count one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, DetectError> {
    if scores.len() != labels.len() {
        return Err(DetectError::LengthMismatch);
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(DetectError::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie group shares the mean rank
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum += mean_rank;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Pairwise concordance over every positive-negative pair.
pub fn auc_bruteforce(scores: &[f64], labels: &[u8]) -> Result<f64, DetectError> {
    let mut total = 0.0;
    let mut pairs = 0usize;
    let pos = scores.iter().zip(labels).filter(|(_, l)| **l == 1).map(|(s, _)| *s);
    for si in pos {
        for sj in scores.iter().zip(labels).filter(|(_, l)| **l == 0).map(|(s, _)| *s) {
            pairs += 1;
            total += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    if pairs == 0 {
        return Err(DetectError::UndefinedAuc);
    }
    Ok(total / pairs as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// Set when a ratio had a zero denominator and was reported as 0.
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

impl ClassMetrics {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { (0.0, true) } else { (num as f64 / den as f64, false) };
        let (precision, precision_undefined) = ratio(tp, tp + fp);
        let (recall, recall_undefined) = ratio(tp, tp + fn_);
        let (f1, f1_undefined) =
            if precision + recall == 0.0 { (0.0, true) } else { (2.0 * precision * recall / (precision + recall), false) };
        Self { precision, recall, f1, support: tp + fn_, precision_undefined, recall_undefined, f1_undefined }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Index 0 is the baseline class, index 1 the paired class.
    pub per_class: [ClassMetrics; 2],
    pub auc: f64,
    pub confusion: Confusion,
}

pub fn metrics(scores: &[f64], labels: &[u8]) -> Result<Metrics, DetectError> {
    let auc = auc(scores, labels)?;
    let mut c = Confusion::default();
    for (s, l) in scores.iter().zip(labels) {
        match (*s >= THRESHOLD, *l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(Metrics {
        per_class: [ClassMetrics::from_counts(c.tn, c.fn_, c.fp), ClassMetrics::from_counts(c.tp, c.fp, c.fn_)],
        auc,
        confusion: c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_scores() {
        let m = metrics(&[1.0, 0.0, 1.0, 0.0], &[1, 0, 1, 0]).unwrap();
        assert_eq!(m.auc, 1.0);
        for c in &m.per_class {
            assert_eq!((c.precision, c.recall, c.f1), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn three_of_four_pairs() {
        assert_eq!(auc(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]).unwrap(), 0.75);
    }

    #[test]
    fn constant_scores_give_half() {
        assert_eq!(auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn undefined_precision_flagged() {
        let m = metrics(&[0.1, 0.2], &[1, 0]).unwrap();
        assert!(m.per_class[1].precision_undefined);
        assert_eq!(m.per_class[1].precision, 0.0);
        assert!(!m.per_class[0].precision_undefined);
        assert!(auc(&[0.1], &[1]).is_err());
    }

    proptest! {
        #[test]
        fn rank_auc_equals_pairwise(
            data in proptest::collection::vec((0u8..6, any::<bool>()), 2..=20)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| f64::from(*s) / 5.0).collect();
            let labels: Vec<u8> = data.iter().map(|(_, l)| u8::from(*l)).collect();
            match (auc(&scores, &labels), auc_bruteforce(&scores, &labels)) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                (Err(_), Err(_)) => {}
                other => prop_assert!(false, "disagree: {:?}", other),
            }
        }
    }
}
