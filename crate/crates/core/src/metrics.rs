//! Offline and progressive evaluation metrics.

use crate::data::Label;

/// Probabilities are clipped to `[EPS, 1 - EPS]` before taking logs.
pub const LOGLOSS_EPS: f64 = 1e-15;

/// Area under the ROC curve as the Mann-Whitney statistic, with half
/// credit for tied scores. `None` unless both classes are present.
pub fn auc(scores: &[f64], labels: &[Label]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "one score per label");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let positives = labels.iter().filter(|l| l.is_click()).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    // sum of (1-based, tie-averaged) ranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| labels[k].is_click()).count();
        rank_sum += avg_rank * pos_in_tie as f64;
        i = j + 1;
    }
    let p = positives as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// Mean negative log-likelihood of the labels; `None` for empty input.
pub fn logloss(probs: &[f64], labels: &[Label]) -> Option<f64> {
    assert_eq!(probs.len(), labels.len(), "one probability per label");
    if probs.is_empty() {
        return None;
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&q, y)| {
            let q = q.clamp(LOGLOSS_EPS, 1.0 - LOGLOSS_EPS);
            if y.is_click() {
                -q.ln()
            } else {
                -(1.0 - q).ln()
            }
        })
        .sum();
    Some(total / probs.len() as f64)
}

/// Mean prediction over empirical click rate; `None` without clicks.
pub fn calibration_ratio(probs: &[f64], labels: &[Label]) -> Option<f64> {
    assert_eq!(probs.len(), labels.len(), "one probability per label");
    let clicks = labels.iter().filter(|l| l.is_click()).count();
    if clicks == 0 {
        return None;
    }
    Some(probs.iter().sum::<f64>() / clicks as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(bits: &[bool]) -> Vec<Label> {
        bits.iter().map(|&b| if b { Label::Click } else { Label::NoClick }).collect()
    }

    fn pairwise_auc(scores: &[f64], labels: &[Label]) -> f64 {
        let mut credit = 0.0;
        let mut pairs = 0.0;
        for (i, yi) in labels.iter().enumerate() {
            for (j, yj) in labels.iter().enumerate() {
                if yi.is_click() && !yj.is_click() {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        credit += 1.0;
                    } else if scores[i] == scores[j] {
                        credit += 0.5;
                    }
                }
            }
        }
        credit / pairs
    }

    #[test]
    fn auc_examples() {
        let y = labels(&[false, false, true, true]);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &y), Some(1.0));
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &y), Some(0.0));
        assert_eq!(auc(&[0.3; 4], &y), Some(0.5));
        assert_eq!(auc(&[0.3, 0.4], &labels(&[true, true])), None);
    }

    #[test]
    fn constant_base_rate_predictor() {
        let y = labels(&[true, false, false, false, false]);
        let q = [0.2; 5];
        assert_eq!(auc(&q, &y), Some(0.5));
        let entropy = -(0.2f64 * 0.2f64.ln() + 0.8 * 0.8f64.ln());
        assert!((logloss(&q, &y).unwrap() - entropy).abs() < 1e-15);
        assert!((calibration_ratio(&q, &y).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn logloss_clips() {
        let l = logloss(&[0.0, 1.0], &labels(&[true, false])).unwrap();
        assert!(l.is_finite() && l > 30.0);
        assert_eq!(logloss(&[], &[]), None);
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting(data in prop::collection::vec((0u8..20, any::<bool>()), 2..300)) {
            let scores: Vec<f64> = data.iter().map(|&(s, _)| s as f64 / 20.0).collect();
            let y = labels(&data.iter().map(|&(_, b)| b).collect::<Vec<_>>());
            match auc(&scores, &y) {
                Some(a) => {
                    prop_assert_eq!(a, pairwise_auc(&scores, &y));
                    let reversed: Vec<f64> = scores.iter().map(|s| -s).collect();
                    prop_assert!((auc(&reversed, &y).unwrap() - (1.0 - a)).abs() < 1e-12);
                }
                None => prop_assert!(y.iter().all(|l| *l == y[0])),
            }
        }
    }
}
