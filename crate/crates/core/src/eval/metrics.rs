use crate::error::{arg_err, IaplError, Result};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return arg_err(format!("{a} scores but {b} labels"));
    }
    if a == 0 {
        return arg_err("metric of an empty set");
    }
    Ok(())
}

/// Fraction of samples with `[prob >= threshold] == label`.
pub fn accuracy(probs: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_lengths(probs.len(), labels.len())?;
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| u8::from(p >= threshold) == y)
        .count();
    Ok(correct as f64 / probs.len() as f64)
}

/// Rank-based average precision: mean over positives of the precision at
/// their rank in descending-score order, ties kept in input order.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 {
        return Err(IaplError::Metric("average precision needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0.9, 0.1], &[1, 0], 0.5).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.5], &[1], 0.5).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.9, 0.2, 0.6], &[1, 0, 0], 0.5).unwrap(), 2.0 / 3.0);
        assert!(accuracy(&[0.9], &[1, 0], 0.5).is_err());
        assert!(accuracy(&[], &[], 0.5).is_err());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.9, 0.1], &[0, 1]).unwrap(), 0.5);
        assert_eq!(average_precision(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
        assert_eq!(average_precision(&[0.5, 0.5], &[1, 0]).unwrap(), 1.0);
        assert!(matches!(average_precision(&[0.3, 0.4], &[0, 0]), Err(IaplError::Metric(_))));
    }

    // Definition oracle: each positive's rank is one plus the samples ahead of
    // it (higher score, or equal score and earlier index); its precision is
    // the positives at or above that rank over the rank. Summed in rank order.
    fn ap_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let n = scores.len();
        let rank = |i: usize| 1 + (0..n).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count();
        let mut per: Vec<(usize, f64)> = (0..n)
            .filter(|&i| labels[i] == 1)
            .map(|i| {
                let r = rank(i);
                let hits = (0..n).filter(|&j| labels[j] == 1 && rank(j) <= r).count();
                (r, hits as f64 / r as f64)
            })
            .collect();
        per.sort_by_key(|p| p.0);
        per.iter().map(|p| p.1).sum::<f64>() / per.len() as f64
    }

    #[test]
    fn ap_matches_definition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let n = rng.gen_range(1..40);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 / 8.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            labels[rng.gen_range(0..n)] = 1;
            assert_eq!(average_precision(&scores, &labels).unwrap(), ap_oracle(&scores, &labels));
        }
    }

    proptest! {
        #[test]
        fn ap_invariant_under_monotone_maps(
            pairs in proptest::collection::vec((-5.0..5.0f64, 0u8..2), 1..50),
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let mut labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            labels[0] = 1;
            let mapped: Vec<f64> = scores.iter().map(|&s| (s * 0.7).exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(average_precision(&scores, &labels).unwrap(), average_precision(&mapped, &labels).unwrap());
        }

        #[test]
        fn accuracy_invariant_when_threshold_side_kept(
            pairs in proptest::collection::vec((0.0..1.0f64, 0u8..2), 1..50),
        ) {
            let probs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            // Monotone map fixing 0.5.
            let mapped: Vec<f64> = probs.iter().map(|&p| 0.5 + (p - 0.5).powi(3) * 4.0).collect();
            prop_assert_eq!(accuracy(&probs, &labels, 0.5).unwrap(), accuracy(&mapped, &labels, 0.5).unwrap());
        }
    }
}
