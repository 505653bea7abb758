use lam_core::metrics::{accuracy, average_precision, macro_average_precision};
use proptest::prelude::*;

/// Mean over positives of precision at that positive's rank, with ranks
/// computed by pairwise comparison.
fn ap_oracle(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n = scores.len();
    let ahead = |i: usize, j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let pos: Vec<usize> = (0..n).filter(|&i| labels[i] == 1).collect();
    if pos.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &i in &pos {
        let k = (0..n).filter(|&j| ahead(i, j)).count() + 1;
        let hits = pos.iter().filter(|&&j| j == i || ahead(i, j)).count();
        total += hits as f64 / k as f64;
    }
    Some(total / pos.len() as f64)
}

fn instance(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (1..=max).prop_flat_map(|n| {
        // scores on a coarse grid so ties are common
        (prop::collection::vec((0u32..=20).prop_map(|k| k as f64 / 20.0), n), prop::collection::vec(0u8..2, n))
    })
}

proptest! {
    #[test]
    fn ap_matches_pairwise_oracle((scores, labels) in instance(200)) {
        let got = average_precision(&scores, &labels).unwrap();
        let want = ap_oracle(&scores, &labels);
        match (got, want) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}"),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn ap_invariant_under_monotone_transform((scores, labels) in instance(200)) {
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() * 2.0 - 7.0).collect();
        prop_assert_eq!(average_precision(&scores, &labels).unwrap(), average_precision(&warped, &labels).unwrap());
    }

    #[test]
    fn accuracy_matches_counting((scores, labels) in instance(1000), thr in 0.0f64..1.0) {
        let mut correct = 0;
        for i in 0..scores.len() {
            let predicted = if scores[i] >= thr { 1 } else { 0 };
            if predicted == labels[i] {
                correct += 1;
            }
        }
        prop_assert_eq!(accuracy(&scores, &labels, thr).unwrap(), correct as f64 / scores.len() as f64);
    }

    #[test]
    fn accuracy_permutation_and_duplication_invariant((scores, labels) in instance(300), rot in 0usize..300) {
        let n = scores.len();
        let r = rot % n;
        let mut s2 = scores.clone();
        let mut l2 = labels.clone();
        s2.rotate_left(r);
        l2.rotate_left(r);
        let base = accuracy(&scores, &labels, 0.5).unwrap();
        prop_assert!((accuracy(&s2, &l2, 0.5).unwrap() - base).abs() < 1e-12);
        let dup_s: Vec<f64> = scores.iter().chain(&scores).copied().collect();
        let dup_l: Vec<u8> = labels.iter().chain(&labels).copied().collect();
        prop_assert_eq!(accuracy(&dup_s, &dup_l, 0.5).unwrap(), base);
    }

    #[test]
    fn metrics_lie_in_unit_interval((scores, labels) in instance(200)) {
        if let Some(ap) = average_precision(&scores, &labels).unwrap() {
            prop_assert!((0.0..=1.0).contains(&ap));
        }
        if let Some(ap) = macro_average_precision(&scores, &labels).unwrap() {
            prop_assert!((0.0..=1.0).contains(&ap));
        }
    }
}

#[test]
fn perfect_scores_give_unit_metrics() {
    let labels = [1u8, 0, 0, 1, 0, 0, 0];
    let scores: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    assert_eq!(average_precision(&scores, &labels).unwrap(), Some(1.0));
    assert_eq!(accuracy(&scores, &labels, 0.5).unwrap(), 1.0);
}

#[test]
fn constant_scores_predict_everything_positive() {
    let labels = [1u8, 0, 0, 1, 0];
    assert_eq!(accuracy(&[0.5; 5], &labels, 0.5).unwrap(), 0.4);
}

#[test]
fn staircase_ap_changes_when_samples_are_duplicated() {
    // duplicated negatives tie with their originals and land between ranks
    let once = average_precision(&[0.9, 0.8], &[0, 1]).unwrap().unwrap();
    let twice = average_precision(&[0.9, 0.8, 0.9, 0.8], &[0, 1, 0, 1]).unwrap().unwrap();
    assert_eq!(once, 0.5);
    assert!((twice - (1.0 / 3.0 + 0.5) / 2.0).abs() < 1e-12);
}
