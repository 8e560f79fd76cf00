use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speechbci::diffusion::rank_classes;
use speechbci::online::{feedback_intensity, Prediction, SessionReport, TrialRow};
use speechbci::train::{confusion_matrix, topk_accuracy};

fn brute_topk(probs: &[Vec<f64>], truth: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for (p, &t) in probs.iter().zip(truth) {
        // A class is in the top k when fewer than k classes beat it, counting
        // ties at lower indices as beating it.
        let better = (0..p.len()).filter(|&j| p[j] > p[t] || (p[j] == p[t] && j < t)).count();
        if better < k {
            hits += 1;
        }
    }
    hits as f64 / truth.len() as f64
}

fn brute_confusion(pred: &[usize], truth: &[usize], k: usize) -> Vec<Vec<usize>> {
    (0..k)
        .map(|i| (0..k).map(|j| pred.iter().zip(truth).filter(|&(&p, &t)| t == i && p == j).count()).collect())
        .collect()
}

fn random_probs(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    // Coarse values so ties are common.
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0..4) as f64 + 0.5).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

#[test]
fn topk_and_confusion_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let k = rng.random_range(2..7);
        let n = rng.random_range(1..40);
        let probs: Vec<Vec<f64>> = (0..n).map(|_| random_probs(&mut rng, k)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let rankings: Vec<Vec<usize>> = probs.iter().map(|p| rank_classes(p)).collect();
        let mut prev = 0.0;
        for kk in 1..=k {
            let got = topk_accuracy(&rankings, &truth, kk).unwrap();
            assert_eq!(got, brute_topk(&probs, &truth, kk), "case {case}, k={kk}");
            assert!(got >= prev, "case {case}: top-{kk} below top-{}", kk - 1);
            prev = got;
        }
        assert_eq!(prev, 1.0);
        let pred: Vec<usize> = rankings.iter().map(|r| r[0]).collect();
        let m = confusion_matrix(&pred, &truth, k).unwrap();
        assert_eq!(m, brute_confusion(&pred, &truth, k), "case {case}");
        for (c, row) in m.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), truth.iter().filter(|&&t| t == c).count());
        }
    }
}

#[test]
fn ranking_breaks_ties_toward_lower_index() {
    assert_eq!(rank_classes(&[0.2, 0.4, 0.4, 0.0]), vec![1, 2, 0, 3]);
    assert_eq!(rank_classes(&[0.25; 4]), vec![0, 1, 2, 3]);
}

#[test]
fn feedback_intensity_anchors_and_monotonicity() {
    assert_eq!(feedback_intensity(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 1.0);
    assert_eq!(feedback_intensity(&[0.25; 4]).unwrap(), 0.0);
    assert_eq!(feedback_intensity(&[0.625, 0.125, 0.125, 0.125]).unwrap(), 0.5);
    assert!(feedback_intensity(&[0.7, 0.7]).is_err());
    assert!(feedback_intensity(&[f64::NAN, 1.0]).is_err());
    let mut last = 0.0;
    for i in 0..=100 {
        let m = 0.25 + 0.75 * i as f64 / 100.0;
        let rest = (1.0 - m) / 3.0;
        let v = feedback_intensity(&[rest, m, rest, rest]).unwrap();
        assert!((0.0..=1.0).contains(&v));
        assert!(v >= last);
        last = v;
    }
}

#[test]
fn report_aggregates_match_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let n = rng.random_range(1..30);
        let rows: Vec<TrialRow> = (0..n)
            .map(|i| {
                let cued = rng.random_range(0..4);
                if rng.random_bool(0.1) {
                    TrialRow::dropped(i, cued, "underrun")
                } else {
                    let mut p = random_probs(&mut rng, 4);
                    p.shuffle(&mut rng);
                    TrialRow::decoded(i, cued, Prediction::from_probabilities(p, 1.0).unwrap(), 0)
                }
            })
            .collect();
        let report = SessionReport::from_rows(rows.clone(), 4);
        report.verify().unwrap();
        let top1 = rows.iter().filter(|r| r.correct_top1).count() as f64 / n as f64;
        let top2 = rows.iter().filter(|r| r.correct_top2).count() as f64 / n as f64;
        assert_eq!(report.top1, top1);
        assert_eq!(report.top2, top2);
        assert!(report.top2 >= report.top1);
    }
}

#[test]
fn all_correct_rows_give_full_accuracy() {
    let rows: Vec<TrialRow> = (0..20)
        .map(|i| {
            let mut p = vec![0.0; 4];
            p[i % 4] = 1.0;
            TrialRow::decoded(i, i % 4, Prediction::from_probabilities(p, 1.0).unwrap(), 0)
        })
        .collect();
    let r = SessionReport::from_rows(rows, 4);
    assert_eq!((r.top1, r.top2), (1.0, 1.0));
}
