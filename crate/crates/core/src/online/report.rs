use std::fmt::Write as _;

use super::Prediction;
use crate::CLASS_NAMES;

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyStats {
    pub n: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
    /// First call, measured apart from the others.
    pub cold_ms: Option<f64>,
}

/// Mean and nearest-rank percentiles; `None` for an empty sample.
pub fn latency_stats(samples_ms: &[f64]) -> Option<LatencyStats> {
    if samples_ms.is_empty() {
        return None;
    }
    let mut sorted = samples_ms.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = |p: f64| sorted[((p * n as f64).ceil() as usize).clamp(1, n) - 1];
    Some(LatencyStats {
        n,
        mean_ms: sorted.iter().sum::<f64>() / n as f64,
        p50_ms: rank(0.50),
        p95_ms: rank(0.95),
        max_ms: sorted[n - 1],
        cold_ms: None,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialRow {
    pub trial_index: usize,
    pub cued: usize,
    /// `None` when the trial was dropped.
    pub prediction: Option<Prediction>,
    pub correct_top1: bool,
    pub correct_top2: bool,
    /// Sample index at which decoding started; the window ends there.
    pub decode_start: Option<u64>,
    pub dropped: Option<String>,
}

impl TrialRow {
    pub fn decoded(trial_index: usize, cued: usize, prediction: Prediction, decode_start: u64) -> Self {
        TrialRow {
            trial_index,
            cued,
            correct_top1: prediction.ranked.first() == Some(&cued),
            correct_top2: prediction.ranked.iter().take(2).any(|&c| c == cued),
            prediction: Some(prediction),
            decode_start: Some(decode_start),
            dropped: None,
        }
    }

    pub fn dropped(trial_index: usize, cued: usize, reason: &str) -> Self {
        TrialRow {
            trial_index,
            cued,
            prediction: None,
            correct_top1: false,
            correct_top2: false,
            decode_start: None,
            dropped: Some(reason.to_string()),
        }
    }

    pub fn latency_ms(&self) -> Option<f64> {
        self.prediction.as_ref().map(|p| p.decode_latency_ms)
    }
}

/// Per-trial rows and the aggregates derived from them. Dropped trials count
/// as misses in accuracies and are left out of the confusion matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionReport {
    pub rows: Vec<TrialRow>,
    pub n_classes: usize,
    pub top1: f64,
    pub top2: f64,
    /// Top-1 accuracy per cued class; `None` for classes never cued.
    pub per_class_top1: Vec<Option<f64>>,
    pub per_class_top2: Vec<Option<f64>>,
    pub confusion: Vec<Vec<usize>>,
    pub latency: Option<LatencyStats>,
}

impl SessionReport {
    pub fn from_rows(rows: Vec<TrialRow>, n_classes: usize) -> Self {
        let n = rows.len();
        let frac = |hits: usize, of: usize| if of == 0 { 0.0 } else { hits as f64 / of as f64 };
        let top1 = frac(rows.iter().filter(|r| r.correct_top1).count(), n);
        let top2 = frac(rows.iter().filter(|r| r.correct_top2).count(), n);
        let per_class = |pick: fn(&TrialRow) -> bool| -> Vec<Option<f64>> {
            (0..n_classes)
                .map(|k| {
                    let of_k: Vec<&TrialRow> = rows.iter().filter(|r| r.cued == k).collect();
                    (!of_k.is_empty()).then(|| frac(of_k.iter().filter(|r| pick(r)).count(), of_k.len()))
                })
                .collect()
        };
        let per_class_top1 = per_class(|r| r.correct_top1);
        let per_class_top2 = per_class(|r| r.correct_top2);
        let mut confusion = vec![vec![0usize; n_classes]; n_classes];
        for r in &rows {
            if let Some(p) = &r.prediction {
                confusion[r.cued][p.top1] += 1;
            }
        }
        let latencies: Vec<f64> = rows.iter().filter_map(TrialRow::latency_ms).collect();
        SessionReport {
            latency: latency_stats(&latencies),
            rows,
            n_classes,
            top1,
            top2,
            per_class_top1,
            per_class_top2,
            confusion,
        }
    }

    pub fn dropped(&self) -> usize {
        self.rows.iter().filter(|r| r.dropped.is_some()).count()
    }

    /// Recomputes every aggregate from the rows and compares.
    pub fn verify(&self) -> Result<(), String> {
        let again = SessionReport::from_rows(self.rows.clone(), self.n_classes);
        if &again != self {
            return Err("aggregates differ from recomputation over rows".into());
        }
        for (k, row) in self.confusion.iter().enumerate() {
            let cued = self.rows.iter().filter(|r| r.cued == k && r.prediction.is_some()).count();
            if row.iter().sum::<usize>() != cued {
                return Err(format!("confusion row {k} does not sum to its decoded cue count"));
            }
        }
        for r in &self.rows {
            if let Some(p) = &r.prediction {
                if (p.probabilities.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(format!("trial {}: probabilities off the simplex", r.trial_index));
                }
            }
        }
        Ok(())
    }

    /// One row per trial with probabilities and decisions; no timing.
    pub fn predictions_csv(&self) -> String {
        let mut out = String::from("trial,cued,predicted");
        for k in 0..self.n_classes {
            let _ = write!(out, ",p{k}");
        }
        out.push_str(",intensity,correct_top1,correct_top2,status\n");
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.trial_index, r.cued);
            match &r.prediction {
                Some(p) => {
                    let _ = write!(out, ",{}", p.top1);
                    for v in &p.probabilities {
                        let _ = write!(out, ",{v:e}");
                    }
                    let _ = write!(out, ",{:e}", p.feedback_intensity);
                }
                None => {
                    out.push(',');
                    out.push_str(&",".repeat(self.n_classes + 1));
                }
            }
            let status = r.dropped.as_deref().unwrap_or("ok");
            let _ = writeln!(out, ",{},{},{status}", r.correct_top1 as u8, r.correct_top2 as u8);
        }
        out
    }

    /// The full report: per-trial rows with latency, then aggregate lines.
    pub fn to_text(&self) -> String {
        let mut out = String::from("trial,cued,predicted");
        for k in 0..self.n_classes {
            let _ = write!(out, ",p{k}");
        }
        out.push_str(",intensity,correct_top1,correct_top2,latency_ms,status\n");
        for (line, r) in self.predictions_csv().lines().skip(1).zip(&self.rows) {
            let (head, status) = line.rsplit_once(',').expect("status column");
            let lat = r.latency_ms().map(|l| format!("{l:.3}")).unwrap_or_default();
            let _ = writeln!(out, "{head},{lat},{status}");
        }
        out.push('\n');
        let _ = writeln!(out, "metric,class,value");
        let _ = writeln!(out, "trials,all,{}", self.rows.len());
        let _ = writeln!(out, "dropped,all,{}", self.dropped());
        for k in 0..self.n_classes {
            let name = CLASS_NAMES.get(k).copied().unwrap_or("class");
            let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "na".into());
            let _ = writeln!(out, "top1,{name},{}", fmt(self.per_class_top1[k]));
            let _ = writeln!(out, "top2,{name},{}", fmt(self.per_class_top2[k]));
        }
        let _ = writeln!(out, "top1,all,{:.4}", self.top1);
        let _ = writeln!(out, "top2,all,{:.4}", self.top2);
        if let Some(l) = &self.latency {
            let _ = writeln!(out, "latency_mean_ms,all,{:.3}", l.mean_ms);
            let _ = writeln!(out, "latency_p95_ms,all,{:.3}", l.p95_ms);
        }
        for (k, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "confusion,{k},{}", cells.join(" "));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(probs: Vec<f64>) -> Prediction {
        Prediction::from_probabilities(probs, 1.0).unwrap()
    }

    #[test]
    fn aggregates_and_verification() {
        let rows = vec![
            TrialRow::decoded(0, 0, pred(vec![0.7, 0.1, 0.1, 0.1]), 2000),
            TrialRow::decoded(1, 1, pred(vec![0.5, 0.3, 0.1, 0.1]), 6500),
            TrialRow::dropped(2, 2, "underrun"),
            TrialRow::decoded(3, 0, pred(vec![0.1, 0.1, 0.1, 0.7]), 15500),
        ];
        let r = SessionReport::from_rows(rows, 4);
        assert_eq!((r.top1, r.top2), (0.25, 0.75));
        assert_eq!(r.per_class_top1, vec![Some(0.5), Some(0.0), Some(0.0), None]);
        assert_eq!(r.confusion[0], vec![1, 0, 0, 1]);
        assert_eq!(r.confusion[2], vec![0; 4]);
        assert!(r.verify().is_ok());
        let mut bad = r.clone();
        bad.top1 = 0.5;
        assert!(bad.verify().is_err());
        assert_eq!(r.to_text().lines().next().unwrap().split(',').count(), 12);
        assert!(r.to_text().contains("top1,all,0.2500"));
    }

    #[test]
    fn nearest_rank_percentiles() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = latency_stats(&xs).unwrap();
        assert_eq!((s.p50_ms, s.p95_ms, s.max_ms, s.mean_ms), (50.0, 95.0, 100.0, 50.5));
        assert!(latency_stats(&[]).is_none());
    }
}
