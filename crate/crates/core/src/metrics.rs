//! Evaluation: accuracy, macro-F1, calibration (ECE/MCE/Brier), and
//! entropy-separation summaries.
//!
//! Brier scores use the multiclass sum-over-classes convention (range
//! [0, 2]); entropies are natural-log.

use serde::{Deserialize, Serialize};

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    assert!(!truth.is_empty(), "empty input");
    assert_eq!(pred.len(), truth.len());
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

/// Unweighted mean of per-class F1. Classes absent from the ground truth are
/// skipped; a class present in truth but never predicted scores 0.
pub fn macro_f1(pred: &[usize], truth: &[usize], k: usize) -> f64 {
    assert!(!truth.is_empty(), "empty input");
    assert_eq!(pred.len(), truth.len());
    assert!(pred.iter().chain(truth).all(|&l| l < k), "label out of range");

    let mut f1_sum = 0.0;
    let mut present = 0usize;
    for c in 0..k {
        let tp = pred
            .iter()
            .zip(truth)
            .filter(|&(&p, &t)| p == c && t == c)
            .count() as f64;
        let fp = pred
            .iter()
            .zip(truth)
            .filter(|&(&p, &t)| p == c && t != c)
            .count() as f64;
        let fn_ = pred
            .iter()
            .zip(truth)
            .filter(|&(&p, &t)| p != c && t == c)
            .count() as f64;
        if tp + fn_ == 0.0 {
            continue; // class absent from truth
        }
        present += 1;
        let denom = 2.0 * tp + fp + fn_;
        if denom > 0.0 {
            f1_sum += 2.0 * tp / denom;
        }
    }
    assert!(present > 0, "no class present in truth");
    f1_sum / present as f64
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
    pub mce: f64,
    /// Sum-over-classes Brier score, in [0, 2].
    pub brier: f64,
}

/// Equal-width confidence binning on the max probability.
/// ECE = Σ (count/n)·|acc − conf|; MCE = max over non-empty bins.
pub fn calibration(probs: &[f64], truth: &[usize], k: usize, n_bins: usize) -> CalibrationReport {
    assert!(n_bins >= 2, "need at least 2 calibration bins");
    assert!(!truth.is_empty(), "empty input");
    let n = truth.len();
    assert_eq!(probs.len(), n * k);
    for i in 0..n {
        let s: f64 = probs[i * k..(i + 1) * k].iter().sum();
        assert!((s - 1.0).abs() < 1e-6, "row {i} not a probability vector");
    }

    let mut conf_sum = vec![0.0; n_bins];
    let mut hit_sum = vec![0usize; n_bins];
    let mut count = vec![0usize; n_bins];
    let mut brier = 0.0;
    for i in 0..n {
        let row = &probs[i * k..(i + 1) * k];
        let mut best = 0;
        for (j, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = j;
            }
        }
        let conf = row[best];
        // conf = 1.0 lands in the top bin
        let b = ((conf * n_bins as f64) as usize).min(n_bins - 1);
        conf_sum[b] += conf;
        count[b] += 1;
        if best == truth[i] {
            hit_sum[b] += 1;
        }
        for (j, &p) in row.iter().enumerate() {
            let y = if j == truth[i] { 1.0 } else { 0.0 };
            brier += (p - y) * (p - y);
        }
    }
    brier /= n as f64;

    let width = 1.0 / n_bins as f64;
    let mut bins = Vec::with_capacity(n_bins);
    let mut ece = 0.0;
    let mut mce: f64 = 0.0;
    for b in 0..n_bins {
        let (conf, acc) = if count[b] > 0 {
            (
                conf_sum[b] / count[b] as f64,
                hit_sum[b] as f64 / count[b] as f64,
            )
        } else {
            (0.0, 0.0)
        };
        if count[b] > 0 {
            let gap = (acc - conf).abs();
            ece += count[b] as f64 / n as f64 * gap;
            mce = mce.max(gap);
        }
        bins.push(CalibrationBin {
            lo: b as f64 * width,
            hi: (b + 1) as f64 * width,
            count: count[b],
            mean_confidence: conf,
            accuracy: acc,
        });
    }
    CalibrationReport {
        bins,
        ece,
        mce,
        brier,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EntropyStats {
    pub mean: f64,
    pub median: f64,
    /// 20 equal-width bins over [0, ln K].
    pub histogram: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EntropySummary {
    pub softmax: EntropyStats,
    pub evidential: EntropyStats,
}

pub const ENTROPY_BINS: usize = 20;

fn row_entropy(row: &[f64]) -> f64 {
    -row.iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum::<f64>()
}

fn entropy_stats(probs: &[f64], k: usize) -> EntropyStats {
    let n = probs.len() / k;
    assert!(n >= 1, "empty input");
    let max_h = (k as f64).ln();
    let mut values: Vec<f64> = (0..n)
        .map(|i| {
            let row = &probs[i * k..(i + 1) * k];
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row {i} not a probability vector");
            row_entropy(row)
        })
        .collect();
    let mean = values.iter().sum::<f64>() / n as f64;
    values.sort_by(|a, b| a.total_cmp(b));
    let median = if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    };
    let mut histogram = vec![0usize; ENTROPY_BINS];
    for &h in &values {
        let b = ((h / max_h * ENTROPY_BINS as f64) as usize).min(ENTROPY_BINS - 1);
        histogram[b] += 1;
    }
    EntropyStats {
        mean,
        median,
        histogram,
    }
}

/// Side-by-side entropy statistics of softmax vs evidential probabilities
/// over the same samples.
pub fn entropy_summary(softmax_probs: &[f64], evd_probs: &[f64], k: usize) -> EntropySummary {
    assert_eq!(softmax_probs.len(), evd_probs.len());
    EntropySummary {
        softmax: entropy_stats(softmax_probs, k),
        evidential: entropy_stats(evd_probs, k),
    }
}

/// One CSV row per calibration bin.
pub fn calibration_csv(report: &CalibrationReport) -> String {
    let mut out = String::from("bin_lo,bin_hi,count,mean_confidence,accuracy\n");
    for b in &report.bins {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            b.lo, b.hi, b.count, b.mean_confidence, b.accuracy
        ));
    }
    out
}

/// Histogram CSV: bin index, softmax count, evidential count.
pub fn entropy_csv(summary: &EntropySummary) -> String {
    let mut out = String::from("bin,softmax_count,evidential_count\n");
    for i in 0..ENTROPY_BINS {
        out.push_str(&format!(
            "{},{},{}\n",
            i, summary.softmax.histogram[i], summary.evidential.histogram[i]
        ));
    }
    out
}
