//! Classical training objectives: smoothed cross-entropy, feature-space
//! imputation MSE, and the information-maximization loss used for adaptation.
//!
//! All entropies are natural-log; 0·log 0 is treated as 0 by clamping
//! probabilities to ≥ 1e-12 inside logs.

use crate::diffmath::{Id, Tape};

pub const PROB_FLOOR: f64 = 1e-12;

/// −mean_B Σ_k y_k^ls · log softmax_k with y^ls = (1−η)·onehot + η/K.
pub fn smoothed_ce(tape: &mut Tape, logits: Id, labels: &[usize], eta: f64) -> Id {
    let shape = tape.shape(logits).to_vec();
    assert_eq!(shape.len(), 2, "logits must be [B,K]");
    let (b, k) = (shape[0], shape[1]);
    assert_eq!(labels.len(), b, "one label per row");
    assert!((0.0..1.0).contains(&eta), "smoothing coefficient outside [0,1)");

    let mut targets = vec![eta / k as f64; b * k];
    for (i, &l) in labels.iter().enumerate() {
        assert!(l < k, "label {l} out of range for {k} classes");
        targets[i * k + l] += 1.0 - eta;
    }
    let y = tape.constant(targets, vec![b, k]);
    let logp = tape.log_softmax(logits);
    let prod = tape.mul(y, logp);
    let total = tape.sum(prod);
    tape.scale(total, -1.0 / b as f64)
}

/// Mean over all elements of the squared difference.
pub fn imputation_mse(tape: &mut Tape, original: Id, imputed: Id) -> Id {
    assert_eq!(
        tape.shape(original),
        tape.shape(imputed),
        "imputation_mse shape mismatch"
    );
    let diff = tape.sub(original, imputed);
    let sq = tape.square(diff);
    tape.mean(sq)
}

fn assert_prob_rows(tape: &Tape, probs: Id) -> (usize, usize) {
    let shape = tape.shape(probs);
    assert_eq!(shape.len(), 2, "probabilities must be [B,K]");
    let (b, k) = (shape[0], shape[1]);
    let v = tape.value(probs);
    for i in 0..b {
        let s: f64 = v[i * k..(i + 1) * k].iter().sum();
        assert!(
            (s - 1.0).abs() < 1e-6,
            "row {i} sums to {s}, not a probability vector"
        );
    }
    (b, k)
}

/// Mean per-sample entropy minus entropy of the batch-mean distribution.
/// Minimizing sharpens individual predictions while diversifying the batch.
pub fn infomax_loss(tape: &mut Tape, probs: Id) -> Id {
    let (_b, k) = assert_prob_rows(tape, probs);

    // mean_i H(p_i) = -mean_i Σ_k p log p
    let logp = tape.log_clamp(probs, PROB_FLOOR);
    let plogp = tape.mul(probs, logp);
    let row_sums = tape.sum_rows(plogp);
    let neg_mean_ent = tape.mean(row_sums);

    // H(p̄) = -Σ_k p̄ log p̄
    let pbar = tape.col_mean(probs);
    let log_pbar = tape.log_clamp(pbar, PROB_FLOOR);
    let pl = tape.mul(pbar, log_pbar);
    let neg_marg_ent = tape.sum(pl);

    debug_assert_eq!(tape.shape(pbar), &[k]);
    // loss = (-neg_mean_ent) - (-neg_marg_ent)
    tape.sub(neg_marg_ent, neg_mean_ent)
}
