//! Dirichlet evidence statistics and the evidential objectives.
//!
//! Evidence is softplus of head logits; α = e + 1. The KL regularizer is the
//! closed-form divergence of Dir(α̃) from the uniform Dirichlet; its tests
//! cross-check against numeric quadrature over the simplex.

use crate::diffmath::special;
use crate::diffmath::{Id, Tape};
use crate::losses::PROB_FLOOR;

/// Tape-level Dirichlet quantities for one batch of evidential logits.
/// Rows satisfy u + Σ_k b_k = 1 and Σ_k p̂_k = 1.
pub struct DirichletOutcome {
    pub k: usize,
    /// evidence e = softplus(logits), [B,K]
    pub evidence: Id,
    /// α = e + 1, [B,K]
    pub alpha: Id,
    /// S = Σ_k α_k, [B]
    pub strength: Id,
    /// b_k = e_k / S, [B,K]
    pub belief: Id,
    /// u = K / S, [B]
    pub uncertainty: Id,
    /// p̂_k = α_k / S, [B,K]
    pub probs: Id,
}

pub fn dirichlet_stats(tape: &mut Tape, logits: Id) -> DirichletOutcome {
    let shape = tape.shape(logits).to_vec();
    assert_eq!(shape.len(), 2, "evidential logits must be [B,K]");
    let k = shape[1];
    assert!(tape.value(logits).iter().all(|v| v.is_finite()));

    let evidence = tape.softplus(logits);
    let alpha = tape.add_const(evidence, 1.0);
    let strength = tape.sum_rows(alpha);
    // 1/S via exp(-log S); S ≥ K ≥ 2 so the log is safe
    let log_s = tape.log(strength);
    let neg_log_s = tape.neg(log_s);
    let inv_s = tape.exp(neg_log_s);
    let inv_s_cols = tape.broadcast_cols(inv_s, k);
    let belief = tape.mul(evidence, inv_s_cols);
    let probs = tape.mul(alpha, inv_s_cols);
    let uncertainty = tape.scale(inv_s, k as f64);
    DirichletOutcome {
        k,
        evidence,
        alpha,
        strength,
        belief,
        uncertainty,
        probs,
    }
}

fn assert_alpha_valid(tape: &Tape, alpha: Id) -> (usize, usize) {
    let shape = tape.shape(alpha);
    assert_eq!(shape.len(), 2, "alpha must be [B,K]");
    assert!(
        tape.value(alpha).iter().all(|&a| a >= 1.0 - 1e-9),
        "Dirichlet parameters below 1"
    );
    (shape[0], shape[1])
}

/// Evidential cross-entropy: mean over rows of Σ_k y_k (ψ(S) − ψ(α_k)).
pub fn evd_ce(tape: &mut Tape, alpha: Id, y_onehot: Id) -> Id {
    let (_b, k) = assert_alpha_valid(tape, alpha);
    assert_eq!(tape.shape(y_onehot), tape.shape(alpha));
    let s = tape.sum_rows(alpha);
    let dig_s = tape.digamma(s);
    let dig_s_cols = tape.broadcast_cols(dig_s, k);
    let dig_a = tape.digamma(alpha);
    let diff = tape.sub(dig_s_cols, dig_a);
    let weighted = tape.mul(y_onehot, diff);
    let rows = tape.sum_rows(weighted);
    tape.mean(rows)
}

/// Mean over rows of KL[Dir(α̃) ‖ Dir(1,…,1)]:
/// lnΓ(S̃) − lnΓ(K) − Σ_k lnΓ(α̃_k) + Σ_k (α̃_k − 1)(ψ(α̃_k) − ψ(S̃)).
pub fn kl_to_uniform(tape: &mut Tape, alpha_tilde: Id) -> Id {
    let (_b, k) = assert_alpha_valid(tape, alpha_tilde);
    let s = tape.sum_rows(alpha_tilde);
    let lg_s = tape.lgamma(s);
    let lg_a = tape.lgamma(alpha_tilde);
    let sum_lg_a = tape.sum_rows(lg_a);
    let dig_a = tape.digamma(alpha_tilde);
    let dig_s = tape.digamma(s);
    let dig_s_cols = tape.broadcast_cols(dig_s, k);
    let dig_diff = tape.sub(dig_a, dig_s_cols);
    let am1 = tape.add_const(alpha_tilde, -1.0);
    let weighted = tape.mul(am1, dig_diff);
    let sum_weighted = tape.sum_rows(weighted);
    let t1 = tape.sub(lg_s, sum_lg_a);
    let t2 = tape.add(t1, sum_weighted);
    let per_row = tape.add_const(t2, -special::lgamma(k as f64));
    tape.mean(per_row)
}

/// α̂ = y + (1 − y) ⊙ α: the correct-class entry is reset to 1 (its evidence
/// removed), others kept.
pub fn adjust_alpha(tape: &mut Tape, alpha: Id, y_onehot: Id) -> Id {
    let shape = tape.shape(alpha).to_vec();
    assert_eq!(tape.shape(y_onehot), &shape[..]);
    let (b, k) = (shape[0], shape[1]);
    let yv = tape.value(y_onehot);
    for i in 0..b {
        let row = &yv[i * k..(i + 1) * k];
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        assert!(
            ones == 1 && row.iter().all(|&v| v == 0.0 || v == 1.0),
            "labels must be one-hot"
        );
    }
    let ones = tape.constant(vec![1.0; b * k], vec![b, k]);
    let keep = tape.sub(ones, y_onehot);
    let kept = tape.mul(keep, alpha);
    tape.add(y_onehot, kept)
}

/// Mean per-sample Shannon entropy of p̂ rows, in [0, ln K]. Minimized during
/// adaptation to sharpen predictions.
pub fn evd_entropy(tape: &mut Tape, probs: Id) -> Id {
    let logp = tape.log_clamp(probs, PROB_FLOOR);
    let plogp = tape.mul(probs, logp);
    let rows = tape.sum_rows(plogp);
    let m = tape.mean(rows);
    tape.neg(m)
}

/// Negative entropy of the batch-mean distribution, in [−ln K, 0]. Minimized
/// to diversify predictions across the batch.
pub fn evd_diversity(tape: &mut Tape, probs: Id) -> Id {
    let pbar = tape.col_mean(probs);
    let logp = tape.log_clamp(pbar, PROB_FLOOR);
    let pl = tape.mul(pbar, logp);
    tape.sum(pl)
}

/// One-hot argmax pseudo-labels from current α values (ties break to the
/// lowest class index). The result is a tape constant: no gradient flows
/// through the labeling.
pub fn pseudo_labels(tape: &mut Tape, alpha: Id) -> Id {
    let shape = tape.shape(alpha).to_vec();
    let (b, k) = (shape[0], shape[1]);
    let v = tape.value(alpha).to_vec();
    let mut y = vec![0.0; b * k];
    for i in 0..b {
        let row = &v[i * k..(i + 1) * k];
        let mut best = 0;
        for (j, &val) in row.iter().enumerate() {
            if val > row[best] {
                best = j;
            }
        }
        y[i * k + best] = 1.0;
    }
    tape.constant(y, vec![b, k])
}

/// Self-supervised evidential term: evd_ce against the pseudo-label plus
/// λ · KL of the adjusted parameters.
pub fn evd_selfsup(tape: &mut Tape, alpha: Id, lambda: f64) -> Id {
    let y = pseudo_labels(tape, alpha);
    let ce = evd_ce(tape, alpha, y);
    if lambda == 0.0 {
        return ce;
    }
    let adjusted = adjust_alpha(tape, alpha, y);
    let kl = kl_to_uniform(tape, adjusted);
    let kl_scaled = tape.scale(kl, lambda);
    tape.add(ce, kl_scaled)
}

/// Annealing weight for the KL regularizer: min(t/10, 1), 0-based epochs.
pub fn lambda_schedule(t: usize) -> f64 {
    (t as f64 / 10.0).min(1.0)
}

/// Combined adaptation objective:
/// γ1·entropy + γ2·diversity + γ3·selfsup(α, λ).
///
/// `negate_entropy_terms` flips the sign of the entropy and diversity terms
/// (maximize per-sample entropy, minimize batch-marginal entropy) for
/// comparison runs against the default convention.
#[allow(clippy::too_many_arguments)]
pub fn evd_adaptation_loss(
    tape: &mut Tape,
    outcome: &DirichletOutcome,
    gamma1: f64,
    gamma2: f64,
    gamma3: f64,
    lambda: f64,
    negate_entropy_terms: bool,
) -> Id {
    assert!(
        gamma1 >= 0.0 && gamma2 >= 0.0 && gamma3 >= 0.0,
        "loss weights must be non-negative"
    );
    let ent = evd_entropy(tape, outcome.probs);
    let div = evd_diversity(tape, outcome.probs);
    let (ent, div) = if negate_entropy_terms {
        (tape.neg(ent), tape.neg(div))
    } else {
        (ent, div)
    };
    let ss = evd_selfsup(tape, outcome.alpha, lambda);
    let a = tape.scale(ent, gamma1);
    let b = tape.scale(div, gamma2);
    let c = tape.scale(ss, gamma3);
    let ab = tape.add(a, b);
    tape.add(ab, c)
}
