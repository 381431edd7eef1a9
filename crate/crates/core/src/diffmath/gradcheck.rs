//! Finite-difference validation of backward rules.

use super::{Id, Tape};

/// Compare reverse-mode gradients of a scalar-valued function against central
/// differences, returning the worst coordinate deviation relative to the
/// gradient's infinity norm.
///
/// `f` rebuilds the computation from a leaf each call; probe points near
/// non-smooth kinks (relu at 0) are the caller's responsibility to avoid.
pub fn grad_check<F>(f: F, point: &[f64], shape: &[usize], h: f64) -> f64
where
    F: Fn(&mut Tape, Id) -> Id,
{
    // Autodiff gradient.
    let mut tape = Tape::new();
    let x = tape.leaf(point.to_vec(), shape.to_vec(), true);
    let loss = f(&mut tape, x);
    assert_eq!(tape.value(loss).len(), 1, "grad_check needs a scalar function");
    tape.backward(loss);
    let analytic = tape.grad(x).to_vec();

    let eval = |p: &[f64]| -> f64 {
        let mut t = Tape::new();
        let x = t.leaf(p.to_vec(), shape.to_vec(), false);
        let l = f(&mut t, x);
        let v = t.scalar(l);
        assert!(v.is_finite(), "non-finite value at finite-difference probe");
        v
    };

    let mut numeric = Vec::with_capacity(point.len());
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = eval(&probe);
        probe[i] = orig - h;
        let fm = eval(&probe);
        probe[i] = orig;
        numeric.push((fp - fm) / (2.0 * h));
    }

    // Scale the worst coordinate deviation by the gradient magnitude rather
    // than each coordinate alone: central differences carry O(h²) truncation
    // noise, so a per-coordinate ratio at a near-zero coordinate measures
    // that noise, not correctness.
    let inf_norm = |v: &[f64]| v.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let scale = inf_norm(&analytic).max(inf_norm(&numeric)).max(1e-8);
    let worst_abs = analytic
        .iter()
        .zip(&numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    worst_abs / scale
}
