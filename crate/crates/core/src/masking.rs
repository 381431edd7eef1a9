//! Temporal block masking of raw signals.
//!
//! The time axis is split into `n_blocks` contiguous blocks (the last block
//! absorbs any remainder) and, per sample, a uniformly random subset of
//! blocks is zeroed across all channels.

use crate::rng::Xoshiro256;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSpec {
    /// Fraction of blocks to zero, in (0, 1].
    pub ratio: f64,
    pub n_blocks: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            ratio: 1.0 / 8.0,
            n_blocks: 8,
        }
    }
}

impl MaskSpec {
    /// Number of blocks zeroed per sample.
    pub fn blocks_to_mask(&self) -> usize {
        (self.ratio * self.n_blocks as f64).round() as usize
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(format!("mask ratio {} outside (0, 1]", self.ratio));
        }
        if self.n_blocks == 0 {
            return Err("n_blocks must be positive".into());
        }
        let target = self.ratio * self.n_blocks as f64;
        if (target - target.round()).abs() > 0.5 {
            return Err(format!(
                "ratio {} x n_blocks {} is not close to an integer",
                self.ratio, self.n_blocks
            ));
        }
        let m = self.blocks_to_mask();
        if m == 0 {
            return Err(format!(
                "ratio {} with {} blocks masks zero blocks",
                self.ratio, self.n_blocks
            ));
        }
        if m > self.n_blocks {
            return Err(format!(
                "ratio {} would mask more than all {} blocks",
                self.ratio, self.n_blocks
            ));
        }
        Ok(())
    }
}

/// Boundaries of block `i` in a length-`l` sequence: the last block absorbs
/// the remainder.
fn block_range(l: usize, n_blocks: usize, i: usize) -> (usize, usize) {
    let base = l / n_blocks;
    let start = i * base;
    let end = if i + 1 == n_blocks { l } else { start + base };
    (start, end)
}

/// Zero a random selection of temporal blocks in `x` ([B,C,L] row-major).
///
/// Each sample draws its own blocks from `rngs[sample]`, so the pattern is a
/// pure function of the per-sample RNG state. Returns the masked copy and a
/// per-sample boolean block mask (`true` = zeroed).
pub fn temporal_mask(
    x: &[f64],
    batch: usize,
    channels: usize,
    l: usize,
    spec: &MaskSpec,
    rngs: &mut [Xoshiro256],
) -> (Vec<f64>, Vec<Vec<bool>>) {
    assert_eq!(x.len(), batch * channels * l);
    assert_eq!(rngs.len(), batch);
    assert!(l >= spec.n_blocks, "sequence length {l} shorter than n_blocks");
    spec.validate().expect("invalid mask spec");

    let m = spec.blocks_to_mask();
    let mut out = x.to_vec();
    let mut masks = Vec::with_capacity(batch);
    for (bi, rng) in rngs.iter_mut().enumerate() {
        let picks = rng.choose_without_replacement(spec.n_blocks, m);
        let mut mask = vec![false; spec.n_blocks];
        for &p in &picks {
            mask[p] = true;
            let (lo, hi) = block_range(l, spec.n_blocks, p);
            for c in 0..channels {
                let off = (bi * channels + c) * l;
                out[off + lo..off + hi].fill(0.0);
            }
        }
        masks.push(mask);
    }
    (out, masks)
}
