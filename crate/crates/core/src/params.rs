//! Flat layout of the joint parameter vector: encoder blocks first
//! (w1, b1, w2, b2), then item loadings, then raw intercepts. The optimizer
//! and the finite-difference oracles operate on this single vector; the
//! structured model types are refreshed from it after every update.

use std::ops::Range;

use crate::encoder::EncoderParams;
use crate::grm::ItemBank;

/// Offsets of each parameter block inside the flat vector.
///
/// Matrix blocks use nalgebra's column-major element order; pack and unpack
/// agree by construction so the order is an internal detail.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
    pub loadings: Range<usize>,
    pub intercepts: Range<usize>,
    /// Start of each item's raw intercepts within the intercept block.
    pub intercept_offsets: Vec<usize>,
    pub total: usize,
}

impl ParamLayout {
    pub fn of(bank: &ItemBank, enc: &EncoderParams) -> Self {
        let h = enc.hidden_size();
        let din = enc.input_dim();
        let p2 = 2 * enc.latent_dim();
        let n_load = bank.loadings().len();

        let w1 = 0..h * din;
        let b1 = w1.end..w1.end + h;
        let w2 = b1.end..b1.end + p2 * h;
        let b2 = w2.end..w2.end + p2;
        let loadings = b2.end..b2.end + n_load;

        let mut intercept_offsets = Vec::with_capacity(bank.n_items());
        let mut acc = loadings.end;
        for raw in bank.raw_intercepts() {
            intercept_offsets.push(acc);
            acc += raw.len();
        }
        ParamLayout {
            w1,
            b1,
            w2,
            b2,
            intercepts: loadings.end..acc,
            loadings,
            intercept_offsets,
            total: acc,
        }
    }

    /// Human-readable block owning flat index `idx`.
    pub fn block_name(&self, idx: usize) -> &'static str {
        if self.w1.contains(&idx) {
            "w1"
        } else if self.b1.contains(&idx) {
            "b1"
        } else if self.w2.contains(&idx) {
            "w2"
        } else if self.b2.contains(&idx) {
            "b2"
        } else if self.loadings.contains(&idx) {
            "loadings"
        } else {
            "intercepts"
        }
    }

    pub fn pack(&self, bank: &ItemBank, enc: &EncoderParams) -> Vec<f64> {
        let mut flat = vec![0.0; self.total];
        flat[self.w1.clone()].copy_from_slice(enc.w1().as_slice());
        flat[self.b1.clone()].copy_from_slice(enc.b1().as_slice());
        flat[self.w2.clone()].copy_from_slice(enc.w2().as_slice());
        flat[self.b2.clone()].copy_from_slice(enc.b2().as_slice());
        flat[self.loadings.clone()].copy_from_slice(bank.loadings().as_slice());
        for (raw, &off) in bank.raw_intercepts().iter().zip(&self.intercept_offsets) {
            flat[off..off + raw.len()].copy_from_slice(raw);
        }
        flat
    }

    /// Writes the flat vector back into the structured parameters and
    /// refreshes the ordered-intercept cache.
    pub fn unpack(&self, flat: &[f64], bank: &mut ItemBank, enc: &mut EncoderParams) {
        debug_assert_eq!(flat.len(), self.total);
        {
            let (w1, b1, w2, b2) = enc.parts_mut();
            w1.as_mut_slice().copy_from_slice(&flat[self.w1.clone()]);
            b1.as_mut_slice().copy_from_slice(&flat[self.b1.clone()]);
            w2.as_mut_slice().copy_from_slice(&flat[self.w2.clone()]);
            b2.as_mut_slice().copy_from_slice(&flat[self.b2.clone()]);
        }
        bank.loadings_mut()
            .as_mut_slice()
            .copy_from_slice(&flat[self.loadings.clone()]);
        let offsets = self.intercept_offsets.clone();
        for (raw, off) in bank.raw_intercepts_mut().iter_mut().zip(offsets) {
            let len = raw.len();
            raw.copy_from_slice(&flat[off..off + len]);
        }
        bank.refresh();
    }
}
