use rand::distr::{Bernoulli, Distribution};

use super::{KeepProb, Phase};
use crate::error::{Error, Result};
use crate::stats::{FeatureBatch, RandomSeed};

/// A realized dropout mask: one independent Bernoulli(p) keep bit per element,
/// with a fresh diagonal mask for every sample of the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    bits: Vec<bool>,
    batch_size: usize,
    width: usize,
    keep: KeepProb,
}

impl DropoutMask {
    pub fn new(batch_size: usize, width: usize, bits: Vec<bool>, keep: KeepProb) -> Result<Self> {
        if bits.len() != batch_size * width {
            return Err(Error::shape(
                format!("{} mask bits", batch_size * width),
                format!("{}", bits.len()),
            ));
        }
        Ok(DropoutMask {
            bits,
            batch_size,
            width,
            keep,
        })
    }

    pub fn filled(batch_size: usize, width: usize, keep_bit: bool, keep: KeepProb) -> Self {
        DropoutMask {
            bits: vec![keep_bit; batch_size * width],
            batch_size,
            width,
            keep,
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn keep_probability(&self) -> KeepProb {
        self.keep
    }
}

/// Draws a mask of independent Bernoulli(p) keep bits.
pub fn sample_mask(batch_size: usize, width: usize, p: KeepProb, seed: RandomSeed) -> DropoutMask {
    let bern = Bernoulli::new(p.get()).expect("keep probability validated by KeepProb");
    let mut rng = seed.rng();
    let bits = (0..batch_size * width).map(|_| bern.sample(&mut rng)).collect();
    DropoutMask {
        bits,
        batch_size,
        width,
        keep: p,
    }
}

/// Inverted dropout. Train: each element kept with probability `p` and scaled
/// by `1/p`, otherwise zeroed; the realized mask is returned. Test: identity.
pub fn dropout_forward(
    x: &FeatureBatch,
    p: KeepProb,
    phase: Phase,
    seed: RandomSeed,
) -> (FeatureBatch, Option<DropoutMask>) {
    match phase {
        Phase::Test => (x.clone(), None),
        Phase::Train => {
            let mask = sample_mask(x.batch_size(), x.width(), p, seed);
            let y = apply(x.as_slice(), &mask.bits, p);
            (FeatureBatch::from_parts(x.batch_size(), x.width(), y), Some(mask))
        }
    }
}

/// Applies a fixed mask: `x * m / p` elementwise.
pub fn dropout_with_mask(x: &FeatureBatch, mask: &DropoutMask) -> Result<FeatureBatch> {
    if x.batch_size() != mask.batch_size || x.width() != mask.width {
        return Err(Error::shape(
            format!("{}×{}", mask.batch_size, mask.width),
            format!("{}×{}", x.batch_size(), x.width()),
        ));
    }
    let y = apply(x.as_slice(), &mask.bits, mask.keep);
    Ok(FeatureBatch::from_parts(x.batch_size(), x.width(), y))
}

pub(crate) fn apply(x: &[f64], bits: &[bool], p: KeepProb) -> Vec<f64> {
    let p = p.get();
    x.iter()
        .zip(bits)
        .map(|(&v, &keep)| {
            let m = if keep { 1.0 } else { 0.0 };
            v * m / p
        })
        .collect()
}
