//! Deterministic noise streams.
//!
//! Every stream is a ChaCha8 generator whose key is derived from
//! `(global seed, stream id, step)`, so the noise a layer sees at a given step
//! does not depend on how many other draws happened before it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Identifies one noise draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NoiseKey {
    pub seed: u64,
    pub stream: u64,
    pub step: u64,
}

impl NoiseKey {
    pub fn new(seed: u64, stream: u64, step: u64) -> Self {
        Self { seed, stream, step }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        for (chunk, word) in key.chunks_exact_mut(8).zip([
            splitmix64(self.seed),
            splitmix64(self.stream ^ 0x5851_f42d_4c95_7f2d),
            splitmix64(self.step ^ 0x1405_7b7e_f767_814f),
            splitmix64(self.seed ^ self.stream.rotate_left(32) ^ self.step.rotate_left(16)),
        ]) {
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }
}

impl From<u64> for NoiseKey {
    fn from(seed: u64) -> Self {
        Self::new(seed, 0, 0)
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// I.i.d. samples from `[lo, hi]`.
pub fn sample_uniform(shape: &[usize], lo: f32, hi: f32, key: impl Into<NoiseKey>) -> Result<Tensor> {
    if !(lo <= hi) {
        return Err(Error::Parameter(format!("uniform bounds lo={lo} > hi={hi}")));
    }
    let n = shape.iter().product();
    if lo == hi {
        return Ok(Tensor::full(shape.to_vec(), lo));
    }
    let mut rng = key.into().rng();
    let width = hi - lo;
    let data = (0..n).map(|_| (lo + width * rng.random::<f32>()).min(hi)).collect();
    Ok(Tensor::from_vec(shape.to_vec(), data))
}

/// I.i.d. zero-mean normal samples with standard deviation `std`.
pub fn sample_gaussian(shape: &[usize], std: f32, key: impl Into<NoiseKey>) -> Result<Tensor> {
    if !(std >= 0.0) {
        return Err(Error::Parameter(format!("gaussian std must be >= 0, got {std}")));
    }
    let n = shape.iter().product();
    if std == 0.0 {
        return Ok(Tensor::zeros(shape.to_vec()));
    }
    let mut rng = key.into().rng();
    let data = (0..n)
        .map(|_| {
            let z: f32 = StandardNormal.sample(&mut rng);
            z * std
        })
        .collect();
    Ok(Tensor::from_vec(shape.to_vec(), data))
}

/// Stable 64-bit id for a name (FNV-1a).
pub fn stream_id(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
