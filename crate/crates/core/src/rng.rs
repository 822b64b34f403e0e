//! Seeded randomness. Every random draw in a run descends from one root
//! seed through named substreams, so changing one consumer never shifts
//! another's values.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::numerics::{RealMatrix, RealVector};
use crate::scalar::Scalar;

/// Deterministic generator used throughout the lab.
#[derive(Clone, Debug)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn from_seed_u64(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Generator for the substream `name` (with an index, e.g. a task id)
    /// under `root`.
    pub fn substream(root: u64, name: &str, index: u64) -> Self {
        Self::from_seed_u64(substream_seed(root, name, index))
    }

    pub fn gaussian(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.random::<u64>()
    }
}

/// Mixes a root seed with a stream name and index (FNV-1a then SplitMix64).
pub fn substream_seed(root: u64, name: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(splitmix(root ^ h) ^ index)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn gaussian_matrix<T: Scalar>(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> RealMatrix<T> {
    RealMatrix::from_fn(rows, cols, |_, _| T::of(std * rng.gaussian()))
}

pub fn gaussian_vector<T: Scalar>(rng: &mut Rng, dim: usize, std: f64) -> RealVector<T> {
    RealVector((0..dim).map(|_| T::of(std * rng.gaussian())).collect())
}

/// Uniformly random unit vector.
pub fn unit_vector<T: Scalar>(rng: &mut Rng, dim: usize) -> RealVector<T> {
    loop {
        let v = gaussian_vector::<T>(rng, dim, 1.0);
        if let Some(u) = v.normalized(T::of(1e-6)) {
            return u;
        }
    }
}
