//! Core algorithms for metro network expansion on region graphs.
//!
//! The crate models a city as a set of regions with an origin-destination
//! flow matrix, builds a two-relation graph over those regions (spatial
//! contiguity and strong OD association), and frames network expansion as a
//! constrained sequential decision process: each step either extends an
//! existing line at one of its ends or opens a new line, subject to station
//! spacing, bend-angle, budget and line-quota constraints.
//!
//! On top of the environment sit a small reverse-mode autodiff engine
//! ([`nn`]), a graph-encoded attentive policy ([`agent`]), a PPO trainer
//! ([`ppo`]), four heuristic planners ([`baselines`]) and an exhaustive
//! search oracle ([`env::enumerate_episodes`]).
//!
//! The crate is `no_std` (with `alloc`); all IO, file formats and the CLI
//! live in the companion `metrex` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod agent;
pub mod baselines;
pub mod city;
pub mod env;
mod error;
pub mod graph;
pub mod metro;
pub mod nn;
pub mod ppo;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;

/// Euclidean distance between two planar points (km).
#[inline]
pub fn euc_dis(ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let dx = ax - bx;
    let dy = ay - by;
    libm::sqrt(dx * dx + dy * dy)
}

/// Smallest power of two >= `x`, used as a lossless normalizer: dividing an
/// f64 by a power of two only shifts the exponent, so `v / p * p == v`
/// holds bit-exactly. Returns 1.0 for non-positive or non-finite input.
pub(crate) fn pow2_normalizer(x: f64) -> f64 {
    if !(x > 0.0) || !x.is_finite() {
        return 1.0;
    }
    let e = libm::ceil(libm::log2(x));
    let p = libm::exp2(e);
    // log2/exp2 rounding can land one step low for exact powers of two.
    if p < x {
        p * 2.0
    } else {
        p
    }
}

/// Deterministic seed mixer (splitmix64 finalizer) for deriving independent
/// per-episode / per-worker RNG streams from one run seed.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pow2_normalizer_is_lossless() {
        for &x in &[0.3, 1.0, 7.5, 1024.0, 123456.789, 1e12] {
            let p = pow2_normalizer(x);
            assert!(p >= x);
            assert!(p <= 2.0 * x.max(0.5));
            let v = 12345.6789f64;
            assert_eq!(v / p * p, v);
        }
        assert_eq!(pow2_normalizer(0.0), 1.0);
        assert_eq!(pow2_normalizer(-3.0), 1.0);
    }

    #[test]
    fn mix_seed_is_stable_and_spreads() {
        let a = mix_seed(0, 0, 0);
        let b = mix_seed(0, 0, 1);
        let c = mix_seed(0, 1, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, mix_seed(0, 0, 0));
    }
}
