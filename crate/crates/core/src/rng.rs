//! Seeded random number generation shared by every stochastic component.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type DetRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a stream label into a new seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ stream.wrapping_mul(0xd134_2543_de82_ef95))
}

/// A generator for `(seed, stream)`; distinct streams are independent.
pub fn seeded(seed: u64, stream: u64) -> DetRng {
    DetRng::seed_from_u64(derive_seed(seed, stream))
}

/// Standard normal sample via Box-Muller.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.gen();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        return r * libm::cos(core::f64::consts::TAU * u2);
    }
}

/// Normal sample with standard deviation `std`, redrawn until it falls
/// within two standard deviations of zero.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z = standard_normal(rng);
        if libm::fabs(z) <= 2.0 {
            return z * std;
        }
    }
}
