//! Seeded randomness and small hashing helpers used across modules.

use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// All deterministic streams in the library come from this generator.
pub type SeededRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child seed from a parent seed and a label.
/// Used to fan work out across images without coupling their streams.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut h = fnv1a64(&parent.to_le_bytes());
    for b in label.as_bytes() {
        h = (h ^ u64::from(*b)).wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// 64-bit FNV-1a over a byte slice.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h = (h ^ u64::from(*b)).wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Standard-normal field with the given dynamic shape.
pub fn normal_field(shape: &[usize], rng: &mut SeededRng) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/product mismatch")
}

/// Standard-normal H x W x C image field.
pub fn normal_image(h: usize, w: usize, c: usize, rng: &mut SeededRng) -> Array3<f64> {
    let data: Vec<f64> = (0..h * w * c).map(|_| rng.sample(StandardNormal)).collect();
    Array3::from_shape_vec((h, w, c), data).expect("shape/product mismatch")
}

/// Truncated normal draw: resamples anything beyond two standard deviations.
pub fn truncated_normal(std: f64, rng: &mut SeededRng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}
