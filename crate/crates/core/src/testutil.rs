//! Seeded small instances shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embed::{AugmentationFamily, Dataset, MiniBatch};
use crate::encoder::{Architecture, EncoderParams};

pub(crate) fn instance(
    seed: u64,
    n: usize,
    k: usize,
    arch: Architecture,
) -> (EncoderParams, Dataset, AugmentationFamily) {
    let d_in = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n)
        .map(|_| (0..d_in).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let ds = Dataset::new(pts, None).unwrap();
    let fam = AugmentationFamily::gaussian(k, d_in, 0.3, seed + 100).unwrap();
    let enc = EncoderParams::random(arch, d_in, 5, 3, seed + 200).unwrap();
    (enc, ds, fam)
}

/// Every input identical and every perturbation zero, so all embeddings
/// coincide. The encoder is linear with orthonormal rows.
pub(crate) fn collapsed(n: usize, k: usize) -> (EncoderParams, Dataset, AugmentationFamily) {
    let enc = EncoderParams::linear(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
    let ds = Dataset::new(vec![vec![0.3, -0.4, 0.7]; n], None).unwrap();
    let fam = AugmentationFamily::from_deltas(vec![vec![0.0; 3]; k]).unwrap();
    (enc, ds, fam)
}

/// The whole dataset in index order with the given view choices.
pub(crate) fn full_batch(n: usize, aug_a: Vec<usize>, aug_b: Vec<usize>) -> MiniBatch {
    MiniBatch::new((0..n).collect(), aug_a, aug_b).unwrap()
}
