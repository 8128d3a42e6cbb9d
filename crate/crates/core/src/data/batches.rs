use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Shuffled mini-batches of sample indices for one epoch.
///
/// The order depends only on `(len, batch, seed, epoch)`; the last batch
/// keeps the remainder when `len` is not a multiple of `batch`.
pub fn epoch_batches(len: usize, batch: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}
