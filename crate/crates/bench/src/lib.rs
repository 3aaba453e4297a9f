//! Shared fixtures for the fusion benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use repsnet_core::network::{RepSNet, RepSNetConfig};
use repsnet_core::Tensor;

/// A deterministic desk-scale network with populated batch statistics, plus
/// its fused counterpart.
pub fn trained_pair(seed: u64) -> (RepSNet, RepSNet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = RepSNet::new(RepSNetConfig::default(), &mut rng).expect("valid config");
    // one training pass populates the running statistics
    let x = random_image(&mut rng, 32, 32);
    net.forward_train(&x).expect("populate stats");
    let fused = net.reparameterize().expect("fuse");
    (net, fused)
}

pub fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(1, 3, h, w, |_, _, _, _| rng.random_range(0.0..1.0f32))
}
