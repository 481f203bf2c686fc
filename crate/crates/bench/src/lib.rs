//! Shared fixtures for the benchmarks: preprocessed synthetic arches and
//! initialized models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use charm_core::dental::Arch;
use charm_core::network::{init_params, ArchDescriptor, ModelParams};
use charm_core::synthetic::{generate_arch, ArchSpec};
use charm_core::training::TrainingExample;

/// A synthetic arch preprocessed to `points` mesh points plus the null point.
pub fn example(points: usize, seed: u64) -> TrainingExample {
    let sample = generate_arch(&ArchSpec::new(Arch::Upper, seed)).expect("valid default spec");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TrainingExample::prepare(&sample.cloud, &sample.annotation, points, 2.0, &mut rng).expect("preprocessing succeeds")
}

/// Freshly initialized parameters of the default architecture, with or
/// without the presence head.
pub fn model(char_module: bool) -> ModelParams {
    let desc = ArchDescriptor {
        char_module,
        ..ArchDescriptor::default()
    };
    init_params(&desc, 0).expect("valid default architecture")
}
