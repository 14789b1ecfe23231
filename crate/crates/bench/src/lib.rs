//! Fixtures shared by the benchmarks.

use nalgebra::DMatrix;
use rand::SeedableRng;

use unirobust_core::data::{gen_two_moons, TwoMoons};
use unirobust_core::rng::StreamRng;
use unirobust_core::{Batch, Dataset, Head, Model, Targets};

/// A 2-16-3 ReLU network and a deterministic batch of `n` rows.
pub fn classification_batch(n: usize) -> (Model, Batch) {
    let model = Model::mlp(2, &[16], Head::Classes(3), &mut StreamRng::seed_from_u64(7)).unwrap();
    let x = DMatrix::from_fn(n, 2, |i, j| ((i * 7 + j * 3) as f64 * 0.61).sin() * 2.0);
    let batch = Batch::new(x, Targets::Classes((0..n).map(|i| i % 3).collect())).unwrap();
    (model, batch)
}

/// 400 training points plus evaluation splits.
pub fn moons() -> Dataset {
    let cfg = TwoMoons { n: 400, n_eval: Some(200), noise_sd: 0.1, gap: None, shift: Default::default() };
    gen_two_moons(&cfg, 0).unwrap()
}
