//! Fixtures shared by the benchmarks.

use aal_core::rng::{stream_rng, Stream};
use aal_core::{Scalar, SmallCnn, SmallCnnConfig, Tensor};
use rand::Rng;

/// A batch of uniform `[0, 1]` MNIST-shaped images with cycling labels.
pub fn synthetic_batch<T: Scalar>(batch: usize, seed: u64) -> (Tensor<T>, Vec<usize>) {
    let mut rng = stream_rng(seed, Stream::Shuffle, 0);
    let n = batch * 28 * 28;
    let data = (0..n).map(|_| T::from_f64(rng.random_range(0.0..1.0))).collect();
    let x = Tensor::from_vec([batch, 1, 28, 28], data).expect("shape matches");
    (x, (0..batch).map(|i| i % 10).collect())
}

pub fn uniform<T: Scalar>(len: usize, seed: u64) -> Vec<T> {
    let mut rng = stream_rng(seed, Stream::Init, 1);
    (0..len).map(|_| T::from_f64(rng.random_range(-1.0..1.0))).collect()
}

pub fn model<T: Scalar>(seed: u64) -> SmallCnn<T> {
    let mut m = SmallCnn::new(SmallCnnConfig::default(), &mut stream_rng(seed, Stream::Init, 0)).expect("valid config");
    m.set_normalization(vec![T::from_f64(0.1307)], vec![T::from_f64(0.3081)])
        .expect("one channel");
    m
}
