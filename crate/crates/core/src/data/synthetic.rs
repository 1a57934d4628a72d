use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use super::LabeledDataset;
use crate::error::{FedError, Result};
use crate::nn::Matrix;
use crate::rng::rng_for;
use crate::scalar::Scalar;

/// Mixture of `C` unit-variance Gaussians in `d_in` dimensions.
///
/// Means are `separation / √2` times a random orthonormal frame, so every pair
/// of means sits exactly `separation` apart. This needs `d_in ≥ C`. Samples are
/// shuffled with the same seed.
pub fn gen_gaussian_mixture<T: Scalar>(
    num_classes: usize,
    input_dim: usize,
    n_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset<T>> {
    if num_classes < 2 {
        return Err(FedError::Config(format!(
            "a mixture needs at least 2 categories, got {num_classes}"
        )));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(FedError::Config(format!(
            "separation must be > 0, got {separation}"
        )));
    }
    if input_dim < num_classes {
        return Err(FedError::Config(format!(
            "input_dim {input_dim} cannot hold {num_classes} means at pairwise distance {separation}; need input_dim >= {num_classes}"
        )));
    }

    let mut rng = rng_for(seed, &[0x6d69_7874]);
    let means = orthonormal_frame(num_classes, input_dim, &mut rng)
        .into_iter()
        .map(|v| {
            v.into_iter()
                .map(|x| x * separation / std::f64::consts::SQRT_2)
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>();

    let n = num_classes * n_per_class;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut data = vec![T::zero(); n * input_dim];
    let mut labels = vec![0; n];
    for (src, &dst) in order.iter().enumerate() {
        let c = src / n_per_class;
        labels[dst] = c;
        let row = &mut data[dst * input_dim..(dst + 1) * input_dim];
        for (v, &mu) in row.iter_mut().zip(&means[c]) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = T::of(mu + z);
        }
    }
    LabeledDataset::new(Matrix::from_vec(n, input_dim, data)?, labels, num_classes)
}

/// `k` orthonormal vectors in `R^d` by Gram-Schmidt on Gaussian draws.
fn orthonormal_frame<R: rand::Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // a draw nearly inside the current span is redrawn
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}
