//! Fully connected classifier with ReLU hidden layers.
//!
//! Layer `l` maps `layer_dims[l] -> layer_dims[l + 1]` as `z = a·W + b` with
//! `W` stored `in × out`. Hidden layers apply ReLU; the last layer emits raw
//! logits. The *feature* of a sample is the activation that feeds the last
//! layer, so its width is `layer_dims[L - 1]` (the input itself when the net
//! has no hidden layer).

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::matrix::Matrix;
use crate::error::{FedError, Result};
use crate::rng::rng_for;
use crate::scalar::Scalar;

/// Trainable parameters of the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<T> {
    layer_dims: Vec<usize>,
    weights: Vec<Matrix<T>>,
    biases: Vec<Vec<T>>,
}

/// Gradients (or optimizer state) shaped like an [`MlpParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T> {
    pub weights: Vec<Matrix<T>>,
    pub biases: Vec<Vec<T>>,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    /// `activations[l]` is the input of layer `l`; `activations[0]` is the batch.
    activations: Vec<Matrix<T>>,
    /// `pre_activations[l]` is `a_l·W_l + b_l`; the last entry is the logits.
    pre_activations: Vec<Matrix<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Penultimate activation, `batch × d`.
    pub fn feature(&self) -> &Matrix<T> {
        self.activations.last().expect("at least one layer")
    }

    /// Final layer output, `batch × C`.
    pub fn logits(&self) -> &Matrix<T> {
        self.pre_activations.last().expect("at least one layer")
    }

    pub fn batch_size(&self) -> usize {
        self.activations[0].rows()
    }
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(FedError::Config(format!(
            "layer_dims needs at least input and output widths, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(FedError::Config(format!(
            "layer widths must be positive, got {layer_dims:?}"
        )));
    }
    Ok(())
}

impl<T: Scalar> MlpParams<T> {
    /// All-zero weights and biases.
    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        validate_dims(layer_dims)?;
        let weights = layer_dims
            .windows(2)
            .map(|w| Matrix::zeros(w[0], w[1]))
            .collect();
        let biases = layer_dims[1..].iter().map(|&n| vec![T::zero(); n]).collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
        })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, &[0x1417]);
        Self::init_with_rng(layer_dims, &mut rng)
    }

    pub fn init_with_rng<R: Rng + ?Sized>(layer_dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(layer_dims)?;
        for w in &mut p.weights {
            let limit = (6.0 / (w.rows() + w.cols()) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            for v in w.as_mut_slice() {
                *v = T::of(dist.sample(rng));
            }
        }
        Ok(p)
    }

    /// Assembles parameters from explicit per-layer tensors.
    pub fn from_parts(weights: Vec<Matrix<T>>, biases: Vec<Vec<T>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(FedError::dim(
                "MlpParams::from_parts layer count",
                format!("{} weight matrices with matching biases", weights.len()),
                format!("{} bias vectors", biases.len()),
            ));
        }
        let mut layer_dims = vec![weights[0].rows()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.rows() != *layer_dims.last().unwrap() {
                return Err(FedError::dim(
                    format!("layer {l} weight rows"),
                    layer_dims.last().unwrap(),
                    w.rows(),
                ));
            }
            if b.len() != w.cols() {
                return Err(FedError::dim(format!("layer {l} bias"), w.cols(), b.len()));
            }
            layer_dims.push(w.cols());
        }
        validate_dims(&layer_dims)?;
        Ok(Self {
            layer_dims,
            weights,
            biases,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 2]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn weights(&self) -> &[Matrix<T>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<T>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.biases
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Parameter tensors in a fixed order: `W0, b0, W1, b1, ...`.
    pub fn tensors(&self) -> impl Iterator<Item = &[T]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [T]> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()])
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.tensors().flatten().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(FedError::dim("MlpParams::set_flat", self.param_count(), flat.len()));
        }
        let mut it = flat.iter();
        for t in self.tensors_mut() {
            for v in t {
                *v = *it.next().unwrap();
            }
        }
        Ok(())
    }

    pub fn is_congruent(&self, other: &Self) -> bool {
        self.layer_dims == other.layer_dims
    }

    /// Euclidean distance between two congruent parameter vectors.
    pub fn distance(&self, other: &Self) -> T {
        debug_assert!(self.is_congruent(other));
        self.tensors()
            .zip(other.tensors())
            .flat_map(|(a, b)| a.iter().zip(b))
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            .sqrt()
    }

    /// Runs the network on a `batch × d_in` matrix.
    pub fn forward(&self, batch: &Matrix<T>) -> Result<ForwardCache<T>> {
        if batch.cols() != self.input_dim() {
            return Err(FedError::dim("layer 0 input", self.input_dim(), batch.cols()));
        }
        let last = self.num_layers() - 1;
        let mut activations = Vec::with_capacity(self.num_layers());
        let mut pre_activations = Vec::with_capacity(self.num_layers());
        activations.push(batch.clone());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let input = activations.last().unwrap();
            let mut z = input.matmul_unchecked(w);
            for r in 0..z.rows() {
                for (v, &bias) in z.row_mut(r).iter_mut().zip(b) {
                    *v += bias;
                }
            }
            if l < last {
                activations.push(z.map(|v| v.max(T::zero())));
            }
            pre_activations.push(z);
        }
        Ok(ForwardCache {
            activations,
            pre_activations,
        })
    }

    /// Exact gradient of the scalar whose sensitivities to the logits and to
    /// the feature are `d_logits` and `d_feature`.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        d_logits: &Matrix<T>,
        d_feature: &Matrix<T>,
    ) -> Result<ParamGrads<T>> {
        if cache.pre_activations.len() != self.num_layers() {
            return Err(FedError::dim(
                "backward cache depth",
                self.num_layers(),
                cache.pre_activations.len(),
            ));
        }
        if d_logits.shape() != cache.logits().shape() {
            return Err(FedError::dim(
                "backward d_logits",
                format!("{:?}", cache.logits().shape()),
                format!("{:?}", d_logits.shape()),
            ));
        }
        if d_feature.shape() != cache.feature().shape() {
            return Err(FedError::dim(
                "backward d_feature",
                format!("{:?}", cache.feature().shape()),
                format!("{:?}", d_feature.shape()),
            ));
        }

        let n_layers = self.num_layers();
        let mut grad_w = Vec::with_capacity(n_layers);
        let mut grad_b = Vec::with_capacity(n_layers);
        // sensitivity of the pre-activation of the current layer
        let mut delta = d_logits.clone();
        for l in (0..n_layers).rev() {
            let input = &cache.activations[l];
            grad_w.push(input.t_matmul(&delta));
            let mut gb = vec![T::zero(); delta.cols()];
            for row in delta.row_iter() {
                for (g, &d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            grad_b.push(gb);
            if l == 0 {
                break;
            }
            let mut d_act = delta.matmul_t(&self.weights[l]);
            if l == n_layers - 1 {
                d_act.add_assign(d_feature);
            }
            let pre = &cache.pre_activations[l - 1];
            for (d, &z) in d_act.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                if z <= T::zero() {
                    *d = T::zero();
                }
            }
            delta = d_act;
        }
        grad_w.reverse();
        grad_b.reverse();
        Ok(ParamGrads {
            weights: grad_w,
            biases: grad_b,
        })
    }
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_like(params: &MlpParams<T>) -> Self {
        Self {
            weights: params
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: params.biases.iter().map(|b| vec![T::zero(); b.len()]).collect(),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &[T]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [T]> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()])
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.tensors().flatten().copied().collect()
    }

    pub fn is_congruent(&self, params: &MlpParams<T>) -> bool {
        self.weights.len() == params.weights.len()
            && self
                .weights
                .iter()
                .zip(&params.weights)
                .all(|(a, b)| a.shape() == b.shape())
            && self
                .biases
                .iter()
                .zip(&params.biases)
                .all(|(a, b)| a.len() == b.len())
    }

    pub fn norm(&self) -> T {
        self.tensors().flatten().map(|&v| v * v).sum::<T>().sqrt()
    }
}

/// Elementwise convex combination `Σ weights[k] · params_list[k]`.
///
/// Weights must be nonnegative and sum to one within `1e-9` (or a few ulps
/// of the scalar type, whichever is looser). Accumulation runs
/// in list order so results are reproducible.
pub fn weighted_param_sum<T: Scalar>(
    params_list: &[&MlpParams<T>],
    weights: &[T],
) -> Result<MlpParams<T>> {
    let first = params_list
        .first()
        .ok_or_else(|| FedError::Contract("weighted_param_sum needs at least one model".into()))?;
    if params_list.len() != weights.len() {
        return Err(FedError::dim(
            "weighted_param_sum weights",
            params_list.len(),
            weights.len(),
        ));
    }
    for (k, p) in params_list.iter().enumerate() {
        if !p.is_congruent(first) {
            return Err(FedError::dim(
                format!("weighted_param_sum model {k}"),
                format!("{:?}", first.layer_dims()),
                format!("{:?}", p.layer_dims()),
            ));
        }
    }
    if weights.iter().any(|w| !w.is_finite() || *w < T::zero()) {
        return Err(FedError::Contract(
            "aggregation weights must be finite and nonnegative".into(),
        ));
    }
    let total: T = weights.iter().copied().sum();
    let tol = (T::epsilon().as_f64() * 4.0 * weights.len() as f64).max(1e-9);
    if (total - T::one()).abs().as_f64() > tol {
        return Err(FedError::Contract(format!(
            "aggregation weights sum to {total}, expected 1"
        )));
    }

    let mut out = MlpParams::zeros(first.layer_dims())?;
    for (p, &w) in params_list.iter().zip(weights) {
        for (dst, src) in out.tensors_mut().zip(p.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    Ok(out)
}
