//! Labeled datasets, synthetic generation, CSV ingestion and client partitioning.

mod csv_load;
mod partition;
mod synthetic;

pub use csv_load::load_csv_dataset;
pub use partition::{
    client_holdout, holdout_split, partition_dirichlet, partition_dominant, partition_missing,
    ClientSplit,
};
pub use synthetic::gen_gaussian_mixture;

use crate::error::{FedError, Result};
use crate::nn::Matrix;
use crate::scalar::Scalar;

/// Samples `inputs` (one row each) with category labels in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset<T> {
    inputs: Matrix<T>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(inputs: Matrix<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(FedError::dim("LabeledDataset labels", inputs.rows(), labels.len()));
        }
        if let Some((i, &c)) = labels.iter().enumerate().find(|(_, &c)| c >= num_classes) {
            return Err(FedError::Contract(format!(
                "label {c} of sample {i} is outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn empty(input_dim: usize, num_classes: usize) -> Self {
        Self {
            inputs: Matrix::zeros(0, input_dim),
            labels: Vec::new(),
            num_classes,
        }
    }

    pub fn inputs(&self) -> &Matrix<T> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of samples per category.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &c in &self.labels {
            counts[c] += 1;
        }
        counts
    }

    /// Sample indices grouped by category, each group in ascending order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_classes];
        for (i, &c) in self.labels.iter().enumerate() {
            groups[c].push(i);
        }
        groups
    }

    /// Copies the given samples, in order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Concatenates datasets that share input width and category count.
    pub fn concat(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| FedError::Contract("cannot concatenate zero datasets".into()))?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.input_dim() != first.input_dim() || p.num_classes != first.num_classes {
                return Err(FedError::dim(
                    "LabeledDataset::concat",
                    format!("d_in={} C={}", first.input_dim(), first.num_classes),
                    format!("d_in={} C={}", p.input_dim(), p.num_classes),
                ));
            }
            data.extend_from_slice(p.inputs.as_slice());
            labels.extend_from_slice(&p.labels);
        }
        let inputs = Matrix::from_vec(labels.len(), first.input_dim(), data)?;
        Ok(Self {
            inputs,
            labels,
            num_classes: first.num_classes,
        })
    }
}
