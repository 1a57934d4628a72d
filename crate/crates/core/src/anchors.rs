//! Anchor lifecycle: local category means of normalized features, their
//! weighted or uniform aggregation on the server, and the pooled closed form
//! used as a test oracle.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{FedError, Result};
use crate::losses::{normalize_features, AnchorSet};
use crate::nn::{Matrix, MlpParams};
use crate::scalar::Scalar;

/// How the server combines local anchors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorAggregation {
    /// Weighted by each client's per-category sample count.
    #[default]
    Weighted,
    /// Arithmetic mean over clients; absent clients contribute the previous global anchor.
    Uniform,
}

/// What a client uploads after computing its local anchors.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalAnchorReport<T> {
    pub client_id: usize,
    /// `C × d`; rows of absent categories are zero and never read.
    pub anchors: Matrix<T>,
    pub counts: Vec<usize>,
    pub presence: Vec<bool>,
}

impl<T: Scalar> LocalAnchorReport<T> {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.anchors.cols()
    }

    pub fn anchor(&self, c: usize) -> Option<&[T]> {
        self.presence[c].then(|| self.anchors.row(c))
    }
}

/// Normalized penultimate features of every row of `inputs`.
pub fn normalized_features<T: Scalar>(params: &MlpParams<T>, inputs: &Matrix<T>) -> Result<Matrix<T>> {
    let cache = params.forward(inputs)?;
    Ok(normalize_features(cache.feature()))
}

/// Per-category sums of normalized features and the category counts.
fn class_sums<T: Scalar>(
    params: &MlpParams<T>,
    ds: &LabeledDataset<T>,
) -> Result<(Matrix<T>, Vec<usize>)> {
    let feats = normalized_features(params, ds.inputs())?;
    let mut sums = Matrix::zeros(ds.num_classes(), params.feature_dim());
    let mut counts = vec![0usize; ds.num_classes()];
    for (f, &c) in feats.row_iter().zip(ds.labels()) {
        counts[c] += 1;
        for (s, &v) in sums.row_mut(c).iter_mut().zip(f) {
            *s += v;
        }
    }
    Ok((sums, counts))
}

fn divide_rows<T: Scalar>(sums: &mut Matrix<T>, counts: &[usize]) -> Vec<bool> {
    counts
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            if n > 0 {
                let inv = T::one() / T::of_usize(n);
                sums.row_mut(c).iter_mut().for_each(|v| *v *= inv);
            }
            n > 0
        })
        .collect()
}

/// Client-side anchor calculation on the model the client currently holds.
/// Inference only; parameters are not touched.
pub fn local_anchors<T: Scalar>(
    params: &MlpParams<T>,
    client_ds: &LabeledDataset<T>,
    client_id: usize,
) -> Result<LocalAnchorReport<T>> {
    if client_ds.is_empty() {
        return Err(FedError::Contract(format!(
            "client {client_id} has no samples to compute anchors from"
        )));
    }
    let (mut anchors, counts) = class_sums(params, client_ds)?;
    let presence = divide_rows(&mut anchors, &counts);
    Ok(LocalAnchorReport {
        client_id,
        anchors,
        counts,
        presence,
    })
}

fn check_reports<T: Scalar>(reports: &[LocalAnchorReport<T>]) -> Result<(usize, usize)> {
    let first = reports
        .first()
        .ok_or_else(|| FedError::Contract("anchor aggregation needs at least one report".into()))?;
    let shape = (first.num_classes(), first.dim());
    for r in reports {
        if (r.num_classes(), r.dim()) != shape || r.presence.len() != shape.0 {
            return Err(FedError::dim(
                format!("anchor report of client {}", r.client_id),
                format!("{}x{}", shape.0, shape.1),
                format!("{}x{}", r.num_classes(), r.dim()),
            ));
        }
    }
    Ok(shape)
}

fn check_previous<T: Scalar>(previous: &AnchorSet<T>, shape: (usize, usize)) -> Result<()> {
    if (previous.num_classes(), previous.dim()) != shape {
        return Err(FedError::dim(
            "previous anchor set",
            format!("{}x{}", shape.0, shape.1),
            format!("{}x{}", previous.num_classes(), previous.dim()),
        ));
    }
    Ok(())
}

/// Sample-count weighted aggregation:
/// `a_c = Σ_k |B_{k,c}| a_{k,c} / Σ_k |B_{k,c}|`.
///
/// A category no client holds keeps its `previous` anchor when one is defined
/// and is otherwise left undefined.
pub fn aggregate_weighted<T: Scalar>(
    reports: &[LocalAnchorReport<T>],
    previous: Option<&AnchorSet<T>>,
    round_tag: usize,
) -> Result<AnchorSet<T>> {
    let (classes, dim) = check_reports(reports)?;
    if let Some(p) = previous {
        check_previous(p, (classes, dim))?;
    }
    let mut out = Matrix::zeros(classes, dim);
    let mut presence = vec![false; classes];
    for c in 0..classes {
        let total: usize = reports.iter().map(|r| r.counts[c]).sum();
        if total == 0 {
            if let Some(prev) = previous.and_then(|p| p.anchor(c)) {
                out.row_mut(c).copy_from_slice(prev);
                presence[c] = true;
            }
            continue;
        }
        let row = out.row_mut(c);
        for r in reports {
            let Some(a) = r.anchor(c) else { continue };
            let w = T::of_usize(r.counts[c]);
            for (o, &v) in row.iter_mut().zip(a) {
                *o += w * v;
            }
        }
        let inv = T::one() / T::of_usize(total);
        row.iter_mut().for_each(|v| *v *= inv);
        presence[c] = true;
    }
    AnchorSet::new(out, presence, round_tag)
}

/// Unweighted mean of the clients' anchors. A client lacking a category
/// contributes the previous global anchor instead; when that is undefined too
/// the mean runs over the clients that hold the category.
pub fn aggregate_uniform<T: Scalar>(
    reports: &[LocalAnchorReport<T>],
    previous: &AnchorSet<T>,
    round_tag: usize,
) -> Result<AnchorSet<T>> {
    let (classes, dim) = check_reports(reports)?;
    check_previous(previous, (classes, dim))?;
    let mut out = Matrix::zeros(classes, dim);
    let mut presence = vec![false; classes];
    for c in 0..classes {
        let row = out.row_mut(c);
        let mut n = 0usize;
        for r in reports {
            let Some(a) = r.anchor(c).or_else(|| previous.anchor(c)) else { continue };
            for (o, &v) in row.iter_mut().zip(a) {
                *o += v;
            }
            n += 1;
        }
        if n > 0 {
            let inv = T::one() / T::of_usize(n);
            row.iter_mut().for_each(|v| *v *= inv);
            presence[c] = true;
        }
    }
    AnchorSet::new(out, presence, round_tag)
}

/// Server-side aggregation dispatch.
pub fn aggregate<T: Scalar>(
    reports: &[LocalAnchorReport<T>],
    previous: Option<&AnchorSet<T>>,
    mode: AnchorAggregation,
    round_tag: usize,
) -> Result<AnchorSet<T>> {
    match mode {
        AnchorAggregation::Weighted => aggregate_weighted(reports, previous, round_tag),
        AnchorAggregation::Uniform => {
            let (classes, dim) = check_reports(reports)?;
            let undefined;
            let prev = match previous {
                Some(p) => p,
                None => {
                    undefined = AnchorSet::undefined(classes, dim);
                    &undefined
                }
            };
            aggregate_uniform(reports, prev, round_tag)
        }
    }
}

/// Per-category mean of normalized features over all clients' pooled data.
/// Not part of the federated path: a server cannot see this data.
pub fn direct_global_anchors<T: Scalar>(
    params: &MlpParams<T>,
    all_data: &[LabeledDataset<T>],
) -> Result<AnchorSet<T>> {
    let first = all_data
        .first()
        .ok_or_else(|| FedError::Contract("direct anchors need at least one dataset".into()))?;
    let mut sums = Matrix::zeros(first.num_classes(), params.feature_dim());
    let mut counts = vec![0usize; first.num_classes()];
    for ds in all_data {
        if ds.num_classes() != first.num_classes() {
            return Err(FedError::dim("direct_global_anchors categories", first.num_classes(), ds.num_classes()));
        }
        if ds.is_empty() {
            continue;
        }
        let (s, n) = class_sums(params, ds)?;
        sums.add_assign(&s);
        counts.iter_mut().zip(n).for_each(|(a, b)| *a += b);
    }
    let presence = divide_rows(&mut sums, &counts);
    AnchorSet::new(sums, presence, 0)
}
