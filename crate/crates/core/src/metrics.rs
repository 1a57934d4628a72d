//! Model and feature-space evaluation.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::data::LabeledDataset;
use crate::error::{FedError, Result};
use crate::losses::{cross_entropy, match_loss, normalize_features, AnchorSet, Matching};
use crate::nn::{squared_distance, Matrix, MlpParams};
use crate::rng::rng_for;
use crate::scalar::Scalar;

/// Sample cap for the quadratic-cost feature-space metrics.
pub const FEATURE_SAMPLE_CAP: usize = 2000;

/// Index of the largest entry; ties resolve to the lowest index.
fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn predict<T: Scalar>(params: &MlpParams<T>, inputs: &Matrix<T>) -> Result<Vec<usize>> {
    let cache = params.forward(inputs)?;
    Ok(cache.logits().row_iter().map(argmax).collect())
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn accuracy<T: Scalar>(params: &MlpParams<T>, ds: &LabeledDataset<T>) -> Result<T> {
    if ds.is_empty() {
        return Err(FedError::Contract("accuracy of an empty dataset".into()));
    }
    let pred = predict(params, ds.inputs())?;
    let correct = pred.iter().zip(ds.labels()).filter(|(p, l)| p == l).count();
    Ok(T::of_usize(correct) / T::of_usize(ds.len()))
}

/// Task loss `F_k` and the matching terms `Q_k` under each anchor set.
fn client_terms<T: Scalar>(
    params: &MlpParams<T>,
    ds: &LabeledDataset<T>,
    anchor_sets: &[&AnchorSet<T>],
    matching: Matching,
) -> Result<(T, Vec<T>)> {
    let cache = params.forward(ds.inputs())?;
    let (task, _) = cross_entropy(cache.logits(), ds.labels())?;
    let normalized = normalize_features(cache.feature());
    let q = anchor_sets
        .iter()
        .map(|a| match_loss(&normalized, ds.labels(), a, matching).map(|(q, _)| q))
        .collect::<Result<Vec<_>>>()?;
    Ok((task, q))
}

fn objective_values<T: Scalar>(
    params: &MlpParams<T>,
    anchor_sets: &[&AnchorSet<T>],
    clients: &[LabeledDataset<T>],
    lambda: f64,
    matching: Matching,
) -> Result<Vec<T>> {
    let total: usize = clients.iter().map(LabeledDataset::len).sum();
    if total == 0 {
        return Err(FedError::Contract("global objective over no samples".into()));
    }
    let lambda_t = T::of(lambda);
    let mut phi = vec![T::zero(); anchor_sets.len().max(1)];
    for ds in clients.iter().filter(|d| !d.is_empty()) {
        let p = T::of_usize(ds.len()) / T::of_usize(total);
        let (task, q) = client_terms(params, ds, anchor_sets, matching)?;
        for (j, v) in phi.iter_mut().enumerate() {
            let m = q.get(j).copied().unwrap_or(T::zero());
            *v += p * (task + lambda_t * m);
        }
    }
    Ok(phi)
}

/// `Φ(w; A) = Σ_k p_k (F_k(w) + λ Q_k(w; A))` with `p_k = |B_k| / Σ|B_k|`.
pub fn global_objective<T: Scalar>(
    params: &MlpParams<T>,
    anchors: &AnchorSet<T>,
    clients: &[LabeledDataset<T>],
    lambda: f64,
    matching: Matching,
) -> Result<T> {
    Ok(objective_values(params, &[anchors], clients, lambda, matching)?[0])
}

/// `(Φ(w; A_old), Φ(w; A_new))` under the ℓ2 matching term. When `new` is
/// the weighted aggregate computed from `params`, the second value never
/// exceeds the first.
pub fn lemma2_monitor<T: Scalar>(
    params: &MlpParams<T>,
    old_anchors: &AnchorSet<T>,
    new_anchors: &AnchorSet<T>,
    clients: &[LabeledDataset<T>],
    lambda: f64,
) -> Result<(T, T)> {
    let phi = objective_values(params, &[old_anchors, new_anchors], clients, lambda, Matching::L2)?;
    Ok((phi[0], phi[1]))
}

/// Outcome of Lloyd's algorithm.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult<T> {
    pub assignments: Vec<usize>,
    pub centroids: Matrix<T>,
    /// Within-cluster sum of squares after each assignment step.
    pub sse_history: Vec<T>,
}

fn nearest<T: Scalar>(x: &[T], centroids: &Matrix<T>) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (j, c) in centroids.row_iter().enumerate() {
        let d = squared_distance(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_plus_plus<T: Scalar, R: Rng>(x: &Matrix<T>, k: usize, rng: &mut R) -> Matrix<T> {
    let n = x.rows();
    let mut centroids = Matrix::zeros(k, x.cols());
    centroids.row_mut(0).copy_from_slice(x.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = x.row_iter().map(|r| squared_distance(r, centroids.row(0)).as_f64()).collect();
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(j).copy_from_slice(x.row(pick));
        for (d, r) in d2.iter_mut().zip(x.row_iter()) {
            *d = d.min(squared_distance(r, centroids.row(j)).as_f64());
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding. Stops after `max_iter` rounds or
/// once no centroid moves more than `1e-8`. An empty cluster is reseeded at
/// the point farthest from its current centroid.
pub fn kmeans<T: Scalar>(features: &Matrix<T>, k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult<T>> {
    let n = features.rows();
    if k == 0 || n < k {
        return Err(FedError::Contract(format!("k-means needs 1 <= k <= n, got k={k}, n={n}")));
    }
    let mut rng = rng_for(seed, &[0x6b6d]);
    let mut centroids = kmeans_plus_plus(features, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut sse_history = Vec::new();
    let tol = T::of(1e-8);

    for _ in 0..max_iter.max(1) {
        let mut sse = T::zero();
        let mut dist = vec![T::zero(); n];
        for (i, x) in features.row_iter().enumerate() {
            let (j, d) = nearest(x, &centroids);
            assignments[i] = j;
            dist[i] = d;
            sse += d;
        }
        sse_history.push(sse);

        let mut sums = Matrix::zeros(k, features.cols());
        let mut counts = vec![0usize; k];
        for (x, &j) in features.row_iter().zip(&assignments) {
            counts[j] += 1;
            for (s, &v) in sums.row_mut(j).iter_mut().zip(x) {
                *s += v;
            }
        }
        let mut moved = T::zero();
        let mut taken = vec![false; n];
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dist[a].partial_cmp(&dist[b]).unwrap().then(b.cmp(&a)))
                    .unwrap();
                taken[far] = true;
                sums.row_mut(j).copy_from_slice(features.row(far));
            } else {
                let inv = T::one() / T::of_usize(counts[j]);
                sums.row_mut(j).iter_mut().for_each(|v| *v *= inv);
            }
            moved = moved.max(squared_distance(sums.row(j), centroids.row(j)).sqrt());
        }
        centroids = sums;
        if moved < tol {
            break;
        }
    }
    Ok(KMeansResult {
        assignments,
        centroids,
        sse_history,
    })
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with arithmetic-mean normalization, in nats.
/// Returns 0 when both partitions are trivial.
pub fn nmi(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    if assignments.len() != labels.len() {
        return Err(FedError::dim("nmi inputs", labels.len(), assignments.len()));
    }
    let n = labels.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&a, &l) in assignments.iter().zip(labels) {
        *joint.entry((a, l)).or_default() += 1;
        *rows.entry(a).or_default() += 1;
        *cols.entry(l).or_default() += 1;
    }
    let nf = n as f64;
    let mi: f64 = joint
        .iter()
        .map(|(&(a, l), &c)| {
            let pij = c as f64 / nf;
            let pi = rows[&a] as f64 / nf;
            let pj = cols[&l] as f64 / nf;
            pij * (pij / (pi * pj)).ln()
        })
        .sum();
    let h_a = entropy(rows.values().copied(), nf);
    let h_l = entropy(cols.values().copied(), nf);
    let denom = 0.5 * (h_a + h_l);
    if denom <= 0.0 {
        return Ok(0.0);
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

/// Mean silhouette coefficient with Euclidean distance. Samples in singleton
/// clusters score 0, as do samples with `a = b = 0`.
pub fn silhouette<T: Scalar>(features: &Matrix<T>, labels: &[usize]) -> Result<T> {
    if features.rows() != labels.len() {
        return Err(FedError::dim("silhouette labels", features.rows(), labels.len()));
    }
    let mut cluster_of: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        let next = cluster_of.len();
        cluster_of.entry(l).or_insert(next);
    }
    let k = cluster_of.len();
    if k < 2 {
        return Err(FedError::Contract(format!(
            "silhouette needs at least 2 categories, got {k}"
        )));
    }
    let cluster: Vec<usize> = labels.iter().map(|l| cluster_of[l]).collect();
    let mut sizes = vec![0usize; k];
    for &c in &cluster {
        sizes[c] += 1;
    }

    let scores: Vec<T> = (0..features.rows())
        .into_par_iter()
        .map(|i| {
            let own = cluster[i];
            if sizes[own] == 1 {
                return T::zero();
            }
            let mut sums = vec![T::zero(); k];
            let xi = features.row(i);
            for (j, xj) in features.row_iter().enumerate() {
                if j != i {
                    sums[cluster[j]] += squared_distance(xi, xj).sqrt();
                }
            }
            let a = sums[own] / T::of_usize(sizes[own] - 1);
            let b = (0..k)
                .filter(|&c| c != own)
                .map(|c| sums[c] / T::of_usize(sizes[c]))
                .fold(T::infinity(), T::min);
            let m = a.max(b);
            if m > T::zero() {
                (b - a) / m
            } else {
                T::zero()
            }
        })
        .collect();
    Ok(scores.iter().copied().sum::<T>() / T::of_usize(scores.len()))
}

/// Normalized features of a model on a dataset, with labels and predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDump<T> {
    pub features: Matrix<T>,
    pub labels: Vec<usize>,
    pub predicted: Vec<usize>,
}

impl<T: Scalar> FeatureDump<T> {
    pub fn from_model(params: &MlpParams<T>, ds: &LabeledDataset<T>) -> Result<Self> {
        let cache = params.forward(ds.inputs())?;
        Ok(Self {
            features: normalize_features(cache.feature()),
            labels: ds.labels().to_vec(),
            predicted: cache.logits().row_iter().map(argmax).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Seeded subsample of at most `cap` rows, kept in source order.
    pub fn subsample(&self, cap: usize, seed: u64) -> Self {
        if self.len() <= cap {
            return self.clone();
        }
        let mut rng = rng_for(seed, &[0x5a3b]);
        let mut idx = index::sample(&mut rng, self.len(), cap).into_vec();
        idx.sort_unstable();
        Self {
            features: self.features.select_rows(&idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            predicted: idx.iter().map(|&i| self.predicted[i]).collect(),
        }
    }

    /// `label,pred,f_1,...,f_d` with a header row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["label".to_string(), "pred".to_string()];
        header.extend((1..=self.features.cols()).map(|j| format!("f_{j}")));
        let to_io = |e: csv::Error| FedError::Io(std::io::Error::other(e));
        w.write_record(&header).map_err(to_io)?;
        for ((row, l), p) in self.features.row_iter().zip(&self.labels).zip(&self.predicted) {
            let mut rec = vec![l.to_string(), p.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(to_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Feature-space quality of a model on a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureQuality {
    pub nmi: f64,
    pub silhouette: f64,
}

/// k-means NMI and silhouette of the normalized features, on a seeded
/// subsample of at most [`FEATURE_SAMPLE_CAP`] samples.
pub fn feature_quality<T: Scalar>(
    params: &MlpParams<T>,
    ds: &LabeledDataset<T>,
    seed: u64,
) -> Result<FeatureQuality> {
    let dump = FeatureDump::from_model(params, ds)?.subsample(FEATURE_SAMPLE_CAP, seed);
    let clusters = dump.labels.iter().copied().collect::<std::collections::BTreeSet<_>>().len();
    let km = kmeans(&dump.features, clusters.max(1), seed, 100)?;
    Ok(FeatureQuality {
        nmi: nmi(&km.assignments, &dump.labels)?,
        silhouette: silhouette(&dump.features, &dump.labels)?.as_f64(),
    })
}
