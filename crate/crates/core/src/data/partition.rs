//! Non-IID client partitions: Dirichlet label skew, one dominant category per
//! client, and missing categories. Every partitioner returns a true partition
//! of the source indices; `unassigned` lists samples no client received.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use super::LabeledDataset;
use crate::error::{FedError, Result};
use crate::rng::rng_for;
use crate::scalar::Scalar;

/// Client datasets plus the `K × C` table of per-category counts.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientSplit<T> {
    clients: Vec<LabeledDataset<T>>,
    counts: Vec<Vec<usize>>,
    source_indices: Vec<Vec<usize>>,
    unassigned: Vec<usize>,
}

impl<T: Scalar> ClientSplit<T> {
    /// Builds the split from per-client source indices into `ds`.
    pub fn from_assignments(ds: &LabeledDataset<T>, assignments: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = vec![false; ds.len()];
        for (k, idx) in assignments.iter().enumerate() {
            for &i in idx {
                if i >= ds.len() {
                    return Err(FedError::Contract(format!(
                        "client {k} references sample {i} beyond dataset size {}",
                        ds.len()
                    )));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(FedError::Contract(format!(
                        "sample {i} assigned to more than one client"
                    )));
                }
            }
        }
        let unassigned = (0..ds.len()).filter(|&i| !seen[i]).collect();
        let clients: Vec<_> = assignments.iter().map(|idx| ds.subset(idx)).collect();
        let counts = clients.iter().map(|c| c.class_counts()).collect();
        Ok(Self {
            clients,
            counts,
            source_indices: assignments,
            unassigned,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn clients(&self) -> &[LabeledDataset<T>] {
        &self.clients
    }

    pub fn client(&self, k: usize) -> &LabeledDataset<T> {
        &self.clients[k]
    }

    /// `counts()[k][c]` is the number of samples of category `c` at client `k`.
    pub fn counts(&self) -> &[Vec<usize>] {
        &self.counts
    }

    pub fn source_indices(&self) -> &[Vec<usize>] {
        &self.source_indices
    }

    pub fn unassigned(&self) -> &[usize] {
        &self.unassigned
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(LabeledDataset::len).collect()
    }

    pub fn total_size(&self) -> usize {
        self.clients.iter().map(LabeledDataset::len).sum()
    }

    /// Aggregation weights `p_k = |B_k| / Σ|B_k|`.
    pub fn weights(&self) -> Vec<T> {
        let total = T::of_usize(self.total_size());
        self.clients
            .iter()
            .map(|c| T::of_usize(c.len()) / total)
            .collect()
    }
}

/// Splits `n` into integer parts proportional to `props`, assigning the
/// leftover units to the largest fractional remainders (lowest index on ties).
pub(crate) fn largest_remainder(n: usize, props: &[f64]) -> Vec<usize> {
    let total: f64 = props.iter().sum();
    let quotas: Vec<f64> = props.iter().map(|p| n as f64 * p / total).collect();
    let mut parts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = parts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        parts[k] += 1;
    }
    parts
}

fn shuffled_groups<T: Scalar, R: Rng>(ds: &LabeledDataset<T>, rng: &mut R) -> Vec<Vec<usize>> {
    let mut groups = ds.indices_by_class();
    for g in &mut groups {
        g.shuffle(rng);
    }
    groups
}

fn dirichlet_sample<R: Rng>(beta: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(beta, 1.0).expect("beta > 0 checked by caller");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.into_iter().map(|g| g / sum).collect()
    } else {
        // every draw underflowed: the limit of tiny beta is a single owner
        let owner = rng.random_range(0..k);
        (0..k).map(|i| if i == owner { 1.0 } else { 0.0 }).collect()
    }
}

/// Label-skew split: each category is divided among the `K` clients in
/// proportions drawn from `Dir(beta · 1_K)`.
///
/// Clients left empty receive one sample from the largest category bucket of
/// the currently largest client.
pub fn partition_dirichlet<T: Scalar>(
    ds: &LabeledDataset<T>,
    num_clients: usize,
    beta: f64,
    seed: u64,
) -> Result<ClientSplit<T>> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(FedError::Config(format!("beta must be > 0, got {beta}")));
    }
    if num_clients == 0 {
        return Err(FedError::Config("need at least one client".into()));
    }
    if num_clients > ds.len() {
        return Err(FedError::Config(format!(
            "{num_clients} clients exceed the {} available samples",
            ds.len()
        )));
    }
    let mut rng = rng_for(seed, &[0xd1c1]);
    let groups = shuffled_groups(ds, &mut rng);

    // buckets[k][c] holds client k's samples of category c
    let mut buckets = vec![vec![Vec::new(); ds.num_classes()]; num_clients];
    for (c, group) in groups.iter().enumerate() {
        let props = dirichlet_sample(beta, num_clients, &mut rng);
        let parts = largest_remainder(group.len(), &props);
        let mut offset = 0;
        for (k, &n) in parts.iter().enumerate() {
            buckets[k][c].extend_from_slice(&group[offset..offset + n]);
            offset += n;
        }
    }

    let size = |b: &Vec<Vec<usize>>| b.iter().map(Vec::len).sum::<usize>();
    while let Some(empty) = buckets.iter().position(|b| size(b) == 0) {
        let donor = (0..num_clients)
            .max_by(|&a, &b| size(&buckets[a]).cmp(&size(&buckets[b])).then(b.cmp(&a)))
            .unwrap();
        let cat = (0..ds.num_classes())
            .max_by(|&a, &b| buckets[donor][a].len().cmp(&buckets[donor][b].len()).then(b.cmp(&a)))
            .unwrap();
        let moved = buckets[donor][cat].pop().expect("donor has samples");
        buckets[empty][cat].push(moved);
    }

    let assignments = buckets.into_iter().map(|b| b.concat()).collect();
    ClientSplit::from_assignments(ds, assignments)
}

/// Per-category sample demand of one client of size `size` whose dominant
/// category is `dominant`.
fn dominant_row(size: usize, dominant: usize, num_classes: usize, frac: f64) -> Vec<usize> {
    let dom = ((frac * size as f64).round() as usize).min(size);
    let rest = size - dom;
    let others = num_classes - 1;
    let mut row = vec![0; num_classes];
    row[dominant] = dom;
    for j in 0..others {
        let c = (dominant + 1 + j) % num_classes;
        row[c] = rest / others + usize::from(j < rest % others);
    }
    row
}

/// Equal-size clients where client `k` draws `dominant_frac` of its samples
/// from category `k` and spreads the rest evenly over the other categories.
///
/// `client_size = None` picks the largest size every category can supply.
pub fn partition_dominant<T: Scalar>(
    ds: &LabeledDataset<T>,
    num_clients: usize,
    dominant_frac: f64,
    client_size: Option<usize>,
    seed: u64,
) -> Result<ClientSplit<T>> {
    let c_total = ds.num_classes();
    if !(dominant_frac > 0.0 && dominant_frac < 1.0) {
        return Err(FedError::Config(format!(
            "dominant_frac must lie in (0, 1), got {dominant_frac}"
        )));
    }
    if num_clients == 0 || num_clients > c_total {
        return Err(FedError::Config(format!(
            "dominant partition needs 1 <= K <= C, got K={num_clients}, C={c_total}"
        )));
    }
    let available = ds.class_counts();
    let demand = |size: usize| {
        let mut d = vec![0; c_total];
        for k in 0..num_clients {
            for (c, n) in dominant_row(size, k % c_total, c_total, dominant_frac)
                .into_iter()
                .enumerate()
            {
                d[c] += n;
            }
        }
        d
    };
    let fits = |size: usize| demand(size).iter().zip(&available).all(|(d, a)| d <= a);

    let size = match client_size {
        Some(s) => {
            if !fits(s) {
                let shortfall: Vec<String> = demand(s)
                    .iter()
                    .zip(&available)
                    .enumerate()
                    .filter(|(_, (d, a))| d > a)
                    .map(|(c, (d, a))| format!("category {c}: need {d}, have {a}"))
                    .collect();
                return Err(FedError::Config(format!(
                    "insufficient samples for client size {s}: {}",
                    shortfall.join("; ")
                )));
            }
            s
        }
        None => (1..=ds.len() / num_clients)
            .rev()
            .find(|&s| fits(s))
            .ok_or_else(|| {
                FedError::Config("no positive client size fits the dataset".into())
            })?,
    };

    let mut rng = rng_for(seed, &[0xd0_41]);
    let mut pools = shuffled_groups(ds, &mut rng);
    let mut assignments = Vec::with_capacity(num_clients);
    for k in 0..num_clients {
        let row = dominant_row(size, k % c_total, c_total, dominant_frac);
        let mut idx = Vec::with_capacity(size);
        for (c, &n) in row.iter().enumerate() {
            let pool = &mut pools[c];
            idx.extend(pool.drain(pool.len() - n..));
        }
        assignments.push(idx);
    }
    ClientSplit::from_assignments(ds, assignments)
}

/// Each client lacks `missing` categories. Client `k` holds a window of
/// `C - missing` consecutive categories of a seeded permutation, with window
/// starts spread evenly around the category ring; each category's samples are
/// shared evenly by the clients that hold it.
pub fn partition_missing<T: Scalar>(
    ds: &LabeledDataset<T>,
    num_clients: usize,
    missing: usize,
    seed: u64,
) -> Result<ClientSplit<T>> {
    let c_total = ds.num_classes();
    if missing == 0 || missing >= c_total {
        return Err(FedError::Config(format!(
            "missing must lie in [1, C), got {missing} with C={c_total}"
        )));
    }
    if num_clients == 0 {
        return Err(FedError::Config("need at least one client".into()));
    }
    let held = c_total - missing;
    let mut rng = rng_for(seed, &[0x3155]);
    let mut perm: Vec<usize> = (0..c_total).collect();
    perm.shuffle(&mut rng);

    let mut holders = vec![Vec::new(); c_total];
    for k in 0..num_clients {
        let start = k * c_total / num_clients;
        for j in 0..held {
            holders[perm[(start + j) % c_total]].push(k);
        }
    }
    if let Some(c) = holders.iter().position(Vec::is_empty) {
        return Err(FedError::Config(format!(
            "{num_clients} clients holding {held} categories each cannot cover category {c}"
        )));
    }

    let groups = shuffled_groups(ds, &mut rng);
    let mut assignments = vec![Vec::new(); num_clients];
    for (c, group) in groups.iter().enumerate() {
        let parts = largest_remainder(group.len(), &vec![1.0; holders[c].len()]);
        let mut offset = 0;
        for (&k, &n) in holders[c].iter().zip(&parts) {
            assignments[k].extend_from_slice(&group[offset..offset + n]);
            offset += n;
        }
    }
    ClientSplit::from_assignments(ds, assignments)
}

fn holdout_count(n: usize, frac: f64) -> usize {
    ((frac * n as f64).round() as usize).clamp(1, n - 1)
}

fn validate_frac(frac: f64) -> Result<()> {
    if frac > 0.0 && frac < 1.0 {
        Ok(())
    } else {
        Err(FedError::Config(format!("holdout fraction must lie in (0, 1), got {frac}")))
    }
}

/// Stratified split into `(kept, held_out)` with `round(frac · n_c)` samples
/// of each category held out. Sample order within each side follows the source.
pub fn holdout_split<T: Scalar>(
    ds: &LabeledDataset<T>,
    frac: f64,
    seed: u64,
) -> Result<(LabeledDataset<T>, LabeledDataset<T>)> {
    validate_frac(frac)?;
    let counts = ds.class_counts();
    if let Some(c) = counts.iter().position(|&n| n == 1) {
        return Err(FedError::Config(format!(
            "category {c} has a single sample and cannot be stratified"
        )));
    }
    let mut rng = rng_for(seed, &[0x401d]);
    let mut keep = Vec::new();
    let mut held = Vec::new();
    for group in shuffled_groups(ds, &mut rng) {
        if group.is_empty() {
            continue;
        }
        let h = holdout_count(group.len(), frac);
        held.extend_from_slice(&group[..h]);
        keep.extend_from_slice(&group[h..]);
    }
    keep.sort_unstable();
    held.sort_unstable();
    Ok((ds.subset(&keep), ds.subset(&held)))
}

/// Per-client validation holdout. Categories with fewer than two samples at a
/// client stay entirely in that client's training portion.
///
/// Returns the training split (source indices still refer to the original
/// dataset of `split`) and one validation set per client.
pub fn client_holdout<T: Scalar>(
    split: &ClientSplit<T>,
    frac: f64,
    seed: u64,
) -> Result<(ClientSplit<T>, Vec<LabeledDataset<T>>)> {
    validate_frac(frac)?;
    let mut clients = Vec::with_capacity(split.num_clients());
    let mut validation = Vec::with_capacity(split.num_clients());
    let mut sources = Vec::with_capacity(split.num_clients());
    for (k, ds) in split.clients().iter().enumerate() {
        let mut rng = rng_for(seed, &[0x7a1, k as u64]);
        let mut keep = Vec::new();
        let mut held = Vec::new();
        for group in shuffled_groups(ds, &mut rng) {
            if group.len() < 2 {
                keep.extend_from_slice(&group);
                continue;
            }
            let h = holdout_count(group.len(), frac);
            held.extend_from_slice(&group[..h]);
            keep.extend_from_slice(&group[h..]);
        }
        keep.sort_unstable();
        held.sort_unstable();
        sources.push(keep.iter().map(|&i| split.source_indices[k][i]).collect());
        clients.push(ds.subset(&keep));
        validation.push(ds.subset(&held));
    }
    let counts = clients.iter().map(|c| c.class_counts()).collect();
    let train = ClientSplit {
        clients,
        counts,
        source_indices: sources,
        unassigned: split.unassigned.clone(),
    };
    Ok((train, validation))
}
