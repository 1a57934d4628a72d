//! Named self-checks at small scale: finite-difference gradient checks,
//! the anchor aggregation oracle, the anchor-update monitor and ledger
//! conservation.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::anchors::{aggregate_weighted, direct_global_anchors, local_anchors};
use crate::data::{gen_gaussian_mixture, partition_dirichlet, LabeledDataset};
use crate::error::{FedError, Result};
use crate::losses::{combined_local_loss, normalize_features, AnchorSet, Matching};
use crate::nn::{Matrix, MlpParams};
use crate::protocol::{run_experiment, Algorithm, FedConfig};
use crate::rng::rng_for;

pub const GRAD_CHECK_CE: &str = "grad_check.cross_entropy";
pub const GRAD_CHECK_L2: &str = "grad_check.l2_match";
pub const GRAD_CHECK_CG: &str = "grad_check.cg_loss";
pub const GRAD_CHECK_COMBINED: &str = "grad_check.combined";
pub const ANCHOR_EQUIVALENCE: &str = "anchor_equivalence";
pub const LEMMA2_MONOTONICITY: &str = "lemma2_monotonicity";
pub const LEDGER_CONSERVATION: &str = "ledger_conservation";

/// Every check, in execution order.
pub const ALL_CHECKS: [&str; 7] = [
    GRAD_CHECK_CE,
    GRAD_CHECK_L2,
    GRAD_CHECK_CG,
    GRAD_CHECK_COMBINED,
    ANCHOR_EQUIVALENCE,
    LEMMA2_MONOTONICITY,
    LEDGER_CONSERVATION,
];

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const ANCHOR_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Which objective a gradient check differentiates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GradTarget {
    CrossEntropy,
    L2Match,
    CgMatch { alpha: f64 },
    Combined { lambda: f64, matching: Matching },
}

impl GradTarget {
    fn matching(self) -> (Matching, f64) {
        match self {
            GradTarget::CrossEntropy => (Matching::None, 0.0),
            GradTarget::L2Match => (Matching::L2, 1.0),
            GradTarget::CgMatch { alpha } => (Matching::Contrastive { alpha }, 1.0),
            GradTarget::Combined { lambda, matching } => (matching, lambda),
        }
    }

    fn includes_task(self) -> bool {
        !matches!(self, GradTarget::L2Match | GradTarget::CgMatch { .. })
    }
}

/// A random network, batch and anchor set for gradient checking.
#[derive(Clone, Debug)]
pub struct GradInstance {
    pub params: MlpParams<f64>,
    pub inputs: Matrix<f64>,
    pub labels: Vec<usize>,
    pub anchors: AnchorSet<f64>,
}

impl GradInstance {
    pub fn random(layer_dims: &[usize], batch: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, &[0x67c4]);
        let mut params = MlpParams::init_with_rng(layer_dims, &mut rng)?;
        // nonzero biases keep pre-activations away from the ReLU kink at exactly 0
        for b in params.biases_mut() {
            b.iter_mut().for_each(|v| *v = 0.1 * rng.sample::<f64, _>(StandardNormal));
        }
        let mut normal = |r: usize, c: usize| -> Result<Matrix<f64>> {
            Matrix::from_vec(r, c, (0..r * c).map(|_| rng.sample(StandardNormal)).collect())
        };
        let inputs = normal(batch, params.input_dim())?;
        let raw_anchors = normal(params.num_classes(), params.feature_dim())?;
        let classes = params.num_classes();
        let labels = (0..batch).map(|i| (i * 7 + seed as usize) % classes).collect();
        Ok(Self {
            params,
            inputs,
            labels,
            anchors: AnchorSet::from_matrix(normalize_features(&raw_anchors), 0)?,
        })
    }

    fn value(&self, params: &MlpParams<f64>, target: GradTarget) -> Result<f64> {
        let cache = params.forward(&self.inputs)?;
        let (matching, lambda) = target.matching();
        let loss = combined_local_loss(&cache, &self.labels, Some(&self.anchors), lambda, matching)?;
        Ok(if target.includes_task() {
            loss.breakdown.total
        } else {
            loss.breakdown.match_loss
        })
    }

    /// Analytic gradient flattened in [`MlpParams::to_flat`] order.
    pub fn analytic(&self, target: GradTarget) -> Result<Vec<f64>> {
        let cache = self.params.forward(&self.inputs)?;
        let (matching, lambda) = target.matching();
        let mut loss = combined_local_loss(&cache, &self.labels, Some(&self.anchors), lambda, matching)?;
        if !target.includes_task() {
            loss.d_logits = Matrix::zeros(loss.d_logits.rows(), loss.d_logits.cols());
        }
        Ok(self.params.backward(&cache, &loss.d_logits, &loss.d_features)?.to_flat())
    }

    /// Central differences with step `eps` on every parameter.
    pub fn numeric(&self, target: GradTarget, eps: f64) -> Result<Vec<f64>> {
        let base = self.params.to_flat();
        let mut probe = self.params.clone();
        let mut flat = base.clone();
        let mut out = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            flat[i] = base[i] + eps;
            probe.set_flat(&flat)?;
            let plus = self.value(&probe, target)?;
            flat[i] = base[i] - eps;
            probe.set_flat(&flat)?;
            let minus = self.value(&probe, target)?;
            flat[i] = base[i];
            out.push((plus - minus) / (2.0 * eps));
        }
        Ok(out)
    }
}

/// `max_i |a_i − n_i| / max(1, |a_i|, |n_i|)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / 1f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

/// Options for [`run_checks`].
#[derive(Clone, Debug, Default)]
pub struct CheckOptions {
    pub seed: u64,
    /// Name of a check whose analytic side is deliberately corrupted.
    pub inject_fault: Option<String>,
}

fn grad_check(name: &'static str, target: GradTarget, opts: &CheckOptions) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    let instances = 20;
    for i in 0..instances {
        let inst = GradInstance::random(&[5, 7, 6, 4], 6, opts.seed.wrapping_add(i))?;
        let mut analytic = inst.analytic(target)?;
        if opts.inject_fault.as_deref() == Some(name) {
            analytic.iter_mut().for_each(|g| *g *= 1.5);
        }
        worst = worst.max(max_relative_error(&analytic, &inst.numeric(target, 1e-5)?));
    }
    Ok(CheckOutcome {
        name,
        passed: worst < GRAD_TOLERANCE,
        detail: format!("{instances} instances, max relative error {worst:.3e}"),
    })
}

/// Random clients over `classes` categories where each client holds a random
/// subset of categories and some categories may be absent everywhere.
pub fn random_clients(seed: u64, input_dim: usize) -> Result<(Vec<LabeledDataset<f64>>, usize)> {
    let mut rng = rng_for(seed, &[0xa9c1]);
    let classes = rng.random_range(2..=6);
    let k = rng.random_range(1..=5);
    let globally_absent = rng.random_range(0..classes);
    let mut clients = Vec::with_capacity(k);
    for _ in 0..k {
        let n = rng.random_range(1..=12);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let mut c = rng.random_range(0..classes);
            if c == globally_absent && classes > 2 && rng.random_bool(0.8) {
                c = (c + 1) % classes;
            }
            labels.push(c);
        }
        let data = (0..n * input_dim).map(|_| rng.sample(StandardNormal)).collect();
        clients.push(LabeledDataset::new(Matrix::from_vec(n, input_dim, data)?, labels, classes)?);
    }
    Ok((clients, classes))
}

fn anchor_equivalence(opts: &CheckOptions) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    let configs = 50;
    for i in 0..configs {
        let seed = opts.seed.wrapping_add(i);
        let (clients, classes) = random_clients(seed, 4)?;
        let params = MlpParams::init(&[4, 6, classes], seed)?;
        let reports = clients
            .iter()
            .enumerate()
            .map(|(k, ds)| local_anchors(&params, ds, k))
            .collect::<Result<Vec<_>>>()?;
        let federated = aggregate_weighted(&reports, None, 0)?;
        let direct = direct_global_anchors(&params, &clients)?;
        if federated.presence() != direct.presence() {
            return Ok(CheckOutcome {
                name: ANCHOR_EQUIVALENCE,
                passed: false,
                detail: format!("configuration {i}: presence flags differ"),
            });
        }
        worst = worst.max(federated.matrix().max_abs_diff(direct.matrix()));
    }
    if opts.inject_fault.as_deref() == Some(ANCHOR_EQUIVALENCE) {
        worst += 1.0;
    }
    Ok(CheckOutcome {
        name: ANCHOR_EQUIVALENCE,
        passed: worst <= ANCHOR_TOLERANCE,
        detail: format!("{configs} configurations, max deviation {worst:.3e}"),
    })
}

fn small_run_config(algorithm: Algorithm, seed: u64) -> FedConfig {
    FedConfig {
        algorithm,
        clients: 4,
        rounds: 6,
        local_epochs: 1,
        batch_size: 16,
        lambda: 5.0,
        fm_start_round: 0,
        hidden: vec![12, 8],
        seed,
        ..FedConfig::default()
    }
}

fn small_task(seed: u64) -> Result<(crate::data::ClientSplit<f64>, LabeledDataset<f64>)> {
    let ds = gen_gaussian_mixture::<f64>(4, 6, 40, 4.0, seed)?;
    let test = gen_gaussian_mixture::<f64>(4, 6, 10, 4.0, seed.wrapping_add(1))?;
    Ok((partition_dirichlet(&ds, 4, 0.5, seed)?, test))
}

fn lemma2_monotonicity(opts: &CheckOptions) -> Result<CheckOutcome> {
    let (split, test) = small_task(opts.seed)?;
    let cfg = small_run_config(Algorithm::FedFmL2, opts.seed);
    let outcome = match run_experiment(&cfg, &split, &test) {
        Ok(o) => o,
        Err(FedError::Invariant(msg)) => {
            return Ok(CheckOutcome {
                name: LEMMA2_MONOTONICITY,
                passed: false,
                detail: msg,
            })
        }
        Err(e) => return Err(e),
    };
    let mut worst = f64::NEG_INFINITY;
    for r in &outcome.records {
        if let (Some(before), Some(after)) = (r.lemma2_before, r.lemma2_after) {
            worst = worst.max(after - before);
        }
    }
    if opts.inject_fault.as_deref() == Some(LEMMA2_MONOTONICITY) {
        worst = 1.0;
    }
    Ok(CheckOutcome {
        name: LEMMA2_MONOTONICITY,
        passed: worst <= crate::protocol::LEMMA2_SLACK,
        detail: format!("{} rounds, max increase {worst:.3e}", outcome.records.len()),
    })
}

fn ledger_conservation(opts: &CheckOptions) -> Result<CheckOutcome> {
    let (split, test) = small_task(opts.seed)?;
    let fm_cfg = small_run_config(Algorithm::FedFmL2, opts.seed);
    let avg_cfg = small_run_config(Algorithm::FedAvg, opts.seed);
    let fm = run_experiment(&fm_cfg, &split, &test)?;
    let avg = run_experiment(&avg_cfg, &split, &test)?;
    fm.ledger.check_conservation()?;
    avg.ledger.check_conservation()?;
    let (c, d) = (fm.final_params.num_classes(), fm.final_params.feature_dim());
    let expected = 2 * fm_cfg.clients * c * d * fm_cfg.rounds;
    let mut diff = fm.ledger.totals().total_floats() as i64 - avg.ledger.totals().total_floats() as i64;
    if opts.inject_fault.as_deref() == Some(LEDGER_CONSERVATION) {
        diff += 1;
    }
    Ok(CheckOutcome {
        name: LEDGER_CONSERVATION,
        passed: diff == expected as i64,
        detail: format!("fedfm - fedavg floats = {diff}, expected 2·K·C·d·T = {expected}"),
    })
}

/// Runs one named check.
pub fn run_check(name: &str, opts: &CheckOptions) -> Result<CheckOutcome> {
    match name {
        GRAD_CHECK_CE => grad_check(GRAD_CHECK_CE, GradTarget::CrossEntropy, opts),
        GRAD_CHECK_L2 => grad_check(GRAD_CHECK_L2, GradTarget::L2Match, opts),
        GRAD_CHECK_CG => grad_check(GRAD_CHECK_CG, GradTarget::CgMatch { alpha: 0.5 }, opts),
        GRAD_CHECK_COMBINED => grad_check(
            GRAD_CHECK_COMBINED,
            GradTarget::Combined {
                lambda: 3.0,
                matching: Matching::Contrastive { alpha: 0.7 },
            },
            opts,
        ),
        ANCHOR_EQUIVALENCE => anchor_equivalence(opts),
        LEMMA2_MONOTONICITY => lemma2_monotonicity(opts),
        LEDGER_CONSERVATION => ledger_conservation(opts),
        other => Err(FedError::Config(format!("unknown check `{other}`"))),
    }
}

/// Runs every check in [`ALL_CHECKS`].
pub fn run_checks(opts: &CheckOptions) -> Result<Vec<CheckOutcome>> {
    ALL_CHECKS.iter().map(|name| run_check(name, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass_by_default() {
        for outcome in run_checks(&CheckOptions::default()).unwrap() {
            assert!(outcome.passed, "{}: {}", outcome.name, outcome.detail);
        }
    }

    #[test]
    fn injected_fault_fails_the_named_check_only() {
        let opts = CheckOptions {
            seed: 0,
            inject_fault: Some(GRAD_CHECK_CG.to_string()),
        };
        let outcomes = run_checks(&opts).unwrap();
        let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
        assert_eq!(failed, vec![GRAD_CHECK_CG]);
    }

    #[test]
    fn unknown_check_is_a_config_error() {
        assert!(run_check("grad_check.nope", &CheckOptions::default()).is_err());
    }
}
