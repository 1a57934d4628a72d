//! Round orchestration for FedAvg, FedProx, FedFM and FedFM-Lite, with
//! communication accounting.
//!
//! Every client participates in every round. Clients train in parallel; all
//! reductions run in client-id order, so results do not depend on scheduling.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::{aggregate, local_anchors, AnchorAggregation, LocalAnchorReport};
use crate::data::{client_holdout, ClientSplit, LabeledDataset};
use crate::error::{FedError, Result};
use crate::losses::{combined_local_loss, AnchorSet, LossBreakdown, Matching};
use crate::metrics::{accuracy, lemma2_monitor};
use crate::nn::{sgd_step_in_place, weighted_param_sum, MlpParams, ParamGrads, SgdConfig};
use crate::rng::{derive_seed, rng_for};
use crate::scalar::Scalar;

/// Slack allowed by the anchor-update monitor.
pub const LEMMA2_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx,
    #[serde(rename = "fedfm_l2")]
    FedFmL2,
    #[serde(rename = "fedfm_cg")]
    FedFmCg,
    #[serde(rename = "fedfm_lite")]
    FedFmLite,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::FedAvg,
        Algorithm::FedProx,
        Algorithm::FedFmL2,
        Algorithm::FedFmCg,
        Algorithm::FedFmLite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProx => "fedprox",
            Algorithm::FedFmL2 => "fedfm_l2",
            Algorithm::FedFmCg => "fedfm_cg",
            Algorithm::FedFmLite => "fedfm_lite",
        }
    }

    pub fn uses_anchors(self) -> bool {
        matches!(self, Algorithm::FedFmL2 | Algorithm::FedFmCg | Algorithm::FedFmLite)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| FedError::Config(format!("unknown algorithm `{s}`")))
    }
}

mod defaults {
    pub fn clients() -> usize {
        10
    }
    pub fn rounds() -> usize {
        40
    }
    pub fn local_epochs() -> usize {
        2
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn lr() -> f64 {
        0.01
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn weight_decay() -> f64 {
        1e-5
    }
    pub fn mu_prox() -> f64 {
        0.01
    }
    pub fn hidden() -> Vec<usize> {
        vec![64, 32]
    }
    pub fn validation_frac() -> f64 {
        0.2
    }
}

/// Experiment configuration. `lambda`, `alpha`, `fm_start_round` and
/// `lite_model_period` have no serde default and must be given explicitly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    pub algorithm: Algorithm,
    /// Number of clients `K`.
    #[serde(default = "defaults::clients")]
    pub clients: usize,
    /// Communication rounds `T`.
    #[serde(default = "defaults::rounds")]
    pub rounds: usize,
    #[serde(default = "defaults::local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    /// Weight of the matching term.
    pub lambda: f64,
    /// Temperature of the contrastive-guiding loss.
    pub alpha: f64,
    /// First round (0-based) that applies feature matching, `T_s`.
    pub fm_start_round: usize,
    #[serde(default = "defaults::mu_prox")]
    pub mu_prox: f64,
    /// FedFM-Lite uploads models every `a` rounds.
    pub lite_model_period: usize,
    #[serde(default)]
    pub anchor_aggregation: AnchorAggregation,
    /// Hidden layer widths; the last one is the feature dimension `d`.
    #[serde(default = "defaults::hidden")]
    pub hidden: Vec<usize>,
    /// Per-client validation fraction used for best-model selection; 0 disables it.
    #[serde(default = "defaults::validation_frac")]
    pub validation_frac: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for FedConfig {
    /// Desk-scale preset: 40 rounds, 2 local epochs, batch 32, `λ = 50`,
    /// `T_s = 8`, `α = 1`, `a = 1`.
    fn default() -> Self {
        Self {
            algorithm: Algorithm::FedFmCg,
            clients: defaults::clients(),
            rounds: defaults::rounds(),
            local_epochs: defaults::local_epochs(),
            batch_size: defaults::batch_size(),
            lr: defaults::lr(),
            momentum: defaults::momentum(),
            weight_decay: defaults::weight_decay(),
            lambda: 50.0,
            alpha: 1.0,
            fm_start_round: 8,
            mu_prox: defaults::mu_prox(),
            lite_model_period: 1,
            anchor_aggregation: AnchorAggregation::Weighted,
            hidden: defaults::hidden(),
            validation_frac: defaults::validation_frac(),
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Matching term applied from `T_s` on.
    pub fn matching(&self) -> Matching {
        match self.algorithm {
            Algorithm::FedAvg | Algorithm::FedProx => Matching::None,
            Algorithm::FedFmL2 => Matching::L2,
            Algorithm::FedFmCg | Algorithm::FedFmLite => Matching::Contrastive { alpha: self.alpha },
        }
    }

    /// Layer widths for an input of `input_dim` features and `num_classes` outputs.
    pub fn layer_dims(&self, input_dim: usize, num_classes: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(&self.hidden);
        dims.push(num_classes);
        dims
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clients", self.clients),
            ("local_epochs", self.local_epochs),
            ("batch_size", self.batch_size),
            ("lite_model_period", self.lite_model_period),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(FedError::Config(format!("{key} must be >= 1")));
            }
        }
        self.sgd().validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(FedError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(FedError::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.mu_prox >= 0.0 && self.mu_prox.is_finite()) {
            return Err(FedError::Config(format!("mu_prox must be >= 0, got {}", self.mu_prox)));
        }
        if self.rounds > 0 && self.fm_start_round >= self.rounds {
            return Err(FedError::Config(format!(
                "fm_start_round ({}) must be < rounds ({})",
                self.fm_start_round, self.rounds
            )));
        }
        if !(0.0..1.0).contains(&self.validation_frac) {
            return Err(FedError::Config(format!(
                "validation_frac must lie in [0, 1), got {}",
                self.validation_frac
            )));
        }
        if self.hidden.contains(&0) {
            return Err(FedError::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Traffic of one round, summed over clients, in scalar units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: usize,
    pub handshakes: usize,
    pub model_up: usize,
    pub model_down: usize,
    pub anchor_up: usize,
    pub anchor_down: usize,
    /// Per-category sample counts uploaded for weighted anchor aggregation.
    pub counts_up: usize,
    pub model_round: bool,
}

impl LedgerEntry {
    pub fn up_floats(&self) -> usize {
        self.model_up + self.anchor_up
    }

    pub fn down_floats(&self) -> usize {
        self.model_down + self.anchor_down
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerTotals {
    pub handshakes: usize,
    pub up_floats: usize,
    pub down_floats: usize,
    pub model_floats: usize,
    pub anchor_floats: usize,
    pub counts_up: usize,
    pub model_rounds: usize,
}

impl LedgerTotals {
    pub fn total_floats(&self) -> usize {
        self.up_floats + self.down_floats
    }

    fn add(&mut self, e: &LedgerEntry) {
        self.handshakes += e.handshakes;
        self.up_floats += e.up_floats();
        self.down_floats += e.down_floats();
        self.model_floats += e.model_up + e.model_down;
        self.anchor_floats += e.anchor_up + e.anchor_down;
        self.counts_up += e.counts_up;
        self.model_rounds += usize::from(e.model_round);
    }
}

/// Per-round communication counts with running totals.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    entries: Vec<LedgerEntry>,
    totals: LedgerTotals,
}

impl CommLedger {
    pub fn push(&mut self, entry: LedgerEntry) {
        self.totals.add(&entry);
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn totals(&self) -> LedgerTotals {
        self.totals
    }

    /// Recomputes the totals from the entries and compares.
    pub fn check_conservation(&self) -> Result<()> {
        let mut sum = LedgerTotals::default();
        self.entries.iter().for_each(|e| sum.add(e));
        if sum != self.totals {
            return Err(FedError::Invariant(format!(
                "ledger totals {:?} differ from the per-round sum {sum:?}",
                self.totals
            )));
        }
        Ok(())
    }
}

/// Per-round diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// `p_k`-weighted mean over clients of their mean batch losses.
    pub task_loss: f64,
    pub match_loss: f64,
    pub total_loss: f64,
    /// Matching weight in effect this round (0 while matching is off).
    pub lambda: f64,
    /// Mean of the per-client validation accuracies of the new global model.
    pub val_acc: Option<f64>,
    pub test_acc: f64,
    /// `Φ(w⁺; A_used)` and `Φ(w⁺; A_recomputed)` under the ℓ2 term.
    pub lemma2_before: Option<f64>,
    pub lemma2_after: Option<f64>,
    /// Mean distance between this round's anchors and the previous ones.
    pub anchor_displacement: Option<f64>,
    /// Round tag of the anchors used in local training.
    pub anchor_tag: Option<usize>,
    /// `‖w^{(t+1)} − w^{(t)}‖`.
    pub update_norm: f64,
    /// `update_norm / (η · τ̄)` with `τ̄` the `p_k`-weighted local step count.
    pub grad_norm_estimate: f64,
    pub model_round: bool,
    /// Test accuracy of the best model so far (by validation accuracy).
    pub best_test_acc: f64,
}

impl RoundRecord {
    /// True when both records describe the same model trajectory bit for bit:
    /// losses, accuracies and update norms. Anchor diagnostics are ignored.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        let bits = |v: f64| v.to_bits();
        self.round == other.round
            && bits(self.task_loss) == bits(other.task_loss)
            && bits(self.total_loss) == bits(other.total_loss)
            && self.val_acc.map(bits) == other.val_acc.map(bits)
            && bits(self.test_acc) == bits(other.test_acc)
            && bits(self.update_norm) == bits(other.update_norm)
            && bits(self.grad_norm_estimate) == bits(other.grad_norm_estimate)
            && bits(self.best_test_acc) == bits(other.best_test_acc)
            && self.model_round == other.model_round
    }
}

/// What a client optimizes during one round.
#[derive(Clone, Copy, Debug)]
pub struct LocalObjective<'a, T> {
    pub anchors: Option<&'a AnchorSet<T>>,
    pub matching: Matching,
    pub lambda: f64,
    /// FedProx term `μ/2 ‖w − w_ref‖²`.
    pub prox: Option<(f64, &'a MlpParams<T>)>,
}

impl<T> LocalObjective<'_, T> {
    pub fn task_only() -> Self {
        Self {
            anchors: None,
            matching: Matching::None,
            lambda: 0.0,
            prox: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LocalOutcome<T> {
    pub params: MlpParams<T>,
    /// Mean over mini-batches.
    pub loss: LossBreakdown<T>,
    pub steps: usize,
}

/// Local SGD on one client: `cfg.local_epochs` passes in mini-batches of
/// `cfg.batch_size`, reshuffled each epoch from a seed derived from
/// `(cfg.seed, client, round, epoch)`. Momentum starts from zero.
pub fn local_train<T: Scalar>(
    ds: &LabeledDataset<T>,
    init: &MlpParams<T>,
    objective: &LocalObjective<'_, T>,
    cfg: &FedConfig,
    client: usize,
    round: usize,
) -> Result<LocalOutcome<T>> {
    if objective.matching.is_active() && objective.anchors.is_none() {
        return Err(FedError::Protocol(format!(
            "client {client}, round {round}: matching requires global anchors"
        )));
    }
    let sgd = cfg.sgd();
    let mut params = init.clone();
    let mut momentum = ParamGrads::zeros_like(&params);
    let mut sum = LossBreakdown::<T>::zero();
    let mut steps = 0usize;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    for epoch in 0..cfg.local_epochs {
        let mut rng = rng_for(cfg.seed, &[0xba7c, client as u64, round as u64, epoch as u64]);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = ds.subset(chunk);
            let cache = params.forward(batch.inputs())?;
            let loss = combined_local_loss(
                &cache,
                batch.labels(),
                objective.anchors,
                objective.lambda,
                objective.matching,
            )?;
            let mut grads = params.backward(&cache, &loss.d_logits, &loss.d_features)?;
            if let Some((mu, reference)) = objective.prox.filter(|(mu, _)| *mu > 0.0) {
                let mu = T::of(mu);
                for ((g, p), r) in grads.tensors_mut().zip(params.tensors()).zip(reference.tensors()) {
                    for ((g, &p), &r) in g.iter_mut().zip(p).zip(r) {
                        *g += mu * (p - r);
                    }
                }
            }
            sgd_step_in_place(&mut params, &grads, &mut momentum, &sgd)?;
            sum.task_loss += loss.breakdown.task_loss;
            sum.match_loss += loss.breakdown.match_loss;
            sum.total += loss.breakdown.total;
            steps += 1;
        }
    }
    let loss = if steps == 0 {
        LossBreakdown::zero()
    } else {
        let inv = T::one() / T::of_usize(steps);
        LossBreakdown {
            task_loss: sum.task_loss * inv,
            match_loss: sum.match_loss * inv,
            total: sum.total * inv,
            lambda: T::of(objective.lambda),
        }
    };
    Ok(LocalOutcome { params, loss, steps })
}

/// Round-by-round simulation state over fixed client data.
pub struct Federation<'a, T> {
    cfg: FedConfig,
    clients: &'a [LabeledDataset<T>],
    validation: &'a [LabeledDataset<T>],
    test: &'a LabeledDataset<T>,
    weights: Vec<T>,
    mean_steps: f64,
    round: usize,
    global: MlpParams<T>,
    anchors: Option<AnchorSet<T>>,
    /// FedFM: anchors recomputed by the monitor from the current global model.
    next_anchors: Option<AnchorSet<T>>,
    /// FedFM-Lite: each client's model between model-bearing rounds.
    local_models: Vec<MlpParams<T>>,
    ledger: CommLedger,
}

impl<'a, T: Scalar> Federation<'a, T> {
    /// `validation` holds one set per client, or is empty to disable validation.
    pub fn new(
        cfg: FedConfig,
        clients: &'a [LabeledDataset<T>],
        validation: &'a [LabeledDataset<T>],
        test: &'a LabeledDataset<T>,
        init: MlpParams<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        if clients.len() != cfg.clients {
            return Err(FedError::Config(format!(
                "config has {} clients but the data split has {}",
                cfg.clients,
                clients.len()
            )));
        }
        if !validation.is_empty() && validation.len() != clients.len() {
            return Err(FedError::dim("validation sets", clients.len(), validation.len()));
        }
        let total: usize = clients.iter().map(LabeledDataset::len).sum();
        if total == 0 {
            return Err(FedError::Contract("all clients are empty".into()));
        }
        for (k, ds) in clients.iter().chain(validation).chain([test]).enumerate() {
            if ds.input_dim() != init.input_dim() && !ds.is_empty() {
                return Err(FedError::dim(format!("dataset {k} input width"), init.input_dim(), ds.input_dim()));
            }
            if ds.num_classes() != init.num_classes() {
                return Err(FedError::dim(format!("dataset {k} categories"), init.num_classes(), ds.num_classes()));
            }
        }
        let weights: Vec<T> = clients
            .iter()
            .map(|c| T::of_usize(c.len()) / T::of_usize(total))
            .collect();
        let mean_steps = clients
            .iter()
            .map(|c| {
                let p = c.len() as f64 / total as f64;
                p * (cfg.local_epochs * c.len().div_ceil(cfg.batch_size)) as f64
            })
            .sum();
        let local_models = if cfg.algorithm == Algorithm::FedFmLite {
            vec![init.clone(); clients.len()]
        } else {
            Vec::new()
        };
        Ok(Self {
            cfg,
            clients,
            validation,
            test,
            weights,
            mean_steps,
            round: 0,
            global: init,
            anchors: None,
            next_anchors: None,
            local_models,
            ledger: CommLedger::default(),
        })
    }

    pub fn config(&self) -> &FedConfig {
        &self.cfg
    }

    /// Index of the next round to run.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn global(&self) -> &MlpParams<T> {
        &self.global
    }

    pub fn anchors(&self) -> Option<&AnchorSet<T>> {
        self.anchors.as_ref()
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    /// Aggregation weights `p_k = |B_k| / Σ|B_k|`.
    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn into_parts(self) -> (MlpParams<T>, CommLedger) {
        (self.global, self.ledger)
    }

    /// Runs the next round of the configured algorithm.
    pub fn step(&mut self) -> Result<RoundRecord> {
        match self.cfg.algorithm {
            Algorithm::FedAvg | Algorithm::FedProx => self.run_round_fedavg(),
            Algorithm::FedFmL2 | Algorithm::FedFmCg => {
                if self.round < self.cfg.fm_start_round {
                    self.run_round_fedavg()
                } else {
                    self.run_round_fedfm()
                }
            }
            Algorithm::FedFmLite => self.run_round_fedfm_lite(),
        }
    }

    fn param_count(&self) -> usize {
        self.global.param_count()
    }

    fn anchor_floats(&self) -> usize {
        self.global.num_classes() * self.global.feature_dim()
    }

    fn counts_per_client(&self) -> usize {
        match self.cfg.anchor_aggregation {
            AnchorAggregation::Weighted => self.global.num_classes(),
            AnchorAggregation::Uniform => 0,
        }
    }

    fn train_clients(
        &self,
        starts: &[&MlpParams<T>],
        objective: &LocalObjective<'_, T>,
    ) -> Result<Vec<LocalOutcome<T>>> {
        let round = self.round;
        self.clients
            .par_iter()
            .enumerate()
            .map(|(k, ds)| local_train(ds, starts[k], objective, &self.cfg, k, round))
            .collect()
    }

    fn anchor_reports(&self, models: &[&MlpParams<T>]) -> Result<Vec<LocalAnchorReport<T>>> {
        self.clients
            .par_iter()
            .enumerate()
            .filter(|(_, ds)| !ds.is_empty())
            .map(|(k, ds)| local_anchors(models[k], ds, k))
            .collect()
    }

    fn aggregate_models(&self, outcomes: &[LocalOutcome<T>]) -> Result<MlpParams<T>> {
        let models: Vec<&MlpParams<T>> = outcomes.iter().map(|o| &o.params).collect();
        weighted_param_sum(&models, &self.weights)
    }

    fn mean_loss(&self, outcomes: &[LocalOutcome<T>]) -> LossBreakdown<f64> {
        let mut out = LossBreakdown::<f64>::zero();
        for (o, &p) in outcomes.iter().zip(&self.weights) {
            let p = p.as_f64();
            out.task_loss += p * o.loss.task_loss.as_f64();
            out.match_loss += p * o.loss.match_loss.as_f64();
            out.total += p * o.loss.total.as_f64();
        }
        out
    }

    fn evaluate(&self) -> Result<(Option<f64>, f64)> {
        let test_acc = accuracy(&self.global, self.test)?.as_f64();
        let val: Vec<f64> = self
            .validation
            .par_iter()
            .filter(|v| !v.is_empty())
            .map(|v| accuracy(&self.global, v).map(Scalar::as_f64))
            .collect::<Result<_>>()?;
        let val_acc = (!val.is_empty()).then(|| val.iter().sum::<f64>() / val.len() as f64);
        Ok((val_acc, test_acc))
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_round(
        &mut self,
        previous: &MlpParams<T>,
        loss: LossBreakdown<f64>,
        lambda: f64,
        lemma2: Option<(f64, f64)>,
        anchor_displacement: Option<f64>,
        anchor_tag: Option<usize>,
        entry: LedgerEntry,
    ) -> Result<RoundRecord> {
        let (val_acc, test_acc) = self.evaluate()?;
        let update_norm = self.global.distance(previous).as_f64();
        let record = RoundRecord {
            round: self.round,
            task_loss: loss.task_loss,
            match_loss: loss.match_loss,
            total_loss: loss.total,
            lambda,
            val_acc,
            test_acc,
            lemma2_before: lemma2.map(|l| l.0),
            lemma2_after: lemma2.map(|l| l.1),
            anchor_displacement,
            anchor_tag,
            update_norm,
            grad_norm_estimate: update_norm / (self.cfg.lr * self.mean_steps.max(1.0)),
            model_round: entry.model_round,
            best_test_acc: test_acc,
        };
        self.ledger.push(entry);
        self.round += 1;
        Ok(record)
    }

    /// Broadcast, local training without matching (plus the proximal term
    /// for FedProx), and `p_k`-weighted model averaging. One handshake.
    pub fn run_round_fedavg(&mut self) -> Result<RoundRecord> {
        let previous = self.global.clone();
        let prox = (self.cfg.algorithm == Algorithm::FedProx).then_some((self.cfg.mu_prox, &previous));
        let objective = LocalObjective {
            prox,
            ..LocalObjective::task_only()
        };
        let starts = vec![&previous; self.clients.len()];
        let outcomes = self.train_clients(&starts, &objective)?;
        self.global = self.aggregate_models(&outcomes)?;
        let loss = self.mean_loss(&outcomes);
        let models = self.clients.len() * self.param_count();
        let entry = LedgerEntry {
            round: self.round,
            handshakes: 1,
            model_up: models,
            model_down: models,
            model_round: true,
            ..Default::default()
        };
        self.finish_round(&previous, loss, 0.0, None, None, None, entry)
    }

    /// Local anchors from `w^{(t)}`, global anchor aggregation, local
    /// training with matching, model aggregation. Two handshakes.
    pub fn run_round_fedfm(&mut self) -> Result<RoundRecord> {
        let t = self.round;
        let previous = self.global.clone();
        let mode = self.cfg.anchor_aggregation;
        let anchors = match self.next_anchors.take() {
            Some(a) if a.round_tag() == t => a,
            _ => {
                let reports = self.anchor_reports(&vec![&previous; self.clients.len()])?;
                aggregate(&reports, self.anchors.as_ref(), mode, t)?
            }
        };
        let displacement = self
            .anchors
            .as_ref()
            .and_then(|old| anchors.mean_displacement(old))
            .map(Scalar::as_f64);

        let matching = self.cfg.matching();
        let objective = LocalObjective {
            anchors: Some(&anchors),
            matching,
            lambda: self.cfg.lambda,
            prox: None,
        };
        let outcomes = self.train_clients(&vec![&previous; self.clients.len()], &objective)?;
        self.global = self.aggregate_models(&outcomes)?;
        let loss = self.mean_loss(&outcomes);

        // anchors the next round will aggregate, recomputed from w^{(t+1)}
        let reports = self.anchor_reports(&vec![&self.global; self.clients.len()])?;
        let next = aggregate(&reports, Some(&anchors), mode, t + 1)?;
        let (phi_old, phi_new) = lemma2_monitor(&self.global, &anchors, &next, self.clients, self.cfg.lambda)?;
        let (phi_old, phi_new) = (phi_old.as_f64(), phi_new.as_f64());
        if self.cfg.algorithm == Algorithm::FedFmL2
            && mode == AnchorAggregation::Weighted
            && phi_new > phi_old + LEMMA2_SLACK
        {
            return Err(FedError::Invariant(format!(
                "round {t}: anchor update increased the objective from {phi_old} to {phi_new}"
            )));
        }

        let k = self.clients.len();
        let models = k * self.param_count();
        let anchor_traffic = k * self.anchor_floats();
        let entry = LedgerEntry {
            round: t,
            handshakes: 2,
            model_up: models,
            model_down: models,
            anchor_up: anchor_traffic,
            anchor_down: anchor_traffic,
            counts_up: k * self.counts_per_client(),
            model_round: true,
        };
        self.anchors = Some(anchors);
        self.next_anchors = Some(next);
        self.finish_round(
            &previous,
            loss,
            self.cfg.lambda,
            Some((phi_old, phi_new)),
            displacement,
            Some(t),
            entry,
        )
    }

    /// Local training with the anchors received last round, local anchors
    /// from the trained local models, and one handshake that carries anchors
    /// every round and models on rounds `t` with `(t + 1) % a == 0`. Between
    /// model-bearing rounds clients continue from their own models.
    pub fn run_round_fedfm_lite(&mut self) -> Result<RoundRecord> {
        let t = self.round;
        let previous = self.global.clone();
        let model_round = (t + 1) % self.cfg.lite_model_period == 0;
        let active = t >= self.cfg.fm_start_round && self.anchors.is_some();
        let objective = if active {
            LocalObjective {
                anchors: self.anchors.as_ref(),
                matching: self.cfg.matching(),
                lambda: self.cfg.lambda,
                prox: None,
            }
        } else {
            LocalObjective::task_only()
        };
        let starts: Vec<&MlpParams<T>> = self.local_models.iter().collect();
        let outcomes = self.train_clients(&starts, &objective)?;
        let loss = self.mean_loss(&outcomes);
        let anchor_tag = if active { self.anchors.as_ref().map(AnchorSet::round_tag) } else { None };

        // the first anchors anyone trains on are produced in round T_s - 1
        let exchange = t + 1 >= self.cfg.fm_start_round;
        let mut displacement = None;
        if exchange {
            let trained: Vec<&MlpParams<T>> = outcomes.iter().map(|o| &o.params).collect();
            let reports = self.anchor_reports(&trained)?;
            let anchors = aggregate(&reports, self.anchors.as_ref(), self.cfg.anchor_aggregation, t)?;
            displacement = self
                .anchors
                .as_ref()
                .and_then(|old| anchors.mean_displacement(old))
                .map(Scalar::as_f64);
            self.anchors = Some(anchors);
        }

        if model_round {
            self.global = self.aggregate_models(&outcomes)?;
            self.local_models = vec![self.global.clone(); self.clients.len()];
        } else {
            self.local_models = outcomes.into_iter().map(|o| o.params).collect();
        }

        let k = self.clients.len();
        let models = if model_round { k * self.param_count() } else { 0 };
        let anchor_traffic = if exchange { k * self.anchor_floats() } else { 0 };
        let entry = LedgerEntry {
            round: t,
            handshakes: 1,
            model_up: models,
            model_down: models,
            anchor_up: anchor_traffic,
            anchor_down: anchor_traffic,
            counts_up: if exchange { k * self.counts_per_client() } else { 0 },
            model_round,
        };
        let lambda = if active { self.cfg.lambda } else { 0.0 };
        self.finish_round(&previous, loss, lambda, None, displacement, anchor_tag, entry)
    }
}

/// Result of a full run.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome<T> {
    pub records: Vec<RoundRecord>,
    pub ledger: CommLedger,
    pub final_params: MlpParams<T>,
    /// Global model with the highest mean validation accuracy (earliest on ties).
    pub best_params: MlpParams<T>,
    pub best_round: Option<usize>,
    pub best_test_acc: f64,
}

/// Holds out per-client validation data, initializes the model from
/// `cfg.seed` and runs `cfg.rounds` rounds.
pub fn run_experiment<T: Scalar>(
    cfg: &FedConfig,
    split: &ClientSplit<T>,
    test: &LabeledDataset<T>,
) -> Result<ExperimentOutcome<T>> {
    cfg.validate()?;
    let (train, validation) = if cfg.validation_frac > 0.0 {
        client_holdout(split, cfg.validation_frac, derive_seed(cfg.seed, &[0x7e57]))?
    } else {
        (split.clone(), Vec::new())
    };
    let first = train
        .clients()
        .first()
        .ok_or_else(|| FedError::Config("data split has no clients".into()))?;
    let dims = cfg.layer_dims(first.input_dim(), first.num_classes());
    let init = MlpParams::init(&dims, cfg.seed)?;
    run_with_init(cfg, train.clients(), &validation, test, init)
}

/// [`run_experiment`] on prepared client data and a given initial model.
pub fn run_with_init<T: Scalar>(
    cfg: &FedConfig,
    clients: &[LabeledDataset<T>],
    validation: &[LabeledDataset<T>],
    test: &LabeledDataset<T>,
    init: MlpParams<T>,
) -> Result<ExperimentOutcome<T>> {
    let mut fed = Federation::new(cfg.clone(), clients, validation, test, init)?;
    let mut best_params = fed.global().clone();
    let mut best_round = None;
    let mut best_val = f64::NEG_INFINITY;
    let mut best_test_acc = accuracy(fed.global(), test)?.as_f64();
    let mut records = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let mut record = fed.step()?;
        let improved = match record.val_acc {
            Some(v) => v > best_val,
            None => true,
        };
        if improved {
            best_val = record.val_acc.unwrap_or(best_val);
            best_params = fed.global().clone();
            best_round = Some(record.round);
            best_test_acc = record.test_acc;
        }
        record.best_test_acc = best_test_acc;
        records.push(record);
    }
    let (final_params, ledger) = fed.into_parts();
    ledger.check_conservation()?;
    Ok(ExperimentOutcome {
        records,
        ledger,
        final_params,
        best_params,
        best_round,
        best_test_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_mixture, partition_dirichlet};

    fn small_task(k: usize) -> (ClientSplit<f64>, LabeledDataset<f64>) {
        let ds = gen_gaussian_mixture::<f64>(4, 6, 40, 4.0, 3).unwrap();
        let test = gen_gaussian_mixture::<f64>(4, 6, 10, 4.0, 3).unwrap();
        (partition_dirichlet(&ds, k, 0.5, 5).unwrap(), test)
    }

    fn cfg(algorithm: Algorithm) -> FedConfig {
        FedConfig {
            algorithm,
            clients: 3,
            rounds: 4,
            local_epochs: 1,
            batch_size: 16,
            fm_start_round: 1,
            hidden: vec![8],
            ..FedConfig::default()
        }
    }

    #[test]
    fn algorithm_names_roundtrip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert!("fedsgd".parse::<Algorithm>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(FedConfig::default().validate().is_ok());
        let bad = |f: fn(&mut FedConfig)| {
            let mut c = FedConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.fm_start_round = 40));
        assert!(bad(|c| c.lite_model_period = 0));
        assert!(bad(|c| c.alpha = 0.0));
        assert!(bad(|c| c.lambda = -1.0));
        assert!(bad(|c| c.lr = 0.0));
        assert!(bad(|c| c.validation_frac = 1.0));
        let mut zero_rounds = FedConfig::default();
        zero_rounds.rounds = 0;
        assert!(zero_rounds.validate().is_ok());
    }

    #[test]
    fn matching_requires_anchors() {
        let (split, _) = small_task(3);
        let c = cfg(Algorithm::FedFmCg);
        let init = MlpParams::init(&c.layer_dims(6, 4), 0).unwrap();
        let obj = LocalObjective {
            anchors: None,
            matching: Matching::L2,
            lambda: 1.0,
            prox: None,
        };
        let err = local_train(split.client(0), &init, &obj, &c, 0, 0).unwrap_err();
        assert!(matches!(err, FedError::Protocol(_)));
    }

    #[test]
    fn zero_rounds_returns_initial_model() {
        let (split, test) = small_task(3);
        let mut c = cfg(Algorithm::FedAvg);
        c.rounds = 0;
        c.fm_start_round = 0;
        let out = run_experiment(&c, &split, &test);
        let out = out.unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.final_params, MlpParams::init(&c.layer_dims(6, 4), c.seed).unwrap());
        assert_eq!(out.ledger.totals(), LedgerTotals::default());
    }

    #[test]
    fn handshake_counts() {
        let (split, test) = small_task(3);
        for (alg, per_round) in [(Algorithm::FedAvg, 1), (Algorithm::FedFmLite, 1)] {
            let out = run_experiment(&cfg(alg), &split, &test).unwrap();
            assert_eq!(out.ledger.totals().handshakes, 4 * per_round);
        }
        let mut c = cfg(Algorithm::FedFmL2);
        c.fm_start_round = 0;
        let out = run_experiment(&c, &split, &test).unwrap();
        assert_eq!(out.ledger.totals().handshakes, 8);
    }
}
