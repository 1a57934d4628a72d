use fedfm_core::anchors::AnchorAggregation;
use fedfm_core::data::{gen_gaussian_mixture, partition_dirichlet, ClientSplit, LabeledDataset};
use fedfm_core::nn::{Matrix, MlpParams};
use fedfm_core::protocol::{run_experiment, run_with_init, Algorithm, FedConfig, Federation};

fn task(seed: u64) -> (ClientSplit<f64>, LabeledDataset<f64>) {
    let ds = gen_gaussian_mixture::<f64>(5, 8, 40, 4.0, seed).unwrap();
    let test = gen_gaussian_mixture::<f64>(5, 8, 20, 4.0, seed + 1).unwrap();
    (partition_dirichlet(&ds, 4, 0.5, seed).unwrap(), test)
}

fn cfg(algorithm: Algorithm) -> FedConfig {
    FedConfig {
        algorithm,
        clients: 4,
        rounds: 6,
        local_epochs: 2,
        batch_size: 16,
        fm_start_round: 2,
        hidden: vec![16, 8],
        seed: 3,
        ..FedConfig::default()
    }
}

fn ds(rows: &[(f64, usize)]) -> LabeledDataset<f64> {
    let x = Matrix::from_rows(&rows.iter().map(|r| vec![r.0]).collect::<Vec<_>>()).unwrap();
    LabeledDataset::new(x, rows.iter().map(|r| r.1).collect(), 2).unwrap()
}

/// Full-batch gradient of mean softmax CE for a 1 -> 2 linear model, by hand.
fn hand_grad(w: [f64; 4], data: &[(f64, usize)]) -> [f64; 4] {
    let mut g = [0.0; 4];
    for &(x, c) in data {
        let z0 = w[0] * x + w[2];
        let z1 = w[1] * x + w[3];
        let p1 = 1.0 / (1.0 + (z0 - z1).exp());
        let p0 = 1.0 - p1;
        let d0 = p0 - if c == 0 { 1.0 } else { 0.0 };
        let d1 = p1 - if c == 1 { 1.0 } else { 0.0 };
        g[0] += d0 * x;
        g[1] += d1 * x;
        g[2] += d0;
        g[3] += d1;
    }
    g.map(|v| v / data.len() as f64)
}

#[test]
fn fedavg_two_round_trajectory_matches_hand_unrolling() {
    let a = [(1.0, 0)];
    let b = [(-1.0, 1), (2.0, 0)];
    let clients = vec![ds(&a), ds(&b)];
    let test = ds(&[(1.0, 0), (-1.0, 1)]);
    let init = MlpParams::from_parts(
        vec![Matrix::from_rows(&[vec![0.3, -0.2]]).unwrap()],
        vec![vec![0.1, 0.0]],
    )
    .unwrap();
    let c = FedConfig {
        algorithm: Algorithm::FedAvg,
        clients: 2,
        rounds: 2,
        local_epochs: 1,
        batch_size: 8,
        lr: 0.1,
        momentum: 0.0,
        weight_decay: 0.0,
        fm_start_round: 0,
        hidden: vec![],
        validation_frac: 0.0,
        ..FedConfig::default()
    };
    let mut fed = Federation::new(c, &clients, &[], &test, init).unwrap();
    let (p1, p2) = (1.0 / 3.0, 2.0 / 3.0);
    let mut w = [0.3, -0.2, 0.1, 0.0];
    for _ in 0..2 {
        fed.step().unwrap();
        let ga = hand_grad(w, &a);
        let gb = hand_grad(w, &b);
        for i in 0..4 {
            w[i] = p1 * (w[i] - 0.1 * ga[i]) + p2 * (w[i] - 0.1 * gb[i]);
        }
        for (x, y) in fed.global().to_flat().iter().zip(&w) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }
}

#[test]
fn identical_clients_give_that_clients_model() {
    let one = gen_gaussian_mixture::<f64>(3, 4, 10, 3.0, 1).unwrap();
    let clients = vec![one.clone(), one.clone(), one.clone()];
    let c = FedConfig {
        algorithm: Algorithm::FedAvg,
        clients: 3,
        rounds: 1,
        hidden: vec![6],
        validation_frac: 0.0,
        fm_start_round: 0,
        ..FedConfig::default()
    };
    let init = MlpParams::init(&[4, 6, 3], 2).unwrap();
    // a full batch makes the result independent of each client's batch order
    let full = FedConfig { batch_size: 64, ..c };
    let mut fed = Federation::new(full.clone(), &clients, &[], &one, init.clone()).unwrap();
    fed.step().unwrap();
    let obj = fedfm_core::protocol::LocalObjective::task_only();
    let solo = fedfm_core::protocol::local_train(&one, &init, &obj, &full, 1, 0).unwrap();
    assert!(fed.global().distance(&solo.params) < 1e-12);
    assert!(fed.weights().iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn aggregation_weights_follow_dataset_sizes() {
    let (split, test) = task(1);
    let c = cfg(Algorithm::FedAvg);
    let init = MlpParams::init(&c.layer_dims(8, 5), 0).unwrap();
    let fed = Federation::new(c, split.clients(), &[], &test, init).unwrap();
    let total = split.total_size() as f64;
    for (w, n) in fed.weights().iter().zip(split.sizes()) {
        assert!((w - n as f64 / total).abs() < 1e-15);
    }
}

#[test]
fn runs_are_deterministic() {
    let (split, test) = task(2);
    for alg in [Algorithm::FedFmCg, Algorithm::FedFmLite, Algorithm::FedProx] {
        let a = run_experiment(&cfg(alg), &split, &test).unwrap();
        let b = run_experiment(&cfg(alg), &split, &test).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.final_params, b.final_params);
    }
}

#[test]
fn zero_lambda_fedfm_and_zero_mu_fedprox_degenerate_to_fedavg() {
    let (split, test) = task(4);
    let avg = run_experiment(&cfg(Algorithm::FedAvg), &split, &test).unwrap();
    for alg in [Algorithm::FedFmCg, Algorithm::FedFmL2] {
        let c = FedConfig { lambda: 0.0, ..cfg(alg) };
        let fm = run_experiment(&c, &split, &test).unwrap();
        assert_eq!(fm.final_params, avg.final_params);
        assert!(fm.records.iter().zip(&avg.records).all(|(a, b)| a.same_trajectory(b)));
    }
    let prox = FedConfig { mu_prox: 0.0, ..cfg(Algorithm::FedProx) };
    let prox = run_experiment(&prox, &split, &test).unwrap();
    assert_eq!(prox.records, avg.records);
    assert_eq!(prox.final_params, avg.final_params);
    // a nonzero proximal term does change the trajectory
    let prox = run_experiment(&FedConfig { mu_prox: 0.5, ..cfg(Algorithm::FedProx) }, &split, &test).unwrap();
    assert_ne!(prox.final_params, avg.final_params);
}

#[test]
fn fedfm_ledger_exceeds_fedavg_by_anchor_traffic() {
    let (split, test) = task(5);
    let c_fm = FedConfig { fm_start_round: 0, ..cfg(Algorithm::FedFmL2) };
    let fm = run_experiment(&c_fm, &split, &test).unwrap();
    let avg = run_experiment(&cfg(Algorithm::FedAvg), &split, &test).unwrap();
    let (k, c, d) = (4, 5, 8);
    assert_eq!(
        fm.ledger.totals().total_floats() - avg.ledger.totals().total_floats(),
        2 * k * c * d * 6
    );
    assert_eq!(fm.ledger.totals().handshakes, 12);
    assert_eq!(fm.ledger.totals().counts_up, k * c * 6);
    let uniform = FedConfig { anchor_aggregation: AnchorAggregation::Uniform, ..c_fm };
    assert_eq!(run_experiment(&uniform, &split, &test).unwrap().ledger.totals().counts_up, 0);
    for l in [&fm.ledger, &avg.ledger] {
        l.check_conservation().unwrap();
        let sum: usize = l.entries().iter().map(|e| e.up_floats() + e.down_floats()).sum();
        assert_eq!(sum, l.totals().total_floats());
    }
}

#[test]
fn fedfm_before_launch_round_is_fedavg() {
    let (split, test) = task(6);
    let fm = run_experiment(&cfg(Algorithm::FedFmCg), &split, &test).unwrap();
    let avg = run_experiment(&cfg(Algorithm::FedAvg), &split, &test).unwrap();
    for t in 0..2 {
        assert!(fm.records[t].same_trajectory(&avg.records[t]));
        assert_eq!(fm.ledger.entries()[t].handshakes, 1);
    }
    assert!(fm.ledger.entries()[2..].iter().all(|e| e.handshakes == 2));
    assert!(!fm.records[5].same_trajectory(&avg.records[5]));
}

#[test]
fn lite_schedule_and_anchor_timing() {
    let (split, test) = task(7);
    let period = |a: usize| {
        let c = FedConfig { lite_model_period: a, rounds: 10, ..cfg(Algorithm::FedFmLite) };
        run_experiment(&c, &split, &test).unwrap()
    };
    let one = period(1);
    let five = period(5);
    assert_eq!(five.ledger.totals().model_rounds, 2);
    assert_eq!(five.ledger.totals().model_floats * 5, one.ledger.totals().model_floats);
    assert_eq!(five.ledger.totals().anchor_floats, one.ledger.totals().anchor_floats);
    assert_eq!(one.ledger.totals().handshakes, 10);
    let model_rounds: Vec<usize> = five.ledger.entries().iter().filter(|e| e.model_round).map(|e| e.round).collect();
    assert_eq!(model_rounds, vec![4, 9]);
    // global model only moves on model-bearing rounds
    for r in &five.records {
        assert_eq!(r.update_norm == 0.0, !r.model_round);
    }

    // Lite trains on the anchors of the previous round; FedFM on anchors of the current one
    for r in &one.records {
        let expected = (r.round >= 2).then(|| r.round - 1);
        assert_eq!(r.anchor_tag, expected);
    }
    // anchors flow from round T_s - 1 on, one round ahead of their first use
    let anchor_rounds: Vec<usize> = one.ledger.entries().iter().filter(|e| e.anchor_up > 0).map(|e| e.round).collect();
    assert_eq!(anchor_rounds, (1..10).collect::<Vec<_>>());
    assert_eq!(one.ledger.totals().anchor_floats, 2 * 4 * 5 * 8 * 9);
    let fm = run_experiment(&cfg(Algorithm::FedFmCg), &split, &test).unwrap();
    for r in &fm.records {
        assert_eq!(r.anchor_tag, (r.round >= 2).then_some(r.round));
    }
}

#[test]
fn lemma2_monitor_holds_on_every_l2_round() {
    let (split, test) = task(8);
    let c = FedConfig { rounds: 10, fm_start_round: 0, ..cfg(Algorithm::FedFmL2) };
    let out = run_experiment(&c, &split, &test).unwrap();
    for r in &out.records {
        assert!(r.lemma2_after.unwrap() <= r.lemma2_before.unwrap() + 1e-9);
    }
}

#[test]
fn best_model_tracks_validation_accuracy() {
    let (split, test) = task(9);
    let out = run_experiment(&cfg(Algorithm::FedAvg), &split, &test).unwrap();
    let best = out.best_round.unwrap();
    let best_val = out.records[best].val_acc.unwrap();
    assert!(out.records.iter().all(|r| r.val_acc.unwrap() <= best_val));
    assert!(out.records[..best].iter().all(|r| r.val_acc.unwrap() < best_val));
    assert_eq!(out.records.last().unwrap().best_test_acc, out.records[best].test_acc);
    assert_eq!(
        fedfm_core::metrics::accuracy(&out.best_params, &test).unwrap(),
        out.best_test_acc
    );
}

#[test]
fn client_count_mismatch_is_a_config_error() {
    let (split, test) = task(1);
    let c = FedConfig { clients: 5, ..cfg(Algorithm::FedAvg) };
    assert!(matches!(run_experiment(&c, &split, &test), Err(fedfm_core::FedError::Config(_))));
    let init = MlpParams::init(&[8, 5], 0).unwrap();
    let c = FedConfig { hidden: vec![], ..cfg(Algorithm::FedAvg) };
    assert!(run_with_init(&c, split.clients(), &[], &test, init).is_ok());
}
