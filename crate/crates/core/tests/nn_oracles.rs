//! Network forward/backward against naive reimplementations in this file.

use fedfm_core::losses::{combined_local_loss, AnchorSet, Matching};
use fedfm_core::nn::{sgd_step, Matrix, MlpParams, ParamGrads, SgdConfig};
use fedfm_core::data::gen_gaussian_mixture;
use fedfm_core::metrics::accuracy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain nested-loop forward pass; returns (penultimate activation, logits) per sample.
fn naive_forward(p: &MlpParams<f64>, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut act = x.to_vec();
    let mut feature = act.clone();
    let layers = p.num_layers();
    for l in 0..layers {
        let w = &p.weights()[l];
        let b = &p.biases()[l];
        let mut z = vec![0.0; w.cols()];
        for j in 0..w.cols() {
            let mut s = b[j];
            for i in 0..w.rows() {
                s += act[i] * w.get(i, j);
            }
            z[j] = s;
        }
        if l + 1 < layers {
            act = z.iter().map(|v| if *v > 0.0 { *v } else { 0.0 }).collect();
            feature = act.clone();
        } else {
            act = z;
        }
    }
    (feature, act)
}

fn naive_ce(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logits.iter().map(|z| (z - m).exp()).sum();
    m + s.ln() - logits[label]
}

fn naive_normalize(f: &[f64]) -> Vec<f64> {
    let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < 1e-12 {
        f.to_vec()
    } else {
        f.iter().map(|v| v / n).collect()
    }
}

#[derive(Clone, Copy)]
enum Objective {
    Ce,
    L2,
    Cg(f64),
    Combined(f64, f64),
}

/// Objective evaluated entirely with the naive helpers above.
fn naive_objective(p: &MlpParams<f64>, xs: &[Vec<f64>], labels: &[usize], anchors: &[Vec<f64>], obj: Objective) -> f64 {
    let mut total = 0.0;
    for (x, &c) in xs.iter().zip(labels) {
        let (feat, logits) = naive_forward(p, x);
        let f = naive_normalize(&feat);
        let l2 = || f.iter().zip(&anchors[c]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let cg = |alpha: f64| {
            let sims: Vec<f64> = anchors.iter().map(|a| a.iter().zip(&f).map(|(x, y)| x * y).sum::<f64>() / alpha).collect();
            naive_ce(&sims, c)
        };
        total += match obj {
            Objective::Ce => naive_ce(&logits, c),
            Objective::L2 => l2(),
            Objective::Cg(alpha) => cg(alpha),
            Objective::Combined(lambda, alpha) => naive_ce(&logits, c) + lambda * cg(alpha),
        };
    }
    total / xs.len() as f64
}

fn analytic(p: &MlpParams<f64>, x: &Matrix<f64>, labels: &[usize], anchors: &AnchorSet<f64>, obj: Objective) -> Vec<f64> {
    let cache = p.forward(x).unwrap();
    let (matching, lambda, task) = match obj {
        Objective::Ce => (Matching::None, 0.0, true),
        Objective::L2 => (Matching::L2, 1.0, false),
        Objective::Cg(alpha) => (Matching::Contrastive { alpha }, 1.0, false),
        Objective::Combined(lambda, alpha) => (Matching::Contrastive { alpha }, lambda, true),
    };
    let loss = combined_local_loss(&cache, labels, Some(anchors), lambda, matching).unwrap();
    let d_logits = if task { loss.d_logits } else { Matrix::zeros(labels.len(), p.num_classes()) };
    p.backward(&cache, &d_logits, &loss.d_features).unwrap().to_flat()
}

fn random_instance(seed: u64) -> (MlpParams<f64>, Vec<Vec<f64>>, Vec<usize>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = MlpParams::<f64>::init(&[4, 6, 5, 3], seed).unwrap();
    for b in p.biases_mut() {
        b.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
    }
    let xs: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
    let anchors: Vec<Vec<f64>> = (0..3)
        .map(|_| naive_normalize(&(0..5).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
        .collect();
    (p, xs, labels, anchors)
}

fn fd_check(obj: Objective) {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let (p, xs, labels, anchors) = random_instance(seed);
        let x = Matrix::from_rows(&xs).unwrap();
        let a_set = AnchorSet::from_matrix(Matrix::from_rows(&anchors).unwrap(), 0).unwrap();
        let grad = analytic(&p, &x, &labels, &a_set, obj);
        let base = p.to_flat();
        let eps = 1e-5;
        for i in 0..base.len() {
            let mut probe = p.clone();
            let mut flat = base.clone();
            flat[i] += eps;
            probe.set_flat(&flat).unwrap();
            let up = naive_objective(&probe, &xs, &labels, &anchors, obj);
            flat[i] -= 2.0 * eps;
            probe.set_flat(&flat).unwrap();
            let down = naive_objective(&probe, &xs, &labels, &anchors, obj);
            let num = (up - down) / (2.0 * eps);
            let rel = (grad[i] - num).abs() / 1f64.max(grad[i].abs()).max(num.abs());
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4, "max relative error {worst:e}");
}

#[test]
fn forward_matches_naive_loops() {
    let p = MlpParams::<f64>::init(&[2, 16, 8, 3], 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xs: Vec<Vec<f64>> = (0..9).map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
    let cache = p.forward(&Matrix::from_rows(&xs).unwrap()).unwrap();
    for (i, x) in xs.iter().enumerate() {
        let (feat, logits) = naive_forward(&p, x);
        for (a, b) in cache.logits().row(i).iter().zip(&logits) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in cache.feature().row(i).iter().zip(&feat) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn finite_difference_cross_entropy() {
    fd_check(Objective::Ce);
}

#[test]
fn finite_difference_l2_match() {
    fd_check(Objective::L2);
}

#[test]
fn finite_difference_contrastive_guiding() {
    fd_check(Objective::Cg(0.5));
}

#[test]
fn finite_difference_combined_objective() {
    fd_check(Objective::Combined(2.5, 0.8));
}

#[test]
fn single_sgd_step_matches_hand_computation() {
    // one linear layer 1 -> 2, x = 1, label 0, zero weights: softmax (1/2, 1/2)
    let p = MlpParams::from_parts(vec![Matrix::zeros(1, 2)], vec![vec![0.0, 0.0]]).unwrap();
    let cache = p.forward(&Matrix::from_rows(&[vec![1.0]]).unwrap()).unwrap();
    let loss = combined_local_loss(&cache, &[0], None, 0.0, Matching::None).unwrap();
    let g = p.backward(&cache, &loss.d_logits, &loss.d_features).unwrap();
    let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
    let (next, _) = sgd_step(&p, &g, &ParamGrads::zeros_like(&p), &cfg).unwrap();
    // gradient (p − onehot)·x = (−0.5, 0.5) for both W and b
    assert_eq!(next.to_flat(), vec![0.05, -0.05, 0.05, -0.05]);
}

#[test]
fn central_training_separates_two_far_blobs() {
    let ds = gen_gaussian_mixture::<f64>(2, 4, 100, 10.0, 8).unwrap();
    let mut p = MlpParams::<f64>::init(&[4, 2], 1).unwrap();
    let cfg = SgdConfig { lr: 0.05, momentum: 0.9, weight_decay: 0.0 };
    let mut v = ParamGrads::zeros_like(&p);
    for _ in 0..200 {
        let cache = p.forward(ds.inputs()).unwrap();
        let loss = combined_local_loss(&cache, ds.labels(), None, 0.0, Matching::None).unwrap();
        let g = p.backward(&cache, &loss.d_logits, &loss.d_features).unwrap();
        fedfm_core::nn::sgd_step_in_place(&mut p, &g, &mut v, &cfg).unwrap();
    }
    assert_eq!(accuracy(&p, &ds).unwrap(), 1.0);
}
