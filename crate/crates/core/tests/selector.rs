mod common;

use otselect_core::cost::CostRows;
use otselect_core::oracle::{synth_pools, GradModel, SynthSpec};
use otselect_core::ot::solve_ot_on_subset;
use otselect_core::selector::{
    class_budgets, effective_grad_norms, poo_score, random_baseline, run, select, select_labeled, Initialization,
    SelectionConfig, LAMBDA_GRID,
};
use otselect_core::{DistanceMatrix, LazyPooMatrix, Metric, PooCostMatrix};
use rand::Rng;

use common::{hetero_pools, random_poo, random_subset, rng};

#[test]
fn zero_lambda_score_is_plain_transport() {
    let mut r = rng(21);
    let (d, g, _) = random_poo(&mut r, 15, 7, 0.0);
    let s = random_subset(&mut r, 15, 4);
    let b = poo_score(&d, &g, 0.0, &s).unwrap();
    assert_eq!(b.grad_term, 0.0);
    assert_eq!(b.score, solve_ot_on_subset(&d, &s).unwrap().objective());
}

#[test]
fn zero_gradients_leave_costs_unchanged() {
    let mut r = rng(22);
    let (d, _, _) = random_poo(&mut r, 10, 6, 0.0);
    let m = PooCostMatrix::build(&d, &[0.0; 10], 0.5).unwrap();
    assert_eq!(m.entries(), d.entries());
}

#[test]
fn score_splits_into_components() {
    let mut r = rng(23);
    for _ in 0..20 {
        let lambda = r.random_range(0.0..1.0);
        let (d, g, m) = random_poo(&mut r, 12, 6, lambda);
        let s = random_subset(&mut r, 12, 4);
        let b = poo_score(&d, &g, lambda, &s).unwrap();
        assert!((b.score - (b.ot - b.grad_term)).abs() < 1e-15);
        let mean_g = s.iter().map(|&i| g[i]).sum::<f64>() / 4.0;
        assert!((b.grad_term - lambda * mean_g).abs() < 1e-15);
        assert!((solve_ot_on_subset(&m, &s).unwrap().objective() - b.score).abs() < 1e-9);
    }
}

#[test]
fn budget_equal_to_pool_selects_everything() {
    let (train, val) = hetero_pools(24, 12, 8);
    let report = select(&SelectionConfig::new(12), &train, &val).unwrap();
    assert_eq!(report.selected_indices, (0..12).collect::<Vec<_>>());
    assert!(report.exchange_log.is_empty());
}

#[test]
fn budget_one_skips_refinement() {
    let (train, val) = hetero_pools(25, 12, 8);
    let report = select(&SelectionConfig::new(1), &train, &val).unwrap();
    assert_eq!(report.selected_indices.len(), 1);
    assert!(report.termination.is_none());
}

#[test]
fn invalid_configs_are_rejected() {
    let (train, val) = hetero_pools(26, 10, 5);
    assert!(select(&SelectionConfig::new(0), &train, &val).is_err());
    assert!(select(&SelectionConfig::new(11), &train, &val).is_err());
    let mut c = SelectionConfig::new(3);
    c.lambda = -0.1;
    assert!(select(&c, &train, &val).is_err());
    let mut c = SelectionConfig::new(3);
    c.k = 0;
    assert!(select(&c, &train, &val).is_err());
}

#[test]
fn on_demand_costs_match_dense() {
    let (train, val) = hetero_pools(27, 30, 15);
    let mut c = SelectionConfig::new(6);
    let dense = select(&c, &train, &val).unwrap();
    c.on_demand_costs = true;
    let lazy = select(&c, &train, &val).unwrap();
    assert_eq!(dense.selected_indices, lazy.selected_indices);
    assert_eq!(dense.final_score.to_bits(), lazy.final_score.to_bits());

    let g = effective_grad_norms(&train, false);
    let m = LazyPooMatrix::new(&train, &val, Metric::Euclidean, &g, 0.1).unwrap();
    let d = DistanceMatrix::compute(&train, &val).unwrap();
    let full = PooCostMatrix::build(&d, &g, 0.1).unwrap();
    assert_eq!(&m.materialize().entries(), &full.entries());
    assert_eq!(m.row(3).as_ref(), full.row(3).as_ref());
}

#[test]
fn final_score_matches_direct_evaluation() {
    for lambda in LAMBDA_GRID {
        let (train, val) = hetero_pools(28, 30, 15);
        let mut c = SelectionConfig::new(5);
        c.lambda = lambda;
        c.normalize_grad = true;
        let report = select(&c, &train, &val).unwrap();
        let d = DistanceMatrix::compute(&train, &val).unwrap();
        let g = effective_grad_norms(&train, true);
        let b = poo_score(&d, &g, lambda, &report.selected_indices).unwrap();
        assert!((b.score - report.final_score).abs() < 1e-9, "lambda {lambda}");
        assert!((b.ot - report.ot_component).abs() < 1e-9);
        assert!((b.grad_term - report.grad_component).abs() < 1e-12);
    }
}

#[test]
fn random_init_uses_seed() {
    let (train, val) = hetero_pools(29, 30, 15);
    let mut c = SelectionConfig::new(5);
    c.init = Initialization::Random;
    c.seed = 4;
    let report = select(&c, &train, &val).unwrap();
    assert_eq!(report.initial_indices, random_baseline(4, 5, 30).unwrap());
    assert!(report.greedy_trajectory.is_empty());
}

#[test]
fn random_baseline_is_seeded_and_valid() {
    let a = random_baseline(9, 7, 50).unwrap();
    assert_eq!(a, random_baseline(9, 7, 50).unwrap());
    assert_ne!(a, random_baseline(10, 7, 50).unwrap());
    assert!(a.windows(2).all(|w| w[0] < w[1]));
    assert!(a.iter().all(|&i| i < 50));
    assert!(random_baseline(0, 51, 50).is_err());
}

fn labeled(seed: u64, train_labels: Vec<i64>, val_labels: Vec<i64>) -> (otselect_core::Pool, otselect_core::Pool) {
    let mut spec = SynthSpec::new(seed, train_labels.len(), val_labels.len(), 3, 3);
    spec.grad_model = GradModel::LogNormal { mu: 0.0, sigma: 0.5 };
    let (t, v) = synth_pools(&spec).unwrap();
    (t.with_labels(train_labels).unwrap(), v.with_labels(val_labels).unwrap())
}

#[test]
fn single_class_labeled_equals_plain_selection() {
    let (train, val) = labeled(30, vec![5; 25], vec![5; 12]);
    let mut c = SelectionConfig::new(6);
    let plain = select(&c, &train, &val).unwrap();
    c.labeled = true;
    let by_class = run(&c, &train, &val).unwrap();
    assert_eq!(plain.selected_indices, by_class.selected_indices);
    assert!((plain.final_score - by_class.final_score).abs() < 1e-12);
}

#[test]
fn class_without_budget_is_skipped() {
    let mut tl = vec![0; 20];
    tl.extend([1; 5]);
    let mut vl = vec![0; 19];
    vl.push(1);
    let (train, val) = labeled(31, tl, vl);
    let mut c = SelectionConfig::new(10);
    c.labeled = true;
    let report = select_labeled(&c, &train, &val).unwrap();
    assert_eq!(report.classes.len(), 2);
    assert!(report.classes[1].skipped);
    assert_eq!(report.selected_indices.len(), 9);
    assert!(report.selected_indices.iter().all(|&i| i < 20));
    c.redistribute_remainder = true;
    let report = select_labeled(&c, &train, &val).unwrap();
    assert_eq!(report.selected_indices.len(), 10);
}

#[test]
fn missing_training_class_is_an_error() {
    let (train, val) = labeled(32, vec![0; 10], vec![0, 0, 1]);
    let mut c = SelectionConfig::new(3);
    c.labeled = true;
    assert!(run(&c, &train, &val).is_err());
}

#[test]
fn budgets_clamp_to_class_size() {
    assert_eq!(class_budgets(10, &[1, 1], &[2, 100], false), vec![2, 5]);
    assert_eq!(class_budgets(10, &[1, 1], &[2, 100], true), vec![2, 8]);
    assert_eq!(class_budgets(5, &[0, 3], &[4, 4], false), vec![0, 4]);
}
