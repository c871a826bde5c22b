//! End-to-end selection: cost matrix, greedy start, exchange refinement, and
//! the per-class variant for labeled pools.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{normalize_grad_norms, CostRows, DistanceMatrix, LazyPooMatrix, Metric, PooCostMatrix};
use crate::error::{Error, Result};
use crate::greedy::{greedy_select, CoresetState};
use crate::ot::solve_ot_on_subset;
use crate::pool::Pool;
use crate::refine::{refine_loop, RefineParams, DEFAULT_K, DEFAULT_T_MAX};
use crate::report::{ClassReport, ConfigEcho, SelectionReport, Timings};

pub const DEFAULT_LAMBDA: f64 = 0.1;
/// Trade-off values tried by a lambda sweep.
pub const LAMBDA_GRID: [f64; 5] = [0.0, 0.05, 0.1, 0.3, 0.5];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Initialization {
    /// Greedy p-median start.
    #[default]
    Greedy,
    /// Uniform random subset drawn with the configured seed.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub budget: usize,
    pub lambda: f64,
    pub k: usize,
    pub t_max: usize,
    pub seed: u64,
    pub normalize_grad: bool,
    pub labeled: bool,
    pub redistribute_remainder: bool,
    pub metric: Metric,
    pub init: Initialization,
    /// Compute cost rows on demand instead of materializing `|T| x |V|`.
    pub on_demand_costs: bool,
}

impl SelectionConfig {
    pub fn new(budget: usize) -> Self {
        Self {
            budget,
            lambda: DEFAULT_LAMBDA,
            k: DEFAULT_K,
            t_max: DEFAULT_T_MAX,
            seed: 0,
            normalize_grad: false,
            labeled: false,
            redistribute_remainder: false,
            metric: Metric::Euclidean,
            init: Initialization::Greedy,
            on_demand_costs: false,
        }
    }

    pub fn validate(&self, train_size: usize) -> Result<()> {
        if self.budget == 0 || self.budget > train_size {
            return Err(Error::InvalidInput(format!(
                "budget {} outside 1..={train_size}",
                self.budget
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidInput("k must be at least 1".into()));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::InvalidInput(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    fn refine_params(&self) -> RefineParams {
        RefineParams {
            k: self.k,
            t_max: self.t_max,
        }
    }
}

/// A proxy score split into its transport and gradient parts:
/// `score = ot - grad_term`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub score: f64,
    pub ot: f64,
    pub grad_term: f64,
}

/// `OT_D(mu_S, mu_V) - lambda * mean_{i in S} g_i`, solved on the distance
/// matrix directly.
pub fn poo_score(d: &DistanceMatrix, g: &[f64], lambda: f64, subset: &[usize]) -> Result<ScoreBreakdown> {
    if g.len() != d.n_rows() {
        return Err(Error::DimensionMismatch {
            expected: d.n_rows(),
            actual: g.len(),
        });
    }
    let ot = solve_ot_on_subset(d, subset)?.objective();
    let grad_term = lambda * subset.iter().map(|&i| g[i]).sum::<f64>() / subset.len() as f64;
    Ok(ScoreBreakdown {
        score: ot - grad_term,
        ot,
        grad_term,
    })
}

/// Gradient norms as used for the cost matrix (optionally min-max scaled).
pub fn effective_grad_norms(train: &Pool, normalize: bool) -> Vec<f64> {
    let g: Vec<f64> = train.grad_norms().iter().map(|&x| f64::from(x)).collect();
    if normalize {
        normalize_grad_norms(&g)
    } else {
        g
    }
}

/// Uniform sample of `n` distinct indices from `0..pool_size`, sorted,
/// deterministic per seed.
pub fn random_baseline(seed: u64, n: usize, pool_size: usize) -> Result<Vec<usize>> {
    if n == 0 || n > pool_size {
        return Err(Error::InvalidInput(format!("budget {n} outside 1..={pool_size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = sample(&mut rng, pool_size, n).into_vec();
    out.sort_unstable();
    Ok(out)
}

fn check_pools(train: &Pool, val: &Pool) -> Result<()> {
    if train.dim() != val.dim() {
        return Err(Error::DimensionMismatch {
            expected: train.dim(),
            actual: val.dim(),
        });
    }
    Ok(())
}

/// Single-pool selection (no class split).
pub fn select(config: &SelectionConfig, train: &Pool, val: &Pool) -> Result<SelectionReport> {
    check_pools(train, val)?;
    config.validate(train.len())?;
    let start = Instant::now();
    let g = effective_grad_norms(train, config.normalize_grad);
    let mut report = if config.on_demand_costs {
        let m = LazyPooMatrix::new(train, val, config.metric, &g, config.lambda)?;
        run_pipeline(config, &m, &g, start)?
    } else {
        let d = DistanceMatrix::compute_with(train, val, config.metric)?;
        let m = PooCostMatrix::build(&d, &g, config.lambda)?;
        run_pipeline(config, &m, &g, start)?
    };
    report.timings.total_secs = start.elapsed().as_secs_f64();
    report.validate(train.len())?;
    Ok(report)
}

/// Runs the two-stage pipeline on a prepared cost matrix.
pub fn run_pipeline<C: CostRows + ?Sized>(
    config: &SelectionConfig,
    m: &C,
    g: &[f64],
    start: Instant,
) -> Result<SelectionReport> {
    config.validate(m.n_rows())?;
    let cost_secs = start.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let (initial, greedy_trajectory) = match config.init {
        Initialization::Greedy => {
            let r = greedy_select(m, config.budget)?;
            (r.state, r.steps)
        }
        Initialization::Random => {
            let idx = random_baseline(config.seed, config.budget, m.n_rows())?;
            (CoresetState::from_subset(m, &idx)?, Vec::new())
        }
    };
    let greedy_secs = t0.elapsed().as_secs_f64();
    let initial_indices = initial.sorted_indices();

    let t1 = Instant::now();
    let (state, trajectory, exchanges, termination, pass_at_1, avg_secs, initial_score) = if initial.len() >= 2 {
        let out = refine_loop(m, initial, config.refine_params())?;
        let initial_score = out.score_trajectory[0].1;
        let pass = out.pass_at_1();
        let avg = out.avg_seconds_per_exchange();
        (
            out.state,
            out.score_trajectory,
            out.exchanges,
            Some(out.termination),
            pass,
            avg,
            initial_score,
        )
    } else {
        let score = solve_ot_on_subset(m, &initial.selected)?.objective();
        (initial, vec![(0, score)], Vec::new(), None, None, None, score)
    };
    let refine_secs = t1.elapsed().as_secs_f64();

    let selected_indices = state.sorted_indices();
    let final_score = trajectory.last().expect("non-empty trajectory").1;
    let lambda = config.lambda;
    let grad_component =
        lambda * selected_indices.iter().map(|&i| g[i]).sum::<f64>() / selected_indices.len() as f64;
    if let Some(p) = pass_at_1 {
        log::info!(
            "refinement: {} exchanges, pass@1 {:.3}, {:.4}s per exchange",
            exchanges.len(),
            p,
            avg_secs.unwrap_or(0.0)
        );
    }

    Ok(SelectionReport {
        selected_indices,
        initial_indices,
        greedy_trajectory,
        initial_score,
        final_score,
        ot_component: final_score + grad_component,
        grad_component,
        score_trajectory: trajectory,
        exchange_log: exchanges,
        termination,
        pass_at_1,
        avg_seconds_per_exchange: avg_secs,
        classes: Vec::new(),
        config_echo: ConfigEcho {
            selection: config.clone(),
            inputs: BTreeMap::new(),
        },
        timings: Timings {
            cost_matrix_secs: cost_secs,
            greedy_secs,
            refine_secs,
            total_secs: start.elapsed().as_secs_f64(),
        },
    })
}

/// One class of a labeled split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub label: i64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub proportion: f64,
    pub budget: usize,
}

/// `floor(n * val_counts[k] / sum(val_counts))`, then capped at
/// `train_counts[k]`. With `redistribute`, the leftover budget goes one unit
/// at a time to classes by largest fractional part (ties to the earlier
/// class), skipping classes at their cap.
pub fn class_budgets(n: usize, val_counts: &[usize], train_counts: &[usize], redistribute: bool) -> Vec<usize> {
    let total: usize = val_counts.iter().sum();
    if total == 0 {
        return vec![0; val_counts.len()];
    }
    let mut budgets: Vec<usize> = val_counts
        .iter()
        .zip(train_counts)
        .map(|(&v, &t)| {
            let b = n * v / total;
            if b > t {
                log::warn!("class budget {b} exceeds {t} training points; clamped");
            }
            b.min(t)
        })
        .collect();
    if redistribute {
        let capacity: usize = train_counts.iter().sum();
        let target = n.min(capacity);
        // fractional part of n * v / total, as the exact remainder
        let mut order: Vec<usize> = (0..val_counts.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = (n * val_counts[a]) % total;
            let rb = (n * val_counts[b]) % total;
            rb.cmp(&ra).then(a.cmp(&b))
        });
        let mut assigned: usize = budgets.iter().sum();
        while assigned < target {
            let mut progressed = false;
            for &k in &order {
                if assigned == target {
                    break;
                }
                if budgets[k] < train_counts[k] {
                    budgets[k] += 1;
                    assigned += 1;
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
    }
    budgets
}

/// Splits labeled pools by class and assigns per-class budgets.
pub fn partition_classes(config: &SelectionConfig, train: &Pool, val: &Pool) -> Result<Vec<ClassPartition>> {
    let train_labels = train
        .labels()
        .ok_or_else(|| Error::InvalidInput("labeled selection needs training labels".into()))?;
    let val_labels = val
        .labels()
        .ok_or_else(|| Error::InvalidInput("labeled selection needs validation labels".into()))?;

    let mut by_train: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in train_labels.iter().enumerate() {
        by_train.entry(l).or_default().push(i);
    }
    let mut by_val: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (j, &l) in val_labels.iter().enumerate() {
        by_val.entry(l).or_default().push(j);
    }
    for label in by_val.keys() {
        if !by_train.contains_key(label) {
            return Err(Error::InvalidInput(format!(
                "validation class {label} has no training points"
            )));
        }
    }
    let labels: BTreeSet<i64> = by_train.keys().chain(by_val.keys()).copied().collect();
    let labels: Vec<i64> = labels.into_iter().collect();
    let val_counts: Vec<usize> = labels
        .iter()
        .map(|l| by_val.get(l).map_or(0, Vec::len))
        .collect();
    let train_counts: Vec<usize> = labels
        .iter()
        .map(|l| by_train.get(l).map_or(0, Vec::len))
        .collect();
    let budgets = class_budgets(config.budget, &val_counts, &train_counts, config.redistribute_remainder);
    Ok(labels
        .iter()
        .zip(budgets)
        .map(|(&label, budget)| ClassPartition {
            label,
            train: by_train.remove(&label).unwrap_or_default(),
            val: by_val.remove(&label).unwrap_or_default(),
            proportion: val_counts[labels.iter().position(|&l| l == label).unwrap()] as f64
                / val.len() as f64,
            budget,
        })
        .collect())
}

/// Runs the single-pool pipeline on one class; indices in the returned
/// report are global training indices.
pub fn select_class(config: &SelectionConfig, train: &Pool, val: &Pool, class: &ClassPartition) -> Result<ClassReport> {
    let skipped = class.budget == 0 || class.val.is_empty();
    if skipped {
        log::warn!("class {} gets no budget; skipped", class.label);
        return Ok(ClassReport {
            label: class.label,
            train_size: class.train.len(),
            val_size: class.val.len(),
            proportion: class.proportion,
            budget: class.budget,
            realized_proportion: 0.0,
            skipped: true,
            report: None,
        });
    }
    let sub_train = train.subset(&class.train)?;
    let sub_val = val.subset(&class.val)?;
    let mut sub_config = config.clone();
    sub_config.budget = class.budget;
    sub_config.labeled = false;
    let mut report = select(&sub_config, &sub_train, &sub_val)?;
    let to_global = |v: &mut Vec<usize>| v.iter_mut().for_each(|i| *i = class.train[*i]);
    to_global(&mut report.selected_indices);
    to_global(&mut report.initial_indices);
    for step in &mut report.greedy_trajectory {
        step.picked = class.train[step.picked];
    }
    for ex in &mut report.exchange_log {
        ex.removed = class.train[ex.removed];
        ex.added = class.train[ex.added];
    }
    report.selected_indices.sort_unstable();
    report.initial_indices.sort_unstable();
    Ok(ClassReport {
        label: class.label,
        train_size: class.train.len(),
        val_size: class.val.len(),
        proportion: class.proportion,
        budget: class.budget,
        realized_proportion: 0.0,
        skipped: false,
        report: Some(report),
    })
}

/// Per-class selection with budgets `floor(n * |V_k| / |V|)`; classes run
/// independently and their selections are unioned.
pub fn select_labeled(config: &SelectionConfig, train: &Pool, val: &Pool) -> Result<SelectionReport> {
    check_pools(train, val)?;
    config.validate(train.len())?;
    let start = Instant::now();
    let classes = partition_classes(config, train, val)?;
    let mut reports: Vec<ClassReport> = classes
        .par_iter()
        .map(|c| select_class(config, train, val, c))
        .collect::<Result<_>>()?;

    let mut selected: Vec<usize> = reports
        .iter()
        .filter_map(|c| c.report.as_ref())
        .flat_map(|r| r.selected_indices.iter().copied())
        .collect();
    selected.sort_unstable();
    let total = selected.len().max(1) as f64;
    for c in &mut reports {
        if let Some(r) = &c.report {
            c.realized_proportion = r.selected_indices.len() as f64 / total;
        }
    }
    let mut initial: Vec<usize> = reports
        .iter()
        .filter_map(|c| c.report.as_ref())
        .flat_map(|r| r.initial_indices.iter().copied())
        .collect();
    initial.sort_unstable();

    // class-weighted proxy objective
    let weighted = |f: fn(&SelectionReport) -> f64| -> f64 {
        reports
            .iter()
            .filter_map(|c| c.report.as_ref().map(|r| c.proportion * f(r)))
            .sum()
    };
    let initial_score = weighted(|r| r.initial_score);
    let final_score = weighted(|r| r.final_score);
    let ot_component = weighted(|r| r.ot_component);
    let grad_component = weighted(|r| r.grad_component);
    let sum_secs = |f: fn(&Timings) -> f64| -> f64 {
        reports
            .iter()
            .filter_map(|c| c.report.as_ref().map(|r| f(&r.timings)))
            .sum()
    };

    let report = SelectionReport {
        selected_indices: selected,
        initial_indices: initial,
        greedy_trajectory: Vec::new(),
        initial_score,
        final_score,
        ot_component,
        grad_component,
        score_trajectory: vec![(0, initial_score), (1, final_score)],
        exchange_log: Vec::new(),
        termination: None,
        pass_at_1: None,
        avg_seconds_per_exchange: None,
        config_echo: ConfigEcho {
            selection: config.clone(),
            inputs: BTreeMap::new(),
        },
        timings: Timings {
            cost_matrix_secs: sum_secs(|t| t.cost_matrix_secs),
            greedy_secs: sum_secs(|t| t.greedy_secs),
            refine_secs: sum_secs(|t| t.refine_secs),
            total_secs: start.elapsed().as_secs_f64(),
        },
        classes: reports,
    };
    report.validate(train.len())?;
    Ok(report)
}

/// Dispatches on `config.labeled`.
pub fn run(config: &SelectionConfig, train: &Pool, val: &Pool) -> Result<SelectionReport> {
    if config.labeled {
        select_labeled(config, train, val)
    } else {
        select(config, train, val)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budgets_floor_rule() {
        assert_eq!(class_budgets(64, &[70, 30], &[1000, 1000], false), vec![44, 19]);
        assert_eq!(class_budgets(10, &[1], &[100], false), vec![10]);
    }

    #[test]
    fn budgets_redistribute_largest_fraction() {
        // 64 * 70 / 100 = 44.8, 64 * 30 / 100 = 19.2
        assert_eq!(class_budgets(64, &[70, 30], &[1000, 1000], true), vec![45, 19]);
        // equal fractions: earlier class first
        assert_eq!(class_budgets(3, &[1, 1], &[10, 10], true), vec![2, 1]);
    }

    #[test]
    fn budgets_clamped_to_training_size() {
        assert_eq!(class_budgets(10, &[5, 5], &[2, 100], false), vec![2, 5]);
        assert_eq!(class_budgets(10, &[5, 5], &[2, 100], true), vec![2, 8]);
        assert_eq!(class_budgets(10, &[5, 5], &[2, 3], true), vec![2, 3]);
    }

    #[test]
    fn random_baseline_deterministic_and_exhaustive() {
        let a = random_baseline(42, 5, 20).unwrap();
        assert_eq!(a, random_baseline(42, 5, 20).unwrap());
        assert_eq!(a.len(), 5);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(random_baseline(1, 7, 7).unwrap(), (0..7).collect::<Vec<_>>());
        assert!(random_baseline(1, 8, 7).is_err());
        assert!(random_baseline(1, 0, 7).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = SelectionConfig::new(3);
        assert!(c.validate(3).is_ok());
        assert!(c.validate(2).is_err());
        c.k = 0;
        assert!(c.validate(3).is_err());
        c.k = 1;
        c.lambda = -1.0;
        assert!(c.validate(3).is_err());
    }
}
