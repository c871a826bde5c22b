//! Exchange refinement with dual-based pruning.
//!
//! Each iteration solves the subset transport problem once, then estimates
//! the marginal improvement of adding every non-member and removing every
//! member from the row duals alone:
//!
//! ```text
//! f(j)  = min_{i in S, i != z} (M(i, j) - u_i)
//! K_j   = M(z, j) - f(j)
//! F(y)  = y / |S| + (1/|V|) sum_j min(K_j - y, 0)
//! MI(z) ~ max_y F(y)
//! ```
//!
//! `F` is concave and piecewise linear with slope `1/|S| - #{K_j < y}/|V|`,
//! so the maximum sits on the `R`-th smallest knot, `R = ceil(|V| / |S|)`.
//! The `k` lowest-MI outsiders and `k` highest-MI members are paired, and the
//! pairs are verified by exact solves, most promising first. The first pair
//! that strictly lowers the score is committed.

use std::cmp::Ordering;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::CostRows;
use crate::error::{Error, Result};
use crate::greedy::CoresetState;
use crate::ot::{canonical_subset, solve_ot_on_subset, SubsetSolution};

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_T_MAX: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Add,
    Remove,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub candidate: usize,
    pub direction: Direction,
    pub value: f64,
    pub y_hat: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExchangeRecord {
    pub removed: usize,
    pub added: usize,
    pub score_before: f64,
    pub score_after: f64,
    /// 1-based position of the accepted pair in the scan order.
    pub candidates_tested: usize,
}

/// Knot rank `ceil(|V| / |S|)`, clamped to `1..=|V|`.
pub fn knot_rank(val_size: usize, set_size: usize) -> usize {
    val_size.div_ceil(set_size.max(1)).clamp(1, val_size.max(1))
}

/// `F(y) = y / |S| + (1/|V|) sum_j min(K_j - y, 0)`.
pub fn f_objective(knots: &[f64], y: f64, set_size: usize) -> f64 {
    let tail: f64 = knots.iter().map(|&k| (k - y).min(0.0)).sum();
    y / set_size as f64 + tail / knots.len() as f64
}

fn kth_smallest(values: &[f64], rank: usize) -> f64 {
    let mut buf = values.to_vec();
    let (_, v, _) = buf.select_nth_unstable_by(rank - 1, f64::total_cmp);
    *v
}

/// Per-iteration precomputation over `(M, S, u*)`: for each column the best
/// and second-best `M(i, j) - u_i` over `S`, so that `f` for any candidate is
/// a lookup.
pub struct DualContext {
    rows: Vec<usize>,
    u: Vec<f64>,
    best: Vec<f64>,
    best_row: Vec<usize>,
    second: Vec<f64>,
    member: Vec<bool>,
}

impl DualContext {
    /// `rows` is the subset (any order), `u` the matching duals.
    pub fn new<C: CostRows + ?Sized>(m: &C, rows: &[usize], u: &[f64]) -> Result<Self> {
        if rows.len() != u.len() {
            return Err(Error::DimensionMismatch {
                expected: rows.len(),
                actual: u.len(),
            });
        }
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by_key(|&k| rows[k]);
        let sorted: Vec<usize> = order.iter().map(|&k| rows[k]).collect();
        let u: Vec<f64> = order.iter().map(|&k| u[k]).collect();
        let sorted = canonical_subset(&sorted, m.n_rows())?;

        let n = m.n_cols();
        let mut best = vec![f64::INFINITY; n];
        let mut best_row = vec![usize::MAX; n];
        let mut second = vec![f64::INFINITY; n];
        for (&i, &ui) in sorted.iter().zip(&u) {
            let row = m.row(i);
            for j in 0..n {
                let x = row[j] - ui;
                if x < best[j] {
                    second[j] = best[j];
                    best[j] = x;
                    best_row[j] = i;
                } else if x < second[j] {
                    second[j] = x;
                }
            }
        }
        let mut member = vec![false; m.n_rows()];
        sorted.iter().for_each(|&i| member[i] = true);
        Ok(Self {
            rows: sorted,
            u,
            best,
            best_row,
            second,
            member,
        })
    }

    pub fn from_solution<C: CostRows + ?Sized>(m: &C, sol: &SubsetSolution) -> Result<Self> {
        Self::new(m, &sol.rows, &sol.solution.dual_u)
    }

    pub fn set_size(&self) -> usize {
        self.rows.len()
    }

    pub fn is_member(&self, z: usize) -> bool {
        self.member[z]
    }

    pub fn duals(&self) -> &[f64] {
        &self.u
    }

    pub fn f_values(&self, z: usize) -> Result<Vec<f64>> {
        if z >= self.member.len() {
            return Err(Error::IndexOutOfRange {
                index: z,
                size: self.member.len(),
            });
        }
        if !self.member[z] {
            return Ok(self.best.clone());
        }
        if self.rows.len() < 2 {
            return Err(Error::InvalidInput(
                "removal from a single-element subset leaves nothing to transport from".into(),
            ));
        }
        Ok(self
            .best
            .iter()
            .zip(&self.second)
            .zip(&self.best_row)
            .map(|((&b, &s), &r)| if r == z { s } else { b })
            .collect())
    }

    pub fn estimate<C: CostRows + ?Sized>(&self, m: &C, z: usize) -> Result<MiEstimate> {
        let f = self.f_values(z)?;
        Ok(estimate_from_f(&m.row(z), &f, z, self.member[z], self.rows.len()))
    }

    /// Estimates for every training row, in index order.
    pub fn estimate_all<C: CostRows + ?Sized>(&self, m: &C) -> Result<Vec<MiEstimate>> {
        (0..m.n_rows())
            .into_par_iter()
            .map(|z| self.estimate(m, z))
            .collect()
    }
}

fn estimate_from_f(row: &[f64], f: &[f64], z: usize, member: bool, set_size: usize) -> MiEstimate {
    let knots: Vec<f64> = row.iter().zip(f).map(|(&mz, &fj)| mz - fj).collect();
    let rank = knot_rank(knots.len(), set_size);
    let y_hat = kth_smallest(&knots, rank);
    MiEstimate {
        candidate: z,
        direction: if member { Direction::Remove } else { Direction::Add },
        value: f_objective(&knots, y_hat, set_size),
        y_hat,
    }
}

/// `f(j) = min_{i in S, i != z} (M(i, j) - u_i)`, computed directly.
/// `u_star` is aligned with `subset` as given.
pub fn f_values<C: CostRows + ?Sized>(m: &C, subset: &[usize], u_star: &[f64], z: usize) -> Result<Vec<f64>> {
    if subset.len() != u_star.len() {
        return Err(Error::DimensionMismatch {
            expected: subset.len(),
            actual: u_star.len(),
        });
    }
    if z >= m.n_rows() {
        return Err(Error::IndexOutOfRange {
            index: z,
            size: m.n_rows(),
        });
    }
    let others: Vec<(usize, f64)> = subset
        .iter()
        .zip(u_star)
        .filter(|(&i, _)| i != z)
        .map(|(&i, &u)| (i, u))
        .collect();
    if others.is_empty() {
        return Err(Error::InvalidInput(
            "removal from a single-element subset leaves nothing to transport from".into(),
        ));
    }
    let mut f = vec![f64::INFINITY; m.n_cols()];
    for (i, ui) in others {
        for (fj, &x) in f.iter_mut().zip(m.row(i).iter()) {
            *fj = fj.min(x - ui);
        }
    }
    Ok(f)
}

/// Dual-based MI estimate for a single candidate, computed from scratch.
pub fn estimate_mi<C: CostRows + ?Sized>(m: &C, subset: &[usize], u_star: &[f64], z: usize) -> Result<MiEstimate> {
    let f = f_values(m, subset, u_star, z)?;
    let member = subset.contains(&z);
    Ok(estimate_from_f(&m.row(z), &f, z, member, subset.len()))
}

/// MI by definition: two exact subset solves.
pub fn exact_mi<C: CostRows + ?Sized>(m: &C, subset: &[usize], z: usize) -> Result<f64> {
    let base = solve_ot_on_subset(m, subset)?.objective();
    if subset.contains(&z) {
        if subset.len() < 2 {
            return Err(Error::InvalidInput("cannot remove from a single-element subset".into()));
        }
        let rest: Vec<usize> = subset.iter().copied().filter(|&i| i != z).collect();
        Ok(base - solve_ot_on_subset(m, &rest)?.objective())
    } else {
        let mut grown = subset.to_vec();
        grown.push(z);
        Ok(solve_ot_on_subset(m, &grown)?.objective() - base)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pruned {
    /// Members most worth removing: largest MI first.
    pub inner: Vec<MiEstimate>,
    /// Outsiders most worth adding: smallest MI first.
    pub outer: Vec<MiEstimate>,
}

fn by_value_then_index(a: &MiEstimate, b: &MiEstimate) -> Ordering {
    a.value
        .total_cmp(&b.value)
        .then(a.candidate.cmp(&b.candidate))
}

/// Keeps the `k` smallest-MI additions and the `k` largest-MI removals.
/// `k` is clamped to each side's population; ties go to the lower index.
pub fn prune(estimates: &[MiEstimate], k: usize) -> Pruned {
    let mut outer: Vec<MiEstimate> = estimates
        .iter()
        .filter(|e| e.direction == Direction::Add)
        .copied()
        .collect();
    let mut inner: Vec<MiEstimate> = estimates
        .iter()
        .filter(|e| e.direction == Direction::Remove)
        .copied()
        .collect();
    outer.sort_by(by_value_then_index);
    inner.sort_by(|a, b| b.value.total_cmp(&a.value).then(a.candidate.cmp(&b.candidate)));
    outer.truncate(k);
    inner.truncate(k);
    Pruned { inner, outer }
}

/// Inner x outer pairs, most promising first: ascending
/// `estimate(o) - estimate(i)`, then by removed and added index.
pub fn candidate_pairs(pruned: &Pruned) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(f64, usize, usize)> = pruned
        .inner
        .iter()
        .flat_map(|i| {
            pruned
                .outer
                .iter()
                .map(move |o| (o.value - i.value, i.candidate, o.candidate))
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    pairs.into_iter().map(|(_, i, o)| (i, o)).collect()
}

/// Strict-decrease test with a relative margin against float noise.
pub fn improves(new_score: f64, old_score: f64) -> bool {
    new_score < old_score - 1e-12 * (1.0 + old_score.abs())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineParams {
    pub k: usize,
    pub t_max: usize,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            t_max: DEFAULT_T_MAX,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    IterationCap,
    NoImprovement,
    /// One side of the exchange is empty (`S` is all of `T`).
    NoCandidates,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub score: f64,
    pub pairs: usize,
    pub tested: usize,
    pub accepted: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub state: CoresetState,
    pub exchanges: Vec<ExchangeRecord>,
    pub iterations: Vec<IterationStats>,
    pub termination: Termination,
    /// Initial subset score followed by the score after each exchange.
    pub score_trajectory: Vec<(usize, f64)>,
    pub seconds: f64,
}

impl RefineOutcome {
    /// Fraction of verifying iterations whose first scanned pair was accepted.
    pub fn pass_at_1(&self) -> Option<f64> {
        let verifying: Vec<_> = self.iterations.iter().filter(|s| s.pairs > 0).collect();
        if verifying.is_empty() {
            return None;
        }
        let hits = verifying.iter().filter(|s| s.accepted && s.tested == 1).count();
        Some(hits as f64 / verifying.len() as f64)
    }

    pub fn avg_seconds_per_exchange(&self) -> Option<f64> {
        (!self.exchanges.is_empty()).then(|| self.seconds / self.exchanges.len() as f64)
    }

    pub fn final_score(&self) -> f64 {
        self.score_trajectory.last().map(|&(_, s)| s).unwrap_or(f64::NAN)
    }
}

fn swapped(selected: &[usize], out: usize, inn: usize) -> Vec<usize> {
    selected
        .iter()
        .map(|&x| if x == out { inn } else { x })
        .collect()
}

/// Iterated exchange refinement from `initial` (which needs `|S| >= 2`).
pub fn refine_loop<C: CostRows + ?Sized>(m: &C, initial: CoresetState, params: RefineParams) -> Result<RefineOutcome> {
    if initial.len() < 2 {
        return Err(Error::InvalidInput("refinement needs at least two selected points".into()));
    }
    if params.k == 0 {
        return Err(Error::InvalidInput("pruning width k must be at least 1".into()));
    }
    let start = Instant::now();
    let mut state = initial;
    let mut current = solve_ot_on_subset(m, &state.selected)?;
    state.poo_score = Some(current.objective());
    state.duals = Some(current.solution.dual_u.clone());

    let mut exchanges = Vec::new();
    let mut iterations = Vec::new();
    let mut trajectory = vec![(0, current.objective())];
    let mut termination = Termination::IterationCap;

    for t in 1..=params.t_max {
        let iter_start = Instant::now();
        let score = current.objective();
        let ctx = DualContext::from_solution(m, &current)?;
        let estimates = ctx.estimate_all(m)?;
        let pruned = prune(&estimates, params.k);
        let pairs = candidate_pairs(&pruned);
        if pairs.is_empty() {
            iterations.push(IterationStats {
                iteration: t,
                score,
                pairs: 0,
                tested: 0,
                accepted: false,
                seconds: iter_start.elapsed().as_secs_f64(),
            });
            termination = Termination::NoCandidates;
            break;
        }

        // Speculative parallel verification in scan-order chunks; the first
        // improving pair in scan order wins regardless of chunk size.
        let chunk = rayon::current_num_threads().max(1);
        let mut hit: Option<(usize, SubsetSolution)> = None;
        for (c, block) in pairs.chunks(chunk).enumerate() {
            let solved: Vec<Result<SubsetSolution>> = block
                .par_iter()
                .map(|&(i, o)| solve_ot_on_subset(m, &swapped(&state.selected, i, o)))
                .collect();
            for (k, sol) in solved.into_iter().enumerate() {
                let sol = sol?;
                if improves(sol.objective(), score) {
                    hit = Some((c * chunk + k, sol));
                    break;
                }
            }
            if hit.is_some() {
                break;
            }
        }

        match hit {
            Some((pos, sol)) => {
                let (removed, added) = pairs[pos];
                let selected = swapped(&state.selected, removed, added);
                state = CoresetState::from_subset(m, &selected)?;
                exchanges.push(ExchangeRecord {
                    removed,
                    added,
                    score_before: score,
                    score_after: sol.objective(),
                    candidates_tested: pos + 1,
                });
                trajectory.push((t, sol.objective()));
                iterations.push(IterationStats {
                    iteration: t,
                    score,
                    pairs: pairs.len(),
                    tested: pos + 1,
                    accepted: true,
                    seconds: iter_start.elapsed().as_secs_f64(),
                });
                log::debug!(
                    "iteration {t}: swap out {removed} in {added}, score {score} -> {} after {} candidates",
                    sol.objective(),
                    pos + 1
                );
                current = sol;
                state.poo_score = Some(current.objective());
                state.duals = Some(current.solution.dual_u.clone());
            }
            None => {
                iterations.push(IterationStats {
                    iteration: t,
                    score,
                    pairs: pairs.len(),
                    tested: pairs.len(),
                    accepted: false,
                    seconds: iter_start.elapsed().as_secs_f64(),
                });
                termination = Termination::NoImprovement;
                break;
            }
        }
    }

    Ok(RefineOutcome {
        state,
        exchanges,
        iterations,
        termination,
        score_trajectory: trajectory,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::PooCostMatrix;
    use ndarray::array;

    #[test]
    fn knot_rank_arithmetic() {
        assert_eq!(knot_rank(5000, 1024), 5);
        assert_eq!(knot_rank(5, 2), 3);
        assert_eq!(knot_rank(6, 3), 2);
        assert_eq!(knot_rank(3, 10), 1);
    }

    #[test]
    fn knot_rule_hand_example() {
        // |S| = 1, |V| = 2, knots (0, 10): F(0) = 0, F(10) = 5
        let knots = [0.0, 10.0];
        assert_eq!(f_objective(&knots, 0.0, 1), 0.0);
        assert_eq!(f_objective(&knots, 10.0, 1), 5.0);
        assert_eq!(kth_smallest(&knots, knot_rank(2, 1)), 10.0);
    }

    fn small() -> PooCostMatrix {
        PooCostMatrix::from_array(array![
            [1.0, 4.0, 2.0],
            [3.0, 1.0, 0.5],
            [2.0, 2.0, 2.0],
            [0.0, 5.0, 1.0]
        ])
        .unwrap()
    }

    #[test]
    fn f_independent_of_outsider() {
        let m = small();
        let u = [0.3, -0.3];
        let a = f_values(&m, &[0, 1], &u, 2).unwrap();
        let b = f_values(&m, &[0, 1], &u, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn f_singleton_min_for_member() {
        let m = small();
        let u = [0.3, -0.3];
        let f = f_values(&m, &[0, 1], &u, 0).unwrap();
        assert_eq!(f, vec![3.0 + 0.3, 1.0 + 0.3, 0.5 + 0.3]);
    }

    #[test]
    fn f_rejects_singleton_removal() {
        let m = small();
        assert!(f_values(&m, &[1], &[0.0], 1).is_err());
        let ctx = DualContext::new(&m, &[1], &[0.0]).unwrap();
        assert!(ctx.f_values(1).is_err());
        assert!(exact_mi(&m, &[1], 1).is_err());
    }

    fn est(candidate: usize, direction: Direction, value: f64) -> MiEstimate {
        MiEstimate {
            candidate,
            direction,
            value,
            y_hat: 0.0,
        }
    }

    #[test]
    fn prune_clamps_and_orders() {
        let e = vec![
            est(0, Direction::Remove, 0.5),
            est(1, Direction::Add, -0.2),
            est(2, Direction::Add, 0.4),
            est(3, Direction::Remove, 0.9),
            est(4, Direction::Add, -0.7),
        ];
        let p = prune(&e, 10);
        let outer: Vec<usize> = p.outer.iter().map(|e| e.candidate).collect();
        let inner: Vec<usize> = p.inner.iter().map(|e| e.candidate).collect();
        assert_eq!(outer, vec![4, 1, 2]);
        assert_eq!(inner, vec![3, 0]);
        let p1 = prune(&e, 1);
        assert_eq!(p1.outer[0].candidate, 4);
        assert_eq!(p1.inner[0].candidate, 3);
    }

    #[test]
    fn prune_ties_go_to_lowest_index() {
        let e: Vec<MiEstimate> = (0..6)
            .map(|i| est(i, if i % 2 == 0 { Direction::Remove } else { Direction::Add }, 1.0))
            .collect();
        let p = prune(&e, 2);
        assert_eq!(p.outer.iter().map(|e| e.candidate).collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(p.inner.iter().map(|e| e.candidate).collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn pair_order_most_promising_first() {
        let p = Pruned {
            inner: vec![est(0, Direction::Remove, 1.0), est(1, Direction::Remove, 0.0)],
            outer: vec![est(5, Direction::Add, -2.0), est(6, Direction::Add, 0.5)],
        };
        assert_eq!(candidate_pairs(&p), vec![(0, 5), (1, 5), (0, 6), (1, 6)]);
    }

    #[test]
    fn zero_iterations_is_noop() {
        let m = small();
        let init = CoresetState::from_subset(&m, &[0, 2]).unwrap();
        let out = refine_loop(&m, init.clone(), RefineParams { k: 3, t_max: 0 }).unwrap();
        assert_eq!(out.state.selected, init.selected);
        assert!(out.exchanges.is_empty());
        assert_eq!(out.termination, Termination::IterationCap);
    }

    #[test]
    fn refine_needs_two_points() {
        let m = small();
        let init = CoresetState::from_subset(&m, &[0]).unwrap();
        assert!(refine_loop(&m, init, RefineParams::default()).is_err());
    }

    #[test]
    fn full_set_has_no_candidates() {
        let m = small();
        let init = CoresetState::from_subset(&m, &[0, 1, 2, 3]).unwrap();
        let out = refine_loop(&m, init, RefineParams::default()).unwrap();
        assert_eq!(out.termination, Termination::NoCandidates);
        assert!(out.exchanges.is_empty());
    }

    #[test]
    fn strictness_margin() {
        assert!(improves(0.9, 1.0));
        assert!(!improves(1.0 - 1e-15, 1.0));
        assert!(!improves(1.0, 1.0));
    }
}
